// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Usage: aimsim_acceptance [--only N]...

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "aimsim/background.hpp"
#include "aimsim/cli.hpp"
#include "aimsim/kinematics.hpp"
#include "aimsim/metrics.hpp"
#include "aimsim/policy_model.hpp"
#include "aimsim/renderer.hpp"
#include "aimsim/scenario_io.hpp"

using namespace aimsim;
namespace fs = std::filesystem;

namespace {

// Tolerances.
constexpr double kRenderGradRelTol = 1e-3;
constexpr double kRenderGradFloor = 1e-9;  // smaller gradients are compared absolutely
// Small on purpose: bilinear texture kinks make wider stencils disagree when
// the ego turns and every background pixel moves.
constexpr double kRenderGradStep = 1e-7;
constexpr double kRenderBudgetSeconds = 60.0;
constexpr double kRigidMeanTol = 2.0 / 255.0;
constexpr double kStraightLineTol = 1e-12;
constexpr double kTurnRadiusRelTol = 1e-3;
constexpr double kJacobianTol = 1e-6;
constexpr double kMetricTol = 1e-9;
constexpr double kIouTol = 1e-2;
constexpr int kIouSamples = 1000000;
constexpr double kGhostTol = 1e-9;
constexpr double kAdeReduction = 0.5;
constexpr double kTrainBudgetSeconds = 30.0 * 60.0;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

AimMap square_map(std::shared_ptr<const Image> img, double half) {
    AimMap aim;
    aim.image = std::move(img);
    aim.corners = {Vec2{-half, half}, Vec2{half, half}, Vec2{half, -half}, Vec2{-half, -half}};
    return aim;
}

std::shared_ptr<const Image> smooth_texture(int n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 2.0 * kPi);
    auto img = std::make_shared<Image>(n, n);
    const double p0 = u(rng), p1 = u(rng), p2 = u(rng);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            img->at(r, c, 0) = 0.5 + 0.4 * std::sin(0.2 * c + p0);
            img->at(r, c, 1) = 0.5 + 0.4 * std::cos(0.15 * r + p1);
            img->at(r, c, 2) = 0.5 + 0.3 * std::sin(0.1 * (r + c) + p2);
        }
    return img;
}

// ---------------------------------------------------------------- 1

Outcome renderer_gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    const RenderParams params;  // defaults: 128 px, 80 m, softness 0.5
    const double half_view = params.extent / 2.0;
    double worst = 0.0;
    int checks = 0;
    int agents_checked = 0;
    for (int scene_i = 0; scene_i < 50; ++scene_i) {
        std::mt19937_64 rng(1000 + scene_i);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        AimMap aim = square_map(smooth_texture(48, rng), 100.0);
        aim.stop_lines = {{"n", {2, 12}, {9, 12}}, {"s", {-9, -12}, {-2, -12}}};
        aim.light_channels = {"n", "s"};
        const int n = 2 + static_cast<int>(rng() % 5);
        Scene scene;
        const Vec2 ego_pos{20.0 * u(rng), 20.0 * u(rng)};
        for (int i = 0; i < n; ++i) {
            const AgentKind kind = (i > 0 && rng() % 4 == 0) ? AgentKind::pedestrian : AgentKind::vehicle;
            const Vec2 p = i == 0 ? ego_pos : ego_pos + Vec2{40.0 * u(rng), 40.0 * u(rng)};
            scene.agents.push_back({i, AgentState(p.x, p.y, kPi * u(rng), 5.0), default_attributes(kind)});
        }
        const LightColor colors[] = {LightColor::red, LightColor::yellow, LightColor::green};
        scene.lights = {{"n", colors[rng() % 3]}, {"s", colors[rng() % 3]}};
        const SceneRenderer r(aim, params);

        std::vector<int> visible;
        for (int i = 0; i < n; ++i) {
            const Vec2 e = world_to_ego(scene.agents[static_cast<std::size_t>(i)].state.position(), scene.agents[0].state);
            if (std::abs(e.x) < half_view && std::abs(e.y) < half_view) visible.push_back(i);
        }

        auto base_agents = [&] {
            std::vector<DiffAgent> a;
            for (const auto& s : scene.agents) a.push_back({to_tensor(s.state), s.attrs});
            return a;
        };
        // Differencing pixel by pixel before summing keeps the oracle free of
        // the cancellation that comparing two means near 0.5 would cause.
        auto mean_difference = [&](const std::vector<DiffAgent>& a, const std::vector<DiffAgent>& b) {
            const ad::Tensor ia = r.render(a, 0, scene.lights);
            const ad::Tensor ib = r.render(b, 0, scene.lights);
            double s = 0.0;
            for (int i = 0; i < ia.numel(); ++i) s += ia[i] - ib[i];
            return s / ia.numel();
        };

        ad::Tape tape;
        auto agents = base_agents();
        for (int i : visible) agents[static_cast<std::size_t>(i)].state = tape.leaf(agents[static_cast<std::size_t>(i)].state);
        const ad::Tensor img = r.render(agents, 0, scene.lights);
        const ad::Tensor loss = ad::scale(ad::sum(img), 1.0 / img.numel());
        auto grads = tape.backward(loss);

        for (int i : visible) {
            const auto analytic = grads.of(agents[static_cast<std::size_t>(i)].state);
            for (int k = 0; k < 3; ++k) {
                auto up = base_agents();
                auto down = base_agents();
                const auto& st = scene.agents[static_cast<std::size_t>(i)].state;
                std::vector<double> s = {st.x, st.y, st.phi, st.v};
                s[static_cast<std::size_t>(k)] += kRenderGradStep;
                up[static_cast<std::size_t>(i)].state = ad::Tensor::vector(s);
                s[static_cast<std::size_t>(k)] -= 2.0 * kRenderGradStep;
                down[static_cast<std::size_t>(i)].state = ad::Tensor::vector(s);
                const double numeric = mean_difference(up, down) / (2.0 * kRenderGradStep);
                const double a = analytic[static_cast<std::size_t>(k)];
                const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kRenderGradFloor});
                worst = std::max(worst, err);
                ++checks;
            }
            ++agents_checked;
        }
    }
    const double elapsed = seconds_since(t0);
    return {worst < kRenderGradRelTol && elapsed < kRenderBudgetSeconds,
            fmt("worst relative error %.2e over %d partials of %d agents; %.1f s", worst, checks, agents_checked,
                elapsed)};
}

// ---------------------------------------------------------------- 2

Outcome rigid_invariance() {
    SyntheticParams sp;
    sp.num_steps = 300;
    const SyntheticWorld w = generate_synthetic(SyntheticKind::signalized_intersection, 11, sp);
    const Scene scene = w.scenario.scene_at(200);
    if (scene.agents.empty()) return {false, "no agents in the test scene"};
    const RenderParams params;
    const SceneRenderer base(w.aim, params);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> ang(-kPi, kPi);
    std::uniform_real_distribution<double> off(-500.0, 500.0);
    double worst = 0.0;
    int views = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const double th = ang(rng);
        const Vec2 t{off(rng), off(rng)};
        auto move = [&](Vec2 p) {
            return Vec2{std::cos(th) * p.x - std::sin(th) * p.y + t.x, std::sin(th) * p.x + std::cos(th) * p.y + t.y};
        };
        AimMap moved = w.aim;
        for (auto& c : moved.corners) c = move(c);
        for (auto& s : moved.stop_lines) {
            s.a = move(s.a);
            s.b = move(s.b);
        }
        Scene ms = scene;
        for (auto& a : ms.agents) {
            const Vec2 p = move(a.state.position());
            a.state = AgentState(p.x, p.y, a.state.phi + th, a.state.v);
        }
        const SceneRenderer mr(moved, params);
        const int ego = static_cast<int>(rng() % scene.agents.size());
        const ad::Tensor a = base.render(scene, ego).pixels;
        const ad::Tensor b = mr.render(ms, ego).pixels;
        double s = 0.0;
        for (int i = 0; i < a.numel(); ++i) s += std::abs(a[i] - b[i]);
        worst = std::max(worst, s / a.numel());
        ++views;
    }
    return {worst < kRigidMeanTol, fmt("worst mean |diff| %.2e (limit %.2e) over %d views", worst, kRigidMeanTol, views)};
}

// ---------------------------------------------------------------- 3

// Algebraic circle fit: minimizes sum (x^2 + y^2 + D x + E y + F)^2.
double fit_circle_radius(const std::vector<Vec2>& pts) {
    double m[3][4] = {};
    for (const Vec2& p : pts) {
        const double row[3] = {p.x, p.y, 1.0};
        const double rhs = -(p.x * p.x + p.y * p.y);
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) m[i][j] += row[i] * row[j];
            m[i][3] += row[i] * rhs;
        }
    }
    for (int c = 0; c < 3; ++c) {
        int piv = c;
        for (int r = c + 1; r < 3; ++r)
            if (std::abs(m[r][c]) > std::abs(m[piv][c])) piv = r;
        for (int k = 0; k < 4; ++k) std::swap(m[c][k], m[piv][k]);
        for (int r = 0; r < 3; ++r) {
            if (r == c) continue;
            const double f = m[r][c] / m[c][c];
            for (int k = 0; k < 4; ++k) m[r][k] -= f * m[c][k];
        }
    }
    const double D = m[0][3] / m[0][0], E = m[1][3] / m[1][1], F = m[2][3] / m[2][2];
    return std::sqrt(D * D / 4.0 + E * E / 4.0 - F);
}

Outcome kinematics_checks() {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);

    // zero steer, zero accel: every step moves v*dt along the heading
    double straight = 0.0;
    const BicycleParams bp;
    for (int i = 0; i < 200; ++i) {
        AgentState s(50.0 * u(rng), 50.0 * u(rng), kPi * u(rng), 15.0 + 15.0 * u(rng));
        const double c = std::cos(s.phi), sn = std::sin(s.phi);
        for (int k = 0; k < 20; ++k) {
            const AgentState nx = bicycle_step(s, {0.0, 0.0}, bp);
            straight = std::max({straight, std::abs(nx.x - (s.x + s.v * c * bp.dt)),
                                 std::abs(nx.y - (s.y + s.v * sn * bp.dt)), std::abs(nx.phi - s.phi),
                                 std::abs(nx.v - s.v)});
            s = nx;
        }
    }

    double radius_err = 0.0;
    for (double v : {2.0, 5.0, 8.0}) {
        for (double steer : {-0.5, -0.2, 0.1, 0.3, 0.5}) {
            for (double length : {3.0, 4.5}) {
                const BicycleParams p = BicycleParams::for_agent({length, 1.8, AgentKind::vehicle}, 0.1);
                AgentState s(3.0, -2.0, 0.7, v);
                std::vector<Vec2> pts;
                for (int k = 0; k < 400; ++k) {
                    pts.push_back(s.position());
                    s = bicycle_step(s, {0.0, steer}, p);
                }
                const double beta = std::atan(std::tan(std::abs(steer)) * p.lr / (p.lf + p.lr));
                const double analytic = p.lr / std::sin(beta);
                radius_err = std::max(radius_err, std::abs(fit_circle_radius(pts) - analytic) / analytic);
            }
        }
    }

    double jac = 0.0;
    const UnicycleParams up;
    const double h = 1e-6;
    for (int i = 0; i < 100; ++i) {
        const bool bike = i % 2 == 0;
        std::vector<double> x = {20.0 * u(rng), 20.0 * u(rng), 2.5 * u(rng), 6.0 + 5.0 * u(rng),
                                 0.8 * (bike ? bp.max_accel : up.max_accel) * u(rng),
                                 0.8 * (bike ? bp.max_steer : up.max_omega) * u(rng)};
        auto step = [&](const std::vector<double>& in) {
            const ad::Tensor s = ad::Tensor::vector({in[0], in[1], in[2], in[3]});
            const ad::Tensor a = ad::Tensor::vector({in[4], in[5]});
            return bike ? bicycle_step(s, a, bp) : unicycle_step(s, a, up);
        };
        for (int out = 0; out < 4; ++out) {
            ad::Tape tape;
            const ad::Tensor s = tape.leaf(ad::Tensor::vector({x[0], x[1], x[2], x[3]}));
            const ad::Tensor a = tape.leaf(ad::Tensor::vector({x[4], x[5]}));
            const ad::Tensor y = bike ? bicycle_step(s, a, bp) : unicycle_step(s, a, up);
            auto g = tape.backward(ad::slice(y, out, 1));
            std::vector<double> analytic = g.of(s);
            const auto ga = g.of(a);
            analytic.insert(analytic.end(), ga.begin(), ga.end());
            for (int j = 0; j < 6; ++j) {
                auto xp = x, xm = x;
                xp[static_cast<std::size_t>(j)] += h;
                xm[static_cast<std::size_t>(j)] -= h;
                const double numeric = (step(xp)[out] - step(xm)[out]) / (2.0 * h);
                jac = std::max(jac, std::abs(numeric - analytic[static_cast<std::size_t>(j)]));
            }
        }
    }
    const bool ok = straight <= kStraightLineTol && radius_err < kTurnRadiusRelTol && jac < kJacobianTol;
    return {ok, fmt("straight-line error %.1e, turning radius rel error %.2e, Jacobian abs error %.1e", straight,
                    radius_err, jac)};
}

// ---------------------------------------------------------------- 4

namespace oracle {

std::array<Vec2, 4> corners(const AgentState& s, const AgentAttributes& a) {
    const Vec2 f{std::cos(s.phi) * a.length / 2.0, std::sin(s.phi) * a.length / 2.0};
    const Vec2 l{-std::sin(s.phi) * a.width / 2.0, std::cos(s.phi) * a.width / 2.0};
    const Vec2 c = s.position();
    return {c + f + l, c - f + l, c - f - l, c + f - l};
}

double dist(const AgentState& a, const AgentState& b) { return std::hypot(a.x - b.x, a.y - b.y); }

double ade(const TrajectorySamples& s, int k, int n) {
    double t_sum = 0.0;
    for (int t = 0; t < s.horizon(); ++t) t_sum += dist(s.samples[k][n][t], s.ground_truth[n][t]);
    return t_sum / s.horizon();
}
double fde(const TrajectorySamples& s, int k, int n) {
    return dist(s.samples[k][n][s.horizon() - 1], s.ground_truth[n][s.horizon() - 1]);
}

double min_over(const TrajectorySamples& s, MinMode mode, double (*err)(const TrajectorySamples&, int, int)) {
    const int K = s.num_samples(), N = s.num_agents();
    if (mode == MinMode::per_agent) {
        double total = 0.0;
        for (int n = 0; n < N; ++n) {
            double best = 1e300;
            for (int k = 0; k < K; ++k) best = std::min(best, err(s, k, n));
            total += best;
        }
        return total / N;
    }
    double best = 1e300;
    for (int k = 0; k < K; ++k) {
        double m = 0.0;
        for (int n = 0; n < N; ++n) m += err(s, k, n);
        best = std::min(best, m / N);
    }
    return best;
}

double mfd(const TrajectorySamples& s) {
    double total = 0.0;
    for (int n = 0; n < s.num_agents(); ++n) {
        double best = 0.0;
        for (int a = 0; a < s.num_samples(); ++a)
            for (int b = 0; b < s.num_samples(); ++b)
                best = std::max(best, dist(s.samples[a][n][s.horizon() - 1], s.samples[b][n][s.horizon() - 1]));
        total += best;
    }
    return total / s.num_agents();
}

bool in_triangle(Vec2 p, const std::array<Vec2, 3>& t) {
    const double d1 = cross(t[1] - t[0], p - t[0]);
    const double d2 = cross(t[2] - t[1], p - t[1]);
    const double d3 = cross(t[0] - t[2], p - t[2]);
    const bool neg = d1 < 0 || d2 < 0 || d3 < 0;
    const bool pos = d1 > 0 || d2 > 0 || d3 > 0;
    return !(neg && pos);
}

double offroad(const TrajectorySamples& s, const std::vector<std::array<Vec2, 3>>& tris) {
    long bad = 0, cells = 0;
    for (int k = 0; k < s.num_samples(); ++k)
        for (int n = 0; n < s.num_agents(); ++n)
            for (int t = 0; t < s.horizon(); ++t) {
                ++cells;
                for (const Vec2& c : corners(s.samples[k][n][t], s.attrs[n])) {
                    bool inside = false;
                    for (const auto& tri : tris) inside = inside || in_triangle(c, tri);
                    if (!inside) {
                        ++bad;
                        break;
                    }
                }
            }
    return static_cast<double>(bad) / cells;
}

// Separating axis theorem on the four edge normals.
bool boxes_overlap(const std::array<Vec2, 4>& a, const std::array<Vec2, 4>& b) {
    for (const auto* poly : {&a, &b}) {
        for (int i = 0; i < 4; ++i) {
            const Vec2 e = (*poly)[(i + 1) % 4] - (*poly)[i];
            const Vec2 axis{-e.y, e.x};
            double amin = 1e300, amax = -1e300, bmin = 1e300, bmax = -1e300;
            for (const Vec2& p : a) {
                amin = std::min(amin, dot(p, axis));
                amax = std::max(amax, dot(p, axis));
            }
            for (const Vec2& p : b) {
                bmin = std::min(bmin, dot(p, axis));
                bmax = std::max(bmax, dot(p, axis));
            }
            if (amax <= bmin || bmax <= amin) return false;
        }
    }
    return true;
}

double collision(const TrajectorySamples& s) {
    long hit = 0, cells = 0;
    for (int k = 0; k < s.num_samples(); ++k)
        for (int t = 0; t < s.horizon(); ++t)
            for (int n = 0; n < s.num_agents(); ++n) {
                ++cells;
                const auto mine = corners(s.samples[k][n][t], s.attrs[n]);
                for (int m = 0; m < s.num_agents(); ++m) {
                    if (m != n && boxes_overlap(mine, corners(s.samples[k][m][t], s.attrs[m]))) {
                        ++hit;
                        break;
                    }
                }
            }
    return static_cast<double>(hit) / cells;
}

bool in_box(Vec2 p, const std::array<Vec2, 4>& b) {
    for (int i = 0; i < 4; ++i)
        if (cross(b[(i + 1) % 4] - b[i], p - b[i]) < 0) return false;
    return true;
}

double monte_carlo_iou(const std::array<Vec2, 4>& a, const std::array<Vec2, 4>& b, std::mt19937_64& rng) {
    double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
    for (const auto* poly : {&a, &b})
        for (const Vec2& p : *poly) {
            x0 = std::min(x0, p.x);
            x1 = std::max(x1, p.x);
            y0 = std::min(y0, p.y);
            y1 = std::max(y1, p.y);
        }
    std::uniform_real_distribution<double> ux(x0, x1), uy(y0, y1);
    long both = 0, either = 0;
    for (int i = 0; i < kIouSamples; ++i) {
        const Vec2 p{ux(rng), uy(rng)};
        const bool ia = in_box(p, a), ib = in_box(p, b);
        both += ia && ib;
        either += ia || ib;
    }
    return either == 0 ? 0.0 : static_cast<double>(both) / either;
}

}  // namespace oracle

TrajectorySamples prefix(const TrajectorySamples& s, int k) {
    TrajectorySamples out = s;
    out.samples.resize(static_cast<std::size_t>(k));
    return out;
}

Outcome metric_oracles() {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    double worst = 0.0;
    int monotone_violations = 0;
    int instances_with_collisions = 0;
    int instances_offroad = 0;
    for (int inst = 0; inst < 100; ++inst) {
        const int K = 1 + static_cast<int>(rng() % 8);
        const int N = 1 + static_cast<int>(rng() % 5);
        const int T = 1 + static_cast<int>(rng() % 20);
        TrajectorySamples s;
        for (int n = 0; n < N; ++n) {
            s.attrs.push_back({2.0 + 3.0 * (u(rng) + 1.0) / 2.0, 0.8 + (u(rng) + 1.0) / 2.0, AgentKind::vehicle});
            std::vector<AgentState> gt;
            for (int t = 0; t < T; ++t) gt.emplace_back(8.0 * u(rng), 8.0 * u(rng), kPi * u(rng), 5.0);
            s.ground_truth.push_back(gt);
        }
        s.samples.assign(static_cast<std::size_t>(K), {});
        for (int k = 0; k < K; ++k)
            for (int n = 0; n < N; ++n) {
                std::vector<AgentState> tr;
                for (int t = 0; t < T; ++t) {
                    const auto& g = s.ground_truth[static_cast<std::size_t>(n)][static_cast<std::size_t>(t)];
                    tr.emplace_back(g.x + 3.0 * u(rng), g.y + 3.0 * u(rng), g.phi + u(rng), g.v);
                }
                s.samples[static_cast<std::size_t>(k)].push_back(tr);
            }
        DrivableMesh mesh;
        for (int gx = 0; gx < 4; ++gx)
            for (int gy = 0; gy < 4; ++gy) {
                const Vec2 p00{-10.0 + 5.0 * gx, -10.0 + 5.0 * gy};
                const Vec2 p10 = p00 + Vec2{5, 0}, p01 = p00 + Vec2{0, 5}, p11 = p00 + Vec2{5, 5};
                if (rng() % 10 < 8) mesh.triangles.push_back({p00, p10, p11});
                if (rng() % 10 < 8) mesh.triangles.push_back({p00, p11, p01});
            }

        const double col = collision_rate(s);
        const double off = offroad_rate(s, mesh);
        instances_with_collisions += col > 0.0;
        instances_offroad += off > 0.0 && off < 1.0;
        for (MinMode mode : {MinMode::per_agent, MinMode::joint}) {
            worst = std::max(worst, std::abs(min_ade(s, mode) - oracle::min_over(s, mode, oracle::ade)));
            worst = std::max(worst, std::abs(min_fde(s, mode) - oracle::min_over(s, mode, oracle::fde)));
        }
        worst = std::max(worst, std::abs(mfd(s) - oracle::mfd(s)));
        worst = std::max(worst, std::abs(off - oracle::offroad(s, mesh.triangles)));
        worst = std::max(worst, std::abs(col - oracle::collision(s)));

        for (int k = 2; k <= K; ++k) {
            const auto a = prefix(s, k - 1), b = prefix(s, k);
            for (MinMode mode : {MinMode::per_agent, MinMode::joint}) {
                monotone_violations += min_ade(b, mode) > min_ade(a, mode);
                monotone_violations += min_fde(b, mode) > min_fde(a, mode);
            }
            monotone_violations += mfd(b) < mfd(a);
        }
    }

    double iou_worst = 0.0;
    for (int pair = 0; pair < 50; ++pair) {
        const AgentAttributes aa{1.0 + 4.0 * (u(rng) + 1.0) / 2.0, 0.5 + 2.0 * (u(rng) + 1.0) / 2.0, AgentKind::vehicle};
        const AgentAttributes ba{1.0 + 4.0 * (u(rng) + 1.0) / 2.0, 0.5 + 2.0 * (u(rng) + 1.0) / 2.0, AgentKind::vehicle};
        const AgentState sa(u(rng), u(rng), kPi * u(rng), 0.0);
        const AgentState sb(2.0 * u(rng), 2.0 * u(rng), kPi * u(rng), 0.0);
        const double lib = oriented_iou(sa, aa, sb, ba);
        const double mc = oracle::monte_carlo_iou(oracle::corners(sa, aa), oracle::corners(sb, ba), rng);
        iou_worst = std::max(iou_worst, std::abs(lib - mc));
    }
    const bool ok = worst <= kMetricTol && iou_worst <= kIouTol && monotone_violations == 0;
    return {ok, fmt("worst metric mismatch %.1e; IoU vs Monte Carlo %.1e; %d monotonicity violations "
                    "(%d instances with collisions, %d partly off-road)",
                    worst, iou_worst, monotone_violations, instances_with_collisions, instances_offroad)};
}

// ---------------------------------------------------------------- 5-7

// Smaller than the full-scale network so that each training run takes minutes.
PolicyConfig desk_config(bool lights) {
    PolicyConfig c = PolicyConfig::for_kind(AgentKind::vehicle);
    c.render.resolution = 32;
    c.render.extent = 40.0;
    c.render.draw_lights = lights;
    c.render.bar_width = 3.0;  // about 2.4 px; a 1 m bar is sub-pixel at this resolution
    c.channels = {8, 16, 16, 16};
    c.feature_dim = 64;
    c.hidden_dim = 32;
    c.head_hidden = 32;
    c.latent_dim = 8;
    return c;
}

struct Dataset {
    std::vector<Episode> train, val;
};

Dataset make_dataset(SyntheticKind kind, std::vector<std::uint64_t> seeds, int steps, SegmentSpec spec,
                     const RenderParams& rp) {
    SyntheticParams sp;
    sp.num_steps = steps;
    std::vector<Scenario> recs;
    std::map<std::string, std::shared_ptr<SceneRenderer>> renderers;
    for (auto seed : seeds) {
        SyntheticWorld w = generate_synthetic(kind, seed, sp);
        w.scenario.location = to_string(kind) + "_" + std::to_string(seed);
        renderers[w.scenario.location] = std::make_shared<SceneRenderer>(w.aim, rp);
        recs.push_back(w.scenario);
    }
    const SplitResult split = temporal_split(recs, spec);
    Dataset d;
    for (const auto& s : split.train) d.train.push_back({s, renderers.at(s.location)});
    for (const auto& s : split.val) d.val.push_back({s, renderers.at(s.location)});
    return d;
}

struct EvalSummary {
    double min_ade = 0.0;
    double violation = 0.0;
    double offroad = 0.0;
    int segments = 0;
};

EvalSummary evaluate_rollouts(const PolicyModel& m, const std::vector<Episode>& eps, std::uint64_t seed,
                              const AimMap* aim = nullptr, const DrivableMesh* mesh = nullptr) {
    EvalSummary e;
    for (const auto& ep : eps) {
        if (controlled_tracks(ep.segment, m.config().kind).empty()) continue;
        RolloutSpec rs;
        rs.t_obs = 10;
        rs.num_samples = 6;
        rs.mode = RolloutMode::joint_autoregressive;
        rs.seed = seed;
        const RolloutResult r = rollout(m, ep, rs);
        e.min_ade += min_ade(r.predicted());
        if (aim) e.violation += red_light_violation_rate(r, ep.segment, *aim);
        if (mesh) e.offroad += offroad_rate(r.predicted(), *mesh);
        ++e.segments;
    }
    if (e.segments > 0) {
        e.min_ade /= e.segments;
        e.violation /= e.segments;
        e.offroad /= e.segments;
    }
    return e;
}

Outcome straight_road_training() {
    const auto t0 = std::chrono::steady_clock::now();
    const PolicyConfig c = desk_config(true);
    const Dataset d = make_dataset(SyntheticKind::straight_road, {1, 2, 3, 4}, 2000, {40, 40}, c.render);
    PolicyModel model(c, 1);
    const double before = evaluate_rollouts(model, d.val, 1).min_ade;
    TrainConfig tc;
    tc.steps = 1000;
    tc.eval_every = 100;
    tc.max_val_episodes = 10;
    tc.seed = 1;
    double min_kl = 1e300;
    const TrainResult res = train(model, d.train, d.val, tc, [&](const LossRow& r) { min_kl = std::min(min_kl, r.train_kl); });
    const double after = evaluate_rollouts(model, d.val, 1).min_ade;
    const double elapsed = seconds_since(t0);
    min_kl = std::min(min_kl, res.min_kl_seen);
    const bool ok = after <= kAdeReduction * before && min_kl >= 0.0 && elapsed < kTrainBudgetSeconds;
    return {ok, fmt("%zu segments; val minADE_6 %.3f -> %.3f (ratio %.2f) after %d steps; min KL %.2e; %.0f s",
                    d.train.size() + d.val.size(), before, after, after / before, res.steps_run, min_kl, elapsed)};
}

constexpr int kAblationSteps = 2000;
const std::vector<std::uint64_t> kAblationSeeds = {1, 2, 3};

struct IntersectionTest {
    SyntheticWorld world;
    std::vector<Episode> clean;
};

IntersectionTest& intersection_test() {
    static IntersectionTest t = [] {
        IntersectionTest it;
        SyntheticParams sp;
        sp.num_steps = 1200;
        it.world = generate_synthetic(SyntheticKind::signalized_intersection, 100, sp);
        const auto r = std::make_shared<SceneRenderer>(it.world.aim, desk_config(true).render);
        for (const auto& s : slice_segments(it.world.scenario, {40, 20})) it.clean.push_back({s, r});
        return it;
    }();
    return t;
}

// Trained models are shared between the light ablation and the degradation check.
std::shared_ptr<PolicyModel> intersection_model(bool lights, std::uint64_t seed) {
    static std::map<std::pair<bool, std::uint64_t>, std::shared_ptr<PolicyModel>> cache;
    const auto key = std::make_pair(lights, seed);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
    const PolicyConfig c = desk_config(lights);
    const Dataset d = make_dataset(SyntheticKind::signalized_intersection, {1, 2, 3}, 2000, {40, 20}, c.render);
    auto model = std::make_shared<PolicyModel>(c, seed);
    TrainConfig tc;
    tc.steps = kAblationSteps;
    tc.eval_every = 200;
    tc.max_val_episodes = 10;
    tc.seed = seed;
    train(*model, d.train, d.val, tc);
    cache[key] = model;
    return model;
}

Outcome light_ablation() {
    const auto t0 = std::chrono::steady_clock::now();
    const IntersectionTest& test = intersection_test();
    int votes = 0;
    std::string rows;
    for (auto seed : kAblationSeeds) {
        // test-time rendering follows each model's own config
        auto episodes_for = [&](const PolicyModel& m) {
            const auto r = std::make_shared<SceneRenderer>(test.world.aim, m.config().render);
            std::vector<Episode> eps;
            for (const auto& e : test.clean) eps.push_back({e.segment, r});
            return eps;
        };
        const auto with = intersection_model(true, seed);
        const auto without = intersection_model(false, seed);
        const EvalSummary a = evaluate_rollouts(*with, episodes_for(*with), 7, &test.world.aim);
        const EvalSummary b = evaluate_rollouts(*without, episodes_for(*without), 7, &test.world.aim);
        const bool win = a.violation < b.violation && a.min_ade < b.min_ade;
        votes += win;
        rows += fmt(" seed %d: viol %.3f vs %.3f, minADE %.3f vs %.3f %s;", static_cast<int>(seed), a.violation,
                    b.violation, a.min_ade, b.min_ade, win ? "yes" : "no");
    }
    return {2 * votes > static_cast<int>(kAblationSeeds.size()),
            fmt("%d/%zu seed pairs favor lights (with vs without):", votes, kAblationSeeds.size()) + rows +
                fmt(" %.0f s", seconds_since(t0))};
}

Outcome degradation_ablation() {
    const auto t0 = std::chrono::steady_clock::now();
    const IntersectionTest& test = intersection_test();
    int ok = 0;
    std::string rows;
    for (auto seed : kAblationSeeds) {
        const auto model = intersection_model(true, seed);
        AimMap degraded_aim = test.world.aim;
        degraded_aim.image = std::make_shared<Image>(degrade(*test.world.aim.image, 2.0, 0.2, seed));
        const auto r = std::make_shared<SceneRenderer>(degraded_aim, model->config().render);
        std::vector<Episode> degraded;
        for (const auto& e : test.clean) degraded.push_back({e.segment, r});
        const EvalSummary a = evaluate_rollouts(*model, test.clean, 7, nullptr, &test.world.drivable);
        const EvalSummary b = evaluate_rollouts(*model, degraded, 7, nullptr, &test.world.drivable);
        const bool worse = b.min_ade >= a.min_ade && b.offroad >= a.offroad;
        ok += worse;
        rows += fmt(" seed %d: minADE %.3f -> %.3f, off-road %.3f -> %.3f %s;", static_cast<int>(seed), a.min_ade,
                    b.min_ade, a.offroad, b.offroad, worse ? "yes" : "no");
    }
    return {ok == static_cast<int>(kAblationSeeds.size()),
            fmt("%d/%zu seeds degrade (clean -> degraded):", ok, kAblationSeeds.size()) + rows +
                fmt(" %.0f s", seconds_since(t0))};
}

// ---------------------------------------------------------------- 8

Outcome background_extraction() {
    const int W = 80, H = 12, N = 200;
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.2, 0.6);
    Image bg(W, H);
    for (double& v : bg.data) v = u(rng);
    const double contrast[3] = {0.3, -0.15, 0.25};
    std::vector<int> covered(static_cast<std::size_t>(W) * H, 0);
    std::vector<Image> frames;
    for (int t = 0; t < N; ++t) {
        Image f = bg;
        const int x0 = (t * 37) % (W - 6);  // 6x5 sprite hopping across the frame
        const int y0 = (t * 5) % (H - 5);
        for (int r = y0; r < y0 + 5; ++r)
            for (int c = x0; c < x0 + 6; ++c) {
                for (int ch = 0; ch < 3; ++ch) f.at(r, c, ch) += contrast[ch];
                ++covered[static_cast<std::size_t>(r) * W + c];
            }
        frames.push_back(std::move(f));
    }
    const Image out = extract_background(frames);
    double worst = 0.0;
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            for (int ch = 0; ch < 3; ++ch) {
                const double q = covered[static_cast<std::size_t>(r) * W + c] / static_cast<double>(N);
                worst = std::max(worst, std::abs((out.at(r, c, ch) - bg.at(r, c, ch)) - q * contrast[ch]));
            }
    const bool exact = extract_background(std::vector<Image>(N, bg)) == bg;
    return {worst <= kGhostTol && exact,
            fmt("worst |error - q*c| %.1e; identical stack %s", worst, exact ? "exact" : "NOT exact")};
}

// ---------------------------------------------------------------- 9

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        std::ifstream is(e.path(), std::ios::binary);
        out[fs::relative(e.path(), dir).string()] = {std::istreambuf_iterator<char>(is), {}};
    }
    return out;
}

Outcome cli_determinism() {
    const fs::path root = fs::temp_directory_path() / "aimsim_acceptance_determinism";
    std::vector<std::map<std::string, std::string>> runs;
    for (int attempt = 0; attempt < 2; ++attempt) {
        fs::remove_all(root);
        fs::create_directories(root);
        {
            std::ofstream os(root / "policy.json");
            os << R"({"kind": "vehicle", "channels": [4, 8], "feature_dim": 16, "hidden_dim": 16,
                     "latent_dim": 4, "head_hidden": 16, "render": {"resolution": 24, "extent": 40}})";
        }
        const std::string data = (root / "data").string();
        const std::string scn = (root / "data" / "signalized_intersection_5.scn").string();
        const std::string run = (root / "run").string();
        int rc = cli::run({"synth", "--kind", "signalized_intersection", "--seed", "5", "--out", data, "--steps", "400"});
        if (rc == 0)
            rc = cli::run({"train", "--data", scn, "--run", run, "--seed", "3", "--policy-config",
                           (root / "policy.json").string(), "--steps", "30", "--eval-every", "10"});
        if (rc == 0)
            rc = cli::run({"rollout", "--checkpoint", run + "/checkpoints/model.ckpt", "--data", scn, "--run", run,
                           "--seed", "9", "--max-segments", "3"});
        if (rc != 0) return {false, fmt("CLI run %d exited with %d", attempt + 1, rc)};
        runs.push_back(snapshot(root));
    }
    std::vector<std::string> differing;
    for (const auto& [name, bytes] : runs[0]) {
        const auto it = runs[1].find(name);
        if (it == runs[1].end() || it->second != bytes) differing.push_back(name);
    }
    for (const auto& [name, bytes] : runs[1])
        if (!runs[0].count(name)) differing.push_back(name);
    fs::remove_all(root);
    std::string detail = fmt("%zu artifacts compared", runs[0].size());
    for (const auto& d : differing) detail += "; differs: " + d;
    return {differing.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    std::vector<int> only;
    app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 9));
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"renderer gradients", renderer_gradients},
        {"rigid invariance", rigid_invariance},
        {"kinematics", kinematics_checks},
        {"metric oracles", metric_oracles},
        {"straight-road training", straight_road_training},
        {"traffic-light ablation", light_ablation},
        {"degraded-map ablation", degradation_ablation},
        {"background extraction", background_extraction},
        {"CLI determinism", cli_determinism},
    };
    const std::set<int> selected(only.begin(), only.end());
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!selected.empty() && !selected.count(id)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        std::printf("[%s] %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), o.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
