#include "aimsim/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "json.hpp"

#include "aimsim/errors.hpp"

namespace aimsim {

namespace {

double dist(const AgentState& a, const AgentState& b) { return std::hypot(a.x - b.x, a.y - b.y); }

// errors[k][n]: per-sample, per-agent displacement error
template <class ErrFn>
double reduce_min(const TrajectorySamples& s, MinMode mode, ErrFn err) {
    s.validate();
    const int K = s.num_samples();
    const int N = s.num_agents();
    if (mode == MinMode::per_agent) {
        double total = 0.0;
        for (int n = 0; n < N; ++n) {
            double best = std::numeric_limits<double>::infinity();
            for (int k = 0; k < K; ++k) best = std::min(best, err(k, n));
            total += best;
        }
        return total / N;
    }
    double best = std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) {
        double total = 0.0;
        for (int n = 0; n < N; ++n) total += err(k, n);
        best = std::min(best, total / N);
    }
    return best;
}

using Polygon = std::vector<Vec2>;

// Clips convex `subject` against the half-plane left of a->b.
Polygon clip(const Polygon& subject, Vec2 a, Vec2 b) {
    Polygon out;
    const std::size_t n = subject.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2 p = subject[i];
        const Vec2 q = subject[(i + 1) % n];
        const double dp = cross(b - a, p - a);
        const double dq = cross(b - a, q - a);
        if (dp >= 0) out.push_back(p);
        if ((dp >= 0) != (dq >= 0)) {
            const double t = dp / (dp - dq);
            out.push_back(p + t * (q - p));
        }
    }
    return out;
}

Polygon ccw(const std::array<Vec2, 4>& box) {
    Polygon p(box.begin(), box.end());
    if (polygon_area(p) < 0) std::reverse(p.begin(), p.end());
    return p;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

void TrajectorySamples::validate() const {
    const std::size_t N = ground_truth.size();
    if (samples.empty()) throw ContractError("metrics: no samples");
    if (N == 0) throw ContractError("metrics: no agents");
    if (attrs.size() != N) throw ContractError("metrics: attrs count differs from agent count");
    const std::size_t T = ground_truth.front().size();
    if (T < 1) throw ContractError("metrics: empty horizon");
    for (const auto& g : ground_truth)
        if (g.size() != T) throw ContractError("metrics: ragged ground truth");
    for (const auto& k : samples) {
        if (k.size() != N) throw ContractError("metrics: sample agent count differs from ground truth");
        for (const auto& a : k)
            if (a.size() != T) throw ContractError("metrics: sample horizon differs from ground truth");
    }
}

void DrivableMesh::validate() const {
    if (triangles.empty()) throw ContractError("drivable mesh is empty");
    for (const auto& t : triangles)
        if (!(std::abs(cross(t[1] - t[0], t[2] - t[0])) > 0.0)) throw InvalidMap("drivable mesh has a degenerate triangle");
}

bool DrivableMesh::contains(Vec2 p) const {
    for (const auto& t : triangles) {
        const double d0 = cross(t[1] - t[0], p - t[0]);
        const double d1 = cross(t[2] - t[1], p - t[1]);
        const double d2 = cross(t[0] - t[2], p - t[2]);
        // tolerate rounding right on an edge
        const double eps = 1e-9 * (1.0 + std::abs(p.x) + std::abs(p.y));
        const bool neg = d0 < -eps || d1 < -eps || d2 < -eps;
        const bool pos = d0 > eps || d1 > eps || d2 > eps;
        if (!(neg && pos)) return true;
    }
    return false;
}

double min_ade(const TrajectorySamples& s, MinMode mode) {
    const int T = s.horizon();
    return reduce_min(s, mode, [&](int k, int n) {
        double total = 0.0;
        for (int t = 0; t < T; ++t) total += dist(s.samples[k][n][t], s.ground_truth[n][t]);
        return total / T;
    });
}

double min_fde(const TrajectorySamples& s, MinMode mode) {
    const int T = s.horizon();
    return reduce_min(s, mode, [&](int k, int n) { return dist(s.samples[k][n][T - 1], s.ground_truth[n][T - 1]); });
}

double mfd(const TrajectorySamples& s) {
    s.validate();
    const int K = s.num_samples();
    const int N = s.num_agents();
    const int T = s.horizon();
    double total = 0.0;
    for (int n = 0; n < N; ++n) {
        double best = 0.0;
        for (int i = 0; i < K; ++i)
            for (int j = i + 1; j < K; ++j) best = std::max(best, dist(s.samples[i][n][T - 1], s.samples[j][n][T - 1]));
        total += best;
    }
    return total / N;
}

double offroad_rate(const TrajectorySamples& s, const DrivableMesh& mesh) {
    s.validate();
    mesh.validate();
    long off = 0;
    long cells = 0;
    for (const auto& sample : s.samples)
        for (std::size_t n = 0; n < sample.size(); ++n)
            for (const auto& st : sample[n]) {
                const auto corners = oriented_box_corners(st, s.attrs[n]);
                off += std::any_of(corners.begin(), corners.end(), [&](Vec2 c) { return !mesh.contains(c); }) ? 1 : 0;
                ++cells;
            }
    return static_cast<double>(off) / static_cast<double>(cells);
}

double oriented_iou(const std::array<Vec2, 4>& a, const std::array<Vec2, 4>& b) {
    const Polygon pa = ccw(a);
    const Polygon pb = ccw(b);
    const double area_a = polygon_area(pa);
    const double area_b = polygon_area(pb);
    if (!(area_a > 0.0) || !(area_b > 0.0)) throw ContractError("oriented_iou: degenerate box");
    Polygon inter = pa;
    for (std::size_t i = 0; i < pb.size() && !inter.empty(); ++i) inter = clip(inter, pb[i], pb[(i + 1) % pb.size()]);
    const double ia = inter.size() < 3 ? 0.0 : std::max(0.0, polygon_area(inter));
    return ia / (area_a + area_b - ia);
}

double oriented_iou(const AgentState& a, const AgentAttributes& aa, const AgentState& b, const AgentAttributes& ba) {
    return oriented_iou(oriented_box_corners(a, aa), oriented_box_corners(b, ba));
}

double collision_rate(const TrajectorySamples& s, double threshold) {
    s.validate();
    const int N = s.num_agents();
    const int T = s.horizon();
    long hits = 0;
    long cells = 0;
    for (const auto& sample : s.samples) {
        for (int t = 0; t < T; ++t) {
            std::vector<std::array<Vec2, 4>> boxes;
            for (int n = 0; n < N; ++n) boxes.push_back(oriented_box_corners(sample[n][t], s.attrs[n]));
            for (int n = 0; n < N; ++n) {
                bool hit = false;
                for (int m = 0; m < N && !hit; ++m) {
                    if (m == n) continue;
                    // cheap reject on bounding circles
                    const double r = 0.5 * (std::hypot(s.attrs[n].length, s.attrs[n].width) +
                                            std::hypot(s.attrs[m].length, s.attrs[m].width));
                    if (dist(sample[n][t], sample[m][t]) > r) continue;
                    hit = oriented_iou(boxes[n], boxes[m]) > threshold;
                }
                hits += hit ? 1 : 0;
                ++cells;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(cells);
}

double stop_line_violation_rate(const TrajectorySamples& s, Vec2 line_a, Vec2 line_b, const std::vector<bool>& is_red) {
    s.validate();
    const int T = s.horizon();
    if (static_cast<int>(is_red.size()) != T) throw ContractError("stop_line_violation_rate: light mask length differs");
    const Vec2 d = line_b - line_a;
    auto side = [&](const AgentState& st) { return cross(d, st.position() - line_a); };
    auto within = [&](const AgentState& p, const AgentState& q) {
        // crossing point lies on the segment
        const double sp = side(p), sq = side(q);
        const Vec2 x = p.position() + (sp / (sp - sq)) * (q.position() - p.position());
        const double u = dot(x - line_a, d) / dot(d, d);
        return u >= 0.0 && u <= 1.0;
    };
    long violations = 0;
    long cells = 0;
    for (const auto& sample : s.samples)
        for (const auto& track : sample) {
            bool crossed = false;
            for (int t = 1; t < T && !crossed; ++t) {
                if (!is_red[static_cast<std::size_t>(t)]) continue;
                const double a = side(track[t - 1]);
                const double b = side(track[t]);
                crossed = ((a > 0) != (b > 0)) && within(track[t - 1], track[t]);
            }
            violations += crossed ? 1 : 0;
            ++cells;
        }
    return static_cast<double>(violations) / static_cast<double>(cells);
}

std::string MetricsReport::to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : values) os << k << " " << fmt(v) << "\n";
    os << "num_samples " << num_samples << "\n";
    os << "num_agents " << num_agents << "\n";
    os << "horizon " << horizon << "\n";
    return os.str();
}

std::string MetricsReport::to_json() const {
    nlohmann::ordered_json j;
    nlohmann::ordered_json m = nlohmann::ordered_json::object();
    for (const auto& [k, v] : values) m[k] = v;
    j["metrics"] = m;
    j["counts"] = {{"num_samples", num_samples}, {"num_agents", num_agents}, {"horizon", horizon}};
    return j.dump(2) + "\n";
}

MetricsReport evaluate_samples(const TrajectorySamples& s, const DrivableMesh* mesh, MinMode mode,
                               double collision_threshold) {
    s.validate();
    MetricsReport r;
    r.num_samples = s.num_samples();
    r.num_agents = s.num_agents();
    r.horizon = s.horizon();
    r.values["min_ade"] = min_ade(s, mode);
    r.values["min_fde"] = min_fde(s, mode);
    r.values["mfd"] = mfd(s);
    r.values["collision_rate"] = collision_rate(s, collision_threshold);
    if (mesh != nullptr) r.values["offroad_rate"] = offroad_rate(s, *mesh);
    return r;
}

}  // namespace aimsim
