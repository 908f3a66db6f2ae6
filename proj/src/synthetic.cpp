#include <algorithm>
#include <cmath>
#include <random>

#include "aimsim/errors.hpp"
#include "aimsim/kinematics.hpp"
#include "aimsim/scenario_io.hpp"

namespace aimsim {

namespace {

constexpr double kSimDt = 0.1;
constexpr double kLaneWidth = 3.5;

// ---------------------------------------------------------------------------
// Texture painting on an axis-aligned map

struct Canvas {
    Image img;
    double x0, y1, mpp;  // world x of the left edge, world y of the top edge

    Canvas(double xmin, double xmax, double ymin, double ymax, double m)
        : img(static_cast<int>(std::lround((xmax - xmin) / m)), static_cast<int>(std::lround((ymax - ymin) / m))),
          x0(xmin), y1(ymax), mpp(m) {}

    Vec2 center(int r, int c) const { return {x0 + (c + 0.5) * mpp, y1 - (r + 0.5) * mpp}; }

    template <class Pred>
    void paint(Pred inside, Rgb color) {
        for (int r = 0; r < img.height; ++r)
            for (int c = 0; c < img.width; ++c)
                if (inside(center(r, c))) {
                    img.at(r, c, 0) = color.r;
                    img.at(r, c, 1) = color.g;
                    img.at(r, c, 2) = color.b;
                }
    }

    void rect(double xa, double xb, double ya, double yb, Rgb color) {
        paint([&](Vec2 p) { return p.x >= xa && p.x <= xb && p.y >= ya && p.y <= yb; }, color);
    }

    void grain(std::mt19937_64& rng, double amount) {
        std::uniform_real_distribution<double> u(-amount, amount);
        for (int r = 0; r < img.height; ++r)
            for (int c = 0; c < img.width; ++c) {
                const double d = u(rng);
                for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = std::clamp(img.at(r, c, ch) + d, 0.0, 1.0);
            }
    }

    AimMap to_aim() const {
        AimMap aim;
        aim.image = std::make_shared<const Image>(img);
        const double x1 = x0 + img.width * mpp;
        const double y0 = y1 - img.height * mpp;
        aim.corners = {Vec2{x0, y1}, Vec2{x1, y1}, Vec2{x1, y0}, Vec2{x0, y0}};
        return aim;
    }
};

const Rgb kGrass{0.28, 0.42, 0.22};
const Rgb kAsphalt{0.32, 0.32, 0.34};
const Rgb kSidewalk{0.62, 0.6, 0.56};
const Rgb kPaint{0.92, 0.92, 0.9};
const Rgb kCenterPaint{0.9, 0.78, 0.2};

void add_rect(DrivableMesh& m, double xa, double xb, double ya, double yb) {
    const Vec2 a{xa, ya}, b{xb, ya}, c{xb, yb}, d{xa, yb};
    m.triangles.push_back({a, b, c});
    m.triangles.push_back({a, c, d});
}

// Two-way road along an axis; `horizontal` roads run along x.
void paint_road(Canvas& cv, bool horizontal, double lo, double hi, double gap_lo, double gap_hi) {
    const double h = kLaneWidth;
    if (horizontal) {
        cv.rect(lo, hi, -h, h, kAsphalt);
        cv.paint([&](Vec2 p) { return (p.x < gap_lo || p.x > gap_hi) && std::abs(std::abs(p.y) - (h - 0.2)) < 0.12; },
                 kPaint);
        cv.paint([&](Vec2 p) { return (p.x < gap_lo || p.x > gap_hi) && std::abs(p.y) < 0.12 && std::fmod(p.x + 1000.0, 9.0) < 3.0; },
                 kCenterPaint);
    } else {
        cv.rect(-h, h, lo, hi, kAsphalt);
        cv.paint([&](Vec2 p) { return (p.y < gap_lo || p.y > gap_hi) && std::abs(std::abs(p.x) - (h - 0.2)) < 0.12; },
                 kPaint);
        cv.paint([&](Vec2 p) { return (p.y < gap_lo || p.y > gap_hi) && std::abs(p.x) < 0.12 && std::fmod(p.y + 1000.0, 9.0) < 3.0; },
                 kCenterPaint);
    }
}

// ---------------------------------------------------------------------------
// Scripted traffic

struct Lane {
    Vec2 start;
    double heading = 0.0;
    double length = 0.0;
    int light = -1;          // index into the light list, or -1
    double stop_s = 0.0;     // stop-line position along the lane
    double yield_s = -1.0;   // crosswalk edge to hold at while pedestrians cross
};

struct Vehicle {
    int track = 0;
    int lane = 0;
    double s = 0.0;
    double v = 0.0;
    double v0 = 0.0;
    bool stopping = false;  // decided to stop for the current non-green phase
    bool decided = false;
};

struct Walker {
    int track = 0;
    AgentState st;
    double exit_abs_y = 0.0;
};

class Recorder {
public:
    Recorder(int total_steps, int warmup) : total_(total_steps), warmup_(warmup) {}

    int add(const AgentAttributes& attrs) {
        Track t;
        t.id = next_id_++;
        t.attrs = attrs;
        t.states.assign(static_cast<std::size_t>(total_), AgentState{});
        t.present.assign(static_cast<std::size_t>(total_), false);
        tracks_.push_back(std::move(t));
        return static_cast<int>(tracks_.size()) - 1;
    }

    void put(int track, int step, const AgentState& s) {
        tracks_[static_cast<std::size_t>(track)].states[static_cast<std::size_t>(step)] = s;
        tracks_[static_cast<std::size_t>(track)].present[static_cast<std::size_t>(step)] = true;
    }

    // Drops the warmup prefix, subsamples every `every` steps and keeps only
    // agents that appear in the recording.
    std::vector<Track> finish(int every, int steps) const {
        std::vector<Track> out;
        for (const auto& t : tracks_) {
            Track r;
            r.attrs = t.attrs;
            bool any = false;
            for (int k = 0; k < steps; ++k) {
                const auto src = static_cast<std::size_t>(warmup_ + k * every);
                r.states.push_back(t.present[src] ? t.states[src] : AgentState{});
                r.present.push_back(t.present[src]);
                any = any || t.present[src];
            }
            if (!any) continue;
            r.id = static_cast<int>(out.size());
            out.push_back(std::move(r));
        }
        return out;
    }

private:
    int total_;
    int warmup_;
    int next_id_ = 0;
    std::vector<Track> tracks_;
};

enum class Phase { green, yellow, red };

struct SignalPlan {
    double green, yellow, all_red, offset;

    double cycle() const { return 2.0 * (green + yellow + all_red); }
    // group 0 runs first in the cycle, group 1 half a cycle later
    Phase phase(int group, double t) const {
        double u = std::fmod(t + offset + (group == 1 ? 0.5 * cycle() : 0.0), cycle());
        if (u < green) return Phase::green;
        if (u < green + yellow) return Phase::yellow;
        return Phase::red;
    }
};

LightColor to_color(Phase p) {
    return p == Phase::green ? LightColor::green : p == Phase::yellow ? LightColor::yellow : LightColor::red;
}

// Intelligent-driver-model acceleration toward v0 given a gap to the
// obstacle ahead (infinite when free) and the obstacle's speed.
double idm(double v, double v0, double gap, double lead_v) {
    const double a_max = 1.5, b = 2.0, headway = 1.2, s0 = 2.0;
    double a = a_max * (1.0 - std::pow(v / v0, 4));
    if (std::isfinite(gap)) {
        const double s_star = s0 + std::max(0.0, v * headway + v * (v - lead_v) / (2.0 * std::sqrt(a_max * b)));
        // far leaders are ignored so that free vehicles hold their speed exactly
        if (gap < 3.0 * s_star) a -= a_max * (s_star / std::max(gap, 0.1)) * (s_star / std::max(gap, 0.1));
    }
    return a;
}

struct TrafficSim {
    std::vector<Lane> lanes;
    std::vector<Vehicle> vehicles;
    std::vector<Walker> walkers;
    Recorder rec;
    std::mt19937_64& rng;
    const SyntheticParams& params;
    SignalPlan plan{};
    std::vector<int> light_group;  // per light index
    bool signals = false;

    TrafficSim(Recorder r, std::mt19937_64& g, const SyntheticParams& p) : rec(std::move(r)), rng(g), params(p) {}

    AgentState vehicle_state(const Vehicle& veh) const {
        const Lane& L = lanes[static_cast<std::size_t>(veh.lane)];
        return AgentState(L.start.x + std::cos(L.heading) * veh.s, L.start.y + std::sin(L.heading) * veh.s, L.heading,
                          veh.v);
    }

    const AgentAttributes& attrs_of(int track) const { return track_attrs[static_cast<std::size_t>(track)]; }
    std::vector<AgentAttributes> track_attrs;

    int new_track(const AgentAttributes& a) {
        track_attrs.push_back(a);
        return rec.add(a);
    }

    void spawn_vehicles() {
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        std::uniform_real_distribution<double> jitter(-params.speed_jitter, params.speed_jitter);
        std::uniform_real_distribution<double> len(4.2, 4.8), wid(1.7, 1.9);
        for (int l = 0; l < static_cast<int>(lanes.size()); ++l) {
            if (u01(rng) >= params.spawn_rate * kSimDt) continue;
            const AgentAttributes a{len(rng), wid(rng), AgentKind::vehicle};
            const double s = 0.5 * a.length + 0.5;
            const double v = std::max(1.0, params.cruise_speed + jitter(rng));
            bool blocked = false;
            for (const auto& o : vehicles) {
                if (o.lane != l) continue;
                const double gap = o.s - s - 0.5 * (attrs_of(o.track).length + a.length);
                // stay outside the follower's interaction range at spawn
                if (gap < 3.0 * (2.0 + 1.2 * v)) blocked = true;
            }
            if (blocked) continue;
            Vehicle veh;
            veh.track = new_track(a);
            veh.lane = l;
            veh.s = s;
            veh.v = v;
            veh.v0 = v;
            vehicles.push_back(veh);
        }
    }

    bool walkers_near_crossing(double band) const {
        for (const auto& w : walkers)
            if (std::abs(w.st.y) < band) return true;
        return false;
    }

    void step_vehicles(double t) {
        std::vector<double> accel(vehicles.size());
        for (std::size_t i = 0; i < vehicles.size(); ++i) {
            Vehicle& me = vehicles[i];
            const Lane& L = lanes[static_cast<std::size_t>(me.lane)];
            const double half = 0.5 * attrs_of(me.track).length;
            double gap = std::numeric_limits<double>::infinity();
            double lead_v = 0.0;
            for (const auto& o : vehicles) {
                if (&o == &me || o.lane != me.lane || o.s <= me.s) continue;
                const double g = o.s - me.s - half - 0.5 * attrs_of(o.track).length;
                if (g < gap) {
                    gap = g;
                    lead_v = o.v;
                }
            }
            if (L.light >= 0) {
                const Phase ph = plan.phase(light_group[static_cast<std::size_t>(L.light)], t);
                const double to_line = L.stop_s - (me.s + half);
                if (ph == Phase::green) {
                    me.decided = false;
                    me.stopping = false;
                } else if (!me.decided && to_line > -0.5) {
                    // stop only when it can be done comfortably; otherwise clear the junction
                    me.decided = true;
                    me.stopping = to_line >= me.v * me.v / (2.0 * 3.0);
                }
                if (me.stopping && to_line < gap) {
                    gap = to_line;
                    lead_v = 0.0;
                }
            }
            if (L.yield_s >= 0.0) {
                const double to_edge = L.yield_s - (me.s + half);
                // hold short of the crosswalk while anybody is on or about to step on it
                if (to_edge > 0.0 && walkers_near_crossing(kLaneWidth + 4.0) &&
                    to_edge >= me.v * me.v / (2.0 * 4.0) && to_edge < gap) {
                    gap = to_edge;
                    lead_v = 0.0;
                }
            }
            double a = idm(me.v, me.v0, gap, lead_v);
            a = std::clamp(a, -6.0, 2.0);
            a = std::max(a, -me.v / kSimDt);  // never reverse
            accel[i] = a;
        }
        for (std::size_t i = 0; i < vehicles.size(); ++i) {
            Vehicle& me = vehicles[i];
            const AgentState before = vehicle_state(me);
            const AgentState after =
                bicycle_step(before, Action{accel[i], 0.0}, BicycleParams::for_agent(attrs_of(me.track), kSimDt));
            me.s += me.v * kSimDt;
            me.v = std::max(0.0, after.v);
        }
        std::erase_if(vehicles, [&](const Vehicle& v) {
            return v.s + 0.5 * attrs_of(v.track).length + 0.5 > lanes[static_cast<std::size_t>(v.lane)].length;
        });
    }

    void record_vehicles(int step) {
        for (const auto& v : vehicles) rec.put(v.track, step, vehicle_state(v));
    }
};

SyntheticWorld make_straight_road(std::mt19937_64& rng, const SyntheticParams& p) {
    const double half_len = 100.0;
    Canvas cv(-half_len, half_len, -25.0, 25.0, p.meters_per_pixel);
    cv.rect(-half_len, half_len, -25.0, 25.0, kGrass);
    paint_road(cv, true, -half_len, half_len, 1e9, -1e9);
    cv.grain(rng, 0.03);

    SyntheticWorld w;
    w.aim = cv.to_aim();
    add_rect(w.drivable, -half_len, half_len, -kLaneWidth, kLaneWidth);

    const int warmup = 200;
    const int total = warmup + p.num_steps;
    TrafficSim sim(Recorder(total, warmup), rng, p);
    sim.lanes = {Lane{{-half_len, -0.5 * kLaneWidth}, 0.0, 2 * half_len},
                 Lane{{half_len, 0.5 * kLaneWidth}, kPi, 2 * half_len}};
    for (int step = 0; step < total; ++step) {
        sim.spawn_vehicles();
        sim.record_vehicles(step);
        sim.step_vehicles(step * kSimDt);
    }
    w.scenario.kind = AgentKind::vehicle;
    w.scenario.rate_hz = 10.0;
    w.scenario.num_steps = p.num_steps;
    w.scenario.tracks = sim.rec.finish(1, p.num_steps);
    w.scenario.lights.assign(static_cast<std::size_t>(p.num_steps), {});
    return w;
}

SyntheticWorld make_intersection(std::mt19937_64& rng, const SyntheticParams& p) {
    const double half = 60.0;
    const double stop = kLaneWidth + 1.5;  // stop lines this far from the center
    Canvas cv(-half, half, -half, half, p.meters_per_pixel);
    cv.rect(-half, half, -half, half, kGrass);
    paint_road(cv, true, -half, half, -kLaneWidth, kLaneWidth);
    paint_road(cv, false, -half, half, -kLaneWidth, kLaneWidth);
    cv.rect(-kLaneWidth, kLaneWidth, -kLaneWidth, kLaneWidth, kAsphalt);
    // painted stop bars on the approach lanes
    cv.rect(-stop - 0.4, -stop, -kLaneWidth, 0.0, kPaint);
    cv.rect(stop, stop + 0.4, 0.0, kLaneWidth, kPaint);
    cv.rect(0.0, kLaneWidth, -stop - 0.4, -stop, kPaint);
    cv.rect(-kLaneWidth, 0.0, stop, stop + 0.4, kPaint);
    cv.grain(rng, 0.03);

    SyntheticWorld w;
    w.aim = cv.to_aim();
    // light ids name the approach; stop lines run across the incoming lane
    w.aim.light_channels = {"west", "east", "south", "north"};
    w.aim.stop_lines = {{"west", {-stop, 0.0}, {-stop, -kLaneWidth}},
                        {"east", {stop, 0.0}, {stop, kLaneWidth}},
                        {"south", {0.0, -stop}, {kLaneWidth, -stop}},
                        {"north", {0.0, stop}, {-kLaneWidth, stop}}};
    add_rect(w.drivable, -half, half, -kLaneWidth, kLaneWidth);
    add_rect(w.drivable, -kLaneWidth, kLaneWidth, -half, half);

    const int warmup = 300;
    const int total = warmup + p.num_steps;
    TrafficSim sim(Recorder(total, warmup), rng, p);
    const double h = 0.5 * kLaneWidth;
    const double L = 2 * half;
    sim.lanes = {Lane{{-half, -h}, 0.0, L, 0, half - stop},
                 Lane{{half, h}, kPi, L, 1, half - stop},
                 Lane{{h, -half}, 0.5 * kPi, L, 2, half - stop},
                 Lane{{-h, half}, -0.5 * kPi, L, 3, half - stop}};
    sim.signals = true;
    sim.light_group = {0, 0, 1, 1};
    std::uniform_real_distribution<double> off(0.0, 1.0);
    sim.plan = {p.green_s, p.yellow_s, p.all_red_s, 0.0};
    sim.plan.offset = off(rng) * sim.plan.cycle();

    std::vector<std::vector<TrafficLightState>> lights(static_cast<std::size_t>(total));
    for (int step = 0; step < total; ++step) {
        const double t = step * kSimDt;
        for (std::size_t i = 0; i < 4; ++i) {
            lights[static_cast<std::size_t>(step)].push_back(
                {w.aim.stop_lines[i].light_id, to_color(sim.plan.phase(sim.light_group[i], t))});
        }
        sim.spawn_vehicles();
        sim.record_vehicles(step);
        sim.step_vehicles(t);
    }
    w.scenario.kind = AgentKind::vehicle;
    w.scenario.rate_hz = 10.0;
    w.scenario.num_steps = p.num_steps;
    w.scenario.tracks = sim.rec.finish(1, p.num_steps);
    w.scenario.lights.assign(lights.begin() + warmup, lights.end());
    return w;
}

SyntheticWorld make_crosswalk(std::mt19937_64& rng, const SyntheticParams& p) {
    const double half_x = 40.0, half_y = 20.0;
    const double walk = 2.0;  // crosswalk half width
    const double curb = kLaneWidth + 2.5;
    Canvas cv(-half_x, half_x, -half_y, half_y, p.meters_per_pixel);
    cv.rect(-half_x, half_x, -half_y, half_y, kGrass);
    cv.rect(-half_x, half_x, -curb, curb, kSidewalk);
    cv.rect(-walk, walk, -half_y, half_y, kSidewalk);
    paint_road(cv, true, -half_x, half_x, -walk - 0.5, walk + 0.5);
    cv.paint([&](Vec2 q) { return std::abs(q.x) <= walk && std::abs(q.y) <= kLaneWidth && std::fmod(q.y + 100.0, 1.0) < 0.5; },
             kPaint);
    cv.grain(rng, 0.03);

    SyntheticWorld w;
    w.aim = cv.to_aim();
    add_rect(w.drivable, -half_x, half_x, -kLaneWidth, kLaneWidth);

    // Internal clock at 10 Hz, recorded every 4th step (2.5 Hz).
    const int every = 4;
    const int warmup = 300;
    const int total = warmup + p.num_steps * every;
    TrafficSim sim(Recorder(total, warmup), rng, p);
    const double h = 0.5 * kLaneWidth;
    sim.lanes = {Lane{{-half_x, -h}, 0.0, 2 * half_x, -1, 0.0, half_x - walk - 1.0},
                 Lane{{half_x, h}, kPi, 2 * half_x, -1, 0.0, half_x - walk - 1.0}};

    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::uniform_real_distribution<double> speed(1.0, 1.6);
    std::uniform_real_distribution<double> lateral(0.3, 1.7);
    const double ped_rate = 0.3;  // per second per side
    const double spawn_y = half_y - 2.0;
    const UnicycleParams uni{kSimDt, 2.0, 3.0};
    for (int step = 0; step < total; ++step) {
        // walkers start on the far sidewalks; northbound keep right (x > 0)
        for (int side = 0; side < 2; ++side) {
            if (step % every != 0 || u01(rng) >= ped_rate * kSimDt * every) continue;
            const double dir = side == 0 ? 1.0 : -1.0;
            const AgentState st(dir * lateral(rng), -dir * spawn_y, dir * 0.5 * kPi, speed(rng));
            double v = st.v;
            bool blocked = false;
            for (const auto& o : sim.walkers) {
                if ((o.st.phi > 0) != (dir > 0)) continue;
                const double behind = dir * (o.st.y - st.y);
                if (behind < 1.5) blocked = true;
                if (behind < 25.0) v = std::min(v, o.st.v);
            }
            if (blocked) continue;
            Walker wk;
            wk.track = sim.new_track(default_attributes(AgentKind::pedestrian));
            wk.st = AgentState(st.x, st.y, st.phi, v);
            wk.exit_abs_y = spawn_y;
            sim.walkers.push_back(wk);
        }
        sim.spawn_vehicles();
        sim.record_vehicles(step);
        for (const auto& wk : sim.walkers) sim.rec.put(wk.track, step, wk.st);
        sim.step_vehicles(step * kSimDt);
        for (auto& wk : sim.walkers) wk.st = unicycle_step(wk.st, Action{0.0, 0.0}, uni);
        std::erase_if(sim.walkers, [&](const Walker& wk) {
            return wk.st.y * std::sin(wk.st.phi) > wk.exit_abs_y;
        });
    }
    w.scenario.kind = AgentKind::pedestrian;
    w.scenario.rate_hz = 2.5;
    w.scenario.num_steps = p.num_steps;
    w.scenario.tracks = sim.rec.finish(every, p.num_steps);
    w.scenario.lights.assign(static_cast<std::size_t>(p.num_steps), {});
    return w;
}

}  // namespace

SyntheticWorld generate_synthetic(SyntheticKind kind, std::uint64_t seed, const SyntheticParams& params) {
    if (params.num_steps <= 0) throw InvalidInput("synthetic: num_steps must be positive");
    if (!(params.meters_per_pixel > 0.0)) throw InvalidInput("synthetic: meters_per_pixel must be positive");
    std::mt19937_64 rng(seed);
    SyntheticWorld w;
    switch (kind) {
        case SyntheticKind::straight_road: w = make_straight_road(rng, params); break;
        case SyntheticKind::signalized_intersection: w = make_intersection(rng, params); break;
        case SyntheticKind::crosswalk: w = make_crosswalk(rng, params); break;
    }
    w.scenario.location = to_string(kind) + "_" + std::to_string(seed);
    w.aim.validate();
    w.scenario.validate();
    return w;
}

}  // namespace aimsim
