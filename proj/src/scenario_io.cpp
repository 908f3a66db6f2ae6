#include "aimsim/scenario_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "aimsim/errors.hpp"
#include "aimsim/image.hpp"

namespace aimsim {

namespace {

constexpr int kScenarioVersion = 1;
constexpr int kAimVersion = 1;
constexpr int kMeshVersion = 1;

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Whitespace-split line reader that reports file:line in every error.
class LineReader {
public:
    explicit LineReader(const std::filesystem::path& path) : path_(path), in_(path) {
        if (!in_) throw InvalidInput("cannot open " + path.string());
    }

    // Next non-blank, non-comment line; false at end of file.
    bool next(std::vector<std::string>& tokens) {
        std::string line;
        while (std::getline(in_, line)) {
            ++line_no_;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            std::istringstream ss(line);
            tokens.clear();
            for (std::string t; ss >> t;) tokens.push_back(t);
            if (!tokens.empty()) return true;
        }
        return false;
    }

    [[noreturn]] void fail(const std::string& msg) const {
        throw ParseError(path_.string() + ":" + std::to_string(line_no_) + ": " + msg);
    }

    double number(const std::string& tok, const std::string& field) const {
        char* end = nullptr;
        const double v = std::strtod(tok.c_str(), &end);
        if (end == tok.c_str() || *end != '\0') fail("field '" + field + "': '" + tok + "' is not a number");
        return v;
    }

    int integer(const std::string& tok, const std::string& field) const {
        std::size_t used = 0;
        int v = 0;
        try {
            v = std::stoi(tok, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != tok.size() || tok.empty()) fail("field '" + field + "': '" + tok + "' is not an integer");
        return v;
    }

    void expect_count(const std::vector<std::string>& t, std::size_t n) const {
        if (t.size() != n) {
            fail("field '" + t[0] + "': expected " + std::to_string(n - 1) + " values, got " + std::to_string(t.size() - 1));
        }
    }

    void header(const std::string& magic, int version) {
        std::vector<std::string> t;
        if (!next(t) || t[0] != magic) fail("expected header '" + magic + " <version>'");
        if (t.size() != 2 || integer(t[1], "version") != version) fail("unsupported " + magic + " version");
    }

private:
    std::filesystem::path path_;
    std::ifstream in_;
    int line_no_ = 0;
};

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw InvalidInput("cannot open " + path.string() + " for writing");
    return out;
}

}  // namespace

bool Track::present_throughout(int begin, int end) const {
    for (int t = begin; t < end; ++t)
        if (!present[static_cast<std::size_t>(t)]) return false;
    return true;
}

double default_rate_hz(AgentKind kind) { return kind == AgentKind::vehicle ? 10.0 : 2.5; }
int default_segment_length(AgentKind kind) { return kind == AgentKind::vehicle ? 40 : 30; }

void Scenario::validate() const {
    if (num_steps < 0) throw ContractError("scenario: negative length");
    if (rate_hz != default_rate_hz(kind)) {
        throw ContractError("scenario: " + std::string(to_string(kind)) + " recordings must be sampled at " +
                            num(default_rate_hz(kind)) + " Hz, got " + num(rate_hz));
    }
    if (static_cast<int>(lights.size()) != num_steps) throw ContractError("scenario: light sequence length differs");
    std::set<int> ids;
    for (const auto& tr : tracks) {
        if (!ids.insert(tr.id).second) throw ContractError("scenario: duplicate agent id " + std::to_string(tr.id));
        if (!tr.attrs.valid()) throw ContractError("scenario: agent " + std::to_string(tr.id) + " has invalid extents");
        if (static_cast<int>(tr.states.size()) != num_steps || static_cast<int>(tr.present.size()) != num_steps) {
            throw ContractError("scenario: track " + std::to_string(tr.id) + " length differs from scenario length");
        }
        for (int t = 0; t < num_steps; ++t) {
            if (tr.present[static_cast<std::size_t>(t)] && !tr.states[static_cast<std::size_t>(t)].finite()) {
                throw ContractError("scenario: agent " + std::to_string(tr.id) + " has a non-finite state");
            }
        }
    }
}

Scene Scenario::scene_at(int t) const {
    if (t < 0 || t >= num_steps) throw ContractError("scene_at: step out of range");
    Scene s;
    s.timestep = t;
    for (const auto& tr : tracks)
        if (tr.present[static_cast<std::size_t>(t)]) s.agents.push_back({tr.id, tr.states[static_cast<std::size_t>(t)], tr.attrs});
    s.lights = lights[static_cast<std::size_t>(t)];
    return s;
}

void save_scenario(const Scenario& s, const std::filesystem::path& path) {
    s.validate();
    auto out = open_out(path);
    out << "aimsim-scenario " << kScenarioVersion << "\n";
    out << "location " << (s.location.empty() ? "-" : s.location) << "\n";
    out << "aim " << (s.aim_ref.empty() ? "-" : s.aim_ref) << "\n";
    out << "kind " << to_string(s.kind) << "\n";
    out << "rate_hz " << num(s.rate_hz) << "\n";
    out << "start_step " << s.start_step << "\n";
    out << "steps " << s.num_steps << "\n";
    for (const auto& tr : s.tracks) {
        out << "agent " << tr.id << " " << to_string(tr.attrs.kind) << " " << num(tr.attrs.length) << " "
            << num(tr.attrs.width) << "\n";
    }
    for (int t = 0; t < s.num_steps; ++t) {
        for (const auto& tr : s.tracks) {
            if (!tr.present[static_cast<std::size_t>(t)]) continue;
            const AgentState& st = tr.states[static_cast<std::size_t>(t)];
            out << "state " << t << " " << tr.id << " " << to_string(tr.attrs.kind) << " " << num(st.x) << " "
                << num(st.y) << " " << num(st.phi) << " " << num(st.v) << " " << num(tr.attrs.length) << " "
                << num(tr.attrs.width) << "\n";
        }
        for (const auto& l : s.lights[static_cast<std::size_t>(t)]) {
            out << "light " << t << " " << l.light_id << " " << to_string(l.color) << "\n";
        }
    }
}

Scenario load_scenario(const std::filesystem::path& path) {
    LineReader r(path);
    r.header("aimsim-scenario", kScenarioVersion);
    Scenario s;
    bool have_steps = false;
    bool have_rate = false;
    std::map<int, std::size_t> index;
    std::vector<std::string> t;
    auto require_steps = [&] {
        if (!have_steps) r.fail("'steps' must precede agent and record lines");
    };
    auto step_of = [&](const std::string& tok) {
        const int step = r.integer(tok, "step");
        if (step < 0 || step >= s.num_steps) r.fail("field 'step': " + tok + " outside [0, steps)");
        return static_cast<std::size_t>(step);
    };
    while (r.next(t)) {
        const std::string& key = t[0];
        if (key == "location") {
            r.expect_count(t, 2);
            s.location = t[1] == "-" ? "" : t[1];
        } else if (key == "aim") {
            r.expect_count(t, 2);
            s.aim_ref = t[1] == "-" ? "" : t[1];
        } else if (key == "kind") {
            r.expect_count(t, 2);
            try {
                s.kind = agent_kind_from_string(t[1]);
            } catch (const Error& e) {
                r.fail(std::string("field 'kind': ") + e.what());
            }
        } else if (key == "rate_hz") {
            r.expect_count(t, 2);
            s.rate_hz = r.number(t[1], "rate_hz");
            have_rate = true;
        } else if (key == "start_step") {
            r.expect_count(t, 2);
            s.start_step = r.integer(t[1], "start_step");
        } else if (key == "steps") {
            r.expect_count(t, 2);
            s.num_steps = r.integer(t[1], "steps");
            if (s.num_steps < 0) r.fail("field 'steps' must be nonnegative");
            s.lights.assign(static_cast<std::size_t>(s.num_steps), {});
            have_steps = true;
        } else if (key == "agent") {
            require_steps();
            r.expect_count(t, 5);
            Track tr;
            tr.id = r.integer(t[1], "agent id");
            try {
                tr.attrs.kind = agent_kind_from_string(t[2]);
            } catch (const Error& e) {
                r.fail(std::string("field 'kind': ") + e.what());
            }
            tr.attrs.length = r.number(t[3], "length");
            tr.attrs.width = r.number(t[4], "width");
            if (index.count(tr.id)) r.fail("duplicate agent id " + t[1]);
            tr.states.assign(static_cast<std::size_t>(s.num_steps), AgentState{});
            tr.present.assign(static_cast<std::size_t>(s.num_steps), false);
            index[tr.id] = s.tracks.size();
            s.tracks.push_back(std::move(tr));
        } else if (key == "state") {
            require_steps();
            r.expect_count(t, 10);
            const std::size_t step = step_of(t[1]);
            const int id = r.integer(t[2], "agent_id");
            const auto it = index.find(id);
            if (it == index.end()) r.fail("state for undeclared agent " + t[2]);
            Track& tr = s.tracks[it->second];
            if (t[3] != to_string(tr.attrs.kind) || r.number(t[8], "length") != tr.attrs.length ||
                r.number(t[9], "width") != tr.attrs.width) {
                r.fail("agent " + t[2] + " changes kind or extents");
            }
            if (tr.present[step]) r.fail("duplicate state for agent " + t[2] + " at step " + t[1]);
            const AgentState st(r.number(t[4], "x"), r.number(t[5], "y"), r.number(t[6], "phi"), r.number(t[7], "v"));
            if (!st.finite()) r.fail("non-finite state");
            tr.states[step] = st;
            tr.present[step] = true;
        } else if (key == "light") {
            require_steps();
            r.expect_count(t, 4);
            const std::size_t step = step_of(t[1]);
            TrafficLightState l;
            l.light_id = t[2];
            try {
                l.color = light_color_from_string(t[3]);
            } catch (const Error& e) {
                r.fail(std::string("field 'color': ") + e.what());
            }
            s.lights[step].push_back(l);
        } else {
            r.fail("unknown record '" + key + "'");
        }
    }
    if (!have_steps) r.fail("missing field 'steps'");
    if (!have_rate) r.fail("missing field 'rate_hz'");
    s.validate();
    return s;
}

AimMap load_aim_manifest(const std::filesystem::path& path) {
    LineReader r(path);
    r.header("aimsim-aim", kAimVersion);
    AimMap aim;
    std::string image;
    bool have_corner[4] = {false, false, false, false};
    std::vector<std::string> t;
    while (r.next(t)) {
        const std::string& key = t[0];
        if (key == "image") {
            r.expect_count(t, 2);
            image = t[1];
        } else if (key.rfind("corner", 0) == 0 && key.size() == 7 && key[6] >= '0' && key[6] <= '3') {
            r.expect_count(t, 3);
            const int k = key[6] - '0';
            aim.corners[static_cast<std::size_t>(k)] = {r.number(t[1], key + ".x"), r.number(t[2], key + ".y")};
            have_corner[k] = true;
        } else if (key == "light_channel") {
            r.expect_count(t, 2);
            aim.light_channels.push_back(t[1]);
        } else if (key == "stop_line") {
            r.expect_count(t, 6);
            aim.stop_lines.push_back({t[1],
                                      {r.number(t[2], "stop_line.x1"), r.number(t[3], "stop_line.y1")},
                                      {r.number(t[4], "stop_line.x2"), r.number(t[5], "stop_line.y2")}});
        } else {
            r.fail("unknown field '" + key + "'");
        }
    }
    if (image.empty()) r.fail("missing field 'image'");
    for (int k = 0; k < 4; ++k)
        if (!have_corner[k]) r.fail("missing field 'corner" + std::to_string(k) + "'");
    aim.image = std::make_shared<const Image>(read_image(path.parent_path() / image));
    aim.validate();
    return aim;
}

void save_aim_manifest(const AimMap& aim, const std::filesystem::path& path, const std::string& image_name) {
    aim.validate();
    write_image(*aim.image, path.parent_path() / image_name);
    auto out = open_out(path);
    out << "aimsim-aim " << kAimVersion << "\n";
    out << "image " << image_name << "\n";
    for (int k = 0; k < 4; ++k) {
        const Vec2 c = aim.corners[static_cast<std::size_t>(k)];
        out << "corner" << k << " " << num(c.x) << " " << num(c.y) << "\n";
    }
    for (const auto& ch : aim.light_channels) out << "light_channel " << ch << "\n";
    for (const auto& s : aim.stop_lines) {
        out << "stop_line " << s.light_id << " " << num(s.a.x) << " " << num(s.a.y) << " " << num(s.b.x) << " "
            << num(s.b.y) << "\n";
    }
}

DrivableMesh load_drivable_mesh(const std::filesystem::path& path) {
    LineReader r(path);
    r.header("aimsim-mesh", kMeshVersion);
    DrivableMesh mesh;
    std::vector<std::string> t;
    while (r.next(t)) {
        if (t[0] != "tri") r.fail("unknown record '" + t[0] + "'");
        r.expect_count(t, 7);
        std::array<Vec2, 3> tri;
        for (int k = 0; k < 3; ++k) {
            tri[static_cast<std::size_t>(k)] = {r.number(t[static_cast<std::size_t>(1 + 2 * k)], "tri.x"),
                                                r.number(t[static_cast<std::size_t>(2 + 2 * k)], "tri.y")};
        }
        mesh.triangles.push_back(tri);
    }
    mesh.validate();
    return mesh;
}

void save_drivable_mesh(const DrivableMesh& mesh, const std::filesystem::path& path) {
    mesh.validate();
    auto out = open_out(path);
    out << "aimsim-mesh " << kMeshVersion << "\n";
    for (const auto& tri : mesh.triangles) {
        out << "tri";
        for (Vec2 v : tri) out << " " << num(v.x) << " " << num(v.y);
        out << "\n";
    }
}

std::vector<Scenario> slice_segments(const Scenario& scenario, const SegmentSpec& spec) {
    if (spec.length <= 0 || spec.stride <= 0) throw ContractError("slice_segments: length and stride must be positive");
    std::vector<Scenario> out;
    for (int s0 = 0; s0 + spec.length <= scenario.num_steps; s0 += spec.stride) {
        Scenario seg;
        seg.location = scenario.location;
        seg.aim_ref = scenario.aim_ref;
        seg.kind = scenario.kind;
        seg.rate_hz = scenario.rate_hz;
        seg.start_step = scenario.start_step + s0;
        seg.num_steps = spec.length;
        seg.lights.assign(scenario.lights.begin() + s0, scenario.lights.begin() + s0 + spec.length);
        for (const auto& tr : scenario.tracks) {
            const auto b = tr.present.begin() + s0;
            if (std::none_of(b, b + spec.length, [](bool p) { return p; })) continue;
            Track part;
            part.id = tr.id;
            part.attrs = tr.attrs;
            part.states.assign(tr.states.begin() + s0, tr.states.begin() + s0 + spec.length);
            part.present.assign(b, b + spec.length);
            seg.tracks.push_back(std::move(part));
        }
        out.push_back(std::move(seg));
    }
    return out;
}

SplitResult temporal_split(const std::vector<Scenario>& recordings, const SegmentSpec& spec, double val_fraction) {
    if (!(val_fraction >= 0.0 && val_fraction <= 1.0)) throw ContractError("temporal_split: fraction outside [0, 1]");
    std::map<std::string, std::vector<const Scenario*>> by_location;
    std::vector<std::string> order;
    for (const auto& r : recordings) {
        if (!by_location.count(r.location)) order.push_back(r.location);
        by_location[r.location].push_back(&r);
    }
    SplitResult out;
    for (const auto& loc : order) {
        auto recs = by_location[loc];
        std::stable_sort(recs.begin(), recs.end(),
                         [](const Scenario* a, const Scenario* b) { return a->start_step < b->start_step; });
        long total = 0;
        for (const Scenario* r : recs) total += r->num_steps;
        // Steps are counted in recording order; everything at or past the
        // boundary belongs to validation.
        const double boundary = (1.0 - val_fraction) * static_cast<double>(total);
        long offset = 0;
        for (const Scenario* r : recs) {
            const auto segs = slice_segments(*r, spec);
            for (std::size_t i = 0; i < segs.size(); ++i) {
                const long end = offset + static_cast<long>(i) * spec.stride + spec.length;
                (static_cast<double>(end) <= boundary ? out.train : out.val).push_back(segs[i]);
            }
            offset += r->num_steps;
        }
    }
    return out;
}

std::string to_string(SyntheticKind k) {
    switch (k) {
        case SyntheticKind::straight_road: return "straight_road";
        case SyntheticKind::signalized_intersection: return "signalized_intersection";
        case SyntheticKind::crosswalk: return "crosswalk";
    }
    return "?";
}

SyntheticKind synthetic_kind_from_string(const std::string& s) {
    if (s == "straight_road") return SyntheticKind::straight_road;
    if (s == "signalized_intersection") return SyntheticKind::signalized_intersection;
    if (s == "crosswalk") return SyntheticKind::crosswalk;
    throw InvalidInput("unknown synthetic kind '" + s + "' (straight_road, signalized_intersection, crosswalk)");
}

void save_world(const SyntheticWorld& world, const std::filesystem::path& dir, const std::string& stem) {
    std::filesystem::create_directories(dir);
    save_aim_manifest(world.aim, dir / (stem + ".aim"), stem + ".png");
    save_drivable_mesh(world.drivable, dir / (stem + ".mesh"));
    Scenario s = world.scenario;
    s.aim_ref = stem + ".aim";
    save_scenario(s, dir / (stem + ".scn"));
}

}  // namespace aimsim
