#include "aimsim/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "aimsim/background.hpp"
#include "aimsim/errors.hpp"
#include "aimsim/image.hpp"
#include "aimsim/metrics.hpp"
#include "aimsim/policy_model.hpp"
#include "aimsim/renderer.hpp"
#include "aimsim/scenario_io.hpp"
#include "json.hpp"

namespace aimsim::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InvalidInput("cannot write " + path.string());
    os << text;
    if (!os) throw InvalidInput("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InvalidInput("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Resolved flags of the command, in CLI11's config format so that
// `--config <file>` replays the run.
void save_run_config(const CLI::App& app, const fs::path& run, const std::string& command) {
    // keep only the section of the command that ran
    std::istringstream all(app.config_to_str(true, false));
    std::string text, line;
    bool keep = false;
    while (std::getline(all, line)) {
        if (!line.empty() && line.front() == '[') keep = line == "[" + command + "]";
        const auto key = line.substr(0, line.find('='));
        if (keep && key.find('.') == std::string::npos) text += line + "\n";
    }
    write_text(run / "config" / (command + ".toml"), text);
}

fs::path aim_path_of(const fs::path& scenario_path, const Scenario& s) {
    if (s.aim_ref.empty()) throw InvalidInput(scenario_path.string() + ": scenario has no AIM reference");
    return scenario_path.parent_path() / s.aim_ref;
}

struct Source {
    fs::path path;
    Scenario scenario;
    std::shared_ptr<const SceneRenderer> renderer;
    const AimMap* aim = nullptr;
};

// Loads scenarios and builds one renderer per distinct AIM file.
std::vector<Source> load_sources(const std::vector<std::string>& paths, const std::string& aim_override,
                                 const RenderParams& params) {
    std::map<fs::path, std::shared_ptr<const SceneRenderer>> renderers;
    std::vector<Source> out;
    for (const auto& p : paths) {
        Source src;
        src.path = p;
        src.scenario = load_scenario(p);
        const fs::path aim = aim_override.empty() ? aim_path_of(p, src.scenario) : fs::path(aim_override);
        auto& r = renderers[fs::weakly_canonical(aim)];
        if (!r) r = std::make_shared<SceneRenderer>(load_aim_manifest(aim), params);
        src.renderer = r;
        src.aim = &r->aim();
        out.push_back(std::move(src));
    }
    return out;
}

json state_json(const AgentState& s) { return json::array({s.x, s.y, s.phi, s.v}); }

AgentState state_from_json(const json& j) {
    return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>()};
}

json track_json(const std::vector<AgentState>& traj) {
    json a = json::array();
    for (const auto& s : traj) a.push_back(state_json(s));
    return a;
}

// --------------------------------------------------------------- commands

struct SynthOpts {
    std::string kind;
    std::uint64_t seed = 0;
    std::string out;
    int steps = 400;
    std::string stem;
};

void do_synth(const SynthOpts& o, const CLI::App& app) {
    SyntheticParams p;
    p.num_steps = o.steps;
    const SyntheticKind kind = synthetic_kind_from_string(o.kind);
    const auto world = generate_synthetic(kind, o.seed, p);
    const std::string stem = o.stem.empty() ? o.kind + "_" + std::to_string(o.seed) : o.stem;
    save_world(world, o.out, stem);
    save_run_config(app, o.out, "synth");
    std::cout << "wrote " << (fs::path(o.out) / (stem + ".scn")).string() << "\n";
}

struct BackgroundOpts {
    std::vector<std::string> frames;
    std::string run;
    std::string name = "background.png";
};

void do_background(const BackgroundOpts& o, const CLI::App& app) {
    std::vector<std::string> frames = o.frames;
    // a single directory argument means every image in it, in name order
    if (frames.size() == 1 && fs::is_directory(frames[0])) {
        const fs::path dir = frames[0];
        frames.clear();
        for (const auto& e : fs::directory_iterator(dir)) {
            const auto ext = e.path().extension().string();
            if (ext == ".png" || ext == ".ppm") frames.push_back(e.path().string());
        }
        std::sort(frames.begin(), frames.end());
    }
    std::vector<Image> images;
    for (const auto& f : frames) images.push_back(read_image(f));
    const fs::path out = fs::path(o.run) / "renders" / o.name;
    fs::create_directories(out.parent_path());
    write_image(extract_background(images), out);
    save_run_config(app, o.run, "extract-background");
    std::cout << "wrote " << out.string() << " from " << images.size() << " frames\n";
}

struct RenderOpts {
    std::string scenario;
    std::string aim;
    std::string run;
    int time = 0;
    int ego = 0;
    int resolution = 128;
    double extent = 0.0;
    double softness = 0.5;
    bool no_lights = false;
};

void do_render(const RenderOpts& o, const CLI::App& app) {
    const Scenario s = load_scenario(o.scenario);
    RenderParams params = RenderParams::for_kind(s.kind);
    params.resolution = o.resolution;
    if (o.extent > 0.0) params.extent = o.extent;
    params.softness = o.softness;
    params.draw_lights = !o.no_lights;
    const auto sources = load_sources({o.scenario}, o.aim, params);
    if (o.time < 0 || o.time >= s.num_steps) throw ContractError("render: --time outside the scenario");
    const Scene scene = s.scene_at(o.time);
    if (o.ego < 0 || o.ego >= static_cast<int>(scene.agents.size()))
        throw ContractError("render: --ego must index one of the " + std::to_string(scene.agents.size()) +
                            " agents present at that time");
    const Birdview bv = sources[0].renderer->render(scene, o.ego);
    const fs::path out =
        fs::path(o.run) / "renders" / ("render_t" + std::to_string(o.time) + "_ego" + std::to_string(o.ego) + ".png");
    fs::create_directories(out.parent_path());
    write_image(bv.to_image(), out);
    save_run_config(app, o.run, "render");
    std::cout << "wrote " << out.string() << "\n";
}

struct DegradeOpts {
    std::string aim;
    std::string run;
    double blur = 2.0;
    double noise = 0.2;
    std::uint64_t seed = 0;
};

void do_degrade(const DegradeOpts& o, const CLI::App& app) {
    AimMap aim = load_aim_manifest(o.aim);
    aim.image = std::make_shared<const Image>(degrade(*aim.image, o.blur, o.noise, o.seed));
    const fs::path dir = fs::path(o.run) / "renders";
    fs::create_directories(dir);
    save_aim_manifest(aim, dir / "degraded.aim", "degraded.png");
    save_run_config(app, o.run, "degrade");
    std::cout << "wrote " << (dir / "degraded.aim").string() << "\n";
}

struct TrainOpts {
    std::vector<std::string> data;
    std::string run;
    std::string aim;
    std::string policy_config;
    std::string kind = "vehicle";
    std::uint64_t seed = 0;
    int resolution = 0;
    double extent = 0.0;
    bool no_lights = false;
    int stride = 0;
    double val_fraction = 0.05;
    TrainConfig tc;
};

std::vector<Episode> episodes_of(const std::vector<Scenario>& segs, const std::map<std::string, const Source*>& by_loc,
                                 AgentKind kind) {
    std::vector<Episode> out;
    for (const auto& s : segs)
        if (!controlled_tracks(s, kind).empty()) out.push_back({s, by_loc.at(s.location)->renderer});
    return out;
}

void do_train(const TrainOpts& o, const CLI::App& app) {
    PolicyConfig cfg = o.policy_config.empty() ? PolicyConfig::for_kind(agent_kind_from_string(o.kind))
                                               : policy_config_from_json(read_text(o.policy_config));
    if (o.resolution > 0) cfg.render.resolution = o.resolution;
    if (o.extent > 0.0) cfg.render.extent = o.extent;
    if (o.no_lights) cfg.render.draw_lights = false;
    cfg.validate();
    const auto sources = load_sources(o.data, o.aim, cfg.render);
    std::vector<Scenario> recs;
    std::map<std::string, const Source*> by_loc;
    for (const auto& s : sources) {
        if (by_loc.count(s.scenario.location) && by_loc[s.scenario.location]->aim != s.aim)
            throw InvalidInput("train: location " + s.scenario.location + " appears with two different AIMs");
        by_loc[s.scenario.location] = &s;
        recs.push_back(s.scenario);
    }
    const SegmentSpec spec{cfg.horizon, o.stride > 0 ? o.stride : cfg.horizon};
    const SplitResult split = temporal_split(recs, spec, o.val_fraction);
    const auto train_set = episodes_of(split.train, by_loc, cfg.kind);
    const auto val_set = episodes_of(split.val, by_loc, cfg.kind);
    std::cout << "train segments " << train_set.size() << ", validation segments " << val_set.size() << "\n";

    TrainConfig tc = o.tc;
    tc.seed = o.seed;
    const fs::path run = o.run;
    fs::create_directories(run / "checkpoints");
    fs::create_directories(run / "metrics");
    save_run_config(app, run, "train");
    write_text(run / "config" / "policy.json", to_json(cfg) + "\n");
    write_text(run / "config" / "train.json", to_json(tc) + "\n");

    PolicyModel model(cfg, o.seed);
    std::vector<LossRow> rows;
    const TrainResult res = train(model, train_set, val_set, tc, [&](const LossRow& r) {
        rows.push_back(r);
        write_loss_curve(rows, run / "metrics" / "loss_curve.csv");
        std::cout << "step " << r.step << " loss " << r.train_loss << " kl " << r.train_kl << " val " << r.val_loss
                  << std::endl;
    });
    write_loss_curve(res.curve, run / "metrics" / "loss_curve.csv");
    model.save(run / "checkpoints" / "model.ckpt");
    std::cout << "wrote " << (run / "checkpoints" / "model.ckpt").string() << " after " << res.steps_run
              << " steps" << (res.stopped_early ? " (validation loss stopped improving)" : "") << "\n";
}

struct RolloutOpts {
    std::string checkpoint;
    std::vector<std::string> data;
    std::string run;
    std::string aim;
    std::uint64_t seed = 0;
    int samples = 6;
    int t_obs = 10;
    std::string mode = "joint_autoregressive";
    int stride = 0;
    int max_segments = 0;
    std::string name = "rollouts.json";
};

void do_rollout(const RolloutOpts& o, const CLI::App& app) {
    const PolicyModel model = PolicyModel::load(o.checkpoint);
    const PolicyConfig& cfg = model.config();
    const auto sources = load_sources(o.data, o.aim, cfg.render);
    RolloutSpec spec;
    spec.t_obs = o.t_obs;
    spec.num_samples = o.samples;
    spec.mode = rollout_mode_from_string(o.mode);
    spec.seed = o.seed;

    json doc;
    doc["format"] = "aimsim-rollouts";
    doc["version"] = 1;
    doc["kind"] = std::string(to_string(cfg.kind));
    doc["mode"] = o.mode;
    doc["t_obs"] = o.t_obs;
    doc["num_samples"] = o.samples;
    doc["seed"] = o.seed;
    json segs = json::array();
    int done = 0;
    for (const auto& src : sources) {
        const SegmentSpec seg_spec{cfg.horizon, o.stride > 0 ? o.stride : cfg.horizon};
        for (const auto& seg : slice_segments(src.scenario, seg_spec)) {
            if (o.max_segments > 0 && done >= o.max_segments) break;
            if (controlled_tracks(seg, cfg.kind).empty()) continue;
            const Episode ep{seg, src.renderer};
            const RolloutResult r = rollout(model, ep, spec);
            json s;
            s["scenario"] = src.path.string();
            s["start_step"] = seg.start_step;
            s["red_light_violation_rate"] = red_light_violation_rate(r, seg, *src.aim);
            json ids = json::array(), attrs = json::array(), gt = json::array(), samples = json::array();
            for (std::size_t n = 0; n < r.track_indices.size(); ++n) {
                ids.push_back(seg.tracks[static_cast<std::size_t>(r.track_indices[n])].id);
                attrs.push_back({r.attrs[n].length, r.attrs[n].width, std::string(to_string(r.attrs[n].kind))});
                gt.push_back(track_json(r.ground_truth[n]));
            }
            for (const auto& k : r.samples) {
                json per = json::array();
                for (const auto& traj : k) per.push_back(track_json(traj));
                samples.push_back(per);
            }
            s["track_ids"] = ids;
            s["attrs"] = attrs;
            s["ground_truth"] = gt;
            s["samples"] = samples;
            segs.push_back(s);
            ++done;
        }
    }
    if (segs.empty()) throw ContractError("rollout: no segment has an agent of the controlled kind");
    doc["segments"] = segs;
    const fs::path out = fs::path(o.run) / "rollouts" / o.name;
    write_text(out, doc.dump() + "\n");
    save_run_config(app, o.run, "rollout");
    std::cout << "wrote " << out.string() << " (" << segs.size() << " segments)\n";
}

struct EvaluateOpts {
    std::string rollouts;
    std::vector<std::string> data;
    std::string run;
    std::string mesh;
    std::string min_mode = "per_agent";
    int t_obs = 10;
    int stride = 0;
    double collision_threshold = 0.0;
};

struct SegmentSamples {
    TrajectorySamples samples;
    std::string scenario;
};

std::vector<SegmentSamples> samples_from_rollouts(const fs::path& path, int& t_obs, AgentKind& kind) {
    json doc;
    try {
        doc = json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    std::vector<SegmentSamples> out;
    try {
        if (doc.at("format") != "aimsim-rollouts") throw ParseError(path.string() + ": not a rollout file");
        t_obs = doc.at("t_obs").get<int>();
        kind = agent_kind_from_string(doc.at("kind").get<std::string>());
        for (const json& s : doc.at("segments")) {
            SegmentSamples seg;
            seg.scenario = s.at("scenario").get<std::string>();
            for (const json& a : s.at("attrs"))
                seg.samples.attrs.push_back(
                    {a.at(0).get<double>(), a.at(1).get<double>(), agent_kind_from_string(a.at(2).get<std::string>())});
            for (const json& g : s.at("ground_truth")) {
                std::vector<AgentState> traj;
                for (std::size_t t = static_cast<std::size_t>(t_obs); t < g.size(); ++t)
                    traj.push_back(state_from_json(g[t]));
                seg.samples.ground_truth.push_back(std::move(traj));
            }
            for (const json& k : s.at("samples")) {
                std::vector<std::vector<AgentState>> per;
                for (const json& g : k) {
                    std::vector<AgentState> traj;
                    for (std::size_t t = static_cast<std::size_t>(t_obs); t < g.size(); ++t)
                        traj.push_back(state_from_json(g[t]));
                    per.push_back(std::move(traj));
                }
                seg.samples.samples.push_back(std::move(per));
            }
            out.push_back(std::move(seg));
        }
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return out;
}

void do_evaluate(const EvaluateOpts& o, const CLI::App& app) {
    if (o.rollouts.empty() == o.data.empty())
        throw ContractError("evaluate: give either --rollouts or --data (ground-truth replay)");
    const MinMode mode = o.min_mode == "joint" ? MinMode::joint : MinMode::per_agent;
    if (o.min_mode != "joint" && o.min_mode != "per_agent") throw InvalidInput("evaluate: unknown --min-mode");

    std::vector<SegmentSamples> segs;
    AgentKind kind = AgentKind::vehicle;
    int t_obs = o.t_obs;
    if (!o.rollouts.empty()) {
        segs = samples_from_rollouts(o.rollouts, t_obs, kind);
    } else {
        // each ground-truth track replayed as its own single sample
        for (const auto& p : o.data) {
            const Scenario sc = load_scenario(p);
            kind = sc.kind;
            const SegmentSpec spec{default_segment_length(kind),
                                   o.stride > 0 ? o.stride : default_segment_length(kind)};
            for (const auto& seg : slice_segments(sc, spec)) {
                const auto tracks = controlled_tracks(seg, kind);
                if (tracks.empty()) continue;
                if (t_obs < 1 || t_obs >= seg.num_steps) throw ContractError("evaluate: --t-obs outside the segment");
                SegmentSamples s;
                s.scenario = p;
                std::vector<std::vector<AgentState>> per;
                for (int i : tracks) {
                    const Track& tr = seg.tracks[static_cast<std::size_t>(i)];
                    std::vector<AgentState> traj(tr.states.begin() + t_obs, tr.states.end());
                    s.samples.ground_truth.push_back(traj);
                    per.push_back(traj);
                    s.samples.attrs.push_back(tr.attrs);
                }
                s.samples.samples.push_back(per);
                segs.push_back(std::move(s));
            }
        }
    }
    if (segs.empty()) throw ContractError("evaluate: nothing to evaluate");

    // vehicles also get the off-road rate; the drivable mesh defaults to the
    // one saved next to the scenario
    std::map<std::string, DrivableMesh> meshes;
    auto mesh_for = [&](const std::string& scenario) -> const DrivableMesh* {
        if (kind != AgentKind::vehicle) return nullptr;
        fs::path p = o.mesh;
        if (p.empty()) {
            p = fs::path(scenario).replace_extension(".mesh");
            if (!fs::exists(p))
                throw InvalidInput("evaluate: off-road rate needs a drivable mesh; pass --mesh (looked for " +
                                   p.string() + ")");
        }
        auto it = meshes.find(p.string());
        if (it == meshes.end()) it = meshes.emplace(p.string(), load_drivable_mesh(p)).first;
        return &it->second;
    };

    MetricsReport total;
    int agents = 0;
    for (const auto& s : segs) {
        const MetricsReport r = evaluate_samples(s.samples, mesh_for(s.scenario), mode, o.collision_threshold);
        const int n = r.num_agents;
        for (const auto& [k, v] : r.values) total.values[k] += v * n;
        agents += n;
        total.num_samples = r.num_samples;
        total.horizon = r.horizon;
    }
    for (auto& [k, v] : total.values) v /= agents;
    total.num_agents = agents;

    const fs::path dir = fs::path(o.run) / "metrics";
    write_text(dir / "metrics.txt", total.to_text());
    write_text(dir / "metrics.json", total.to_json() + "\n");
    save_run_config(app, o.run, "evaluate");
    std::cout << total.to_text();
}

}  // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"aimsim: differentiable birdview simulation on aerial image-based maps"};
    app.require_subcommand(1);
    app.set_config("--config", "", "Replay a run from the .toml file it wrote under <run>/config");
    app.set_help_all_flag("--help-all", "Help for every command");

    SynthOpts synth;
    auto* c_synth = app.add_subcommand("synth", "Generate a synthetic location with scripted traffic");
    c_synth->add_option("--kind", synth.kind, "straight_road | signalized_intersection | crosswalk")->required();
    c_synth->add_option("--seed", synth.seed, "Random seed")->required();
    c_synth->add_option("--out", synth.out, "Output directory")->required();
    c_synth->add_option("--steps", synth.steps, "Recording length in steps")->capture_default_str();
    c_synth->add_option("--stem", synth.stem, "File stem (default <kind>_<seed>)");

    BackgroundOpts bg;
    auto* c_bg = app.add_subcommand("extract-background", "Average a stack of aligned frames into an AIM image");
    c_bg->add_option("--frames", bg.frames, "Frame images, or one directory of frames")->required();
    c_bg->add_option("--run", bg.run, "Run directory")->required();
    c_bg->add_option("--name", bg.name, "Output file name under <run>/renders")->capture_default_str();

    RenderOpts rd;
    auto* c_rd = app.add_subcommand("render", "Render one ego-centered birdview");
    c_rd->add_option("--scenario", rd.scenario, "Scenario file")->required();
    c_rd->add_option("--run", rd.run, "Run directory")->required();
    c_rd->add_option("--time", rd.time, "Step index")->capture_default_str();
    c_rd->add_option("--ego", rd.ego, "Index of the ego among agents present at that step")->capture_default_str();
    c_rd->add_option("--aim", rd.aim, "Use this AIM manifest instead of the scenario's");
    c_rd->add_option("--resolution", rd.resolution, "Pixels per side")->capture_default_str();
    c_rd->add_option("--extent", rd.extent, "Meters per side (default per agent kind)");
    c_rd->add_option("--softness", rd.softness, "Edge softness in pixels; 0 renders hard edges")->capture_default_str();
    c_rd->add_flag("--no-lights", rd.no_lights, "Do not draw traffic lights");

    DegradeOpts dg;
    auto* c_dg = app.add_subcommand("degrade", "Blur and add noise to an AIM");
    c_dg->add_option("--aim", dg.aim, "AIM manifest")->required();
    c_dg->add_option("--run", dg.run, "Run directory")->required();
    c_dg->add_option("--seed", dg.seed, "Noise seed")->required();
    c_dg->add_option("--blur", dg.blur, "Gaussian blur sigma in pixels")->capture_default_str();
    c_dg->add_option("--noise", dg.noise, "Noise standard deviation")->capture_default_str();

    TrainOpts tr;
    auto* c_tr = app.add_subcommand("train", "Train a policy on recorded scenarios");
    c_tr->add_option("--data", tr.data, "Scenario files")->required();
    c_tr->add_option("--run", tr.run, "Run directory")->required();
    c_tr->add_option("--seed", tr.seed, "Seed for initialization and sampling")->required();
    c_tr->add_option("--policy-config", tr.policy_config, "Policy config JSON (default: per-kind defaults)");
    c_tr->add_option("--kind", tr.kind, "Controlled agent kind when no policy config is given")->capture_default_str();
    c_tr->add_option("--aim", tr.aim, "Use this AIM manifest for every scenario");
    c_tr->add_option("--resolution", tr.resolution, "Override the birdview resolution");
    c_tr->add_option("--extent", tr.extent, "Override the birdview extent in meters");
    c_tr->add_flag("--no-lights", tr.no_lights, "Train without traffic lights in the birdview");
    c_tr->add_option("--stride", tr.stride, "Segment stride in steps (default: segment length)");
    c_tr->add_option("--val-fraction", tr.val_fraction, "Trailing fraction of each location held out")
        ->capture_default_str();
    c_tr->add_option("--steps", tr.tc.steps, "Maximum optimizer steps")->capture_default_str();
    c_tr->add_option("--lr", tr.tc.learning_rate, "Learning rate")->capture_default_str();
    c_tr->add_option("--momentum", tr.tc.momentum, "Momentum")->capture_default_str();
    c_tr->add_option("--clip", tr.tc.clip_norm, "Global gradient norm limit")->capture_default_str();
    c_tr->add_option("--agents-per-step", tr.tc.agents_per_step, "Controlled agents per step; 0 = all")
        ->capture_default_str();
    c_tr->add_option("--eval-every", tr.tc.eval_every, "Steps between validation passes")->capture_default_str();
    c_tr->add_option("--patience", tr.tc.patience, "Validation passes without improvement before stopping")
        ->capture_default_str();
    c_tr->add_option("--max-val-segments", tr.tc.max_val_episodes, "Validation segments per pass")
        ->capture_default_str();

    RolloutOpts ro;
    auto* c_ro = app.add_subcommand("rollout", "Sample closed-loop futures with a trained policy");
    c_ro->add_option("--checkpoint", ro.checkpoint, "Policy checkpoint")->required();
    c_ro->add_option("--data", ro.data, "Scenario files")->required();
    c_ro->add_option("--run", ro.run, "Run directory")->required();
    c_ro->add_option("--seed", ro.seed, "Sampling seed")->required();
    c_ro->add_option("--aim", ro.aim, "Use this AIM manifest for every scenario");
    c_ro->add_option("--samples", ro.samples, "Samples per segment (K)")->capture_default_str();
    c_ro->add_option("--t-obs", ro.t_obs, "Observed steps")->capture_default_str();
    c_ro->add_option("--mode", ro.mode, "joint_autoregressive | classmate_forcing")->capture_default_str();
    c_ro->add_option("--stride", ro.stride, "Segment stride (default: segment length)");
    c_ro->add_option("--max-segments", ro.max_segments, "Stop after this many segments; 0 = all");
    c_ro->add_option("--name", ro.name, "Output file name under <run>/rollouts")->capture_default_str();

    EvaluateOpts ev;
    auto* c_ev = app.add_subcommand("evaluate", "Compute prediction and realism metrics");
    c_ev->add_option("--rollouts", ev.rollouts, "Rollout file written by `rollout`");
    c_ev->add_option("--data", ev.data, "Scenario files; evaluates the ground truth as its own single sample");
    c_ev->add_option("--run", ev.run, "Run directory")->required();
    c_ev->add_option("--mesh", ev.mesh, "Drivable mesh (default: <scenario>.mesh)");
    c_ev->add_option("--min-mode", ev.min_mode, "per_agent | joint")->capture_default_str();
    c_ev->add_option("--t-obs", ev.t_obs, "Observed steps for --data")->capture_default_str();
    c_ev->add_option("--stride", ev.stride, "Segment stride for --data");
    c_ev->add_option("--collision-threshold", ev.collision_threshold, "IoU above which boxes collide")
        ->capture_default_str();

    // lets `--config <run>/config/<command>.toml` select the command
    for (auto* sub : app.get_subcommands({})) sub->configurable();

    std::vector<std::string> argv_rev(args.rbegin(), args.rend());
    try {
        app.parse(argv_rev);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == static_cast<int>(CLI::ExitCodes::Success)) {
            app.exit(e);
            return 0;
        }
        std::cerr << "usage error: " << e.what() << "\n" << "run with --help for usage\n";
        return 2;
    }

    try {
        if (c_synth->parsed()) do_synth(synth, app);
        else if (c_bg->parsed()) do_background(bg, app);
        else if (c_rd->parsed()) do_render(rd, app);
        else if (c_dg->parsed()) do_degrade(dg, app);
        else if (c_tr->parsed()) do_train(tr, app);
        else if (c_ro->parsed()) do_rollout(ro, app);
        else if (c_ev->parsed()) do_evaluate(ev, app);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

int run(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args);
}

}  // namespace aimsim::cli
