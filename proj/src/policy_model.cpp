#include "aimsim/policy_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>

#include "aimsim/errors.hpp"
#include "json.hpp"

namespace aimsim {

using ad::Tensor;
using json = nlohmann::ordered_json;

namespace {

int conv_out(int in, int kernel, int stride) { return (in + 2 * (kernel / 2) - kernel) / stride + 1; }

Tensor linear(const Tensor& w, const Tensor& b, const Tensor& x) { return ad::matmul(w, x) + b; }

Tensor action_tensor(const Action& a) { return Tensor::vector({a.a1, a.a2}); }

}  // namespace

// ---------------------------------------------------------------- config

void PolicyConfig::validate() const {
    if (latent_dim <= 0 || hidden_dim <= 0 || feature_dim <= 0 || head_hidden <= 0)
        throw ContractError("policy: layer sizes must be positive");
    if (channels.empty()) throw ContractError("policy: at least one conv layer is required");
    for (int c : channels)
        if (c <= 0) throw ContractError("policy: conv channels must be positive");
    if (kernel <= 0 || kernel % 2 == 0) throw ContractError("policy: kernel must be odd and positive");
    if (stride <= 0) throw ContractError("policy: stride must be positive");
    if (obs_min < 1 || obs_max < obs_min) throw ContractError("policy: need 1 <= obs_min <= obs_max");
    if (horizon <= obs_max) throw ContractError("policy: horizon must exceed obs_max");
    if (!(dt > 0.0)) throw ContractError("policy: dt must be positive");
    if (!(max_accel > 0.0) || !(max_turn > 0.0)) throw ContractError("policy: action bounds must be positive");
    for (double s : sigma.as_array())
        if (!(s > 0.0)) throw ContractError("policy: transition sigma must be positive");
    if (kind != AgentKind::vehicle && kind != AgentKind::pedestrian)
        throw ContractError("policy: controlled kind must be vehicle or pedestrian");
    render.validate();
    int r = render.resolution;
    for (std::size_t i = 0; i < channels.size(); ++i) r = conv_out(r, kernel, stride);
    if (r <= 0) throw ContractError("policy: too many conv layers for the birdview resolution");
}

PolicyConfig PolicyConfig::for_kind(AgentKind kind) {
    PolicyConfig c;
    c.kind = kind;
    c.render = RenderParams::for_kind(kind);
    c.horizon = default_segment_length(kind);
    c.dt = 1.0 / default_rate_hz(kind);
    if (kind == AgentKind::pedestrian) {
        UnicycleParams u;
        c.max_accel = u.max_accel;
        c.max_turn = u.max_omega;
    } else {
        BicycleParams b;
        c.max_accel = b.max_accel;
        c.max_turn = b.max_steer;
    }
    return c;
}

std::string to_json(const PolicyConfig& c) {
    json j;
    j["kind"] = std::string(to_string(c.kind));
    j["latent_dim"] = c.latent_dim;
    j["hidden_dim"] = c.hidden_dim;
    j["feature_dim"] = c.feature_dim;
    j["head_hidden"] = c.head_hidden;
    j["channels"] = c.channels;
    j["kernel"] = c.kernel;
    j["stride"] = c.stride;
    j["speed_input"] = c.speed_input;
    j["render"] = {{"resolution", c.render.resolution}, {"extent", c.render.extent},
                   {"softness", c.render.softness},     {"draw_lights", c.render.draw_lights},
                   {"bar_width", c.render.bar_width},   {"apex_fraction", c.render.apex_fraction}};
    j["sigma"] = {c.sigma.x, c.sigma.y, c.sigma.phi, c.sigma.v};
    j["obs_min"] = c.obs_min;
    j["obs_max"] = c.obs_max;
    j["horizon"] = c.horizon;
    j["dt"] = c.dt;
    j["max_accel"] = c.max_accel;
    j["max_turn"] = c.max_turn;
    return j.dump(2);
}

PolicyConfig policy_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("policy config: ") + e.what());
    }
    PolicyConfig c;
    try {
        if (j.contains("kind")) {
            c = PolicyConfig::for_kind(agent_kind_from_string(j["kind"].get<std::string>()));
        }
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
        };
        get("latent_dim", c.latent_dim);
        get("hidden_dim", c.hidden_dim);
        get("feature_dim", c.feature_dim);
        get("head_hidden", c.head_hidden);
        get("channels", c.channels);
        get("kernel", c.kernel);
        get("stride", c.stride);
        get("speed_input", c.speed_input);
        if (j.contains("render")) {
            const json& r = j["render"];
            if (r.contains("resolution")) c.render.resolution = r["resolution"].get<int>();
            if (r.contains("extent")) c.render.extent = r["extent"].get<double>();
            if (r.contains("softness")) c.render.softness = r["softness"].get<double>();
            if (r.contains("draw_lights")) c.render.draw_lights = r["draw_lights"].get<bool>();
            if (r.contains("bar_width")) c.render.bar_width = r["bar_width"].get<double>();
            if (r.contains("apex_fraction")) c.render.apex_fraction = r["apex_fraction"].get<double>();
        }
        if (j.contains("sigma")) {
            auto s = j["sigma"].get<std::vector<double>>();
            if (s.size() != 4) throw ParseError("policy config: sigma needs 4 entries");
            c.sigma = {s[0], s[1], s[2], s[3]};
        }
        get("obs_min", c.obs_min);
        get("obs_max", c.obs_max);
        get("horizon", c.horizon);
        get("dt", c.dt);
        get("max_accel", c.max_accel);
        get("max_turn", c.max_turn);
    } catch (const json::exception& e) {
        throw ParseError(std::string("policy config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------- noise

std::vector<double> NoiseSource::draw(int n) {
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    if (zero_) return out;
    for (double& v : out) v = normal_(rng_);
    return out;
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t sample, std::uint64_t agent) {
    // splitmix64 over the three words
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    return mix(mix(mix(seed) ^ sample) ^ agent);
}

// ---------------------------------------------------------------- model

int PolicyModel::add(const std::string& name, ad::Shape shape, std::mt19937_64& rng, double scale) {
    const int n = ad::shape_numel(shape);
    std::vector<double> v(static_cast<std::size_t>(n), 0.0);
    if (scale > 0.0) {
        std::uniform_real_distribution<double> u(-scale, scale);
        for (double& x : v) x = u(rng);
    }
    params_.emplace_back(std::move(shape), std::move(v));
    names_.push_back(name);
    return static_cast<int>(params_.size()) - 1;
}

PolicyModel::PolicyModel(PolicyConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const int k = config_.kernel;
    int in_c = 3, r = config_.render.resolution;
    for (std::size_t i = 0; i < config_.channels.size(); ++i) {
        const int out_c = config_.channels[i];
        const double he = std::sqrt(6.0 / (in_c * k * k));
        conv_w_.push_back(add("conv" + std::to_string(i) + ".w", {out_c, in_c, k, k}, rng, he));
        conv_b_.push_back(add("conv" + std::to_string(i) + ".b", {out_c}, rng, 0.0));
        in_c = out_c;
        r = conv_out(r, k, config_.stride);
    }
    flat_dim_ = in_c * r * r;
    const int F = config_.feature_dim, H = config_.hidden_dim, L = config_.latent_dim, M = config_.head_hidden;
    enc_w_ = add("enc.w", {F, flat_dim_}, rng, std::sqrt(6.0 / flat_dim_));
    enc_b_ = add("enc.b", {F}, rng, 0.0);

    const int C = context_dim();
    const int x_dim = C + 2;
    const double gx = 1.0 / std::sqrt(x_dim), gh = 1.0 / std::sqrt(H);
    const char* gate[3] = {"r", "u", "n"};
    for (int g = 0; g < 3; ++g) {
        gru_[3 * g] = add(std::string("gru.W") + gate[g], {H, x_dim}, rng, gx);
        gru_[3 * g + 1] = add(std::string("gru.U") + gate[g], {H, H}, rng, gh);
        gru_[3 * g + 2] = add(std::string("gru.b") + gate[g], {H}, rng, 0.0);
    }

    const int post_in = C + 2 + H;
    post_w1_ = add("post.w1", {M, post_in}, rng, std::sqrt(6.0 / post_in));
    post_b1_ = add("post.b1", {M}, rng, 0.0);
    post_w2_ = add("post.w2", {2 * L, M}, rng, 0.1 / std::sqrt(M));
    post_b2_ = add("post.b2", {2 * L}, rng, 0.0);

    const int dec_in = C + L + H;
    dec_w1_ = add("dec.w1", {M, dec_in}, rng, std::sqrt(6.0 / dec_in));
    dec_b1_ = add("dec.b1", {M}, rng, 0.0);
    dec_w2_ = add("dec.w2", {2, M}, rng, 0.1 / std::sqrt(M));
    dec_b2_ = add("dec.b2", {2}, rng, 0.0);
    log_std_ = add("dec.log_std", {2}, rng, 0.0);
}

int PolicyModel::num_parameters() const {
    int n = 0;
    for (const Tensor& p : params_) n += p.numel();
    return n;
}

std::vector<Tensor> PolicyModel::bind(ad::Tape* tape) const {
    if (!tape) return params_;
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const Tensor& p : params_) out.push_back(tape->leaf(p));
    return out;
}

int PolicyModel::context_dim() const { return config_.feature_dim + (config_.speed_input ? 1 : 0); }

Tensor PolicyModel::encode(const std::vector<Tensor>& P, const Tensor& birdview) const {
    const int R = config_.render.resolution;
    if (birdview.shape() != ad::Shape{R, R, 3})
        throw ContractError("encode_birdview: expected a " + std::to_string(R) + "x" + std::to_string(R) +
                            "x3 birdview");
    Tensor x = ad::hwc_to_chw(birdview);
    for (std::size_t i = 0; i < conv_w_.size(); ++i)
        x = ad::relu(ad::conv2d(x, P[conv_w_[i]], P[conv_b_[i]], config_.stride, config_.kernel / 2));
    x = ad::reshape(x, {flat_dim_});
    return ad::relu(linear(P[enc_w_], P[enc_b_], x));
}

Tensor PolicyModel::context(const Tensor& features, const Tensor& ego_state) const {
    if (!config_.speed_input) return features;
    return ad::concat({features, ad::slice(ego_state, 3, 1) * 0.1});
}

Tensor PolicyModel::rnn_update(const std::vector<Tensor>& P, const Tensor& h, const Tensor& ctx,
                               const Tensor& action) const {
    const Tensor x = ad::concat({ctx, action});
    const Tensor r = ad::sigmoid(ad::matmul(P[gru_[0]], x) + ad::matmul(P[gru_[1]], h) + P[gru_[2]]);
    const Tensor u = ad::sigmoid(ad::matmul(P[gru_[3]], x) + ad::matmul(P[gru_[4]], h) + P[gru_[5]]);
    const Tensor n = ad::tanh(ad::matmul(P[gru_[6]], x) + r * ad::matmul(P[gru_[7]], h) + P[gru_[8]]);
    return (1.0 - u) * n + u * h;
}

std::pair<Tensor, Tensor> PolicyModel::infer_posterior(const std::vector<Tensor>& P, const Tensor& ctx,
                                                        const Tensor& action, const Tensor& h) const {
    const int L = config_.latent_dim;
    const Tensor hid = ad::relu(linear(P[post_w1_], P[post_b1_], ad::concat({ctx, action, h})));
    const Tensor out = linear(P[post_w2_], P[post_b2_], hid);
    return {ad::slice(out, 0, L), ad::slice(out, L, L)};
}

ActionDist PolicyModel::decode_action(const std::vector<Tensor>& P, const Tensor& ctx, const Tensor& z,
                                      const Tensor& h) const {
    const Tensor hid = ad::relu(linear(P[dec_w1_], P[dec_b1_], ad::concat({ctx, z, h})));
    const Tensor raw = linear(P[dec_w2_], P[dec_b2_], hid);
    const Tensor bound = Tensor::vector({config_.max_accel, config_.max_turn});
    return {bound * ad::tanh(raw), ad::clamp(P[log_std_], -5.0, 1.0)};
}

namespace {

BicycleParams bicycle_for(const PolicyConfig& c, const AgentAttributes& attrs) {
    BicycleParams p = BicycleParams::for_agent(attrs, c.dt);
    p.max_accel = c.max_accel;
    p.max_steer = c.max_turn;
    return p;
}

UnicycleParams unicycle_for(const PolicyConfig& c) { return {c.dt, c.max_turn, c.max_accel}; }

}  // namespace

Tensor PolicyModel::step(const Tensor& state, const Tensor& action, const AgentAttributes& attrs) const {
    if (config_.kind == AgentKind::pedestrian) return unicycle_step(state, action, unicycle_for(config_));
    return bicycle_step(state, action, bicycle_for(config_, attrs));
}

AgentState PolicyModel::step(const AgentState& state, const Action& action, const AgentAttributes& attrs) const {
    if (config_.kind == AgentKind::pedestrian) return unicycle_step(state, action, unicycle_for(config_));
    return bicycle_step(state, action, bicycle_for(config_, attrs));
}

Action PolicyModel::infer_action(const AgentState& s, const AgentState& next, const AgentAttributes& attrs) const {
    if (config_.kind == AgentKind::pedestrian) return infer_unicycle_action(s, next, unicycle_for(config_));
    return infer_bicycle_action(s, next, bicycle_for(config_, attrs));
}

// ---------------------------------------------------------------- checkpoint

namespace {
constexpr char kMagic[8] = {'A', 'I', 'M', 'S', 'I', 'M', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& is, const std::string& what) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw ParseError("checkpoint: truncated at " + what);
    return v;
}
}  // namespace

void PolicyModel::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InvalidInput("checkpoint: cannot write " + path.string());
    os.write(kMagic, sizeof(kMagic));
    put(os, kVersion);
    const std::string cfg = to_json(config_);
    put(os, static_cast<std::uint64_t>(cfg.size()));
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    put(os, static_cast<std::uint64_t>(params_.size()));
    for (const Tensor& p : params_) {
        put(os, static_cast<std::uint64_t>(p.numel()));
        os.write(reinterpret_cast<const char*>(p.data().data()),
                 static_cast<std::streamsize>(p.numel() * sizeof(double)));
    }
    if (!os) throw InvalidInput("checkpoint: write failed for " + path.string());
}

PolicyModel PolicyModel::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InvalidInput("checkpoint: cannot open " + path.string());
    char magic[8];
    if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
        throw ParseError("checkpoint: bad magic in " + path.string());
    const auto version = take<std::uint32_t>(is, "version");
    if (version != kVersion) throw ParseError("checkpoint: unsupported version " + std::to_string(version));
    const auto cfg_len = take<std::uint64_t>(is, "config length");
    if (cfg_len > (1u << 24)) throw ParseError("checkpoint: config length out of range");
    std::string cfg(cfg_len, '\0');
    if (!is.read(cfg.data(), static_cast<std::streamsize>(cfg_len))) throw ParseError("checkpoint: truncated config");
    PolicyModel model(policy_config_from_json(cfg), 0);
    const auto count = take<std::uint64_t>(is, "parameter count");
    if (count != model.params_.size())
        throw ParseError("checkpoint: parameter count " + std::to_string(count) + " does not match the config");
    for (std::size_t i = 0; i < model.params_.size(); ++i) {
        const auto n = take<std::uint64_t>(is, "parameter size");
        Tensor& p = model.params_[i];
        if (n != static_cast<std::uint64_t>(p.numel()))
            throw ParseError("checkpoint: size mismatch for " + model.names_[i]);
        std::vector<double> v(n);
        if (!is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double))))
            throw ParseError("checkpoint: truncated values for " + model.names_[i]);
        for (double x : v)
            if (!std::isfinite(x)) throw ParseError("checkpoint: non-finite value in " + model.names_[i]);
        p = Tensor(p.shape(), std::move(v));
    }
    return model;
}

// ---------------------------------------------------------------- simulation

std::vector<int> controlled_tracks(const Scenario& segment, AgentKind kind) {
    std::vector<int> out;
    for (std::size_t i = 0; i < segment.tracks.size(); ++i) {
        const Track& tr = segment.tracks[i];
        if (tr.attrs.kind == kind && tr.present_throughout(0, segment.num_steps)) out.push_back(static_cast<int>(i));
    }
    return out;
}

namespace {

// Renders step t of an episode from the view of track `ego`, with the states
// of simulated tracks taken from `override` (unset means ground truth).
using Overrides = std::vector<std::optional<Tensor>>;

Tensor render_step(const Episode& ep, int t, int ego, const Overrides& override) {
    const Scenario& sc = ep.segment;
    std::vector<DiffAgent> agents;
    int ego_pos = -1;
    for (std::size_t i = 0; i < sc.tracks.size(); ++i) {
        const Track& tr = sc.tracks[i];
        if (!tr.present[static_cast<std::size_t>(t)]) continue;
        if (static_cast<int>(i) == ego) ego_pos = static_cast<int>(agents.size());
        const auto& o = override[i];
        agents.push_back({o ? *o : to_tensor(tr.states[static_cast<std::size_t>(t)]), tr.attrs});
    }
    if (ego_pos < 0) throw ContractError("rollout: ego track is absent at step " + std::to_string(t));
    return ep.renderer->render(agents, ego_pos, sc.lights[static_cast<std::size_t>(t)]);
}

void check_episode(const PolicyModel& model, const Episode& ep, int t_obs) {
    if (!ep.renderer) throw ContractError("episode: renderer is missing");
    ep.segment.validate();
    const int T = ep.segment.num_steps;
    if (t_obs < 1 || t_obs >= T) throw ContractError("t_obs must lie in [1, segment length)");
    if (std::abs(ep.segment.dt() - model.config().dt) > 1e-9)
        throw ContractError("episode: sampling rate does not match the policy dt");
    if (ep.renderer->params().resolution != model.config().render.resolution)
        throw ContractError("episode: renderer resolution does not match the policy");
}

}  // namespace

ElboTerms elbo_loss(const PolicyModel& model, const std::vector<Tensor>& P, const Episode& ep,
                    const std::vector<int>& tracks, int t_obs, std::uint64_t noise_seed, bool zero_noise) {
    check_episode(model, ep, t_obs);
    if (tracks.empty()) throw ContractError("elbo: no controlled agents");
    const PolicyConfig& cfg = model.config();
    const Scenario& sc = ep.segment;
    const int T = sc.num_steps;
    const int L = cfg.latent_dim;

    ElboTerms out;
    out.min_kl = std::numeric_limits<double>::infinity();
    std::vector<Tensor> per_step;
    for (int ego : tracks) {
        const Track& tr = sc.tracks.at(static_cast<std::size_t>(ego));
        if (!tr.present_throughout(0, T)) throw ContractError("elbo: controlled agent must be present throughout");
        NoiseSource noise = zero_noise ? NoiseSource::zeros() : NoiseSource(stream_seed(noise_seed, 0, ego));
        Overrides override(sc.tracks.size());
        Tensor s = to_tensor(tr.states[0]);
        Tensor h = Tensor::zeros({cfg.hidden_dim});
        for (int t = 0; t + 1 < T; ++t) {
            override[static_cast<std::size_t>(ego)] = s;
            const Tensor ctx = model.context(model.encode(P, render_step(ep, t, ego, override)), s);
            const AgentState& gt_next = tr.states[static_cast<std::size_t>(t + 1)];
            const Tensor a_gt = action_tensor(model.infer_action(to_state(s), gt_next, tr.attrs));
            const auto [mu, log_sigma] = model.infer_posterior(P, ctx, a_gt, h);
            const auto zn = noise.draw(L);
            const auto an = noise.draw(2);
            const auto tn = noise.draw(4);
            const Tensor z = ad::reparameterize(mu, log_sigma, Tensor::vector(zn));
            const ActionDist dist = model.decode_action(P, ctx, z, h);
            const Tensor a = ad::reparameterize(dist.mean, dist.log_std, Tensor::vector(an));
            const Tensor mean_next = model.step(s, a, tr.attrs);
            const Tensor lp = gaussian_state_log_density(to_tensor(gt_next), mean_next, cfg.sigma);
            const Tensor kl = ad::kl_diag_gaussians(mu, log_sigma);
            out.recon_nll -= lp.item();
            out.kl += kl.item();
            out.min_kl = std::min(out.min_kl, kl.item());
            per_step.push_back(lp - kl);
            ++out.count;
            if (t + 1 < t_obs) {
                s = to_tensor(gt_next);
                h = model.rnn_update(P, h, ctx, a_gt);
            } else {
                s = gaussian_transition(mean_next, cfg.sigma, {tn[0], tn[1], tn[2], tn[3]});
                h = model.rnn_update(P, h, ctx, a);
            }
        }
    }
    out.loss = ad::sum(ad::concat(per_step)) * (-1.0 / out.count);
    return out;
}

std::string to_string(RolloutMode m) {
    return m == RolloutMode::classmate_forcing ? "classmate_forcing" : "joint_autoregressive";
}

RolloutMode rollout_mode_from_string(const std::string& s) {
    if (s == "classmate_forcing") return RolloutMode::classmate_forcing;
    if (s == "joint_autoregressive") return RolloutMode::joint_autoregressive;
    throw InvalidInput("unknown rollout mode: " + s);
}

TrajectorySamples RolloutResult::predicted() const {
    TrajectorySamples out;
    out.attrs = attrs;
    for (const auto& gt : ground_truth) out.ground_truth.emplace_back(gt.begin() + t_obs, gt.end());
    for (const auto& k : samples) {
        std::vector<std::vector<AgentState>> per;
        for (const auto& traj : k) per.emplace_back(traj.begin() + t_obs, traj.end());
        out.samples.push_back(std::move(per));
    }
    return out;
}

namespace {

struct Sim {
    int track = 0;
    NoiseSource noise;
    AgentState s;
    Tensor h;
    std::vector<AgentState> traj;
};

// Advances agent `sim` from step t to t + 1, given the rendered view at t.
void advance(const PolicyModel& model, const std::vector<Tensor>& P, const Track& tr, Sim& sim, int t, int t_obs,
             const Tensor& birdview) {
    const PolicyConfig& cfg = model.config();
    const Tensor st = to_tensor(sim.s);
    const Tensor ctx = model.context(model.encode(P, birdview), st);
    if (t + 1 < t_obs) {
        const AgentState& next = tr.states[static_cast<std::size_t>(t + 1)];
        sim.h = model.rnn_update(P, sim.h, ctx, action_tensor(model.infer_action(sim.s, next, tr.attrs)));
        sim.s = next;
    } else {
        const auto zn = sim.noise.draw(cfg.latent_dim);
        const auto an = sim.noise.draw(2);
        const auto tn = sim.noise.draw(4);
        const ActionDist dist = model.decode_action(P, ctx, Tensor::vector(zn), sim.h);
        const Tensor a = ad::reparameterize(dist.mean, dist.log_std, Tensor::vector(an));
        const AgentState mean_next = model.step(sim.s, Action{a[0], a[1]}, tr.attrs);
        sim.s = gaussian_transition(mean_next, cfg.sigma, {tn[0], tn[1], tn[2], tn[3]});
        sim.h = model.rnn_update(P, sim.h, ctx, a);
    }
    sim.traj.push_back(sim.s);
}

}  // namespace

RolloutResult rollout(const PolicyModel& model, const Episode& ep, const RolloutSpec& spec) {
    check_episode(model, ep, spec.t_obs);
    if (spec.num_samples < 1) throw ContractError("rollout: need at least one sample");
    const Scenario& sc = ep.segment;
    const int T = sc.num_steps;
    const auto P = model.bind(nullptr);

    RolloutResult res;
    res.t_obs = spec.t_obs;
    res.track_indices = controlled_tracks(sc, model.config().kind);
    if (res.track_indices.empty()) throw ContractError("rollout: segment has no agent of the controlled kind");
    for (int i : res.track_indices) {
        res.ground_truth.push_back(sc.tracks[static_cast<std::size_t>(i)].states);
        res.attrs.push_back(sc.tracks[static_cast<std::size_t>(i)].attrs);
    }

    auto make_sim = [&](int k, int track) {
        const Track& tr = sc.tracks[static_cast<std::size_t>(track)];
        Sim sim{track,
                spec.zero_noise ? NoiseSource::zeros()
                                : NoiseSource(stream_seed(spec.seed, static_cast<std::uint64_t>(k),
                                                          static_cast<std::uint64_t>(track))),
                tr.states[0], Tensor::zeros({model.config().hidden_dim}), {tr.states[0]}};
        return sim;
    };

    for (int k = 0; k < spec.num_samples; ++k) {
        std::vector<std::vector<AgentState>> trajs;
        if (spec.mode == RolloutMode::classmate_forcing) {
            for (int track : res.track_indices) {
                Sim sim = make_sim(k, track);
                Overrides override(sc.tracks.size());
                for (int t = 0; t + 1 < T; ++t) {
                    override[static_cast<std::size_t>(track)] = to_tensor(sim.s);
                    advance(model, P, sc.tracks[static_cast<std::size_t>(track)], sim, t, spec.t_obs,
                            render_step(ep, t, track, override));
                }
                trajs.push_back(std::move(sim.traj));
            }
        } else {
            std::vector<Sim> sims;
            for (int track : res.track_indices) sims.push_back(make_sim(k, track));
            for (int t = 0; t + 1 < T; ++t) {
                Overrides override(sc.tracks.size());
                for (const Sim& sim : sims) override[static_cast<std::size_t>(sim.track)] = to_tensor(sim.s);
                // all views at t are rendered before anyone moves
                std::vector<Tensor> views;
                for (const Sim& sim : sims) views.push_back(render_step(ep, t, sim.track, override));
                for (std::size_t n = 0; n < sims.size(); ++n)
                    advance(model, P, sc.tracks[static_cast<std::size_t>(sims[n].track)], sims[n], t, spec.t_obs,
                            views[n]);
            }
            for (Sim& sim : sims) trajs.push_back(std::move(sim.traj));
        }
        res.samples.push_back(std::move(trajs));
    }
    return res;
}

double red_light_violation_rate(const RolloutResult& r, const Scenario& segment, const AimMap& aim) {
    const int T = segment.num_steps;
    const int begin = r.t_obs - 1;
    long violations = 0, pairs = 0;
    for (const auto& sample : r.samples)
        for (std::size_t n = 0; n < sample.size(); ++n) {
            TrajectorySamples one;
            one.samples = {{std::vector<AgentState>(sample[n].begin() + begin, sample[n].end())}};
            one.ground_truth = {std::vector<AgentState>(r.ground_truth[n].begin() + begin, r.ground_truth[n].end())};
            one.attrs = {r.attrs[n]};
            bool crossed = false;
            for (const StopLine& line : aim.stop_lines) {
                std::vector<bool> red;
                for (int t = begin; t < T; ++t) {
                    const auto& lights = segment.lights[static_cast<std::size_t>(t)];
                    red.push_back(std::any_of(lights.begin(), lights.end(), [&](const TrafficLightState& l) {
                        return l.light_id == line.light_id && l.color == LightColor::red;
                    }));
                }
                if (stop_line_violation_rate(one, line.a, line.b, red) > 0.0) crossed = true;
            }
            violations += crossed ? 1 : 0;
            ++pairs;
        }
    return pairs ? static_cast<double>(violations) / static_cast<double>(pairs) : 0.0;
}

// ---------------------------------------------------------------- training

std::string to_json(const TrainConfig& c) {
    json j;
    j["steps"] = c.steps;
    j["learning_rate"] = c.learning_rate;
    j["momentum"] = c.momentum;
    j["clip_norm"] = c.clip_norm;
    j["agents_per_step"] = c.agents_per_step;
    j["eval_every"] = c.eval_every;
    j["patience"] = c.patience;
    j["max_val_episodes"] = c.max_val_episodes;
    j["seed"] = c.seed;
    return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
    TrainConfig c;
    try {
        const json j = json::parse(text);
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
        };
        get("steps", c.steps);
        get("learning_rate", c.learning_rate);
        get("momentum", c.momentum);
        get("clip_norm", c.clip_norm);
        get("agents_per_step", c.agents_per_step);
        get("eval_every", c.eval_every);
        get("patience", c.patience);
        get("max_val_episodes", c.max_val_episodes);
        get("seed", c.seed);
    } catch (const json::exception& e) {
        throw ParseError(std::string("train config: ") + e.what());
    }
    return c;
}

double validation_loss(const PolicyModel& model, const std::vector<Episode>& val_set, int max_episodes,
                       std::uint64_t seed) {
    const auto P = model.bind(nullptr);
    double total = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < val_set.size() && n < max_episodes; ++i) {
        const auto tracks = controlled_tracks(val_set[i].segment, model.config().kind);
        if (tracks.empty()) continue;
        const int t_obs = std::min(model.config().obs_max, val_set[i].segment.num_steps - 1);
        total += elbo_loss(model, P, val_set[i], tracks, t_obs, stream_seed(seed, 0x7661ULL, i)).loss.item();
        ++n;
    }
    if (n == 0) throw ContractError("validation: no episode has a controlled agent");
    return total / n;
}

TrainResult train(PolicyModel& model, const std::vector<Episode>& train_set, const std::vector<Episode>& val_set,
                  const TrainConfig& tc, const std::function<void(const LossRow&)>& on_row) {
    if (tc.steps < 0 || tc.eval_every <= 0 || tc.patience <= 0 || !(tc.learning_rate >= 0.0) ||
        !(tc.momentum >= 0.0 && tc.momentum < 1.0) || !(tc.clip_norm > 0.0))
        throw ContractError("train: invalid training configuration");
    const PolicyConfig& cfg = model.config();
    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < train_set.size(); ++i)
        if (!controlled_tracks(train_set[i].segment, cfg.kind).empty()) usable.push_back(i);
    if (usable.empty()) throw ContractError("train: no training segment has a controlled agent");

    std::mt19937_64 rng(tc.seed);
    auto& params = model.params();
    std::vector<std::vector<double>> velocity(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) velocity[i].assign(static_cast<std::size_t>(params[i].numel()), 0.0);

    TrainResult res;
    res.min_kl_seen = std::numeric_limits<double>::infinity();
    res.best_val = std::numeric_limits<double>::infinity();
    std::vector<Tensor> best = params;
    int bad = 0;
    double acc_loss = 0.0, acc_recon = 0.0, acc_kl = 0.0;
    int acc_n = 0;

    for (int step = 1; step <= tc.steps; ++step) {
        const Episode& ep = train_set[usable[std::uniform_int_distribution<std::size_t>(0, usable.size() - 1)(rng)]];
        auto tracks = controlled_tracks(ep.segment, cfg.kind);
        std::shuffle(tracks.begin(), tracks.end(), rng);
        if (tc.agents_per_step > 0 && static_cast<int>(tracks.size()) > tc.agents_per_step)
            tracks.resize(static_cast<std::size_t>(tc.agents_per_step));
        std::sort(tracks.begin(), tracks.end());
        const int hi = std::min(cfg.obs_max, ep.segment.num_steps - 1);
        const int t_obs = std::uniform_int_distribution<int>(std::min(cfg.obs_min, hi), hi)(rng);
        const std::uint64_t noise_seed = rng();

        ad::Tape tape;
        const auto P = model.bind(&tape);
        ElboTerms terms;
        try {
            terms = elbo_loss(model, P, ep, tracks, t_obs, noise_seed);
        } catch (const NumericError& e) {
            throw NumericError("train: diverged at step " + std::to_string(step) + ": " + e.what());
        }
        const double loss = terms.loss.item();
        if (!std::isfinite(loss)) throw NumericError("train: non-finite loss at step " + std::to_string(step));
        const auto grads = tape.backward(terms.loss);

        std::vector<std::vector<double>> g(params.size());
        double norm2 = 0.0;
        for (std::size_t i = 0; i < params.size(); ++i) {
            g[i] = grads.of(P[i]);
            for (double x : g[i]) norm2 += x * x;
        }
        const double norm = std::sqrt(norm2);
        if (!std::isfinite(norm)) throw NumericError("train: non-finite gradient at step " + std::to_string(step));
        const double clip = norm > tc.clip_norm ? tc.clip_norm / norm : 1.0;
        if (tc.learning_rate > 0.0) {
            for (std::size_t i = 0; i < params.size(); ++i) {
                std::vector<double> v(params[i].data().begin(), params[i].data().end());
                for (std::size_t j = 0; j < v.size(); ++j) {
                    velocity[i][j] = tc.momentum * velocity[i][j] + clip * g[i][j];
                    v[j] -= tc.learning_rate * velocity[i][j];
                }
                params[i] = Tensor(params[i].shape(), std::move(v));
            }
        }

        res.min_kl_seen = std::min(res.min_kl_seen, terms.min_kl);
        res.steps_run = step;
        acc_loss += loss;
        acc_recon += terms.recon_nll / terms.count;
        acc_kl += terms.kl / terms.count;
        ++acc_n;

        if (step % tc.eval_every == 0 || step == tc.steps) {
            LossRow row{step, acc_loss / acc_n, acc_recon / acc_n, acc_kl / acc_n, std::nan("")};
            acc_loss = acc_recon = acc_kl = 0.0;
            acc_n = 0;
            bool stop = false;
            if (!val_set.empty()) {
                row.val_loss = validation_loss(model, val_set, tc.max_val_episodes, tc.seed);
                if (row.val_loss < res.best_val) {
                    res.best_val = row.val_loss;
                    best = params;
                    bad = 0;
                } else if (++bad >= tc.patience) {
                    stop = true;
                }
            }
            res.curve.push_back(row);
            if (on_row) on_row(row);
            if (stop) {
                res.stopped_early = true;
                break;
            }
        }
    }
    if (!val_set.empty() && std::isfinite(res.best_val)) params = best;
    return res;
}

void write_loss_curve(const std::vector<LossRow>& curve, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw InvalidInput("cannot write loss curve " + path.string());
    os << "step,train_loss,train_recon_nll,train_kl,val_loss\n";
    char buf[256];
    for (const LossRow& r : curve) {
        std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g,%.10g\n", r.step, r.train_loss, r.train_recon,
                      r.train_kl, r.val_loss);
        os << buf;
    }
}

}  // namespace aimsim
