#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "aimsim/autodiff.hpp"
#include "aimsim/kinematics.hpp"
#include "aimsim/metrics.hpp"
#include "aimsim/renderer.hpp"
#include "aimsim/scenario_io.hpp"

namespace aimsim {

struct PolicyConfig {
    AgentKind kind = AgentKind::vehicle;
    int latent_dim = 16;
    int hidden_dim = 64;
    int feature_dim = 128;
    int head_hidden = 64;
    std::vector<int> channels = {16, 32, 64, 64};  // one conv layer per entry
    int kernel = 3;
    int stride = 2;
    bool speed_input = true;  // append the ego speed to the image features
    RenderParams render;
    TransitionSigma sigma;
    int obs_min = 1;
    int obs_max = 10;
    int horizon = 40;  // segment length in steps
    double dt = 0.1;
    double max_accel = 6.0;
    double max_turn = 0.5;  // steering angle bound (bicycle) or yaw rate bound (unicycle)

    /// Throws ContractError on out-of-range settings.
    void validate() const;
    /// Defaults for the agent kind: rates, horizons and kinematic bounds.
    static PolicyConfig for_kind(AgentKind kind);
};

std::string to_json(const PolicyConfig& c);
PolicyConfig policy_config_from_json(const std::string& text);

/// Source of standard normal draws. A zero source makes every sample its mean.
class NoiseSource {
public:
    explicit NoiseSource(std::uint64_t seed, bool zero = false) : rng_(seed), zero_(zero) {}
    static NoiseSource zeros() { return NoiseSource(0, true); }

    std::vector<double> draw(int n);

private:
    std::mt19937_64 rng_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    bool zero_ = false;
};

/// Seed for the noise stream of (run seed, sample, agent).
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t sample, std::uint64_t agent);

struct ActionDist {
    ad::Tensor mean;     // [2]
    ad::Tensor log_std;  // [2]
};

/// Conditional variational recurrent policy: CNN encoder, gated recurrent
/// state, posterior network, action decoder. Parameters are plain tensors;
/// `bind` puts them on a tape for a training step.
class PolicyModel {
public:
    explicit PolicyModel(PolicyConfig config, std::uint64_t seed = 0);

    const PolicyConfig& config() const { return config_; }
    std::vector<ad::Tensor>& params() { return params_; }
    const std::vector<ad::Tensor>& params() const { return params_; }
    const std::vector<std::string>& param_names() const { return names_; }
    int num_parameters() const;

    /// Parameters as tape leaves (or constants when tape is null).
    std::vector<ad::Tensor> bind(ad::Tape* tape) const;

    /// [R,R,3] birdview -> feature_dim features.
    ad::Tensor encode(const std::vector<ad::Tensor>& P, const ad::Tensor& birdview) const;
    /// Features plus the optional speed input.
    ad::Tensor context(const ad::Tensor& features, const ad::Tensor& ego_state) const;
    int context_dim() const;
    ad::Tensor rnn_update(const std::vector<ad::Tensor>& P, const ad::Tensor& h, const ad::Tensor& ctx,
                          const ad::Tensor& action) const;
    /// (mu, log_sigma) of q(z | b, a, h).
    std::pair<ad::Tensor, ad::Tensor> infer_posterior(const std::vector<ad::Tensor>& P, const ad::Tensor& ctx,
                                                      const ad::Tensor& action, const ad::Tensor& h) const;
    ActionDist decode_action(const std::vector<ad::Tensor>& P, const ad::Tensor& ctx, const ad::Tensor& z,
                             const ad::Tensor& h) const;

    /// One kinematic step for an agent of the configured kind.
    ad::Tensor step(const ad::Tensor& state, const ad::Tensor& action, const AgentAttributes& attrs) const;
    AgentState step(const AgentState& state, const Action& action, const AgentAttributes& attrs) const;
    Action infer_action(const AgentState& s, const AgentState& next, const AgentAttributes& attrs) const;

    void save(const std::filesystem::path& path) const;
    static PolicyModel load(const std::filesystem::path& path);

private:
    int add(const std::string& name, ad::Shape shape, std::mt19937_64& rng, double scale);

    PolicyConfig config_;
    std::vector<ad::Tensor> params_;
    std::vector<std::string> names_;
    // parameter indices
    std::vector<int> conv_w_, conv_b_;
    int enc_w_ = 0, enc_b_ = 0;
    int gru_[9] = {};  // Wr Ur br Wu Uu bu Wn Un bn
    int post_w1_ = 0, post_b1_ = 0, post_w2_ = 0, post_b2_ = 0;
    int dec_w1_ = 0, dec_b1_ = 0, dec_w2_ = 0, dec_b2_ = 0;
    int log_std_ = 0;
    int flat_dim_ = 0;
};

/// A training or evaluation unit: one segment and the renderer for its map.
struct Episode {
    Scenario segment;
    std::shared_ptr<const SceneRenderer> renderer;
};

/// Indices of tracks the policy controls: present for the whole segment and
/// of the configured kind.
std::vector<int> controlled_tracks(const Scenario& segment, AgentKind kind);

struct ElboTerms {
    ad::Tensor loss;   // -(recon - kl) / count
    double recon_nll = 0.0;  // -sum log p
    double kl = 0.0;         // sum KL
    double min_kl = 0.0;     // smallest per-step KL
    int count = 0;           // transitions summed
};

/// Negative ELBO of one segment under classmate forcing, averaged over the
/// given controlled tracks and their transitions. Observed steps
/// [0, t_obs) are teacher forced; later ego states are the model's own
/// reparameterized predictions.
ElboTerms elbo_loss(const PolicyModel& model, const std::vector<ad::Tensor>& P, const Episode& ep,
                    const std::vector<int>& tracks, int t_obs, std::uint64_t noise_seed, bool zero_noise = false);

enum class RolloutMode { classmate_forcing, joint_autoregressive };
std::string to_string(RolloutMode m);
RolloutMode rollout_mode_from_string(const std::string& s);

struct RolloutSpec {
    int t_obs = 10;
    int num_samples = 6;
    RolloutMode mode = RolloutMode::joint_autoregressive;
    std::uint64_t seed = 0;
    bool zero_noise = false;
};

struct RolloutResult {
    std::vector<int> track_indices;                                // controlled tracks
    int t_obs = 0;
    std::vector<std::vector<std::vector<AgentState>>> samples;      // [K][N][T], ground truth before t_obs
    std::vector<std::vector<AgentState>> ground_truth;              // [N][T]
    std::vector<AgentAttributes> attrs;

    /// Predicted part only, for the metrics.
    TrajectorySamples predicted() const;
};

RolloutResult rollout(const PolicyModel& model, const Episode& ep, const RolloutSpec& spec);

/// Fraction of (sample, agent) pairs whose predicted path, starting at the
/// last observed state, crosses a stop line while that line's light is red.
double red_light_violation_rate(const RolloutResult& r, const Scenario& segment, const AimMap& aim);

struct TrainConfig {
    int steps = 2000;
    double learning_rate = 1e-3;
    double momentum = 0.9;
    double clip_norm = 5.0;
    int agents_per_step = 1;   // controlled agents sampled per segment; 0 = all
    int eval_every = 100;
    int patience = 5;          // evaluations without improvement before stopping
    int max_val_episodes = 20;
    std::uint64_t seed = 0;
};

std::string to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const std::string& text);

struct LossRow {
    int step = 0;
    double train_loss = 0.0;
    double train_recon = 0.0;
    double train_kl = 0.0;
    double val_loss = std::nan("");
};

struct TrainResult {
    std::vector<LossRow> curve;
    int steps_run = 0;
    double best_val = 0.0;
    bool stopped_early = false;
    double min_kl_seen = 0.0;  // smallest per-step KL over all training steps
};

/// Momentum SGD on the negative ELBO with a random observation length per
/// step. Keeps the parameters with the best validation loss. Throws
/// NumericError on divergence.
TrainResult train(PolicyModel& model, const std::vector<Episode>& train_set, const std::vector<Episode>& val_set,
                  const TrainConfig& tc, const std::function<void(const LossRow&)>& on_row = {});

/// Mean negative ELBO over episodes at t_obs = config.obs_max with fixed noise.
double validation_loss(const PolicyModel& model, const std::vector<Episode>& val_set, int max_episodes,
                       std::uint64_t seed);

void write_loss_curve(const std::vector<LossRow>& curve, const std::filesystem::path& path);

}  // namespace aimsim
