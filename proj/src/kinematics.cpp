#include "aimsim/kinematics.hpp"

#include <string>

#include "aimsim/errors.hpp"

namespace aimsim {

namespace {

void require_finite(const AgentState& s, const Action& a, const char* op) {
    if (!s.finite() || !std::isfinite(a.a1) || !std::isfinite(a.a2)) {
        throw NumericError(std::string(op) + ": non-finite state or action");
    }
}

void require_state_shapes(const ad::Tensor& state, const ad::Tensor& action, const char* op) {
    if (state.numel() != 4 || action.numel() != 2) {
        throw ContractError(std::string(op) + ": expected state[4] and action[2]");
    }
}

void validate_sigma(const TransitionSigma& sigma, bool strictly_positive) {
    for (double s : sigma.as_array()) {
        if (!(strictly_positive ? s > 0.0 : s >= 0.0) || !std::isfinite(s)) {
            throw ContractError(strictly_positive ? "transition sigma must be > 0" : "transition sigma must be >= 0");
        }
    }
}

constexpr double kHalfLogTwoPi = 0.91893853320467274178;  // log(sqrt(2 pi))

}  // namespace

BicycleParams BicycleParams::for_agent(const AgentAttributes& attrs, double dt) {
    BicycleParams p;
    p.lf = 0.5 * attrs.length;
    p.lr = 0.5 * attrs.length;
    p.dt = dt;
    p.validate();
    return p;
}

void BicycleParams::validate() const {
    if (!(lf > 0 && lr > 0 && dt > 0 && max_steer > 0 && max_accel > 0)) {
        throw InvalidInput("BicycleParams: lf, lr, dt and bounds must be positive");
    }
}

void UnicycleParams::validate() const {
    if (!(dt > 0 && max_omega > 0 && max_accel > 0)) {
        throw InvalidInput("UnicycleParams: dt and bounds must be positive");
    }
}

AgentState bicycle_step(const AgentState& s, const Action& a, const BicycleParams& p) {
    require_finite(s, a, "bicycle_step");
    auto n = kin_detail::bicycle(s.x, s.y, s.phi, s.v, a.a1, a.a2, p);
    return {n[0], n[1], n[2], n[3]};
}

ad::Tensor bicycle_step(const ad::Tensor& state, const ad::Tensor& action, const BicycleParams& p) {
    require_state_shapes(state, action, "bicycle_step");
    auto n = kin_detail::bicycle(ad::slice(state, 0, 1), ad::slice(state, 1, 1), ad::slice(state, 2, 1),
                                 ad::slice(state, 3, 1), ad::slice(action, 0, 1), ad::slice(action, 1, 1), p);
    return ad::concat({n[0], n[1], n[2], n[3]});
}

AgentState unicycle_step(const AgentState& s, const Action& a, const UnicycleParams& p) {
    require_finite(s, a, "unicycle_step");
    auto n = kin_detail::unicycle(s.x, s.y, s.phi, s.v, a.a1, a.a2, p);
    return {n[0], n[1], n[2], n[3]};
}

ad::Tensor unicycle_step(const ad::Tensor& state, const ad::Tensor& action, const UnicycleParams& p) {
    require_state_shapes(state, action, "unicycle_step");
    auto n = kin_detail::unicycle(ad::slice(state, 0, 1), ad::slice(state, 1, 1), ad::slice(state, 2, 1),
                                  ad::slice(state, 3, 1), ad::slice(action, 0, 1), ad::slice(action, 1, 1), p);
    return ad::concat({n[0], n[1], n[2], n[3]});
}

Action infer_bicycle_action(const AgentState& s, const AgentState& next, const BicycleParams& p) {
    Action a;
    a.a1 = std::clamp((next.v - s.v) / p.dt, -p.max_accel, p.max_accel);
    if (std::abs(s.v) < 1e-6) {
        return a;
    }
    const double dphi = normalize_angle(next.phi - s.phi);
    const double sin_beta = std::clamp(dphi * p.lr / (s.v * p.dt), -1.0, 1.0);
    const double beta = std::asin(sin_beta);
    const double steer = std::atan(std::tan(beta) * (p.lf + p.lr) / p.lr);
    a.a2 = std::clamp(steer, -p.max_steer, p.max_steer);
    return a;
}

Action infer_unicycle_action(const AgentState& s, const AgentState& next, const UnicycleParams& p) {
    Action a;
    a.a1 = std::clamp((next.v - s.v) / p.dt, -p.max_accel, p.max_accel);
    a.a2 = std::clamp(normalize_angle(next.phi - s.phi) / p.dt, -p.max_omega, p.max_omega);
    return a;
}

AgentState gaussian_transition(const AgentState& mean, const TransitionSigma& sigma,
                               const std::array<double, 4>& noise) {
    validate_sigma(sigma, false);
    return {mean.x + sigma.x * noise[0], mean.y + sigma.y * noise[1], mean.phi + sigma.phi * noise[2],
            mean.v + sigma.v * noise[3]};
}

ad::Tensor gaussian_transition(const ad::Tensor& mean, const TransitionSigma& sigma,
                               const std::array<double, 4>& noise) {
    validate_sigma(sigma, false);
    if (mean.numel() != 4) throw ContractError("gaussian_transition: expected state[4]");
    auto s = sigma.as_array();
    ad::Tensor offset = ad::Tensor::vector({s[0] * noise[0], s[1] * noise[1], s[2] * noise[2], s[3] * noise[3]});
    ad::Tensor moved = ad::add(mean, offset);
    // Re-normalize the heading without disturbing gradients.
    return ad::concat({ad::slice(moved, 0, 2), ad::wrap_angle(ad::slice(moved, 2, 1)), ad::slice(moved, 3, 1)});
}

double gaussian_state_log_density(const AgentState& next, const AgentState& mean, const TransitionSigma& sigma) {
    validate_sigma(sigma, true);
    const std::array<double, 4> r{next.x - mean.x, next.y - mean.y, normalize_angle(next.phi - mean.phi),
                                  next.v - mean.v};
    const auto s = sigma.as_array();
    double lp = 0.0;
    for (int d = 0; d < 4; ++d) {
        lp += -0.5 * (r[d] / s[d]) * (r[d] / s[d]) - std::log(s[d]) - kHalfLogTwoPi;
    }
    return lp;
}

ad::Tensor gaussian_state_log_density(const ad::Tensor& next, const ad::Tensor& mean, const TransitionSigma& sigma) {
    validate_sigma(sigma, true);
    if (next.numel() != 4 || mean.numel() != 4) throw ContractError("gaussian_state_log_density: expected state[4]");
    ad::Tensor diff = ad::sub(next, mean);
    ad::Tensor r = ad::concat({ad::slice(diff, 0, 2), ad::wrap_angle(ad::slice(diff, 2, 1)), ad::slice(diff, 3, 1)});
    const auto s = sigma.as_array();
    ad::Tensor inv = ad::Tensor::vector({1.0 / s[0], 1.0 / s[1], 1.0 / s[2], 1.0 / s[3]});
    double norm_const = 0.0;
    for (double sd : s) norm_const += std::log(sd) + kHalfLogTwoPi;
    return ad::add_scalar(ad::scale(ad::sum(ad::square(ad::mul(r, inv))), -0.5), -norm_const);
}

ad::Tensor to_tensor(const AgentState& s) { return ad::Tensor::vector({s.x, s.y, s.phi, s.v}); }

AgentState to_state(const ad::Tensor& t) {
    if (t.numel() != 4) throw ContractError("to_state: expected state[4]");
    return {t[0], t[1], t[2], t[3]};
}

}  // namespace aimsim
