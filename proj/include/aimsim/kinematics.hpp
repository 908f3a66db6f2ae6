#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "aimsim/autodiff.hpp"
#include "aimsim/core_types.hpp"

namespace aimsim {

struct BicycleParams {
    double lf = 2.25;  // center to front axle, m
    double lr = 2.25;  // center to rear axle, m
    double dt = 0.1;
    double max_steer = 0.5;
    double max_accel = 6.0;

    /// Axles at the bumpers: lf = lr = length / 2.
    static BicycleParams for_agent(const AgentAttributes& attrs, double dt);
    void validate() const;
};

struct UnicycleParams {
    double dt = 0.4;
    double max_omega = 2.0;
    double max_accel = 3.0;

    void validate() const;
};

/// Standard deviations of the Gaussian state transition, per state component.
struct TransitionSigma {
    double x = 0.02;
    double y = 0.02;
    double phi = 0.01;
    double v = 0.05;

    std::array<double, 4> as_array() const { return {x, y, phi, v}; }
};

namespace kin_detail {

inline double clamp_scalar(double v, double lo, double hi) { return std::clamp(v, lo, hi); }
inline ad::Tensor clamp_scalar(const ad::Tensor& v, double lo, double hi) { return ad::clamp(v, lo, hi); }
inline double wrap(double a) { return normalize_angle(a); }
inline ad::Tensor wrap(const ad::Tensor& a) { return ad::wrap_angle(a); }

// Center-of-mass kinematic bicycle with slip angle beta.
template <class S>
std::array<S, 4> bicycle(const S& x, const S& y, const S& phi, const S& v, const S& a1_raw, const S& a2_raw,
                         const BicycleParams& p) {
    using std::atan;
    using std::cos;
    using std::sin;
    using std::tan;
    const S a1 = clamp_scalar(a1_raw, -p.max_accel, p.max_accel);
    const S a2 = clamp_scalar(a2_raw, -p.max_steer, p.max_steer);
    const S beta = atan(tan(a2) * (p.lr / (p.lf + p.lr)));
    const S heading = phi + beta;
    return {x + v * cos(heading) * p.dt, y + v * sin(heading) * p.dt,
            wrap(phi + v * sin(beta) * (p.dt / p.lr)), v + a1 * p.dt};
}

template <class S>
std::array<S, 4> unicycle(const S& x, const S& y, const S& phi, const S& v, const S& a1_raw, const S& a2_raw,
                          const UnicycleParams& p) {
    using std::cos;
    using std::sin;
    const S a1 = clamp_scalar(a1_raw, -p.max_accel, p.max_accel);
    const S a2 = clamp_scalar(a2_raw, -p.max_omega, p.max_omega);
    return {x + v * cos(phi) * p.dt, y + v * sin(phi) * p.dt, wrap(phi + a2 * p.dt), v + a1 * p.dt};
}

}  // namespace kin_detail

/// Mean next state of the kinematic bicycle. Actions outside the bounds are clamped.
AgentState bicycle_step(const AgentState& s, const Action& a, const BicycleParams& p);
/// Differentiable variant over a [4] state (x, y, phi, v) and a [2] action.
ad::Tensor bicycle_step(const ad::Tensor& state, const ad::Tensor& action, const BicycleParams& p);

AgentState unicycle_step(const AgentState& s, const Action& a, const UnicycleParams& p);
ad::Tensor unicycle_step(const ad::Tensor& state, const ad::Tensor& action, const UnicycleParams& p);

/// Action that reproduces the transition s -> next under the bicycle model
/// (exact for transitions the model can produce, clamped otherwise).
Action infer_bicycle_action(const AgentState& s, const AgentState& next, const BicycleParams& p);
Action infer_unicycle_action(const AgentState& s, const AgentState& next, const UnicycleParams& p);

/// mean + sigma * noise, componentwise; heading re-normalized.
AgentState gaussian_transition(const AgentState& mean, const TransitionSigma& sigma, const std::array<double, 4>& noise);
ad::Tensor gaussian_transition(const ad::Tensor& mean, const TransitionSigma& sigma, const std::array<double, 4>& noise);

/// Diagonal Gaussian log density of next under N(mean, sigma^2); the heading
/// residual is angle-normalized.
double gaussian_state_log_density(const AgentState& next, const AgentState& mean, const TransitionSigma& sigma);
ad::Tensor gaussian_state_log_density(const ad::Tensor& next, const ad::Tensor& mean, const TransitionSigma& sigma);

ad::Tensor to_tensor(const AgentState& s);
AgentState to_state(const ad::Tensor& t);

}  // namespace aimsim
