#pragma once

// Closed-form diffusion mathematics: the Brownian-bridge schedule with its
// forward draw, regression target and reverse transition, plus the standard
// epsilon-prediction DDPM schedule.
//
// All stochastic operations take their noise as an argument so every chain
// is replayable. The *_coefs structs plus the apply templates are shared by
// the per-image functions below and the batched torch code paths.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "crease/image.hpp"

namespace crease {

struct BridgeSchedule {
    int T = 0;
    std::vector<double> m;      // m[t] = t / T, t = 0..T
    std::vector<double> delta;  // delta[t] = 2 m_t (1 - m_t)
    double s = 1.0;             // sampling-time variance scale

    [[nodiscard]] double m_at(int t) const { return m.at(static_cast<std::size_t>(t)); }
    [[nodiscard]] double delta_at(int t) const { return delta.at(static_cast<std::size_t>(t)); }
};

inline BridgeSchedule build_bridge_schedule(int T, double s = 1.0) {
    if (T < 2) throw ValidationError("build_bridge_schedule: T must be >= 2, got " + std::to_string(T));
    if (!(s > 0.0)) throw ValidationError("build_bridge_schedule: variance scale s must be > 0");
    BridgeSchedule sch;
    sch.T = T;
    sch.s = s;
    sch.m.resize(static_cast<std::size_t>(T) + 1);
    sch.delta.resize(static_cast<std::size_t>(T) + 1);
    for (int t = 0; t <= T; ++t) {
        const double mt = static_cast<double>(t) / T;
        sch.m[t] = mt;
        // 2 m (1 - m) evaluated as 2 t (T - t) / T^2 so the table is exactly symmetric
        sch.delta[t] = 2.0 * static_cast<double>(t) * static_cast<double>(T - t) / (static_cast<double>(T) * T);
    }
    // exact pins; t/T is exact at both ends but keep the invariant explicit
    sch.m[0] = 0.0;
    sch.m[T] = 1.0;
    sch.delta[0] = 0.0;
    sch.delta[T] = 0.0;
    return sch;
}

/// Copy of a trained schedule with a different sampling-time variance
/// scale. s = 0 is allowed here and gives a deterministic sampler.
inline BridgeSchedule with_variance_scale(BridgeSchedule sch, double s) {
    if (!(s >= 0.0) || !std::isfinite(s)) throw ValidationError("variance scale must be finite and >= 0");
    sch.s = s;
    return sch;
}

namespace detail {

inline void check_timestep(const BridgeSchedule& sch, int t, const char* what) {
    if (t < 0 || t > sch.T)
        throw ValidationError(std::string(what) + ": timestep " + std::to_string(t) + " outside [0, " +
                              std::to_string(sch.T) + "]");
}

}  // namespace detail

// x_t = (1 - m) x0 + m xT + sqrt(delta) eps. C is double or a broadcastable tensor.
template <class C, class X>
X bridge_mix(const C& m, const C& sqrt_delta, const X& x0, const X& xT, const X& noise) {
    return (1.0 - m) * x0 + m * xT + sqrt_delta * noise;
}

// Regression target sqrt(delta) eps + m (xT - x0).
template <class C, class X>
X bridge_target(const C& m, const C& sqrt_delta, const X& x0, const X& xT, const X& noise) {
    return sqrt_delta * noise + m * (xT - x0);
}

inline ImageTensor bridge_forward_sample(const BridgeSchedule& sch, const ImageTensor& x0, const ImageTensor& xT,
                                         int t, const ImageTensor& noise) {
    detail::check_timestep(sch, t, "bridge_forward_sample");
    ImageTensor::require_same_shape(x0, xT, "bridge_forward_sample");
    ImageTensor::require_same_shape(x0, noise, "bridge_forward_sample");
    return bridge_mix(sch.m_at(t), std::sqrt(sch.delta_at(t)), x0, xT, noise);
}

inline ImageTensor bridge_training_target(const BridgeSchedule& sch, const ImageTensor& x0, const ImageTensor& xT,
                                          int t, const ImageTensor& noise) {
    detail::check_timestep(sch, t, "bridge_training_target");
    ImageTensor::require_same_shape(x0, xT, "bridge_training_target");
    ImageTensor::require_same_shape(x0, noise, "bridge_training_target");
    return bridge_target(sch.m_at(t), std::sqrt(sch.delta_at(t)), x0, xT, noise);
}

/// Reverse transition t_hi -> t_lo: x0_hat = x_t - eps_pred, then a draw from
/// the bridge marginal at t_lo pinned at (x0_hat, y) with variance s * delta.
struct BridgeStepCoefs {
    double m_lo = 0.0;
    double sigma = 0.0;  // sqrt(s * delta[t_lo])
    bool terminal = false;
};

inline BridgeStepCoefs bridge_step_coefs(const BridgeSchedule& sch, int t_hi, int t_lo) {
    detail::check_timestep(sch, t_hi, "bridge_reverse_step");
    detail::check_timestep(sch, t_lo, "bridge_reverse_step");
    if (!(t_hi > t_lo))
        throw ValidationError("bridge_reverse_step: need t_hi > t_lo, got " + std::to_string(t_hi) + " -> " +
                              std::to_string(t_lo));
    return {sch.m_at(t_lo), std::sqrt(sch.s * sch.delta_at(t_lo)), t_lo == 0};
}

// x0_hat must already be x_t - eps_pred (optionally clamped by the caller).
template <class X>
X bridge_step_apply(const BridgeStepCoefs& c, const X& x0_hat, const X& y, const X& noise) {
    if (c.terminal) return x0_hat;
    return (1.0 - c.m_lo) * x0_hat + c.m_lo * y + c.sigma * noise;
}

inline ImageTensor bridge_reverse_step(const BridgeSchedule& sch, const ImageTensor& x_t, const ImageTensor& y,
                                       int t_hi, int t_lo, const ImageTensor& eps_pred, const ImageTensor& noise,
                                       bool clamp_x0 = false) {
    const auto coefs = bridge_step_coefs(sch, t_hi, t_lo);
    ImageTensor::require_same_shape(x_t, y, "bridge_reverse_step");
    ImageTensor::require_same_shape(x_t, eps_pred, "bridge_reverse_step");
    ImageTensor::require_same_shape(x_t, noise, "bridge_reverse_step");
    ImageTensor x0_hat = x_t - eps_pred;
    if (clamp_x0) x0_hat.clamp();
    return bridge_step_apply(coefs, x0_hat, y, noise);
}

/// Posterior transition q(x_lo | x_hi, x0_hat, y) of the bridge: the same
/// x0 estimate, but the noise already in x_hi is carried down instead of
/// redrawn. With r = x_hi - (1 - m_hi) x0_hat - m_hi y,
///   x_lo = (1 - m_lo) x0_hat + m_lo y + carry r + sigma noise,
/// carry = a delta_lo / delta_hi, sigma^2 = s delta_lo (delta_hi - a^2 delta_lo) / delta_hi,
/// a = (1 - m_hi) / (1 - m_lo). At t_hi = T nothing is carried and the step
/// equals bridge_reverse_step.
struct BridgePosteriorCoefs {
    double m_hi = 0.0;
    double m_lo = 0.0;
    double carry = 0.0;
    double sigma = 0.0;
    bool terminal = false;
};

inline BridgePosteriorCoefs bridge_posterior_coefs(const BridgeSchedule& sch, int t_hi, int t_lo) {
    const auto marginal = bridge_step_coefs(sch, t_hi, t_lo);
    BridgePosteriorCoefs c{sch.m_at(t_hi), marginal.m_lo, 0.0, marginal.sigma, marginal.terminal};
    const double d_hi = sch.delta_at(t_hi), d_lo = sch.delta_at(t_lo);
    if (c.terminal || d_hi == 0.0) return c;
    const double a = (1.0 - c.m_hi) / (1.0 - c.m_lo);
    c.carry = a * d_lo / d_hi;
    c.sigma = std::sqrt(sch.s * std::max(0.0, d_lo * (d_hi - a * a * d_lo) / d_hi));
    return c;
}

template <class X>
X bridge_posterior_apply(const BridgePosteriorCoefs& c, const X& x0_hat, const X& x_t, const X& y, const X& noise) {
    if (c.terminal) return x0_hat;
    return (1.0 - c.m_lo) * x0_hat + c.m_lo * y + c.carry * (x_t - (1.0 - c.m_hi) * x0_hat - c.m_hi * y) +
           c.sigma * noise;
}

inline ImageTensor bridge_posterior_step(const BridgeSchedule& sch, const ImageTensor& x_t, const ImageTensor& y,
                                         int t_hi, int t_lo, const ImageTensor& eps_pred, const ImageTensor& noise,
                                         bool clamp_x0 = false) {
    const auto coefs = bridge_posterior_coefs(sch, t_hi, t_lo);
    ImageTensor::require_same_shape(x_t, y, "bridge_posterior_step");
    ImageTensor::require_same_shape(x_t, eps_pred, "bridge_posterior_step");
    ImageTensor::require_same_shape(x_t, noise, "bridge_posterior_step");
    ImageTensor x0_hat = x_t - eps_pred;
    if (clamp_x0) x0_hat.clamp();
    return bridge_posterior_apply(coefs, x0_hat, x_t, y, noise);
}

/// Descending sampling timesteps T_train, ..., stride; the chain's last
/// transition goes from the final element to 0.
inline std::vector<int> strided_timesteps(int T_train, int T_sample) {
    if (T_train < 1) throw ValidationError("strided_timesteps: T_train must be positive");
    if (T_sample <= 0 || T_sample > T_train)
        throw ValidationError("strided_timesteps: need 0 < T_sample <= T_train, got " + std::to_string(T_sample));
    std::vector<int> ts;
    ts.reserve(static_cast<std::size_t>(T_sample));
    for (int i = 0; i < T_sample; ++i)
        ts.push_back(static_cast<int>(std::lround(static_cast<double>(T_sample - i) * T_train / T_sample)));
    return ts;
}

// ---------------------------------------------------------------------------
// DDPM

/// Timesteps index 0..T-1; alpha_bar_at(-1) == 1 denotes the clean image.
struct DdpmSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha_bar;

    [[nodiscard]] double alpha_bar_at(int t) const {
        return t < 0 ? 1.0 : alpha_bar.at(static_cast<std::size_t>(t));
    }
};

inline DdpmSchedule build_ddpm_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02) {
    if (T < 2) throw ValidationError("build_ddpm_schedule: T must be >= 2, got " + std::to_string(T));
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
        throw ValidationError("build_ddpm_schedule: need 0 < beta_start <= beta_end < 1");
    DdpmSchedule sch;
    sch.T = T;
    sch.beta.resize(static_cast<std::size_t>(T));
    sch.alpha_bar.resize(static_cast<std::size_t>(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        sch.beta[t] = beta_start + (beta_end - beta_start) * t / (T - 1);
        prod *= 1.0 - sch.beta[t];
        sch.alpha_bar[t] = prod;
    }
    return sch;
}

template <class C, class X>
X ddpm_mix(const C& sqrt_ab, const C& sqrt_one_minus_ab, const X& x0, const X& noise) {
    return sqrt_ab * x0 + sqrt_one_minus_ab * noise;
}

inline ImageTensor ddpm_forward_sample(const DdpmSchedule& sch, const ImageTensor& x0, int t, const ImageTensor& noise) {
    if (t < 0 || t >= sch.T) throw ValidationError("ddpm_forward_sample: timestep out of range");
    ImageTensor::require_same_shape(x0, noise, "ddpm_forward_sample");
    const double ab = sch.alpha_bar_at(t);
    return ddpm_mix(std::sqrt(ab), std::sqrt(1.0 - ab), x0, noise);
}

/// Posterior q(x_lo | x_hi, x0_hat) for an arbitrary jump hi -> lo; with
/// lo = hi - 1 this is the usual ancestral step.
struct DdpmStepCoefs {
    double inv_sqrt_ab_hi = 1.0;   // x0_hat = inv_sqrt_ab_hi * (x_t - sqrt_1m_ab_hi * eps)
    double sqrt_1m_ab_hi = 0.0;
    double coef_x0 = 0.0;
    double coef_xt = 0.0;
    double sigma = 0.0;
    bool terminal = false;
};

inline DdpmStepCoefs ddpm_step_coefs(const DdpmSchedule& sch, int t_hi, int t_lo) {
    if (t_hi < 0 || t_hi >= sch.T || t_lo < -1 || t_lo >= t_hi)
        throw ValidationError("ddpm_reverse_step: need -1 <= t_lo < t_hi < T");
    const double ab_hi = sch.alpha_bar_at(t_hi);
    const double ab_lo = sch.alpha_bar_at(t_lo);
    const double a_step = ab_hi / ab_lo;
    const double b_step = 1.0 - a_step;
    DdpmStepCoefs c;
    c.inv_sqrt_ab_hi = 1.0 / std::sqrt(ab_hi);
    c.sqrt_1m_ab_hi = std::sqrt(1.0 - ab_hi);
    c.terminal = t_lo < 0;
    c.coef_x0 = std::sqrt(ab_lo) * b_step / (1.0 - ab_hi);
    c.coef_xt = std::sqrt(a_step) * (1.0 - ab_lo) / (1.0 - ab_hi);
    c.sigma = c.terminal ? 0.0 : std::sqrt((1.0 - ab_lo) / (1.0 - ab_hi) * b_step);
    return c;
}

template <class X>
X ddpm_x0_estimate(const DdpmStepCoefs& c, const X& x_t, const X& eps) {
    return c.inv_sqrt_ab_hi * (x_t - c.sqrt_1m_ab_hi * eps);
}

template <class X>
X ddpm_step_apply(const DdpmStepCoefs& c, const X& x0_hat, const X& x_t, const X& noise) {
    if (c.terminal) return x0_hat;
    return c.coef_x0 * x0_hat + c.coef_xt * x_t + c.sigma * noise;
}

inline ImageTensor ddpm_reverse_step(const DdpmSchedule& sch, const ImageTensor& x_t, int t_hi, int t_lo,
                                     const ImageTensor& eps_pred, const ImageTensor& noise, bool clamp_x0 = false) {
    const auto c = ddpm_step_coefs(sch, t_hi, t_lo);
    ImageTensor::require_same_shape(x_t, eps_pred, "ddpm_reverse_step");
    ImageTensor::require_same_shape(x_t, noise, "ddpm_reverse_step");
    ImageTensor x0_hat = ddpm_x0_estimate(c, x_t, eps_pred);
    if (clamp_x0) x0_hat.clamp();
    return ddpm_step_apply(c, x0_hat, x_t, noise);
}

/// DDPM chain timesteps (0-based) for a respaced sampler of n steps.
inline std::vector<int> ddpm_sampling_timesteps(int T, int n) {
    auto ts = strided_timesteps(T, n);
    for (auto& t : ts) t -= 1;
    return ts;
}

}  // namespace crease
