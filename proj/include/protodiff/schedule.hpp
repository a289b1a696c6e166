#pragma once

#include <span>
#include <vector>

#include "protodiff/tensor.hpp"

namespace protodiff {

/// Forward-process variance schedule and the derived quantities the trainer
/// and sampler need. Steps are 0-based internally: index t corresponds to the
/// conventional timestep t+1, so alpha_bars[t] = alpha_0 * ... * alpha_t.
///
/// Immutable after construction; safe to share across threads.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;
    /// beta_tilde_t = beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t),
    /// with alpha_bar at "step -1" defined as 1 (so entry 0 is exactly 0).
    std::vector<double> posterior_variances;
};

/// Linear beta ramp inclusive of both endpoints. T=1 degenerates to
/// betas = [beta_start].
NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end);

/// x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
void q_sample(std::span<const double> x0, int t, std::span<const double> eps,
              const NoiseSchedule& sched, std::span<double> out);
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);

/// x0_hat = (x_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t)
void predict_x0(std::span<const double> xt, int t, std::span<const double> eps_hat,
                const NoiseSchedule& sched, std::span<double> out);
Tensor predict_x0(const Tensor& xt, int t, const Tensor& eps_hat, const NoiseSchedule& sched);

/// mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)
void posterior_mean(std::span<const double> xt, int t, std::span<const double> eps_hat,
                    const NoiseSchedule& sched, std::span<double> out);
Tensor posterior_mean(const Tensor& xt, int t, const Tensor& eps_hat, const NoiseSchedule& sched);

} // namespace protodiff
