#include "protodiff/schedule.hpp"

#include <cmath>
#include <string>

#include "protodiff/errors.hpp"

namespace protodiff {

namespace {

void check_t(int t, const NoiseSchedule& sched) {
    if (t < 0 || t >= sched.T)
        throw ShapeError("step index " + std::to_string(t) + " out of range [0," +
                         std::to_string(sched.T) + ")");
}

void check_same(size_t a, size_t b, const char* what) {
    if (a != b) throw ShapeError(std::string(what) + ": element count mismatch");
}

} // namespace

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw ConfigError("schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");

    NoiseSchedule s;
    s.T = T;
    s.betas.resize(T);
    s.alphas.resize(T);
    s.alpha_bars.resize(T);
    s.posterior_variances.resize(T);

    for (int t = 0; t < T; ++t) {
        s.betas[t] = (T == 1) ? beta_start
                              : beta_start + (beta_end - beta_start) * static_cast<double>(t) /
                                                 static_cast<double>(T - 1);
        s.alphas[t] = 1.0 - s.betas[t];
    }
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        const double prev_bar = prod; // alpha_bar_{t-1}, 1 at t=0
        prod *= s.alphas[t];
        s.alpha_bars[t] = prod;
        s.posterior_variances[t] = s.betas[t] * (1.0 - prev_bar) / (1.0 - prod);
    }
    return s;
}

void q_sample(std::span<const double> x0, int t, std::span<const double> eps,
              const NoiseSchedule& sched, std::span<double> out) {
    check_t(t, sched);
    check_same(x0.size(), eps.size(), "q_sample");
    check_same(x0.size(), out.size(), "q_sample");
    const double a = std::sqrt(sched.alpha_bars[t]);
    const double b = std::sqrt(1.0 - sched.alpha_bars[t]);
    for (size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (!x0.same_shape(eps)) throw ShapeError("q_sample: eps shape mismatch");
    Tensor out(x0.shape);
    q_sample(x0.data, t, eps.data, sched, out.data);
    return out;
}

void predict_x0(std::span<const double> xt, int t, std::span<const double> eps_hat,
                const NoiseSchedule& sched, std::span<double> out) {
    check_t(t, sched);
    check_same(xt.size(), eps_hat.size(), "predict_x0");
    check_same(xt.size(), out.size(), "predict_x0");
    const double a = std::sqrt(sched.alpha_bars[t]);
    const double b = std::sqrt(1.0 - sched.alpha_bars[t]);
    for (size_t i = 0; i < xt.size(); ++i) out[i] = (xt[i] - b * eps_hat[i]) / a;
}

Tensor predict_x0(const Tensor& xt, int t, const Tensor& eps_hat, const NoiseSchedule& sched) {
    if (!xt.same_shape(eps_hat)) throw ShapeError("predict_x0: eps_hat shape mismatch");
    Tensor out(xt.shape);
    predict_x0(xt.data, t, eps_hat.data, sched, out.data);
    return out;
}

void posterior_mean(std::span<const double> xt, int t, std::span<const double> eps_hat,
                    const NoiseSchedule& sched, std::span<double> out) {
    check_t(t, sched);
    check_same(xt.size(), eps_hat.size(), "posterior_mean");
    check_same(xt.size(), out.size(), "posterior_mean");
    const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alphas[t]);
    const double coef = sched.betas[t] / std::sqrt(1.0 - sched.alpha_bars[t]);
    for (size_t i = 0; i < xt.size(); ++i) out[i] = inv_sqrt_alpha * (xt[i] - coef * eps_hat[i]);
}

Tensor posterior_mean(const Tensor& xt, int t, const Tensor& eps_hat, const NoiseSchedule& sched) {
    if (!xt.same_shape(eps_hat)) throw ShapeError("posterior_mean: eps_hat shape mismatch");
    Tensor out(xt.shape);
    posterior_mean(xt.data, t, eps_hat.data, sched, out.data);
    return out;
}

} // namespace protodiff
