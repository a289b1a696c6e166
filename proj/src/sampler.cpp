#include "protodiff/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "protodiff/errors.hpp"

namespace protodiff {

Tensor guided_noise(const Tensor& eps_cond, const Tensor& eps_uncond, double w) {
    if (!eps_cond.same_shape(eps_uncond)) throw ShapeError("guided_noise: shape mismatch");
    if (w < 0.0) throw ConfigError("guided_noise: w must be >= 0");
    Tensor out(eps_cond.shape);
    // (1+w)*eps_cond - w*eps_uncond, evaluated so the w=0 and
    // eps_cond == eps_uncond boundaries are exact in floating point.
    for (size_t i = 0; i < out.numel(); ++i)
        out.data[i] = eps_cond.data[i] + w * (eps_cond.data[i] - eps_uncond.data[i]);
    return out;
}

Tensor ddpm_sample_loop(const NoisePredictor& predict, const NoiseSchedule& sched,
                        const SampleRequest& request, int channels, int image_size) {
    if (request.n_samples < 1) throw ConfigError("sample: n_samples must be >= 1");
    if (request.guidance_weight < 0.0) throw ConfigError("sample: guidance weight must be >= 0");

    Rng rng(request.seed);
    Tensor x({request.n_samples, channels, image_size, image_size});
    rng.fill_normal(x.data);

    Tensor noise(x.shape);
    for (int t = sched.T - 1; t >= 0; --t) {
        Tensor eps = predict(x, t, request.label);
        if (!eps.same_shape(x)) throw ShapeError("sample: predictor output shape mismatch");

        Tensor mean(x.shape);
        if (request.clamp_x0) {
            Tensor x0 = predict_x0(x, t, eps, sched);
            for (auto& v : x0.data) v = std::clamp(v, -1.0, 1.0);
            // posterior mean from the clamped x0:
            // (sqrt(abar_{t-1}) beta_t x0 + sqrt(alpha_t)(1-abar_{t-1}) x_t) / (1-abar_t)
            const double abar_prev = (t > 0) ? sched.alpha_bars[t - 1] : 1.0;
            const double c0 = std::sqrt(abar_prev) * sched.betas[t] / (1.0 - sched.alpha_bars[t]);
            const double c1 = std::sqrt(sched.alphas[t]) * (1.0 - abar_prev) / (1.0 - sched.alpha_bars[t]);
            for (size_t i = 0; i < x.numel(); ++i) mean.data[i] = c0 * x0.data[i] + c1 * x.data[i];
        } else {
            posterior_mean(x.data, t, eps.data, sched, mean.data);
        }

        if (t > 0) {
            const double var = request.use_beta_variance ? sched.betas[t] : sched.posterior_variances[t];
            const double sd = std::sqrt(var);
            rng.fill_normal(noise.data);
            for (size_t i = 0; i < x.numel(); ++i) x.data[i] = mean.data[i] + sd * noise.data[i];
        } else {
            x = std::move(mean);
        }
        if (!x.all_finite())
            throw NonFiniteError("sample: non-finite state at step " + std::to_string(t));
    }
    return x;
}

Tensor ddpm_sample(const UNet& net, const ConditioningTable& table, const NoiseSchedule& sched,
                   const SampleRequest& request) {
    if (request.label != kNullLabel && (request.label < 0 || request.label >= table.C))
        throw ShapeError("sample: label " + std::to_string(request.label) + " out of range [0," +
                         std::to_string(table.C) + ")");
    const int d_t = net.cfg.time_dim;
    const double w = request.guidance_weight;

    auto batch_conditioning = [&](int t, int label, int n) {
        Tensor z({n, net.cfg.cond_dim()});
        const auto row = build_conditioning(t, label, table, d_t);
        for (int k = 0; k < n; ++k)
            std::copy(row.begin(), row.end(), z.data.begin() + static_cast<size_t>(k) * row.size());
        return z;
    };

    NoisePredictor predictor = [&](const Tensor& x, int t, int label) {
        Tensor z_cond = batch_conditioning(t, label, x.dim(0));
        Tensor eps_cond = predict_noise(net, x, z_cond);
        if (w == 0.0) return eps_cond; // skipping the unconditional pass is exact at w = 0
        Tensor z_uncond = batch_conditioning(t, kNullLabel, x.dim(0));
        Tensor eps_uncond = predict_noise(net, x, z_uncond);
        return guided_noise(eps_cond, eps_uncond, w);
    };
    return ddpm_sample_loop(predictor, sched, request, net.cfg.in_channels, net.cfg.image_size);
}

LabeledBatch sample_grid(const UNet& net, const ConditioningTable& table, const NoiseSchedule& sched,
                         int per_class, double w, uint64_t seed, bool clamp_x0, bool use_beta_variance) {
    if (per_class < 1) throw ConfigError("sample_grid: per_class must be >= 1");
    const int C = table.C;
    LabeledBatch out;
    out.images = Tensor({C * per_class, net.cfg.in_channels, net.cfg.image_size, net.cfg.image_size});
    out.labels.resize(static_cast<size_t>(C) * per_class);

    Rng seeder(seed);
    const size_t img = out.images.numel() / (static_cast<size_t>(C) * per_class);
    for (int c = 0; c < C; ++c) {
        SampleRequest req;
        req.label = c;
        req.guidance_weight = w;
        req.n_samples = per_class;
        req.seed = seeder.next_u64();
        req.clamp_x0 = clamp_x0;
        req.use_beta_variance = use_beta_variance;
        Tensor batch = ddpm_sample(net, table, sched, req);
        std::copy(batch.data.begin(), batch.data.end(),
                  out.images.data.begin() + static_cast<size_t>(c) * per_class * img);
        for (int k = 0; k < per_class; ++k) out.labels[static_cast<size_t>(c) * per_class + k] = c;
    }
    return out;
}

} // namespace protodiff
