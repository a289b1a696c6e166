#pragma once

#include <functional>

#include "protodiff/denoiser.hpp"
#include "protodiff/embed.hpp"
#include "protodiff/schedule.hpp"

namespace protodiff {

struct SampleRequest {
    int label = kNullLabel;      // class index, or kNullLabel for unconditional
    double guidance_weight = 0.5; // w >= 0
    int n_samples = 16;
    uint64_t seed = 0;
    bool clamp_x0 = true;
    bool use_beta_variance = false; // beta_t instead of the posterior variance
};

/// (1+w) * eps_cond - w * eps_uncond, elementwise.
Tensor guided_noise(const Tensor& eps_cond, const Tensor& eps_uncond, double w);

/// Noise predictor abstraction so the ancestral loop can be driven either by
/// the trained U-Net or by a test oracle. Called as fn(x_t, t, label).
using NoisePredictor = std::function<Tensor(const Tensor&, int, int)>;

/// Ancestral DDPM sampling loop over an arbitrary predictor. Adds posterior
/// noise for t > 0, none at t = 0. With clamp_x0, the implied x0 is clamped
/// to [-1,1] each step and the mean recomputed from it.
Tensor ddpm_sample_loop(const NoisePredictor& predict, const NoiseSchedule& sched,
                        const SampleRequest& request, int channels, int image_size);

/// Classifier-free-guided sampling with the trained denoiser and table.
/// When w = 0 the unconditional branch is skipped; outputs are bit-identical
/// to the general path.
Tensor ddpm_sample(const UNet& net, const ConditioningTable& table, const NoiseSchedule& sched,
                   const SampleRequest& request);

struct LabeledBatch {
    Tensor images; // (N,C,H,W)
    std::vector<int> labels;
};

/// One ddpm_sample call per class (per-class seeds derived from `seed`),
/// assembled row-per-class by the PNG writer.
LabeledBatch sample_grid(const UNet& net, const ConditioningTable& table, const NoiseSchedule& sched,
                         int per_class, double w, uint64_t seed, bool clamp_x0 = true,
                         bool use_beta_variance = false);

} // namespace protodiff
