#pragma once

#include <memory>
#include <string>
#include <vector>

#include "protodiff/rng.hpp"
#include "protodiff/tensor.hpp"

namespace protodiff {

struct UNetConfig {
    int base_channels = 32;
    std::vector<int> ch_mult = {1, 2, 2}; // per-resolution channel multipliers
    int blocks_per_res = 2;
    double dropout_rate = 0.1;
    int time_dim = 128;   // d_t
    int proto_dim = 128;  // d_p
    int cond_hidden = 128;
    int in_channels = 3;
    int out_channels = 3;
    int image_size = 16;
    int norm_groups = 8;

    int cond_dim() const { return time_dim + proto_dim; }
    int levels() const { return static_cast<int>(ch_mult.size()); }
    int channels_at(int level) const { return base_channels * ch_mult[level]; }
    void validate() const;
};

/// Noise predictor eps_theta(x_t, z). Encoder/decoder with residual blocks,
/// skip concatenations, average-pool downsampling and nearest-neighbor
/// upsampling. The conditioning vector passes through a two-layer MLP; each
/// residual block adds its own linear projection of that hidden vector as a
/// per-channel bias after the block's first convolution.
struct UNet {
    UNetConfig cfg;
    ParamStore params;
};

/// Deterministic fan-in-scaled initialization; the final projection is
/// zero-initialized so an untrained network predicts zero noise.
UNet build_unet(const UNetConfig& cfg, uint64_t seed);

struct UNetTrace; // saved activations (denoiser.cpp)

/// Forward pass. In training mode dropout draws its masks from `rng`;
/// evaluation mode is deterministic and needs no generator. Aborts with the
/// offending layer path if an activation goes non-finite.
Tensor unet_forward(const UNet& net, const Tensor& x, const Tensor& z, bool training, Rng* rng,
                    std::shared_ptr<UNetTrace>* trace = nullptr);

/// Evaluation-mode convenience wrapper.
Tensor predict_noise(const UNet& net, const Tensor& xt, const Tensor& z);

struct UNetGrads {
    ParamStore params;
    Tensor dz; // (N, cond_dim), gradient w.r.t. the conditioning input
};

UNetGrads unet_backward(const UNet& net, const UNetTrace& trace, const Tensor& d_out);

} // namespace protodiff
