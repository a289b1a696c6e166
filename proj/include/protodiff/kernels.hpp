#pragma once

#include "protodiff/rng.hpp"
#include "protodiff/tensor.hpp"

namespace protodiff {

// Layer primitives used by the feature extractor and the U-Net. Each has a
// forward and an exact reverse-mode backward.
//
// kernels::  — OpenMP implementations, the production path. Every parallel
//              loop partitions *output* elements, with serial inner
//              reductions, so results are bit-identical for any thread count.
// ref::      — plain serial loops kept for testing and benchmarking. The two
//              may differ in summation order, so tests compare them at
//              ~1e-12 relative tolerance; mathematical correctness is pinned
//              separately by the finite-difference suite.

struct ConvSpec {
    int stride = 1;
    int pad = 1;
};

inline int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

namespace kernels {

// x: (N,Ci,H,W), w: (Co,Ci,KH,KW), b: (Co) -> y: (N,Co,OH,OW)
Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b, ConvSpec spec);
Tensor conv2d_backward_input(const Tensor& dy, const Tensor& w, int H, int W, ConvSpec spec);
void conv2d_backward_params(const Tensor& dy, const Tensor& x, ConvSpec spec, Tensor& dw, Tensor& db);

// Per-sample, per-group normalization over (C/groups, H, W). mean/var are
// saved as (N, groups) for the backward pass; var is the biased variance.
Tensor group_norm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                          double eps, Tensor& mean, Tensor& var);
void group_norm_backward(const Tensor& dy, const Tensor& x, const Tensor& gamma, const Tensor& mean,
                         const Tensor& var, int groups, double eps, Tensor& dx, Tensor& dgamma,
                         Tensor& dbeta);

Tensor silu_forward(const Tensor& x);
Tensor silu_backward(const Tensor& dy, const Tensor& x);

// x: (N,I), w: (O,I), b: (O) -> y: (N,O)
Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor linear_backward_input(const Tensor& dy, const Tensor& w);
void linear_backward_params(const Tensor& dy, const Tensor& x, Tensor& dw, Tensor& db);

// Inverted dropout. The mask holds 0 or 1/(1-rate) and is drawn serially
// from the caller's generator so streams stay reproducible.
Tensor dropout_forward(const Tensor& x, double rate, Rng& rng, Tensor& mask);
Tensor dropout_backward(const Tensor& dy, const Tensor& mask);

// 2x2 mean pooling, stride 2. H and W must be even.
Tensor avg_downsample2x_forward(const Tensor& x);
Tensor avg_downsample2x_backward(const Tensor& dy);

Tensor nearest_upsample2x_forward(const Tensor& x);
Tensor nearest_upsample2x_backward(const Tensor& dy);

// (N,C,H,W) -> (N,C)
Tensor global_avg_pool_forward(const Tensor& x);
Tensor global_avg_pool_backward(const Tensor& dy, int H, int W);

Tensor add(const Tensor& a, const Tensor& b);
Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& d, int ca, Tensor& da, Tensor& db);

} // namespace kernels

namespace ref {

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b, ConvSpec spec);
Tensor conv2d_backward_input(const Tensor& dy, const Tensor& w, int H, int W, ConvSpec spec);
void conv2d_backward_params(const Tensor& dy, const Tensor& x, ConvSpec spec, Tensor& dw, Tensor& db);
Tensor group_norm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                          double eps, Tensor& mean, Tensor& var);
void group_norm_backward(const Tensor& dy, const Tensor& x, const Tensor& gamma, const Tensor& mean,
                         const Tensor& var, int groups, double eps, Tensor& dx, Tensor& dgamma,
                         Tensor& dbeta);
Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor linear_backward_input(const Tensor& dy, const Tensor& w);
void linear_backward_params(const Tensor& dy, const Tensor& x, Tensor& dw, Tensor& db);

} // namespace ref

} // namespace protodiff
