#include <cmath>

#include "protodiff/errors.hpp"
#include "protodiff/kernels.hpp"

// Plain serial implementations, written as directly from the definitions as
// possible. They exist to cross-check the OpenMP kernels and to serve as the
// baseline in the kernel benchmark.

namespace protodiff {
namespace ref {

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b, ConvSpec spec) {
    const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    const int s = spec.stride, p = spec.pad;
    const int OH = conv_out_dim(H, KH, s, p), OW = conv_out_dim(W, KW, s, p);
    Tensor y({N, Co, OH, OW});
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow) {
                    double acc = b.data[co];
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int kh = 0; kh < KH; ++kh)
                            for (int kw = 0; kw < KW; ++kw) {
                                const int ih = oh * s + kh - p;
                                const int iw = ow * s + kw - p;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x.at(n, ci, ih, iw) * w.at(co, ci, kh, kw);
                            }
                    y.at(n, co, oh, ow) = acc;
                }
    return y;
}

Tensor conv2d_backward_input(const Tensor& dy, const Tensor& w, int H, int W, ConvSpec spec) {
    const int N = dy.dim(0), Co = dy.dim(1), OH = dy.dim(2), OW = dy.dim(3);
    const int Ci = w.dim(1), KH = w.dim(2), KW = w.dim(3);
    const int s = spec.stride, p = spec.pad;
    Tensor dx({N, Ci, H, W});
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow) {
                    const double g = dy.at(n, co, oh, ow);
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int kh = 0; kh < KH; ++kh)
                            for (int kw = 0; kw < KW; ++kw) {
                                const int ih = oh * s + kh - p;
                                const int iw = ow * s + kw - p;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                dx.at(n, ci, ih, iw) += g * w.at(co, ci, kh, kw);
                            }
                }
    return dx;
}

void conv2d_backward_params(const Tensor& dy, const Tensor& x, ConvSpec spec, Tensor& dw, Tensor& db) {
    const int N = dy.dim(0), Co = dy.dim(1), OH = dy.dim(2), OW = dy.dim(3);
    const int Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int KH = dw.dim(2), KW = dw.dim(3);
    const int s = spec.stride, p = spec.pad;
    for (auto& v : dw.data) v = 0.0;
    for (auto& v : db.data) v = 0.0;
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow) {
                    const double g = dy.at(n, co, oh, ow);
                    db.data[co] += g;
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int kh = 0; kh < KH; ++kh)
                            for (int kw = 0; kw < KW; ++kw) {
                                const int ih = oh * s + kh - p;
                                const int iw = ow * s + kw - p;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                dw.at(co, ci, kh, kw) += g * x.at(n, ci, ih, iw);
                            }
                }
}

Tensor group_norm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                          double eps, Tensor& mean, Tensor& var) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cg = C / groups;
    const double m = static_cast<double>(Cg) * H * W;
    Tensor y(x.shape);
    mean = Tensor({N, groups});
    var = Tensor({N, groups});
    for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
            double mu = 0.0;
            for (int cg = 0; cg < Cg; ++cg)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) mu += x.at(n, g * Cg + cg, h, w);
            mu /= m;
            double v = 0.0;
            for (int cg = 0; cg < Cg; ++cg)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) {
                        const double d = x.at(n, g * Cg + cg, h, w) - mu;
                        v += d * d;
                    }
            v /= m;
            mean.at(n, g) = mu;
            var.at(n, g) = v;
            for (int cg = 0; cg < Cg; ++cg) {
                const int c = g * Cg + cg;
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w)
                        y.at(n, c, h, w) =
                            gamma.data[c] * (x.at(n, c, h, w) - mu) / std::sqrt(v + eps) + beta.data[c];
            }
        }
    return y;
}

void group_norm_backward(const Tensor& dy, const Tensor& x, const Tensor& gamma, const Tensor& mean,
                         const Tensor& var, int groups, double eps, Tensor& dx, Tensor& dgamma,
                         Tensor& dbeta) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cg = C / groups;
    const double m = static_cast<double>(Cg) * H * W;
    dx = Tensor(x.shape);
    dgamma = Tensor({C});
    dbeta = Tensor({C});
    for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
            const double mu = mean.at(n, g);
            const double inv = 1.0 / std::sqrt(var.at(n, g) + eps);
            double sum_dxhat = 0.0, sum_dxhat_xc = 0.0, sum_xc = 0.0;
            for (int cg = 0; cg < Cg; ++cg) {
                const int c = g * Cg + cg;
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) {
                        const double xc = x.at(n, c, h, w) - mu;
                        const double dxh = dy.at(n, c, h, w) * gamma.data[c];
                        sum_dxhat += dxh;
                        sum_dxhat_xc += dxh * xc;
                        sum_xc += xc;
                        dgamma.data[c] += dy.at(n, c, h, w) * xc * inv;
                        dbeta.data[c] += dy.at(n, c, h, w);
                    }
            }
            const double dvar = sum_dxhat_xc * (-0.5) * inv * inv * inv;
            const double dmu = -inv * sum_dxhat + dvar * (-2.0 / m) * sum_xc;
            for (int cg = 0; cg < Cg; ++cg) {
                const int c = g * Cg + cg;
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) {
                        const double xc = x.at(n, c, h, w) - mu;
                        const double dxh = dy.at(n, c, h, w) * gamma.data[c];
                        dx.at(n, c, h, w) = dxh * inv + dvar * 2.0 * xc / m + dmu / m;
                    }
            }
        }
}

Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
    const int N = x.dim(0), I = x.dim(1), O = w.dim(0);
    Tensor y({N, O});
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
            double acc = b.data[o];
            for (int i = 0; i < I; ++i) acc += x.at(n, i) * w.at(o, i);
            y.at(n, o) = acc;
        }
    return y;
}

Tensor linear_backward_input(const Tensor& dy, const Tensor& w) {
    const int N = dy.dim(0), O = dy.dim(1), I = w.dim(1);
    Tensor dx({N, I});
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o)
            for (int i = 0; i < I; ++i) dx.at(n, i) += dy.at(n, o) * w.at(o, i);
    return dx;
}

void linear_backward_params(const Tensor& dy, const Tensor& x, Tensor& dw, Tensor& db) {
    const int N = dy.dim(0), O = dy.dim(1), I = x.dim(1);
    dw = Tensor({O, I});
    db = Tensor({O});
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
            db.data[o] += dy.at(n, o);
            for (int i = 0; i < I; ++i) dw.at(o, i) += dy.at(n, o) * x.at(n, i);
        }
}

} // namespace ref
} // namespace protodiff
