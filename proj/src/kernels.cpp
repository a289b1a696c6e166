#include "protodiff/kernels.hpp"

#include <cmath>

#include "protodiff/errors.hpp"

namespace protodiff {
namespace kernels {

namespace {

void require(bool cond, const char* msg) {
    if (!cond) throw ShapeError(msg);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b, ConvSpec spec) {
    require(x.shape.size() == 4 && w.shape.size() == 4, "conv2d: rank-4 tensors expected");
    const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    require(w.dim(1) == Ci, "conv2d: weight in-channels mismatch");
    require(static_cast<int>(b.numel()) == Co, "conv2d: bias size mismatch");
    const int s = spec.stride, p = spec.pad;
    const int OH = conv_out_dim(H, KH, s, p), OW = conv_out_dim(W, KW, s, p);
    require(OH >= 1 && OW >= 1, "conv2d: empty output");

    Tensor y({N, Co, OH, OW});
    const double* xd = x.data.data();
    const double* wd = w.data.data();
    const double* bd = b.data.data();
    double* yd = y.data.data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Co; ++co) {
            double* yrow = yd + ((static_cast<size_t>(n) * Co + co) * OH) * OW;
            for (int oh = 0; oh < OH; ++oh) {
                const int ih0 = oh * s - p;
                for (int ow = 0; ow < OW; ++ow) {
                    const int iw0 = ow * s - p;
                    double acc = bd[co];
                    for (int ci = 0; ci < Ci; ++ci) {
                        const double* xc = xd + ((static_cast<size_t>(n) * Ci + ci) * H) * W;
                        const double* wc = wd + ((static_cast<size_t>(co) * Ci + ci) * KH) * KW;
                        for (int kh = 0; kh < KH; ++kh) {
                            const int ih = ih0 + kh;
                            if (ih < 0 || ih >= H) continue;
                            const double* xr = xc + static_cast<size_t>(ih) * W;
                            const double* wr = wc + static_cast<size_t>(kh) * KW;
                            double rowsum = 0.0;
                            for (int kw = 0; kw < KW; ++kw) {
                                const int iw = iw0 + kw;
                                if (iw < 0 || iw >= W) continue;
                                rowsum += xr[iw] * wr[kw];
                            }
                            acc += rowsum;
                        }
                    }
                    yrow[static_cast<size_t>(oh) * OW + ow] = acc;
                }
            }
        }
    }
    return y;
}

Tensor conv2d_backward_input(const Tensor& dy, const Tensor& w, int H, int W, ConvSpec spec) {
    const int N = dy.dim(0), Co = dy.dim(1), OH = dy.dim(2), OW = dy.dim(3);
    const int Ci = w.dim(1), KH = w.dim(2), KW = w.dim(3);
    require(w.dim(0) == Co, "conv2d backward: weight out-channels mismatch");
    const int s = spec.stride, p = spec.pad;

    Tensor dx({N, Ci, H, W});
    const double* dyd = dy.data.data();
    const double* wd = w.data.data();
    double* dxd = dx.data.data();

    if (s == 1) {
#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < N; ++n) {
            for (int ci = 0; ci < Ci; ++ci) {
                double* dxc = dxd + ((static_cast<size_t>(n) * Ci + ci) * H) * W;
                for (int ih = 0; ih < H; ++ih) {
                    for (int iw = 0; iw < W; ++iw) {
                        double acc = 0.0;
                        for (int co = 0; co < Co; ++co) {
                            const double* dyc = dyd + ((static_cast<size_t>(n) * Co + co) * OH) * OW;
                            const double* wc = wd + ((static_cast<size_t>(co) * Ci + ci) * KH) * KW;
                            for (int kh = 0; kh < KH; ++kh) {
                                const int oh = ih + p - kh;
                                if (oh < 0 || oh >= OH) continue;
                                const double* dyr = dyc + static_cast<size_t>(oh) * OW;
                                const double* wr = wc + static_cast<size_t>(kh) * KW;
                                double rowsum = 0.0;
                                for (int kw = 0; kw < KW; ++kw) {
                                    const int ow = iw + p - kw;
                                    if (ow < 0 || ow >= OW) continue;
                                    rowsum += dyr[ow] * wr[kw];
                                }
                                acc += rowsum;
                            }
                        }
                        dxc[static_cast<size_t>(ih) * W + iw] = acc;
                    }
                }
            }
        }
        return dx;
    }

#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int ci = 0; ci < Ci; ++ci) {
            double* dxc = dxd + ((static_cast<size_t>(n) * Ci + ci) * H) * W;
            for (int ih = 0; ih < H; ++ih) {
                for (int iw = 0; iw < W; ++iw) {
                    double acc = 0.0;
                    for (int co = 0; co < Co; ++co) {
                        const double* dyc = dyd + ((static_cast<size_t>(n) * Co + co) * OH) * OW;
                        const double* wc = wd + ((static_cast<size_t>(co) * Ci + ci) * KH) * KW;
                        for (int kh = 0; kh < KH; ++kh) {
                            const int t = ih + p - kh;
                            if (t < 0 || t % s != 0) continue;
                            const int oh = t / s;
                            if (oh >= OH) continue;
                            for (int kw = 0; kw < KW; ++kw) {
                                const int u = iw + p - kw;
                                if (u < 0 || u % s != 0) continue;
                                const int ow = u / s;
                                if (ow >= OW) continue;
                                acc += dyc[static_cast<size_t>(oh) * OW + ow] * wc[static_cast<size_t>(kh) * KW + kw];
                            }
                        }
                    }
                    dxc[static_cast<size_t>(ih) * W + iw] = acc;
                }
            }
        }
    }
    return dx;
}

void conv2d_backward_params(const Tensor& dy, const Tensor& x, ConvSpec spec, Tensor& dw, Tensor& db) {
    const int N = dy.dim(0), Co = dy.dim(1), OH = dy.dim(2), OW = dy.dim(3);
    const int Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int KH = dw.dim(2), KW = dw.dim(3);
    require(dw.dim(0) == Co && dw.dim(1) == Ci, "conv2d backward: dw shape mismatch");
    const int s = spec.stride, p = spec.pad;

    const double* dyd = dy.data.data();
    const double* xd = x.data.data();
    double* dwd = dw.data.data();
    double* dbd = db.data.data();

#pragma omp parallel for schedule(static)
    for (int co = 0; co < Co; ++co) {
        double acc = 0.0;
        for (int n = 0; n < N; ++n) {
            const double* dyc = dyd + ((static_cast<size_t>(n) * Co + co) * OH) * OW;
            for (int i = 0; i < OH * OW; ++i) acc += dyc[i];
        }
        dbd[co] = acc;
    }

#pragma omp parallel for collapse(2) schedule(static)
    for (int co = 0; co < Co; ++co) {
        for (int ci = 0; ci < Ci; ++ci) {
            double* dwc = dwd + ((static_cast<size_t>(co) * Ci + ci) * KH) * KW;
            for (int kh = 0; kh < KH; ++kh) {
                for (int kw = 0; kw < KW; ++kw) {
                    double acc = 0.0;
                    for (int n = 0; n < N; ++n) {
                        const double* dyc = dyd + ((static_cast<size_t>(n) * Co + co) * OH) * OW;
                        const double* xc = xd + ((static_cast<size_t>(n) * Ci + ci) * H) * W;
                        for (int oh = 0; oh < OH; ++oh) {
                            const int ih = oh * s + kh - p;
                            if (ih < 0 || ih >= H) continue;
                            const double* dyr = dyc + static_cast<size_t>(oh) * OW;
                            const double* xr = xc + static_cast<size_t>(ih) * W;
                            for (int ow = 0; ow < OW; ++ow) {
                                const int iw = ow * s + kw - p;
                                if (iw < 0 || iw >= W) continue;
                                acc += dyr[ow] * xr[iw];
                            }
                        }
                    }
                    dwc[static_cast<size_t>(kh) * KW + kw] = acc;
                }
            }
        }
    }
}

Tensor group_norm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                          double eps, Tensor& mean, Tensor& var) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(C % groups == 0, "group_norm: channels not divisible by groups");
    require(static_cast<int>(gamma.numel()) == C && static_cast<int>(beta.numel()) == C,
            "group_norm: affine size mismatch");
    const int Cg = C / groups;
    const size_t m = static_cast<size_t>(Cg) * H * W;

    Tensor y(x.shape);
    mean = Tensor({N, groups});
    var = Tensor({N, groups});
    const double* xd = x.data.data();
    double* yd = y.data.data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const size_t base = ((static_cast<size_t>(n) * C + static_cast<size_t>(g) * Cg) * H) * W;
            double mu = 0.0;
            for (size_t i = 0; i < m; ++i) mu += xd[base + i];
            mu /= static_cast<double>(m);
            double v = 0.0;
            for (size_t i = 0; i < m; ++i) {
                const double d = xd[base + i] - mu;
                v += d * d;
            }
            v /= static_cast<double>(m);
            mean.at(n, g) = mu;
            var.at(n, g) = v;
            const double inv = 1.0 / std::sqrt(v + eps);
            for (int cg = 0; cg < Cg; ++cg) {
                const int c = g * Cg + cg;
                const double ga = gamma.data[c], be = beta.data[c];
                const size_t cbase = base + static_cast<size_t>(cg) * H * W;
                for (int i = 0; i < H * W; ++i)
                    yd[cbase + i] = ga * (xd[cbase + i] - mu) * inv + be;
            }
        }
    }
    return y;
}

void group_norm_backward(const Tensor& dy, const Tensor& x, const Tensor& gamma, const Tensor& mean,
                         const Tensor& var, int groups, double eps, Tensor& dx, Tensor& dgamma,
                         Tensor& dbeta) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cg = C / groups;
    const size_t m = static_cast<size_t>(Cg) * H * W;
    dx = Tensor(x.shape);
    dgamma = Tensor({C});
    dbeta = Tensor({C});

    const double* dyd = dy.data.data();
    const double* xd = x.data.data();
    double* dxd = dx.data.data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const size_t base = ((static_cast<size_t>(n) * C + static_cast<size_t>(g) * Cg) * H) * W;
            const double mu = mean.at(n, g);
            const double v = var.at(n, g);
            const double inv = 1.0 / std::sqrt(v + eps);
            // dxhat = dy * gamma; reduce for dvar and dmean, then map back.
            double sum_dxhat = 0.0, sum_dxhat_xc = 0.0, sum_xc = 0.0;
            for (int cg = 0; cg < Cg; ++cg) {
                const int c = g * Cg + cg;
                const double ga = gamma.data[c];
                const size_t cbase = base + static_cast<size_t>(cg) * H * W;
                for (int i = 0; i < H * W; ++i) {
                    const double xc = xd[cbase + i] - mu;
                    const double dxh = dyd[cbase + i] * ga;
                    sum_dxhat += dxh;
                    sum_dxhat_xc += dxh * xc;
                    sum_xc += xc;
                }
            }
            const double dvar = sum_dxhat_xc * (-0.5) * inv * inv * inv;
            const double dmu = -inv * sum_dxhat + dvar * (-2.0 / static_cast<double>(m)) * sum_xc;
            for (int cg = 0; cg < Cg; ++cg) {
                const int c = g * Cg + cg;
                const double ga = gamma.data[c];
                const size_t cbase = base + static_cast<size_t>(cg) * H * W;
                for (int i = 0; i < H * W; ++i) {
                    const double xc = xd[cbase + i] - mu;
                    const double dxh = dyd[cbase + i] * ga;
                    dxd[cbase + i] = dxh * inv + dvar * 2.0 * xc / static_cast<double>(m) +
                                     dmu / static_cast<double>(m);
                }
            }
        }
    }

#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
        const int g = c / Cg;
        double dg = 0.0, dbta = 0.0;
        for (int n = 0; n < N; ++n) {
            const double mu = mean.at(n, g);
            const double inv = 1.0 / std::sqrt(var.at(n, g) + eps);
            const size_t cbase = ((static_cast<size_t>(n) * C + c) * H) * W;
            for (int i = 0; i < H * W; ++i) {
                dg += dyd[cbase + i] * (xd[cbase + i] - mean.at(n, g)) * inv;
                dbta += dyd[cbase + i];
            }
            (void)mu;
        }
        dgamma.data[c] = dg;
        dbeta.data[c] = dbta;
    }
}

Tensor silu_forward(const Tensor& x) {
    Tensor y(x.shape);
    const double* xd = x.data.data();
    double* yd = y.data.data();
    const int64_t n = static_cast<int64_t>(x.numel());
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) yd[i] = xd[i] * sigmoid(xd[i]);
    return y;
}

Tensor silu_backward(const Tensor& dy, const Tensor& x) {
    Tensor dx(x.shape);
    const double* dyd = dy.data.data();
    const double* xd = x.data.data();
    double* dxd = dx.data.data();
    const int64_t n = static_cast<int64_t>(x.numel());
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        const double s = sigmoid(xd[i]);
        dxd[i] = dyd[i] * s * (1.0 + xd[i] * (1.0 - s));
    }
    return dx;
}

Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
    const int N = x.dim(0), I = x.dim(1);
    const int O = w.dim(0);
    require(w.dim(1) == I, "linear: weight shape mismatch");
    require(static_cast<int>(b.numel()) == O, "linear: bias size mismatch");
    Tensor y({N, O});
    const double* xd = x.data.data();
    const double* wd = w.data.data();
    double* yd = y.data.data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int o = 0; o < O; ++o) {
            const double* xr = xd + static_cast<size_t>(n) * I;
            const double* wr = wd + static_cast<size_t>(o) * I;
            double acc = b.data[o];
            for (int i = 0; i < I; ++i) acc += xr[i] * wr[i];
            yd[static_cast<size_t>(n) * O + o] = acc;
        }
    }
    return y;
}

Tensor linear_backward_input(const Tensor& dy, const Tensor& w) {
    const int N = dy.dim(0), O = dy.dim(1), I = w.dim(1);
    Tensor dx({N, I});
    const double* dyd = dy.data.data();
    const double* wd = w.data.data();
    double* dxd = dx.data.data();
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
        double* dxr = dxd + static_cast<size_t>(n) * I;
        for (int o = 0; o < O; ++o) {
            const double g = dyd[static_cast<size_t>(n) * O + o];
            const double* wr = wd + static_cast<size_t>(o) * I;
            for (int i = 0; i < I; ++i) dxr[i] += g * wr[i];
        }
    }
    return dx;
}

void linear_backward_params(const Tensor& dy, const Tensor& x, Tensor& dw, Tensor& db) {
    const int N = dy.dim(0), O = dy.dim(1), I = x.dim(1);
    dw = Tensor({O, I});
    db = Tensor({O});
    const double* dyd = dy.data.data();
    const double* xd = x.data.data();
    double* dwd = dw.data.data();
#pragma omp parallel for schedule(static)
    for (int o = 0; o < O; ++o) {
        double* dwr = dwd + static_cast<size_t>(o) * I;
        double dbacc = 0.0;
        for (int n = 0; n < N; ++n) {
            const double g = dyd[static_cast<size_t>(n) * O + o];
            dbacc += g;
            const double* xr = xd + static_cast<size_t>(n) * I;
            for (int i = 0; i < I; ++i) dwr[i] += g * xr[i];
        }
        db.data[o] = dbacc;
    }
}

Tensor dropout_forward(const Tensor& x, double rate, Rng& rng, Tensor& mask) {
    if (rate < 0.0 || rate >= 1.0) throw ShapeError("dropout: rate must be in [0,1)");
    mask = Tensor(x.shape);
    if (rate == 0.0) {
        // Consumes no randomness; the stream position is part of the
        // determinism contract.
        for (auto& v : mask.data) v = 1.0;
        return x;
    }
    const double scale = 1.0 / (1.0 - rate);
    for (auto& v : mask.data) v = (rng.uniform() >= rate) ? scale : 0.0;
    Tensor y(x.shape);
    const int64_t n = static_cast<int64_t>(x.numel());
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) y.data[i] = x.data[i] * mask.data[i];
    return y;
}

Tensor dropout_backward(const Tensor& dy, const Tensor& mask) {
    Tensor dx(dy.shape);
    const int64_t n = static_cast<int64_t>(dy.numel());
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) dx.data[i] = dy.data[i] * mask.data[i];
    return dx;
}

Tensor avg_downsample2x_forward(const Tensor& x) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(H % 2 == 0 && W % 2 == 0, "avg_downsample2x: odd spatial dims");
    Tensor y({N, C, H / 2, W / 2});
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < H / 2; ++oh)
                for (int ow = 0; ow < W / 2; ++ow)
                    y.at(n, c, oh, ow) = 0.25 * (x.at(n, c, 2 * oh, 2 * ow) + x.at(n, c, 2 * oh, 2 * ow + 1) +
                                                 x.at(n, c, 2 * oh + 1, 2 * ow) + x.at(n, c, 2 * oh + 1, 2 * ow + 1));
    return y;
}

Tensor avg_downsample2x_backward(const Tensor& dy) {
    const int N = dy.dim(0), C = dy.dim(1), OH = dy.dim(2), OW = dy.dim(3);
    Tensor dx({N, C, OH * 2, OW * 2});
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int ih = 0; ih < OH * 2; ++ih)
                for (int iw = 0; iw < OW * 2; ++iw)
                    dx.at(n, c, ih, iw) = 0.25 * dy.at(n, c, ih / 2, iw / 2);
    return dx;
}

Tensor nearest_upsample2x_forward(const Tensor& x) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor y({N, C, H * 2, W * 2});
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < H * 2; ++oh)
                for (int ow = 0; ow < W * 2; ++ow)
                    y.at(n, c, oh, ow) = x.at(n, c, oh / 2, ow / 2);
    return y;
}

Tensor nearest_upsample2x_backward(const Tensor& dy) {
    const int N = dy.dim(0), C = dy.dim(1), OH = dy.dim(2), OW = dy.dim(3);
    Tensor dx({N, C, OH / 2, OW / 2});
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int ih = 0; ih < OH / 2; ++ih)
                for (int iw = 0; iw < OW / 2; ++iw)
                    dx.at(n, c, ih, iw) = dy.at(n, c, 2 * ih, 2 * iw) + dy.at(n, c, 2 * ih, 2 * iw + 1) +
                                          dy.at(n, c, 2 * ih + 1, 2 * iw) + dy.at(n, c, 2 * ih + 1, 2 * iw + 1);
    return dx;
}

Tensor global_avg_pool_forward(const Tensor& x) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor y({N, C});
    const double invm = 1.0 / (static_cast<double>(H) * W);
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* xr = x.data.data() + ((static_cast<size_t>(n) * C + c) * H) * W;
            double acc = 0.0;
            for (int i = 0; i < H * W; ++i) acc += xr[i];
            y.at(n, c) = acc * invm;
        }
    return y;
}

Tensor global_avg_pool_backward(const Tensor& dy, int H, int W) {
    const int N = dy.dim(0), C = dy.dim(1);
    Tensor dx({N, C, H, W});
    const double invm = 1.0 / (static_cast<double>(H) * W);
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double g = dy.at(n, c) * invm;
            double* dxr = dx.data.data() + ((static_cast<size_t>(n) * C + c) * H) * W;
            for (int i = 0; i < H * W; ++i) dxr[i] = g;
        }
    return dx;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "add: shape mismatch");
    Tensor y(a.shape);
    const int64_t n = static_cast<int64_t>(a.numel());
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) y.data[i] = a.data[i] + b.data[i];
    return y;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const int N = a.dim(0), Ca = a.dim(1), H = a.dim(2), W = a.dim(3);
    const int Cb = b.dim(1);
    require(b.dim(0) == N && b.dim(2) == H && b.dim(3) == W, "concat_channels: spatial mismatch");
    Tensor y({N, Ca + Cb, H, W});
    const size_t plane = static_cast<size_t>(H) * W;
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
        double* dst = y.data.data() + static_cast<size_t>(n) * (Ca + Cb) * plane;
        const double* pa = a.data.data() + static_cast<size_t>(n) * Ca * plane;
        const double* pb = b.data.data() + static_cast<size_t>(n) * Cb * plane;
        std::copy(pa, pa + Ca * plane, dst);
        std::copy(pb, pb + Cb * plane, dst + Ca * plane);
    }
    return y;
}

void split_channels(const Tensor& d, int ca, Tensor& da, Tensor& db) {
    const int N = d.dim(0), C = d.dim(1), H = d.dim(2), W = d.dim(3);
    const int cb = C - ca;
    da = Tensor({N, ca, H, W});
    db = Tensor({N, cb, H, W});
    const size_t plane = static_cast<size_t>(H) * W;
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
        const double* src = d.data.data() + static_cast<size_t>(n) * C * plane;
        std::copy(src, src + ca * plane, da.data.data() + static_cast<size_t>(n) * ca * plane);
        std::copy(src + ca * plane, src + C * plane, db.data.data() + static_cast<size_t>(n) * cb * plane);
    }
}

} // namespace kernels
} // namespace protodiff
