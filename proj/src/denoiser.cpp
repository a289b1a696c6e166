#include "protodiff/denoiser.hpp"

#include <cmath>

#include "protodiff/errors.hpp"
#include "protodiff/kernels.hpp"

namespace protodiff {

namespace {

namespace K = kernels;
constexpr double kGnEps = 1e-5;
const ConvSpec kConv3{1, 1};
const ConvSpec kConv1x1{1, 0};

int effective_groups(int channels, int norm_groups) {
    int g = std::min(norm_groups, channels);
    while (channels % g != 0) --g;
    return g;
}

void check_finite(const Tensor& t, const std::string& path) {
    if (!t.all_finite()) throw NonFiniteError("non-finite activation at " + path);
}

Tensor init_conv(int co, int ci, int k, Rng& rng) {
    Tensor w({co, ci, k, k});
    const double bound = 1.0 / std::sqrt(static_cast<double>(ci) * k * k);
    for (auto& v : w.data) v = (2.0 * rng.uniform() - 1.0) * bound;
    return w;
}

Tensor init_vec(int n, int fan_in, Rng& rng) {
    Tensor b({n});
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : b.data) v = (2.0 * rng.uniform() - 1.0) * bound;
    return b;
}

Tensor init_linear(int out, int in, Rng& rng) {
    Tensor w({out, in});
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : w.data) v = (2.0 * rng.uniform() - 1.0) * bound;
    return w;
}

struct BlockSpec {
    std::string name; // "enc0.block1" / "dec1.block0"
    int in_ch, out_ch;
    bool has_skip_conv() const { return in_ch != out_ch; }
};

// Encoder blocks, then decoder blocks in forward order.
std::vector<BlockSpec> block_layout(const UNetConfig& cfg, bool encoder) {
    std::vector<BlockSpec> out;
    const int L = cfg.levels();
    if (encoder) {
        int prev = cfg.base_channels;
        for (int i = 0; i < L; ++i) {
            for (int b = 0; b < cfg.blocks_per_res; ++b) {
                const int in_ch = (b == 0) ? prev : cfg.channels_at(i);
                out.push_back({"enc" + std::to_string(i) + ".block" + std::to_string(b), in_ch,
                               cfg.channels_at(i)});
            }
            prev = cfg.channels_at(i);
        }
    } else {
        for (int i = L - 1; i >= 0; --i) {
            const int ci = cfg.channels_at(i);
            for (int b = 0; b < cfg.blocks_per_res; ++b)
                out.push_back({"dec" + std::to_string(i) + ".block" + std::to_string(b), 2 * ci, ci});
        }
    }
    return out;
}

void add_block_params(ParamStore& p, const BlockSpec& bs, int cond_hidden, Rng& rng) {
    p[bs.name + ".gn1.gamma"] = Tensor::full({bs.in_ch}, 1.0);
    p[bs.name + ".gn1.beta"] = Tensor({bs.in_ch});
    p[bs.name + ".conv1.weight"] = init_conv(bs.out_ch, bs.in_ch, 3, rng);
    p[bs.name + ".conv1.bias"] = init_vec(bs.out_ch, bs.in_ch * 9, rng);
    p[bs.name + ".cond.weight"] = init_linear(bs.out_ch, cond_hidden, rng);
    p[bs.name + ".cond.bias"] = init_vec(bs.out_ch, cond_hidden, rng);
    p[bs.name + ".gn2.gamma"] = Tensor::full({bs.out_ch}, 1.0);
    p[bs.name + ".gn2.beta"] = Tensor({bs.out_ch});
    p[bs.name + ".conv2.weight"] = init_conv(bs.out_ch, bs.out_ch, 3, rng);
    p[bs.name + ".conv2.bias"] = init_vec(bs.out_ch, bs.out_ch * 9, rng);
    if (bs.has_skip_conv()) {
        p[bs.name + ".skip.weight"] = init_conv(bs.out_ch, bs.in_ch, 1, rng);
        p[bs.name + ".skip.bias"] = init_vec(bs.out_ch, bs.in_ch, rng);
    }
}

} // namespace

void UNetConfig::validate() const {
    if (ch_mult.empty()) throw ConfigError("unet: ch_mult must be non-empty");
    if (blocks_per_res < 1) throw ConfigError("unet: blocks_per_res must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("unet: dropout_rate in [0,1)");
    if (time_dim % 2 != 0) throw ConfigError("unet: time_dim must be even");
    const int down = 1 << (levels() - 1);
    if (image_size % down != 0)
        throw ConfigError("unet: image_size " + std::to_string(image_size) +
                          " not divisible by 2^(levels-1) = " + std::to_string(down));
    for (int m : ch_mult)
        if (m < 1) throw ConfigError("unet: ch_mult entries must be >= 1");
}

UNet build_unet(const UNetConfig& cfg, uint64_t seed) {
    cfg.validate();
    UNet net;
    net.cfg = cfg;
    Rng rng(seed);
    ParamStore& p = net.params;

    p["stem.weight"] = init_conv(cfg.base_channels, cfg.in_channels, 3, rng);
    p["stem.bias"] = init_vec(cfg.base_channels, cfg.in_channels * 9, rng);

    p["cond_mlp.fc1.weight"] = init_linear(cfg.cond_hidden, cfg.cond_dim(), rng);
    p["cond_mlp.fc1.bias"] = init_vec(cfg.cond_hidden, cfg.cond_dim(), rng);
    p["cond_mlp.fc2.weight"] = init_linear(cfg.cond_hidden, cfg.cond_hidden, rng);
    p["cond_mlp.fc2.bias"] = init_vec(cfg.cond_hidden, cfg.cond_hidden, rng);

    for (const auto& bs : block_layout(cfg, true)) add_block_params(p, bs, cfg.cond_hidden, rng);
    for (const auto& bs : block_layout(cfg, false)) add_block_params(p, bs, cfg.cond_hidden, rng);

    for (int i = cfg.levels() - 1; i > 0; --i) {
        const std::string name = "up" + std::to_string(i);
        p[name + ".weight"] = init_conv(cfg.channels_at(i - 1), cfg.channels_at(i), 3, rng);
        p[name + ".bias"] = init_vec(cfg.channels_at(i - 1), cfg.channels_at(i) * 9, rng);
    }

    p["final.gn.gamma"] = Tensor::full({cfg.base_channels}, 1.0);
    p["final.gn.beta"] = Tensor({cfg.base_channels});
    p["final.conv.weight"] = Tensor({cfg.out_channels, cfg.base_channels, 3, 3}); // zero init
    p["final.conv.bias"] = Tensor({cfg.out_channels});
    return net;
}

struct UNetTrace {
    struct BlockTrace {
        Tensor x_in;
        Tensor gn1_m, gn1_v, a_gn1;
        Tensor s1;     // silu(a_gn1), conv1 input
        Tensor h_cond; // conv1 out + conditioning bias (gn2 input)
        Tensor gn2_m, gn2_v, a_gn2;
        Tensor s2;        // silu(a_gn2)
        Tensor drop_mask; // empty in eval mode
        Tensor drop_out;  // conv2 input
        int skip_index = -1; // decoder only: which stashed encoder output fed the concat
    };
    bool training = false;
    Tensor x;                    // network input
    Tensor z;                    // conditioning batch (N, cond_dim)
    Tensor fc1_out, fc1_silu;    // cond MLP intermediates
    Tensor cond_h;               // MLP output (N, cond_hidden)
    Tensor stem_out;
    std::vector<BlockTrace> enc_blocks;
    std::vector<Tensor> skip_values; // encoder block outputs, push order
    std::vector<BlockTrace> dec_blocks;
    std::vector<Tensor> up_inputs; // upsampled tensors (conv inputs), per up level L-1..1
    Tensor final_gn_in, final_gn_m, final_gn_v, final_gn_out, final_silu_out;
};

namespace {

// h[n,c,:,:] += proj[n,c]
Tensor add_channel_bias(const Tensor& h, const Tensor& proj) {
    Tensor y = h;
    const int N = h.dim(0), C = h.dim(1), HW = h.dim(2) * h.dim(3);
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double b = proj.at(n, c);
            double* row = y.data.data() + ((static_cast<size_t>(n) * C + c) * HW);
            for (int i = 0; i < HW; ++i) row[i] += b;
        }
    return y;
}

Tensor channel_bias_grad(const Tensor& dh) {
    const int N = dh.dim(0), C = dh.dim(1), HW = dh.dim(2) * dh.dim(3);
    Tensor g({N, C});
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* row = dh.data.data() + ((static_cast<size_t>(n) * C + c) * HW);
            double acc = 0.0;
            for (int i = 0; i < HW; ++i) acc += row[i];
            g.at(n, c) = acc;
        }
    return g;
}

Tensor block_forward(const UNet& net, const BlockSpec& bs, const Tensor& x, const Tensor& cond_h,
                     bool training, Rng* rng, UNetTrace::BlockTrace& tr) {
    const auto& P = net.params;
    const int g1 = effective_groups(bs.in_ch, net.cfg.norm_groups);
    const int g2 = effective_groups(bs.out_ch, net.cfg.norm_groups);
    tr.x_in = x;
    tr.a_gn1 = K::group_norm_forward(x, P.at(bs.name + ".gn1.gamma"), P.at(bs.name + ".gn1.beta"), g1,
                                     kGnEps, tr.gn1_m, tr.gn1_v);
    tr.s1 = K::silu_forward(tr.a_gn1);
    Tensor c1 = K::conv2d_forward(tr.s1, P.at(bs.name + ".conv1.weight"), P.at(bs.name + ".conv1.bias"), kConv3);
    Tensor proj = K::linear_forward(cond_h, P.at(bs.name + ".cond.weight"), P.at(bs.name + ".cond.bias"));
    tr.h_cond = add_channel_bias(c1, proj);
    check_finite(tr.h_cond, bs.name + ".conv1");
    tr.a_gn2 = K::group_norm_forward(tr.h_cond, P.at(bs.name + ".gn2.gamma"), P.at(bs.name + ".gn2.beta"),
                                     g2, kGnEps, tr.gn2_m, tr.gn2_v);
    tr.s2 = K::silu_forward(tr.a_gn2);
    if (training && net.cfg.dropout_rate > 0.0) {
        tr.drop_out = K::dropout_forward(tr.s2, net.cfg.dropout_rate, *rng, tr.drop_mask);
    } else {
        tr.drop_out = tr.s2;
    }
    Tensor c2 = K::conv2d_forward(tr.drop_out, P.at(bs.name + ".conv2.weight"), P.at(bs.name + ".conv2.bias"), kConv3);
    Tensor skip = bs.has_skip_conv()
                      ? K::conv2d_forward(x, P.at(bs.name + ".skip.weight"), P.at(bs.name + ".skip.bias"), kConv1x1)
                      : x;
    Tensor out = K::add(c2, skip);
    check_finite(out, bs.name);
    return out;
}

} // namespace

Tensor unet_forward(const UNet& net, const Tensor& x, const Tensor& z, bool training, Rng* rng,
                    std::shared_ptr<UNetTrace>* trace) {
    const UNetConfig& cfg = net.cfg;
    if (x.shape.size() != 4 || x.dim(1) != cfg.in_channels || x.dim(2) != cfg.image_size ||
        x.dim(3) != cfg.image_size)
        throw ShapeError("unet: input shape " + x.shape_str() + " does not match config (N," +
                         std::to_string(cfg.in_channels) + "," + std::to_string(cfg.image_size) + "," +
                         std::to_string(cfg.image_size) + ")");
    if (z.shape.size() != 2 || z.dim(0) != x.dim(0) || z.dim(1) != cfg.cond_dim())
        throw ShapeError("unet: conditioning shape " + z.shape_str() + " != (N," +
                         std::to_string(cfg.cond_dim()) + ")");
    if (training && cfg.dropout_rate > 0.0 && rng == nullptr)
        throw ConfigError("unet: training-mode dropout needs a generator");

    auto tr = std::make_shared<UNetTrace>();
    tr->training = training;
    tr->x = x;
    tr->z = z;
    const auto& P = net.params;

    tr->fc1_out = K::linear_forward(z, P.at("cond_mlp.fc1.weight"), P.at("cond_mlp.fc1.bias"));
    tr->fc1_silu = K::silu_forward(tr->fc1_out);
    tr->cond_h = K::linear_forward(tr->fc1_silu, P.at("cond_mlp.fc2.weight"), P.at("cond_mlp.fc2.bias"));
    check_finite(tr->cond_h, "cond_mlp");

    Tensor h = K::conv2d_forward(x, P.at("stem.weight"), P.at("stem.bias"), kConv3);
    tr->stem_out = h;
    check_finite(h, "stem");

    const auto enc = block_layout(cfg, true);
    const auto dec = block_layout(cfg, false);
    const int L = cfg.levels();

    size_t bi = 0;
    for (int i = 0; i < L; ++i) {
        for (int b = 0; b < cfg.blocks_per_res; ++b, ++bi) {
            UNetTrace::BlockTrace bt;
            h = block_forward(net, enc[bi], h, tr->cond_h, training, rng, bt);
            tr->enc_blocks.push_back(std::move(bt));
            tr->skip_values.push_back(h);
        }
        if (i < L - 1) h = K::avg_downsample2x_forward(h);
    }

    int skip_top = static_cast<int>(tr->skip_values.size());
    bi = 0;
    for (int i = L - 1; i >= 0; --i) {
        for (int b = 0; b < cfg.blocks_per_res; ++b, ++bi) {
            --skip_top;
            Tensor cat = K::concat_channels(h, tr->skip_values[skip_top]);
            UNetTrace::BlockTrace bt;
            bt.skip_index = skip_top;
            h = block_forward(net, dec[bi], cat, tr->cond_h, training, rng, bt);
            tr->dec_blocks.push_back(std::move(bt));
        }
        if (i > 0) {
            Tensor up = K::nearest_upsample2x_forward(h);
            tr->up_inputs.push_back(up);
            const std::string name = "up" + std::to_string(i);
            h = K::conv2d_forward(up, P.at(name + ".weight"), P.at(name + ".bias"), kConv3);
            check_finite(h, name);
        }
    }

    tr->final_gn_in = h;
    tr->final_gn_out = K::group_norm_forward(h, P.at("final.gn.gamma"), P.at("final.gn.beta"),
                                             effective_groups(cfg.base_channels, cfg.norm_groups),
                                             kGnEps, tr->final_gn_m, tr->final_gn_v);
    tr->final_silu_out = K::silu_forward(tr->final_gn_out);
    Tensor out = K::conv2d_forward(tr->final_silu_out, P.at("final.conv.weight"), P.at("final.conv.bias"), kConv3);
    check_finite(out, "final.conv");

    if (trace) *trace = std::move(tr);
    return out;
}

Tensor predict_noise(const UNet& net, const Tensor& xt, const Tensor& z) {
    return unet_forward(net, xt, z, /*training=*/false, nullptr, nullptr);
}

namespace {

// Full residual-block backward; returns dx and accumulates into dcond_h.
Tensor block_backward_full(const UNet& net, const BlockSpec& bs, const UNetTrace::BlockTrace& tr,
                           const Tensor& dout, const Tensor& cond_h, ParamStore& g, Tensor& dcond_h,
                           bool training) {
    const auto& P = net.params;
    const int g1 = effective_groups(bs.in_ch, net.cfg.norm_groups);
    const int g2 = effective_groups(bs.out_ch, net.cfg.norm_groups);

    g[bs.name + ".conv2.weight"] = Tensor(P.at(bs.name + ".conv2.weight").shape);
    g[bs.name + ".conv2.bias"] = Tensor(P.at(bs.name + ".conv2.bias").shape);
    K::conv2d_backward_params(dout, tr.drop_out, kConv3, g[bs.name + ".conv2.weight"],
                              g[bs.name + ".conv2.bias"]);
    Tensor dd = K::conv2d_backward_input(dout, P.at(bs.name + ".conv2.weight"), tr.drop_out.dim(2),
                                         tr.drop_out.dim(3), kConv3);
    Tensor ds2 = (training && net.cfg.dropout_rate > 0.0) ? K::dropout_backward(dd, tr.drop_mask)
                                                          : std::move(dd);
    Tensor da_gn2 = K::silu_backward(ds2, tr.a_gn2);
    Tensor dh_cond, dgn2_gamma, dgn2_beta;
    K::group_norm_backward(da_gn2, tr.h_cond, P.at(bs.name + ".gn2.gamma"), tr.gn2_m, tr.gn2_v, g2,
                           kGnEps, dh_cond, dgn2_gamma, dgn2_beta);
    g[bs.name + ".gn2.gamma"] = std::move(dgn2_gamma);
    g[bs.name + ".gn2.beta"] = std::move(dgn2_beta);

    Tensor dproj = channel_bias_grad(dh_cond);
    Tensor dcw, dcb;
    K::linear_backward_params(dproj, cond_h, dcw, dcb);
    g[bs.name + ".cond.weight"] = std::move(dcw);
    g[bs.name + ".cond.bias"] = std::move(dcb);
    Tensor dch = K::linear_backward_input(dproj, P.at(bs.name + ".cond.weight"));
    for (size_t i = 0; i < dcond_h.data.size(); ++i) dcond_h.data[i] += dch.data[i];

    g[bs.name + ".conv1.weight"] = Tensor(P.at(bs.name + ".conv1.weight").shape);
    g[bs.name + ".conv1.bias"] = Tensor(P.at(bs.name + ".conv1.bias").shape);
    K::conv2d_backward_params(dh_cond, tr.s1, kConv3, g[bs.name + ".conv1.weight"],
                              g[bs.name + ".conv1.bias"]);
    Tensor ds1 = K::conv2d_backward_input(dh_cond, P.at(bs.name + ".conv1.weight"), tr.s1.dim(2),
                                          tr.s1.dim(3), kConv3);
    Tensor da_gn1 = K::silu_backward(ds1, tr.a_gn1);
    Tensor dx_norm, dgn1_gamma, dgn1_beta;
    K::group_norm_backward(da_gn1, tr.x_in, P.at(bs.name + ".gn1.gamma"), tr.gn1_m, tr.gn1_v, g1,
                           kGnEps, dx_norm, dgn1_gamma, dgn1_beta);
    g[bs.name + ".gn1.gamma"] = std::move(dgn1_gamma);
    g[bs.name + ".gn1.beta"] = std::move(dgn1_beta);

    Tensor dx;
    if (bs.has_skip_conv()) {
        g[bs.name + ".skip.weight"] = Tensor(P.at(bs.name + ".skip.weight").shape);
        g[bs.name + ".skip.bias"] = Tensor(P.at(bs.name + ".skip.bias").shape);
        K::conv2d_backward_params(dout, tr.x_in, kConv1x1, g[bs.name + ".skip.weight"],
                                  g[bs.name + ".skip.bias"]);
        Tensor dskip = K::conv2d_backward_input(dout, P.at(bs.name + ".skip.weight"), tr.x_in.dim(2),
                                                tr.x_in.dim(3), kConv1x1);
        dx = K::add(dx_norm, dskip);
    } else {
        dx = K::add(dx_norm, dout);
    }
    return dx;
}

} // namespace

UNetGrads unet_backward(const UNet& net, const UNetTrace& tr, const Tensor& d_out) {
    const UNetConfig& cfg = net.cfg;
    const auto& P = net.params;
    const auto enc = block_layout(cfg, true);
    const auto dec = block_layout(cfg, false);
    const int L = cfg.levels();
    const int N = tr.x.dim(0);

    UNetGrads out;
    ParamStore& g = out.params;
    Tensor dcond_h({N, cfg.cond_hidden});

    // final head
    g["final.conv.weight"] = Tensor(P.at("final.conv.weight").shape);
    g["final.conv.bias"] = Tensor(P.at("final.conv.bias").shape);
    K::conv2d_backward_params(d_out, tr.final_silu_out, kConv3, g["final.conv.weight"],
                              g["final.conv.bias"]);
    Tensor dh = K::conv2d_backward_input(d_out, P.at("final.conv.weight"), tr.final_silu_out.dim(2),
                                         tr.final_silu_out.dim(3), kConv3);
    dh = K::silu_backward(dh, tr.final_gn_out);
    {
        Tensor dgn_in, dgamma, dbeta;
        K::group_norm_backward(dh, tr.final_gn_in, P.at("final.gn.gamma"), tr.final_gn_m, tr.final_gn_v,
                               effective_groups(cfg.base_channels, cfg.norm_groups), kGnEps, dgn_in,
                               dgamma, dbeta);
        g["final.gn.gamma"] = std::move(dgamma);
        g["final.gn.beta"] = std::move(dbeta);
        dh = std::move(dgn_in);
    }

    // decoder, reverse of forward order
    std::vector<Tensor> dskips(tr.skip_values.size());
    int up_idx = static_cast<int>(tr.up_inputs.size()) - 1;
    int dec_idx = static_cast<int>(tr.dec_blocks.size()) - 1;
    for (int i = 0; i < L; ++i) {
        if (i > 0) {
            const std::string name = "up" + std::to_string(i);
            g[name + ".weight"] = Tensor(P.at(name + ".weight").shape);
            g[name + ".bias"] = Tensor(P.at(name + ".bias").shape);
            const Tensor& up_in = tr.up_inputs[up_idx];
            K::conv2d_backward_params(dh, up_in, kConv3, g[name + ".weight"], g[name + ".bias"]);
            Tensor dup = K::conv2d_backward_input(dh, P.at(name + ".weight"), up_in.dim(2), up_in.dim(3), kConv3);
            dh = K::nearest_upsample2x_backward(dup);
            --up_idx;
        }
        for (int b = 0; b < cfg.blocks_per_res; ++b, --dec_idx) {
            const auto& bt = tr.dec_blocks[dec_idx];
            const auto& bs = dec[dec_idx];
            Tensor dcat = block_backward_full(net, bs, bt, dh, tr.cond_h, g, dcond_h, tr.training);
            Tensor dh_part, dskip_part;
            K::split_channels(dcat, bs.out_ch, dh_part, dskip_part);
            dskips[bt.skip_index] = std::move(dskip_part);
            dh = std::move(dh_part);
        }
    }

    // encoder, reverse of forward order
    int enc_idx = static_cast<int>(tr.enc_blocks.size()) - 1;
    for (int i = L - 1; i >= 0; --i) {
        if (i < L - 1) dh = K::avg_downsample2x_backward(dh);
        for (int b = 0; b < cfg.blocks_per_res; ++b, --enc_idx) {
            Tensor dtotal = K::add(dh, dskips[enc_idx]);
            dh = block_backward_full(net, enc[enc_idx], tr.enc_blocks[enc_idx], dtotal, tr.cond_h, g,
                                     dcond_h, tr.training);
        }
    }

    g["stem.weight"] = Tensor(P.at("stem.weight").shape);
    g["stem.bias"] = Tensor(P.at("stem.bias").shape);
    K::conv2d_backward_params(dh, tr.x, kConv3, g["stem.weight"], g["stem.bias"]);

    // conditioning MLP
    Tensor dfc2w, dfc2b;
    K::linear_backward_params(dcond_h, tr.fc1_silu, dfc2w, dfc2b);
    g["cond_mlp.fc2.weight"] = std::move(dfc2w);
    g["cond_mlp.fc2.bias"] = std::move(dfc2b);
    Tensor dfc1_silu = K::linear_backward_input(dcond_h, P.at("cond_mlp.fc2.weight"));
    Tensor dfc1 = K::silu_backward(dfc1_silu, tr.fc1_out);
    Tensor dfc1w, dfc1b;
    K::linear_backward_params(dfc1, tr.z, dfc1w, dfc1b);
    g["cond_mlp.fc1.weight"] = std::move(dfc1w);
    g["cond_mlp.fc1.bias"] = std::move(dfc1b);
    out.dz = K::linear_backward_input(dfc1, P.at("cond_mlp.fc1.weight"));
    return out;
}

} // namespace protodiff
