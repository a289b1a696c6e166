#include "protodiff/protolearn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "protodiff/checkpoint.hpp"
#include "protodiff/dataset.hpp"
#include "protodiff/errors.hpp"
#include "protodiff/kernels.hpp"
#include "protodiff/linalg.hpp"
#include "protodiff/optim.hpp"

namespace protodiff {

namespace {

namespace K = kernels;

Tensor init_conv(int co, int ci, int k, Rng& rng) {
    Tensor w({co, ci, k, k});
    const double bound = 1.0 / std::sqrt(static_cast<double>(ci) * k * k);
    for (auto& v : w.data) v = (2.0 * rng.uniform() - 1.0) * bound;
    return w;
}

Tensor init_bias(int co, int fan_in, Rng& rng) {
    Tensor b({co});
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

constexpr int kGnGroups = 8;
constexpr double kGnEps = 1e-5;

struct ResBlockSpec {
    std::string name;
    int in_ch, out_ch, stride;
    bool has_proj() const { return stride != 1 || in_ch != out_ch; }
};

std::vector<ResBlockSpec> resnet18_blocks() {
    std::vector<ResBlockSpec> blocks;
    const int chans[4] = {64, 128, 256, 512};
    int in_ch = 64;
    for (int s = 0; s < 4; ++s) {
        for (int b = 0; b < 2; ++b) {
            const int stride = (s > 0 && b == 0) ? 2 : 1;
            blocks.push_back({"s" + std::to_string(s) + "b" + std::to_string(b), in_ch, chans[s], stride});
            in_ch = chans[s];
        }
    }
    return blocks;
}

} // namespace

struct ExtractorTrace {
    Tensor input;
    // desk: conv activations and silu inputs
    std::vector<Tensor> conv_out; // pre-silu
    std::vector<Tensor> silu_out;
    // resnet18 per-block intermediates
    struct BlockTrace {
        Tensor x_in;
        Tensor a1, m1, v1, g1; // conv1 out, gn1 stats, gn1 out (silu input)
        Tensor s1;             // silu(g1)
        Tensor a2, m2, v2, g2; // conv2 out, gn2 stats, gn2 out
        Tensor sum;            // g2 + skip (silu input)
    };
    Tensor stem_a, stem_m, stem_v, stem_g;
    std::vector<BlockTrace> blocks;
    Tensor pooled; // gap output (N, C)
    int last_h = 0, last_w = 0;
};

FeatureExtractor build_extractor(const std::string& arch, int in_channels, int image_size, int dim,
                                 uint64_t seed) {
    FeatureExtractor fx;
    fx.arch = arch;
    fx.in_channels = in_channels;
    fx.image_size = image_size;
    fx.dim = dim;
    Rng rng(seed);
    if (arch == "desk") {
        const int chans[3] = {16, 32, 64};
        int ci = in_channels;
        for (int l = 0; l < 3; ++l) {
            const std::string p = "conv" + std::to_string(l + 1);
            fx.params[p + ".weight"] = init_conv(chans[l], ci, 3, rng);
            fx.params[p + ".bias"] = init_bias(chans[l], ci * 9, rng);
            ci = chans[l];
        }
        fx.params["head.weight"] = init_linear(dim, 64, rng);
        fx.params["head.bias"] = init_bias(dim, 64, rng);
    } else if (arch == "resnet18") {
        fx.params["stem.conv.weight"] = init_conv(64, in_channels, 3, rng);
        fx.params["stem.conv.bias"] = init_bias(64, in_channels * 9, rng);
        fx.params["stem.gn.gamma"] = Tensor::full({64}, 1.0);
        fx.params["stem.gn.beta"] = Tensor({64});
        for (const auto& b : resnet18_blocks()) {
            fx.params[b.name + ".conv1.weight"] = init_conv(b.out_ch, b.in_ch, 3, rng);
            fx.params[b.name + ".conv1.bias"] = init_bias(b.out_ch, b.in_ch * 9, rng);
            fx.params[b.name + ".gn1.gamma"] = Tensor::full({b.out_ch}, 1.0);
            fx.params[b.name + ".gn1.beta"] = Tensor({b.out_ch});
            fx.params[b.name + ".conv2.weight"] = init_conv(b.out_ch, b.out_ch, 3, rng);
            fx.params[b.name + ".conv2.bias"] = init_bias(b.out_ch, b.out_ch * 9, rng);
            fx.params[b.name + ".gn2.gamma"] = Tensor::full({b.out_ch}, 1.0);
            fx.params[b.name + ".gn2.beta"] = Tensor({b.out_ch});
            if (b.has_proj()) {
                fx.params[b.name + ".proj.weight"] = init_conv(b.out_ch, b.in_ch, 1, rng);
                fx.params[b.name + ".proj.bias"] = init_bias(b.out_ch, b.in_ch, rng);
            }
        }
        fx.params["head.weight"] = init_linear(dim, 512, rng);
        fx.params["head.bias"] = init_bias(dim, 512, rng);
    } else {
        throw ConfigError("unknown extractor arch: " + arch);
    }
    return fx;
}

Tensor extractor_forward(const FeatureExtractor& fx, const Tensor& images,
                         std::shared_ptr<ExtractorTrace>* trace) {
    if (images.shape.size() != 4 || images.dim(1) != fx.in_channels)
        throw ShapeError("extractor: expected (N," + std::to_string(fx.in_channels) + ",H,W), got " +
                         images.shape_str());
    auto tr = std::make_shared<ExtractorTrace>();
    tr->input = images;
    const auto& P = fx.params;
    Tensor h;

    if (fx.arch == "desk") {
        ConvSpec s2{2, 1};
        h = images;
        for (int l = 0; l < 3; ++l) {
            const std::string p = "conv" + std::to_string(l + 1);
            Tensor a = K::conv2d_forward(h, P.at(p + ".weight"), P.at(p + ".bias"), s2);
            tr->conv_out.push_back(a);
            h = K::silu_forward(a);
            tr->silu_out.push_back(h);
        }
    } else {
        ConvSpec s1{1, 1};
        tr->stem_a = K::conv2d_forward(images, P.at("stem.conv.weight"), P.at("stem.conv.bias"), s1);
        tr->stem_g = K::group_norm_forward(tr->stem_a, P.at("stem.gn.gamma"), P.at("stem.gn.beta"),
                                           kGnGroups, kGnEps, tr->stem_m, tr->stem_v);
        h = K::silu_forward(tr->stem_g);
        for (const auto& b : resnet18_blocks()) {
            ExtractorTrace::BlockTrace bt;
            bt.x_in = h;
            bt.a1 = K::conv2d_forward(h, P.at(b.name + ".conv1.weight"), P.at(b.name + ".conv1.bias"),
                                      ConvSpec{b.stride, 1});
            bt.g1 = K::group_norm_forward(bt.a1, P.at(b.name + ".gn1.gamma"), P.at(b.name + ".gn1.beta"),
                                          kGnGroups, kGnEps, bt.m1, bt.v1);
            bt.s1 = K::silu_forward(bt.g1);
            bt.a2 = K::conv2d_forward(bt.s1, P.at(b.name + ".conv2.weight"), P.at(b.name + ".conv2.bias"), s1);
            bt.g2 = K::group_norm_forward(bt.a2, P.at(b.name + ".gn2.gamma"), P.at(b.name + ".gn2.beta"),
                                          kGnGroups, kGnEps, bt.m2, bt.v2);
            Tensor skip = b.has_proj()
                              ? K::conv2d_forward(h, P.at(b.name + ".proj.weight"), P.at(b.name + ".proj.bias"),
                                                  ConvSpec{b.stride, 0})
                              : h;
            bt.sum = K::add(bt.g2, skip);
            h = K::silu_forward(bt.sum);
            tr->blocks.push_back(std::move(bt));
        }
    }

    tr->last_h = h.dim(2);
    tr->last_w = h.dim(3);
    tr->pooled = K::global_avg_pool_forward(h);
    Tensor features = K::linear_forward(tr->pooled, P.at("head.weight"), P.at("head.bias"));
    if (trace) *trace = std::move(tr);
    return features;
}

ParamStore extractor_backward(const FeatureExtractor& fx, const ExtractorTrace& tr,
                              const Tensor& dfeatures) {
    const auto& P = fx.params;
    ParamStore g;

    Tensor dpool = K::linear_backward_input(dfeatures, P.at("head.weight"));
    K::linear_backward_params(dfeatures, tr.pooled, g["head.weight"], g["head.bias"]);
    Tensor dh = K::global_avg_pool_backward(dpool, tr.last_h, tr.last_w);

    if (fx.arch == "desk") {
        ConvSpec s2{2, 1};
        for (int l = 2; l >= 0; --l) {
            const std::string p = "conv" + std::to_string(l + 1);
            Tensor da = K::silu_backward(dh, tr.conv_out[l]);
            const Tensor& in = (l == 0) ? tr.input : tr.silu_out[l - 1];
            g[p + ".weight"] = Tensor(P.at(p + ".weight").shape);
            g[p + ".bias"] = Tensor(P.at(p + ".bias").shape);
            K::conv2d_backward_params(da, in, s2, g[p + ".weight"], g[p + ".bias"]);
            dh = K::conv2d_backward_input(da, P.at(p + ".weight"), in.dim(2), in.dim(3), s2);
        }
    } else {
        ConvSpec s1{1, 1};
        const auto blocks = resnet18_blocks();
        for (int i = static_cast<int>(blocks.size()) - 1; i >= 0; --i) {
            const auto& b = blocks[i];
            const auto& bt = tr.blocks[i];
            Tensor dsum = K::silu_backward(dh, bt.sum);
            // dsum splits into the gn2 path and the skip path
            Tensor dg2 = dsum;
            Tensor da2, dgn2_gamma, dgn2_beta;
            K::group_norm_backward(dg2, bt.a2, P.at(b.name + ".gn2.gamma"), bt.m2, bt.v2, kGnGroups,
                                   kGnEps, da2, dgn2_gamma, dgn2_beta);
            g[b.name + ".gn2.gamma"] = dgn2_gamma;
            g[b.name + ".gn2.beta"] = dgn2_beta;
            g[b.name + ".conv2.weight"] = Tensor(P.at(b.name + ".conv2.weight").shape);
            g[b.name + ".conv2.bias"] = Tensor(P.at(b.name + ".conv2.bias").shape);
            K::conv2d_backward_params(da2, bt.s1, s1, g[b.name + ".conv2.weight"], g[b.name + ".conv2.bias"]);
            Tensor ds1 = K::conv2d_backward_input(da2, P.at(b.name + ".conv2.weight"), bt.s1.dim(2),
                                                  bt.s1.dim(3), s1);
            Tensor dg1 = K::silu_backward(ds1, bt.g1);
            Tensor da1, dgn1_gamma, dgn1_beta;
            K::group_norm_backward(dg1, bt.a1, P.at(b.name + ".gn1.gamma"), bt.m1, bt.v1, kGnGroups,
                                   kGnEps, da1, dgn1_gamma, dgn1_beta);
            g[b.name + ".gn1.gamma"] = dgn1_gamma;
            g[b.name + ".gn1.beta"] = dgn1_beta;
            ConvSpec c1{b.stride, 1};
            g[b.name + ".conv1.weight"] = Tensor(P.at(b.name + ".conv1.weight").shape);
            g[b.name + ".conv1.bias"] = Tensor(P.at(b.name + ".conv1.bias").shape);
            K::conv2d_backward_params(da1, bt.x_in, c1, g[b.name + ".conv1.weight"], g[b.name + ".conv1.bias"]);
            Tensor dx = K::conv2d_backward_input(da1, P.at(b.name + ".conv1.weight"), bt.x_in.dim(2),
                                                 bt.x_in.dim(3), c1);
            if (b.has_proj()) {
                ConvSpec cp{b.stride, 0};
                g[b.name + ".proj.weight"] = Tensor(P.at(b.name + ".proj.weight").shape);
                g[b.name + ".proj.bias"] = Tensor(P.at(b.name + ".proj.bias").shape);
                K::conv2d_backward_params(dsum, bt.x_in, cp, g[b.name + ".proj.weight"], g[b.name + ".proj.bias"]);
                Tensor dskip = K::conv2d_backward_input(dsum, P.at(b.name + ".proj.weight"), bt.x_in.dim(2),
                                                        bt.x_in.dim(3), cp);
                dx = K::add(dx, dskip);
            } else {
                dx = K::add(dx, dsum);
            }
            dh = std::move(dx);
        }
        Tensor dstem_g = K::silu_backward(dh, tr.stem_g);
        Tensor dstem_a, dsg, dsb;
        K::group_norm_backward(dstem_g, tr.stem_a, P.at("stem.gn.gamma"), tr.stem_m, tr.stem_v,
                               kGnGroups, kGnEps, dstem_a, dsg, dsb);
        g["stem.gn.gamma"] = dsg;
        g["stem.gn.beta"] = dsb;
        g["stem.conv.weight"] = Tensor(P.at("stem.conv.weight").shape);
        g["stem.conv.bias"] = Tensor(P.at("stem.conv.bias").shape);
        K::conv2d_backward_params(dstem_a, tr.input, s1, g["stem.conv.weight"], g["stem.conv.bias"]);
    }
    return g;
}

// ---------------------------------------------------------------------------
// prototype loss
// ---------------------------------------------------------------------------

namespace {

void check_features(std::span<const double> f, const Codebook& cb) {
    if (static_cast<int>(f.size()) != cb.dim)
        throw ShapeError("features length " + std::to_string(f.size()) + " != codebook dim " +
                         std::to_string(cb.dim));
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

std::vector<double> all_sq_dists(std::span<const double> f, const Codebook& cb) {
    std::vector<double> d(static_cast<size_t>(cb.C) * cb.K);
    for (int i = 0; i < cb.C; ++i)
        for (int j = 0; j < cb.K; ++j) d[static_cast<size_t>(i) * cb.K + j] = sq_dist(f, cb.prototype(i, j));
    return d;
}

} // namespace

int assign_class(std::span<const double> features, const Codebook& codebook) {
    check_features(features, codebook);
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int i = 0; i < codebook.C; ++i)
        for (int j = 0; j < codebook.K; ++j) {
            const double d = sq_dist(features, codebook.prototype(i, j));
            if (d < best_d) {
                best_d = d;
                best = i;
            }
        }
    return best;
}

std::vector<double> proto_probabilities(std::span<const double> features, const Codebook& codebook,
                                        double gamma) {
    check_features(features, codebook);
    if (!(gamma > 0.0)) throw ConfigError("proto_probabilities: gamma must be > 0");
    auto d = all_sq_dists(features, codebook);
    double max_logit = -std::numeric_limits<double>::infinity();
    for (double di : d) max_logit = std::max(max_logit, -gamma * di);
    double sum = 0.0;
    std::vector<double> p(d.size());
    for (size_t i = 0; i < d.size(); ++i) {
        p[i] = std::exp(-gamma * d[i] - max_logit);
        sum += p[i];
    }
    for (auto& v : p) v /= sum;
    return p;
}

double cpl_loss(std::span<const double> features, int label, const Codebook& codebook, double gamma,
                double lambda) {
    check_features(features, codebook);
    if (label < 0 || label >= codebook.C)
        throw ShapeError("cpl_loss: label " + std::to_string(label) + " out of range");
    auto d = all_sq_dists(features, codebook);
    double max_logit = -std::numeric_limits<double>::infinity();
    for (double di : d) max_logit = std::max(max_logit, -gamma * di);
    double S = 0.0, Sy = 0.0, dmin = std::numeric_limits<double>::infinity();
    for (int i = 0; i < codebook.C; ++i)
        for (int j = 0; j < codebook.K; ++j) {
            const double w = std::exp(-gamma * d[static_cast<size_t>(i) * codebook.K + j] - max_logit);
            S += w;
            if (i == label) Sy += w;
            dmin = std::min(dmin, d[static_cast<size_t>(i) * codebook.K + j]);
        }
    return std::log(S) - std::log(Sy) + lambda * dmin;
}

double cpl_loss_backward(std::span<const double> features, int label, const Codebook& codebook,
                         double gamma, double lambda, std::span<double> dfeatures,
                         Tensor& dprototypes, double scale) {
    check_features(features, codebook);
    if (label < 0 || label >= codebook.C)
        throw ShapeError("cpl_loss_backward: label out of range");
    const int C = codebook.C, Kp = codebook.K, dim = codebook.dim;
    auto d = all_sq_dists(features, codebook);

    double max_logit = -std::numeric_limits<double>::infinity();
    for (double di : d) max_logit = std::max(max_logit, -gamma * di);
    double S = 0.0, Sy = 0.0;
    std::vector<double> w(d.size());
    int ci = 0, cj = 0;
    double dmin = std::numeric_limits<double>::infinity();
    for (int i = 0; i < C; ++i)
        for (int j = 0; j < Kp; ++j) {
            const size_t k = static_cast<size_t>(i) * Kp + j;
            w[k] = std::exp(-gamma * d[k] - max_logit);
            S += w[k];
            if (i == label) Sy += w[k];
            if (d[k] < dmin) {
                dmin = d[k];
                ci = i;
                cj = j;
            }
        }
    const double loss = std::log(S) - std::log(Sy) + lambda * dmin;

    for (int i = 0; i < C; ++i)
        for (int j = 0; j < Kp; ++j) {
            const size_t k = static_cast<size_t>(i) * Kp + j;
            const double p = w[k] / S;
            const double q = (i == label) ? w[k] / Sy : 0.0;
            // L1 = log S - log Sy; dL1/dlogit = p - [i==label] q; logit = -gamma d
            double dl_dd = -gamma * (p - q);
            if (i == ci && j == cj) dl_dd += lambda;
            auto e = codebook.prototype(i, j);
            double* dp = dprototypes.data.data() + (static_cast<size_t>(i) * Kp + j) * dim;
            for (int m = 0; m < dim; ++m) {
                const double diff = features[m] - e[m];
                dfeatures[m] += scale * dl_dd * 2.0 * diff;
                dp[m] += scale * dl_dd * -2.0 * diff;
            }
        }
    return loss;
}

CplBatchGradients cpl_loss_gradients(const Tensor& images, const std::vector<int>& labels,
                                     const FeatureExtractor& extractor, const Codebook& codebook,
                                     const ProtoTrainConfig& config) {
    const int N = images.dim(0);
    if (N == 0) throw ShapeError("cpl_loss_gradients: empty batch");
    if (static_cast<int>(labels.size()) != N) throw ShapeError("cpl_loss_gradients: label count mismatch");

    std::shared_ptr<ExtractorTrace> trace;
    Tensor features = extractor_forward(extractor, images, &trace);

    CplBatchGradients out;
    out.prototype_grads = Tensor(codebook.prototypes.shape);
    Tensor dfeatures({N, codebook.dim});
    const double scale = 1.0 / static_cast<double>(N);
    double total = 0.0;
    for (int n = 0; n < N; ++n) {
        std::span<const double> f{features.data.data() + static_cast<size_t>(n) * codebook.dim,
                                  static_cast<size_t>(codebook.dim)};
        std::span<double> df{dfeatures.data.data() + static_cast<size_t>(n) * codebook.dim,
                             static_cast<size_t>(codebook.dim)};
        total += cpl_loss_backward(f, labels[n], codebook, config.gamma, config.lambda, df,
                                   out.prototype_grads, scale);
    }
    out.mean_loss = total * scale;
    out.extractor_grads = extractor_backward(extractor, *trace, dfeatures);
    return out;
}

// ---------------------------------------------------------------------------
// Stage I training
// ---------------------------------------------------------------------------

Tensor extract_features(const FeatureExtractor& fx, const Tensor& images, int batch) {
    const int N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    Tensor features({N, fx.dim});
    for (int start = 0; start < N; start += batch) {
        const int nb = std::min(batch, N - start);
        Tensor chunk({nb, C, H, W});
        std::copy(images.data.begin() + static_cast<size_t>(start) * C * H * W,
                  images.data.begin() + static_cast<size_t>(start + nb) * C * H * W, chunk.data.begin());
        Tensor f = extractor_forward(fx, chunk, nullptr);
        std::copy(f.data.begin(), f.data.end(),
                  features.data.begin() + static_cast<size_t>(start) * fx.dim);
    }
    return features;
}

double classification_accuracy(const FeatureExtractor& fx, const Codebook& codebook,
                               const LabeledDataset& dataset) {
    Tensor features = extract_features(fx, dataset.images);
    const int N = dataset.images.dim(0);
    int correct = 0;
    for (int n = 0; n < N; ++n) {
        std::span<const double> f{features.data.data() + static_cast<size_t>(n) * fx.dim,
                                  static_cast<size_t>(fx.dim)};
        if (assign_class(f, codebook) == dataset.labels[n]) ++correct;
    }
    return static_cast<double>(correct) / N;
}

ProtoArtifacts train_prototypes(const LabeledDataset& dataset, const ProtoTrainConfig& config) {
    const int N = dataset.images.dim(0);
    const int C = dataset.num_classes;
    if (!(config.gamma > 0.0) || config.lambda < 0.0)
        throw ConfigError("proto config: gamma > 0 and lambda >= 0 required");

    std::vector<bool> seen(C, false);
    for (int l : dataset.labels) {
        if (l < 0 || l >= C) throw ConfigError("dataset label out of range");
        seen[l] = true;
    }
    for (int c = 0; c < C; ++c)
        if (!seen[c]) throw ConfigError("dataset missing class " + std::to_string(c));

    Rng master(config.seed);
    const uint64_t fx_seed = master.next_u64();

    ProtoArtifacts art;
    art.config = config;
    art.extractor = build_extractor(config.arch, dataset.images.dim(1), dataset.images.dim(2),
                                    config.dim, fx_seed);
    art.codebook.C = C;
    art.codebook.K = config.prototypes_per_class;
    art.codebook.dim = config.dim;
    art.codebook.prototypes = Tensor({C, art.codebook.K, config.dim});
    for (auto& v : art.codebook.prototypes.data) v = config.proto_init_scale * master.normal();

    AdamW opt_fx;
    opt_fx.lr = config.learning_rate;
    opt_fx.init(art.extractor.params);
    ParamStore proto_store;
    proto_store["prototypes"] = art.codebook.prototypes;
    AdamW opt_proto;
    opt_proto.lr = config.learning_rate;
    opt_proto.init(proto_store);

    std::vector<int> order(N);
    std::iota(order.begin(), order.end(), 0);
    const int Cc = dataset.images.dim(1), H = dataset.images.dim(2), W = dataset.images.dim(3);
    const size_t img_sz = static_cast<size_t>(Cc) * H * W;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        // Fisher-Yates off the master stream
        for (int i = N - 1; i > 0; --i) {
            const int j = static_cast<int>(master.uniform_int(static_cast<uint64_t>(i) + 1));
            std::swap(order[i], order[j]);
        }
        for (int start = 0; start < N; start += config.batch_size) {
            const int nb = std::min(config.batch_size, N - start);
            Tensor batch({nb, Cc, H, W});
            std::vector<int> labels(nb);
            for (int k = 0; k < nb; ++k) {
                const int idx = order[start + k];
                std::copy(dataset.images.data.begin() + idx * img_sz,
                          dataset.images.data.begin() + (idx + 1) * img_sz,
                          batch.data.begin() + k * img_sz);
                labels[k] = dataset.labels[idx];
            }
            auto grads = cpl_loss_gradients(batch, labels, art.extractor, art.codebook, config);
            if (!std::isfinite(grads.mean_loss))
                throw NonFiniteError("proto training diverged: non-finite loss at epoch " +
                                     std::to_string(epoch) + ", batch offset " + std::to_string(start));
            opt_fx.step(art.extractor.params, grads.extractor_grads);
            ParamStore pg;
            pg["prototypes"] = std::move(grads.prototype_grads);
            proto_store["prototypes"] = std::move(art.codebook.prototypes);
            opt_proto.step(proto_store, pg);
            art.codebook.prototypes = std::move(proto_store["prototypes"]);
        }
        art.accuracy_history.push_back(classification_accuracy(art.extractor, art.codebook, dataset));
    }
    return art;
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

PcaResult pca_project(const Tensor& features, int out_dim) {
    const int N = features.dim(0), dim = features.dim(1);
    if (out_dim < 1 || out_dim > 3) throw ConfigError("pca_project: out_dim must be in {1,2,3}");
    if (N < out_dim) throw ShapeError("pca_project: need N >= out_dim");

    std::vector<double> mean(dim, 0.0);
    for (int n = 0; n < N; ++n)
        for (int i = 0; i < dim; ++i) mean[i] += features.at(n, i);
    for (auto& v : mean) v /= N;

    std::vector<double> cov(static_cast<size_t>(dim) * dim, 0.0);
    for (int n = 0; n < N; ++n)
        for (int i = 0; i < dim; ++i) {
            const double xi = features.at(n, i) - mean[i];
            for (int j = i; j < dim; ++j)
                cov[static_cast<size_t>(i) * dim + j] += xi * (features.at(n, j) - mean[j]);
        }
    const double denom = (N > 1) ? (N - 1) : 1;
    for (int i = 0; i < dim; ++i)
        for (int j = i; j < dim; ++j) {
            cov[static_cast<size_t>(i) * dim + j] /= denom;
            cov[static_cast<size_t>(j) * dim + i] = cov[static_cast<size_t>(i) * dim + j];
        }

    auto eig = jacobi_eigen(cov, dim);

    PcaResult res;
    res.mean = mean;
    res.eigenvalues = eig.eigenvalues;
    double total = 0.0;
    for (double l : eig.eigenvalues) total += std::max(l, 0.0);
    const double lmax = eig.eigenvalues.empty() ? 0.0 : std::max(eig.eigenvalues[0], 0.0);
    int rank = 0;
    for (double l : eig.eigenvalues)
        if (l > lmax * 1e-10 && l > 0.0) ++rank;
    res.n_components = std::min(out_dim, std::max(rank, 0));
    res.rank_deficient = res.n_components < out_dim;
    if (res.n_components == 0) {
        // All-constant data: still return the leading eigenvector so callers
        // get a usable (degenerate) projection.
        res.n_components = std::min(out_dim, dim);
        res.rank_deficient = true;
    }

    const int k = res.n_components;
    res.basis = Tensor({k, dim});
    for (int c = 0; c < k; ++c) {
        int arg = 0;
        double best = -1.0;
        for (int i = 0; i < dim; ++i) {
            const double m = std::abs(eig.eigenvectors[static_cast<size_t>(i) * dim + c]);
            if (m > best) {
                best = m;
                arg = i;
            }
        }
        const double sign = (eig.eigenvectors[static_cast<size_t>(arg) * dim + c] < 0.0) ? -1.0 : 1.0;
        for (int i = 0; i < dim; ++i)
            res.basis.at(c, i) = sign * eig.eigenvectors[static_cast<size_t>(i) * dim + c];
        res.explained_ratio.push_back(total > 0.0 ? std::max(res.eigenvalues[c], 0.0) / total : 0.0);
    }

    res.coords = Tensor({N, k});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < k; ++c) {
            double s = 0.0;
            for (int i = 0; i < dim; ++i) s += (features.at(n, i) - mean[i]) * res.basis.at(c, i);
            res.coords.at(n, c) = s;
        }
    return res;
}

std::vector<double> PcaResult::project(std::span<const double> point) const {
    std::vector<double> out(n_components, 0.0);
    for (int c = 0; c < n_components; ++c)
        for (size_t i = 0; i < mean.size(); ++i)
            out[c] += (point[i] - mean[i]) * basis.at(c, static_cast<int>(i));
    return out;
}

// ---------------------------------------------------------------------------
// artifact io and geometry helpers
// ---------------------------------------------------------------------------

std::string extractor_id(const FeatureExtractor& fx) {
    std::string bytes = fx.arch + "|" + std::to_string(fx.dim) + "|" + std::to_string(fx.image_size);
    for (const auto& [key, t] : fx.params) {
        bytes += key;
        const char* raw = reinterpret_cast<const char*>(t.data.data());
        bytes.append(raw, raw + t.data.size() * sizeof(double));
    }
    return fnv1a_hex(bytes);
}

void save_proto_artifacts(const std::string& path, const ProtoArtifacts& art,
                          const std::string& config_hash) {
    TensorFile tf;
    tf.header["kind"] = "proto-artifacts";
    tf.header["arch"] = art.extractor.arch;
    tf.header["in_channels"] = art.extractor.in_channels;
    tf.header["image_size"] = art.extractor.image_size;
    tf.header["dim"] = art.extractor.dim;
    tf.header["C"] = art.codebook.C;
    tf.header["K"] = art.codebook.K;
    tf.header["gamma"] = art.config.gamma;
    tf.header["lambda"] = art.config.lambda;
    tf.header["accuracy_history"] = art.accuracy_history;
    tf.header["config_hash"] = config_hash;
    tf.header["extractor_id"] = extractor_id(art.extractor);
    for (const auto& [key, t] : art.extractor.params) tf.tensors["extractor." + key] = t;
    tf.tensors["codebook.prototypes"] = art.codebook.prototypes;
    write_tensor_file(path, tf);
}

ProtoArtifacts load_proto_artifacts(const std::string& path) {
    TensorFile tf = read_tensor_file(path);
    if (tf.header.value("kind", "") != "proto-artifacts")
        throw IoError("not a proto-artifacts file: " + path);
    ProtoArtifacts art;
    art.extractor.arch = tf.header.at("arch");
    art.extractor.in_channels = tf.header.at("in_channels");
    art.extractor.image_size = tf.header.at("image_size");
    art.extractor.dim = tf.header.at("dim");
    art.codebook.C = tf.header.at("C");
    art.codebook.K = tf.header.at("K");
    art.codebook.dim = art.extractor.dim;
    art.config.gamma = tf.header.at("gamma");
    art.config.lambda = tf.header.at("lambda");
    art.config.dim = art.extractor.dim;
    art.accuracy_history = tf.header.at("accuracy_history").get<std::vector<double>>();
    for (const auto& [name, t] : tf.tensors) {
        if (name.rfind("extractor.", 0) == 0) art.extractor.params[name.substr(10)] = t;
    }
    art.codebook.prototypes = tf.tensors.at("codebook.prototypes");
    return art;
}

bool inside_convex_hull(double px, double py, const std::vector<std::array<double, 2>>& cloud) {
    if (cloud.size() < 3) return false;
    // Andrew monotone chain.
    std::vector<std::array<double, 2>> pts = cloud;
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    if (pts.size() < 3) return false;
    auto cross = [](const std::array<double, 2>& o, const std::array<double, 2>& a,
                    const std::array<double, 2>& b) {
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    };
    std::vector<std::array<double, 2>> hull(2 * pts.size());
    size_t k = 0;
    for (const auto& p : pts) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
        hull[k++] = p;
    }
    const size_t lower = k + 1;
    for (auto it = pts.rbegin(); it != pts.rend(); ++it) {
        while (k >= lower && cross(hull[k - 2], hull[k - 1], *it) <= 0) --k;
        hull[k++] = *it;
    }
    hull.resize(k - 1);
    if (hull.size() < 3) return false;

    double scale = 1e-12;
    for (const auto& p : hull) scale = std::max({scale, std::abs(p[0]), std::abs(p[1])});
    const double tol = 1e-9 * scale;
    for (size_t i = 0; i < hull.size(); ++i) {
        const auto& a = hull[i];
        const auto& b = hull[(i + 1) % hull.size()];
        if (cross(a, b, {px, py}) < -tol) return false;
    }
    return true;
}

} // namespace protodiff
