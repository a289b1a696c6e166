#include <doctest.h>

#include <cmath>

#include "protodiff/dataset.hpp"
#include "protodiff/errors.hpp"
#include "protodiff/protolearn.hpp"
#include "test_util.hpp"

using namespace protodiff;
using namespace testutil;

namespace {

Codebook make_codebook(std::vector<std::vector<double>> protos) {
    Codebook cb;
    cb.C = static_cast<int>(protos.size());
    cb.K = 1;
    cb.dim = static_cast<int>(protos[0].size());
    cb.prototypes = Tensor({cb.C, 1, cb.dim});
    for (int i = 0; i < cb.C; ++i)
        for (int k = 0; k < cb.dim; ++k) cb.prototypes.data[i * cb.dim + k] = protos[i][k];
    return cb;
}

} // namespace

TEST_CASE("assign_class picks the nearest prototype, ties to lowest class") {
    Codebook cb = make_codebook({{1, 0}, {0, 1}});
    const double f1[2] = {0.9, 0.1};
    CHECK(assign_class({f1, 2}, cb) == 0); // squared distances 0.02 vs 1.62
    const double f2[2] = {0.0, 1.0};
    CHECK(assign_class({f2, 2}, cb) == 1); // exactly on e_1
    const double f3[2] = {0.5, 0.5};
    CHECK(assign_class({f3, 2}, cb) == 0); // equidistant -> lowest class

    const double bad[3] = {0, 0, 0};
    CHECK_THROWS_AS(assign_class({bad, 3}, cb), ShapeError);
}

TEST_CASE("assign_class agrees with exhaustive argmin oracle") {
    Rng rng(55);
    for (int trial = 0; trial < 40; ++trial) {
        const int C = 2 + static_cast<int>(rng.uniform_int(5));
        const int K = 1 + static_cast<int>(rng.uniform_int(3));
        const int dim = 2 + static_cast<int>(rng.uniform_int(6));
        Codebook cb;
        cb.C = C;
        cb.K = K;
        cb.dim = dim;
        cb.prototypes = Tensor({C, K, dim});
        for (auto& v : cb.prototypes.data) v = rng.normal();
        std::vector<double> f(dim);
        for (auto& v : f) v = rng.normal();

        // brute force
        int best = 0;
        double best_d = 1e300;
        for (int i = 0; i < C; ++i)
            for (int j = 0; j < K; ++j) {
                double d = 0.0;
                auto p = cb.prototype(i, j);
                for (int k = 0; k < dim; ++k) d += (f[k] - p[k]) * (f[k] - p[k]);
                if (d < best_d) {
                    best_d = d;
                    best = i;
                }
            }
        CHECK(assign_class(f, cb) == best);
    }
}

TEST_CASE("proto_probabilities values and invariants") {
    Codebook cb = make_codebook({{0, 0}, {1, 0}});
    const double f[2] = {0, 0};
    auto p = proto_probabilities({f, 2}, cb, 1.0);
    CHECK(p[0] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-9)); // 0.731059
    CHECK(p[1] == doctest::Approx(std::exp(-1.0) / (1.0 + std::exp(-1.0))).epsilon(1e-9));
    CHECK(p[0] == doctest::Approx(0.731059).epsilon(1e-5));

    SUBCASE("identical prototypes -> uniform") {
        Codebook same = make_codebook({{0.3, 0.4}, {0.3, 0.4}, {0.3, 0.4}});
        const double g[2] = {2.0, -1.0};
        auto q = proto_probabilities({g, 2}, same, 2.5);
        for (double v : q) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    }
    SUBCASE("large gamma concentrates on the nearest prototype") {
        Codebook cb2 = make_codebook({{0, 0}, {1, 0}, {0, 2}});
        const double g[2] = {0.2, 0.1};
        auto q = proto_probabilities({g, 2}, cb2, 1e6);
        const int nearest = assign_class({g, 2}, cb2);
        CHECK(q[nearest] >= 1.0 - 1e-6);
    }
    SUBCASE("sums to one over random codebooks") {
        Rng rng(66);
        for (int trial = 0; trial < 60; ++trial) {
            const int C = 1 + static_cast<int>(rng.uniform_int(6));
            const int K = 1 + static_cast<int>(rng.uniform_int(3));
            const int dim = 1 + static_cast<int>(rng.uniform_int(8));
            Codebook r;
            r.C = C;
            r.K = K;
            r.dim = dim;
            r.prototypes = Tensor({C, K, dim});
            for (auto& v : r.prototypes.data) v = rng.normal() * 10.0;
            std::vector<double> f2(dim);
            for (auto& v : f2) v = rng.normal() * 10.0;
            const double gamma = 0.01 + rng.uniform() * 5.0;
            auto q = proto_probabilities(f2, r, gamma);
            double sum = 0.0;
            for (double v : q) sum += v;
            CHECK(std::abs(sum - 1.0) < 1e-9);

            // argmax of class-marginal probabilities == assign_class
            std::vector<double> marg(C, 0.0);
            for (int i = 0; i < C; ++i)
                for (int j = 0; j < K; ++j) marg[i] += q[i * K + j];
            int am = 0;
            for (int i = 1; i < C; ++i)
                if (marg[i] > marg[am]) am = i;
            CHECK(am == assign_class(f2, r));
        }
    }
    CHECK_THROWS_AS(proto_probabilities({f, 2}, cb, 0.0), ConfigError);
}

TEST_CASE("cpl_loss values") {
    SUBCASE("perfect fit with far competitors") {
        Codebook cb = make_codebook({{0, 0, 0, 0}, {10, 10, 10, 10}});
        const double f[4] = {0, 0, 0, 0};
        CHECK(cpl_loss({f, 4}, 0, cb, 1.0, 0.0) == doctest::Approx(0.0).epsilon(1e-6));
    }
    SUBCASE("two-prototype value") {
        Codebook cb = make_codebook({{0, 0}, {1, 0}});
        const double f[2] = {0, 0};
        CHECK(cpl_loss({f, 2}, 0, cb, 1.0, 0.0) == doctest::Approx(-std::log(0.731059)).epsilon(1e-5));
        CHECK(cpl_loss({f, 2}, 0, cb, 1.0, 0.0) == doctest::Approx(0.313262).epsilon(1e-4));
        // regularizer is zero when features sit on the closest prototype
        CHECK(cpl_loss({f, 2}, 0, cb, 1.0, 0.5) == doctest::Approx(cpl_loss({f, 2}, 0, cb, 1.0, 0.0)));
    }
    SUBCASE("monotone in the distance to the label prototype") {
        double prev = -1.0;
        for (double d : {0.0, 0.2, 0.5, 0.9}) {
            Codebook cb = make_codebook({{0, 0}, {5, 0}});
            const double f[2] = {d, 0};
            const double l = cpl_loss({f, 2}, 0, cb, 1.0, 0.0);
            CHECK(l > prev);
            prev = l;
        }
    }
    SUBCASE("invalid label") {
        Codebook cb = make_codebook({{0, 0}});
        const double f[2] = {0, 0};
        CHECK_THROWS_AS(cpl_loss({f, 2}, 1, cb, 1.0, 0.0), ShapeError);
    }
}

TEST_CASE("cpl prototype gradients match central finite differences") {
    Rng rng(77);
    Codebook cb;
    cb.C = 3;
    cb.K = 2;
    cb.dim = 4;
    cb.prototypes = Tensor({3, 2, 4});
    for (auto& v : cb.prototypes.data) v = rng.normal();
    std::vector<double> f(4);
    for (auto& v : f) v = rng.normal();
    const int label = 1;
    const double gamma = 0.8, lambda = 0.3;

    std::vector<double> df(4, 0.0);
    Tensor dproto({3, 2, 4});
    cpl_loss_backward(f, label, cb, gamma, lambda, df, dproto, 1.0);

    auto loss_fn = [&]() { return cpl_loss(f, label, cb, gamma, lambda); };
    for (size_t i = 0; i < cb.prototypes.numel(); ++i) {
        const double num = central_diff(cb.prototypes.data[i], loss_fn, 1e-4);
        CHECK(grad_close(dproto.data[i], num, 1e-4, 1e-8));
    }
    for (int k = 0; k < 4; ++k) {
        const double num = central_diff(f[k], loss_fn, 1e-4);
        CHECK(grad_close(df[k], num, 1e-4, 1e-8));
    }
}

TEST_CASE("vanishing softmax tail gives vanishing gradient") {
    Codebook cb = make_codebook({{0, 0}, {20, 0}}); // distance^2 = 400 from origin
    const double f[2] = {0, 0};
    std::vector<double> df(2, 0.0);
    Tensor dproto({2, 1, 2});
    cpl_loss_backward({f, 2}, 0, cb, 1.0, 0.0, df, dproto, 1.0);
    for (int k = 0; k < 2; ++k) CHECK(std::abs(dproto.data[2 + k]) < 1e-30);
}

TEST_CASE("batch gradient is invariant under sample duplication") {
    Rng rng(88);
    SyntheticSpec spec;
    spec.classes = 2;
    spec.n_per_class = 4;
    spec.image_size = 8;
    spec.seed = 3;
    LabeledDataset ds = generate_hue_shapes(spec);

    FeatureExtractor fx = build_extractor("desk", 3, 8, 6, 2024);
    Codebook cb;
    cb.C = 2;
    cb.K = 1;
    cb.dim = 6;
    cb.prototypes = Tensor({2, 1, 6});
    for (auto& v : cb.prototypes.data) v = 0.1 * rng.normal();
    ProtoTrainConfig cfg;
    cfg.gamma = 1.0;
    cfg.lambda = 0.01;
    cfg.dim = 6;

    auto g1 = cpl_loss_gradients(ds.images, ds.labels, fx, cb, cfg);

    // duplicate every sample
    const int N = ds.images.dim(0);
    Tensor dup({2 * N, 3, 8, 8});
    std::vector<int> dup_labels(2 * N);
    const size_t img = ds.images.numel() / N;
    for (int n = 0; n < N; ++n) {
        for (int r = 0; r < 2; ++r) {
            std::copy(ds.images.data.begin() + n * img, ds.images.data.begin() + (n + 1) * img,
                      dup.data.begin() + (2 * n + r) * img);
            dup_labels[2 * n + r] = ds.labels[n];
        }
    }
    auto g2 = cpl_loss_gradients(dup, dup_labels, fx, cb, cfg);
    CHECK(g1.mean_loss == doctest::Approx(g2.mean_loss).epsilon(1e-12));
    for (const auto& [k, v] : g1.extractor_grads) {
        const auto& v2 = g2.extractor_grads.at(k);
        CHECK(max_abs_diff(v, v2) < 1e-12);
    }
    CHECK(max_abs_diff(g1.prototype_grads, g2.prototype_grads) < 1e-12);
}

TEST_CASE("extractor gradients match finite differences on sampled weights") {
    Rng rng(99);
    Tensor images({3, 3, 8, 8});
    fill_uniform(images, rng);
    std::vector<int> labels = {0, 1, 0};
    FeatureExtractor fx = build_extractor("desk", 3, 8, 5, 31);
    Codebook cb;
    cb.C = 2;
    cb.K = 1;
    cb.dim = 5;
    cb.prototypes = Tensor({2, 1, 5});
    for (auto& v : cb.prototypes.data) v = rng.normal() * 0.5;
    ProtoTrainConfig cfg;
    cfg.gamma = 0.7;
    cfg.lambda = 0.05;
    cfg.dim = 5;

    auto grads = cpl_loss_gradients(images, labels, fx, cb, cfg);
    auto loss_fn = [&]() { return cpl_loss_gradients(images, labels, fx, cb, cfg).mean_loss; };
    Rng pick(1);
    for (auto& [key, w] : fx.params) {
        for (int s = 0; s < 3; ++s) {
            const size_t i = pick.uniform_int(w.numel());
            const double num = central_diff(w.data[i], loss_fn, 1e-5);
            CHECK(grad_close(grads.extractor_grads.at(key).data[i], num, 1e-3, 1e-8));
        }
    }
}

TEST_CASE("resnet18 extractor builds, runs and differentiates") {
    Rng rng(41);
    FeatureExtractor fx = build_extractor("resnet18", 3, 16, 12, 5);
    CHECK(fx.params.count("s3b1.conv2.weight") == 1);
    CHECK(fx.params.count("s1b0.proj.weight") == 1);
    CHECK(fx.params.count("s0b0.proj.weight") == 0); // same channels, no projection
    Tensor images({2, 3, 16, 16});
    fill_uniform(images, rng);
    Tensor f = extractor_forward(fx, images, nullptr);
    CHECK(f.dim(0) == 2);
    CHECK(f.dim(1) == 12);

    std::shared_ptr<ExtractorTrace> trace;
    Tensor f2 = extractor_forward(fx, images, &trace);
    Tensor df({2, 12});
    fill_uniform(df, rng);
    ParamStore g = extractor_backward(fx, *trace, df);
    CHECK(g.size() == fx.params.size());

    // spot-check one stem weight against finite differences
    auto loss_fn = [&]() {
        Tensor out = extractor_forward(fx, images, nullptr);
        double s = 0.0;
        for (size_t i = 0; i < out.numel(); ++i) s += df.data[i] * out.data[i];
        return s;
    };
    double& coord = fx.params.at("stem.conv.weight").data[7];
    CHECK(grad_close(g.at("stem.conv.weight").data[7], central_diff(coord, loss_fn, 1e-5), 1e-3, 1e-7));
}

TEST_CASE("train_prototypes: determinism, accuracy, missing class") {
    SyntheticSpec spec;
    spec.classes = 3;
    spec.n_per_class = 60;
    spec.image_size = 8;
    spec.seed = 11;
    LabeledDataset ds = generate_hue_shapes(spec);

    ProtoTrainConfig cfg;
    cfg.dim = 16;
    cfg.epochs = 6;
    cfg.batch_size = 32;
    cfg.learning_rate = 1e-3;
    cfg.seed = 2;

    ProtoArtifacts a = train_prototypes(ds, cfg);
    ProtoArtifacts b = train_prototypes(ds, cfg);
    CHECK(bit_equal(a.codebook.prototypes, b.codebook.prototypes));
    CHECK(a.accuracy_history.size() == 6);
    CHECK(a.accuracy_history.back() >= 0.9); // easy separable data

    LabeledDataset broken = ds;
    for (auto& l : broken.labels) l = std::min(l, 1); // class 2 vanishes
    CHECK_THROWS_AS(train_prototypes(broken, cfg), ConfigError);
}

TEST_CASE("pca_project exactness and variance accounting") {
    SUBCASE("planar data in high dimension reconstructs exactly") {
        Rng rng(12);
        const int N = 40, D = 32;
        Tensor feats({N, D});
        std::vector<double> u(D), v(D);
        for (auto& x : u) x = rng.normal();
        for (auto& x : v) x = rng.normal();
        for (int n = 0; n < N; ++n) {
            const double a = rng.normal(), b = rng.normal();
            for (int i = 0; i < D; ++i) feats.at(n, i) = a * u[i] + b * v[i] + 3.0;
        }
        auto res = pca_project(feats, 2);
        REQUIRE(res.n_components == 2);
        // reconstruction via the 2-component basis is exact
        std::vector<double> mean(D, 0.0);
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < D; ++i) mean[i] += feats.at(n, i) / N;
        double max_err = 0.0;
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < D; ++i) {
                double rec = mean[i];
                for (int c = 0; c < 2; ++c) rec += res.coords.at(n, c) * res.basis.at(c, i);
                max_err = std::max(max_err, std::abs(rec - feats.at(n, i)));
            }
        CHECK(max_err < 1e-8);
        CHECK(res.explained_ratio[0] + res.explained_ratio[1] == doctest::Approx(1.0).epsilon(1e-8));
        // sign convention: largest-magnitude entry of each component positive
        for (int c = 0; c < 2; ++c) {
            double best = 0.0;
            for (int i = 0; i < D; ++i)
                if (std::abs(res.basis.at(c, i)) > std::abs(best)) best = res.basis.at(c, i);
            CHECK(best > 0.0);
        }
    }
    SUBCASE("isotropic cloud spreads variance evenly") {
        Rng rng(13);
        const int N = 4000, D = 8;
        Tensor feats({N, D});
        for (auto& v : feats.data) v = rng.normal();
        auto res = pca_project(feats, 3);
        for (int c = 0; c < 3; ++c)
            CHECK(res.explained_ratio[c] == doctest::Approx(1.0 / D).epsilon(0.15));
    }
    SUBCASE("rank-deficient data is flagged") {
        Tensor feats({5, 4});
        for (int n = 0; n < 5; ++n)
            for (int i = 0; i < 4; ++i) feats.at(n, i) = (n + 1) * 1.0; // rank 1 after centering
        auto res = pca_project(feats, 2);
        CHECK(res.rank_deficient);
        CHECK(res.n_components == 1);
    }
    Tensor feats({2, 4});
    CHECK_THROWS_AS(pca_project(feats, 3), ShapeError);  // N < out_dim
    CHECK_THROWS_AS(pca_project(feats, 0), ConfigError); // out_dim not in {1,2,3}
}
