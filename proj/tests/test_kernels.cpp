#include <doctest.h>
#include <omp.h>

#include "protodiff/errors.hpp"
#include "protodiff/kernels.hpp"
#include "test_util.hpp"

using namespace protodiff;
using namespace testutil;

namespace K = kernels;

TEST_CASE("conv2d identity kernel reproduces input") {
    Rng rng(11);
    Tensor x({1, 2, 5, 5});
    fill_uniform(x, rng);
    Tensor w({2, 2, 3, 3});
    // per-channel identity: center tap of the matching channel
    w.at(0, 0, 1, 1) = 1.0;
    w.at(1, 1, 1, 1) = 1.0;
    Tensor b({2});
    Tensor y = K::conv2d_forward(x, w, b, ConvSpec{1, 1});
    CHECK(y.same_shape(x));
    CHECK(max_abs_diff(x, y) == doctest::Approx(0.0));
}

TEST_CASE("conv2d matches serial reference across geometries") {
    Rng rng(42);
    struct Geo {
        int n, ci, co, hw, k, stride, pad;
    };
    for (const Geo g : {Geo{2, 3, 4, 8, 3, 1, 1}, Geo{2, 3, 5, 8, 3, 2, 1}, Geo{1, 4, 2, 6, 1, 1, 0},
                        Geo{3, 1, 2, 7, 3, 2, 1}}) {
        Tensor x({g.n, g.ci, g.hw, g.hw}), w({g.co, g.ci, g.k, g.k}), b({g.co});
        fill_uniform(x, rng);
        fill_uniform(w, rng);
        fill_uniform(b, rng);
        const ConvSpec spec{g.stride, g.pad};
        Tensor y_omp = K::conv2d_forward(x, w, b, spec);
        Tensor y_ref = ref::conv2d_forward(x, w, b, spec);
        REQUIRE(y_omp.same_shape(y_ref));
        CHECK(max_abs_diff(y_omp, y_ref) < 1e-12);

        Tensor dy(y_omp.shape);
        fill_uniform(dy, rng);
        Tensor dx_omp = K::conv2d_backward_input(dy, w, g.hw, g.hw, spec);
        Tensor dx_ref = ref::conv2d_backward_input(dy, w, g.hw, g.hw, spec);
        CHECK(max_abs_diff(dx_omp, dx_ref) < 1e-12);

        Tensor dw_omp(w.shape), db_omp(b.shape), dw_ref(w.shape), db_ref(b.shape);
        K::conv2d_backward_params(dy, x, spec, dw_omp, db_omp);
        ref::conv2d_backward_params(dy, x, spec, dw_ref, db_ref);
        CHECK(max_abs_diff(dw_omp, dw_ref) < 1e-12);
        CHECK(max_abs_diff(db_omp, db_ref) < 1e-12);
    }
}

TEST_CASE("parallel kernels are bit-identical across thread counts") {
    Rng rng(7);
    Tensor x({2, 4, 8, 8}), w({6, 4, 3, 3}), b({6});
    fill_uniform(x, rng);
    fill_uniform(w, rng);
    fill_uniform(b, rng);
    const int saved = omp_get_max_threads();
    omp_set_num_threads(1);
    Tensor y1 = K::conv2d_forward(x, w, b, ConvSpec{1, 1});
    omp_set_num_threads(4);
    Tensor y4 = K::conv2d_forward(x, w, b, ConvSpec{1, 1});
    omp_set_num_threads(saved);
    CHECK(bit_equal(y1, y4));
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(3);
    for (const ConvSpec spec : {ConvSpec{1, 1}, ConvSpec{2, 1}}) {
        Tensor x({2, 2, 6, 6}), w({3, 2, 3, 3}), b({3});
        fill_uniform(x, rng);
        fill_uniform(w, rng);
        fill_uniform(b, rng);
        Tensor y0 = K::conv2d_forward(x, w, b, spec);
        WeightedLoss loss(y0.shape, rng);
        auto f = [&]() { return loss(K::conv2d_forward(x, w, b, spec)); };

        Tensor dy = loss.c;
        Tensor dx = K::conv2d_backward_input(dy, w, 6, 6, spec);
        Tensor dw(w.shape), db(b.shape);
        K::conv2d_backward_params(dy, x, spec, dw, db);

        for (size_t i = 0; i < x.numel(); i += 7)
            CHECK(grad_close(dx.data[i], central_diff(x.data[i], f)));
        for (size_t i = 0; i < w.numel(); i += 5)
            CHECK(grad_close(dw.data[i], central_diff(w.data[i], f)));
        for (size_t i = 0; i < b.numel(); ++i)
            CHECK(grad_close(db.data[i], central_diff(b.data[i], f)));
    }
}

TEST_CASE("group_norm normalizes per group before affine") {
    Rng rng(5);
    Tensor x({2, 8, 4, 4});
    fill_uniform(x, rng, -3.0, 5.0);
    Tensor gamma = Tensor::full({8}, 1.0), beta({8});
    Tensor mean, var;
    Tensor y = K::group_norm_forward(x, gamma, beta, 4, 1e-12, mean, var);
    // per (n, group): mean 0, var 1
    for (int n = 0; n < 2; ++n)
        for (int g = 0; g < 4; ++g) {
            double m = 0.0, v = 0.0;
            for (int cg = 0; cg < 2; ++cg)
                for (int h = 0; h < 4; ++h)
                    for (int w2 = 0; w2 < 4; ++w2) m += y.at(n, g * 2 + cg, h, w2);
            m /= 32.0;
            for (int cg = 0; cg < 2; ++cg)
                for (int h = 0; h < 4; ++h)
                    for (int w2 = 0; w2 < 4; ++w2) {
                        const double d = y.at(n, g * 2 + cg, h, w2) - m;
                        v += d * d;
                    }
            v /= 32.0;
            CHECK(std::abs(m) < 1e-10);
            CHECK(std::abs(v - 1.0) < 1e-5);
        }
}

TEST_CASE("group_norm matches reference and finite differences") {
    Rng rng(9);
    Tensor x({2, 6, 3, 3}), gamma({6}), beta({6});
    fill_uniform(x, rng);
    fill_uniform(gamma, rng, 0.5, 1.5);
    fill_uniform(beta, rng);
    const int groups = 3;
    const double eps = 1e-5;

    Tensor m1, v1, m2, v2;
    Tensor y_omp = K::group_norm_forward(x, gamma, beta, groups, eps, m1, v1);
    Tensor y_ref = ref::group_norm_forward(x, gamma, beta, groups, eps, m2, v2);
    CHECK(max_abs_diff(y_omp, y_ref) < 1e-12);

    WeightedLoss loss(y_omp.shape, rng);
    auto f = [&]() {
        Tensor mm, vv;
        return loss(K::group_norm_forward(x, gamma, beta, groups, eps, mm, vv));
    };
    Tensor dy = loss.c;
    Tensor dx, dgamma, dbeta, dx_r, dgamma_r, dbeta_r;
    K::group_norm_backward(dy, x, gamma, m1, v1, groups, eps, dx, dgamma, dbeta);
    ref::group_norm_backward(dy, x, gamma, m1, v1, groups, eps, dx_r, dgamma_r, dbeta_r);
    CHECK(max_abs_diff(dx, dx_r) < 1e-12);
    CHECK(max_abs_diff(dgamma, dgamma_r) < 1e-12);

    for (size_t i = 0; i < x.numel(); i += 5)
        CHECK(grad_close(dx.data[i], central_diff(x.data[i], f)));
    for (size_t i = 0; i < gamma.numel(); ++i)
        CHECK(grad_close(dgamma.data[i], central_diff(gamma.data[i], f)));
    for (size_t i = 0; i < beta.numel(); ++i)
        CHECK(grad_close(dbeta.data[i], central_diff(beta.data[i], f)));
}

TEST_CASE("silu gradient matches finite differences") {
    Rng rng(13);
    Tensor x({2, 3, 4, 4});
    fill_uniform(x, rng, -4.0, 4.0);
    Tensor y0 = K::silu_forward(x);
    WeightedLoss loss(y0.shape, rng);
    auto f = [&]() { return loss(K::silu_forward(x)); };
    Tensor dx = K::silu_backward(loss.c, x);
    for (size_t i = 0; i < x.numel(); i += 3)
        CHECK(grad_close(dx.data[i], central_diff(x.data[i], f)));
}

TEST_CASE("linear matches reference and finite differences") {
    Rng rng(17);
    Tensor x({4, 6}), w({5, 6}), b({5});
    fill_uniform(x, rng);
    fill_uniform(w, rng);
    fill_uniform(b, rng);
    Tensor y_omp = K::linear_forward(x, w, b);
    Tensor y_ref = ref::linear_forward(x, w, b);
    CHECK(max_abs_diff(y_omp, y_ref) < 1e-12);

    WeightedLoss loss(y_omp.shape, rng);
    auto f = [&]() { return loss(K::linear_forward(x, w, b)); };
    Tensor dx = K::linear_backward_input(loss.c, w);
    Tensor dw, db;
    K::linear_backward_params(loss.c, x, dw, db);
    for (size_t i = 0; i < x.numel(); ++i) CHECK(grad_close(dx.data[i], central_diff(x.data[i], f)));
    for (size_t i = 0; i < w.numel(); ++i) CHECK(grad_close(dw.data[i], central_diff(w.data[i], f)));
    for (size_t i = 0; i < b.numel(); ++i) CHECK(grad_close(db.data[i], central_diff(b.data[i], f)));
}

TEST_CASE("dropout: mask reuse, scaling and backward") {
    Rng rng(23);
    Tensor x({2, 4, 4, 4});
    fill_uniform(x, rng);
    Tensor mask;
    Rng drop_rng(99);
    Tensor y = K::dropout_forward(x, 0.25, drop_rng, mask);
    int kept = 0;
    for (size_t i = 0; i < y.numel(); ++i) {
        if (mask.data[i] != 0.0) {
            CHECK(mask.data[i] == doctest::Approx(1.0 / 0.75));
            CHECK(y.data[i] == doctest::Approx(x.data[i] / 0.75));
            ++kept;
        } else {
            CHECK(y.data[i] == 0.0);
        }
    }
    CHECK(kept > 0);
    CHECK(kept < static_cast<int>(y.numel()));

    // same seed -> same mask
    Rng drop_rng2(99);
    Tensor mask2;
    Tensor y2 = K::dropout_forward(x, 0.25, drop_rng2, mask2);
    CHECK(bit_equal(y, y2));

    // backward with the fixed mask is exactly dy * mask
    Tensor dy(x.shape);
    fill_uniform(dy, rng);
    Tensor dx = K::dropout_backward(dy, mask);
    for (size_t i = 0; i < dx.numel(); ++i) CHECK(dx.data[i] == dy.data[i] * mask.data[i]);

    // rate 0 keeps the stream untouched
    Rng before(5);
    Rng after = before;
    Tensor mask0;
    Tensor y0 = K::dropout_forward(x, 0.0, after, mask0);
    CHECK(bit_equal(y0, x));
    CHECK(before.state() == after.state());
}

TEST_CASE("pooling and upsampling gradients") {
    Rng rng(29);
    Tensor x({2, 3, 6, 6});
    fill_uniform(x, rng);

    SUBCASE("avg_downsample2x") {
        Tensor y0 = K::avg_downsample2x_forward(x);
        CHECK(y0.dim(2) == 3);
        WeightedLoss loss(y0.shape, rng);
        auto f = [&]() { return loss(K::avg_downsample2x_forward(x)); };
        Tensor dx = K::avg_downsample2x_backward(loss.c);
        for (size_t i = 0; i < x.numel(); i += 7)
            CHECK(grad_close(dx.data[i], central_diff(x.data[i], f)));
    }
    SUBCASE("nearest_upsample2x") {
        Tensor y0 = K::nearest_upsample2x_forward(x);
        CHECK(y0.dim(2) == 12);
        WeightedLoss loss(y0.shape, rng);
        auto f = [&]() { return loss(K::nearest_upsample2x_forward(x)); };
        Tensor dx = K::nearest_upsample2x_backward(loss.c);
        for (size_t i = 0; i < x.numel(); i += 7)
            CHECK(grad_close(dx.data[i], central_diff(x.data[i], f)));
    }
    SUBCASE("global_avg_pool") {
        Tensor y0 = K::global_avg_pool_forward(x);
        WeightedLoss loss(y0.shape, rng);
        auto f = [&]() { return loss(K::global_avg_pool_forward(x)); };
        Tensor dx = K::global_avg_pool_backward(loss.c, 6, 6);
        for (size_t i = 0; i < x.numel(); i += 7)
            CHECK(grad_close(dx.data[i], central_diff(x.data[i], f)));
    }
}

TEST_CASE("concat/split round trip and shape errors") {
    Rng rng(31);
    Tensor a({2, 3, 4, 4}), b({2, 5, 4, 4});
    fill_uniform(a, rng);
    fill_uniform(b, rng);
    Tensor cat = K::concat_channels(a, b);
    CHECK(cat.dim(1) == 8);
    Tensor a2, b2;
    K::split_channels(cat, 3, a2, b2);
    CHECK(bit_equal(a, a2));
    CHECK(bit_equal(b, b2));

    Tensor bad({2, 5, 3, 4});
    CHECK_THROWS_AS(K::concat_channels(a, bad), ShapeError);
    CHECK_THROWS_AS(K::add(a, b), ShapeError);
    Tensor w({4, 7, 3, 3}); // in-channels mismatch
    CHECK_THROWS_AS(K::conv2d_forward(a, w, Tensor({4}), ConvSpec{1, 1}), ShapeError);
}
