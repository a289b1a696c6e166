#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "protodiff/errors.hpp"
#include "protodiff/image_io.hpp"
#include "protodiff/sampler.hpp"
#include "test_util.hpp"

using namespace protodiff;
using namespace testutil;

TEST_CASE("guided_noise boundaries and linearity") {
    Rng rng(1);
    Tensor c({2, 1, 3, 3}), u({2, 1, 3, 3});
    fill_uniform(c, rng);
    fill_uniform(u, rng);

    Tensor w0 = guided_noise(c, u, 0.0);
    CHECK(bit_equal(w0, c));

    Tensor same = guided_noise(c, c, 3.7);
    CHECK(max_abs_diff(same, c) < 1e-15);

    Tensor ones = Tensor::full({1, 1, 1, 1}, 1.0);
    Tensor zeros({1, 1, 1, 1});
    CHECK(guided_noise(ones, zeros, 0.5).data[0] == doctest::Approx(1.5));

    // linear in (eps_cond, eps_uncond)
    Tensor c2({2, 1, 3, 3}), u2({2, 1, 3, 3});
    fill_uniform(c2, rng);
    fill_uniform(u2, rng);
    const double a = 0.3, w = 0.8;
    Tensor mix_c(c.shape), mix_u(u.shape);
    for (size_t i = 0; i < c.numel(); ++i) {
        mix_c.data[i] = a * c.data[i] + (1 - a) * c2.data[i];
        mix_u.data[i] = a * u.data[i] + (1 - a) * u2.data[i];
    }
    Tensor g_mix = guided_noise(mix_c, mix_u, w);
    Tensor g1 = guided_noise(c, u, w), g2 = guided_noise(c2, u2, w);
    for (size_t i = 0; i < c.numel(); ++i)
        CHECK(g_mix.data[i] == doctest::Approx(a * g1.data[i] + (1 - a) * g2.data[i]).epsilon(1e-12));

    Tensor bad({1, 1, 2, 2});
    CHECK_THROWS_AS(guided_noise(c, bad, 0.5), ShapeError);
    CHECK_THROWS_AS(guided_noise(c, u, -0.1), ConfigError);
}

TEST_CASE("teacher-forcing oracle: sampler recovers the planted x0") {
    // With a predictor that returns the true eps for a known x0, the
    // ancestral loop's final step lands exactly on x0.
    auto sched = make_linear_schedule(5, 0.01, 0.25);
    Rng rng(21);
    Tensor x0({4, 3, 8, 8});
    fill_uniform(x0, rng, -0.9, 0.9);

    NoisePredictor oracle = [&](const Tensor& x, int t, int) {
        Tensor eps(x.shape);
        const double a = std::sqrt(sched.alpha_bars[t]);
        const double b = std::sqrt(1.0 - sched.alpha_bars[t]);
        for (size_t i = 0; i < x.numel(); ++i) eps.data[i] = (x.data[i] - a * x0.data[i]) / b;
        return eps;
    };

    for (bool clamp : {false, true}) {
        SampleRequest req;
        req.n_samples = 4;
        req.seed = 9;
        req.clamp_x0 = clamp;
        req.guidance_weight = 0.0;
        Tensor out = ddpm_sample_loop(oracle, sched, req, 3, 8);
        CHECK(max_abs_diff(out, x0) < 1e-3);
    }
}

TEST_CASE("sampling determinism and the w=0 fast path") {
    UNetConfig c;
    c.base_channels = 8;
    c.ch_mult = {1, 2};
    c.blocks_per_res = 1;
    c.dropout_rate = 0.1; // ignored in eval mode
    c.time_dim = 8;
    c.proto_dim = 8;
    c.cond_hidden = 16;
    c.image_size = 8;
    UNet net = build_unet(c, 3);
    Rng rng(5);
    for (auto& v : net.params.at("final.conv.weight").data) v = rng.normal() * 0.05;
    ConditioningTable table = init_random(3, 8, 17);
    auto sched = make_linear_schedule(8, 0.02, 0.3);

    SampleRequest req;
    req.label = 1;
    req.n_samples = 2;
    req.seed = 4242;
    req.guidance_weight = 0.0;
    Tensor a = ddpm_sample(net, table, sched, req);
    Tensor b = ddpm_sample(net, table, sched, req);
    CHECK(bit_equal(a, b));
    for (double v : a.data) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }

    // w=0 fast path must equal the general combination bit-for-bit
    auto batch_conditioning = [&](int t, int label, int n) {
        Tensor z({n, c.cond_dim()});
        const auto row = build_conditioning(t, label, table, c.time_dim);
        for (int k = 0; k < n; ++k)
            std::copy(row.begin(), row.end(), z.data.begin() + static_cast<size_t>(k) * row.size());
        return z;
    };
    NoisePredictor general = [&](const Tensor& x, int t, int label) {
        Tensor eps_c = predict_noise(net, x, batch_conditioning(t, label, x.dim(0)));
        Tensor eps_u = predict_noise(net, x, batch_conditioning(t, kNullLabel, x.dim(0)));
        return guided_noise(eps_c, eps_u, 0.0);
    };
    Tensor c2 = ddpm_sample_loop(general, sched, req, 3, 8);
    CHECK(bit_equal(a, c2));

    // guided sampling with w > 0 stays finite and in range
    req.guidance_weight = 0.7;
    Tensor g = ddpm_sample(net, table, sched, req);
    for (double v : g.data) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }

    req.label = 5;
    CHECK_THROWS_AS(ddpm_sample(net, table, sched, req), ShapeError);
}

TEST_CASE("sample_grid layout, determinism and PNG round trip") {
    UNetConfig c;
    c.base_channels = 4;
    c.ch_mult = {1};
    c.blocks_per_res = 1;
    c.dropout_rate = 0.0;
    c.time_dim = 4;
    c.proto_dim = 4;
    c.cond_hidden = 8;
    c.image_size = 8;
    UNet net = build_unet(c, 6);
    ConditioningTable table = init_random(3, 4, 29);
    auto sched = make_linear_schedule(4, 0.05, 0.3);

    LabeledBatch g1 = sample_grid(net, table, sched, 4, 0.0, 777);
    LabeledBatch g2 = sample_grid(net, table, sched, 4, 0.0, 777);
    CHECK(g1.images.dim(0) == 12);
    CHECK(bit_equal(g1.images, g2.images));
    for (int i = 0; i < 12; ++i) CHECK(g1.labels[i] == i / 4);

    // grid PNG: write, read back, compare pixel-exactly
    Image8 grid = make_grid(g1.images, 3, 4);
    const std::string path =
        (std::filesystem::temp_directory_path() / "pd_test_grid.png").string();
    write_png(path, grid);
    Image8 back = read_png(path);
    REQUIRE(back.width == grid.width);
    REQUIRE(back.height == grid.height);
    REQUIRE(back.channels == 3);
    CHECK(back.pixels == grid.pixels);
    std::remove(path.c_str());
}
