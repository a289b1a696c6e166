#include <doctest.h>

#include "protodiff/config.hpp"
#include "protodiff/errors.hpp"

using namespace protodiff;

TEST_CASE("defaults resolve and hash deterministically") {
    ExperimentConfig a = resolve_config(nlohmann::json::object());
    ExperimentConfig b = resolve_config(nlohmann::json::object());
    CHECK(a.hash == b.hash);
    CHECK(a.T == 200);
    CHECK(a.unet.proto_dim == 128); // d_p mirrors proto.dim
    CHECK(a.unet.image_size == 16);
    CHECK(a.num_classes() == 3);

    ExperimentConfig c = resolve_config({{"seed", 2}});
    CHECK(c.hash != a.hash);
}

TEST_CASE("unknown keys are rejected") {
    CHECK_THROWS_AS(resolve_config({{"sedd", 1}}), ConfigError);
    CHECK_THROWS_AS(resolve_config({{"unet", {{"bass_channels", 4}}}}), ConfigError);
}

TEST_CASE("dotted-path overrides") {
    ExperimentConfig c = resolve_config(nlohmann::json::object(),
                                        {"unet.base_channels=16", "proto.dim=32", "dataset.kind=cifar10"});
    CHECK(c.unet.base_channels == 16);
    CHECK(c.proto.dim == 32);
    CHECK(c.unet.proto_dim == 32);
    CHECK(c.dataset_kind == "cifar10");
    CHECK(c.unet.image_size == 32);
    CHECK(c.num_classes() == 10);
    CHECK_THROWS_AS(resolve_config(nlohmann::json::object(), {"unet.nope=1"}), ConfigError);
    CHECK_THROWS_AS(resolve_config(nlohmann::json::object(), {"no-equals-sign"}), ConfigError);
}

TEST_CASE("cross-field validation") {
    // image size indivisible by the downsampling factor
    CHECK_THROWS_AS(resolve_config({{"dataset", {{"synthetic", {{"image_size", 18}}}}}}), ConfigError);
    CHECK_THROWS_AS(resolve_config({{"schedule", {{"family", "cosine"}}}}), ConfigError);
    CHECK_THROWS_AS(resolve_config({{"schedule", {{"beta_start", 0.5}, {"beta_end", 0.2}}}}), ConfigError);
    CHECK_THROWS_AS(resolve_config({{"diffusion", {{"p_uncond", 1.0}}}}), ConfigError);
    CHECK_THROWS_AS(resolve_config({{"diffusion", {{"embedding_mode", "banana"}}}}), ConfigError);
    CHECK_THROWS_AS(resolve_config({{"dataset", {{"kind", "imagenet"}}}}), ConfigError);
    CHECK_THROWS_AS(resolve_config({{"unet", {{"time_dim", 7}}}}), ConfigError);
}

TEST_CASE("sub-seeds default to the global seed") {
    ExperimentConfig c = resolve_config({{"seed", 777}});
    CHECK(c.proto.seed == 777);
    CHECK(c.diffusion.seed == 777);
    ExperimentConfig d = resolve_config({{"seed", 777}, {"proto", {{"seed", 3}}}});
    CHECK(d.proto.seed == 3);
}
