#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "protodiff/dataset.hpp"
#include "protodiff/denoiser.hpp"
#include "protodiff/protolearn.hpp"
#include "protodiff/trainer.hpp"

namespace protodiff {

// Single-document JSON experiment configuration. Unknown keys are rejected;
// missing keys take defaults; CLI flags override individual keys by dotted
// path. The config hash is the FNV-1a of the fully resolved document and is
// embedded in every emitted artifact.
struct ExperimentConfig {
    nlohmann::json resolved; // defaults + file + overrides
    std::string hash;

    uint64_t seed = 1;
    std::string out_dir = "runs/out";

    std::string dataset_kind = "synthetic"; // synthetic | cifar10 | file
    std::string dataset_path;
    int file_image_size = 0; // kind=file geometry; 0 falls back to the synthetic block
    int file_classes = 0;
    SyntheticSpec synthetic;
    double holdout_fraction = 0.2;
    int resize = 0; // 0 = keep native size
    std::string resize_mode = "bilinear";

    int T = 200;
    double beta_start = 1e-4, beta_end = 0.02;

    ProtoTrainConfig proto;
    UNetConfig unet;
    DiffusionTrainConfig diffusion;

    double sample_guidance = 0.5;
    int sample_per_class = 4;
    bool sample_clamp_x0 = true;
    bool sample_use_beta_variance = false;

    int eval_n_samples = 1024;
    std::string eval_extractor_path;
    std::string eval_reference_path;

    int num_classes() const;
    int image_size() const;
};

nlohmann::json default_config_json();

/// Deep-merges `user` over the defaults, applies dotted-path overrides
/// ("unet.base_channels=16"), validates cross-field consistency, computes the
/// hash.
ExperimentConfig resolve_config(const nlohmann::json& user,
                                const std::vector<std::string>& overrides = {});

ExperimentConfig load_config_file(const std::string& path,
                                  const std::vector<std::string>& overrides = {});

} // namespace protodiff
