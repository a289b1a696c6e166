#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "protodiff/dataset.hpp"
#include "protodiff/denoiser.hpp"
#include "protodiff/embed.hpp"
#include "protodiff/optim.hpp"
#include "protodiff/protolearn.hpp"
#include "protodiff/schedule.hpp"

namespace protodiff {

enum class EmbeddingMode { baseline_random, proto_frozen, proto_unfrozen };

std::string to_string(EmbeddingMode m);
EmbeddingMode embedding_mode_from_string(const std::string& s);

struct DiffusionTrainConfig {
    int steps = 3000;
    int batch_size = 16;
    double learning_rate = 2e-4;
    double weight_decay = 0.0;
    double p_uncond = 0.1; // probability of replacing the label with NULL
    EmbeddingMode embedding_mode = EmbeddingMode::baseline_random;
    int eval_every = 500;
    uint64_t seed = 0;
    double grad_clip = 0.0; // 0 disables clipping
    bool normalize_prototypes = false;
};

struct TrainState {
    NoiseSchedule sched;
    double beta_start = 1e-4, beta_end = 0.02;
    UNet net;
    ConditioningTable table;
    AdamW opt;         // denoiser parameters
    Tensor table_m, table_v; // Adam moments for table rows
    int64_t step = 0;
    Rng rng;
    DiffusionTrainConfig cfg;
    nlohmann::json config_echo; // full experiment config, for provenance
    std::string config_hash;
};

/// Builds a fresh training state. For the proto modes a Stage I codebook with
/// matching class count and dimensionality must be supplied.
TrainState make_train_state(const NoiseSchedule& sched, double beta_start, double beta_end,
                            const UNetConfig& unet_cfg, const DiffusionTrainConfig& cfg, int num_classes,
                            const Codebook* codebook, const nlohmann::json& config_echo);

/// Replaces each label independently with kNullLabel with probability p.
std::vector<int> apply_conditioning_dropout(const std::vector<int>& labels, double p, Rng& rng);

/// One optimization step on a batch of images in [-1,1]: per-example uniform
/// t, Gaussian eps, closed-form noising, conditioning dropout with
/// probability p_uncond, per-element mean squared noise-prediction error,
/// one AdamW step on the denoiser (and on the table per the frozen contract:
/// class rows only when unfrozen, the null row always). Returns the loss.
double diffusion_train_step(const Tensor& images, const std::vector<int>& labels, TrainState& state);

struct HistoryRow {
    int64_t step = 0;
    double loss = 0.0; // mean loss since the previous row
    double fid = std::numeric_limits<double>::quiet_NaN();
    double is_score = std::numeric_limits<double>::quiet_NaN();
    double wall_seconds = 0.0;
};

/// Optional during-training evaluation: FID/IS of freshly sampled images
/// against a reference batch, in the feature space of a pinned extractor.
struct TrainEvalContext {
    FeatureExtractor extractor;
    Codebook codebook;
    double gamma = 1.0;
    std::string extractor_id;
    Tensor reference_images; // (M,C,H,W)
    int n_samples = 512;
    double guidance_weight = 0.0;
    bool clamp_x0 = true;
    uint64_t seed = 0;
};

struct TrainRunResult {
    std::vector<HistoryRow> history;
    std::vector<std::string> checkpoint_paths;
};

/// Runs the step loop; every eval_every steps emits a history row, an
/// optional checkpoint (when out_dir is non-empty) and, when eval_ctx is
/// given, an FID/IS evaluation on a parameter snapshot. Deterministic per
/// config+seed; evaluation draws from its own derived stream and never
/// touches the training generator.
TrainRunResult train_diffusion(const LabeledDataset& dataset, TrainState& state,
                               const std::string& out_dir = "",
                               const TrainEvalContext* eval_ctx = nullptr,
                               const std::function<void(const HistoryRow&)>& on_row = nullptr);

void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);

/// Raises ConfigError naming both configurations if the checkpoint was
/// written with different geometry than `expected`.
void ensure_config_match(const TrainState& loaded, const UNetConfig& expected);

void write_history_csv(const std::string& path, const std::vector<HistoryRow>& rows,
                       const std::string& config_hash);

} // namespace protodiff
