#include "protodiff/config.hpp"

#include <fstream>

#include "protodiff/checkpoint.hpp"
#include "protodiff/errors.hpp"

namespace protodiff {

nlohmann::json default_config_json() {
    return nlohmann::json{
        {"seed", 1},
        {"out_dir", "runs/out"},
        {"dataset",
         {{"kind", "synthetic"},
          {"path", ""},
          {"image_size", 0}, // for kind=file; 0 falls back to synthetic.image_size
          {"classes", 0},    // for kind=file; 0 falls back to synthetic.classes
          {"resize", 0},
          {"resize_mode", "bilinear"},
          {"holdout_fraction", 0.2},
          {"synthetic",
           {{"classes", 3}, {"n_per_class", 667}, {"image_size", 16}, {"seed", 7}, {"noise_sigma", 0.02}}}}},
        {"schedule", {{"T", 200}, {"beta_start", 1e-4}, {"beta_end", 0.02}, {"family", "linear"}}},
        {"proto",
         {{"gamma", 1.0},
          {"lambda", 0.01},
          {"epochs", 20},
          {"batch_size", 512},
          {"learning_rate", 1e-4},
          {"seed", 0},
          {"dim", 128},
          {"prototypes_per_class", 1},
          {"proto_init_scale", 0.1},
          {"arch", "desk"}}},
        {"unet",
         {{"base_channels", 32},
          {"ch_mult", {1, 2, 2}},
          {"blocks_per_res", 2},
          {"dropout_rate", 0.1},
          {"time_dim", 128},
          {"cond_hidden", 128},
          {"norm_groups", 8}}},
        {"diffusion",
         {{"steps", 3000},
          {"batch_size", 16},
          {"learning_rate", 2e-4},
          {"weight_decay", 0.0},
          {"p_uncond", 0.1},
          {"embedding_mode", "baseline-random"},
          {"eval_every", 500},
          {"seed", 0},
          {"grad_clip", 0.0},
          {"normalize_prototypes", false}}},
        {"sample",
         {{"guidance_weight", 0.5}, {"per_class", 4}, {"clamp_x0", true}, {"use_beta_variance", false}}},
        {"eval", {{"n_samples", 1024}, {"extractor", ""}, {"reference", ""}}},
    };
}

namespace {

void merge_into(nlohmann::json& base, const nlohmann::json& user, const std::string& prefix) {
    for (auto it = user.begin(); it != user.end(); ++it) {
        const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!base.contains(it.key())) throw ConfigError("unknown config key: " + path);
        if (base[it.key()].is_object() && it.value().is_object()) {
            merge_into(base[it.key()], it.value(), path);
        } else {
            base[it.key()] = it.value();
        }
    }
}

void apply_override(nlohmann::json& j, const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw ConfigError("override must look like key.path=value: " + spec);
    const std::string path = spec.substr(0, eq);
    const std::string value = spec.substr(eq + 1);

    nlohmann::json* node = &j;
    size_t start = 0;
    std::vector<std::string> parts;
    while (true) {
        const auto dot = path.find('.', start);
        parts.push_back(path.substr(start, dot == std::string::npos ? std::string::npos : dot - start));
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    for (size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->contains(parts[i])) throw ConfigError("unknown config key: " + path);
        node = &(*node)[parts[i]];
    }
    if (!node->contains(parts.back())) throw ConfigError("unknown config key: " + path);

    nlohmann::json parsed = nlohmann::json::parse(value, nullptr, /*allow_exceptions=*/false);
    (*node)[parts.back()] = parsed.is_discarded() ? nlohmann::json(value) : parsed;
}

} // namespace

int ExperimentConfig::num_classes() const {
    if (dataset_kind == "cifar10") return 10;
    if (dataset_kind == "file" && file_classes > 0) return file_classes;
    return synthetic.classes;
}

int ExperimentConfig::image_size() const {
    if (resize > 0) return resize;
    if (dataset_kind == "cifar10") return 32;
    if (dataset_kind == "file" && file_image_size > 0) return file_image_size;
    return synthetic.image_size;
}

ExperimentConfig resolve_config(const nlohmann::json& user, const std::vector<std::string>& overrides) {
    nlohmann::json j = default_config_json();
    if (!user.is_null()) {
        if (!user.is_object()) throw ConfigError("config root must be a JSON object");
        merge_into(j, user, "");
    }
    for (const auto& o : overrides) apply_override(j, o);

    ExperimentConfig cfg;
    cfg.resolved = j;
    cfg.hash = fnv1a_hex(j.dump());

    try {
        cfg.seed = j.at("seed").get<uint64_t>();
        cfg.out_dir = j.at("out_dir");

        const auto& ds = j.at("dataset");
        cfg.dataset_kind = ds.at("kind");
        cfg.dataset_path = ds.at("path");
        cfg.file_image_size = ds.at("image_size");
        cfg.file_classes = ds.at("classes");
        cfg.resize = ds.at("resize");
        cfg.resize_mode = ds.at("resize_mode");
        cfg.holdout_fraction = ds.at("holdout_fraction");
        const auto& syn = ds.at("synthetic");
        cfg.synthetic.classes = syn.at("classes");
        cfg.synthetic.n_per_class = syn.at("n_per_class");
        cfg.synthetic.image_size = syn.at("image_size");
        cfg.synthetic.seed = syn.at("seed").get<uint64_t>();
        cfg.synthetic.noise_sigma = syn.at("noise_sigma");

        const auto& sch = j.at("schedule");
        cfg.T = sch.at("T");
        cfg.beta_start = sch.at("beta_start");
        cfg.beta_end = sch.at("beta_end");
        if (sch.at("family") != "linear")
            throw ConfigError("schedule.family: only \"linear\" is supported");

        const auto& pr = j.at("proto");
        cfg.proto.gamma = pr.at("gamma");
        cfg.proto.lambda = pr.at("lambda");
        cfg.proto.epochs = pr.at("epochs");
        cfg.proto.batch_size = pr.at("batch_size");
        cfg.proto.learning_rate = pr.at("learning_rate");
        cfg.proto.seed = pr.at("seed").get<uint64_t>();
        cfg.proto.dim = pr.at("dim");
        cfg.proto.prototypes_per_class = pr.at("prototypes_per_class");
        cfg.proto.proto_init_scale = pr.at("proto_init_scale");
        cfg.proto.arch = pr.at("arch");

        const auto& un = j.at("unet");
        cfg.unet.base_channels = un.at("base_channels");
        cfg.unet.ch_mult = un.at("ch_mult").get<std::vector<int>>();
        cfg.unet.blocks_per_res = un.at("blocks_per_res");
        cfg.unet.dropout_rate = un.at("dropout_rate");
        cfg.unet.time_dim = un.at("time_dim");
        cfg.unet.cond_hidden = un.at("cond_hidden");
        cfg.unet.norm_groups = un.at("norm_groups");
        cfg.unet.proto_dim = cfg.proto.dim;
        cfg.unet.in_channels = 3;
        cfg.unet.out_channels = 3;
        cfg.unet.image_size = cfg.image_size();

        const auto& df = j.at("diffusion");
        cfg.diffusion.steps = df.at("steps");
        cfg.diffusion.batch_size = df.at("batch_size");
        cfg.diffusion.learning_rate = df.at("learning_rate");
        cfg.diffusion.weight_decay = df.at("weight_decay");
        cfg.diffusion.p_uncond = df.at("p_uncond");
        cfg.diffusion.embedding_mode = embedding_mode_from_string(df.at("embedding_mode"));
        cfg.diffusion.eval_every = df.at("eval_every");
        cfg.diffusion.seed = df.at("seed").get<uint64_t>();
        cfg.diffusion.grad_clip = df.at("grad_clip");
        cfg.diffusion.normalize_prototypes = df.at("normalize_prototypes");

        const auto& sa = j.at("sample");
        cfg.sample_guidance = sa.at("guidance_weight");
        cfg.sample_per_class = sa.at("per_class");
        cfg.sample_clamp_x0 = sa.at("clamp_x0");
        cfg.sample_use_beta_variance = sa.at("use_beta_variance");

        const auto& ev = j.at("eval");
        cfg.eval_n_samples = ev.at("n_samples");
        cfg.eval_extractor_path = ev.at("extractor");
        cfg.eval_reference_path = ev.at("reference");
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }

    // Sub-config seeds default to the global seed.
    if (cfg.proto.seed == 0) cfg.proto.seed = cfg.seed;
    if (cfg.diffusion.seed == 0) cfg.diffusion.seed = cfg.seed;

    // Cross-field consistency.
    if (cfg.dataset_kind != "synthetic" && cfg.dataset_kind != "cifar10" && cfg.dataset_kind != "file")
        throw ConfigError("dataset.kind must be synthetic, cifar10 or file");
    if (cfg.T < 1) throw ConfigError("schedule.T must be >= 1");
    if (!(cfg.beta_start > 0.0 && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0))
        throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
    if (cfg.proto.dim < 1) throw ConfigError("proto.dim must be >= 1");
    cfg.unet.validate();
    if (!(cfg.diffusion.p_uncond >= 0.0 && cfg.diffusion.p_uncond < 1.0))
        throw ConfigError("diffusion.p_uncond must be in [0,1)");
    if (cfg.resize_mode != "nearest" && cfg.resize_mode != "bilinear")
        throw ConfigError("dataset.resize_mode must be nearest or bilinear");
    return cfg;
}

ExperimentConfig load_config_file(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream is(path);
    if (!is) throw MissingFileError("cannot open config file: " + path);
    nlohmann::json user;
    try {
        is >> user;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config JSON parse error in " + path + ": " + e.what());
    }
    return resolve_config(user, overrides);
}

} // namespace protodiff
