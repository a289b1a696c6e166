#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "protodiff/checkpoint.hpp"
#include "protodiff/config.hpp"
#include "protodiff/dataset.hpp"
#include "protodiff/errors.hpp"
#include "protodiff/eval.hpp"
#include "protodiff/image_io.hpp"
#include "protodiff/sampler.hpp"
#include "protodiff/trainer.hpp"

namespace fs = std::filesystem;
using namespace protodiff;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out_dir; // overrides config out_dir when non-empty
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("-c,--config", args.config_path, "experiment config JSON");
    cmd->add_option("--set", args.sets, "override a config key, e.g. --set unet.base_channels=16");
    cmd->add_option("-o,--out", args.out_dir, "output directory (overrides out_dir in the config)");
}

ExperimentConfig resolve(const CommonArgs& args) {
    ExperimentConfig cfg = args.config_path.empty()
                               ? resolve_config(nlohmann::json::object(), args.sets)
                               : load_config_file(args.config_path, args.sets);
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    std::cout << "resolved config (hash " << cfg.hash << "):\n" << cfg.resolved.dump(2) << "\n";
    return cfg;
}

LabeledDataset resolve_dataset(const ExperimentConfig& cfg, const std::string& data_override) {
    LabeledDataset ds;
    if (!data_override.empty()) {
        ds = load_dataset(data_override);
    } else if (cfg.dataset_kind == "synthetic") {
        ds = generate_hue_shapes(cfg.synthetic);
        ds.config_hash = cfg.hash;
    } else if (cfg.dataset_kind == "cifar10") {
        if (cfg.dataset_path.empty()) throw ConfigError("dataset.kind=cifar10 needs dataset.path");
        ds = read_cifar10_binary(cfg.dataset_path);
        ds.config_hash = cfg.hash;
    } else {
        if (cfg.dataset_path.empty()) throw ConfigError("dataset.kind=file needs dataset.path");
        ds = load_dataset(cfg.dataset_path);
    }
    if (cfg.resize > 0 && ds.images.dim(2) != cfg.resize)
        ds = resize_images(ds, cfg.resize,
                           cfg.resize_mode == "nearest" ? ResizeMode::nearest : ResizeMode::bilinear);
    return ds;
}

Tensor load_image_batch(const std::string& path, std::string& hash_out) {
    TensorFile tf = read_tensor_file(path);
    const std::string kind = tf.header.value("kind", "");
    hash_out = tf.header.value("config_hash", "");
    if (kind == "dataset" || kind == "sample-batch") return tf.tensors.at("images");
    throw IoError("expected a dataset or sample-batch file, got kind=" + kind + " in " + path);
}

int cmd_gen_data(const CommonArgs& args) {
    ExperimentConfig cfg = resolve(args);
    if (cfg.dataset_kind != "synthetic")
        throw ConfigError("gen-data only produces synthetic datasets (dataset.kind=synthetic)");
    fs::create_directories(cfg.out_dir);

    LabeledDataset train = generate_hue_shapes(cfg.synthetic);
    SyntheticSpec held_spec = cfg.synthetic;
    held_spec.seed = cfg.synthetic.seed + 1;
    held_spec.n_per_class =
        std::max(1, static_cast<int>(std::lround(cfg.synthetic.n_per_class * cfg.holdout_fraction)));
    LabeledDataset held = generate_hue_shapes(held_spec);

    const double acc = nearest_centroid_accuracy(train, held);
    if (acc < 0.99)
        throw ConfigError("generator self-test failed: nearest-centroid held-out accuracy " +
                          std::to_string(acc) + " < 0.99");

    train.config_hash = cfg.hash;
    held.config_hash = cfg.hash;
    const std::string train_path = cfg.out_dir + "/train.pdds";
    const std::string held_path = cfg.out_dir + "/heldout.pdds";
    save_dataset(train_path, train);
    save_dataset(held_path, held);
    std::cout << "wrote " << train_path << " (" << train.images.dim(0) << " images)\n";
    std::cout << "wrote " << held_path << " (" << held.images.dim(0) << " images)\n";
    std::cout << "generator self-test accuracy: " << acc << "\n";
    return 0;
}

int cmd_proto_train(const CommonArgs& args, const std::string& data_path) {
    ExperimentConfig cfg = resolve(args);
    fs::create_directories(cfg.out_dir);
    LabeledDataset ds = resolve_dataset(cfg, data_path);

    ProtoArtifacts art = train_prototypes(ds, cfg.proto);
    const std::string path = cfg.out_dir + "/proto.pdpk";
    save_proto_artifacts(path, art, cfg.hash);
    std::cout << "per-epoch accuracy:";
    for (double a : art.accuracy_history) std::cout << " " << a;
    std::cout << "\nwrote " << path << " (extractor id " << extractor_id(art.extractor) << ")\n";
    return 0;
}

int cmd_diff_train(const CommonArgs& args, const std::string& data_path, const std::string& proto_path,
                   const std::string& resume_path) {
    ExperimentConfig cfg = resolve(args);
    fs::create_directories(cfg.out_dir);
    LabeledDataset ds = resolve_dataset(cfg, data_path);

    Codebook codebook;
    const Codebook* codebook_ptr = nullptr;
    if (cfg.diffusion.embedding_mode != EmbeddingMode::baseline_random) {
        std::string ppath = proto_path.empty() ? cfg.out_dir + "/proto.pdpk" : proto_path;
        if (!fs::exists(ppath))
            throw MissingFileError("embedding_mode " + to_string(cfg.diffusion.embedding_mode) +
                                   " requires a Stage I artifact; not found: " + ppath);
        codebook = load_proto_artifacts(ppath).codebook;
        codebook_ptr = &codebook;
    }

    auto sched = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
    TrainState state;
    if (!resume_path.empty()) {
        state = load_checkpoint(resume_path);
        ensure_config_match(state, cfg.unet);
        if (state.sched.T != cfg.T || state.beta_start != cfg.beta_start || state.beta_end != cfg.beta_end)
            throw ConfigError("checkpoint schedule (T=" + std::to_string(state.sched.T) +
                              ") does not match configured schedule (T=" + std::to_string(cfg.T) + ")");
        state.cfg.steps = cfg.diffusion.steps;
        std::cout << "resumed from " << resume_path << " at step " << state.step << "\n";
    } else {
        state = make_train_state(sched, cfg.beta_start, cfg.beta_end, cfg.unet, cfg.diffusion,
                                 ds.num_classes, codebook_ptr, cfg.resolved);
    }

    TrainEvalContext eval_ctx;
    const TrainEvalContext* eval_ptr = nullptr;
    if (!cfg.eval_extractor_path.empty() && !cfg.eval_reference_path.empty()) {
        ProtoArtifacts ev = load_proto_artifacts(cfg.eval_extractor_path);
        eval_ctx.extractor = std::move(ev.extractor);
        eval_ctx.codebook = std::move(ev.codebook);
        eval_ctx.gamma = ev.config.gamma;
        eval_ctx.extractor_id = extractor_id(eval_ctx.extractor);
        eval_ctx.reference_images = load_dataset(cfg.eval_reference_path).images;
        eval_ctx.n_samples = cfg.eval_n_samples;
        eval_ctx.guidance_weight = cfg.sample_guidance;
        eval_ctx.clamp_x0 = cfg.sample_clamp_x0;
        eval_ctx.seed = cfg.seed;
        eval_ptr = &eval_ctx;
    }

    auto result = train_diffusion(ds, state, cfg.out_dir, eval_ptr, [](const HistoryRow& r) {
        std::printf("step %6lld  loss %.5f", static_cast<long long>(r.step), r.loss);
        if (std::isfinite(r.fid)) std::printf("  fid %.4f  is %.4f", r.fid, r.is_score);
        std::printf("  (%.1fs)\n", r.wall_seconds);
        std::fflush(stdout);
    });

    write_history_csv(cfg.out_dir + "/history.csv", result.history, state.config_hash);
    save_checkpoint(state, cfg.out_dir + "/ckpt_final.pdck");
    std::cout << "wrote " << cfg.out_dir << "/history.csv and " << cfg.out_dir << "/ckpt_final.pdck\n";
    return 0;
}

int cmd_sample(const CommonArgs& args, const std::string& checkpoint_path) {
    ExperimentConfig cfg = resolve(args);
    fs::create_directories(cfg.out_dir);
    const std::string ckpt = checkpoint_path.empty() ? cfg.out_dir + "/ckpt_final.pdck" : checkpoint_path;
    if (!fs::exists(ckpt)) throw MissingFileError("checkpoint not found: " + ckpt);
    TrainState state = load_checkpoint(ckpt);

    LabeledBatch batch = sample_grid(state.net, state.table, state.sched, cfg.sample_per_class,
                                     cfg.sample_guidance, cfg.seed, cfg.sample_clamp_x0,
                                     cfg.sample_use_beta_variance);
    Image8 grid = make_grid(batch.images, state.table.C, cfg.sample_per_class);
    write_png(cfg.out_dir + "/grid.png", grid);

    TensorFile tf;
    tf.header["kind"] = "sample-batch";
    tf.header["config_hash"] = state.config_hash;
    tf.header["seed"] = cfg.seed;
    tf.header["guidance_weight"] = cfg.sample_guidance;
    tf.header["checkpoint_step"] = state.step;
    tf.tensors["images"] = batch.images;
    Tensor labels({static_cast<int>(batch.labels.size())});
    for (size_t i = 0; i < batch.labels.size(); ++i) labels.data[i] = batch.labels[i];
    tf.tensors["labels"] = labels;
    write_tensor_file(cfg.out_dir + "/samples.pdck", tf);
    std::cout << "wrote " << cfg.out_dir << "/grid.png and " << cfg.out_dir << "/samples.pdck\n";
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& generated_path, const std::string& reference_path,
             const std::string& extractor_path, bool force) {
    ExperimentConfig cfg = resolve(args);
    fs::create_directories(cfg.out_dir);
    if (generated_path.empty() || reference_path.empty() || extractor_path.empty())
        throw ConfigError("eval needs --generated, --reference and --extractor");

    std::string gen_hash, ref_hash;
    Tensor generated = load_image_batch(generated_path, gen_hash);
    Tensor reference = load_image_batch(reference_path, ref_hash);
    if (!force && !gen_hash.empty() && !ref_hash.empty() && gen_hash != ref_hash)
        throw ConfigError("config hash mismatch between generated (" + gen_hash + ") and reference (" +
                          ref_hash + "); pass --force to compare anyway");

    ProtoArtifacts ev = load_proto_artifacts(extractor_path);
    EvalReport rep = evaluate(generated, reference, ev.extractor, ev.codebook, ev.config.gamma,
                              extractor_id(ev.extractor), cfg.seed);
    rep.config_hash = gen_hash.empty() ? cfg.hash : gen_hash;

    const std::string out = cfg.out_dir + "/eval.json";
    std::ofstream os(out);
    os << eval_report_to_json(rep);
    os.close();
    std::cout << eval_report_to_json(rep);
    std::cout << "wrote " << out << "\n";
    return 0;
}

int cmd_viz_proto(const CommonArgs& args, const std::string& proto_path, const std::string& data_path) {
    ExperimentConfig cfg = resolve(args);
    fs::create_directories(cfg.out_dir);
    const std::string ppath = proto_path.empty() ? cfg.out_dir + "/proto.pdpk" : proto_path;
    if (!fs::exists(ppath)) throw MissingFileError("proto artifact not found: " + ppath);
    ProtoArtifacts art = load_proto_artifacts(ppath);
    LabeledDataset ds = resolve_dataset(cfg, data_path);

    Tensor features = extract_features(art.extractor, ds.images);
    PcaResult pca = pca_project(features, 2);
    if (pca.n_components < 2) throw ConfigError("feature covariance is rank-deficient; no 2-D view");

    Tensor proto2({art.codebook.C, 2});
    for (int c = 0; c < art.codebook.C; ++c) {
        auto p = pca.project(art.codebook.prototype(c, 0));
        proto2.at(c, 0) = p[0];
        proto2.at(c, 1) = p[1];
    }

    for (int c = 0; c < art.codebook.C; ++c) {
        std::vector<std::array<double, 2>> cloud;
        for (int n = 0; n < features.dim(0); ++n)
            if (ds.labels[n] == c) cloud.push_back({pca.coords.at(n, 0), pca.coords.at(n, 1)});
        const bool inside = inside_convex_hull(proto2.at(c, 0), proto2.at(c, 1), cloud);
        std::cout << "prototype " << c << " inside class hull: " << (inside ? "yes" : "no") << "\n";
    }

    Image8 img = draw_scatter(pca.coords, ds.labels, proto2);
    write_png(cfg.out_dir + "/viz_proto.png", img);
    std::cout << "explained variance: " << pca.explained_ratio[0] << " " << pca.explained_ratio[1]
              << "\nwrote " << cfg.out_dir << "/viz_proto.png\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"ProtoDiffusion: prototype-conditioned diffusion at desk scale"};
    app.require_subcommand(1);

    CommonArgs gen_args, proto_args, diff_args, sample_args, eval_args, viz_args;
    std::string data_path, proto_path, resume_path, checkpoint_path;
    std::string generated_path, reference_path, extractor_path;
    bool force = false;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic hue-shapes dataset");
    add_common(gen, gen_args);

    auto* proto = app.add_subcommand("proto-train", "Stage I: train extractor and prototype codebook");
    add_common(proto, proto_args);
    proto->add_option("--data", data_path, "dataset file (overrides config dataset section)");

    auto* diff = app.add_subcommand("diff-train", "Stage II: train the conditional denoiser");
    add_common(diff, diff_args);
    diff->add_option("--data", data_path, "dataset file (overrides config dataset section)");
    diff->add_option("--proto", proto_path, "Stage I artifact (default <out>/proto.pdpk)");
    diff->add_option("--resume", resume_path, "resume from a checkpoint");

    auto* sample = app.add_subcommand("sample", "sample a class grid from a checkpoint");
    add_common(sample, sample_args);
    sample->add_option("--checkpoint", checkpoint_path, "checkpoint (default <out>/ckpt_final.pdck)");

    auto* evalc = app.add_subcommand("eval", "FID/IS of a generated batch against a reference");
    add_common(evalc, eval_args);
    evalc->add_option("--generated", generated_path, "generated batch (samples.pdck)");
    evalc->add_option("--reference", reference_path, "reference batch or dataset");
    evalc->add_option("--extractor", extractor_path, "pinned evaluation extractor (proto.pdpk)");
    evalc->add_flag("--force", force, "allow mixed config hashes");

    auto* viz = app.add_subcommand("viz-proto", "2-D PCA scatter of features and prototypes");
    add_common(viz, viz_args);
    viz->add_option("--proto", proto_path, "Stage I artifact (default <out>/proto.pdpk)");
    viz->add_option("--data", data_path, "dataset file (overrides config dataset section)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(gen_args);
        if (proto->parsed()) return cmd_proto_train(proto_args, data_path);
        if (diff->parsed()) return cmd_diff_train(diff_args, data_path, proto_path, resume_path);
        if (sample->parsed()) return cmd_sample(sample_args, checkpoint_path);
        if (evalc->parsed()) return cmd_eval(eval_args, generated_path, reference_path, extractor_path, force);
        if (viz->parsed()) return cmd_viz_proto(viz_args, proto_path, data_path);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
