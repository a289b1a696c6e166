#include "protodiff/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "protodiff/checkpoint.hpp"
#include "protodiff/errors.hpp"
#include "protodiff/eval.hpp"
#include "protodiff/sampler.hpp"

namespace protodiff {

std::string to_string(EmbeddingMode m) {
    switch (m) {
        case EmbeddingMode::baseline_random: return "baseline-random";
        case EmbeddingMode::proto_frozen: return "proto-frozen";
        default: return "proto-unfrozen";
    }
}

EmbeddingMode embedding_mode_from_string(const std::string& s) {
    if (s == "baseline-random") return EmbeddingMode::baseline_random;
    if (s == "proto-frozen") return EmbeddingMode::proto_frozen;
    if (s == "proto-unfrozen") return EmbeddingMode::proto_unfrozen;
    throw ConfigError("unknown embedding_mode: " + s +
                      " (expected baseline-random, proto-frozen or proto-unfrozen)");
}

TrainState make_train_state(const NoiseSchedule& sched, double beta_start, double beta_end,
                            const UNetConfig& unet_cfg, const DiffusionTrainConfig& cfg, int num_classes,
                            const Codebook* codebook, const nlohmann::json& config_echo) {
    if (!(cfg.p_uncond >= 0.0 && cfg.p_uncond < 1.0))
        throw ConfigError("diffusion config: p_uncond must be in [0,1)");
    if (cfg.batch_size < 1 || cfg.steps < 0) throw ConfigError("diffusion config: bad batch/steps");

    TrainState st;
    st.sched = sched;
    st.beta_start = beta_start;
    st.beta_end = beta_end;
    st.cfg = cfg;
    st.config_echo = config_echo;
    st.config_hash = config_echo.is_null() ? "" : fnv1a_hex(config_echo.dump());

    Rng seeder(cfg.seed);
    const uint64_t unet_seed = seeder.next_u64();
    const uint64_t table_seed = seeder.next_u64();
    st.net = build_unet(unet_cfg, unet_seed);

    if (cfg.embedding_mode == EmbeddingMode::baseline_random) {
        st.table = init_random(num_classes, unet_cfg.proto_dim, table_seed, /*frozen=*/false);
    } else {
        if (codebook == nullptr)
            throw MissingFileError("embedding_mode " + to_string(cfg.embedding_mode) +
                                   " requires a Stage I codebook");
        if (codebook->C != num_classes)
            throw ConfigError("codebook class count " + std::to_string(codebook->C) +
                              " != dataset classes " + std::to_string(num_classes));
        if (codebook->dim != unet_cfg.proto_dim)
            throw ConfigError("codebook dim " + std::to_string(codebook->dim) + " != configured d_p " +
                              std::to_string(unet_cfg.proto_dim));
        Codebook cb = *codebook;
        if (cfg.normalize_prototypes) {
            for (int i = 0; i < cb.C; ++i)
                for (int j = 0; j < cb.K; ++j) {
                    auto p = cb.prototype_mut(i, j);
                    double norm = 0.0;
                    for (double v : p) norm += v * v;
                    norm = std::sqrt(norm);
                    if (norm > 0.0)
                        for (auto& v : p) v /= norm;
                }
        }
        st.table = init_from_codebook(cb, cfg.embedding_mode == EmbeddingMode::proto_frozen);
    }

    st.opt.lr = cfg.learning_rate;
    st.opt.weight_decay = cfg.weight_decay;
    st.opt.init(st.net.params);
    st.table_m = Tensor(st.table.rows.shape);
    st.table_v = Tensor(st.table.rows.shape);
    st.rng = seeder; // training stream continues after the derived seeds
    return st;
}

std::vector<int> apply_conditioning_dropout(const std::vector<int>& labels, double p, Rng& rng) {
    std::vector<int> out(labels.size());
    for (size_t n = 0; n < labels.size(); ++n) out[n] = (rng.uniform() < p) ? kNullLabel : labels[n];
    return out;
}

double diffusion_train_step(const Tensor& images, const std::vector<int>& labels, TrainState& state) {
    const UNetConfig& ucfg = state.net.cfg;
    const int B = images.dim(0);
    if (B == 0) throw ShapeError("diffusion_train_step: empty batch");
    if (static_cast<int>(labels.size()) != B) throw ShapeError("diffusion_train_step: label count mismatch");
    const size_t D = images.numel() / B;
    const int T = state.sched.T;

    // Phase-ordered draws: all t, then all dropout coins, then all noise.
    std::vector<int> ts(B);
    for (int n = 0; n < B; ++n)
        ts[n] = static_cast<int>(state.rng.uniform_int(static_cast<uint64_t>(T)));
    const std::vector<int> eff_labels = apply_conditioning_dropout(labels, state.cfg.p_uncond, state.rng);
    Tensor eps(images.shape);
    state.rng.fill_normal(eps.data);

    Tensor xt(images.shape);
    for (int n = 0; n < B; ++n)
        q_sample({images.data.data() + n * D, D}, ts[n], {eps.data.data() + n * D, D}, state.sched,
                 {xt.data.data() + n * D, D});

    Tensor z({B, ucfg.cond_dim()});
    for (int n = 0; n < B; ++n) {
        auto zn = build_conditioning(ts[n], eff_labels[n], state.table, ucfg.time_dim);
        std::copy(zn.begin(), zn.end(), z.data.begin() + static_cast<size_t>(n) * zn.size());
    }

    std::shared_ptr<UNetTrace> trace;
    Tensor eps_hat = unet_forward(state.net, xt, z, /*training=*/true, &state.rng, &trace);

    double loss = 0.0;
    Tensor d_eps(eps_hat.shape);
    const double inv = 1.0 / (static_cast<double>(B) * static_cast<double>(D));
    for (size_t i = 0; i < eps_hat.numel(); ++i) {
        const double diff = eps_hat.data[i] - eps.data[i];
        loss += diff * diff;
        d_eps.data[i] = 2.0 * diff * inv;
    }
    loss *= inv;
    if (!std::isfinite(loss))
        throw NonFiniteError("diffusion training: non-finite loss at step " +
                             std::to_string(state.step + 1) + " (batch size " + std::to_string(B) + ")");

    UNetGrads grads = unet_backward(state.net, *trace, d_eps);

    // Class-embedding gradients from the conditioning input gradient.
    Tensor row_grads(state.table.rows.shape);
    for (int n = 0; n < B; ++n) {
        const int r = state.table.row_index(eff_labels[n]);
        for (int k = 0; k < ucfg.proto_dim; ++k)
            row_grads.data[static_cast<size_t>(r) * ucfg.proto_dim + k] +=
                grads.dz.at(n, ucfg.time_dim + k);
    }

    if (state.cfg.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& [k, g] : grads.params)
            for (double v : g.data) sq += v * v;
        for (double v : row_grads.data) sq += v * v;
        const double norm = std::sqrt(sq);
        if (norm > state.cfg.grad_clip) {
            const double scale = state.cfg.grad_clip / norm;
            for (auto& [k, g] : grads.params)
                for (auto& v : g.data) v *= scale;
            for (auto& v : row_grads.data) v *= scale;
        }
    }

    state.opt.step(state.net.params, grads.params);

    // Table rows share the optimizer step count. Frozen class rows are never
    // touched; the null row always trains.
    const int d_p = state.table.d_p;
    for (int r = 0; r <= state.table.C; ++r) {
        if (state.table.frozen && r < state.table.C) continue;
        const size_t off = static_cast<size_t>(r) * d_p;
        state.opt.update_span({state.table.rows.data.data() + off, static_cast<size_t>(d_p)},
                              {row_grads.data.data() + off, static_cast<size_t>(d_p)},
                              {state.table_m.data.data() + off, static_cast<size_t>(d_p)},
                              {state.table_v.data.data() + off, static_cast<size_t>(d_p)});
    }

    ++state.step;
    return loss;
}

namespace {

Tensor sample_balanced(const UNet& net, const ConditioningTable& table, const NoiseSchedule& sched,
                       int n, double w, bool clamp_x0, uint64_t seed) {
    const int C = table.C;
    Tensor out({n, net.cfg.in_channels, net.cfg.image_size, net.cfg.image_size});
    const size_t img = out.numel() / n;
    Rng seeder(seed);
    int written = 0;
    for (int c = 0; c < C; ++c) {
        const int nc = n / C + (c < n % C ? 1 : 0);
        if (nc == 0) continue;
        SampleRequest req;
        req.label = c;
        req.guidance_weight = w;
        req.n_samples = nc;
        req.seed = seeder.next_u64();
        req.clamp_x0 = clamp_x0;
        Tensor batch = ddpm_sample(net, table, sched, req);
        std::copy(batch.data.begin(), batch.data.end(), out.data.begin() + static_cast<size_t>(written) * img);
        written += nc;
    }
    return out;
}

} // namespace

TrainRunResult train_diffusion(const LabeledDataset& dataset, TrainState& state,
                               const std::string& out_dir, const TrainEvalContext* eval_ctx,
                               const std::function<void(const HistoryRow&)>& on_row) {
    const int N = dataset.images.dim(0);
    if (N == 0) throw ShapeError("train_diffusion: empty dataset");
    if (dataset.num_classes != state.table.C)
        throw ConfigError("dataset classes " + std::to_string(dataset.num_classes) +
                          " != table classes " + std::to_string(state.table.C));
    const UNetConfig& ucfg = state.net.cfg;
    if (dataset.images.dim(1) != ucfg.in_channels || dataset.images.dim(2) != ucfg.image_size)
        throw ConfigError("dataset images " + dataset.images.shape_str() +
                          " incompatible with unet config (channels " + std::to_string(ucfg.in_channels) +
                          ", size " + std::to_string(ucfg.image_size) + ")");

    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

    TrainRunResult result;
    const auto t0 = std::chrono::steady_clock::now();
    const size_t img = dataset.images.numel() / N;
    const int B = state.cfg.batch_size;
    Tensor batch({B, ucfg.in_channels, ucfg.image_size, ucfg.image_size});
    std::vector<int> labels(B);

    double loss_acc = 0.0;
    int loss_count = 0;
    while (state.step < state.cfg.steps) {
        for (int k = 0; k < B; ++k) {
            const int idx = static_cast<int>(state.rng.uniform_int(static_cast<uint64_t>(N)));
            std::copy(dataset.images.data.begin() + idx * img, dataset.images.data.begin() + (idx + 1) * img,
                      batch.data.begin() + k * img);
            labels[k] = dataset.labels[idx];
        }
        loss_acc += diffusion_train_step(batch, labels, state);
        ++loss_count;

        const bool at_eval = (state.step % state.cfg.eval_every == 0) || (state.step == state.cfg.steps);
        if (at_eval) {
            HistoryRow row;
            row.step = state.step;
            row.loss = loss_acc / std::max(loss_count, 1);
            loss_acc = 0.0;
            loss_count = 0;
            if (eval_ctx != nullptr) {
                const uint64_t eval_seed = Rng(eval_ctx->seed ^ static_cast<uint64_t>(state.step)).next_u64();
                Tensor generated = sample_balanced(state.net, state.table, state.sched,
                                                   eval_ctx->n_samples, eval_ctx->guidance_weight,
                                                   eval_ctx->clamp_x0, eval_seed);
                EvalReport rep = evaluate(generated, eval_ctx->reference_images, eval_ctx->extractor,
                                          eval_ctx->codebook, eval_ctx->gamma, eval_ctx->extractor_id,
                                          eval_seed);
                row.fid = rep.fid;
                row.is_score = rep.is_score;
            }
            row.wall_seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            result.history.push_back(row);
            if (!out_dir.empty()) {
                char name[64];
                std::snprintf(name, sizeof(name), "ckpt_step%07lld.pdck",
                              static_cast<long long>(state.step));
                const std::string path = out_dir + "/" + name;
                save_checkpoint(state, path);
                result.checkpoint_paths.push_back(path);
            }
            if (on_row) on_row(row);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// checkpoint io
// ---------------------------------------------------------------------------

namespace {

nlohmann::json unet_config_json(const UNetConfig& c) {
    return {{"base_channels", c.base_channels}, {"ch_mult", c.ch_mult},
            {"blocks_per_res", c.blocks_per_res}, {"dropout_rate", c.dropout_rate},
            {"time_dim", c.time_dim},             {"proto_dim", c.proto_dim},
            {"cond_hidden", c.cond_hidden},       {"in_channels", c.in_channels},
            {"out_channels", c.out_channels},     {"image_size", c.image_size},
            {"norm_groups", c.norm_groups}};
}

UNetConfig unet_config_from_json(const nlohmann::json& j) {
    UNetConfig c;
    c.base_channels = j.at("base_channels");
    c.ch_mult = j.at("ch_mult").get<std::vector<int>>();
    c.blocks_per_res = j.at("blocks_per_res");
    c.dropout_rate = j.at("dropout_rate");
    c.time_dim = j.at("time_dim");
    c.proto_dim = j.at("proto_dim");
    c.cond_hidden = j.at("cond_hidden");
    c.in_channels = j.at("in_channels");
    c.out_channels = j.at("out_channels");
    c.image_size = j.at("image_size");
    c.norm_groups = j.at("norm_groups");
    return c;
}

} // namespace

void save_checkpoint(const TrainState& state, const std::string& path) {
    TensorFile tf;
    auto& h = tf.header;
    h["kind"] = "diffusion-checkpoint";
    h["step"] = state.step;
    h["schedule"] = {{"T", state.sched.T}, {"beta_start", state.beta_start},
                     {"beta_end", state.beta_end}, {"family", "linear"}};
    h["unet"] = unet_config_json(state.net.cfg);
    h["train"] = {{"steps", state.cfg.steps},
                  {"batch_size", state.cfg.batch_size},
                  {"learning_rate", state.cfg.learning_rate},
                  {"weight_decay", state.cfg.weight_decay},
                  {"p_uncond", state.cfg.p_uncond},
                  {"embedding_mode", to_string(state.cfg.embedding_mode)},
                  {"eval_every", state.cfg.eval_every},
                  {"seed", state.cfg.seed},
                  {"grad_clip", state.cfg.grad_clip},
                  {"normalize_prototypes", state.cfg.normalize_prototypes}};
    h["table"] = {{"C", state.table.C}, {"d_p", state.table.d_p}, {"frozen", state.table.frozen}};
    const auto rs = state.rng.state();
    h["rng_state"] = {rs[0], rs[1], rs[2], rs[3]};
    h["opt_t"] = state.opt.t;
    h["config_hash"] = state.config_hash;
    h["config_echo"] = state.config_echo;

    for (const auto& [key, t] : state.net.params) {
        tf.tensors["param." + key] = t;
        tf.tensors["opt.m." + key] = state.opt.m.at(key);
        tf.tensors["opt.v." + key] = state.opt.v.at(key);
    }
    tf.tensors["table.rows"] = state.table.rows;
    tf.tensors["table.m"] = state.table_m;
    tf.tensors["table.v"] = state.table_v;
    write_tensor_file(path, tf);
}

TrainState load_checkpoint(const std::string& path) {
    TensorFile tf = read_tensor_file(path);
    if (tf.header.value("kind", "") != "diffusion-checkpoint")
        throw IoError("not a diffusion checkpoint: " + path);

    TrainState st;
    const auto& h = tf.header;
    st.beta_start = h.at("schedule").at("beta_start");
    st.beta_end = h.at("schedule").at("beta_end");
    st.sched = make_linear_schedule(h.at("schedule").at("T"), st.beta_start, st.beta_end);

    const UNetConfig ucfg = unet_config_from_json(h.at("unet"));
    st.net = build_unet(ucfg, 0);

    st.cfg.steps = h.at("train").at("steps");
    st.cfg.batch_size = h.at("train").at("batch_size");
    st.cfg.learning_rate = h.at("train").at("learning_rate");
    st.cfg.weight_decay = h.at("train").at("weight_decay");
    st.cfg.p_uncond = h.at("train").at("p_uncond");
    st.cfg.embedding_mode = embedding_mode_from_string(h.at("train").at("embedding_mode"));
    st.cfg.eval_every = h.at("train").at("eval_every");
    st.cfg.seed = h.at("train").at("seed");
    st.cfg.grad_clip = h.at("train").at("grad_clip");
    st.cfg.normalize_prototypes = h.at("train").at("normalize_prototypes");

    st.step = h.at("step");
    st.config_hash = h.value("config_hash", "");
    st.config_echo = h.value("config_echo", nlohmann::json());

    std::array<uint64_t, 4> rs;
    for (int i = 0; i < 4; ++i) rs[i] = h.at("rng_state").at(i).get<uint64_t>();
    st.rng.set_state(rs);

    st.opt.lr = st.cfg.learning_rate;
    st.opt.weight_decay = st.cfg.weight_decay;
    st.opt.t = h.at("opt_t");

    for (auto& [key, t] : st.net.params) {
        const std::string pk = "param." + key;
        auto it = tf.tensors.find(pk);
        if (it == tf.tensors.end()) throw IoError("checkpoint missing tensor " + pk + " in " + path);
        if (it->second.shape != t.shape)
            throw IoError("checkpoint tensor " + pk + " has shape " + it->second.shape_str() +
                          ", expected " + t.shape_str());
        t = it->second;
        st.opt.m[key] = tf.tensors.at("opt.m." + key);
        st.opt.v[key] = tf.tensors.at("opt.v." + key);
    }

    st.table.C = h.at("table").at("C");
    st.table.d_p = h.at("table").at("d_p");
    st.table.frozen = h.at("table").at("frozen");
    st.table.rows = tf.tensors.at("table.rows");
    st.table_m = tf.tensors.at("table.m");
    st.table_v = tf.tensors.at("table.v");
    return st;
}

void ensure_config_match(const TrainState& loaded, const UNetConfig& expected) {
    const auto a = unet_config_json(loaded.net.cfg);
    const auto b = unet_config_json(expected);
    if (a != b)
        throw ConfigError("checkpoint config mismatch: checkpoint has " + a.dump() +
                          ", requested " + b.dump());
}

void write_history_csv(const std::string& path, const std::vector<HistoryRow>& rows,
                       const std::string& config_hash) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write history: " + path);
    os << "# config_hash=" << config_hash << "\n";
    os << "step,loss,fid,is,wall_seconds\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.3f\n",
                      static_cast<long long>(r.step), r.loss, r.fid, r.is_score, r.wall_seconds);
        os << buf;
    }
}

} // namespace protodiff
