#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fdm/common.hpp"
#include "fdm/diffusion.hpp"
#include "fdm/graph.hpp"
#include "fdm/unet.hpp"

// Training loop: sample a minibatch, sample t and eps, noise the images,
// predict, take one Adam step on the plain noise-prediction MSE. There is no
// other loss term — in particular nothing that touches the masks directly.
// EMA shadow weights are maintained every step and used for all inference.
//
// Checkpoints are self-describing: magic, a JSON manifest (format version,
// architecture, training config, step, RNG states, tensor directory), then
// raw little-endian float32 tensor payloads in manifest order.

namespace fdm {

struct CheckpointVersionError : IoError {
    using IoError::IoError;
};
struct CheckpointTruncatedError : IoError {
    using IoError::IoError;
};

struct TrainConfig {
    double lr = 1e-4;
    double ema_rate = 0.9999;
    int batch_size = 64;
    long total_iters = 0;
    std::uint64_t seed = 0;
    double grad_clip_norm = 0.0;  // <= 0 disables clipping
    std::string precision = "f32";
    long checkpoint_every = 1000;
    long log_every = 50;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError(strformat("train.lr: must be > 0, got %g", lr));
        if (!(ema_rate >= 0.0 && ema_rate < 1.0))
            throw ConfigError(strformat("train.ema_rate: must be in [0, 1), got %g", ema_rate));
        if (batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
        if (total_iters < 0) throw ConfigError("train.total_iters: must be >= 0");
        if (precision != "f32")
            throw ConfigError("train.precision: only 'f32' is supported, got '" + precision + "'");
        if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every: must be >= 0");
        if (log_every < 1) throw ConfigError("train.log_every: must be >= 1");
    }
};

template <typename T>
struct TrainState {
    FactorizedUNet<T> model;
    TrainConfig cfg;
    long step = 0;
    std::vector<Tensor<T>> ema;     // parallel to model.params.entries
    std::vector<Tensor<T>> adam_m;
    std::vector<Tensor<T>> adam_v;
    RngStream rng_t{0}, rng_eps{0};
};

template <typename T>
TrainState<T> init_train_state(const ArchSpec& arch, Variant variant, const TrainConfig& cfg) {
    cfg.validate();
    TrainState<T> st;
    st.cfg = cfg;
    st.model = FactorizedUNet<T>::build(arch, variant, cfg.seed);
    for (auto& [name, v] : st.model.params.entries) {
        st.ema.push_back(v->val);  // EMA starts as a copy of the weights
        st.adam_m.push_back(Tensor<T>::zeros(v->val.shape));
        st.adam_v.push_back(Tensor<T>::zeros(v->val.shape));
    }
    st.rng_t = RngStream::keyed(cfg.seed, "train.t");
    st.rng_eps = RngStream::keyed(cfg.seed, "train.eps");
    return st;
}

// One optimization step on one batch (values in [-1,1]); returns the loss.
template <typename T>
double train_step(TrainState<T>& st, const Tensor<T>& batch, const NoiseSchedule& sched) {
    check_rank4(batch, "train_step batch");
    int B = batch.dim(0);
    TimestepBatch tb = sample_timesteps(B, sched.T, st.rng_t);
    Tensor<T> eps(batch.shape);
    for (auto& x : eps.v) x = T(st.rng_eps.normal());
    Tensor<T> x_t = forward_diffuse(batch, tb, eps, sched);

    graph::clear_tape<T>();
    st.model.params.zero_grads();
    auto [eps_hat, m] = st.model.predict_noise(graph::constant(x_t), tb);
    auto loss = graph::mse(eps_hat, eps);
    double loss_v = double(loss->val.v[0]);
    if (!std::isfinite(loss_v)) {
        std::string ts;
        for (int t : tb.t) ts += std::to_string(t) + " ";
        throw NumericError(strformat("non-finite loss %g at step %ld (t = %s)", loss_v, st.step,
                                     ts.c_str()));
    }
    graph::backward(loss);
    graph::clear_tape<T>();  // free activations before the update

    auto& entries = st.model.params.entries;
    if (st.cfg.grad_clip_norm > 0.0) {
        double sq = 0.0;
        for (auto& [_, v] : entries) sq += kernels::sumsq(v->g().data(), v->g().numel());
        double norm = std::sqrt(sq);
        if (norm > st.cfg.grad_clip_norm) {
            T s = T(st.cfg.grad_clip_norm / norm);
            for (auto& [_, v] : entries) kernels::scale(s, v->g().data(), v->g().numel());
        }
    }

    long step1 = st.step + 1;  // 1-based for bias correction
    double bias1 = 1.0 - std::pow(st.cfg.adam_beta1, double(step1));
    double bias2 = 1.0 - std::pow(st.cfg.adam_beta2, double(step1));
    for (std::size_t i = 0; i < entries.size(); i++) {
        auto& v = entries[i].second;
        kernels::adam_step(v->val.data(), v->g().data(), st.adam_m[i].data(), st.adam_v[i].data(),
                           v->val.numel(), T(st.cfg.lr), T(st.cfg.adam_beta1), T(st.cfg.adam_beta2),
                           T(st.cfg.adam_eps), bias1, bias2);
        if (!v->val.all_finite())
            throw NumericError(strformat("non-finite parameter '%s' after update at step %ld",
                                         entries[i].first.c_str(), st.step));
        kernels::ema_step(st.ema[i].data(), v->val.data(), T(st.cfg.ema_rate), st.ema[i].numel());
    }
    st.step = step1;
    return loss_v;
}

// Fresh model whose weights are the EMA shadow copy (used for all inference).
template <typename T>
FactorizedUNet<T> model_with_ema(const TrainState<T>& st) {
    auto m = FactorizedUNet<T>::build(st.model.arch, st.model.variant, st.model.params.seed);
    for (std::size_t i = 0; i < m.params.entries.size(); i++)
        m.params.entries[i].second->val = st.ema[i];
    return m;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline nlohmann::json arch_to_json(const ArchSpec& a) {
    return {{"base_channels", a.base_channels},
            {"stage_multipliers", a.stage_multipliers},
            {"res_blocks_per_stage", a.res_blocks_per_stage},
            {"num_regions", a.num_regions},
            {"img_channels", a.img_channels},
            {"resolution", a.resolution},
            {"time_embed_dim", a.time_embed_dim},
            {"attention_at_lowest", a.attention_at_lowest}};
}

inline ArchSpec arch_from_json(const nlohmann::json& j) {
    ArchSpec a;
    a.base_channels = j.at("base_channels").get<int>();
    a.stage_multipliers = j.at("stage_multipliers").get<std::vector<int>>();
    a.res_blocks_per_stage = j.at("res_blocks_per_stage").get<int>();
    a.num_regions = j.at("num_regions").get<int>();
    a.img_channels = j.at("img_channels").get<int>();
    a.resolution = j.at("resolution").get<int>();
    a.time_embed_dim = j.at("time_embed_dim").get<int>();
    a.attention_at_lowest = j.at("attention_at_lowest").get<bool>();
    return a;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {{"lr", c.lr},
            {"ema_rate", c.ema_rate},
            {"batch_size", c.batch_size},
            {"total_iters", c.total_iters},
            {"seed", c.seed},
            {"grad_clip_norm", c.grad_clip_norm},
            {"precision", c.precision},
            {"checkpoint_every", c.checkpoint_every},
            {"log_every", c.log_every},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_eps", c.adam_eps}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lr = j.at("lr").get<double>();
    c.ema_rate = j.at("ema_rate").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.total_iters = j.at("total_iters").get<long>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.grad_clip_norm = j.at("grad_clip_norm").get<double>();
    c.precision = j.at("precision").get<std::string>();
    c.checkpoint_every = j.at("checkpoint_every").get<long>();
    c.log_every = j.at("log_every").get<long>();
    c.adam_beta1 = j.at("adam_beta1").get<double>();
    c.adam_beta2 = j.at("adam_beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    return c;
}

inline constexpr char kCheckpointMagic[8] = {'F', 'D', 'M', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void save_checkpoint(const TrainState<T>& st, const std::string& path) {
    namespace fs = std::filesystem;
    nlohmann::json manifest;
    manifest["format_version"] = 1;
    manifest["arch"] = arch_to_json(st.model.arch);
    manifest["variant"] = to_string(st.model.variant);
    manifest["train_config"] = train_config_to_json(st.cfg);
    manifest["step"] = st.step;
    manifest["rng"] = {{"t", st.rng_t.serialize()}, {"eps", st.rng_eps.serialize()}};
    nlohmann::json tensors = nlohmann::json::array();
    const char* kinds[4] = {"raw", "ema", "adam_m", "adam_v"};
    for (auto& [name, v] : st.model.params.entries)
        for (const char* kind : kinds)
            tensors.push_back({{"name", name}, {"kind", kind}, {"shape", v->val.shape}});
    manifest["tensors"] = std::move(tensors);
    std::string mbytes = manifest.dump();  // keys sorted -> deterministic bytes

    fs::path p(path);
    fs::path tmp = p;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open checkpoint file for writing: " + tmp.string());
        f.write(kCheckpointMagic, 8);
        std::uint64_t len = mbytes.size();
        f.write(reinterpret_cast<const char*>(&len), 8);
        f.write(mbytes.data(), std::streamsize(mbytes.size()));
        for (std::size_t i = 0; i < st.model.params.entries.size(); i++) {
            auto& v = st.model.params.entries[i].second;
            auto write_f32 = [&f](const Tensor<T>& t) {
                if constexpr (std::is_same_v<T, float>) {
                    f.write(reinterpret_cast<const char*>(t.data()),
                            std::streamsize(t.numel() * 4));
                } else {
                    std::vector<float> buf(t.v.begin(), t.v.end());
                    f.write(reinterpret_cast<const char*>(buf.data()),
                            std::streamsize(buf.size() * 4));
                }
            };
            write_f32(v->val);
            write_f32(st.ema[i]);
            write_f32(st.adam_m[i]);
            write_f32(st.adam_v[i]);
        }
        if (!f) throw IoError("write failed for checkpoint file: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, p, ec);
    if (ec) throw IoError("cannot move checkpoint into place at " + p.string() + ": " + ec.message());
}

template <typename T>
TrainState<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint file: " + path);
    char magic[8];
    f.read(magic, 8);
    if (f.gcount() != 8 || std::string(magic, 8) != std::string(kCheckpointMagic, 8))
        throw IoError("not a checkpoint file: " + path);
    std::uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 8);
    if (f.gcount() != 8 || len == 0 || len > (1ull << 30))
        throw CheckpointTruncatedError("checkpoint manifest unreadable: " + path);
    std::string mbytes(len, '\0');
    f.read(mbytes.data(), std::streamsize(len));
    if (std::uint64_t(f.gcount()) != len)
        throw CheckpointTruncatedError("checkpoint truncated in manifest: " + path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mbytes);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed checkpoint manifest: ") + e.what());
    }
    int version = manifest.at("format_version").get<int>();
    if (version != 1)
        throw CheckpointVersionError(
            strformat("unsupported checkpoint format version %d (expected 1): %s", version,
                      path.c_str()));

    ArchSpec arch = arch_from_json(manifest.at("arch"));
    Variant variant = variant_from_string(manifest.at("variant").get<std::string>());
    TrainConfig cfg = train_config_from_json(manifest.at("train_config"));
    TrainState<T> st = init_train_state<T>(arch, variant, cfg);
    st.step = manifest.at("step").get<long>();
    st.rng_t = RngStream::deserialize(manifest.at("rng").at("t").get<std::string>());
    st.rng_eps = RngStream::deserialize(manifest.at("rng").at("eps").get<std::string>());

    auto& entries = st.model.params.entries;
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != entries.size() * 4)
        throw ShapeError(strformat("checkpoint lists %zu tensors, model has %zu parameters x 4",
                                   tensors.size(), entries.size()));
    std::size_t ti = 0;
    const char* kinds[4] = {"raw", "ema", "adam_m", "adam_v"};
    for (std::size_t i = 0; i < entries.size(); i++) {
        auto& [name, v] = entries[i];
        for (int k = 0; k < 4; k++, ti++) {
            const auto& e = tensors[ti];
            std::string ename = e.at("name").get<std::string>();
            std::string ekind = e.at("kind").get<std::string>();
            Shape eshape = e.at("shape").get<Shape>();
            if (ename != name || ekind != kinds[k])
                throw ShapeError(strformat("checkpoint tensor %zu: expected %s/%s, found %s/%s", ti,
                                           name.c_str(), kinds[k], ename.c_str(), ekind.c_str()));
            if (eshape != v->val.shape)
                throw ShapeError("checkpoint tensor '" + name + "' (" + ekind + "): stored shape " +
                                 shape_str(eshape) + " does not match architecture shape " +
                                 shape_str(v->val.shape));
            Tensor<T>* dst = nullptr;
            switch (k) {
                case 0: dst = &v->val; break;
                case 1: dst = &st.ema[i]; break;
                case 2: dst = &st.adam_m[i]; break;
                case 3: dst = &st.adam_v[i]; break;
            }
            std::vector<float> buf(std::size_t(dst->numel()));
            f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * 4));
            if (std::uint64_t(f.gcount()) != buf.size() * 4)
                throw CheckpointTruncatedError("checkpoint truncated in tensor '" + name + "' (" +
                                               ekind + "): " + path);
            for (std::size_t j = 0; j < buf.size(); j++) dst->v[j] = T(buf[j]);
        }
    }
    return st;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

// Deterministic per-epoch shuffle, derived from (seed, epoch) rather than a
// consumed stream so a resumed run sees the identical permutation.
inline std::vector<int> epoch_permutation(std::uint64_t seed, long epoch, int n) {
    std::vector<int> perm(static_cast<std::size_t>(n));
    for (int i = 0; i < n; i++) perm[std::size_t(i)] = i;
    RngStream rng = RngStream::keyed(seed, strformat("train.perm.%ld", epoch));
    for (int i = n - 1; i > 0; i--) {
        int j = int(rng.uniform_int(0, i));
        std::swap(perm[std::size_t(i)], perm[std::size_t(j)]);
    }
    return perm;
}

// Runs until cfg.total_iters, saving `checkpoint.ckpt` in out_dir at the
// configured cadence and appending `step,loss,seconds` lines to metrics.csv.
// on_log (optional) observes every logged step.
template <typename T>
void train_loop(TrainState<T>& st, const Tensor<T>& images, const NoiseSchedule& sched,
                const std::string& out_dir,
                const std::function<void(long, double, double)>& on_log = nullptr) {
    namespace fs = std::filesystem;
    check_rank4(images, "train_loop dataset");
    int N = images.dim(0);
    if (N < 1) throw ConfigError("train_loop: dataset is empty");
    int B = st.cfg.batch_size;
    long spe = N / B;  // steps per epoch; remainder dropped
    if (spe < 1)
        throw ConfigError(strformat("train.batch_size %d exceeds dataset size %d", B, N));

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    std::string ckpt_path = (fs::path(out_dir) / "checkpoint.ckpt").string();
    std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();
    bool fresh_log = !fs::exists(metrics_path);
    std::ofstream log(metrics_path, std::ios::app);
    if (!log) throw IoError("cannot open metrics log: " + metrics_path);
    if (fresh_log) log << "step,loss,seconds\n";

    if (st.step == 0) save_checkpoint(st, ckpt_path);

    std::int64_t per_img = images.numel() / N;
    Tensor<T> batch({B, images.dim(1), images.dim(2), images.dim(3)});
    std::vector<int> perm;
    long perm_epoch = -1;
    auto t0 = std::chrono::steady_clock::now();

    while (st.step < st.cfg.total_iters) {
        long epoch = st.step / spe;
        long pos = (st.step % spe) * B;
        if (epoch != perm_epoch) {
            perm = epoch_permutation(st.cfg.seed, epoch, N);
            perm_epoch = epoch;
        }
        for (int i = 0; i < B; i++) {
            int src = perm[std::size_t(pos + i)];
            std::copy(images.data() + src * per_img, images.data() + (src + 1) * per_img,
                      batch.data() + i * per_img);
        }
        double loss = train_step(st, batch, sched);
        bool last = st.step >= st.cfg.total_iters;
        if (st.step % st.cfg.log_every == 0 || last) {
            double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            log << st.step << ',' << strformat("%.8g", loss) << ',' << strformat("%.3f", secs) << '\n';
            log.flush();
            if (on_log) on_log(st.step, loss, secs);
        }
        if (st.cfg.checkpoint_every > 0 && st.step % st.cfg.checkpoint_every == 0)
            save_checkpoint(st, ckpt_path);
    }
    save_checkpoint(st, ckpt_path);
}

// Mean denoising MSE over a held-out set with deterministic (seed-keyed)
// timesteps and noise; the proxy sample-quality number for ablations.
template <typename T>
double validation_denoise_loss(const FactorizedUNet<T>& model, const Tensor<T>& images,
                               const NoiseSchedule& sched, std::uint64_t seed, int batch_size = 16) {
    check_rank4(images, "validation images");
    int N = images.dim(0);
    std::int64_t per_img = images.numel() / std::max(N, 1);
    RngStream rng = RngStream::keyed(seed, "val.denoise");
    double total_sq = 0.0;
    std::int64_t total_n = 0;
    for (int at = 0; at < N; at += batch_size) {
        int B = std::min(batch_size, N - at);
        Tensor<T> x0({B, images.dim(1), images.dim(2), images.dim(3)});
        std::copy(images.data() + at * per_img, images.data() + (at + B) * per_img, x0.data());
        TimestepBatch tb = sample_timesteps(B, sched.T, rng);
        Tensor<T> eps(x0.shape);
        for (auto& x : eps.v) x = T(rng.normal());
        Tensor<T> x_t = forward_diffuse(x0, tb, eps, sched);
        auto [eps_hat, m] = model.predict_noise_eval(x_t, tb);
        for (std::int64_t i = 0; i < eps_hat.numel(); i++) {
            double d = double(eps_hat.v[std::size_t(i)]) - double(eps.v[std::size_t(i)]);
            total_sq += d * d;
        }
        total_n += eps_hat.numel();
    }
    return total_n ? total_sq / double(total_n) : 0.0;
}

}  // namespace fdm
