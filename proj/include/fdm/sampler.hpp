#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "fdm/common.hpp"
#include "fdm/diffusion.hpp"
#include "fdm/unet.hpp"

// Inference paths: one-step segmentation of real images (noise to a small
// timestep, read the mask generator's output from a single pass) and full
// T-step ancestral sampling that yields an image together with the masks from
// the final (t=1) model evaluation. Callers are expected to pass a model
// carrying EMA weights (see model_with_ema).

namespace fdm {

struct SegmentationResult {
    Tensor<float> soft;  // (B, K, H, W)
    Tensor<int> hard;    // (B, H, W), argmax labels, ties -> lowest channel
    int t_used = 0;
};

struct GenerationResult {
    Tensor<float> images;  // (B, C, H, W), clamped to [-1, 1]
    SegmentationResult masks;
    int steps = 0;
};

struct TrajectoryRecord {
    int t = 0;              // timestep of the model evaluation this came from
    Tensor<float> images;   // x_{t-1} (raw; clamped only for the final record)
    Tensor<float> soft;     // masks from the evaluation at t
};

// Default segmentation timestep, scaled from the reference schedule length.
inline int default_t_seg(int T) {
    return std::max(1, int(std::lround(30.0 * double(T) / 1000.0)));
}

template <typename T>
Tensor<int> argmax_channels(const Tensor<T>& soft) {
    check_rank4(soft, "argmax input");
    int B = soft.dim(0), K = soft.dim(1), H = soft.dim(2), W = soft.dim(3);
    Tensor<int> hard({B, H, W});
    std::int64_t HW = std::int64_t(H) * W;
    for (int b = 0; b < B; b++)
        for (std::int64_t i = 0; i < HW; i++) {
            int best = 0;
            T bv = soft.v[std::size_t(b * K * HW + i)];
            for (int k = 1; k < K; k++) {
                T v = soft.v[std::size_t(b * K * HW + k * HW + i)];
                if (v > bv) {  // strict: ties keep the lowest channel
                    bv = v;
                    best = k;
                }
            }
            hard.v[std::size_t(b * HW + i)] = best;
        }
    return hard;
}

// One-step segmentation: noise x0 to t_seg (per-image noise substreams keyed
// on the image index), then a single encoder + mid + mask pass. No decoder
// branches run. avg_draws > 1 averages the soft masks over that many
// independent noise draws (off by default; a single draw is the standard
// protocol).
template <typename T>
SegmentationResult segment(const FactorizedUNet<T>& model, const Tensor<T>& x0, int t_seg,
                           const NoiseSchedule& sched, std::uint64_t seed, int avg_draws = 1) {
    check_rank4(x0, "segment input");
    sched.check_t(t_seg);
    if (avg_draws < 1) throw ContractError("segment: avg_draws must be >= 1");
    int B = x0.dim(0);
    TimestepBatch tb;
    tb.t.assign(std::size_t(B), t_seg);
    RngStream root = RngStream::keyed(seed, "segment");

    Tensor<float> acc;
    for (int d = 0; d < avg_draws; d++) {
        Tensor<T> eps(x0.shape);
        std::int64_t per = x0.numel() / B;
        for (int b = 0; b < B; b++) {
            RngStream rng = root.substream(std::uint64_t(b) * 1000003ULL + std::uint64_t(d));
            T* e = eps.data() + b * per;
            for (std::int64_t i = 0; i < per; i++) e[i] = T(rng.normal());
        }
        Tensor<T> x_t = forward_diffuse(x0, tb, eps, sched);
        Tensor<T> soft = model.masks_only(x_t, tb);
        if (acc.numel() == 0)
            acc = soft.template cast<float>();
        else
            for (std::size_t i = 0; i < acc.v.size(); i++) acc.v[i] += float(soft.v[i]);
    }
    if (avg_draws > 1)
        for (auto& v : acc.v) v /= float(avg_draws);

    SegmentationResult r;
    r.soft = std::move(acc);
    r.hard = argmax_channels(r.soft);
    r.t_used = t_seg;
    return r;
}

namespace detail {

// Shared reverse chain: x_T ~ N(0,1), then t = T..1 ancestral steps. The
// recorder sees every completed step; generate and mask_trajectory differ
// only in what they keep.
template <typename T>
void reverse_chain(const FactorizedUNet<T>& model, int n, const NoiseSchedule& sched,
                   std::uint64_t seed,
                   const std::function<void(int, const Tensor<T>&, const Tensor<T>&)>& recorder) {
    if (n < 1) throw ContractError("generate: need n >= 1 samples");
    int R = model.arch.resolution, C = model.arch.img_channels;
    RngStream rng_x = RngStream::keyed(seed, "gen.xT");
    RngStream rng_z = RngStream::keyed(seed, "gen.z");
    Tensor<T> x = Tensor<T>::randn({n, C, R, R}, rng_x);
    for (int t = sched.T; t >= 1; t--) {
        TimestepBatch tb;
        tb.t.assign(std::size_t(n), t);
        auto [eps_hat, m] = model.predict_noise_eval(x, tb);
        if (t > 1) {
            Tensor<T> z(x.shape);
            for (auto& v : z.v) v = T(rng_z.normal());
            x = reverse_step(x, eps_hat, t, &z, sched);
        } else {
            x = reverse_step<T>(x, eps_hat, t, nullptr, sched);
        }
        if (!x.all_finite())
            throw NumericError(strformat("non-finite sample during reverse diffusion at t=%d", t));
        recorder(t, x, m);
    }
}

}  // namespace detail

template <typename T>
GenerationResult generate(const FactorizedUNet<T>& model, int n, const NoiseSchedule& sched,
                          std::uint64_t seed) {
    GenerationResult out;
    out.steps = sched.T;
    detail::reverse_chain<T>(model, n, sched, seed,
                             [&](int t, const Tensor<T>& x, const Tensor<T>& m) {
                                 if (t != 1) return;
                                 Tensor<float> img = x.template cast<float>();
                                 for (auto& v : img.v) v = std::clamp(v, -1.0f, 1.0f);
                                 out.images = std::move(img);
                                 out.masks.soft = m.template cast<float>();
                                 out.masks.hard = argmax_channels(out.masks.soft);
                                 out.masks.t_used = 1;
                             });
    return out;
}

// Same chain as generate, keeping one record every record_every completed
// steps plus the final state: ceil(T / record_every) records total. The final
// record's images are clamped exactly like generate's output, so under a
// shared seed it matches generate bitwise.
template <typename T>
std::vector<TrajectoryRecord> mask_trajectory(const FactorizedUNet<T>& model, int n,
                                              const NoiseSchedule& sched, std::uint64_t seed,
                                              int record_every) {
    if (record_every < 1) throw ContractError("mask_trajectory: record_every must be >= 1");
    std::vector<TrajectoryRecord> records;
    detail::reverse_chain<T>(model, n, sched, seed,
                             [&](int t, const Tensor<T>& x, const Tensor<T>& m) {
                                 int completed = sched.T - t + 1;
                                 if (completed % record_every != 0 && t != 1) return;
                                 TrajectoryRecord r;
                                 r.t = t;
                                 r.images = x.template cast<float>();
                                 if (t == 1)
                                     for (auto& v : r.images.v) v = std::clamp(v, -1.0f, 1.0f);
                                 r.soft = m.template cast<float>();
                                 records.push_back(std::move(r));
                             });
    return records;
}

}  // namespace fdm
