#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "fdm/common.hpp"
#include "fdm/sampler.hpp"
#include "fdm/synth.hpp"
#include "fdm/tensor.hpp"
#include "fdm/unet.hpp"

// Segmentation scoring with unsupervised channel-to-class assignment. A
// predicted channel has no inherent class identity, so metrics are computed
// after an optimal matching of channels to ground-truth classes (Hungarian on
// the pooled confusion matrix, ties broken toward the lowest index pairs).
// Also a small supervised segmenter used as the reference when scoring the
// consistency of generated image/mask pairs.

namespace fdm {

struct MetricReport {
    double acc = 0.0;   // fraction of pixels whose matched label equals GT
    double iou = 0.0;   // foreground intersection-over-union
    double miou = 0.0;  // mean IoU over matched classes
    double dice = 0.0;  // symmetric Dice on the foreground
    std::vector<int> matching;  // predicted channel -> GT class, -1 if unmatched
    // pooled over all pixels of the corpus (the fields above average
    // per-image scores); reported in verbose output
    double pooled_acc = 0.0, pooled_iou = 0.0, pooled_miou = 0.0, pooled_dice = 0.0;
};

namespace detail {

constexpr std::int64_t kInf = std::numeric_limits<std::int64_t>::max() / 4;

// Classic O(n^3) Hungarian algorithm (potentials + augmenting paths) on a
// square cost matrix; returns the row -> column assignment minimizing total
// cost. rows/cols fixed to -2 are excluded (used by the tie-break pass).
inline std::vector<int> hungarian_min(const std::vector<std::int64_t>& a, int n) {
    std::vector<std::int64_t> u(std::size_t(n) + 1, 0), v(std::size_t(n) + 1, 0);
    std::vector<int> p(std::size_t(n) + 1, 0), way(std::size_t(n) + 1, 0);
    for (int i = 1; i <= n; i++) {
        p[0] = i;
        int j0 = 0;
        std::vector<std::int64_t> minv(std::size_t(n) + 1, kInf);
        std::vector<char> used(std::size_t(n) + 1, 0);
        do {
            used[std::size_t(j0)] = 1;
            int i0 = p[std::size_t(j0)], j1 = -1;
            std::int64_t delta = kInf;
            for (int j = 1; j <= n; j++)
                if (!used[std::size_t(j)]) {
                    std::int64_t cur = a[std::size_t(i0 - 1) * n + (j - 1)] - u[std::size_t(i0)] -
                                       v[std::size_t(j)];
                    if (cur < minv[std::size_t(j)]) {
                        minv[std::size_t(j)] = cur;
                        way[std::size_t(j)] = j0;
                    }
                    if (minv[std::size_t(j)] < delta) {
                        delta = minv[std::size_t(j)];
                        j1 = j;
                    }
                }
            for (int j = 0; j <= n; j++) {
                if (used[std::size_t(j)]) {
                    u[std::size_t(p[std::size_t(j)])] += delta;
                    v[std::size_t(j)] -= delta;
                } else {
                    minv[std::size_t(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[std::size_t(j0)] != 0);
        do {
            int j1 = way[std::size_t(j0)];
            p[std::size_t(j0)] = p[std::size_t(j1)];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> row_to_col(std::size_t(n), -1);
    for (int j = 1; j <= n; j++)
        if (p[std::size_t(j)] != 0) row_to_col[std::size_t(p[std::size_t(j)] - 1)] = j - 1;
    return row_to_col;
}

// Best achievable total intersection given some rows already fixed to columns
// (fixed[k] >= 0: pred k -> gt fixed[k]; -2: pred k unmatched; -1: free).
inline std::int64_t best_total(const std::vector<std::int64_t>& inter, int K, int K_gt,
                               const std::vector<int>& fixed) {
    std::int64_t base = 0;
    std::vector<int> rows, cols;
    std::vector<char> col_used(std::size_t(K_gt), 0);
    for (int k = 0; k < K; k++) {
        if (fixed[std::size_t(k)] >= 0) {
            base += inter[std::size_t(k) * K_gt + fixed[std::size_t(k)]];
            col_used[std::size_t(fixed[std::size_t(k)])] = 1;
        } else if (fixed[std::size_t(k)] == -1) {
            rows.push_back(k);
        }
    }
    for (int g = 0; g < K_gt; g++)
        if (!col_used[std::size_t(g)]) cols.push_back(g);
    int n = std::max(int(rows.size()), int(cols.size()));
    if (n == 0) return base;
    // pad to square with zero-value dummies; minimize negated intersections
    std::vector<std::int64_t> cost(std::size_t(n) * n, 0);
    for (std::size_t r = 0; r < rows.size(); r++)
        for (std::size_t c = 0; c < cols.size(); c++)
            cost[r * std::size_t(n) + c] = -inter[std::size_t(rows[r]) * K_gt + cols[c]];
    auto asg = hungarian_min(cost, n);
    std::int64_t total = base;
    for (std::size_t r = 0; r < rows.size(); r++)
        if (asg[r] >= 0 && asg[r] < int(cols.size()))
            total += inter[std::size_t(rows[r]) * K_gt + cols[std::size_t(asg[r])]];
    return total;
}

}  // namespace detail

// K x K_gt intersection counts: confusion[k * K_gt + g] = |{pred = k and gt = g}|.
inline std::vector<std::int64_t> confusion_counts(const int* pred, const std::uint8_t* gt,
                                                  std::int64_t n, int K, int K_gt) {
    std::vector<std::int64_t> c(std::size_t(K) * K_gt, 0);
    for (std::int64_t i = 0; i < n; i++) {
        int p = pred[i], g = gt[i];
        if (p < 0 || p >= K)
            throw ContractError(strformat("predicted label %d outside [0, %d)", p, K));
        if (g < 0 || g >= K_gt)
            throw ContractError(strformat("ground-truth label %d outside [0, %d)", g, K_gt));
        c[std::size_t(p) * K_gt + g]++;
    }
    return c;
}

// Optimal channel-to-class assignment: maximizes total intersection over the
// confusion matrix; among optima, picks the lexicographically smallest
// (channel, class) pairing. Exactly min(K, K_gt) channels are matched; the
// rest map to -1.
inline std::vector<int> match_channels_counts(const std::vector<std::int64_t>& inter, int K,
                                              int K_gt) {
    if (int(inter.size()) != K * K_gt)
        throw ShapeError(strformat("confusion matrix size %zu != %d x %d", inter.size(), K, K_gt));
    std::vector<int> fixed(std::size_t(K), -1);
    std::int64_t opt = detail::best_total(inter, K, K_gt, fixed);
    for (int k = 0; k < K; k++) {
        bool placed = false;
        for (int g = 0; g < K_gt && !placed; g++) {
            bool taken = false;
            for (int k2 = 0; k2 < k; k2++)
                if (fixed[std::size_t(k2)] == g) taken = true;
            if (taken) continue;
            fixed[std::size_t(k)] = g;
            if (detail::best_total(inter, K, K_gt, fixed) == opt)
                placed = true;
            else
                fixed[std::size_t(k)] = -1;
        }
        if (!placed) fixed[std::size_t(k)] = -2;  // unmatched (only when K > K_gt)
    }
    for (auto& f : fixed)
        if (f == -2) f = -1;
    return fixed;
}

inline std::vector<int> match_channels(const Tensor<int>& pred, const std::uint8_t* gt, int K,
                                       int K_gt) {
    auto c = confusion_counts(pred.data(), gt, pred.numel(), K, K_gt);
    return match_channels_counts(c, K, K_gt);
}

namespace detail {

struct FgCounts {
    std::int64_t inter = 0, pred_fg = 0, gt_fg = 0;
    std::int64_t correct = 0, total = 0;
};

inline double ratio_with_empty_rule(std::int64_t num, std::int64_t pred_n, std::int64_t gt_n,
                                    std::int64_t den) {
    if (pred_n == 0 && gt_n == 0) return 1.0;  // nothing to find, nothing found
    if (pred_n == 0 || gt_n == 0) return 0.0;
    return double(num) / double(den);
}

}  // namespace detail

// Scores hard label maps against ground truth. pred: (B, H, W) channel
// indices in [0, K); gt: B*H*W class labels in [0, K_gt). fg_classes selects
// which GT classes form the foreground (default: every nonzero class).
// paper_dice switches the Dice denominator from |F̂|+|F| to 2|F̂| (a
// non-symmetric variant kept for comparison; can exceed 1 when F̂ is small).
inline MetricReport score_labels(const Tensor<int>& pred, const std::uint8_t* gt, int K, int K_gt,
                                 std::vector<int> fg_classes = {}, bool paper_dice = false) {
    if (pred.rank() != 3)
        throw ShapeError("score: predicted labels must be (batch, height, width), got " +
                         shape_str(pred.shape));
    int B = pred.dim(0);
    std::int64_t HW = std::int64_t(pred.dim(1)) * pred.dim(2);
    if (fg_classes.empty())
        for (int g = 1; g < K_gt; g++) fg_classes.push_back(g);
    std::vector<char> is_fg(std::size_t(K_gt), 0);
    for (int g : fg_classes) {
        if (g < 0 || g >= K_gt)
            throw ContractError(strformat("foreground class %d outside [0, %d)", g, K_gt));
        is_fg[std::size_t(g)] = 1;
    }

    MetricReport rep;
    rep.matching = match_channels(pred, gt, K, K_gt);

    // remap table: channel -> matched class (K_gt used as "no class")
    std::vector<int> remap(static_cast<std::size_t>(K), 0);
    for (int k = 0; k < K; k++)
        remap[std::size_t(k)] = rep.matching[std::size_t(k)] < 0 ? K_gt : rep.matching[std::size_t(k)];

    auto dice_den = [&](std::int64_t pf, std::int64_t gf) { return paper_dice ? 2 * pf : pf + gf; };
    auto dice_num = [&](std::int64_t inter) { return 2 * inter; };

    double sum_acc = 0, sum_iou = 0, sum_miou = 0, sum_dice = 0;
    detail::FgCounts pool;
    std::vector<std::int64_t> pool_conf(std::size_t(K_gt + 1) * K_gt, 0);
    for (int b = 0; b < B; b++) {
        const int* p = pred.data() + b * HW;
        const std::uint8_t* g = gt + b * HW;
        // per-image confusion in matched-class space ((K_gt+1) x K_gt)
        std::vector<std::int64_t> conf(std::size_t(K_gt + 1) * K_gt, 0);
        for (std::int64_t i = 0; i < HW; i++)
            conf[std::size_t(remap[std::size_t(p[i])]) * K_gt + g[i]]++;
        for (std::size_t i = 0; i < conf.size(); i++) pool_conf[i] += conf[i];

        std::int64_t correct = 0;
        for (int c = 0; c < K_gt; c++) correct += conf[std::size_t(c) * K_gt + c];
        sum_acc += double(correct) / double(HW);

        detail::FgCounts fc;
        for (int c = 0; c <= K_gt; c++)
            for (int gg = 0; gg < K_gt; gg++) {
                std::int64_t n = conf[std::size_t(c) * K_gt + gg];
                bool pf = c < K_gt && is_fg[std::size_t(c)], gf = is_fg[std::size_t(gg)];
                if (pf) fc.pred_fg += n;
                if (gf) fc.gt_fg += n;
                if (pf && gf) fc.inter += n;
            }
        sum_iou += detail::ratio_with_empty_rule(fc.inter, fc.pred_fg, fc.gt_fg,
                                                 fc.pred_fg + fc.gt_fg - fc.inter);
        sum_dice += detail::ratio_with_empty_rule(dice_num(fc.inter), fc.pred_fg, fc.gt_fg,
                                                  dice_den(fc.pred_fg, fc.gt_fg));

        double m = 0;
        int m_n = 0;
        for (int k = 0; k < K; k++) {
            int cls = rep.matching[std::size_t(k)];
            if (cls < 0) continue;
            std::int64_t pred_n = 0, gt_n = 0, inter = conf[std::size_t(cls) * K_gt + cls];
            for (int gg = 0; gg < K_gt; gg++) pred_n += conf[std::size_t(cls) * K_gt + gg];
            for (int c = 0; c <= K_gt; c++) gt_n += conf[std::size_t(c) * K_gt + cls];
            m += detail::ratio_with_empty_rule(inter, pred_n, gt_n, pred_n + gt_n - inter);
            m_n++;
        }
        sum_miou += m_n ? m / m_n : 0.0;
    }

    double nb = double(std::max(1, B));
    rep.acc = sum_acc / nb;
    rep.iou = sum_iou / nb;
    rep.miou = sum_miou / nb;
    rep.dice = sum_dice / nb;

    // pooled variants from the summed confusion
    std::int64_t correct = 0, total = std::int64_t(B) * HW;
    for (int c = 0; c < K_gt; c++) correct += pool_conf[std::size_t(c) * K_gt + c];
    rep.pooled_acc = total ? double(correct) / double(total) : 0.0;
    detail::FgCounts fc;
    for (int c = 0; c <= K_gt; c++)
        for (int gg = 0; gg < K_gt; gg++) {
            std::int64_t n = pool_conf[std::size_t(c) * K_gt + gg];
            bool pf = c < K_gt && is_fg[std::size_t(c)], gf = is_fg[std::size_t(gg)];
            if (pf) fc.pred_fg += n;
            if (gf) fc.gt_fg += n;
            if (pf && gf) fc.inter += n;
        }
    rep.pooled_iou = detail::ratio_with_empty_rule(fc.inter, fc.pred_fg, fc.gt_fg,
                                                   fc.pred_fg + fc.gt_fg - fc.inter);
    rep.pooled_dice = detail::ratio_with_empty_rule(dice_num(fc.inter), fc.pred_fg, fc.gt_fg,
                                                    dice_den(fc.pred_fg, fc.gt_fg));
    double m = 0;
    int m_n = 0;
    for (int k = 0; k < K; k++) {
        int cls = rep.matching[std::size_t(k)];
        if (cls < 0) continue;
        std::int64_t pred_n = 0, gt_n = 0, inter = pool_conf[std::size_t(cls) * K_gt + cls];
        for (int gg = 0; gg < K_gt; gg++) pred_n += pool_conf[std::size_t(cls) * K_gt + gg];
        for (int c = 0; c <= K_gt; c++) gt_n += pool_conf[std::size_t(c) * K_gt + cls];
        m += detail::ratio_with_empty_rule(inter, pred_n, gt_n, pred_n + gt_n - inter);
        m_n++;
    }
    rep.pooled_miou = m_n ? m / m_n : 0.0;
    return rep;
}

inline MetricReport score(const SegmentationResult& pred, const std::uint8_t* gt, int K_gt,
                          std::vector<int> fg_classes = {}, bool paper_dice = false) {
    return score_labels(pred.hard, gt, pred.soft.dim(1), K_gt, std::move(fg_classes), paper_dice);
}

// Per-pixel agreement between two segmentations of the same images after
// channel matching (pooled confusion decides the matching; agreement is
// averaged per image). Used with a supervised reference segmenter to score
// masks attached to generated images.
inline double consistency(const Tensor<int>& generated, int K_gen, const Tensor<int>& reference,
                          int K_ref) {
    if (generated.shape != reference.shape)
        throw ShapeError("consistency: generated labels " + shape_str(generated.shape) +
                         " vs reference labels " + shape_str(reference.shape));
    if (generated.rank() != 3)
        throw ShapeError("consistency: labels must be (batch, height, width)");
    int B = generated.dim(0);
    std::int64_t HW = std::int64_t(generated.dim(1)) * generated.dim(2);
    std::vector<std::uint8_t> ref_u8(reference.v.size());
    for (std::size_t i = 0; i < ref_u8.size(); i++) {
        int r = reference.v[i];
        if (r < 0 || r >= K_ref)
            throw ContractError(strformat("reference label %d outside [0, %d)", r, K_ref));
        ref_u8[i] = std::uint8_t(r);
    }
    auto matching = match_channels(generated, ref_u8.data(), K_gen, K_ref);
    double sum = 0;
    for (int b = 0; b < B; b++) {
        std::int64_t agree = 0;
        const int* g = generated.data() + b * HW;
        const std::uint8_t* r = ref_u8.data() + b * HW;
        for (std::int64_t i = 0; i < HW; i++)
            if (matching[std::size_t(g[i])] == int(r[i])) agree++;
        sum += double(agree) / double(HW);
    }
    return B ? sum / B : 0.0;
}

// ---------------------------------------------------------------------------
// Supervised reference segmenter
// ---------------------------------------------------------------------------
// A plain segmentation U-Net built from the same encoder/decoder blocks as
// the diffusion model (constant timestep embedding, cross-entropy on GT
// labels). Trained on the synthetic corpus, it stands in as the reference
// model when scoring consistency of generated image/mask pairs.

template <typename T>
struct SupervisedSegmenter {
    ArchSpec arch;  // num_regions = output classes
    ParamStore<T> params;
    Encoder<T> enc;
    ResBlock<T> mid_rb0, mid_rb1;
    DecoderTrunk<T> head;

    static SupervisedSegmenter build(const ArchSpec& a, std::uint64_t seed) {
        a.validate();
        SupervisedSegmenter m;
        m.arch = a;
        m.params.seed = seed;
        m.enc.build(m.params, a);
        int cmid = a.channels(a.stages() - 1);
        m.mid_rb0 = ResBlock<T>::make(m.params, "mid.rb0", cmid, cmid, a.temb_dim());
        m.mid_rb1 = ResBlock<T>::make(m.params, "mid.rb1", cmid, cmid, a.temb_dim());
        m.head.build(m.params, "seg", a, a.num_regions, 1, 0, 0);
        return m;
    }

    graph::Var<T> logits(const graph::Var<T>& x) const {
        TimestepBatch tb;
        tb.t.assign(std::size_t(x->val.dim(0)), 1);  // constant conditioning
        auto es = enc.time_context(tb, arch.temb_dim());
        auto skips = enc(x, es);
        auto h = mid_rb1(mid_rb0(skips.back(), es), es);
        return head(h, skips, es);
    }

    Tensor<int> predict(const Tensor<T>& x) const {
        graph::NoGrad<T> ng;
        Tensor<T> soft = logits(graph::constant(x))->val;
        return argmax_channels(soft);
    }

    // Adam training on (images, GT labels); returns the final-step loss.
    double fit(const Dataset& ds, int steps, int batch_size, double lr, std::uint64_t seed) {
        if (!ds.has_gt()) throw ContractError("segmenter training needs ground-truth labels");
        if (ds.count < 1) throw ContractError("segmenter training needs a non-empty dataset");
        int B = std::min(batch_size, ds.count);
        std::int64_t HW = std::int64_t(ds.resolution) * ds.resolution;
        std::vector<Tensor<T>> adam_m, adam_v;
        for (auto& [_, p] : params.entries) {
            adam_m.push_back(Tensor<T>::zeros(p->val.shape));
            adam_v.push_back(Tensor<T>::zeros(p->val.shape));
        }
        RngStream rng = RngStream::keyed(seed, "seg.batch");
        double loss_v = 0;
        for (int step = 0; step < steps; step++) {
            Tensor<T> x({B, 3, ds.resolution, ds.resolution});
            auto lab = std::make_shared<std::vector<int>>(std::size_t(B) * HW);
            for (int b = 0; b < B; b++) {
                int i = int(rng.uniform_int(0, ds.count - 1));
                const float* src = ds.images.data() + std::int64_t(i) * 3 * HW;
                T* dst = x.data() + std::int64_t(b) * 3 * HW;
                for (std::int64_t j = 0; j < 3 * HW; j++) dst[j] = T(src[j]);
                const std::uint8_t* lm = ds.label_map(i);
                for (std::int64_t j = 0; j < HW; j++) (*lab)[std::size_t(b * HW + j)] = lm[j];
            }
            graph::clear_tape<T>();
            params.zero_grads();
            auto loss = graph::softmax_xent(logits(graph::constant(x)), lab);
            loss_v = double(loss->val.v[0]);
            if (!std::isfinite(loss_v))
                throw NumericError(strformat("non-finite segmenter loss at step %d", step));
            graph::backward(loss);
            graph::clear_tape<T>();
            double bias1 = 1.0 - std::pow(0.9, double(step + 1));
            double bias2 = 1.0 - std::pow(0.999, double(step + 1));
            for (std::size_t i = 0; i < params.entries.size(); i++) {
                auto& p = params.entries[i].second;
                kernels::adam_step(p->val.data(), p->g().data(), adam_m[i].data(),
                                   adam_v[i].data(), p->val.numel(), T(lr), T(0.9), T(0.999),
                                   T(1e-8), bias1, bias2);
            }
        }
        return loss_v;
    }
};

}  // namespace fdm
