#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fdm/common.hpp"
#include "fdm/diffusion.hpp"
#include "fdm/graph.hpp"
#include "fdm/rng.hpp"
#include "fdm/tensor.hpp"

// The factorized denoising U-Net. Four parameter groups, selected by name
// prefix:
//   enc.*   input conv, per-stage residual blocks + strided downsampling,
//           and the shared sinusoidal-time MLP
//   mid.*   two residual blocks at the lowest resolution (optional attention)
//   mask.*  a full decoder mirror ending in a 1x1 projection to K channels
//           followed by a per-pixel softmax -> region masks
//   dec.*   a decoder producing a noise prediction; ONE parameter set applied
//           K times, each branch seeing skip features multiplied by one
//           region mask (downsampled per stage); the K outputs are recombined
//           as eps_hat = sum_k eps_k * m_k
//
// Variants for ablation: concat (masks concatenated to features instead of
// multiplied, single decoder pass), mask_mid (mask applied to the mid feature
// instead of the skips), unshared (K independent decoder parameter sets), and
// plain (no mask machinery at all — a standard single-decoder DDPM used as
// the reference build for the K=1 equivalence check).

namespace fdm {

struct ArchSpec {
    int base_channels = 32;
    std::vector<int> stage_multipliers = {1, 2, 3, 4};
    int res_blocks_per_stage = 2;
    int num_regions = 3;
    int img_channels = 3;
    int resolution = 32;
    int time_embed_dim = 0;  // 0 -> 4 * base_channels
    bool attention_at_lowest = false;

    int stages() const { return int(stage_multipliers.size()); }
    int channels(int s) const { return base_channels * stage_multipliers[std::size_t(s)]; }
    int temb_dim() const { return time_embed_dim > 0 ? time_embed_dim : 4 * base_channels; }

    void validate() const {
        if (base_channels < 1) throw ConfigError("model.base_channels: must be >= 1");
        if (stage_multipliers.empty()) throw ConfigError("model.stage_multipliers: must be non-empty");
        for (int m : stage_multipliers)
            if (m < 1) throw ConfigError("model.stage_multipliers: entries must be >= 1");
        if (res_blocks_per_stage < 1) throw ConfigError("model.res_blocks: must be >= 1");
        if (num_regions < 1) throw ConfigError("model.num_regions: must be >= 1");
        if (img_channels < 1) throw ConfigError("model.img_channels: must be >= 1");
        int down = 1 << (stages() - 1);
        if (resolution < down || resolution % down != 0)
            throw ConfigError(strformat("model.resolution: %d not divisible by 2^(stages-1) = %d",
                                        resolution, down));
        if (temb_dim() % 2 != 0 || temb_dim() < 4)
            throw ConfigError(strformat("model.time_embed_dim: must be even and >= 4, got %d",
                                        temb_dim()));
    }

    bool operator==(const ArchSpec&) const = default;
};

enum class Variant { shared, concat, mask_mid, unshared, plain };

inline const char* to_string(Variant v) {
    switch (v) {
        case Variant::shared: return "shared";
        case Variant::concat: return "concat";
        case Variant::mask_mid: return "mask_mid";
        case Variant::unshared: return "unshared";
        case Variant::plain: return "plain";
    }
    return "?";
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "shared") return Variant::shared;
    if (s == "concat") return Variant::concat;
    if (s == "mask_mid") return Variant::mask_mid;
    if (s == "unshared") return Variant::unshared;
    if (s == "plain") return Variant::plain;
    throw ConfigError("model.variant: unknown variant '" + s + "'");
}

// Forward-pass counters, one per subnetwork (dec counts branch passes).
struct PassCounters {
    long enc = 0, mid = 0, mask = 0, dec = 0;
    void reset() { *this = PassCounters{}; }
};

inline int norm_groups(int channels) {
    int g = std::min(32, channels);
    while (channels % g != 0) g--;
    return g;
}

// Ordered, name-keyed parameter registry. Each parameter is initialized from
// its own RNG stream derived from (seed, name), so the drawn values do not
// depend on which other parameters exist — builds that share a layer name get
// bitwise-identical initial weights.
template <typename T>
struct ParamStore {
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, graph::Var<T>>> entries;

    graph::Var<T> normal(const std::string& name, Shape shape, double fan_in, double scale = 1.0) {
        RngStream rng = RngStream::keyed(seed, name);
        auto t = Tensor<T>::randn(std::move(shape), rng, T(scale / std::sqrt(fan_in)));
        return push(name, std::move(t));
    }

    graph::Var<T> fill(const std::string& name, Shape shape, T value) {
        return push(name, Tensor<T>::full(std::move(shape), value));
    }

    graph::Var<T> push(const std::string& name, Tensor<T> t) {
        for (auto& [n, v] : entries)
            if (n == name) throw ContractError("duplicate parameter name: " + name);
        auto var = graph::param(std::move(t));
        entries.emplace_back(name, var);
        return var;
    }

    graph::Var<T> get(const std::string& name) const {
        for (auto& [n, v] : entries)
            if (n == name) return v;
        throw ContractError("unknown parameter name: " + name);
    }

    std::int64_t count_total() const {
        std::int64_t n = 0;
        for (auto& [_, v] : entries) n += v->val.numel();
        return n;
    }

    std::int64_t count_prefix(const std::string& prefix) const {
        std::int64_t n = 0;
        for (auto& [name, v] : entries)
            if (name.rfind(prefix, 0) == 0) n += v->val.numel();
        return n;
    }

    void zero_grads() const {
        for (auto& [_, v] : entries)
            if (v->has_grad()) std::fill(v->grad.v.begin(), v->grad.v.end(), T(0));
    }
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2dLayer {
    graph::Var<T> w, b;
    int stride = 1, pad = 1;

    static Conv2dLayer make(ParamStore<T>& ps, const std::string& name, int cin, int cout, int k,
                            int stride, int pad, double scale = 1.0) {
        Conv2dLayer l;
        l.w = ps.normal(name + ".w", {cout, cin, k, k}, double(cin) * k * k, scale);
        l.b = ps.fill(name + ".b", {cout}, T(0));
        l.stride = stride;
        l.pad = pad;
        return l;
    }
    graph::Var<T> operator()(const graph::Var<T>& x) const {
        return graph::conv2d(x, w, b, stride, pad);
    }
};

template <typename T>
struct LinearLayer {
    graph::Var<T> w, b;

    static LinearLayer make(ParamStore<T>& ps, const std::string& name, int din, int dout,
                            double scale = 1.0) {
        LinearLayer l;
        l.w = ps.normal(name + ".w", {dout, din}, double(din), scale);
        l.b = ps.fill(name + ".b", {dout}, T(0));
        return l;
    }
    graph::Var<T> operator()(const graph::Var<T>& x) const { return graph::linear(x, w, b); }
};

template <typename T>
struct GroupNormLayer {
    graph::Var<T> gamma, beta;
    int groups = 1;

    static GroupNormLayer make(ParamStore<T>& ps, const std::string& name, int channels) {
        GroupNormLayer l;
        l.gamma = ps.fill(name + ".g", {channels}, T(1));
        l.beta = ps.fill(name + ".b", {channels}, T(0));
        l.groups = norm_groups(channels);
        return l;
    }
    graph::Var<T> operator()(const graph::Var<T>& x) const {
        return graph::groupnorm(x, gamma, beta, groups, T(1e-5));
    }
};

// norm -> SiLU -> conv -> (+ time projection) -> norm -> SiLU -> conv, with a
// residual connection (1x1 conv when the channel count changes).
template <typename T>
struct ResBlock {
    GroupNormLayer<T> gn1, gn2;
    Conv2dLayer<T> conv1, conv2;
    LinearLayer<T> temb;
    bool has_skip = false;
    Conv2dLayer<T> skip;

    static ResBlock make(ParamStore<T>& ps, const std::string& name, int cin, int cout, int temb_dim) {
        ResBlock r;
        r.gn1 = GroupNormLayer<T>::make(ps, name + ".gn1", cin);
        r.conv1 = Conv2dLayer<T>::make(ps, name + ".conv1", cin, cout, 3, 1, 1);
        r.temb = LinearLayer<T>::make(ps, name + ".temb", temb_dim, cout);
        r.gn2 = GroupNormLayer<T>::make(ps, name + ".gn2", cout);
        r.conv2 = Conv2dLayer<T>::make(ps, name + ".conv2", cout, cout, 3, 1, 1);
        r.has_skip = (cin != cout);
        if (r.has_skip) r.skip = Conv2dLayer<T>::make(ps, name + ".skip", cin, cout, 1, 1, 0);
        return r;
    }

    // es: time context (B, temb_dim), already passed through the shared MLP.
    graph::Var<T> operator()(const graph::Var<T>& x, const graph::Var<T>& es) const {
        auto h = conv1(graph::silu(gn1(x)));
        h = graph::add_chvec(h, temb(es));
        h = conv2(graph::silu(gn2(h)));
        return graph::add(h, has_skip ? skip(x) : x);
    }
};

// Single-head self-attention over all pixels of a (small) feature map.
template <typename T>
struct AttnBlock {
    GroupNormLayer<T> gn;
    Conv2dLayer<T> q, k, v, proj;
    int channels = 0;

    static AttnBlock make(ParamStore<T>& ps, const std::string& name, int ch) {
        AttnBlock a;
        a.gn = GroupNormLayer<T>::make(ps, name + ".gn", ch);
        a.q = Conv2dLayer<T>::make(ps, name + ".q", ch, ch, 1, 1, 0);
        a.k = Conv2dLayer<T>::make(ps, name + ".k", ch, ch, 1, 1, 0);
        a.v = Conv2dLayer<T>::make(ps, name + ".v", ch, ch, 1, 1, 0);
        a.proj = Conv2dLayer<T>::make(ps, name + ".proj", ch, ch, 1, 1, 0, 0.01);
        a.channels = ch;
        return a;
    }

    graph::Var<T> operator()(const graph::Var<T>& x) const {
        auto h = gn(x);
        auto s = graph::attn_scores(q(h), k(h), T(1.0 / std::sqrt(double(channels))));
        auto a = graph::softmax_lastdim(s);
        return graph::add(x, proj(graph::attn_apply(v(h), a)));
    }
};

// Sinusoidal embedding of (1-indexed) timesteps: (B, dim) with sin in the
// first half and cos in the second, geometric frequency ladder down to 1/10000.
template <typename T>
Tensor<T> sinusoidal_time_embedding(const TimestepBatch& tb, int dim) {
    int B = int(tb.t.size());
    int half = dim / 2;
    Tensor<T> e({B, dim});
    double step = (half > 1) ? std::log(10000.0) / double(half - 1) : 0.0;
    for (int b = 0; b < B; b++)
        for (int i = 0; i < half; i++) {
            double arg = double(tb.t[std::size_t(b)]) * std::exp(-step * i);
            e.v[std::size_t(b) * dim + i] = T(std::sin(arg));
            e.v[std::size_t(b) * dim + half + i] = T(std::cos(arg));
        }
    return e;
}

// ---------------------------------------------------------------------------
// Encoder / decoder trunks
// ---------------------------------------------------------------------------

template <typename T>
struct Encoder {
    Conv2dLayer<T> conv_in;
    LinearLayer<T> temb1, temb2;
    std::vector<std::vector<ResBlock<T>>> stages;
    std::vector<Conv2dLayer<T>> downs;

    void build(ParamStore<T>& ps, const ArchSpec& a) {
        conv_in = Conv2dLayer<T>::make(ps, "enc.conv_in", a.img_channels, a.channels(0), 3, 1, 1);
        temb1 = LinearLayer<T>::make(ps, "enc.temb.lin1", a.temb_dim(), a.temb_dim());
        temb2 = LinearLayer<T>::make(ps, "enc.temb.lin2", a.temb_dim(), a.temb_dim());
        int S = a.stages();
        stages.resize(std::size_t(S));
        for (int s = 0; s < S; s++) {
            int cin = (s == 0) ? a.channels(0) : a.channels(s - 1);
            for (int r = 0; r < a.res_blocks_per_stage; r++) {
                stages[std::size_t(s)].push_back(ResBlock<T>::make(
                    ps, strformat("enc.s%d.rb%d", s, r), r == 0 ? cin : a.channels(s), a.channels(s),
                    a.temb_dim()));
            }
            if (s + 1 < S)
                downs.push_back(Conv2dLayer<T>::make(ps, strformat("enc.s%d.down", s), a.channels(s),
                                                     a.channels(s), 3, 2, 1));
        }
    }

    // Shared time context: silu applied to the MLP output once, so blocks only
    // apply their own per-block projection.
    graph::Var<T> time_context(const TimestepBatch& tb, int temb_dim) const {
        auto sinus = graph::constant(sinusoidal_time_embedding<T>(tb, temb_dim));
        return graph::silu(temb2(graph::silu(temb1(sinus))));
    }

    // Returns one skip feature per stage, highest resolution first.
    std::vector<graph::Var<T>> operator()(const graph::Var<T>& x, const graph::Var<T>& es) const {
        std::vector<graph::Var<T>> skips;
        auto h = conv_in(x);
        for (std::size_t s = 0; s < stages.size(); s++) {
            for (auto& rb : stages[s]) h = rb(h, es);
            skips.push_back(h);
            if (s < downs.size()) h = downs[s](h);
        }
        return skips;
    }
};

// Decoder mirror: walks stages deepest-first, concatenating the (possibly
// masked or mask-augmented) skip feature at each stage, then res blocks, then
// nearest-neighbor upsample + conv. Used for both the noise decoder and the
// mask generator; they differ only in head shape and what the caller does to
// the skips.
template <typename T>
struct DecoderTrunk {
    std::vector<std::vector<ResBlock<T>>> stages;  // indexed by stage s
    std::vector<Conv2dLayer<T>> ups;               // ups[s] valid for s >= 1
    GroupNormLayer<T> head_gn;
    Conv2dLayer<T> head_conv;

    // d0_extra / skip_extra: additional input channels at the mid entry and on
    // every skip (used by the concat variant which appends K mask channels).
    void build(ParamStore<T>& ps, const std::string& prefix, const ArchSpec& a, int out_channels,
               int head_ksize, int d0_extra, int skip_extra) {
        int S = a.stages();
        stages.resize(std::size_t(S));
        ups.resize(std::size_t(S));
        for (int s = S - 1; s >= 0; s--) {
            int d_ch = (s == S - 1) ? a.channels(S - 1) + d0_extra : a.channels(s + 1);
            for (int r = 0; r < a.res_blocks_per_stage; r++) {
                int cin = (r == 0) ? d_ch + a.channels(s) + skip_extra : a.channels(s);
                stages[std::size_t(s)].push_back(
                    ResBlock<T>::make(ps, strformat("%s.s%d.rb%d", prefix.c_str(), s, r), cin,
                                      a.channels(s), a.temb_dim()));
            }
            if (s > 0)
                ups[std::size_t(s)] = Conv2dLayer<T>::make(ps, strformat("%s.s%d.up", prefix.c_str(), s),
                                                           a.channels(s), a.channels(s), 3, 1, 1);
        }
        head_gn = GroupNormLayer<T>::make(ps, prefix + ".head.gn", a.channels(0));
        head_conv = Conv2dLayer<T>::make(ps, prefix + ".head.conv", a.channels(0), out_channels,
                                         head_ksize, 1, head_ksize == 3 ? 1 : 0, 0.01);
    }

    graph::Var<T> operator()(const graph::Var<T>& d0, const std::vector<graph::Var<T>>& skips,
                             const graph::Var<T>& es) const {
        int S = int(stages.size());
        graph::Var<T> d = d0;
        for (int s = S - 1; s >= 0; s--) {
            d = graph::concat_channels(d, skips[std::size_t(s)]);
            for (auto& rb : stages[std::size_t(s)]) d = rb(d, es);
            if (s > 0) d = ups[std::size_t(s)](graph::upsample2(d));
        }
        return head_conv(graph::silu(head_gn(d)));
    }
};

// ---------------------------------------------------------------------------
// Mask downsampling (area average preserves the per-pixel simplex)
// ---------------------------------------------------------------------------

template <typename T>
graph::Var<T> downsample_mask(const graph::Var<T>& m, int factor) {
    if (factor == 1) return m;
    if ((factor & (factor - 1)) != 0)
        throw ContractError(strformat("downsample_mask: factor %d is not a power of two", factor));
    return graph::avgpool(m, factor);
}

template <typename T>
Tensor<T> downsample_mask(const Tensor<T>& m, int factor) {
    check_rank4(m, "downsample_mask input");
    if (factor == 1) return m;
    if ((factor & (factor - 1)) != 0)
        throw ContractError(strformat("downsample_mask: factor %d is not a power of two", factor));
    int H = m.dim(2), W = m.dim(3);
    if (H % factor != 0 || W % factor != 0)
        throw ShapeError(strformat("downsample_mask: %dx%d not divisible by %d", H, W, factor));
    Tensor<T> out({m.dim(0), m.dim(1), H / factor, W / factor});
    kernels::avgpool_fwd(m.data(), out.data(), m.dim(0), m.dim(1), H, W, factor);
    return out;
}

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

template <typename T>
struct FactorizedUNet {
    ArchSpec arch;
    Variant variant = Variant::shared;
    ParamStore<T> params;

    Encoder<T> enc;
    ResBlock<T> mid_rb0, mid_rb1;
    std::optional<AttnBlock<T>> mid_attn;
    DecoderTrunk<T> mask_trunk;               // not built for plain
    std::vector<DecoderTrunk<T>> dec_trunks;  // K entries for unshared, else 1

    mutable PassCounters counters;

    static FactorizedUNet build(const ArchSpec& a, Variant variant, std::uint64_t seed) {
        a.validate();
        FactorizedUNet m;
        m.arch = a;
        m.variant = variant;
        m.params.seed = seed;

        m.enc.build(m.params, a);
        int cmid = a.channels(a.stages() - 1);
        m.mid_rb0 = ResBlock<T>::make(m.params, "mid.rb0", cmid, cmid, a.temb_dim());
        if (a.attention_at_lowest) m.mid_attn = AttnBlock<T>::make(m.params, "mid.attn", cmid);
        m.mid_rb1 = ResBlock<T>::make(m.params, "mid.rb1", cmid, cmid, a.temb_dim());

        if (variant != Variant::plain)
            m.mask_trunk.build(m.params, "mask", a, a.num_regions, 1, 0, 0);

        int extra = (variant == Variant::concat) ? a.num_regions : 0;
        if (variant == Variant::unshared) {
            for (int k = 0; k < a.num_regions; k++) {
                DecoderTrunk<T> t;
                t.build(m.params, strformat("dec%d", k), a, a.img_channels, 3, 0, 0);
                m.dec_trunks.push_back(std::move(t));
            }
        } else {
            DecoderTrunk<T> t;
            t.build(m.params, "dec", a, a.img_channels, 3, extra, extra);
            m.dec_trunks.push_back(std::move(t));
        }
        return m;
    }

    graph::Var<T> time_context(const TimestepBatch& tb) const {
        return enc.time_context(tb, arch.temb_dim());
    }

    std::vector<graph::Var<T>> encode(const graph::Var<T>& x_t, const graph::Var<T>& es) const {
        check_shape_input(x_t->val);
        counters.enc++;
        return enc(x_t, es);
    }

    graph::Var<T> mid(const std::vector<graph::Var<T>>& skips, const graph::Var<T>& es) const {
        counters.mid++;
        auto h = mid_rb0(skips.back(), es);
        if (mid_attn) h = (*mid_attn)(h);
        return mid_rb1(h, es);
    }

    // Full-resolution K-channel softmax masks. The mask generator sees the
    // unmasked skips plus h_mid (concatenated at the deepest stage, where the
    // two have equal resolution).
    graph::Var<T> generate_masks(const graph::Var<T>& h_mid, const std::vector<graph::Var<T>>& skips,
                                 const graph::Var<T>& es) const {
        if (variant == Variant::plain)
            throw ContractError("generate_masks: plain variant has no mask generator");
        counters.mask++;
        return graph::softmax_channels(mask_trunk(h_mid, skips, es));
    }

    // One decoder branch: skips multiplied by the branch mask downsampled to
    // each stage's resolution, h_mid passed through unmasked.
    graph::Var<T> decode_branch(const graph::Var<T>& h_mid, const std::vector<graph::Var<T>>& skips,
                                const graph::Var<T>& m_k, const graph::Var<T>& es,
                                int trunk_index = 0) const {
        counters.dec++;
        std::vector<graph::Var<T>> masked;
        for (std::size_t s = 0; s < skips.size(); s++)
            masked.push_back(graph::mul_mask(skips[s], downsample_mask(m_k, 1 << s)));
        return dec_trunks[std::size_t(trunk_index)](h_mid, masked, es);
    }

    // eps_hat plus the mask stack. Covers every variant; trainer and sampler
    // call this one entry point.
    std::pair<graph::Var<T>, graph::Var<T>> predict_noise(const graph::Var<T>& x_t,
                                                          const TimestepBatch& tb) const {
        auto es = time_context(tb);
        auto skips = encode(x_t, es);
        auto h_mid = mid(skips, es);
        int B = x_t->val.dim(0);

        if (variant == Variant::plain) {
            counters.dec++;
            auto eps = dec_trunks[0](h_mid, skips, es);
            auto ones = graph::constant(
                Tensor<T>::full({B, 1, arch.resolution, arch.resolution}, T(1)));
            return {eps, ones};
        }

        auto m = generate_masks(h_mid, skips, es);
        int K = arch.num_regions;
        int S = arch.stages();

        if (variant == Variant::concat) {
            counters.dec++;
            std::vector<graph::Var<T>> aug;
            for (int s = 0; s < S; s++)
                aug.push_back(graph::concat_channels(skips[std::size_t(s)],
                                                     downsample_mask(m, 1 << s)));
            auto d0 = graph::concat_channels(h_mid, downsample_mask(m, 1 << (S - 1)));
            return {dec_trunks[0](d0, aug, es), m};
        }

        graph::Var<T> eps;
        for (int k = 0; k < K; k++) {
            auto m_k = graph::slice_channels(m, k, k + 1);
            graph::Var<T> eps_k;
            if (variant == Variant::mask_mid) {
                counters.dec++;
                auto masked_mid = graph::mul_mask(h_mid, downsample_mask(m_k, 1 << (S - 1)));
                eps_k = dec_trunks[0](masked_mid, skips, es);
            } else {
                int trunk = (variant == Variant::unshared) ? k : 0;
                eps_k = decode_branch(h_mid, skips, m_k, es, trunk);
            }
            auto weighted = graph::mul_mask(eps_k, m_k);
            eps = eps ? graph::add(eps, weighted) : weighted;
        }
        return {eps, m};
    }

    // --- tensor-level conveniences (no recording) ---

    std::pair<Tensor<T>, Tensor<T>> predict_noise_eval(const Tensor<T>& x_t,
                                                       const TimestepBatch& tb) const {
        graph::NoGrad<T> ng;
        auto [eps, m] = predict_noise(graph::constant(x_t), tb);
        return {eps->val, m->val};
    }

    // Mask-only path for segmentation: encoder, mid and mask passes only — no
    // decoder branches run.
    Tensor<T> masks_only(const Tensor<T>& x_t, const TimestepBatch& tb) const {
        graph::NoGrad<T> ng;
        auto x = graph::constant(x_t);
        auto es = time_context(tb);
        auto skips = encode(x, es);
        auto h_mid = mid(skips, es);
        return generate_masks(h_mid, skips, es)->val;
    }

    void check_shape_input(const Tensor<T>& x) const {
        check_rank4(x, "model input");
        if (x.dim(1) != arch.img_channels || x.dim(2) != arch.resolution ||
            x.dim(3) != arch.resolution)
            throw ShapeError(strformat(
                "model input: expected (*,%d,%d,%d), got %s", arch.img_channels, arch.resolution,
                arch.resolution, shape_str(x.shape).c_str()));
    }
};

}  // namespace fdm
