#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fdm/rng.hpp"
#include "fdm/tensor.hpp"
#include "fdm/unet.hpp"

using namespace fdm;

namespace {

ArchSpec micro_arch() {
    ArchSpec a;
    a.base_channels = 4;
    a.stage_multipliers = {1, 2};
    a.res_blocks_per_stage = 1;
    a.num_regions = 2;
    a.img_channels = 3;
    a.resolution = 8;
    a.time_embed_dim = 8;
    return a;
}

Tensor<float> random_batch(const ArchSpec& a, int B, std::uint64_t seed) {
    RngStream rng(seed);
    return Tensor<float>::randn({B, a.img_channels, a.resolution, a.resolution}, rng, 0.5f);
}

TimestepBatch steps(std::vector<int> t) { return TimestepBatch{std::move(t)}; }

// Independent parameter arithmetic, written from the architecture definition
// rather than by calling into ParamStore, so a bookkeeping bug in the model
// cannot cancel out of both sides.
std::int64_t n_conv(int cin, int cout, int k) { return std::int64_t(cout) * cin * k * k + cout; }
std::int64_t n_linear(int din, int dout) { return std::int64_t(dout) * din + dout; }
std::int64_t n_gn(int c) { return 2 * std::int64_t(c); }

std::int64_t n_resblock(int cin, int cout, int temb) {
    std::int64_t n = n_gn(cin) + n_conv(cin, cout, 3) + n_linear(temb, cout) + n_gn(cout) +
                     n_conv(cout, cout, 3);
    if (cin != cout) n += n_conv(cin, cout, 1);
    return n;
}

std::int64_t n_encoder(const ArchSpec& a) {
    std::int64_t n = n_conv(a.img_channels, a.channels(0), 3) +
                     n_linear(a.temb_dim(), a.temb_dim()) * 2;
    int S = a.stages();
    for (int s = 0; s < S; s++) {
        int cin = (s == 0) ? a.channels(0) : a.channels(s - 1);
        for (int r = 0; r < a.res_blocks_per_stage; r++)
            n += n_resblock(r == 0 ? cin : a.channels(s), a.channels(s), a.temb_dim());
        if (s + 1 < S) n += n_conv(a.channels(s), a.channels(s), 3);
    }
    return n;
}

std::int64_t n_mid(const ArchSpec& a) {
    int cmid = a.channels(a.stages() - 1);
    std::int64_t n = 2 * n_resblock(cmid, cmid, a.temb_dim());
    if (a.attention_at_lowest) n += n_gn(cmid) + 4 * n_conv(cmid, cmid, 1);
    return n;
}

std::int64_t n_decoder(const ArchSpec& a, int out_channels, int head_k, int d0_extra,
                       int skip_extra) {
    int S = a.stages();
    std::int64_t n = 0;
    for (int s = S - 1; s >= 0; s--) {
        int d_ch = (s == S - 1) ? a.channels(S - 1) + d0_extra : a.channels(s + 1);
        for (int r = 0; r < a.res_blocks_per_stage; r++) {
            int cin = (r == 0) ? d_ch + a.channels(s) + skip_extra : a.channels(s);
            n += n_resblock(cin, a.channels(s), a.temb_dim());
        }
        if (s > 0) n += n_conv(a.channels(s), a.channels(s), 3);
    }
    return n + n_gn(a.channels(0)) + n_conv(a.channels(0), out_channels, head_k);
}

}  // namespace

TEST_CASE("output shapes across all variants") {
    auto a = micro_arch();
    const int B = 2;
    auto x = random_batch(a, B, 7);
    auto tb = steps({1, 5});
    for (Variant v :
         {Variant::shared, Variant::concat, Variant::mask_mid, Variant::unshared, Variant::plain}) {
        CAPTURE(to_string(v));
        auto model = FactorizedUNet<float>::build(a, v, 11);
        auto [eps, m] = model.predict_noise_eval(x, tb);
        CHECK(eps.shape == Shape{B, a.img_channels, a.resolution, a.resolution});
        int mask_ch = (v == Variant::plain) ? 1 : a.num_regions;
        CHECK(m.shape == Shape{B, mask_ch, a.resolution, a.resolution});
        for (float e : eps.v) CHECK(std::isfinite(e));
    }
}

TEST_CASE("masks are a per-pixel simplex in every mask-bearing variant") {
    auto a = micro_arch();
    a.num_regions = 3;
    const int B = 2;
    auto x = random_batch(a, B, 8);
    auto tb = steps({3, 9});
    for (Variant v : {Variant::shared, Variant::concat, Variant::mask_mid, Variant::unshared}) {
        CAPTURE(to_string(v));
        auto model = FactorizedUNet<float>::build(a, v, 12);
        auto [eps, m] = model.predict_noise_eval(x, tb);
        int HW = a.resolution * a.resolution;
        for (int b = 0; b < B; b++)
            for (int i = 0; i < HW; i++) {
                double s = 0;
                for (int k = 0; k < a.num_regions; k++) {
                    float mv = m.v[std::size_t((b * a.num_regions + k) * HW + i)];
                    CHECK(mv >= 0.0f);
                    CHECK(mv <= 1.0f);
                    s += double(mv);
                }
                CHECK(std::abs(s - 1.0) <= 1e-5);
            }
    }
}

TEST_CASE("plain variant reports an all-ones mask and has no mask generator") {
    auto a = micro_arch();
    auto model = FactorizedUNet<float>::build(a, Variant::plain, 13);
    auto x = random_batch(a, 1, 9);
    auto [eps, m] = model.predict_noise_eval(x, steps({4}));
    for (float v : m.v) CHECK(v == 1.0f);
    CHECK(model.params.count_prefix("mask.") == 0);

    graph::NoGrad<float> ng;
    auto tb = steps({4});
    auto es = model.time_context(tb);
    auto skips = model.encode(graph::constant(x), es);
    auto h_mid = model.mid(skips, es);
    CHECK_THROWS_AS(model.generate_masks(h_mid, skips, es), ContractError);
}

TEST_CASE("K=1 mask is exactly one") {
    auto a = micro_arch();
    a.num_regions = 1;
    auto model = FactorizedUNet<float>::build(a, Variant::shared, 14);
    auto x = random_batch(a, 2, 10);
    auto m = model.masks_only(x, steps({2, 7}));
    // Softmax over a single channel must be bitwise 1.0, not merely close.
    for (float v : m.v) CHECK(v == 1.0f);
}

TEST_CASE("parameter counts match independent arithmetic") {
    auto a = micro_arch();
    a.num_regions = 3;

    auto shared = FactorizedUNet<float>::build(a, Variant::shared, 1);
    CHECK(shared.params.count_prefix("enc.") == n_encoder(a));
    CHECK(shared.params.count_prefix("mid.") == n_mid(a));
    CHECK(shared.params.count_prefix("mask.") == n_decoder(a, a.num_regions, 1, 0, 0));
    CHECK(shared.params.count_prefix("dec.") == n_decoder(a, a.img_channels, 3, 0, 0));
    CHECK(shared.params.count_total() ==
          n_encoder(a) + n_mid(a) + n_decoder(a, a.num_regions, 1, 0, 0) +
              n_decoder(a, a.img_channels, 3, 0, 0));

    // concat widens the decoder inputs by K channels at every junction.
    auto concat = FactorizedUNet<float>::build(a, Variant::concat, 1);
    CHECK(concat.params.count_prefix("dec.") ==
          n_decoder(a, a.img_channels, 3, a.num_regions, a.num_regions));

    // unshared replicates the whole decoder per region.
    auto unshared = FactorizedUNet<float>::build(a, Variant::unshared, 1);
    CHECK(unshared.params.count_prefix("dec") ==
          std::int64_t(a.num_regions) * n_decoder(a, a.img_channels, 3, 0, 0));

    // plain drops the mask generator and keeps a single decoder.
    auto plain = FactorizedUNet<float>::build(a, Variant::plain, 1);
    CHECK(plain.params.count_total() ==
          n_encoder(a) + n_mid(a) + n_decoder(a, a.img_channels, 3, 0, 0));

    // The shared decoder parameter count does not grow with K: only the mask
    // head's 1x1 projection does.
    auto a5 = a;
    a5.num_regions = 5;
    auto shared5 = FactorizedUNet<float>::build(a5, Variant::shared, 1);
    CHECK(shared5.params.count_prefix("dec.") == shared.params.count_prefix("dec."));

    // Attention adds norm + q/k/v/proj at the lowest resolution.
    auto a_attn = a;
    a_attn.attention_at_lowest = true;
    auto with_attn = FactorizedUNet<float>::build(a_attn, Variant::shared, 1);
    CHECK(with_attn.params.count_prefix("mid.") == n_mid(a_attn));
}

TEST_CASE("recombined prediction is the mask-weighted sum of branch outputs") {
    auto a = micro_arch();
    a.num_regions = 3;
    auto model = FactorizedUNet<float>::build(a, Variant::shared, 21);
    const int B = 2;
    auto x = random_batch(a, B, 22);
    auto tb = steps({2, 6});

    auto [eps_hat, m] = model.predict_noise_eval(x, tb);

    graph::NoGrad<float> ng;
    auto xv = graph::constant(x);
    auto es = model.time_context(tb);
    auto skips = model.encode(xv, es);
    auto h_mid = model.mid(skips, es);
    auto masks = model.generate_masks(h_mid, skips, es);
    std::vector<Tensor<float>> branch;
    for (int k = 0; k < a.num_regions; k++) {
        auto m_k = graph::slice_channels(masks, k, k + 1);
        branch.push_back(model.decode_branch(h_mid, skips, m_k, es)->val);
    }

    int C = a.img_channels, HW = a.resolution * a.resolution, K = a.num_regions;
    for (int b = 0; b < B; b++)
        for (int c = 0; c < C; c++)
            for (int i = 0; i < HW; i++) {
                std::size_t xi = std::size_t((b * C + c) * HW + i);
                double sum = 0, lo = 1e30, hi = -1e30;
                for (int k = 0; k < K; k++) {
                    double mv = m.v[std::size_t((b * K + k) * HW + i)];
                    double ev = branch[std::size_t(k)].v[xi];
                    sum += mv * ev;
                    lo = std::min(lo, ev);
                    hi = std::max(hi, ev);
                }
                CHECK(double(eps_hat.v[xi]) == doctest::Approx(sum).epsilon(1e-5).scale(1.0));
                // Convexity: a simplex-weighted average stays inside the hull
                // of the branch outputs.
                CHECK(double(eps_hat.v[xi]) >= lo - 1e-5);
                CHECK(double(eps_hat.v[xi]) <= hi + 1e-5);
            }
}

TEST_CASE("same seed builds identical models; different seeds differ") {
    auto a = micro_arch();
    auto m1 = FactorizedUNet<float>::build(a, Variant::shared, 31);
    auto m2 = FactorizedUNet<float>::build(a, Variant::shared, 31);
    REQUIRE(m1.params.entries.size() == m2.params.entries.size());
    for (std::size_t i = 0; i < m1.params.entries.size(); i++) {
        CHECK(m1.params.entries[i].first == m2.params.entries[i].first);
        CHECK(m1.params.entries[i].second->val.v == m2.params.entries[i].second->val.v);
    }
    auto x = random_batch(a, 1, 32);
    auto [e1, k1] = m1.predict_noise_eval(x, steps({5}));
    auto [e2, k2] = m2.predict_noise_eval(x, steps({5}));
    CHECK(e1.v == e2.v);
    CHECK(k1.v == k2.v);

    auto m3 = FactorizedUNet<float>::build(a, Variant::shared, 32);
    bool any_diff = false;
    for (std::size_t i = 0; i < m1.params.entries.size() && !any_diff; i++)
        if (m1.params.entries[i].second->val.v != m3.params.entries[i].second->val.v)
            any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("initialization is keyed by parameter name, not build order") {
    // Two different builds (different parameter sets overall) must still draw
    // bitwise-identical values for every name they share. This is the property
    // that makes the K=1 factorized model equal the plain one at init.
    auto a = micro_arch();
    a.num_regions = 1;
    auto shared = FactorizedUNet<float>::build(a, Variant::shared, 41);
    auto plain = FactorizedUNet<float>::build(a, Variant::plain, 41);
    int shared_only = 0;
    for (const auto& [name, var] : shared.params.entries) {
        bool found = false;
        for (const auto& [pname, pvar] : plain.params.entries)
            if (pname == name) {
                found = true;
                CHECK(var->val.v == pvar->val.v);
            }
        if (!found) shared_only++;
    }
    CHECK(shared_only > 0);  // the mask generator exists only in the factorized build
    for (const auto& [name, var] : shared.params.entries)
        if (name.rfind("mask.", 0) == 0) CHECK(plain.params.count_prefix(name) == 0);
}

TEST_CASE("pass counters: segmentation runs no decoder branches") {
    auto a = micro_arch();
    a.num_regions = 3;
    auto x = random_batch(a, 2, 51);
    auto tb = steps({4, 4});

    auto shared = FactorizedUNet<float>::build(a, Variant::shared, 52);
    shared.counters.reset();
    shared.predict_noise_eval(x, tb);
    CHECK(shared.counters.enc == 1);
    CHECK(shared.counters.mid == 1);
    CHECK(shared.counters.mask == 1);
    CHECK(shared.counters.dec == 3);  // one branch per region

    shared.counters.reset();
    shared.masks_only(x, tb);
    CHECK(shared.counters.enc == 1);
    CHECK(shared.counters.mid == 1);
    CHECK(shared.counters.mask == 1);
    CHECK(shared.counters.dec == 0);  // mask-only inference skips the decoders

    auto concat = FactorizedUNet<float>::build(a, Variant::concat, 52);
    concat.counters.reset();
    concat.predict_noise_eval(x, tb);
    CHECK(concat.counters.dec == 1);  // single pass over widened features

    auto unshared = FactorizedUNet<float>::build(a, Variant::unshared, 52);
    unshared.counters.reset();
    unshared.predict_noise_eval(x, tb);
    CHECK(unshared.counters.dec == 3);

    auto plain = FactorizedUNet<float>::build(a, Variant::plain, 52);
    plain.counters.reset();
    plain.predict_noise_eval(x, tb);
    CHECK(plain.counters.mask == 0);
    CHECK(plain.counters.dec == 1);
}

TEST_CASE("attention block participates when enabled") {
    auto a = micro_arch();
    a.attention_at_lowest = true;
    auto model = FactorizedUNet<float>::build(a, Variant::shared, 61);
    CHECK(model.params.count_prefix("mid.attn") > 0);
    auto x = random_batch(a, 1, 62);
    auto [eps, m] = model.predict_noise_eval(x, steps({3}));
    for (float v : eps.v) CHECK(std::isfinite(v));

    auto off = micro_arch();
    auto base = FactorizedUNet<float>::build(off, Variant::shared, 61);
    CHECK(base.params.count_prefix("mid.attn") == 0);
}

TEST_CASE("input shape validation") {
    auto a = micro_arch();
    auto model = FactorizedUNet<float>::build(a, Variant::shared, 71);
    RngStream rng(72);
    auto bad_res = Tensor<float>::randn({1, 3, 4, 4}, rng);
    CHECK_THROWS_AS(model.predict_noise_eval(bad_res, steps({1})), ShapeError);
    auto bad_ch = Tensor<float>::randn({1, 1, 8, 8}, rng);
    CHECK_THROWS_AS(model.predict_noise_eval(bad_ch, steps({1})), ShapeError);
}

TEST_CASE("architecture validation rejects inconsistent specs") {
    auto ok = micro_arch();
    CHECK_NOTHROW(ok.validate());

    auto bad = ok;
    bad.resolution = 9;  // not divisible by 2^(stages-1)
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = ok;
    bad.num_regions = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = ok;
    bad.time_embed_dim = 7;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = ok;
    bad.stage_multipliers = {};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = ok;
    bad.res_blocks_per_stage = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("mask downsampling averages area and preserves the simplex") {
    RngStream rng(81);
    // Build a valid 2-channel simplex map by softmaxing noise.
    Tensor<float> logits = Tensor<float>::randn({1, 2, 4, 4}, rng);
    Tensor<float> m(logits.shape);
    kernels::softmax_rows_fwd(logits.data(), m.data(), 16, 2, 1, 16);
    auto down = downsample_mask(m, 2);
    CHECK(down.shape == Shape{1, 2, 2, 2});
    for (int i = 0; i < 4; i++) {
        double s = down.v[std::size_t(i)] + down.v[std::size_t(4 + i)];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
    CHECK(downsample_mask(m, 1).v == m.v);
    CHECK_THROWS_AS(downsample_mask(m, 3), ContractError);
}

TEST_CASE("sinusoidal time embedding: layout and hand values") {
    TimestepBatch tb{{1, 17}};
    auto e = sinusoidal_time_embedding<double>(tb, 4);
    CHECK(e.shape == Shape{2, 4});
    // dim 4 -> half 2, frequencies 1 and 1e-4.
    for (int b = 0; b < 2; b++) {
        double t = tb.t[std::size_t(b)];
        CHECK(e.v[std::size_t(b * 4 + 0)] == doctest::Approx(std::sin(t)).epsilon(1e-12));
        CHECK(e.v[std::size_t(b * 4 + 1)] == doctest::Approx(std::sin(t * 1e-4)).epsilon(1e-12));
        CHECK(e.v[std::size_t(b * 4 + 2)] == doctest::Approx(std::cos(t)).epsilon(1e-12));
        CHECK(e.v[std::size_t(b * 4 + 3)] == doctest::Approx(std::cos(t * 1e-4)).epsilon(1e-12));
    }
    for (double v : e.v) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("timestep conditioning changes the prediction") {
    auto a = micro_arch();
    auto model = FactorizedUNet<float>::build(a, Variant::shared, 91);
    auto x = random_batch(a, 1, 92);
    auto [e1, m1] = model.predict_noise_eval(x, steps({1}));
    auto [e2, m2] = model.predict_noise_eval(x, steps({50}));
    bool differs = false;
    for (std::size_t i = 0; i < e1.v.size(); i++)
        if (e1.v[i] != e2.v[i]) differs = true;
    CHECK(differs);
}
