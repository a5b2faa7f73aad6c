// Benchmarks every dense kernel's optimized entry point against the serial
// reference implementation it dispatches to, on problem sizes drawn from the
// 32x32 model. Also reports the largest elementwise deviation between the two
// paths as a cross-check.
//
// Usage: bench_kernels [threads]   (default: all available)

#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>
#include <vector>

#include "fdm/kernels.hpp"
#include "fdm/rng.hpp"

using namespace fdm;
namespace K = fdm::kernels;

namespace {

double now() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

std::vector<float> randvec(std::int64_t n, RngStream& rng, float scale = 1.0f) {
    std::vector<float> v(std::size_t(n), 0.0f);
    for (auto& x : v) x = scale * float(rng.normal());
    return v;
}

double max_diff(const std::vector<float>& a, const std::vector<float>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); i++) m = std::max(m, std::abs(double(a[i]) - b[i]));
    return m;
}

struct Row {
    std::string name, problem;
    double ref_ms, opt_ms, diff, gflop;  // gflop: work per call, 0 = not reported
};

std::vector<Row> rows;

// Times `fn` through both dispatch modes; `out` is the buffer the kernel
// writes (compared across modes), `reset` re-zeroes accumulation targets.
void bench(const std::string& name, const std::string& problem, double flops_per_call,
           std::vector<float>& out, const std::function<void()>& fn,
           const std::function<void()>& reset = nullptr) {
    auto run_mode = [&](bool use_ref, std::vector<float>& snapshot) {
        K::config().use_reference = use_ref;
        if (reset) reset();
        fn();  // warm-up; also the run whose output is compared
        snapshot = out;
        int reps = 1;
        double t = 0;
        for (;;) {
            if (reset) reset();
            double t0 = now();
            for (int r = 0; r < reps; r++) fn();
            t = now() - t0;
            if (t > 0.1 || reps >= 1 << 14) break;
            reps *= 4;
        }
        return t / reps;
    };
    std::vector<float> opt_out, ref_out;
    double opt = run_mode(false, opt_out);
    double ref = run_mode(true, ref_out);
    K::config().use_reference = false;
    rows.push_back({name, problem, ref * 1e3, opt * 1e3, max_diff(ref_out, opt_out),
                    flops_per_call});
}

}  // namespace

int main(int argc, char** argv) {
    if (argc > 1) omp_set_num_threads(std::atoi(argv[1]));
    int threads = K::max_threads();
    RngStream rng = RngStream::keyed(1, "bench");

    // GEMM: the convolution workhorse, one conv-shaped and one square problem
    {
        const int M = 128, N = 1024, Kd = 576;
        auto A = randvec(std::int64_t(M) * Kd, rng), B = randvec(std::int64_t(Kd) * N, rng);
        std::vector<float> C(std::size_t(M) * N);
        bench("gemm", "128x1024x576", 2.0 * M * N * Kd, C, [&] {
            if (K::config().use_reference)
                K::ref::gemm(false, false, M, N, Kd, 1.0f, A.data(), Kd, B.data(), N, 0.0f,
                             C.data(), N);
            else
                K::gemm(false, false, M, N, Kd, 1.0f, A.data(), Kd, B.data(), N, 0.0f, C.data(),
                        N);
        });
    }
    {
        const int M = 256, N = 256, Kd = 256;
        auto A = randvec(std::int64_t(M) * Kd, rng), B = randvec(std::int64_t(Kd) * N, rng);
        std::vector<float> C(std::size_t(M) * N);
        bench("gemm", "256x256x256", 2.0 * M * N * Kd, C, [&] {
            if (K::config().use_reference)
                K::ref::gemm(false, false, M, N, Kd, 1.0f, A.data(), Kd, B.data(), N, 0.0f,
                             C.data(), N);
            else
                K::gemm(false, false, M, N, Kd, 1.0f, A.data(), Kd, B.data(), N, 0.0f, C.data(),
                        N);
        });
    }

    // 3x3 convolution at the model's second stage: 16x64x16x16 -> 64 channels
    {
        auto d = K::conv_dims(16, 64, 16, 16, 64, 3, 1, 1);
        std::int64_t xn = std::int64_t(d.B) * d.Cin * d.H * d.W;
        std::int64_t yn = std::int64_t(d.B) * d.Cout * d.Ho * d.Wo;
        std::int64_t wn = std::int64_t(d.Cout) * d.Cin * d.K * d.K;
        auto x = randvec(xn, rng), w = randvec(wn, rng, 0.1f), b = randvec(d.Cout, rng);
        std::vector<float> y(std::size_t(yn), 0.0f);
        double flops = 2.0 * yn * d.Cin * d.K * d.K;
        bench("conv2d_fwd", "16x64x16x16 k3", flops, y,
              [&] { K::conv2d_fwd(x.data(), w.data(), b.data(), y.data(), d); });

        auto gy = randvec(yn, rng);
        std::vector<float> gx(std::size_t(xn), 0.0f);
        bench(
            "conv2d_bwd_input", "16x64x16x16 k3", flops, gx,
            [&] { K::conv2d_bwd_input(gy.data(), w.data(), gx.data(), d); },
            [&] { std::fill(gx.begin(), gx.end(), 0.0f); });

        std::vector<float> gw(std::size_t(wn), 0.0f), gb(std::size_t(d.Cout), 0.0f);
        bench(
            "conv2d_bwd_weight", "16x64x16x16 k3", flops, gw,
            [&] { K::conv2d_bwd_weight(x.data(), gy.data(), gw.data(), gb.data(), d); },
            [&] {
                std::fill(gw.begin(), gw.end(), 0.0f);
                std::fill(gb.begin(), gb.end(), 0.0f);
            });
    }

    // group normalization over the deepest feature map: 16x128 at 8x8
    {
        const int B = 16, C = 128, HW = 64, G = 32;
        std::int64_t n = std::int64_t(B) * C * HW;
        auto x = randvec(n, rng);
        auto gamma = randvec(C, rng, 0.1f);
        for (auto& g : gamma) g += 1.0f;
        auto beta = randvec(C, rng, 0.1f);
        std::vector<float> y(std::size_t(n), 0.0f), mean(std::size_t(B) * G), rstd(std::size_t(B) * G);
        bench("groupnorm_fwd", "16x128x8x8 g32", 0, y, [&] {
            K::groupnorm_fwd(x.data(), gamma.data(), beta.data(), y.data(), mean.data(),
                             rstd.data(), B, C, HW, G, 1e-5f);
        });
        auto gy = randvec(n, rng);
        std::vector<float> gx(std::size_t(n), 0.0f), ggamma(std::size_t(C), 0.0f), gbeta(std::size_t(C), 0.0f);
        bench(
            "groupnorm_bwd", "16x128x8x8 g32", 0, gx,
            [&] {
                K::groupnorm_bwd(x.data(), gamma.data(), mean.data(), rstd.data(), gy.data(),
                                 gx.data(), ggamma.data(), gbeta.data(), B, C, HW, G);
            },
            [&] {
                std::fill(gx.begin(), gx.end(), 0.0f);
                std::fill(ggamma.begin(), ggamma.end(), 0.0f);
                std::fill(gbeta.begin(), gbeta.end(), 0.0f);
            });
    }

    // SiLU over a full first-stage activation: 16x32x32x32
    {
        std::int64_t n = 16 * 32 * 32 * 32;
        auto x = randvec(n, rng);
        std::vector<float> y(std::size_t(n), 0.0f);
        bench("silu_fwd", "524288 elems", 0, y, [&] { K::silu_fwd(x.data(), y.data(), n); });
        auto gy = randvec(n, rng);
        std::vector<float> gx(std::size_t(n), 0.0f);
        bench(
            "silu_bwd", "524288 elems", 0, gx,
            [&] { K::silu_bwd(x.data(), gy.data(), gx.data(), n); },
            [&] { std::fill(gx.begin(), gx.end(), 0.0f); });
    }

    // channel softmax in mask shape: 3 regions at 128x128 pixels
    {
        const std::int64_t HW = 128 * 128;
        const int n = 3;
        auto x = randvec(HW * n, rng);
        std::vector<float> y(std::size_t(HW * n));
        bench("softmax_rows_fwd", "16384 rows n=3", 0, y,
              [&] { K::softmax_rows_fwd(x.data(), y.data(), HW, n, 1, HW); });
        auto gy = randvec(HW * n, rng);
        std::vector<float> gx(std::size_t(HW * n));
        bench(
            "softmax_rows_bwd", "16384 rows n=3", 0, gx,
            [&] { K::softmax_rows_bwd(y.data(), gy.data(), gx.data(), HW, n, 1, HW); },
            [&] { std::fill(gx.begin(), gx.end(), 0.0f); });
    }

    // 2x average pooling and nearest-neighbor upsampling: 16x64x32x32
    {
        const int B = 16, C = 64, H = 32, W = 32;
        std::int64_t n = std::int64_t(B) * C * H * W;
        auto x = randvec(n, rng);
        std::vector<float> y(std::size_t(n) / 4);
        bench("avgpool_fwd", "16x64x32x32 f2", 0, y,
              [&] { K::avgpool_fwd(x.data(), y.data(), B, C, H, W, 2); });
        auto gy = randvec(n / 4, rng);
        std::vector<float> gx(std::size_t(n), 0.0f);
        bench(
            "avgpool_bwd", "16x64x32x32 f2", 0, gx,
            [&] { K::avgpool_bwd(gy.data(), gx.data(), B, C, H, W, 2); },
            [&] { std::fill(gx.begin(), gx.end(), 0.0f); });

        auto xs = randvec(n / 4, rng);
        std::vector<float> yu(std::size_t(n), 0.0f);
        bench("upsample_nn2_fwd", "16x64x16x16", 0, yu,
              [&] { K::upsample_nn2_fwd(xs.data(), yu.data(), B, C, H / 2, W / 2); });
        auto gyu = randvec(n, rng);
        std::vector<float> gxu(std::size_t(n) / 4);
        bench(
            "upsample_nn2_bwd", "16x64x16x16", 0, gxu,
            [&] { K::upsample_nn2_bwd(gyu.data(), gxu.data(), B, C, H / 2, W / 2); },
            [&] { std::fill(gxu.begin(), gxu.end(), 0.0f); });
    }

    // per-region skip gating: 16x64 channels x 1024 pixels
    {
        const int B = 16, C = 64;
        const std::int64_t HW = 1024;
        std::int64_t xn = std::int64_t(B) * C * HW, mn = std::int64_t(B) * HW;
        auto x = randvec(xn, rng), m = randvec(mn, rng, 0.25f);
        std::vector<float> y(std::size_t(xn), 0.0f);
        bench("mul_mask_fwd", "16x64x32x32", 0, y,
              [&] { K::mul_mask_fwd(x.data(), m.data(), y.data(), B, C, HW); });
        auto gy = randvec(xn, rng);
        std::vector<float> gx(std::size_t(xn), 0.0f), gm(std::size_t(mn), 0.0f);
        bench(
            "mul_mask_bwd", "16x64x32x32", 0, gx,
            [&] { K::mul_mask_bwd(x.data(), m.data(), gy.data(), gx.data(), gm.data(), B, C, HW); },
            [&] {
                std::fill(gx.begin(), gx.end(), 0.0f);
                std::fill(gm.begin(), gm.end(), 0.0f);
            });
    }

    // time-embedding broadcast add: 16x256 channels x 64 pixels
    {
        const int B = 16, C = 256;
        const std::int64_t HW = 64;
        std::int64_t xn = std::int64_t(B) * C * HW;
        auto x = randvec(xn, rng), t = randvec(std::int64_t(B) * C, rng);
        std::vector<float> y(std::size_t(xn), 0.0f);
        bench("add_chvec_fwd", "16x256x8x8", 0, y,
              [&] { K::add_chvec_fwd(x.data(), t.data(), y.data(), B, C, HW); });
        auto gy = randvec(xn, rng);
        std::vector<float> gx(std::size_t(xn), 0.0f), gt(std::size_t(B) * C);
        bench(
            "add_chvec_bwd", "16x256x8x8", 0, gx,
            [&] { K::add_chvec_bwd(gy.data(), gx.data(), gt.data(), B, C, HW); },
            [&] {
                std::fill(gx.begin(), gx.end(), 0.0f);
                std::fill(gt.begin(), gt.end(), 0.0f);
            });
    }

    std::printf("kernel benchmark: optimized dispatch vs serial reference (%d thread%s)\n\n",
                threads, threads == 1 ? "" : "s");
    std::printf("%-18s %-16s %12s %12s %9s %11s %11s\n", "kernel", "problem", "ref ms",
                "opt ms", "speedup", "opt GF/s", "max|diff|");
    for (const auto& r : rows) {
        std::string gf = r.gflop > 0 ? strformat("%11.1f", r.gflop / (r.opt_ms * 1e6)) :
                                       std::string(11, ' ');
        std::printf("%-18s %-16s %12.3f %12.3f %8.1fx %s %11.1e\n", r.name.c_str(),
                    r.problem.c_str(), r.ref_ms, r.opt_ms, r.ref_ms / r.opt_ms, gf.c_str(),
                    r.diff);
    }
    return 0;
}
