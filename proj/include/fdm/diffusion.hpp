#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fdm/common.hpp"
#include "fdm/rng.hpp"
#include "fdm/tensor.hpp"

// Stochastic-process numerics of the denoising diffusion model: the beta
// schedule with its derived tables, closed-form forward noising, the ancestral
// reverse update, and uniform timestep sampling. Timesteps are 1-indexed at
// every public boundary (t in [1, T]); vectors are stored 0-indexed with the
// conversion done here.

namespace fdm {

enum class SigmaMode {
    beta,       // sigma_t^2 = beta_t (simple variance choice)
    posterior,  // sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t
};

inline const char* to_string(SigmaMode m) {
    return m == SigmaMode::beta ? "beta" : "posterior";
}

inline SigmaMode sigma_mode_from_string(const std::string& s) {
    if (s == "beta") return SigmaMode::beta;
    if (s == "posterior") return SigmaMode::posterior;
    throw ConfigError("diffusion.sigma_mode: expected 'beta' or 'posterior', got '" + s + "'");
}

struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;       // beta[t-1] for t in [1, T]
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // cumulative product of alpha
    std::vector<double> sigma;      // reverse-step noise scale

    double beta_t(int t) const { return beta[check_t(t)]; }
    double alpha_t(int t) const { return alpha[check_t(t)]; }
    double alpha_bar_t(int t) const { return alpha_bar[check_t(t)]; }
    double sigma_t(int t) const { return sigma[check_t(t)]; }

    std::size_t check_t(int t) const {
        if (t < 1 || t > T)
            throw ContractError(strformat("timestep %d out of range [1, %d]", t, T));
        return std::size_t(t - 1);
    }
};

// Linear beta schedule with derived alpha / alpha_bar / sigma tables.
// alpha_bar is accumulated in 64-bit regardless of model precision.
inline NoiseSchedule build_linear_schedule(int T, double beta_start, double beta_end,
                                           SigmaMode mode = SigmaMode::beta) {
    if (T < 2) throw ConfigError(strformat("diffusion.T: need at least 2 steps, got %d", T));
    if (!(beta_start > 0.0))
        throw ConfigError(strformat("diffusion.beta_start: must be > 0, got %g", beta_start));
    if (!(beta_end >= beta_start))
        throw ConfigError(strformat("diffusion.beta_end: must be >= beta_start (%g), got %g",
                                    beta_start, beta_end));
    if (!(beta_end < 1.0))
        throw ConfigError(strformat("diffusion.beta_end: must be < 1, got %g", beta_end));

    NoiseSchedule s;
    s.T = T;
    s.beta.resize(std::size_t(T));
    s.alpha.resize(std::size_t(T));
    s.alpha_bar.resize(std::size_t(T));
    s.sigma.resize(std::size_t(T));
    double prod = 1.0;
    for (int i = 0; i < T; i++) {
        s.beta[std::size_t(i)] = beta_start + (beta_end - beta_start) * double(i) / double(T - 1);
        s.alpha[std::size_t(i)] = 1.0 - s.beta[std::size_t(i)];
        prod *= s.alpha[std::size_t(i)];
        s.alpha_bar[std::size_t(i)] = prod;
    }
    for (int i = 0; i < T; i++) {
        if (mode == SigmaMode::beta) {
            s.sigma[std::size_t(i)] = std::sqrt(s.beta[std::size_t(i)]);
        } else {
            double abar_prev = (i == 0) ? 1.0 : s.alpha_bar[std::size_t(i - 1)];
            double var = (1.0 - abar_prev) / (1.0 - s.alpha_bar[std::size_t(i)]) * s.beta[std::size_t(i)];
            s.sigma[std::size_t(i)] = std::sqrt(var);
        }
    }
    return s;
}

// Desk-scale schedule: beta_end chosen by bisection so that alpha_bar[T]
// matches the terminal alpha_bar of the (T=1000, 1e-4, 0.02) reference
// schedule — same end-point signal-to-noise at a lower step count.
inline double solve_beta_end_matching_terminal(int T, double beta_start, double target_alpha_bar_T) {
    auto terminal = [&](double be) {
        double prod = 1.0;
        for (int i = 0; i < T; i++)
            prod *= 1.0 - (beta_start + (be - beta_start) * double(i) / double(T - 1));
        return prod;
    };
    double lo = beta_start, hi = 0.999;  // terminal abar decreases in beta_end
    for (int it = 0; it < 200; it++) {
        double mid = 0.5 * (lo + hi);
        if (terminal(mid) > target_alpha_bar_T)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

inline double reference_terminal_alpha_bar() {
    NoiseSchedule ref = build_linear_schedule(1000, 1e-4, 0.02);
    return ref.alpha_bar_t(1000);
}

struct TimestepBatch {
    std::vector<int> t;  // 1-indexed, one per batch element
};

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, per element with its own t.
template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& x0, const TimestepBatch& tb, const Tensor<T>& eps,
                          const NoiseSchedule& s) {
    check_rank4(x0, "forward_diffuse x0");
    if (!x0.same_shape(eps))
        throw ShapeError("forward_diffuse: x0 shape " + shape_str(x0.shape) + " vs eps shape " +
                         shape_str(eps.shape));
    int B = x0.dim(0);
    if (int(tb.t.size()) != B)
        throw ShapeError(strformat("forward_diffuse: %d timesteps for batch of %d",
                                   int(tb.t.size()), B));
    std::int64_t per = x0.numel() / B;
    Tensor<T> out(x0.shape);
    for (int b = 0; b < B; b++) {
        double abar = s.alpha_bar_t(tb.t[std::size_t(b)]);
        T ca = T(std::sqrt(abar));
        T cb = T(std::sqrt(1.0 - abar));
        const T* xs = x0.data() + b * per;
        const T* es = eps.data() + b * per;
        T* os = out.data() + b * per;
        for (std::int64_t i = 0; i < per; i++) os[i] = ca * xs[i] + cb * es[i];
    }
    return out;
}

// x_{t-1} = (x_t - (1-alpha_t)/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z,
// with z = 0 required at the final step t = 1.
template <typename T>
Tensor<T> reverse_step(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t, const Tensor<T>* z,
                       const NoiseSchedule& s) {
    check_rank4(x_t, "reverse_step x_t");
    if (!x_t.same_shape(eps_hat))
        throw ShapeError("reverse_step: x_t shape " + shape_str(x_t.shape) + " vs eps_hat shape " +
                         shape_str(eps_hat.shape));
    double alpha = s.alpha_t(t);
    double abar = s.alpha_bar_t(t);
    if (t == 1 && z != nullptr) {
        for (T v : z->v)
            if (v != T(0)) throw ContractError("reverse_step: noise must be zero at final step t=1");
    }
    if (z && !x_t.same_shape(*z))
        throw ShapeError("reverse_step: z shape " + shape_str(z->shape) + " vs x_t shape " +
                         shape_str(x_t.shape));
    T inv_sqrt_alpha = T(1.0 / std::sqrt(alpha));
    T coeff = T((1.0 - alpha) / std::sqrt(1.0 - abar));
    T sig = T(s.sigma_t(t));
    Tensor<T> out(x_t.shape);
    const T* xs = x_t.data();
    const T* es = eps_hat.data();
    const T* zs = (z && t > 1) ? z->data() : nullptr;
    std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; i++) {
        T v = inv_sqrt_alpha * (xs[i] - coeff * es[i]);
        if (zs) v += sig * zs[i];
        out.v[std::size_t(i)] = v;
    }
    return out;
}

// i.i.d. uniform timesteps in [1, T].
inline TimestepBatch sample_timesteps(int batch, int T, RngStream& rng) {
    if (batch < 1) throw ContractError(strformat("sample_timesteps: batch must be >= 1, got %d", batch));
    TimestepBatch tb;
    tb.t.resize(std::size_t(batch));
    for (int i = 0; i < batch; i++) tb.t[std::size_t(i)] = int(rng.uniform_int(1, T));
    return tb;
}

}  // namespace fdm
