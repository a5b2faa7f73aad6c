#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "fdm/kernels.hpp"
#include "fdm/tensor.hpp"

// Reverse-mode autodiff on a recording tape. Each operation computes its
// output eagerly with the kernels above and, while recording, appends the
// output node together with a closure that scatters gradients back to its
// parents. backward() replays the tape in reverse; because every consumer of
// a node is recorded after it, all gradient contributions to a node have
// arrived before its own closure runs. Gradients accumulate (+=), which is
// what makes weight sharing (the same parameter node used several times in
// one pass) come out right with no special casing.
//
// Templated on the scalar type: float for training, double for the
// finite-difference gradient checks in the tests.

namespace fdm::graph {

template <typename T>
struct Node {
    Tensor<T> val;
    Tensor<T> grad;  // empty until gradient first reaches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backfn;

    Tensor<T>& g() {
        if (grad.numel() == 0) grad = Tensor<T>::zeros(val.shape);
        return grad;
    }
    bool has_grad() const { return grad.numel() != 0; }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
struct Tape {
    std::vector<Var<T>> ops;
    bool enabled = true;
};

template <typename T>
inline Tape<T>& tape() {
    static thread_local Tape<T> t;
    return t;
}

// RAII guard: everything built inside runs without recording (inference).
template <typename T>
struct NoGrad {
    bool prev;
    NoGrad() : prev(tape<T>().enabled) { tape<T>().enabled = false; }
    ~NoGrad() { tape<T>().enabled = prev; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;
};

template <typename T>
inline void clear_tape() {
    tape<T>().ops.clear();
}

template <typename T>
Var<T> constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(v);
    return n;
}

template <typename T>
Var<T> param(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(v);
    n->requires_grad = true;
    return n;
}

template <typename T>
Var<T> record(Tensor<T> val, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backfn) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(val);
    if (tape<T>().enabled) {
        bool req = false;
        for (const auto& p : parents)
            if (p && p->requires_grad) req = true;
        if (req) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->backfn = std::move(backfn);
            tape<T>().ops.push_back(n);
        }
    }
    return n;
}

// Backpropagate from a scalar node through everything recorded on the tape.
template <typename T>
void backward(const Var<T>& root) {
    if (root->val.numel() != 1)
        throw ContractError("backward: root must be a scalar, got shape " + shape_str(root->val.shape));
    root->g().v[0] = T(1);
    auto& ops = tape<T>().ops;
    for (auto it = ops.rbegin(); it != ops.rend(); ++it) {
        Node<T>& n = **it;
        if (n.backfn && n.has_grad()) n.backfn(n);
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
    check_rank4(x->val, "conv2d input");
    check_rank4(w->val, "conv2d weight");
    auto d = kernels::conv_dims(x->val.dim(0), x->val.dim(1), x->val.dim(2), x->val.dim(3),
                                w->val.dim(0), w->val.dim(2), stride, pad);
    if (w->val.dim(1) != d.Cin)
        throw ShapeError(strformat("conv2d: weight expects %d input channels, got %d", w->val.dim(1),
                                   d.Cin));
    Tensor<T> y({d.B, d.Cout, d.Ho, d.Wo});
    kernels::conv2d_fwd(x->val.data(), w->val.data(), b ? b->val.data() : nullptr, y.data(), d);
    return record<T>(std::move(y), {x, w, b}, [x, w, b, d](Node<T>& n) {
        if (x->requires_grad)
            kernels::conv2d_bwd_input(n.grad.data(), w->val.data(), x->g().data(), d);
        if (w->requires_grad)
            kernels::conv2d_bwd_weight(x->val.data(), n.grad.data(), w->g().data(),
                                       b && b->requires_grad ? b->g().data() : nullptr, d);
    });
}

// x: (B, Din); w: (Dout, Din); b: (Dout) or null.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    int B = x->val.dim(0), Din = x->val.dim(1), Dout = w->val.dim(0);
    if (w->val.dim(1) != Din)
        throw ShapeError(strformat("linear: weight expects %d inputs, got %d", w->val.dim(1), Din));
    Tensor<T> y({B, Dout});
    kernels::gemm<T>(false, true, B, Dout, Din, T(1), x->val.data(), Din, w->val.data(), Din, T(0),
                     y.data(), Dout);
    if (b) {
        for (int i = 0; i < B; i++)
            for (int j = 0; j < Dout; j++) y.v[std::size_t(i) * Dout + j] += b->val.v[std::size_t(j)];
    }
    return record<T>(std::move(y), {x, w, b}, [x, w, b, B, Din, Dout](Node<T>& n) {
        if (x->requires_grad)
            kernels::gemm<T>(false, false, B, Din, Dout, T(1), n.grad.data(), Dout, w->val.data(), Din,
                             T(1), x->g().data(), Din);
        if (w->requires_grad)
            kernels::gemm<T>(true, false, Dout, Din, B, T(1), n.grad.data(), Dout, x->val.data(), Din,
                             T(1), w->g().data(), Din);
        if (b && b->requires_grad) {
            T* gb = b->g().data();
            for (int i = 0; i < B; i++)
                for (int j = 0; j < Dout; j++) gb[j] += n.grad.v[std::size_t(i) * Dout + j];
        }
    });
}

template <typename T>
Var<T> groupnorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps) {
    check_rank4(x->val, "groupnorm input");
    int B = x->val.dim(0), C = x->val.dim(1);
    int HW = x->val.dim(2) * x->val.dim(3);
    if (C % groups != 0)
        throw ShapeError(strformat("groupnorm: %d channels not divisible by %d groups", C, groups));
    Tensor<T> y(x->val.shape);
    auto mean = std::make_shared<Tensor<T>>(Shape{B, groups});
    auto rstd = std::make_shared<Tensor<T>>(Shape{B, groups});
    kernels::groupnorm_fwd(x->val.data(), gamma->val.data(), beta->val.data(), y.data(), mean->data(),
                           rstd->data(), B, C, HW, groups, eps);
    return record<T>(std::move(y), {x, gamma, beta},
                     [x, gamma, beta, mean, rstd, B, C, HW, groups](Node<T>& n) {
                         kernels::groupnorm_bwd(x->val.data(), gamma->val.data(), mean->data(),
                                                rstd->data(), n.grad.data(), x->g().data(),
                                                gamma->g().data(), beta->g().data(), B, C, HW, groups);
                     });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
    Tensor<T> y(x->val.shape);
    kernels::silu_fwd(x->val.data(), y.data(), x->val.numel());
    return record<T>(std::move(y), {x}, [x](Node<T>& n) {
        kernels::silu_bwd(x->val.data(), n.grad.data(), x->g().data(), n.grad.numel());
    });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (!a->val.same_shape(b->val))
        throw ShapeError("add: shape mismatch " + shape_str(a->val.shape) + " vs " +
                         shape_str(b->val.shape));
    Tensor<T> y(a->val.shape);
    kernels::add(a->val.data(), b->val.data(), y.data(), y.numel());
    return record<T>(std::move(y), {a, b}, [a, b](Node<T>& n) {
        if (a->requires_grad) kernels::axpy(T(1), n.grad.data(), a->g().data(), n.grad.numel());
        if (b->requires_grad) kernels::axpy(T(1), n.grad.data(), b->g().data(), n.grad.numel());
    });
}

// x: (B, C, H, W) plus a per-(batch, channel) bias t: (B, C).
template <typename T>
Var<T> add_chvec(const Var<T>& x, const Var<T>& t) {
    check_rank4(x->val, "add_chvec input");
    int B = x->val.dim(0), C = x->val.dim(1);
    std::int64_t HW = std::int64_t(x->val.dim(2)) * x->val.dim(3);
    check_shape(t->val, {B, C}, "add_chvec bias");
    Tensor<T> y(x->val.shape);
    kernels::add_chvec_fwd(x->val.data(), t->val.data(), y.data(), B, C, HW);
    return record<T>(std::move(y), {x, t}, [x, t, B, C, HW](Node<T>& n) {
        kernels::add_chvec_bwd(n.grad.data(), x->requires_grad ? x->g().data() : nullptr,
                               t->requires_grad ? t->g().data() : nullptr, B, C, HW);
    });
}

// x: (B, C, H, W) scaled pointwise by a single-channel map m: (B, 1, H, W).
template <typename T>
Var<T> mul_mask(const Var<T>& x, const Var<T>& m) {
    check_rank4(x->val, "mul_mask input");
    int B = x->val.dim(0), C = x->val.dim(1);
    std::int64_t HW = std::int64_t(x->val.dim(2)) * x->val.dim(3);
    check_shape(m->val, {B, 1, x->val.dim(2), x->val.dim(3)}, "mul_mask mask");
    Tensor<T> y(x->val.shape);
    kernels::mul_mask_fwd(x->val.data(), m->val.data(), y.data(), B, C, HW);
    return record<T>(std::move(y), {x, m}, [x, m, B, C, HW](Node<T>& n) {
        kernels::mul_mask_bwd(x->val.data(), m->val.data(), n.grad.data(),
                              x->requires_grad ? x->g().data() : nullptr,
                              m->requires_grad ? m->g().data() : nullptr, B, C, HW);
    });
}

// Softmax across the channel axis of (B, K, H, W); output rows sum to 1 at
// every pixel.
template <typename T>
Var<T> softmax_channels(const Var<T>& x) {
    check_rank4(x->val, "softmax_channels input");
    int B = x->val.dim(0), K = x->val.dim(1);
    std::int64_t HW = std::int64_t(x->val.dim(2)) * x->val.dim(3);
    Tensor<T> y(x->val.shape);
    for (int b = 0; b < B; b++)
        kernels::softmax_rows_fwd(x->val.data() + b * K * HW, y.data() + b * K * HW, HW, K, 1, HW);
    auto yv = std::make_shared<Tensor<T>>(y);  // saved output for backward
    return record<T>(std::move(y), {x}, [x, yv, B, K, HW](Node<T>& n) {
        for (int b = 0; b < B; b++)
            kernels::softmax_rows_bwd(yv->data() + b * K * HW, n.grad.data() + b * K * HW,
                                      x->g().data() + b * K * HW, HW, K, 1, HW);
    });
}

template <typename T>
Var<T> avgpool(const Var<T>& x, int f) {
    check_rank4(x->val, "avgpool input");
    int B = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    if (H % f != 0 || W % f != 0)
        throw ShapeError(strformat("avgpool: %dx%d not divisible by factor %d", H, W, f));
    Tensor<T> y({B, C, H / f, W / f});
    kernels::avgpool_fwd(x->val.data(), y.data(), B, C, H, W, f);
    return record<T>(std::move(y), {x}, [x, B, C, H, W, f](Node<T>& n) {
        kernels::avgpool_bwd(n.grad.data(), x->g().data(), B, C, H, W, f);
    });
}

template <typename T>
Var<T> upsample2(const Var<T>& x) {
    check_rank4(x->val, "upsample2 input");
    int B = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    Tensor<T> y({B, C, 2 * H, 2 * W});
    kernels::upsample_nn2_fwd(x->val.data(), y.data(), B, C, H, W);
    return record<T>(std::move(y), {x}, [x, B, C, H, W](Node<T>& n) {
        kernels::upsample_nn2_bwd(n.grad.data(), x->g().data(), B, C, H, W);
    });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    check_rank4(a->val, "concat_channels lhs");
    check_rank4(b->val, "concat_channels rhs");
    int B = a->val.dim(0), Ca = a->val.dim(1), Cb = b->val.dim(1);
    int H = a->val.dim(2), W = a->val.dim(3);
    check_shape(b->val, {B, Cb, H, W}, "concat_channels rhs");
    std::int64_t HW = std::int64_t(H) * W;
    Tensor<T> y({B, Ca + Cb, H, W});
    for (int i = 0; i < B; i++) {
        std::copy(a->val.data() + std::int64_t(i) * Ca * HW, a->val.data() + std::int64_t(i + 1) * Ca * HW,
                  y.data() + std::int64_t(i) * (Ca + Cb) * HW);
        std::copy(b->val.data() + std::int64_t(i) * Cb * HW, b->val.data() + std::int64_t(i + 1) * Cb * HW,
                  y.data() + std::int64_t(i) * (Ca + Cb) * HW + std::int64_t(Ca) * HW);
    }
    return record<T>(std::move(y), {a, b}, [a, b, B, Ca, Cb, HW](Node<T>& n) {
        for (int i = 0; i < B; i++) {
            const T* g = n.grad.data() + std::int64_t(i) * (Ca + Cb) * HW;
            if (a->requires_grad)
                kernels::axpy(T(1), g, a->g().data() + std::int64_t(i) * Ca * HW, Ca * HW);
            if (b->requires_grad)
                kernels::axpy(T(1), g + Ca * HW, b->g().data() + std::int64_t(i) * Cb * HW, Cb * HW);
        }
    });
}

// Channels [c0, c1) of x as a new tensor.
template <typename T>
Var<T> slice_channels(const Var<T>& x, int c0, int c1) {
    check_rank4(x->val, "slice_channels input");
    int B = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    if (c0 < 0 || c1 > C || c0 >= c1)
        throw ShapeError(strformat("slice_channels: bad range [%d,%d) for %d channels", c0, c1, C));
    std::int64_t HW = std::int64_t(H) * W;
    int Cs = c1 - c0;
    Tensor<T> y({B, Cs, H, W});
    for (int i = 0; i < B; i++)
        std::copy(x->val.data() + (std::int64_t(i) * C + c0) * HW,
                  x->val.data() + (std::int64_t(i) * C + c1) * HW,
                  y.data() + std::int64_t(i) * Cs * HW);
    return record<T>(std::move(y), {x}, [x, B, C, c0, Cs, HW](Node<T>& n) {
        for (int i = 0; i < B; i++)
            kernels::axpy(T(1), n.grad.data() + std::int64_t(i) * Cs * HW,
                          x->g().data() + (std::int64_t(i) * C + c0) * HW, Cs * HW);
    });
}

// Pairwise dot-product scores between pixel features: q, k are (B, C, H, W);
// output (B, HW, HW) with s[b,i,j] = scale * sum_c q[b,c,i] k[b,c,j].
template <typename T>
Var<T> attn_scores(const Var<T>& q, const Var<T>& k, T sc) {
    check_rank4(q->val, "attn_scores q");
    if (!q->val.same_shape(k->val))
        throw ShapeError("attn_scores: q shape " + shape_str(q->val.shape) + " vs k shape " +
                         shape_str(k->val.shape));
    int B = q->val.dim(0), C = q->val.dim(1);
    int HW = q->val.dim(2) * q->val.dim(3);
    Tensor<T> s({B, HW, HW});
    for (int b = 0; b < B; b++)
        kernels::gemm<T>(true, false, HW, HW, C, sc, q->val.data() + std::int64_t(b) * C * HW, HW,
                         k->val.data() + std::int64_t(b) * C * HW, HW, T(0),
                         s.data() + std::int64_t(b) * HW * HW, HW);
    return record<T>(std::move(s), {q, k}, [q, k, B, C, HW, sc](Node<T>& n) {
        for (int b = 0; b < B; b++) {
            const T* gs = n.grad.data() + std::int64_t(b) * HW * HW;
            if (q->requires_grad)
                kernels::gemm<T>(false, true, C, HW, HW, sc, k->val.data() + std::int64_t(b) * C * HW,
                                 HW, gs, HW, T(1), q->g().data() + std::int64_t(b) * C * HW, HW);
            if (k->requires_grad)
                kernels::gemm<T>(false, false, C, HW, HW, sc, q->val.data() + std::int64_t(b) * C * HW,
                                 HW, gs, HW, T(1), k->g().data() + std::int64_t(b) * C * HW, HW);
        }
    });
}

// Softmax over the last axis of (B, M, N).
template <typename T>
Var<T> softmax_lastdim(const Var<T>& x) {
    if (x->val.rank() != 3)
        throw ShapeError("softmax_lastdim: expected rank-3 tensor, got " + shape_str(x->val.shape));
    std::int64_t rows = std::int64_t(x->val.dim(0)) * x->val.dim(1);
    int N = x->val.dim(2);
    Tensor<T> y(x->val.shape);
    kernels::softmax_rows_fwd(x->val.data(), y.data(), rows, N, N, 1);
    auto yv = std::make_shared<Tensor<T>>(y);
    return record<T>(std::move(y), {x}, [x, yv, rows, N](Node<T>& n) {
        kernels::softmax_rows_bwd(yv->data(), n.grad.data(), x->g().data(), rows, N, N, 1);
    });
}

// Attention-weighted aggregation: v is (B, C, H, W), a is (B, HW, HW);
// y[b,c,i] = sum_j a[b,i,j] v[b,c,j], reshaped back to (B, C, H, W).
template <typename T>
Var<T> attn_apply(const Var<T>& v, const Var<T>& a) {
    check_rank4(v->val, "attn_apply v");
    int B = v->val.dim(0), C = v->val.dim(1);
    int HW = v->val.dim(2) * v->val.dim(3);
    check_shape(a->val, {B, HW, HW}, "attn_apply weights");
    Tensor<T> y(v->val.shape);
    for (int b = 0; b < B; b++)
        kernels::gemm<T>(false, true, C, HW, HW, T(1), v->val.data() + std::int64_t(b) * C * HW, HW,
                         a->val.data() + std::int64_t(b) * HW * HW, HW, T(0),
                         y.data() + std::int64_t(b) * C * HW, HW);
    return record<T>(std::move(y), {v, a}, [v, a, B, C, HW](Node<T>& n) {
        for (int b = 0; b < B; b++) {
            const T* gy = n.grad.data() + std::int64_t(b) * C * HW;
            if (v->requires_grad)
                kernels::gemm<T>(false, false, C, HW, HW, T(1), gy, HW,
                                 a->val.data() + std::int64_t(b) * HW * HW, HW, T(1),
                                 v->g().data() + std::int64_t(b) * C * HW, HW);
            if (a->requires_grad)
                kernels::gemm<T>(true, false, HW, HW, C, T(1), gy, HW,
                                 v->val.data() + std::int64_t(b) * C * HW, HW, T(1),
                                 a->g().data() + std::int64_t(b) * HW * HW, HW);
        }
    });
}

// Mean squared error against a fixed target; scalar output.
template <typename T>
Var<T> mse(const Var<T>& pred, const Tensor<T>& target) {
    if (!pred->val.same_shape(target))
        throw ShapeError("mse: prediction shape " + shape_str(pred->val.shape) +
                         " vs target shape " + shape_str(target.shape));
    std::int64_t n = pred->val.numel();
    double acc = 0;
    const T* p = pred->val.data();
    const T* t = target.data();
    for (std::int64_t i = 0; i < n; i++) {
        double d = double(p[i]) - double(t[i]);
        acc += d * d;
    }
    Tensor<T> y({1});
    y.v[0] = T(acc / double(n));
    auto tgt = std::make_shared<Tensor<T>>(target);
    return record<T>(std::move(y), {pred}, [pred, tgt, n](Node<T>& nd) {
        T s = nd.grad.v[0] * T(2) / T(n);
        const T* p = pred->val.data();
        const T* t = tgt->data();
        T* g = pred->g().data();
#pragma omp parallel for simd schedule(static)
        for (std::int64_t i = 0; i < n; i++) g[i] += s * (p[i] - t[i]);
    });
}

// Pixelwise softmax cross-entropy of (B, K, H, W) logits against integer
// labels (row-major B*H*W, values in [0, K)); mean over all pixels.
template <typename T>
Var<T> softmax_xent(const Var<T>& logits, std::shared_ptr<std::vector<int>> labels) {
    check_rank4(logits->val, "softmax_xent logits");
    int B = logits->val.dim(0), K = logits->val.dim(1);
    std::int64_t HW = std::int64_t(logits->val.dim(2)) * logits->val.dim(3);
    if (std::int64_t(labels->size()) != std::int64_t(B) * HW)
        throw ShapeError(strformat("softmax_xent: %zu labels for %lld pixels", labels->size(),
                                   (long long)(std::int64_t(B) * HW)));
    auto prob = std::make_shared<Tensor<T>>(logits->val.shape);
    for (int b = 0; b < B; b++)
        kernels::softmax_rows_fwd(logits->val.data() + b * K * HW, prob->data() + b * K * HW, HW, K, 1,
                                  HW);
    double acc = 0;
    for (int b = 0; b < B; b++)
        for (std::int64_t i = 0; i < HW; i++) {
            int lab = (*labels)[std::size_t(b * HW + i)];
            if (lab < 0 || lab >= K)
                throw ContractError(strformat("softmax_xent: label %d out of range [0, %d)", lab, K));
            double p = double(prob->v[std::size_t(b * K * HW + std::int64_t(lab) * HW + i)]);
            acc -= std::log(std::max(p, 1e-30));
        }
    Tensor<T> y({1});
    y.v[0] = T(acc / double(std::int64_t(B) * HW));
    return record<T>(std::move(y), {logits}, [logits, labels, prob, B, K, HW](Node<T>& n) {
        T s = n.grad.v[0] / T(double(std::int64_t(B) * HW));
        T* g = logits->g().data();
        for (int b = 0; b < B; b++)
            for (std::int64_t i = 0; i < HW; i++) {
                int lab = (*labels)[std::size_t(b * HW + i)];
                for (int k = 0; k < K; k++) {
                    std::int64_t idx = b * K * HW + std::int64_t(k) * HW + i;
                    T p = prob->v[std::size_t(idx)];
                    g[idx] += s * (p - (k == lab ? T(1) : T(0)));
                }
            }
    });
}

}  // namespace fdm::graph
