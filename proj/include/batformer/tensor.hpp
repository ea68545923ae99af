#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "batformer/flops.hpp"
#include "batformer/parallel.hpp"

namespace bat {

using Shape = std::vector<int>;

class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline long numel(const Shape& s) {
    long n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;      // empty until a backward pass touches it
    bool requires_grad = false;
    uint64_t tape_epoch = 0;  // id of the tape that produced this value, if any
};

template <typename T>
std::vector<T>& ensure_grad(TensorImpl<T>& impl) {
    if (impl.grad.empty()) impl.grad.assign(impl.data.size(), T(0));
    return impl.grad;
}

template <typename T>
class Tape;

// Dense row-major tensor with value-handle semantics; copies share storage.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->shape = std::move(shape);
        t.impl_->data.assign(numel(t.impl_->shape), T(0));
        return t;
    }

    static Tensor full(Shape shape, T value) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.impl_->data) v = value;
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<T> data) {
        require((long)data.size() == numel(shape), "tensor data size does not match shape " + bat::to_string(shape));
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(data);
        return t;
    }

    static Tensor scalar(T value) { return from_data({1}, {value}); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return (int)impl_->shape.size(); }
    int dim(int i) const { return impl_->shape[i]; }
    long size() const { return (long)impl_->data.size(); }

    T* data() { return impl_->data.data(); }
    const T* data() const { return impl_->data.data(); }
    std::vector<T>& values() { return impl_->data; }
    const std::vector<T>& values() const { return impl_->data; }

    T& at(std::initializer_list<int> idx) { return impl_->data[offset(idx)]; }
    T at(std::initializer_list<int> idx) const { return impl_->data[offset(idx)]; }

    T item() const {
        require(size() == 1, "item() requires a single-element tensor, got " + bat::to_string(shape()));
        return impl_->data[0];
    }

    Tensor& set_requires_grad(bool v = true) {
        impl_->requires_grad = v;
        return *this;
    }
    bool requires_grad() const { return impl_->requires_grad; }

    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    const std::vector<T>& grad() const {
        require(has_grad(), "tensor has no gradient");
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.clear(); }

    // Copy that drops all graph connectivity.
    Tensor detach() const {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        return t;
    }

    Tensor clone() const { return detach(); }

    bool needs_grad() const {
        return impl_ && (impl_->requires_grad || (impl_->tape_epoch != 0 && impl_->tape_epoch == Tape<T>::active_id()));
    }

    std::shared_ptr<TensorImpl<T>>& impl() { return impl_; }
    const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

    bool all_finite() const {
        for (T v : impl_->data)
            if (!std::isfinite((double)v)) return false;
        return true;
    }

private:
    long offset(std::initializer_list<int> idx) const {
        require((int)idx.size() == rank(), "index rank mismatch");
        long off = 0;
        int i = 0;
        for (int v : idx) {
            off = off * impl_->shape[i] + v;
            ++i;
        }
        return off;
    }

    std::shared_ptr<TensorImpl<T>> impl_;
};

// Records backward closures for one forward pass; strictly sequential replay
// in reverse order. Exactly one tape per scalar type may be active at a time.
template <typename T>
class Tape {
public:
    Tape() {
        require(active_ref() == nullptr, "a tape is already active");
        id_ = ++epoch_counter();
        active_ref() = this;
    }
    ~Tape() { active_ref() = nullptr; }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_ref(); }
    static uint64_t active_id() { return active_ref() ? active_ref()->id_ : 0; }

    uint64_t id() const { return id_; }

    void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

    size_t node_count() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays every node once, newest first.
    void backward(const Tensor<T>& loss) {
        require(loss.size() == 1, "backward() requires a scalar loss, got " + bat::to_string(loss.shape()));
        require(loss.impl()->tape_epoch == id_ || loss.requires_grad(),
                "loss is not connected to the active tape");
        ensure_grad(*loss.impl())[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        nodes_.clear();
    }

private:
    static Tape*& active_ref() {
        static thread_local Tape* t = nullptr;
        return t;
    }
    static uint64_t& epoch_counter() {
        static uint64_t c = 0;
        return c;
    }

    std::vector<std::function<void()>> nodes_;
    uint64_t id_ = 0;
};

template <typename T>
void backward(const Tensor<T>& loss) {
    require(Tape<T>::active() != nullptr, "backward() requires an active tape");
    Tape<T>::active()->backward(loss);
}

namespace detail {

// ---- GEMM kernels -------------------------------------------------------
//
// Row-major with explicit leading dimensions. Work is split into fixed-size
// blocks (independent of thread count); each output element is accumulated
// by one worker in ascending-t order, so results are bit-identical for any
// number of threads.

constexpr long kGemmRowBlock = 8;
constexpr long kGemmColBlock = 2048;

template <typename T>
void gemm_nn_range(const T* __restrict a, long lda, const T* __restrict b, long ldb, T* __restrict c,
                   long ldc, long rlo, long rhi, long k, long clo, long chi, bool acc) {
    const long width = chi - clo;
    for (long i = rlo; i < rhi; ++i) {
        T* __restrict ci = c + i * ldc + clo;
        if (!acc)
            for (long j = 0; j < width; ++j) ci[j] = T(0);
        const T* __restrict ai = a + i * lda;
        for (long t = 0; t < k; ++t) {
            const T at = ai[t];
            const T* __restrict bt = b + t * ldb + clo;
            for (long j = 0; j < width; ++j) ci[j] += at * bt[j];
        }
    }
}

// c (m x n) = a (m x k) * b (k x n)
template <typename T>
void gemm_nn(const T* a, long lda, const T* b, long ldb, T* c, long ldc, long m, long k, long n,
             bool acc = false) {
    if (m >= 2 * kGemmRowBlock && num_threads() > 1) {
        int nb = block_count(m, kGemmRowBlock);
        parallel_blocks(nb, [&](int blk) {
            auto [lo, hi] = block_bounds(m, kGemmRowBlock, blk);
            gemm_nn_range(a, lda, b, ldb, c, ldc, lo, hi, k, 0, n, acc);
        });
    } else if (n >= 2 * kGemmColBlock && num_threads() > 1) {
        int nb = block_count(n, kGemmColBlock);
        parallel_blocks(nb, [&](int blk) {
            auto [lo, hi] = block_bounds(n, kGemmColBlock, blk);
            gemm_nn_range(a, lda, b, ldb, c, ldc, 0, m, k, lo, hi, acc);
        });
    } else {
        gemm_nn_range(a, lda, b, ldb, c, ldc, 0, m, k, 0, n, acc);
    }
}

template <typename T>
void gemm_nt_range(const T* __restrict a, long lda, const T* __restrict b, long ldb, T* __restrict c,
                   long ldc, long rlo, long rhi, long k, long n, bool acc) {
    for (long i = rlo; i < rhi; ++i) {
        const T* __restrict ai = a + i * lda;
        T* __restrict ci = c + i * ldc;
        for (long j = 0; j < n; ++j) {
            const T* __restrict bj = b + j * ldb;
            T s = T(0);
            for (long t = 0; t < k; ++t) s += ai[t] * bj[t];
            ci[j] = acc ? ci[j] + s : s;
        }
    }
}

// c (m x n) = a (m x k) * b(n x k)^T
template <typename T>
void gemm_nt(const T* a, long lda, const T* b, long ldb, T* c, long ldc, long m, long k, long n,
             bool acc = false) {
    if (m >= 2 * kGemmRowBlock && num_threads() > 1) {
        int nb = block_count(m, kGemmRowBlock);
        parallel_blocks(nb, [&](int blk) {
            auto [lo, hi] = block_bounds(m, kGemmRowBlock, blk);
            gemm_nt_range(a, lda, b, ldb, c, ldc, lo, hi, k, n, acc);
        });
    } else {
        gemm_nt_range(a, lda, b, ldb, c, ldc, 0, m, k, n, acc);
    }
}

template <typename T>
void gemm_tn_range(const T* __restrict a, long lda, const T* __restrict b, long ldb, T* __restrict c,
                   long ldc, long rlo, long rhi, long k, long n, bool acc) {
    for (long i = rlo; i < rhi; ++i) {
        T* __restrict ci = c + i * ldc;
        if (!acc)
            for (long j = 0; j < n; ++j) ci[j] = T(0);
        for (long t = 0; t < k; ++t) {
            const T at = a[t * lda + i];
            const T* __restrict bt = b + t * ldb;
            for (long j = 0; j < n; ++j) ci[j] += at * bt[j];
        }
    }
}

// c (m x n) = a (k x m)^T * b (k x n)
template <typename T>
void gemm_tn(const T* a, long lda, const T* b, long ldb, T* c, long ldc, long m, long k, long n,
             bool acc = false) {
    if (m >= 2 * kGemmRowBlock && num_threads() > 1) {
        int nb = block_count(m, kGemmRowBlock);
        parallel_blocks(nb, [&](int blk) {
            auto [lo, hi] = block_bounds(m, kGemmRowBlock, blk);
            gemm_tn_range(a, lda, b, ldb, c, ldc, lo, hi, k, n, acc);
        });
    } else {
        gemm_tn_range(a, lda, b, ldb, c, ldc, 0, m, k, n, acc);
    }
}

inline void count_macs(const char* kind, uint64_t macs) {
    if (auto* c = cost_hook()) c->add_macs(kind, macs);
}
inline void count_ops(const char* kind, uint64_t ops) {
    if (auto* c = cost_hook()) c->add_ops(kind, ops);
}

}  // namespace detail

// ---- elementwise and structural ops -------------------------------------

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_pointwise(const Tensor<T>& x, Fwd fwd, Bwd bwd_factor, const char* kind) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* xs = x.data();
    T* os = out.data();
    const long n = x.size();
    for (long i = 0; i < n; ++i) os[i] = fwd(xs[i]);
    detail::count_ops(kind, n);
    auto* tape = Tape<T>::active();
    if (tape && x.needs_grad()) {
        out.impl()->tape_epoch = tape->id();
        tape->record([xi = x.impl(), oi = out.impl(), bwd_factor]() {
            if (oi->grad.empty()) return;
            auto& gx = ensure_grad(*xi);
            const long n = (long)gx.size();
            for (long i = 0; i < n; ++i) gx[i] += oi->grad[i] * bwd_factor(xi->data[i], oi->data[i]);
        });
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return unary_pointwise(
        x, [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); }, "relu");
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
    return unary_pointwise(
        x, [](T v) { return v < T(0) ? -v : v; },
        [](T v, T) { return v < T(0) ? T(-1) : T(1); }, "abs");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    return unary_pointwise(
        x, [c](T v) { return v * c; }, [c](T, T) { return c; }, "scale");
}

template <typename T>
Tensor<T> add_const(const Tensor<T>& x, T c) {
    return unary_pointwise(
        x, [c](T v) { return v + c; }, [](T, T) { return T(1); }, "add_const");
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.shape() == b.shape(),
            "add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const long n = a.size();
    const T* as = a.data();
    const T* bs = b.data();
    T* os = out.data();
    for (long i = 0; i < n; ++i) os[i] = as[i] + bs[i];
    detail::count_ops("add", n);
    auto* tape = Tape<T>::active();
    if (tape && (a.needs_grad() || b.needs_grad())) {
        out.impl()->tape_epoch = tape->id();
        bool na = a.needs_grad(), nb = b.needs_grad();
        tape->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), na, nb]() {
            if (oi->grad.empty()) return;
            const long n = (long)oi->grad.size();
            if (na) {
                auto& g = ensure_grad(*ai);
                for (long i = 0; i < n; ++i) g[i] += oi->grad[i];
            }
            if (nb) {
                auto& g = ensure_grad(*bi);
                for (long i = 0; i < n; ++i) g[i] += oi->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.shape() == b.shape(),
            "sub: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const long n = a.size();
    for (long i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    detail::count_ops("sub", n);
    auto* tape = Tape<T>::active();
    if (tape && (a.needs_grad() || b.needs_grad())) {
        out.impl()->tape_epoch = tape->id();
        bool na = a.needs_grad(), nb = b.needs_grad();
        tape->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), na, nb]() {
            if (oi->grad.empty()) return;
            const long n = (long)oi->grad.size();
            if (na) {
                auto& g = ensure_grad(*ai);
                for (long i = 0; i < n; ++i) g[i] += oi->grad[i];
            }
            if (nb) {
                auto& g = ensure_grad(*bi);
                for (long i = 0; i < n; ++i) g[i] -= oi->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.shape() == b.shape(),
            "mul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const long n = a.size();
    for (long i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    detail::count_ops("mul", n);
    auto* tape = Tape<T>::active();
    if (tape && (a.needs_grad() || b.needs_grad())) {
        out.impl()->tape_epoch = tape->id();
        bool na = a.needs_grad(), nb = b.needs_grad();
        tape->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), na, nb]() {
            if (oi->grad.empty()) return;
            const long n = (long)oi->grad.size();
            if (na) {
                auto& g = ensure_grad(*ai);
                for (long i = 0; i < n; ++i) g[i] += oi->grad[i] * bi->data[i];
            }
            if (nb) {
                auto& g = ensure_grad(*bi);
                for (long i = 0; i < n; ++i) g[i] += oi->grad[i] * ai->data[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.shape() == b.shape(),
            "div: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const long n = a.size();
    for (long i = 0; i < n; ++i) out.data()[i] = a.data()[i] / b.data()[i];
    detail::count_ops("div", n);
    auto* tape = Tape<T>::active();
    if (tape && (a.needs_grad() || b.needs_grad())) {
        out.impl()->tape_epoch = tape->id();
        bool na = a.needs_grad(), nb = b.needs_grad();
        tape->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), na, nb]() {
            if (oi->grad.empty()) return;
            const long n = (long)oi->grad.size();
            if (na) {
                auto& g = ensure_grad(*ai);
                for (long i = 0; i < n; ++i) g[i] += oi->grad[i] / bi->data[i];
            }
            if (nb) {
                auto& g = ensure_grad(*bi);
                for (long i = 0; i < n; ++i)
                    g[i] -= oi->grad[i] * ai->data[i] / (bi->data[i] * bi->data[i]);
            }
        });
    }
    return out;
}

// Sums every element; accumulation runs in index order with a double-width
// accumulator for accuracy, giving deterministic results.
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    double acc = 0;
    const T* xs = x.data();
    const long n = x.size();
    for (long i = 0; i < n; ++i) acc += (double)xs[i];
    detail::count_ops("sum", n);
    Tensor<T> out = Tensor<T>::scalar((T)acc);
    auto* tape = Tape<T>::active();
    if (tape && x.needs_grad()) {
        out.impl()->tape_epoch = tape->id();
        tape->record([xi = x.impl(), oi = out.impl()]() {
            if (oi->grad.empty()) return;
            const T g = oi->grad[0];
            auto& gx = ensure_grad(*xi);
            for (auto& v : gx) v += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / T(x.size()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    require(numel(shape) == x.size(), "reshape: element count mismatch " + to_string(x.shape()) +
                                          " -> " + to_string(shape));
    Tensor<T> out = Tensor<T>::from_data(std::move(shape), x.values());
    auto* tape = Tape<T>::active();
    if (tape && x.needs_grad()) {
        out.impl()->tape_epoch = tape->id();
        tape->record([xi = x.impl(), oi = out.impl()]() {
            if (oi->grad.empty()) return;
            auto& gx = ensure_grad(*xi);
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    require(x.rank() == 2, "transpose: expected rank-2 tensor, got " + to_string(x.shape()));
    const int m = x.dim(0), n = x.dim(1);
    Tensor<T> out = Tensor<T>::zeros({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.data()[(long)j * m + i] = x.data()[(long)i * n + j];
    auto* tape = Tape<T>::active();
    if (tape && x.needs_grad()) {
        out.impl()->tape_epoch = tape->id();
        tape->record([xi = x.impl(), oi = out.impl(), m, n]() {
            if (oi->grad.empty()) return;
            auto& gx = ensure_grad(*xi);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) gx[(long)i * n + j] += oi->grad[(long)j * m + i];
        });
    }
    return out;
}

// Concatenates along `axis`; all other dimensions must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    require(!parts.empty(), "concat: empty input list");
    const int rank = parts[0].rank();
    require(axis >= 0 && axis < rank, "concat: axis out of range");
    Shape out_shape = parts[0].shape();
    long axis_total = 0;
    for (const auto& p : parts) {
        require(p.rank() == rank, "concat: rank mismatch");
        for (int i = 0; i < rank; ++i)
            if (i != axis)
                require(p.dim(i) == out_shape[i], "concat: shape mismatch " + to_string(p.shape()));
        axis_total += p.dim(axis);
    }
    out_shape[axis] = (int)axis_total;

    long outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out_shape[i];
    for (int i = axis + 1; i < rank; ++i) inner *= out_shape[i];

    Tensor<T> out = Tensor<T>::zeros(out_shape);
    long offset = 0;
    for (const auto& p : parts) {
        const long span = (long)p.dim(axis) * inner;
        for (long o = 0; o < outer; ++o) {
            const T* src = p.data() + o * span;
            T* dst = out.data() + o * axis_total * inner + offset;
            for (long i = 0; i < span; ++i) dst[i] = src[i];
        }
        offset += span;
    }

    auto* tape = Tape<T>::active();
    bool any = false;
    for (const auto& p : parts) any = any || p.needs_grad();
    if (tape && any) {
        out.impl()->tape_epoch = tape->id();
        std::vector<std::shared_ptr<TensorImpl<T>>> impls;
        std::vector<bool> needs;
        std::vector<long> spans;
        for (const auto& p : parts) {
            impls.push_back(p.impl());
            needs.push_back(p.needs_grad());
            spans.push_back((long)p.dim(axis) * inner);
        }
        tape->record([impls, needs, spans, oi = out.impl(), outer, inner, axis_total]() {
            if (oi->grad.empty()) return;
            long offset = 0;
            for (size_t k = 0; k < impls.size(); ++k) {
                if (needs[k]) {
                    auto& g = ensure_grad(*impls[k]);
                    for (long o = 0; o < outer; ++o) {
                        const T* src = oi->grad.data() + o * axis_total * inner + offset;
                        T* dst = g.data() + o * spans[k];
                        for (long i = 0; i < spans[k]; ++i) dst[i] += src[i];
                    }
                }
                offset += spans[k];
            }
        });
    }
    return out;
}

// Contiguous sub-range along one axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int start, int len) {
    const int rank = x.rank();
    require(axis >= 0 && axis < rank, "slice: axis out of range");
    require(start >= 0 && len >= 1 && start + len <= x.dim(axis),
            "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                ") exceeds axis size " + std::to_string(x.dim(axis)));
    Shape out_shape = x.shape();
    out_shape[axis] = len;
    long outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < rank; ++i) inner *= x.dim(i);
    const long in_span = (long)x.dim(axis) * inner;
    const long out_span = (long)len * inner;

    Tensor<T> out = Tensor<T>::zeros(out_shape);
    for (long o = 0; o < outer; ++o) {
        const T* src = x.data() + o * in_span + (long)start * inner;
        T* dst = out.data() + o * out_span;
        for (long i = 0; i < out_span; ++i) dst[i] = src[i];
    }
    auto* tape = Tape<T>::active();
    if (tape && x.needs_grad()) {
        out.impl()->tape_epoch = tape->id();
        tape->record([xi = x.impl(), oi = out.impl(), outer, inner, in_span, out_span, start]() {
            if (oi->grad.empty()) return;
            auto& gx = ensure_grad(*xi);
            for (long o = 0; o < outer; ++o) {
                const T* src = oi->grad.data() + o * out_span;
                T* dst = gx.data() + o * in_span + (long)start * inner;
                for (long i = 0; i < out_span; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

// (C,h,w) -> (h*w, C) row-major spatial flattening.
template <typename T>
Tensor<T> spatial_to_tokens(const Tensor<T>& x) {
    require(x.rank() == 3, "spatial_to_tokens: expected (C,H,W), got " + to_string(x.shape()));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const long hw = (long)h * w;
    Tensor<T> out = Tensor<T>::zeros({(int)hw, c});
    for (int ci = 0; ci < c; ++ci) {
        const T* src = x.data() + (long)ci * hw;
        for (long p = 0; p < hw; ++p) out.data()[p * c + ci] = src[p];
    }
    auto* tape = Tape<T>::active();
    if (tape && x.needs_grad()) {
        out.impl()->tape_epoch = tape->id();
        tape->record([xi = x.impl(), oi = out.impl(), c, hw]() {
            if (oi->grad.empty()) return;
            auto& gx = ensure_grad(*xi);
            for (int ci = 0; ci < c; ++ci)
                for (long p = 0; p < hw; ++p) gx[(long)ci * hw + p] += oi->grad[p * c + ci];
        });
    }
    return out;
}

// (h*w, C) -> (C,h,w); inverse of spatial_to_tokens.
template <typename T>
Tensor<T> tokens_to_spatial(const Tensor<T>& tokens, int h, int w) {
    require(tokens.rank() == 2, "tokens_to_spatial: expected rank-2 tokens");
    const long hw = (long)h * w;
    require(tokens.dim(0) == hw, "tokens_to_spatial: token count " + std::to_string(tokens.dim(0)) +
                                     " != " + std::to_string(hw));
    const int c = tokens.dim(1);
    Tensor<T> out = Tensor<T>::zeros({c, h, w});
    for (int ci = 0; ci < c; ++ci)
        for (long p = 0; p < hw; ++p) out.data()[(long)ci * hw + p] = tokens.data()[p * c + ci];
    auto* tape = Tape<T>::active();
    if (tape && tokens.needs_grad()) {
        out.impl()->tape_epoch = tape->id();
        tape->record([ti = tokens.impl(), oi = out.impl(), c, hw]() {
            if (oi->grad.empty()) return;
            auto& gt = ensure_grad(*ti);
            for (int ci = 0; ci < c; ++ci)
                for (long p = 0; p < hw; ++p) gt[p * c + ci] += oi->grad[(long)ci * hw + p];
        });
    }
    return out;
}

// x (n x d) + row vector v (d), broadcast over rows.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
    require(x.rank() == 2 && v.rank() == 1 && v.dim(0) == x.dim(1),
            "add_rowvec: shapes " + to_string(x.shape()) + " and " + to_string(v.shape()));
    const long n = x.dim(0), d = x.dim(1);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (long i = 0; i < n; ++i)
        for (long j = 0; j < d; ++j) out.data()[i * d + j] = x.data()[i * d + j] + v.data()[j];
    detail::count_ops("add", n * d);
    auto* tape = Tape<T>::active();
    if (tape && (x.needs_grad() || v.needs_grad())) {
        out.impl()->tape_epoch = tape->id();
        bool nx = x.needs_grad(), nv = v.needs_grad();
        tape->record([xi = x.impl(), vi = v.impl(), oi = out.impl(), n, d, nx, nv]() {
            if (oi->grad.empty()) return;
            if (nx) {
                auto& g = ensure_grad(*xi);
                for (long i = 0; i < n * d; ++i) g[i] += oi->grad[i];
            }
            if (nv) {
                auto& g = ensure_grad(*vi);
                for (long i = 0; i < n; ++i)
                    for (long j = 0; j < d; ++j) g[j] += oi->grad[i * d + j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul: expected rank-2 operands");
    require(a.dim(1) == b.dim(0), "matmul: inner dimensions disagree " + to_string(a.shape()) +
                                      " vs " + to_string(b.shape()));
    const long m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out = Tensor<T>::zeros({(int)m, (int)n});
    detail::gemm_nn(a.data(), k, b.data(), n, out.data(), n, m, k, n);
    detail::count_macs("matmul", (uint64_t)m * k * n);
    auto* tape = Tape<T>::active();
    if (tape && (a.needs_grad() || b.needs_grad())) {
        out.impl()->tape_epoch = tape->id();
        bool na = a.needs_grad(), nb = b.needs_grad();
        tape->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), m, k, n, na, nb]() {
            if (oi->grad.empty()) return;
            const T* g = oi->grad.data();
            if (na) {  // dA += dC * B^T
                auto& ga = ensure_grad(*ai);
                detail::gemm_nt(g, n, bi->data.data(), n, ga.data(), k, m, n, k, true);
                detail::count_macs("matmul", (uint64_t)m * k * n);
            }
            if (nb) {  // dB += A^T * dC
                auto& gb = ensure_grad(*bi);
                detail::gemm_tn(ai->data.data(), k, g, n, gb.data(), n, k, m, n, true);
                detail::count_macs("matmul", (uint64_t)m * k * n);
            }
        });
    }
    return out;
}

// a (m x k) * b(n x k)^T without materializing the transpose.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul_nt: expected rank-2 operands");
    require(a.dim(1) == b.dim(1), "matmul_nt: widths disagree " + to_string(a.shape()) + " vs " +
                                      to_string(b.shape()));
    const long m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor<T> out = Tensor<T>::zeros({(int)m, (int)n});
    detail::gemm_nt(a.data(), k, b.data(), k, out.data(), n, m, k, n);
    detail::count_macs("matmul", (uint64_t)m * k * n);
    auto* tape = Tape<T>::active();
    if (tape && (a.needs_grad() || b.needs_grad())) {
        out.impl()->tape_epoch = tape->id();
        bool na = a.needs_grad(), nb = b.needs_grad();
        tape->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), m, k, n, na, nb]() {
            if (oi->grad.empty()) return;
            const T* g = oi->grad.data();
            if (na) {  // dA += dC * B
                auto& ga = ensure_grad(*ai);
                detail::gemm_nn(g, n, bi->data.data(), k, ga.data(), k, m, n, k, true);
                detail::count_macs("matmul", (uint64_t)m * k * n);
            }
            if (nb) {  // dB += dC^T * A
                auto& gb = ensure_grad(*bi);
                detail::gemm_tn(g, n, ai->data.data(), k, gb.data(), k, n, m, k, true);
                detail::count_macs("matmul", (uint64_t)m * k * n);
            }
        });
    }
    return out;
}

// Numerically stable softmax along `axis`; per the FLOP convention this
// counts 4 ops per element.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    require(axis >= 0 && axis < x.rank(), "softmax: axis out of range for " + to_string(x.shape()));
    const int len = x.dim(axis);
    require(len >= 1, "softmax: empty axis");
    long outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* xs = x.data();
    T* os = out.data();
    for (long o = 0; o < outer; ++o) {
        for (long in = 0; in < inner; ++in) {
            const long base = o * len * inner + in;
            T mx = xs[base];
            for (int i = 1; i < len; ++i) mx = std::max(mx, xs[base + (long)i * inner]);
            T denom = T(0);
            for (int i = 0; i < len; ++i) {
                const T e = std::exp(xs[base + (long)i * inner] - mx);
                os[base + (long)i * inner] = e;
                denom += e;
            }
            const T inv = T(1) / denom;
            for (int i = 0; i < len; ++i) os[base + (long)i * inner] *= inv;
        }
    }
    detail::count_ops("softmax", (uint64_t)4 * x.size());

    auto* tape = Tape<T>::active();
    if (tape && x.needs_grad()) {
        out.impl()->tape_epoch = tape->id();
        tape->record([xi = x.impl(), oi = out.impl(), outer, inner, len]() {
            if (oi->grad.empty()) return;
            auto& gx = ensure_grad(*xi);
            const T* y = oi->data.data();
            const T* gy = oi->grad.data();
            for (long o = 0; o < outer; ++o) {
                for (long in = 0; in < inner; ++in) {
                    const long base = o * len * inner + in;
                    T dot = T(0);
                    for (int i = 0; i < len; ++i) {
                        const long idx = base + (long)i * inner;
                        dot += gy[idx] * y[idx];
                    }
                    for (int i = 0; i < len; ++i) {
                        const long idx = base + (long)i * inner;
                        gx[idx] += y[idx] * (gy[idx] - dot);
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
void assert_finite(const Tensor<T>& t, const std::string& context) {
    if (!t.all_finite()) throw std::runtime_error("non-finite values in " + context);
}

}  // namespace bat
