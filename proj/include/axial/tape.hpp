#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "axial/parallel.hpp"
#include "axial/tensor.hpp"

namespace axial {

// Handle into a Tape's value arena.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Recording tape for reverse-mode differentiation. Values are immutable once
// committed; nodes are appended in execution order, which is by construction
// a topological order, and backward walks them in reverse. Gradient
// accumulation order is fixed (node order, then innermost index ascending)
// so two runs with identical inputs produce identical gradient bytes.
template <typename T>
class Tape {
public:
    // Finite checks are a verification-mode assertion; 32-bit contexts used
    // for training/bench default to unchecked.
    explicit Tape(bool check_finite = (sizeof(T) == 8))
        : check_finite_(check_finite) {}

    Var leaf(Tensor<T> value, bool requires_grad = false) {
        values_.push_back(std::move(value));
        requires_.push_back(requires_grad);
        grads_.emplace_back();
        return Var{int(values_.size()) - 1};
    }

    const Tensor<T>& val(Var v) const { return values_.at(v.id); }
    bool requires_grad(Var v) const { return requires_.at(v.id); }
    std::size_t size() const { return values_.size(); }

    bool has_grad(Var v) const {
        return v.id >= 0 && v.id < int(grads_.size()) &&
               grads_[v.id].numel() > 0;
    }

    const Tensor<T>& grad(Var v) const {
        if (!has_grad(v))
            throw GradientError(
                "no gradient for tensor " + std::to_string(v.id) +
                (requires_.at(v.id)
                     ? " (not reachable from the loss, or backward not run)"
                     : " (tensor is detached: requires_grad is false)"));
        return grads_[v.id];
    }

    // Zero-initialized on first touch; used by op backwards to accumulate.
    Tensor<T>& grad_buf(Var v) {
        if (grads_[v.id].numel() == 0) grads_[v.id] = Tensor<T>(val(v).shape());
        return grads_[v.id];
    }

    // Registers a custom node. `backward` may assume grad_buf(out) is
    // populated when called.
    Var make_node(Tensor<T> out, std::function<void(Tape&, Var)> backward,
                  bool out_requires_grad, const char* opname = "op") {
        if (check_finite_ && !out.all_finite())
            throw EvalError(std::string("non-finite value produced by ") +
                            opname);
        Var v = leaf(std::move(out), out_requires_grad);
        if (out_requires_grad)
            nodes_.push_back(Node{v, std::move(backward)});
        return v;
    }

    bool any_requires(std::initializer_list<Var> vs) const {
        for (Var v : vs)
            if (requires_.at(v.id)) return true;
        return false;
    }

    void backward(Var loss) {
        if (val(loss).numel() != 1)
            throw ContractError("backward requires a scalar loss; got shape " +
                                val(loss).shape().str());
        if (backward_done_)
            throw ContractError(
                "backward already run on this tape; reset before calling "
                "again");
        backward_done_ = true;
        grad_buf(loss).data()[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (!has_grad(it->out)) continue;  // not on the path to the loss
            it->fn(*this, it->out);
        }
    }

    void reset_grads() {
        for (auto& g : grads_) g = Tensor<T>();
        backward_done_ = false;
    }

    // ---- core ops ----

    Var add(Var a, Var b) {
        check_same_shape("add", a, b);
        const auto& av = val(a);
        const auto& bv = val(b);
        Tensor<T> out(av.shape());
        for (std::size_t i = 0; i < out.numel(); ++i)
            out.data()[i] = av.data()[i] + bv.data()[i];
        const bool req = any_requires({a, b});
        return make_node(
            std::move(out),
            [a, b](Tape& t, Var o) {
                const auto& g = t.grad(o);
                for (Var in : {a, b}) {
                    if (!t.requires_grad(in)) continue;
                    auto& gb = t.grad_buf(in);
                    for (std::size_t i = 0; i < g.numel(); ++i)
                        gb.data()[i] += g.data()[i];
                }
            },
            req, "add");
    }

    Var mul(Var a, Var b) {
        check_same_shape("mul", a, b);
        const auto& av = val(a);
        const auto& bv = val(b);
        Tensor<T> out(av.shape());
        for (std::size_t i = 0; i < out.numel(); ++i)
            out.data()[i] = av.data()[i] * bv.data()[i];
        const bool req = any_requires({a, b});
        return make_node(
            std::move(out),
            [a, b](Tape& t, Var o) {
                const auto& g = t.grad(o);
                if (t.requires_grad(a)) {
                    auto& ga = t.grad_buf(a);
                    const auto& bv = t.val(b);
                    for (std::size_t i = 0; i < g.numel(); ++i)
                        ga.data()[i] += g.data()[i] * bv.data()[i];
                }
                if (t.requires_grad(b)) {
                    auto& gb = t.grad_buf(b);
                    const auto& av = t.val(a);
                    for (std::size_t i = 0; i < g.numel(); ++i)
                        gb.data()[i] += g.data()[i] * av.data()[i];
                }
            },
            req, "mul");
    }

    Var scale(Var a, T s) {
        const auto& av = val(a);
        Tensor<T> out(av.shape());
        for (std::size_t i = 0; i < out.numel(); ++i)
            out.data()[i] = av.data()[i] * s;
        return make_node(
            std::move(out),
            [a, s](Tape& t, Var o) {
                const auto& g = t.grad(o);
                auto& ga = t.grad_buf(a);
                for (std::size_t i = 0; i < g.numel(); ++i)
                    ga.data()[i] += g.data()[i] * s;
            },
            requires_grad(a), "scale");
    }

    Var relu(Var a) {
        const auto& av = val(a);
        Tensor<T> out(av.shape());
        for (std::size_t i = 0; i < out.numel(); ++i)
            out.data()[i] = av.data()[i] > T(0) ? av.data()[i] : T(0);
        return make_node(
            std::move(out),
            [a](Tape& t, Var o) {
                const auto& g = t.grad(o);
                const auto& av = t.val(a);
                auto& ga = t.grad_buf(a);
                for (std::size_t i = 0; i < g.numel(); ++i)
                    if (av.data()[i] > T(0)) ga.data()[i] += g.data()[i];
            },
            requires_grad(a), "relu");
    }

    Var sum(Var a) {
        const auto& av = val(a);
        T acc = 0;
        for (std::size_t i = 0; i < av.numel(); ++i) acc += av.data()[i];
        Tensor<T> out(Shape4{1, 1, 1, 1});
        out.data()[0] = acc;
        return make_node(
            std::move(out),
            [a](Tape& t, Var o) {
                const T g = t.grad(o).data()[0];
                auto& ga = t.grad_buf(a);
                for (std::size_t i = 0; i < ga.numel(); ++i)
                    ga.data()[i] += g;
            },
            requires_grad(a), "sum");
    }

    // a viewed as M x K times b viewed as K x N. Output shape (1, M, N, 1).
    Var matmul(Var a, int m, int k, Var b, int k2, int n) {
        const auto& av = val(a);
        const auto& bv = val(b);
        if (k != k2 || av.numel() != std::size_t(m) * k ||
            bv.numel() != std::size_t(k2) * n)
            throw DimensionError("matmul shape mismatch: a " +
                                 av.shape().str() + " viewed as " +
                                 std::to_string(m) + "x" + std::to_string(k) +
                                 ", b " + bv.shape().str() + " viewed as " +
                                 std::to_string(k2) + "x" + std::to_string(n));
        Tensor<T> out(mat_shape(m, n));
        matmul_plain(av.data(), bv.data(), out.data(), m, k, n);
        const bool req = any_requires({a, b});
        return make_node(
            std::move(out),
            [a, b, m, k, n](Tape& t, Var o) {
                const auto& g = t.grad(o);
                if (t.requires_grad(a)) {
                    // dA[mi,ki] = sum_n dC[mi,ni] * B[ki,ni]
                    auto& ga = t.grad_buf(a);
                    const T* bp = t.val(b).data();
                    const T* gp = g.data();
                    T* gap = ga.data();
                    parallel_for(std::size_t(m), [&](std::size_t lo,
                                                     std::size_t hi) {
                        for (std::size_t mi = lo; mi < hi; ++mi)
                            for (int ki = 0; ki < k; ++ki) {
                                T acc = 0;
                                for (int ni = 0; ni < n; ++ni)
                                    acc += gp[mi * n + ni] * bp[ki * n + ni];
                                gap[mi * k + ki] += acc;
                            }
                    });
                }
                if (t.requires_grad(b)) {
                    // dB[ki,ni] = sum_m A[mi,ki] * dC[mi,ni]
                    auto& gb = t.grad_buf(b);
                    const T* ap = t.val(a).data();
                    const T* gp = g.data();
                    T* gbp = gb.data();
                    parallel_for(std::size_t(k), [&](std::size_t lo,
                                                     std::size_t hi) {
                        for (std::size_t ki = lo; ki < hi; ++ki)
                            for (int ni = 0; ni < n; ++ni) {
                                T acc = 0;
                                for (int mi = 0; mi < m; ++mi)
                                    acc += ap[mi * k + ki] * gp[mi * n + ni];
                                gbp[ki * n + ni] += acc;
                            }
                    });
                }
            },
            req, "matmul");
    }

    // Softmax along the channel axis, computed with max-subtraction.
    Var softmax_lastaxis(Var a) {
        const auto& av = val(a);
        const int c = av.shape().c;
        if (c == 0)
            throw DomainError("softmax_lastaxis: empty reduction axis in " +
                              av.shape().str());
        Tensor<T> out(av.shape());
        const std::size_t rows = av.numel() / c;
        for (std::size_t r = 0; r < rows; ++r) {
            const T* in = av.data() + r * c;
            T* y = out.data() + r * c;
            T mx = in[0];
            for (int i = 1; i < c; ++i) mx = std::max(mx, in[i]);
            T denom = 0;
            for (int i = 0; i < c; ++i) {
                y[i] = std::exp(in[i] - mx);
                denom += y[i];
            }
            for (int i = 0; i < c; ++i) y[i] /= denom;
        }
        return make_node(
            std::move(out),
            [a, c](Tape& t, Var o) {
                const auto& g = t.grad(o);
                const auto& y = t.val(o);
                auto& ga = t.grad_buf(a);
                const std::size_t rows = g.numel() / c;
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* gp = g.data() + r * c;
                    const T* yp = y.data() + r * c;
                    T* gap = ga.data() + r * c;
                    T dot = 0;
                    for (int i = 0; i < c; ++i) dot += gp[i] * yp[i];
                    for (int i = 0; i < c; ++i)
                        gap[i] += yp[i] * (gp[i] - dot);
                }
            },
            requires_grad(a), "softmax_lastaxis");
    }

    Var transpose_hw(Var a) {
        const auto& av = val(a);
        const auto s = av.shape();
        Tensor<T> out(Shape4{s.b, s.w, s.h, s.c});
        for (int b = 0; b < s.b; ++b)
            for (int h = 0; h < s.h; ++h)
                for (int w = 0; w < s.w; ++w)
                    for (int c = 0; c < s.c; ++c)
                        out.at(b, w, h, c) = av.at(b, h, w, c);
        return make_node(
            std::move(out),
            [a, s](Tape& t, Var o) {
                const auto& g = t.grad(o);
                auto& ga = t.grad_buf(a);
                for (int b = 0; b < s.b; ++b)
                    for (int h = 0; h < s.h; ++h)
                        for (int w = 0; w < s.w; ++w)
                            for (int c = 0; c < s.c; ++c)
                                ga.at(b, h, w, c) += g.at(b, w, h, c);
            },
            requires_grad(a), "transpose_hw");
    }

    bool finite_checks() const { return check_finite_; }

    // Plain M x K by K x N multiply, inner summation in ascending k for
    // reproducibility. Shared by forward and tests.
    static void matmul_plain(const T* a, const T* b, T* out, int m, int k,
                             int n) {
        parallel_for(std::size_t(m), [&](std::size_t lo, std::size_t hi) {
            for (std::size_t mi = lo; mi < hi; ++mi) {
                T* crow = out + mi * n;
                for (int ni = 0; ni < n; ++ni) crow[ni] = T(0);
                for (int ki = 0; ki < k; ++ki) {
                    const T av = a[mi * k + ki];
                    const T* brow = b + std::size_t(ki) * n;
                    for (int ni = 0; ni < n; ++ni) crow[ni] += av * brow[ni];
                }
            }
        });
    }

private:
    struct Node {
        Var out;
        std::function<void(Tape&, Var)> fn;
    };

    void check_same_shape(const char* op, Var a, Var b) const {
        if (val(a).shape() != val(b).shape())
            throw DimensionError(std::string(op) + " shape mismatch: " +
                                 val(a).shape().str() + " vs " +
                                 val(b).shape().str());
    }

    std::vector<Tensor<T>> values_;
    std::vector<bool> requires_;
    std::vector<Tensor<T>> grads_;
    std::vector<Node> nodes_;
    bool check_finite_;
    bool backward_done_ = false;
};

// Central finite differences (f(x+h e_i) - f(x-h e_i)) / 2h, the gradcheck
// oracle. f must be deterministic.
template <typename T, typename Fn>
Tensor<T> finite_difference_grad(Fn&& f, const Tensor<T>& x, double step) {
    if (!(step > 0)) throw DomainError("finite_difference_grad: step must be > 0");
    Tensor<T> g(x.shape());
    Tensor<T> probe = x;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const T orig = probe.data()[i];
        probe.data()[i] = orig + T(step);
        const double fp = f(static_cast<const Tensor<T>&>(probe));
        probe.data()[i] = orig - T(step);
        const double fm = f(static_cast<const Tensor<T>&>(probe));
        probe.data()[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw EvalError("finite_difference_grad: non-finite f output");
        g.data()[i] = T((fp - fm) / (2.0 * step));
    }
    return g;
}

}  // namespace axial
