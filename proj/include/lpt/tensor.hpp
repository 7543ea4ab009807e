#pragma once

// Dense tensor values plus a per-iteration reverse-mode tape.
//
// Tensors are immutable once created. An op result is recorded on a tape
// exactly when at least one input is tracked on that tape; a tape supports a
// single backward pass and is rebuilt for every training iteration. Mixing
// inputs from two different live tapes is an error.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "lpt/common.hpp"
#include "lpt/gemm.hpp"

namespace lpt {

struct Storage {
    std::vector<size_t> shape;
    std::vector<real> data;
};
using StoragePtr = std::shared_ptr<const Storage>;

namespace detail {

inline size_t shape_numel(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t e : shape) n *= e;
    return n;
}

inline void check_shape(const std::vector<size_t>& shape, const char* ctx) {
    if (shape.empty()) throw ShapeError(std::string(ctx) + ": rank-0 shape not supported");
    for (size_t e : shape)
        if (e == 0) throw ShapeError(std::string(ctx) + ": zero extent in " + shape_str(shape));
}

inline StoragePtr make_storage(std::vector<size_t> shape, std::vector<real> data) {
    auto st = std::make_shared<Storage>();
    st->shape = std::move(shape);
    st->data = std::move(data);
    return st;
}

inline void axpy(std::vector<real>& y, const std::vector<real>& x, real a) {
    for (size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

inline void check_finite(const std::vector<real>& v, const char* ctx) {
    for (real x : v)
        if (!std::isfinite(x)) throw NumericError(std::string(ctx) + ": non-finite value produced");
}

#ifdef LPT_CHECK_FINITE
#define LPT_FINITE_GUARD(data, ctx) ::lpt::detail::check_finite((data), (ctx))
#else
#define LPT_FINITE_GUARD(data, ctx) ((void)0)
#endif

}  // namespace detail

class Tape;

class Tensor {
  public:
    Tensor() = default;

    static Tensor from(std::vector<size_t> shape, std::vector<real> data) {
        detail::check_shape(shape, "Tensor::from");
        if (detail::shape_numel(shape) != data.size())
            throw ShapeError("Tensor::from: shape " + shape_str(shape) + " does not match data length " +
                             std::to_string(data.size()));
        Tensor t;
        t.st_ = detail::make_storage(std::move(shape), std::move(data));
        return t;
    }
    static Tensor full(std::vector<size_t> shape, real v) {
        detail::check_shape(shape, "Tensor::full");
        return from(shape, std::vector<real>(detail::shape_numel(shape), v));
    }
    static Tensor zeros(std::vector<size_t> shape) { return full(std::move(shape), real(0)); }
    static Tensor scalar_tensor(real v) { return from({1}, {v}); }

    bool defined() const { return st_ != nullptr; }
    const std::vector<size_t>& shape() const { return st_->shape; }
    size_t rank() const { return st_->shape.size(); }
    size_t size(size_t axis) const { return st_->shape[axis]; }
    size_t numel() const { return st_->data.size(); }
    const std::vector<real>& data() const { return st_->data; }
    real at(size_t i) const { return st_->data[i]; }
    real scalar() const {
        if (numel() != 1) throw ShapeError("scalar(): tensor has shape " + shape_str(shape()));
        return st_->data[0];
    }

    // Tracking state (the grad flag): tensors become tracked via
    // Tape::watch or by being produced from tracked inputs.
    bool tracked() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int node() const { return node_; }
    Tensor detached() const {
        Tensor t;
        t.st_ = st_;
        return t;
    }

    const StoragePtr& storage() const { return st_; }
    static Tensor attach(StoragePtr st, Tape* tape, int node) {
        Tensor t;
        t.st_ = std::move(st);
        t.tape_ = tape;
        t.node_ = node;
        return t;
    }

  private:
    StoragePtr st_;
    Tape* tape_ = nullptr;
    int node_ = -1;
};

class Tape {
  public:
    using BackFn = std::function<void(Tape&, const std::vector<real>&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Registers a leaf whose gradient will be available after backward.
    Tensor watch(const Tensor& t) {
        if (t.tracked()) throw TapeError("watch: tensor is already tracked");
        int id = emit(t.storage(), {}, nullptr);
        return Tensor::attach(t.storage(), this, id);
    }

    int emit(StoragePtr out, std::vector<int> parents, BackFn back) {
        if (consumed_) throw TapeError("tape already consumed; build a fresh tape");
        nodes_.push_back(Node{std::move(out), std::move(parents), std::move(back), {}});
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Reverse sweep from a scalar loss. Single use per tape.
    void backward(const Tensor& loss) {
        if (consumed_) throw TapeError("backward: tape already consumed");
        if (loss.tape() != this || loss.node() < 0)
            throw TapeError("backward: loss is not recorded on this tape");
        if (loss.numel() != 1)
            throw TapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        consumed_ = true;
        grad_buf(loss.node()) = {real(1)};
        for (int id = loss.node(); id >= 0; --id) {
            Node& n = nodes_[id];
            if (n.grad.empty() || !n.back) continue;
            n.back(*this, n.grad);
        }
    }

    bool consumed() const { return consumed_; }

    // Gradient of the loss w.r.t. a recorded tensor; zeros when the loss
    // never reached it.
    std::vector<real> grad_of(const Tensor& t) const {
        if (t.tape() != this || t.node() < 0)
            throw TapeError("grad_of: tensor is not recorded on this tape");
        const Node& n = nodes_[t.node()];
        if (n.grad.empty()) return std::vector<real>(t.numel(), real(0));
        return n.grad;
    }

    std::vector<real>& grad_buf(int id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad.assign(n.out->data.size(), real(0));
        return n.grad;
    }

  private:
    struct Node {
        StoragePtr out;
        std::vector<int> parents;
        BackFn back;
        std::vector<real> grad;
    };
    std::vector<Node> nodes_;
    bool consumed_ = false;
};

namespace detail {

// Finds the single tape shared by the tracked inputs, or null.
inline Tape* common_tape(std::initializer_list<const Tensor*> inputs, const char* op) {
    Tape* tp = nullptr;
    for (const Tensor* t : inputs) {
        if (!t->tracked()) continue;
        if (tp && tp != t->tape())
            throw TapeError(std::string(op) + ": inputs belong to different tapes");
        tp = t->tape();
    }
    return tp;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<real> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    auto st = detail::make_storage(a.shape(), std::move(out));
    LPT_FINITE_GUARD(st->data, "add");
    Tape* tp = detail::common_tape({&a, &b}, "add");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pa = a.tracked() ? a.node() : -1;
    int pb = b.tracked() ? b.node() : -1;
    int id = tp->emit(st, {}, [pa, pb](Tape& t, const std::vector<real>& g) {
        if (pa >= 0) detail::axpy(t.grad_buf(pa), g, real(1));
        if (pb >= 0) detail::axpy(t.grad_buf(pb), g, real(1));
    });
    return Tensor::attach(st, tp, id);
}

// Broadcast-add of a width-c vector to every row of an (r x c) matrix.
inline Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    if (m.rank() != 2 || v.rank() != 1 || m.size(1) != v.size(0))
        throw ShapeError("add_rowvec: shape mismatch " + shape_str(m.shape()) + " vs " +
                         shape_str(v.shape()));
    size_t r = m.size(0), c = m.size(1);
    std::vector<real> out(m.numel());
    for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < c; ++j) out[i * c + j] = m.at(i * c + j) + v.at(j);
    auto st = detail::make_storage(m.shape(), std::move(out));
    LPT_FINITE_GUARD(st->data, "add_rowvec");
    Tape* tp = detail::common_tape({&m, &v}, "add_rowvec");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pm = m.tracked() ? m.node() : -1;
    int pv = v.tracked() ? v.node() : -1;
    int id = tp->emit(st, {}, [pm, pv, r, c](Tape& t, const std::vector<real>& g) {
        if (pm >= 0) detail::axpy(t.grad_buf(pm), g, real(1));
        if (pv >= 0) {
            auto& gv = t.grad_buf(pv);
            for (size_t i = 0; i < r; ++i)
                for (size_t j = 0; j < c; ++j) gv[j] += g[i * c + j];
        }
    });
    return Tensor::attach(st, tp, id);
}

inline Tensor add_scalar(const Tensor& a, real c) {
    std::vector<real> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + c;
    auto st = detail::make_storage(a.shape(), std::move(out));
    LPT_FINITE_GUARD(st->data, "add_scalar");
    Tape* tp = detail::common_tape({&a}, "add_scalar");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pa = a.node();
    int id = tp->emit(st, {}, [pa](Tape& t, const std::vector<real>& g) {
        detail::axpy(t.grad_buf(pa), g, real(1));
    });
    return Tensor::attach(st, tp, id);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<real> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    auto st = detail::make_storage(a.shape(), std::move(out));
    LPT_FINITE_GUARD(st->data, "mul");
    Tape* tp = detail::common_tape({&a, &b}, "mul");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pa = a.tracked() ? a.node() : -1;
    int pb = b.tracked() ? b.node() : -1;
    StoragePtr sa = a.storage(), sb = b.storage();
    int id = tp->emit(st, {}, [pa, pb, sa, sb](Tape& t, const std::vector<real>& g) {
        if (pa >= 0) {
            auto& ga = t.grad_buf(pa);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sb->data[i];
        }
        if (pb >= 0) {
            auto& gb = t.grad_buf(pb);
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * sa->data[i];
        }
    });
    return Tensor::attach(st, tp, id);
}

inline Tensor scale(const Tensor& a, real c) {
    std::vector<real> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * c;
    auto st = detail::make_storage(a.shape(), std::move(out));
    LPT_FINITE_GUARD(st->data, "scale");
    Tape* tp = detail::common_tape({&a}, "scale");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pa = a.node();
    int id = tp->emit(st, {}, [pa, c](Tape& t, const std::vector<real>& g) {
        detail::axpy(t.grad_buf(pa), g, c);
    });
    return Tensor::attach(st, tp, id);
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.size(1) != b.size(0))
        throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    size_t m = a.size(0), k = a.size(1), n = b.size(1);
    std::vector<real> out(m * n, real(0));
    detail::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
    auto st = detail::make_storage({m, n}, std::move(out));
    LPT_FINITE_GUARD(st->data, "matmul");
    Tape* tp = detail::common_tape({&a, &b}, "matmul");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pa = a.tracked() ? a.node() : -1;
    int pb = b.tracked() ? b.node() : -1;
    StoragePtr sa = a.storage(), sb = b.storage();
    int id = tp->emit(st, {}, [pa, pb, sa, sb, m, n, k](Tape& t, const std::vector<real>& g) {
        if (pa >= 0) detail::gemm_nt(m, k, n, g.data(), sb->data.data(), t.grad_buf(pa).data());
        if (pb >= 0) detail::gemm_tn(k, n, m, sa->data.data(), g.data(), t.grad_buf(pb).data());
    });
    return Tensor::attach(st, tp, id);
}

// C = A * B^T without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.size(1) != b.size(1))
        throw ShapeError("matmul_nt: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    size_t m = a.size(0), k = a.size(1), n = b.size(0);
    std::vector<real> out(m * n, real(0));
    detail::gemm_nt(m, n, k, a.data().data(), b.data().data(), out.data());
    auto st = detail::make_storage({m, n}, std::move(out));
    LPT_FINITE_GUARD(st->data, "matmul_nt");
    Tape* tp = detail::common_tape({&a, &b}, "matmul_nt");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pa = a.tracked() ? a.node() : -1;
    int pb = b.tracked() ? b.node() : -1;
    StoragePtr sa = a.storage(), sb = b.storage();
    int id = tp->emit(st, {}, [pa, pb, sa, sb, m, n, k](Tape& t, const std::vector<real>& g) {
        if (pa >= 0) detail::gemm_nn(m, k, n, g.data(), sb->data.data(), t.grad_buf(pa).data());
        if (pb >= 0) detail::gemm_tn(n, k, m, g.data(), sa->data.data(), t.grad_buf(pb).data());
    });
    return Tensor::attach(st, tp, id);
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expects rank 2, got " + shape_str(a.shape()));
    size_t r = a.size(0), c = a.size(1);
    std::vector<real> out(a.numel());
    for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < c; ++j) out[j * r + i] = a.at(i * c + j);
    auto st = detail::make_storage({c, r}, std::move(out));
    Tape* tp = detail::common_tape({&a}, "transpose");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pa = a.node();
    int id = tp->emit(st, {}, [pa, r, c](Tape& t, const std::vector<real>& g) {
        auto& ga = t.grad_buf(pa);
        for (size_t i = 0; i < r; ++i)
            for (size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    });
    return Tensor::attach(st, tp, id);
}

// Concatenation along the token axis (axis 0) of 2-D token sequences.
inline Tensor concat_tokens(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_tokens: no inputs");
    size_t c = parts[0].rank() == 2 ? parts[0].size(1) : 0;
    if (c == 0) throw ShapeError("concat_tokens: expects rank-2 inputs");
    size_t rows = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.size(1) != c)
            throw ShapeError("concat_tokens: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        rows += p.size(0);
    }
    std::vector<real> out;
    out.reserve(rows * c);
    for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    auto st = detail::make_storage({rows, c}, std::move(out));
    Tape* tp = nullptr;
    for (const Tensor& p : parts) {
        if (!p.tracked()) continue;
        if (tp && tp != p.tape()) throw TapeError("concat_tokens: inputs belong to different tapes");
        tp = p.tape();
    }
    if (!tp) return Tensor::attach(st, nullptr, -1);
    struct Piece {
        int node;
        size_t offset, count;
    };
    std::vector<Piece> pieces;
    size_t off = 0;
    for (const Tensor& p : parts) {
        if (p.tracked()) pieces.push_back({p.node(), off, p.numel()});
        off += p.numel();
    }
    int id = tp->emit(st, {}, [pieces](Tape& t, const std::vector<real>& g) {
        for (const Piece& pc : pieces) {
            auto& gp = t.grad_buf(pc.node);
            for (size_t i = 0; i < pc.count; ++i) gp[i] += g[pc.offset + i];
        }
    });
    return Tensor::attach(st, tp, id);
}

inline Tensor concat_tokens(const Tensor& a, const Tensor& b) { return concat_tokens({a, b}); }

// Rows [r0, r1) of a 2-D token sequence.
inline Tensor slice_tokens(const Tensor& a, size_t r0, size_t r1) {
    if (a.rank() != 2) throw ShapeError("slice_tokens: expects rank 2, got " + shape_str(a.shape()));
    if (r0 >= r1 || r1 > a.size(0))
        throw ShapeError("slice_tokens: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                         ") out of bounds for " + shape_str(a.shape()));
    size_t c = a.size(1);
    std::vector<real> out(a.data().begin() + r0 * c, a.data().begin() + r1 * c);
    auto st = detail::make_storage({r1 - r0, c}, std::move(out));
    Tape* tp = detail::common_tape({&a}, "slice_tokens");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pa = a.node();
    int id = tp->emit(st, {}, [pa, r0, c](Tape& t, const std::vector<real>& g) {
        auto& ga = t.grad_buf(pa);
        for (size_t i = 0; i < g.size(); ++i) ga[r0 * c + i] += g[i];
    });
    return Tensor::attach(st, tp, id);
}

// Columns [c0, c1) of a 2-D matrix (head split).
inline Tensor slice_cols(const Tensor& a, size_t c0, size_t c1) {
    if (a.rank() != 2) throw ShapeError("slice_cols: expects rank 2, got " + shape_str(a.shape()));
    if (c0 >= c1 || c1 > a.size(1))
        throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") out of bounds for " + shape_str(a.shape()));
    size_t r = a.size(0), c = a.size(1), w = c1 - c0;
    std::vector<real> out(r * w);
    for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < w; ++j) out[i * w + j] = a.at(i * c + c0 + j);
    auto st = detail::make_storage({r, w}, std::move(out));
    Tape* tp = detail::common_tape({&a}, "slice_cols");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pa = a.node();
    int id = tp->emit(st, {}, [pa, r, c, c0, w](Tape& t, const std::vector<real>& g) {
        auto& ga = t.grad_buf(pa);
        for (size_t i = 0; i < r; ++i)
            for (size_t j = 0; j < w; ++j) ga[i * c + c0 + j] += g[i * w + j];
    });
    return Tensor::attach(st, tp, id);
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    size_t r = parts[0].rank() == 2 ? parts[0].size(0) : 0;
    if (r == 0) throw ShapeError("concat_cols: expects rank-2 inputs");
    size_t cols = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.size(0) != r)
            throw ShapeError("concat_cols: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        cols += p.size(1);
    }
    std::vector<real> out(r * cols);
    size_t coff = 0;
    for (const Tensor& p : parts) {
        size_t w = p.size(1);
        for (size_t i = 0; i < r; ++i)
            for (size_t j = 0; j < w; ++j) out[i * cols + coff + j] = p.at(i * w + j);
        coff += w;
    }
    auto st = detail::make_storage({r, cols}, std::move(out));
    Tape* tp = nullptr;
    for (const Tensor& p : parts) {
        if (!p.tracked()) continue;
        if (tp && tp != p.tape()) throw TapeError("concat_cols: inputs belong to different tapes");
        tp = p.tape();
    }
    if (!tp) return Tensor::attach(st, nullptr, -1);
    struct Piece {
        int node;
        size_t coff, w;
    };
    std::vector<Piece> pieces;
    coff = 0;
    for (const Tensor& p : parts) {
        if (p.tracked()) pieces.push_back({p.node(), coff, p.size(1)});
        coff += p.size(1);
    }
    int id = tp->emit(st, {}, [pieces, r, cols](Tape& t, const std::vector<real>& g) {
        for (const Piece& pc : pieces) {
            auto& gp = t.grad_buf(pc.node);
            for (size_t i = 0; i < r; ++i)
                for (size_t j = 0; j < pc.w; ++j) gp[i * pc.w + j] += g[i * cols + pc.coff + j];
        }
    });
    return Tensor::attach(st, tp, id);
}

inline Tensor gelu(const Tensor& a) {
    std::vector<real> out(a.numel());
    auto cdf = std::make_shared<std::vector<real>>(a.numel());
    for (size_t i = 0; i < out.size(); ++i) {
        real x = a.at(i);
        (*cdf)[i] = real(0.5) * (real(1) + std::erf(x * real(0.7071067811865475)));
        out[i] = x * (*cdf)[i];
    }
    auto st = detail::make_storage(a.shape(), std::move(out));
    LPT_FINITE_GUARD(st->data, "gelu");
    Tape* tp = detail::common_tape({&a}, "gelu");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pa = a.node();
    StoragePtr sa = a.storage();
    int id = tp->emit(st, {}, [pa, sa, cdf](Tape& t, const std::vector<real>& g) {
        auto& ga = t.grad_buf(pa);
        for (size_t i = 0; i < g.size(); ++i) {
            real x = sa->data[i];
            real pdf = static_cast<real>(detail::fast_exp(real(-0.5) * x * x)) *
                       real(0.3989422804014327);
            ga[i] += g[i] * ((*cdf)[i] + x * pdf);
        }
    });
    return Tensor::attach(st, tp, id);
}

// Fused affine map: y = x W + b (b broadcast over rows).
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.size(1) != w.size(0) ||
        w.size(1) != b.size(0))
        throw ShapeError("linear: shape mismatch " + shape_str(x.shape()) + " * " +
                         shape_str(w.shape()) + " + " + shape_str(b.shape()));
    size_t m = x.size(0), k = x.size(1), n = w.size(1);
    std::vector<real> out(m * n);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out[i * n + j] = b.at(j);
    detail::gemm_nn(m, n, k, x.data().data(), w.data().data(), out.data());
    auto st = detail::make_storage({m, n}, std::move(out));
    LPT_FINITE_GUARD(st->data, "linear");
    Tape* tp = detail::common_tape({&x, &w, &b}, "linear");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int px = x.tracked() ? x.node() : -1;
    int pw = w.tracked() ? w.node() : -1;
    int pb = b.tracked() ? b.node() : -1;
    StoragePtr sx = x.storage(), sw = w.storage();
    int id = tp->emit(st, {}, [px, pw, pb, sx, sw, m, n, k](Tape& t, const std::vector<real>& g) {
        if (px >= 0) detail::gemm_nt(m, k, n, g.data(), sw->data.data(), t.grad_buf(px).data());
        if (pw >= 0) detail::gemm_tn(k, n, m, sx->data.data(), g.data(), t.grad_buf(pw).data());
        if (pb >= 0) {
            auto& gb = t.grad_buf(pb);
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
    });
    return Tensor::attach(st, tp, id);
}

// Fused scaled-dot-product multi-head attention over pre-projected q/k/v.
// Column group hd of the output is softmax(att_scale * q_hd k_hd^T) v_hd;
// equivalent to the slice/matmul/softmax composition but stores only the
// attention probabilities for the backward pass.
inline Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                                  real att_scale) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.size(1) != k.size(1) ||
        k.shape() != v.shape())
        throw ShapeError("multihead_attention: shape mismatch q" + shape_str(q.shape()) + " k" +
                         shape_str(k.shape()) + " v" + shape_str(v.shape()));
    size_t d = q.size(1);
    if (heads < 1 || d % static_cast<size_t>(heads) != 0)
        throw ShapeError("multihead_attention: width " + std::to_string(d) +
                         " not divisible by heads " + std::to_string(heads));
    size_t T = q.size(0), S = k.size(0), h = static_cast<size_t>(heads), dh = d / h;
    auto probs = std::make_shared<std::vector<real>>(h * T * S, real(0));
    std::vector<real> out(T * d, real(0));
    for (size_t hd = 0; hd < h; ++hd) {
        size_t c0 = hd * dh;
        real* slab = probs->data() + hd * T * S;
        detail::gemm_nt(T, S, dh, q.data().data() + c0, d, k.data().data() + c0, d, slab, S);
        for (size_t i = 0; i < T; ++i) {
            real* row = slab + i * S;
            real mx = row[0];
            for (size_t j = 1; j < S; ++j) mx = std::max(mx, row[j]);
            real z = 0;
            for (size_t j = 0; j < S; ++j) {
                row[j] = static_cast<real>(detail::fast_exp(att_scale * (row[j] - mx)));
                z += row[j];
            }
            for (size_t j = 0; j < S; ++j) row[j] /= z;
        }
        detail::gemm_nn(T, dh, S, slab, S, v.data().data() + c0, d, out.data() + c0, d);
    }
    auto st = detail::make_storage({T, d}, std::move(out));
    LPT_FINITE_GUARD(st->data, "multihead_attention");
    Tape* tp = detail::common_tape({&q, &k, &v}, "multihead_attention");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pq = q.tracked() ? q.node() : -1;
    int pk = k.tracked() ? k.node() : -1;
    int pv = v.tracked() ? v.node() : -1;
    StoragePtr sq = q.storage(), sk = k.storage(), sv = v.storage();
    int id = tp->emit(
        st, {}, [pq, pk, pv, sq, sk, sv, probs, h, T, S, d, dh, att_scale](
                    Tape& t, const std::vector<real>& g) {
            std::vector<real> gp(T * S);
            for (size_t hd = 0; hd < h; ++hd) {
                size_t c0 = hd * dh;
                const real* slab = probs->data() + hd * T * S;
                std::fill(gp.begin(), gp.end(), real(0));
                detail::gemm_nt(T, S, dh, g.data() + c0, d, sv->data.data() + c0, d, gp.data(), S);
                for (size_t i = 0; i < T; ++i) {
                    const real* prow = slab + i * S;
                    real* grow = gp.data() + i * S;
                    real dotr = 0;
                    for (size_t j = 0; j < S; ++j) dotr += grow[j] * prow[j];
                    for (size_t j = 0; j < S; ++j)
                        grow[j] = (grow[j] - dotr) * prow[j] * att_scale;
                }
                if (pq >= 0)
                    detail::gemm_nn(T, dh, S, gp.data(), S, sk->data.data() + c0, d,
                                    t.grad_buf(pq).data() + c0, d);
                if (pk >= 0)
                    detail::gemm_tn(S, dh, T, gp.data(), S, sq->data.data() + c0, d,
                                    t.grad_buf(pk).data() + c0, d);
                if (pv >= 0)
                    detail::gemm_tn(S, dh, T, slab, S, g.data() + c0, d,
                                    t.grad_buf(pv).data() + c0, d);
            }
        });
    return Tensor::attach(st, tp, id);
}

// Natural log; callers must pre-clamp, non-positive input is an error.
inline Tensor log(const Tensor& a) {
    std::vector<real> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) {
        real x = a.at(i);
        if (!(x > real(0)))
            throw NumericError("log: non-positive value " + std::to_string(x) + " at index " +
                               std::to_string(i));
        out[i] = std::log(x);
    }
    auto st = detail::make_storage(a.shape(), std::move(out));
    Tape* tp = detail::common_tape({&a}, "log");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pa = a.node();
    StoragePtr sa = a.storage();
    int id = tp->emit(st, {}, [pa, sa](Tape& t, const std::vector<real>& g) {
        auto& ga = t.grad_buf(pa);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / sa->data[i];
    });
    return Tensor::attach(st, tp, id);
}

// Elementwise x^e for a constant exponent e >= 0. e == 0 yields ones with
// zero gradient; fractional e requires positive inputs (callers clamp).
inline Tensor pow(const Tensor& a, real e) {
    if (e < real(0)) throw ShapeError("pow: negative exponent not supported");
    std::vector<real> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = e == real(0) ? real(1) : std::pow(a.at(i), e);
    auto st = detail::make_storage(a.shape(), std::move(out));
    LPT_FINITE_GUARD(st->data, "pow");
    Tape* tp = detail::common_tape({&a}, "pow");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pa = a.node();
    StoragePtr sa = a.storage();
    int id = tp->emit(st, {}, [pa, sa, e](Tape& t, const std::vector<real>& g) {
        if (e == real(0)) return;
        auto& ga = t.grad_buf(pa);
        for (size_t i = 0; i < g.size(); ++i)
            ga[i] += g[i] * e * std::pow(sa->data[i], e - real(1));
    });
    return Tensor::attach(st, tp, id);
}

inline Tensor sum(const Tensor& a) {
    real s = 0;
    for (size_t i = 0; i < a.numel(); ++i) s += a.at(i);
    auto st = detail::make_storage({1}, {s});
    Tape* tp = detail::common_tape({&a}, "sum");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pa = a.node();
    int id = tp->emit(st, {}, [pa](Tape& t, const std::vector<real>& g) {
        auto& ga = t.grad_buf(pa);
        for (real& x : ga) x += g[0];
    });
    return Tensor::attach(st, tp, id);
}

inline Tensor mean(const Tensor& a) {
    real s = 0;
    for (size_t i = 0; i < a.numel(); ++i) s += a.at(i);
    real inv = real(1) / static_cast<real>(a.numel());
    auto st = detail::make_storage({1}, {s * inv});
    Tape* tp = detail::common_tape({&a}, "mean");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pa = a.node();
    int id = tp->emit(st, {}, [pa, inv](Tape& t, const std::vector<real>& g) {
        auto& ga = t.grad_buf(pa);
        for (real& x : ga) x += g[0] * inv;
    });
    return Tensor::attach(st, tp, id);
}

// Normalizes along the last axis, dividing by max(||x||_2, 1e-12).
inline Tensor l2_normalize(const Tensor& a) {
    size_t c = a.shape().back();
    size_t rows = a.numel() / c;
    std::vector<real> out(a.numel());
    std::vector<real> norms(rows);
    constexpr real kEps = real(1e-12);
    for (size_t i = 0; i < rows; ++i) {
        real s = 0;
        for (size_t j = 0; j < c; ++j) s += a.at(i * c + j) * a.at(i * c + j);
        real n = std::sqrt(s);
        norms[i] = n > kEps ? n : kEps;
        for (size_t j = 0; j < c; ++j) out[i * c + j] = a.at(i * c + j) / norms[i];
    }
    auto st = detail::make_storage(a.shape(), std::move(out));
    LPT_FINITE_GUARD(st->data, "l2_normalize");
    Tape* tp = detail::common_tape({&a}, "l2_normalize");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pa = a.node();
    StoragePtr so = st;
    int id = tp->emit(st, {}, [pa, so, norms, rows, c](Tape& t, const std::vector<real>& g) {
        auto& ga = t.grad_buf(pa);
        for (size_t i = 0; i < rows; ++i) {
            real dot = 0;
            for (size_t j = 0; j < c; ++j) dot += g[i * c + j] * so->data[i * c + j];
            for (size_t j = 0; j < c; ++j)
                ga[i * c + j] += (g[i * c + j] - so->data[i * c + j] * dot) / norms[i];
        }
    });
    return Tensor::attach(st, tp, id);
}

// Per-row layer norm over the last axis with affine parameters.
inline Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                         real eps = real(1e-6)) {
    size_t c = a.shape().back();
    if (gamma.numel() != c || beta.numel() != c)
        throw ShapeError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match feature width " + std::to_string(c));
    size_t rows = a.numel() / c;
    std::vector<real> out(a.numel());
    std::vector<real> xhat(a.numel());
    std::vector<real> istd(rows);
    for (size_t i = 0; i < rows; ++i) {
        real mu = 0;
        for (size_t j = 0; j < c; ++j) mu += a.at(i * c + j);
        mu /= static_cast<real>(c);
        real var = 0;
        for (size_t j = 0; j < c; ++j) {
            real d = a.at(i * c + j) - mu;
            var += d * d;
        }
        var /= static_cast<real>(c);
        istd[i] = real(1) / std::sqrt(var + eps);
        for (size_t j = 0; j < c; ++j) {
            xhat[i * c + j] = (a.at(i * c + j) - mu) * istd[i];
            out[i * c + j] = xhat[i * c + j] * gamma.at(j) + beta.at(j);
        }
    }
    auto st = detail::make_storage(a.shape(), std::move(out));
    LPT_FINITE_GUARD(st->data, "layer_norm");
    Tape* tp = detail::common_tape({&a, &gamma, &beta}, "layer_norm");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pa = a.tracked() ? a.node() : -1;
    int pg = gamma.tracked() ? gamma.node() : -1;
    int pb = beta.tracked() ? beta.node() : -1;
    StoragePtr sg = gamma.storage();
    auto xh = std::make_shared<std::vector<real>>(std::move(xhat));
    int id = tp->emit(st, {}, [pa, pg, pb, sg, xh, istd, rows, c](Tape& t, const std::vector<real>& g) {
        if (pg >= 0) {
            auto& gg = t.grad_buf(pg);
            for (size_t i = 0; i < rows; ++i)
                for (size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * (*xh)[i * c + j];
        }
        if (pb >= 0) {
            auto& gb = t.grad_buf(pb);
            for (size_t i = 0; i < rows; ++i)
                for (size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
        }
        if (pa >= 0) {
            auto& ga = t.grad_buf(pa);
            for (size_t i = 0; i < rows; ++i) {
                real mean_gy = 0, mean_gyx = 0;
                for (size_t j = 0; j < c; ++j) {
                    real gy = g[i * c + j] * sg->data[j];
                    mean_gy += gy;
                    mean_gyx += gy * (*xh)[i * c + j];
                }
                mean_gy /= static_cast<real>(c);
                mean_gyx /= static_cast<real>(c);
                for (size_t j = 0; j < c; ++j) {
                    real gy = g[i * c + j] * sg->data[j];
                    ga[i * c + j] += (gy - mean_gy - (*xh)[i * c + j] * mean_gyx) * istd[i];
                }
            }
        }
    });
    return Tensor::attach(st, tp, id);
}

// Row-wise softmax over the last axis, computed with max subtraction.
inline Tensor softmax_rows(const Tensor& a) {
    if (a.shape().back() < 1) throw ShapeError("softmax_rows: empty last axis");
    size_t c = a.shape().back();
    size_t rows = a.numel() / c;
    std::vector<real> out(a.numel());
    for (size_t i = 0; i < rows; ++i) {
        real mx = a.at(i * c);
        for (size_t j = 1; j < c; ++j) mx = std::max(mx, a.at(i * c + j));
        real z = 0;
        for (size_t j = 0; j < c; ++j) {
            out[i * c + j] = std::exp(a.at(i * c + j) - mx);
            z += out[i * c + j];
        }
        for (size_t j = 0; j < c; ++j) out[i * c + j] /= z;
    }
    auto st = detail::make_storage(a.shape(), std::move(out));
    LPT_FINITE_GUARD(st->data, "softmax_rows");
    Tape* tp = detail::common_tape({&a}, "softmax_rows");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pa = a.node();
    StoragePtr so = st;
    int id = tp->emit(st, {}, [pa, so, rows, c](Tape& t, const std::vector<real>& g) {
        auto& ga = t.grad_buf(pa);
        for (size_t i = 0; i < rows; ++i) {
            real dot = 0;
            for (size_t j = 0; j < c; ++j) dot += g[i * c + j] * so->data[i * c + j];
            for (size_t j = 0; j < c; ++j)
                ga[i * c + j] += (g[i * c + j] - dot) * so->data[i * c + j];
        }
    });
    return Tensor::attach(st, tp, id);
}

// Clamp with pass-through gradient strictly inside [lo, hi].
inline Tensor clamp(const Tensor& a, real lo, real hi) {
    std::vector<real> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, a.at(i)));
    auto st = detail::make_storage(a.shape(), std::move(out));
    Tape* tp = detail::common_tape({&a}, "clamp");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pa = a.node();
    StoragePtr sa = a.storage();
    int id = tp->emit(st, {}, [pa, sa, lo, hi](Tape& t, const std::vector<real>& g) {
        auto& ga = t.grad_buf(pa);
        for (size_t i = 0; i < g.size(); ++i)
            if (sa->data[i] >= lo && sa->data[i] <= hi) ga[i] += g[i];
    });
    return Tensor::attach(st, tp, id);
}

inline Tensor reshape(const Tensor& a, std::vector<size_t> shape) {
    detail::check_shape(shape, "reshape");
    if (detail::shape_numel(shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape) +
                         " changes element count");
    auto st = detail::make_storage(std::move(shape), a.data());
    Tape* tp = detail::common_tape({&a}, "reshape");
    if (!tp) return Tensor::attach(st, nullptr, -1);
    int pa = a.node();
    int id = tp->emit(st, {}, [pa](Tape& t, const std::vector<real>& g) {
        detail::axpy(t.grad_buf(pa), g, real(1));
    });
    return Tensor::attach(st, tp, id);
}

// Scalar dot product of two same-shape tensors.
inline Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

}  // namespace lpt
