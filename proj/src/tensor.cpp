#include "mela/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>
#include <stdexcept>
#include <type_traits>

namespace mela {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<int> g_dtype{static_cast<int>(Dtype::f64)};

NodeRef make_node(Shape shape) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->v.resize(static_cast<std::size_t>(shape_numel(n->shape)));
    return n;
}

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument("tensor: " + msg); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
             shape_str(b.shape()));
}

// Broadcast classification for binary elementwise ops.
enum class Bcast { same, scalar, suffix };

Bcast classify_bcast(const Shape& a, const Shape& b, const char* op) {
    if (a == b) return Bcast::same;
    if (shape_numel(b) == 1) return Bcast::scalar;
    if (b.size() < a.size() &&
        std::equal(b.begin(), b.end(), a.end() - static_cast<long>(b.size())))
        return Bcast::suffix;
    fail(std::string(op) + ": incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
}

// Reduce a gradient of shape `a` onto broadcast operand shape `b`.
void reduce_bcast(const std::vector<double>& g, Bcast bc, std::size_t bn,
                  std::vector<double>& out) {
    if (bc == Bcast::same) {
        for (std::size_t i = 0; i < g.size(); ++i) out[i] += g[i];
    } else if (bc == Bcast::scalar) {
        double s = 0;
        for (double x : g) s += x;
        out[0] += s;
    } else {
        for (std::size_t i = 0; i < g.size(); ++i) out[i % bn] += g[i];
    }
}

bool track(const std::initializer_list<const Tensor*>& ins) {
    if (!g_grad_enabled) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

void attach(NodeRef& out, std::vector<NodeRef> parents,
            std::function<void(const std::vector<double>&, GradBuffers&)> vjp) {
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->vjp = std::move(vjp);
}

void round_f32(std::vector<double>& v) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradScope::NoGradScope() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradScope::~NoGradScope() { g_grad_enabled = prev_; }

void set_compute_dtype(Dtype d) { g_dtype.store(static_cast<int>(d)); }
Dtype compute_dtype() { return static_cast<Dtype>(g_dtype.load()); }

std::vector<double>& GradBuffers::at(Node* n) {
    auto it = bufs_.find(n);
    if (it == bufs_.end())
        it = bufs_.emplace(n, std::vector<double>(static_cast<std::size_t>(n->numel()), 0.0)).first;
    return it->second;
}

const std::vector<double>* GradBuffers::find(Node* n) const {
    auto it = bufs_.find(n);
    return it == bufs_.end() ? nullptr : &it->second;
}

Tensor Tensor::zeros(Shape s) { return Tensor(make_node(std::move(s))); }

Tensor Tensor::full(Shape s, double val) {
    auto n = make_node(std::move(s));
    std::fill(n->v.begin(), n->v.end(), val);
    return Tensor(n);
}

Tensor Tensor::from(Shape s, std::vector<double> vals) {
    if (shape_numel(s) != static_cast<int64_t>(vals.size()))
        fail("from: " + shape_str(s) + " does not hold " + std::to_string(vals.size()) +
             " values");
    auto n = std::make_shared<Node>();
    n->shape = std::move(s);
    n->v = std::move(vals);
    return Tensor(n);
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

double Tensor::item() const {
    if (numel() != 1) fail("item: tensor has " + std::to_string(numel()) + " elements");
    return n_->v[0];
}

Tensor constant_like(const Tensor& t, double val) { return Tensor::full(t.shape(), val); }

// ---------------------------------------------------------------- elementwise

namespace {

template <class FwdFn, class BwdFn>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, FwdFn fwd, BwdFn bwd) {
    Bcast bc = classify_bcast(a.shape(), b.shape(), name);
    auto out = make_node(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    const std::size_t bn = bv.size();
    for (std::size_t i = 0; i < av.size(); ++i) {
        std::size_t j = bc == Bcast::same ? i : (bc == Bcast::scalar ? 0 : i % bn);
        out->v[i] = fwd(av[i], bv[j]);
    }
    if (track({&a, &b})) {
        Node* pa = a.node().get();
        Node* pb = b.node().get();
        attach(out, {a.node(), b.node()},
               [pa, pb, bc, bn, bwd](const std::vector<double>& g, GradBuffers& gb) {
                   if (pa->requires_grad) {
                       auto& ga = gb.at(pa);
                       std::vector<double> tmp(g.size());
                       for (std::size_t i = 0; i < g.size(); ++i) {
                           std::size_t j = bc == Bcast::same ? i : (bc == Bcast::scalar ? 0 : i % bn);
                           tmp[i] = bwd(g[i], pa->v[i], pb->v[j], true);
                       }
                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += tmp[i];
                   }
                   if (pb->requires_grad) {
                       std::vector<double> tmp(g.size());
                       for (std::size_t i = 0; i < g.size(); ++i) {
                           std::size_t j = bc == Bcast::same ? i : (bc == Bcast::scalar ? 0 : i % bn);
                           tmp[i] = bwd(g[i], pa->v[i], pb->v[j], false);
                       }
                       reduce_bcast(tmp, bc, bn, gb.at(pb));
                   }
               });
    }
    return Tensor(out);
}

template <class FwdFn, class DerivFn>
Tensor unary_op(const Tensor& a, FwdFn fwd, DerivFn deriv) {
    auto out = make_node(a.shape());
    const auto& av = a.values();
    for (std::size_t i = 0; i < av.size(); ++i) out->v[i] = fwd(av[i]);
    if (track({&a})) {
        Node* pa = a.node().get();
        Node* self = out.get();
        attach(out, {a.node()},
               [pa, self, deriv](const std::vector<double>& g, GradBuffers& gb) {
                   auto& ga = gb.at(pa);
                   for (std::size_t i = 0; i < g.size(); ++i)
                       ga[i] += g[i] * deriv(pa->v[i], self->v[i]);
               });
    }
    return Tensor(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "add", [](double x, double y) { return x + y; },
                     [](double g, double, double, bool) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "sub", [](double x, double y) { return x - y; },
                     [](double g, double, double, bool left) { return left ? g : -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "mul", [](double x, double y) { return x * y; },
                     [](double g, double x, double y, bool left) { return left ? g * y : g * x; });
}

Tensor add_const(const Tensor& a, double c) {
    return unary_op(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_const(const Tensor& a, double c) {
    return unary_op(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor square(const Tensor& a) {
    return unary_op(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh_op(const Tensor& a) {
    return unary_op(a, [](double x) { return std::tanh(x); },
                    [](double, double y) { return 1.0 - y * y; });
}

Tensor silu(const Tensor& a) {
    return unary_op(a, [](double x) { return x / (1.0 + std::exp(-x)); },
                    [](double x, double) {
                        double s = 1.0 / (1.0 + std::exp(-x));
                        return s * (1.0 + x * (1.0 - s));
                    });
}

Tensor softplus(const Tensor& a) {
    return unary_op(a,
                    [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
                    [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

// -------------------------------------------------------------------- matmul

namespace {

struct MatDims {
    int m, n, k;
};

MatDims matmul_dims(const Shape& as, bool ta, const Shape& bs, bool tb) {
    if (as.size() != 2 || bs.size() != 2) fail("matmul: operands must be 2-D");
    int m = ta ? as[1] : as[0];
    int ka = ta ? as[0] : as[1];
    int kb = tb ? bs[1] : bs[0];
    int n = tb ? bs[0] : bs[1];
    if (ka != kb)
        fail("matmul: inner dims differ, " + shape_str(as) + (ta ? "^T" : "") + " x " +
             shape_str(bs) + (tb ? "^T" : ""));
    return {m, n, ka};
}

// C (+)= op(A) @ op(B); row-major, A stored (ar x ac), B stored (br x bc).
void gemm(bool ta, bool tb, int m, int n, int k, const double* a, int lda, const double* b,
          int ldb, double* c, int ldc, bool accumulate) {
    if (compute_dtype() == Dtype::f32) {
        thread_local std::vector<float> fa, fb, fc;
        // lda counts columns of the stored matrix; rows depend on the
        // transpose flag. All tensors are contiguous.
        const std::size_t na = static_cast<std::size_t>(ta ? k : m) * lda;
        const std::size_t nb = static_cast<std::size_t>(tb ? n : k) * ldb;
        fa.resize(na);
        fb.resize(nb);
        fc.assign(static_cast<std::size_t>(m) * n, 0.0f);
        for (std::size_t i = 0; i < na; ++i) fa[i] = static_cast<float>(a[i]);
        for (std::size_t i = 0; i < nb; ++i) fb[i] = static_cast<float>(b[i]);
        cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                    m, n, k, 1.0f, fa.data(), lda, fb.data(), ldb, 0.0f, fc.data(), n);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                double x = static_cast<double>(fc[static_cast<std::size_t>(i) * n + j]);
                if (accumulate)
                    c[static_cast<std::size_t>(i) * ldc + j] += x;
                else
                    c[static_cast<std::size_t>(i) * ldc + j] = x;
            }
    } else {
        cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                    m, n, k, 1.0, a, lda, b, ldb, accumulate ? 1.0 : 0.0, c, ldc);
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
    MatDims d = matmul_dims(a.shape(), ta, b.shape(), tb);
    auto out = make_node({d.m, d.n});
    gemm(ta, tb, d.m, d.n, d.k, a.values().data(), a.shape()[1], b.values().data(),
         b.shape()[1], out->v.data(), d.n, false);
    if (track({&a, &b})) {
        Node* pa = a.node().get();
        Node* pb = b.node().get();
        attach(out, {a.node(), b.node()},
               [pa, pb, ta, tb, d](const std::vector<double>& g, GradBuffers& gb) {
                   const int lda = pa->shape[1];
                   const int ldb = pb->shape[1];
                   if (pa->requires_grad) {
                       double* da = gb.at(pa).data();
                       if (!ta) {
                           // dA = G @ op(B)^T
                           gemm(false, !tb, d.m, d.k, d.n, g.data(), d.n, pb->v.data(), ldb, da,
                                lda, true);
                       } else {
                           // dA_stored = op(B) @ G^T
                           gemm(tb, true, d.k, d.m, d.n, pb->v.data(), ldb, g.data(), d.n, da,
                                lda, true);
                       }
                   }
                   if (pb->requires_grad) {
                       double* db = gb.at(pb).data();
                       if (!tb) {
                           // dB = op(A)^T @ G
                           gemm(!ta, false, d.k, d.n, d.m, pa->v.data(), lda, g.data(), d.n, db,
                                ldb, true);
                       } else {
                           // dB_stored = G^T @ op(A)
                           gemm(true, ta, d.n, d.k, d.m, g.data(), d.n, pa->v.data(), lda, db,
                                ldb, true);
                       }
                   }
               });
    }
    return Tensor(out);
}

// ----------------------------------------------------------------- structure

namespace {

std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<std::size_t>(i)] = acc;
        acc *= s[static_cast<std::size_t>(i)];
    }
    return st;
}

void permute_copy(const std::vector<double>& in, const Shape& in_shape,
                  const std::vector<int>& axes, std::vector<double>& out) {
    const std::size_t nd = in_shape.size();
    Shape out_shape(nd);
    for (std::size_t i = 0; i < nd; ++i) out_shape[i] = in_shape[static_cast<std::size_t>(axes[i])];
    auto in_st = strides_of(in_shape);
    auto out_st = strides_of(out_shape);
    std::vector<int> idx(nd, 0);
    const int64_t n = shape_numel(in_shape);
    for (int64_t lin = 0; lin < n; ++lin) {
        // idx enumerates the output coordinates.
        int64_t rem = lin;
        int64_t src = 0;
        for (std::size_t i = 0; i < nd; ++i) {
            int64_t c = rem / out_st[i];
            rem %= out_st[i];
            src += c * in_st[static_cast<std::size_t>(axes[i])];
        }
        out[static_cast<std::size_t>(lin)] = in[static_cast<std::size_t>(src)];
    }
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
    const std::size_t nd = a.shape().size();
    if (axes.size() != nd) fail("permute: axes rank mismatch");
    std::vector<bool> seen(nd, false);
    for (int ax : axes) {
        if (ax < 0 || ax >= static_cast<int>(nd) || seen[static_cast<std::size_t>(ax)])
            fail("permute: invalid axes");
        seen[static_cast<std::size_t>(ax)] = true;
    }
    Shape os(nd);
    for (std::size_t i = 0; i < nd; ++i) os[i] = a.shape()[static_cast<std::size_t>(axes[i])];
    auto out = make_node(os);
    permute_copy(a.values(), a.shape(), axes, out->v);
    if (track({&a})) {
        Node* pa = a.node().get();
        std::vector<int> inv(nd);
        for (std::size_t i = 0; i < nd; ++i) inv[static_cast<std::size_t>(axes[i])] = static_cast<int>(i);
        Shape oshape = os;
        attach(out, {a.node()},
               [pa, inv, oshape](const std::vector<double>& g, GradBuffers& gb) {
                   std::vector<double> tmp(g.size());
                   permute_copy(g, oshape, inv, tmp);
                   auto& ga = gb.at(pa);
                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += tmp[i];
               });
    }
    return Tensor(out);
}

Tensor reshape(const Tensor& a, Shape s) {
    if (shape_numel(s) != a.numel())
        fail("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(s));
    auto out = std::make_shared<Node>();
    out->shape = std::move(s);
    out->v = a.values();
    if (track({&a})) {
        Node* pa = a.node().get();
        attach(out, {a.node()}, [pa](const std::vector<double>& g, GradBuffers& gb) {
            auto& ga = gb.at(pa);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return Tensor(out);
}

Tensor concat_last(const std::vector<Tensor>& parts) {
    if (parts.empty()) fail("concat_last: no parts");
    Shape base = parts[0].shape();
    int last = 0;
    for (const Tensor& p : parts) {
        if (p.shape().size() != base.size()) fail("concat_last: rank mismatch");
        for (std::size_t i = 0; i + 1 < base.size(); ++i)
            if (p.shape()[i] != base[i]) fail("concat_last: leading dims differ");
        last += p.shape().back();
    }
    Shape os = base;
    os.back() = last;
    auto out = make_node(os);
    const int64_t rows = shape_numel(os) / last;
    int col0 = 0;
    bool tracked = false;
    for (const Tensor& p : parts)
        if (p.requires_grad()) tracked = true;
    tracked = tracked && g_grad_enabled;
    std::vector<NodeRef> parent_refs;
    struct Src {
        Node* n;
        int cols, col0;
    };
    std::vector<Src> srcs;
    for (const Tensor& p : parts) {
        const int pc = p.shape().back();
        const auto& pv = p.values();
        for (int64_t r = 0; r < rows; ++r)
            std::memcpy(out->v.data() + r * last + col0, pv.data() + r * pc,
                        static_cast<std::size_t>(pc) * sizeof(double));
        if (tracked) {
            parent_refs.push_back(p.node());
            srcs.push_back({p.node().get(), pc, col0});
        }
        col0 += pc;
    }
    if (tracked) {
        attach(out, std::move(parent_refs),
               [srcs, rows, last](const std::vector<double>& g, GradBuffers& gb) {
                   for (const Src& s : srcs) {
                       if (!s.n->requires_grad) continue;
                       auto& gp = gb.at(s.n);
                       for (int64_t r = 0; r < rows; ++r)
                           for (int c = 0; c < s.cols; ++c)
                               gp[static_cast<std::size_t>(r * s.cols + c)] +=
                                   g[static_cast<std::size_t>(r * last + s.col0 + c)];
                   }
               });
    }
    return Tensor(out);
}

std::vector<Tensor> split_last(const Tensor& a, const std::vector<int>& sizes) {
    int total = 0;
    for (int s : sizes) total += s;
    if (a.shape().empty() || a.shape().back() != total) fail("split_last: sizes do not sum to last dim");
    const int last = a.shape().back();
    const int64_t rows = a.numel() / last;
    std::vector<Tensor> outs;
    int col0 = 0;
    for (int sz : sizes) {
        Shape os = a.shape();
        os.back() = sz;
        auto out = make_node(os);
        for (int64_t r = 0; r < rows; ++r)
            std::memcpy(out->v.data() + r * sz, a.values().data() + r * last + col0,
                        static_cast<std::size_t>(sz) * sizeof(double));
        if (track({&a})) {
            Node* pa = a.node().get();
            const int c0 = col0;
            attach(out, {a.node()},
                   [pa, rows, last, sz, c0](const std::vector<double>& g, GradBuffers& gb) {
                       auto& ga = gb.at(pa);
                       for (int64_t r = 0; r < rows; ++r)
                           for (int c = 0; c < sz; ++c)
                               ga[static_cast<std::size_t>(r * last + c0 + c)] +=
                                   g[static_cast<std::size_t>(r * sz + c)];
                   });
        }
        outs.push_back(Tensor(out));
        col0 += sz;
    }
    return outs;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) fail("concat_rows: no parts");
    const int cols = parts[0].shape().size() == 2 ? parts[0].shape()[1] : -1;
    if (cols < 0) fail("concat_rows: 2-D only");
    int rows = 0;
    for (const Tensor& p : parts) {
        if (p.shape().size() != 2 || p.shape()[1] != cols) fail("concat_rows: column mismatch");
        rows += p.shape()[0];
    }
    auto out = make_node({rows, cols});
    bool tracked = g_grad_enabled;
    {
        bool any = false;
        for (const Tensor& p : parts) any = any || p.requires_grad();
        tracked = tracked && any;
    }
    struct Src {
        Node* n;
        int row0, nrows;
    };
    std::vector<Src> srcs;
    std::vector<NodeRef> parent_refs;
    int row0 = 0;
    for (const Tensor& p : parts) {
        std::memcpy(out->v.data() + static_cast<std::size_t>(row0) * cols, p.values().data(),
                    p.values().size() * sizeof(double));
        if (tracked) {
            srcs.push_back({p.node().get(), row0, p.shape()[0]});
            parent_refs.push_back(p.node());
        }
        row0 += p.shape()[0];
    }
    if (tracked) {
        attach(out, std::move(parent_refs),
               [srcs, cols](const std::vector<double>& g, GradBuffers& gb) {
                   for (const Src& s : srcs) {
                       if (!s.n->requires_grad) continue;
                       auto& gp = gb.at(s.n);
                       for (std::size_t i = 0; i < gp.size(); ++i)
                           gp[i] += g[static_cast<std::size_t>(s.row0) * cols + i];
                   }
               });
    }
    return Tensor(out);
}

Tensor slice_rows(const Tensor& a, int start, int len) {
    if (a.shape().size() != 2) fail("slice_rows: 2-D only");
    if (start < 0 || len < 0 || start + len > a.shape()[0]) fail("slice_rows: out of range");
    const int cols = a.shape()[1];
    auto out = make_node({len, cols});
    std::memcpy(out->v.data(), a.values().data() + static_cast<std::size_t>(start) * cols,
                static_cast<std::size_t>(len) * cols * sizeof(double));
    if (track({&a})) {
        Node* pa = a.node().get();
        attach(out, {a.node()},
               [pa, start, cols](const std::vector<double>& g, GradBuffers& gb) {
                   auto& ga = gb.at(pa);
                   for (std::size_t i = 0; i < g.size(); ++i)
                       ga[static_cast<std::size_t>(start) * cols + i] += g[i];
               });
    }
    return Tensor(out);
}

Tensor row_gather(const Tensor& a, const std::vector<int>& idx) {
    if (a.shape().size() != 2) fail("row_gather: 2-D only");
    const int rows = a.shape()[0], cols = a.shape()[1];
    for (int i : idx)
        if (i < 0 || i >= rows) fail("row_gather: index out of range");
    auto out = make_node({static_cast<int>(idx.size()), cols});
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::memcpy(out->v.data() + r * cols,
                    a.values().data() + static_cast<std::size_t>(idx[r]) * cols,
                    static_cast<std::size_t>(cols) * sizeof(double));
    if (track({&a})) {
        Node* pa = a.node().get();
        std::vector<int> ix = idx;
        attach(out, {a.node()}, [pa, ix, cols](const std::vector<double>& g, GradBuffers& gb) {
            auto& ga = gb.at(pa);
            for (std::size_t r = 0; r < ix.size(); ++r)
                for (int c = 0; c < cols; ++c)
                    ga[static_cast<std::size_t>(ix[r]) * cols + c] += g[r * cols + c];
        });
    }
    return Tensor(out);
}

Tensor rows_add_at(const Tensor& x, const Tensor& y, const std::vector<int>& idx) {
    if (x.shape().size() != 2 || y.shape().size() != 2 || x.shape()[1] != y.shape()[1])
        fail("rows_add_at: shape mismatch");
    if (static_cast<int>(idx.size()) != y.shape()[0]) fail("rows_add_at: index count mismatch");
    const int cols = x.shape()[1];
    auto out = make_node(x.shape());
    out->v = x.values();
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0 || idx[r] >= x.shape()[0]) fail("rows_add_at: index out of range");
        for (int c = 0; c < cols; ++c)
            out->v[static_cast<std::size_t>(idx[r]) * cols + c] += y.values()[r * cols + c];
    }
    if (track({&x, &y})) {
        Node* px = x.node().get();
        Node* py = y.node().get();
        std::vector<int> ix = idx;
        attach(out, {x.node(), y.node()},
               [px, py, ix, cols](const std::vector<double>& g, GradBuffers& gb) {
                   if (px->requires_grad) {
                       auto& gx = gb.at(px);
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                   }
                   if (py->requires_grad) {
                       auto& gy = gb.at(py);
                       for (std::size_t r = 0; r < ix.size(); ++r)
                           for (int c = 0; c < cols; ++c)
                               gy[r * cols + c] += g[static_cast<std::size_t>(ix[r]) * cols + c];
                   }
               });
    }
    return Tensor(out);
}

// ---------------------------------------------------------------- reductions

Tensor sum_all(const Tensor& a) {
    auto out = make_node({1});
    double s = 0;
    for (double x : a.values()) s += x;
    out->v[0] = s;
    if (track({&a})) {
        Node* pa = a.node().get();
        attach(out, {a.node()}, [pa](const std::vector<double>& g, GradBuffers& gb) {
            auto& ga = gb.at(pa);
            for (double& x : ga) x += g[0];
        });
    }
    return Tensor(out);
}

Tensor mean_all(const Tensor& a) { return mul_const(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mean_axis0(const Tensor& a) {
    if (a.shape().size() != 2) fail("mean_axis0: 2-D only");
    const int rows = a.shape()[0], cols = a.shape()[1];
    auto out = make_node({cols});
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out->v[static_cast<std::size_t>(c)] += a.values()[static_cast<std::size_t>(r) * cols + c];
    for (int c = 0; c < cols; ++c) out->v[static_cast<std::size_t>(c)] /= rows;
    if (track({&a})) {
        Node* pa = a.node().get();
        attach(out, {a.node()}, [pa, rows, cols](const std::vector<double>& g, GradBuffers& gb) {
            auto& ga = gb.at(pa);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c)
                    ga[static_cast<std::size_t>(r) * cols + c] += g[static_cast<std::size_t>(c)] / rows;
        });
    }
    return Tensor(out);
}

Tensor softmax_last(const Tensor& a) {
    if (a.shape().empty()) fail("softmax_last: needs at least 1-D");
    const int last = a.shape().back();
    const int64_t rows = a.numel() / last;
    auto out = make_node(a.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const double* in = a.values().data() + r * last;
        double* o = out->v.data() + r * last;
        double mx = in[0];
        for (int c = 1; c < last; ++c) mx = std::max(mx, in[c]);
        double z = 0;
        for (int c = 0; c < last; ++c) {
            o[c] = std::exp(in[c] - mx);
            z += o[c];
        }
        for (int c = 0; c < last; ++c) o[c] /= z;
    }
    if (track({&a})) {
        Node* pa = a.node().get();
        Node* self = out.get();
        attach(out, {a.node()},
               [pa, self, rows, last](const std::vector<double>& g, GradBuffers& gb) {
                   auto& ga = gb.at(pa);
                   for (int64_t r = 0; r < rows; ++r) {
                       const double* y = self->v.data() + r * last;
                       const double* gr = g.data() + r * last;
                       double dot = 0;
                       for (int c = 0; c < last; ++c) dot += gr[c] * y[c];
                       for (int c = 0; c < last; ++c)
                           ga[static_cast<std::size_t>(r * last + c)] += y[c] * (gr[c] - dot);
                   }
               });
    }
    return Tensor(out);
}

Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps) {
    if (x.shape().size() != 2) fail("rmsnorm: 2-D only");
    const int rows = x.shape()[0], cols = x.shape()[1];
    if (weight.shape() != Shape{cols}) fail("rmsnorm: weight must be [cols]");
    auto out = make_node(x.shape());
    std::vector<double> inv_rms(static_cast<std::size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        const double* in = x.values().data() + static_cast<std::size_t>(r) * cols;
        double ms = 0;
        for (int c = 0; c < cols; ++c) ms += in[c] * in[c];
        ms = ms / cols + eps;
        double ir = 1.0 / std::sqrt(ms);
        inv_rms[static_cast<std::size_t>(r)] = ir;
        for (int c = 0; c < cols; ++c)
            out->v[static_cast<std::size_t>(r) * cols + c] = in[c] * ir * weight.values()[static_cast<std::size_t>(c)];
    }
    if (track({&x, &weight})) {
        Node* px = x.node().get();
        Node* pw = weight.node().get();
        attach(out, {x.node(), weight.node()},
               [px, pw, rows, cols, inv_rms](const std::vector<double>& g, GradBuffers& gb) {
                   for (int r = 0; r < rows; ++r) {
                       const double* xv = px->v.data() + static_cast<std::size_t>(r) * cols;
                       const double* gr = g.data() + static_cast<std::size_t>(r) * cols;
                       const double ir = inv_rms[static_cast<std::size_t>(r)];
                       if (px->requires_grad) {
                           auto& gx = gb.at(px);
                           double dot = 0;  // sum_k g_k w_k x_k
                           for (int c = 0; c < cols; ++c) dot += gr[c] * pw->v[static_cast<std::size_t>(c)] * xv[c];
                           const double coef = dot * ir * ir * ir / cols;
                           for (int c = 0; c < cols; ++c)
                               gx[static_cast<std::size_t>(r) * cols + c] +=
                                   gr[c] * pw->v[static_cast<std::size_t>(c)] * ir - xv[c] * coef;
                       }
                       if (pw->requires_grad) {
                           auto& gw = gb.at(pw);
                           for (int c = 0; c < cols; ++c) gw[static_cast<std::size_t>(c)] += gr[c] * xv[c] * ir;
                       }
                   }
               });
    }
    return Tensor(out);
}

// --------------------------------------------------------------------- rope

Tensor rope(const Tensor& x, int head_dim, const std::vector<int>& positions, double base) {
    if (x.shape().size() != 2) fail("rope: 2-D only");
    const int rows = x.shape()[0], cols = x.shape()[1];
    if (head_dim <= 0 || head_dim % 2 != 0 || cols % head_dim != 0)
        fail("rope: cols must be a multiple of an even head_dim");
    if (static_cast<int>(positions.size()) != rows) fail("rope: positions size mismatch");
    const int heads = cols / head_dim;
    const int half = head_dim / 2;
    std::vector<double> inv_freq(static_cast<std::size_t>(half));
    for (int i = 0; i < half; ++i)
        inv_freq[static_cast<std::size_t>(i)] = std::pow(base, -2.0 * i / head_dim);
    auto out = make_node(x.shape());
    auto apply = [&](const double* in, double* o, int pos, double sign) {
        for (int h = 0; h < heads; ++h)
            for (int i = 0; i < half; ++i) {
                const double th = sign * pos * inv_freq[static_cast<std::size_t>(i)];
                const double c = std::cos(th), s = std::sin(th);
                const int b = h * head_dim + 2 * i;
                const double x0 = in[b], x1 = in[b + 1];
                o[b] = x0 * c - x1 * s;
                o[b + 1] = x0 * s + x1 * c;
            }
    };
    for (int r = 0; r < rows; ++r)
        apply(x.values().data() + static_cast<std::size_t>(r) * cols,
              out->v.data() + static_cast<std::size_t>(r) * cols, positions[static_cast<std::size_t>(r)], 1.0);
    if (track({&x})) {
        Node* px = x.node().get();
        std::vector<int> pos = positions;
        attach(out, {x.node()},
               [px, pos, rows, cols, heads, half, head_dim, inv_freq](const std::vector<double>& g,
                                                                      GradBuffers& gb) {
                   auto& gx = gb.at(px);
                   for (int r = 0; r < rows; ++r) {
                       const double* gr = g.data() + static_cast<std::size_t>(r) * cols;
                       double* o = gx.data() + static_cast<std::size_t>(r) * cols;
                       for (int h = 0; h < heads; ++h)
                           for (int i = 0; i < half; ++i) {
                               const double th = -pos[static_cast<std::size_t>(r)] * inv_freq[static_cast<std::size_t>(i)];
                               const double c = std::cos(th), s = std::sin(th);
                               const int b = h * head_dim + 2 * i;
                               const double g0 = gr[b], g1 = gr[b + 1];
                               o[b] += g0 * c - g1 * s;
                               o[b + 1] += g0 * s + g1 * c;
                           }
                   }
               });
    }
    return Tensor(out);
}

// ------------------------------------------------------------ newton-schulz

NsCoeffs ns_quintic() { return {3.4445, -4.7750, 2.0315}; }
NsCoeffs ns_cubic() { return {1.5, -0.5, 0.0}; }

namespace {

// One orthogonalization workspace per NS node; grams are recomputed in the
// backward pass so only the per-iteration inputs are kept.
template <typename Real>
struct NsWork {
    int m, n;  // stored dims
    bool left; // G = X X^T (left) or X^T X (right)
    std::vector<std::vector<Real>> xs;  // inputs to each iteration
    std::vector<Real> out;
};

template <typename Real>
void ns_small_gemm(bool ta, bool tb, int m, int n, int k, const Real* a, int lda, const Real* b,
                   int ldb, Real* c, int ldc, Real beta) {
    if constexpr (std::is_same_v<Real, float>)
        cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                    m, n, k, 1.0f, a, lda, b, ldb, beta, c, ldc);
    else
        cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                    m, n, k, 1.0, a, lda, b, ldb, beta, c, ldc);
}

template <typename Real>
void ns_forward(const double* s, int m, int n, int steps, NsCoeffs cf, NsWork<Real>& w,
                bool keep_iterates) {
    w.m = m;
    w.n = n;
    w.left = m <= n;
    const int g = std::min(m, n);
    const std::size_t mn = static_cast<std::size_t>(m) * n;
    std::vector<Real> x(mn);
    double nrm = 0;
    for (std::size_t i = 0; i < mn; ++i) nrm += s[i] * s[i];
    nrm = std::sqrt(nrm);
    const double scale = 1.0 / (nrm + 1e-7);
    for (std::size_t i = 0; i < mn; ++i) x[i] = static_cast<Real>(s[i] * scale);
    std::vector<Real> gram(static_cast<std::size_t>(g) * g), gram2(static_cast<std::size_t>(g) * g), q(static_cast<std::size_t>(g) * g), y(mn);
    for (int it = 0; it < steps; ++it) {
        if (keep_iterates) w.xs.push_back(x);
        if (w.left)
            ns_small_gemm<Real>(false, true, g, g, n, x.data(), n, x.data(), n, gram.data(), g, Real(0));
        else
            ns_small_gemm<Real>(true, false, g, g, m, x.data(), n, x.data(), n, gram.data(), g, Real(0));
        ns_small_gemm<Real>(false, false, g, g, g, gram.data(), g, gram.data(), g, gram2.data(), g, Real(0));
        for (std::size_t i = 0; i < q.size(); ++i)
            q[i] = static_cast<Real>(cf.b) * gram[i] + static_cast<Real>(cf.c) * gram2[i];
        if (w.left)
            ns_small_gemm<Real>(false, false, m, n, g, q.data(), g, x.data(), n, y.data(), n, Real(0));
        else
            ns_small_gemm<Real>(false, false, m, n, g, x.data(), n, q.data(), g, y.data(), n, Real(0));
        for (std::size_t i = 0; i < mn; ++i) y[i] += static_cast<Real>(cf.a) * x[i];
        std::swap(x, y);
    }
    w.out = std::move(x);
}

// Reverse sweep; grams are rebuilt from the saved iterates.
template <typename Real>
void ns_backward(const NsWork<Real>& w, int steps, NsCoeffs cf, const double* s_in,
                 const std::vector<double>& gout, std::vector<double>& gs) {
    const int m = w.m, n = w.n;
    const int g = std::min(m, n);
    const std::size_t mn = static_cast<std::size_t>(m) * n;
    const std::size_t gg = static_cast<std::size_t>(g) * g;
    std::vector<Real> dy(mn), gram(gg), gram2(gg), q(gg), dq(gg), dg(gg), tmp(gg), dx(mn);
    for (std::size_t i = 0; i < mn; ++i) dy[i] = static_cast<Real>(gout[i]);
    for (int it = steps - 1; it >= 0; --it) {
        const std::vector<Real>& x = w.xs[static_cast<std::size_t>(it)];
        if (w.left)
            ns_small_gemm<Real>(false, true, g, g, n, x.data(), n, x.data(), n, gram.data(), g, Real(0));
        else
            ns_small_gemm<Real>(true, false, g, g, m, x.data(), n, x.data(), n, gram.data(), g, Real(0));
        ns_small_gemm<Real>(false, false, g, g, g, gram.data(), g, gram.data(), g, gram2.data(), g, Real(0));
        for (std::size_t i = 0; i < gg; ++i)
            q[i] = static_cast<Real>(cf.b) * gram[i] + static_cast<Real>(cf.c) * gram2[i];
        if (w.left) {
            // dQ = dY X^T ; dG = b dQ + c (dQ G + G dQ) ; dX = a dY + Q dY + (dG + dG^T) X
            ns_small_gemm<Real>(false, true, g, g, n, dy.data(), n, x.data(), n, dq.data(), g, Real(0));
            ns_small_gemm<Real>(false, false, g, g, g, dq.data(), g, gram.data(), g, tmp.data(), g, Real(0));
            ns_small_gemm<Real>(false, false, g, g, g, gram.data(), g, dq.data(), g, tmp.data(), g, Real(1));
            for (std::size_t i = 0; i < gg; ++i)
                dg[i] = static_cast<Real>(cf.b) * dq[i] + static_cast<Real>(cf.c) * tmp[i];
            // symmetrize dG in place
            for (int r = 0; r < g; ++r)
                for (int c = r; c < g; ++c) {
                    Real ssum = dg[static_cast<std::size_t>(r) * g + c] + dg[static_cast<std::size_t>(c) * g + r];
                    dg[static_cast<std::size_t>(r) * g + c] = ssum;
                    dg[static_cast<std::size_t>(c) * g + r] = ssum;
                }
            ns_small_gemm<Real>(false, false, m, n, g, q.data(), g, dy.data(), n, dx.data(), n, Real(0));
            ns_small_gemm<Real>(false, false, m, n, g, dg.data(), g, x.data(), n, dx.data(), n, Real(1));
        } else {
            // G = X^T X ; dQ = X^T dY ; dG = b dQ + c (G dQ + dQ G) ; dX = a dY + dY Q + X (dG + dG^T)
            ns_small_gemm<Real>(true, false, g, g, m, x.data(), n, dy.data(), n, dq.data(), g, Real(0));
            ns_small_gemm<Real>(false, false, g, g, g, gram.data(), g, dq.data(), g, tmp.data(), g, Real(0));
            ns_small_gemm<Real>(false, false, g, g, g, dq.data(), g, gram.data(), g, tmp.data(), g, Real(1));
            for (std::size_t i = 0; i < gg; ++i)
                dg[i] = static_cast<Real>(cf.b) * dq[i] + static_cast<Real>(cf.c) * tmp[i];
            for (int r = 0; r < g; ++r)
                for (int c = r; c < g; ++c) {
                    Real sum = dg[static_cast<std::size_t>(r) * g + c] + dg[static_cast<std::size_t>(c) * g + r];
                    dg[static_cast<std::size_t>(r) * g + c] = sum;
                    dg[static_cast<std::size_t>(c) * g + r] = sum;
                }
            ns_small_gemm<Real>(false, false, m, n, g, dy.data(), n, q.data(), g, dx.data(), n, Real(0));
            ns_small_gemm<Real>(false, false, m, n, g, x.data(), n, dg.data(), g, dx.data(), n, Real(1));
        }
        for (std::size_t i = 0; i < mn; ++i) dx[i] += static_cast<Real>(cf.a) * dy[i];
        std::swap(dx, dy);
    }
    // Through the Frobenius pre-normalization.
    double nrm = 0;
    for (std::size_t i = 0; i < mn; ++i) nrm += s_in[i] * s_in[i];
    nrm = std::sqrt(nrm);
    const double t = 1.0 / (nrm + 1e-7);
    if (nrm > 1e-300) {
        double dot = 0;
        for (std::size_t i = 0; i < mn; ++i) dot += static_cast<double>(dy[i]) * s_in[i];
        const double coef = dot * t * t / nrm;
        for (std::size_t i = 0; i < mn; ++i)
            gs[i] += static_cast<double>(dy[i]) * t - s_in[i] * coef;
    } else {
        for (std::size_t i = 0; i < mn; ++i) gs[i] += static_cast<double>(dy[i]) * t;
    }
}

}  // namespace

Tensor newton_schulz(const Tensor& s, int steps, NsCoeffs coeffs) {
    if (s.shape().size() != 2) fail("newton_schulz: input must be 2-D");
    if (steps < 1) fail("newton_schulz: steps must be >= 1");
    const int m = s.shape()[0], n = s.shape()[1];
    auto out = make_node(s.shape());
    const bool tracked = track({&s});
    if (compute_dtype() == Dtype::f32) {
        auto w = std::make_shared<NsWork<float>>();
        ns_forward<float>(s.values().data(), m, n, steps, coeffs, *w, tracked);
        for (std::size_t i = 0; i < out->v.size(); ++i) out->v[i] = static_cast<double>(w->out[i]);
        if (tracked) {
            Node* ps = s.node().get();
            attach(out, {s.node()},
                   [ps, w, steps, coeffs](const std::vector<double>& g, GradBuffers& gb) {
                       ns_backward<float>(*w, steps, coeffs, ps->v.data(), g, gb.at(ps));
                   });
        }
    } else {
        auto w = std::make_shared<NsWork<double>>();
        ns_forward<double>(s.values().data(), m, n, steps, coeffs, *w, tracked);
        out->v = w->out;
        if (tracked) {
            Node* ps = s.node().get();
            attach(out, {s.node()},
                   [ps, w, steps, coeffs](const std::vector<double>& g, GradBuffers& gb) {
                       ns_backward<double>(*w, steps, coeffs, ps->v.data(), g, gb.at(ps));
                   });
        }
    }
    return Tensor(out);
}

// -------------------------------------------------------------- cross-entropy

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.shape().size() != 2) fail("cross_entropy: logits must be 2-D");
    const int rows = logits.shape()[0], vocab = logits.shape()[1];
    if (static_cast<int>(targets.size()) != rows) fail("cross_entropy: target count mismatch");
    int count = 0;
    for (int t : targets) {
        if (t >= vocab) fail("cross_entropy: target out of range");
        if (t >= 0) ++count;
    }
    if (count == 0) fail("cross_entropy: all positions ignored");
    auto out = make_node({1});
    auto probs = std::make_shared<std::vector<double>>(logits.values().size());
    double total = 0;
    for (int r = 0; r < rows; ++r) {
        const double* in = logits.values().data() + static_cast<std::size_t>(r) * vocab;
        double* p = probs->data() + static_cast<std::size_t>(r) * vocab;
        double mx = in[0];
        for (int c = 1; c < vocab; ++c) mx = std::max(mx, in[c]);
        double z = 0;
        for (int c = 0; c < vocab; ++c) {
            p[c] = std::exp(in[c] - mx);
            z += p[c];
        }
        for (int c = 0; c < vocab; ++c) p[c] /= z;
        if (targets[static_cast<std::size_t>(r)] >= 0)
            total += -(in[targets[static_cast<std::size_t>(r)]] - mx - std::log(z));
    }
    out->v[0] = total / count;
    if (track({&logits})) {
        Node* pl = logits.node().get();
        std::vector<int> tg = targets;
        attach(out, {logits.node()},
               [pl, tg, rows, vocab, count, probs](const std::vector<double>& g, GradBuffers& gb) {
                   auto& gl = gb.at(pl);
                   const double scale = g[0] / count;
                   for (int r = 0; r < rows; ++r) {
                       if (tg[static_cast<std::size_t>(r)] < 0) continue;
                       const double* p = probs->data() + static_cast<std::size_t>(r) * vocab;
                       double* o = gl.data() + static_cast<std::size_t>(r) * vocab;
                       for (int c = 0; c < vocab; ++c) o[c] += scale * p[c];
                       o[tg[static_cast<std::size_t>(r)]] -= scale;
                   }
               });
    }
    return Tensor(out);
}

// ------------------------------------------------------------------- barrier

Tensor barrier(const Tensor& x) {
    auto out = std::make_shared<Node>();
    out->shape = x.shape();
    out->v = x.values();
    return Tensor(out);
}

// ------------------------------------------------------------------ ParamSet

void ParamSet::add(const std::string& name, Tensor t) {
    if (!t.defined()) fail("ParamSet: undefined tensor for " + name);
    auto [it, inserted] = m_.emplace(name, std::move(t));
    (void)it;
    if (!inserted) fail("ParamSet: duplicate name " + name);
}

Tensor& ParamSet::at(const std::string& name) {
    auto it = m_.find(name);
    if (it == m_.end()) fail("ParamSet: no param named " + name);
    return it->second;
}

const Tensor& ParamSet::at(const std::string& name) const {
    auto it = m_.find(name);
    if (it == m_.end()) fail("ParamSet: no param named " + name);
    return it->second;
}

int64_t ParamSet::total_elements() const {
    int64_t n = 0;
    for (const auto& [k, v] : m_) n += v.numel();
    return n;
}

void ParamSet::merge(const ParamSet& other) {
    for (const auto& [k, v] : other.map()) add(k, v);
}

// ------------------------------------------------------------------ backward

namespace {

std::vector<Node*> topo_order(Node* root) {
    // Iterative post-order DFS; the reversed result is a topological order
    // with the root first.
    std::vector<Node*> order;
    std::unordered_map<Node*, int> state;  // 0 new, 1 open, 2 done
    std::vector<Node*> stack{root};
    while (!stack.empty()) {
        Node* n = stack.back();
        int& st = state[n];
        if (st == 0) {
            st = 1;
            for (const NodeRef& p : n->parents)
                if (state[p.get()] == 0) stack.push_back(p.get());
        } else {
            stack.pop_back();
            if (st == 1) {
                st = 2;
                order.push_back(n);
            }
        }
    }
    return order;
}

void run_backward(const Tensor& loss, GradBuffers& gb) {
    if (loss.numel() != 1) fail("grad: loss must be scalar, got " + shape_str(loss.shape()));
    Node* root = loss.node().get();
    gb.at(root)[0] = 1.0;
    if (!root->vjp && root->parents.empty()) return;
    auto order = topo_order(root);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (!n->vjp) continue;
        const std::vector<double>* g = gb.find(n);
        if (!g) continue;  // not reached by any child
        n->vjp(*g, gb);
    }
}

}  // namespace

GradMap grad(const Tensor& loss, const ParamSet& params) {
    GradBuffers gb;
    run_backward(loss, gb);
    GradMap out;
    for (const auto& [name, t] : params.map()) {
        const std::vector<double>* g = gb.find(t.node().get());
        if (g)
            out[name] = *g;
        else
            out[name] = std::vector<double>(static_cast<std::size_t>(t.numel()), 0.0);
    }
    return out;
}

std::vector<std::vector<double>> grad_wrt(const Tensor& loss, const std::vector<Tensor>& wrt) {
    GradBuffers gb;
    run_backward(loss, gb);
    std::vector<std::vector<double>> out;
    for (const Tensor& t : wrt) {
        const std::vector<double>* g = gb.find(t.node().get());
        if (g)
            out.push_back(*g);
        else
            out.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
    }
    return out;
}

int64_t graph_node_count(const Tensor& t) {
    std::unordered_map<Node*, bool> seen;
    std::vector<Node*> stack{t.node().get()};
    int64_t count = 0;
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        if (seen[n]) continue;
        seen[n] = true;
        ++count;
        for (const NodeRef& p : n->parents) stack.push_back(p.get());
    }
    return count;
}

// ------------------------------------------------------------ finite differences

namespace {

double fd_one_coord(const std::function<Tensor()>& f, Tensor& param, std::size_t coord,
                    double eps, double analytic, const std::string& name) {
    auto& v = param.mutable_values();
    const double saved = v[coord];
    double fp, fm;
    {
        NoGradScope ng;
        v[coord] = saved + eps;
        fp = f().item();
        v[coord] = saved - eps;
        fm = f().item();
    }
    v[coord] = saved;
    const double numeric = (fp - fm) / (2.0 * eps);
    if (!std::isfinite(numeric) || !std::isfinite(analytic))
        throw std::runtime_error("finite_diff_check: non-finite derivative for parameter " + name);
    return std::abs(analytic - numeric) /
           std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

double fd_check_impl(const std::function<Tensor()>& f, ParamSet& params, double eps,
                     int coords_per_tensor, uint64_t seed) {
    if (eps <= 0) fail("finite_diff_check: eps must be positive");
    Tensor loss = f();
    if (!std::isfinite(loss.item()))
        throw std::runtime_error("finite_diff_check: non-finite loss");
    GradMap analytic = grad(loss, params);
    double worst = 0;
    std::mt19937_64 rng(seed);
    for (auto& [name, t] : params.mutable_map()) {
        const auto& g = analytic[name];
        std::vector<std::size_t> coords;
        const std::size_t n = g.size();
        if (coords_per_tensor <= 0 || static_cast<std::size_t>(coords_per_tensor) >= n) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            // Distinct sampled coordinates; every tensor is covered.
            std::vector<std::size_t> all(n);
            for (std::size_t i = 0; i < n; ++i) all[i] = i;
            for (int i = 0; i < coords_per_tensor; ++i) {
                std::uniform_int_distribution<std::size_t> d(i, n - 1);
                std::swap(all[static_cast<std::size_t>(i)], all[d(rng)]);
                coords.push_back(all[static_cast<std::size_t>(i)]);
            }
        }
        for (std::size_t c : coords)
            worst = std::max(worst, fd_one_coord(f, t, c, eps, g[c], name));
    }
    return worst;
}

}  // namespace

double finite_diff_check(const std::function<Tensor()>& f, ParamSet& params, double eps) {
    return fd_check_impl(f, params, eps, 0, 0);
}

double finite_diff_check_sampled(const std::function<Tensor()>& f, ParamSet& params, double eps,
                                 int coords_per_tensor, uint64_t seed) {
    return fd_check_impl(f, params, eps, coords_per_tensor, seed);
}

}  // namespace mela
