#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace mela {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node;
using NodeRef = std::shared_ptr<Node>;

// Gradient buffers for one backward pass. Kept outside the nodes so the
// graph itself is never mutated and repeated backward calls are identical.
class GradBuffers {
  public:
    std::vector<double>& at(Node* n);
    bool has(Node* n) const { return bufs_.count(n) > 0; }
    const std::vector<double>* find(Node* n) const;

  private:
    std::unordered_map<Node*, std::vector<double>> bufs_;
};

struct Node {
    std::vector<double> v;
    Shape shape;
    bool requires_grad = false;
    std::vector<NodeRef> parents;
    // Accumulates d(loss)/d(parent) into `gb` given d(loss)/d(this) = gout.
    std::function<void(const std::vector<double>& gout, GradBuffers& gb)> vjp;

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
};

// When false (inside a NoGradScope) ops produce constant leaves: identical
// values, no parents, no gradient flow.
bool grad_enabled();

struct NoGradScope {
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

  private:
    bool prev_;
};

// Global compute precision. f64 is the default and what every test uses;
// f32 rounds each kernel result to float precision and runs the matrix
// kernels in sgemm, trading exactness for training speed.
enum class Dtype { f64, f32 };
void set_compute_dtype(Dtype d);
Dtype compute_dtype();

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(NodeRef n) : n_(std::move(n)) {}

    static Tensor zeros(Shape s);
    static Tensor full(Shape s, double val);
    static Tensor from(Shape s, std::vector<double> vals);
    static Tensor scalar(double v);

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape[i]; }
    int ndim() const { return static_cast<int>(n_->shape.size()); }
    int64_t numel() const { return n_->numel(); }
    const std::vector<double>& values() const { return n_->v; }
    std::vector<double>& mutable_values() { return n_->v; }
    double item() const;

    bool requires_grad() const { return n_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        n_->requires_grad = rg;
        return *this;
    }

    NodeRef node() const { return n_; }

  private:
    NodeRef n_;
};

// ---- graph-free helpers ----
Tensor constant_like(const Tensor& t, double val);

// ---- elementwise / broadcast ----
// b must have the same shape as a, be a single element, or have a shape that
// is a suffix of a's shape (broadcast over the leading axes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_const(const Tensor& a, double c);
Tensor mul_const(const Tensor& a, double c);
Tensor square(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh_op(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);

// ---- linear algebra ----
// 2-D only; ta/tb transpose the operands logically (no copy).
Tensor matmul(const Tensor& a, const Tensor& b, bool ta = false, bool tb = false);

// ---- structure ----
Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor reshape(const Tensor& a, Shape s);
Tensor concat_last(const std::vector<Tensor>& parts);
std::vector<Tensor> split_last(const Tensor& a, const std::vector<int>& sizes);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, int start, int len);
Tensor row_gather(const Tensor& a, const std::vector<int>& idx);
// out = x, then out[idx[i], :] += y[i, :]. idx entries must be distinct.
Tensor rows_add_at(const Tensor& x, const Tensor& y, const std::vector<int>& idx);

// ---- reductions / normalization ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor mean_axis0(const Tensor& a);
Tensor softmax_last(const Tensor& a);
Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps = 1e-5);

// ---- sequence-model kernels ----
// Rotary embedding applied per head over rows; row r uses position
// positions[r]. x is [T, heads*head_dim].
Tensor rope(const Tensor& x, int head_dim, const std::vector<int>& positions,
            double base = 10000.0);

struct NsCoeffs {
    double a, b, c;
};
// Quintic coefficients tuned for the orthogonalizing iteration; the cubic
// pair (1.5, -0.5, 0) is the classical fallback.
NsCoeffs ns_quintic();
NsCoeffs ns_cubic();

// Frobenius pre-normalization followed by `steps` iterations of
// X <- aX + b(XX^T)X + c(XX^T)^2 X. Differentiable; NS(0) = 0.
Tensor newton_schulz(const Tensor& s, int steps, NsCoeffs coeffs);

// Mean cross-entropy from raw logits over rows whose target >= 0.
// Rows with target == kIgnoreTarget are excluded from the mean.
constexpr int kIgnoreTarget = -1;
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);

// ---- gradient control ----
// Identical values, no parents; gradients do not flow through.
Tensor barrier(const Tensor& x);

// ---- parameters & autodiff ----
class ParamSet {
  public:
    void add(const std::string& name, Tensor t);
    bool has(const std::string& name) const { return m_.count(name) > 0; }
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    const std::map<std::string, Tensor>& map() const { return m_; }
    std::map<std::string, Tensor>& mutable_map() { return m_; }
    std::size_t size() const { return m_.size(); }
    int64_t total_elements() const;
    void merge(const ParamSet& other);

  private:
    std::map<std::string, Tensor> m_;
};

using GradMap = std::map<std::string, std::vector<double>>;

// Reverse-mode gradient of a scalar loss w.r.t. every param in `params`.
// Unreachable params get zero gradients. The graph is not mutated.
GradMap grad(const Tensor& loss, const ParamSet& params);

// Lower-level entry point: gradients of `loss` w.r.t. explicit tensors.
std::vector<std::vector<double>> grad_wrt(const Tensor& loss,
                                          const std::vector<Tensor>& wrt);

// Number of graph nodes reachable from `t` (diagnostics and tests).
int64_t graph_node_count(const Tensor& t);

// Central finite differences over every coordinate of every param.
// Returns the max relative error; throws on non-finite values, naming the
// offending parameter.
double finite_diff_check(const std::function<Tensor()>& f, ParamSet& params,
                         double eps);

// Same check restricted to `coords_per_tensor` deterministically sampled
// coordinates per parameter tensor. Every tensor is still covered.
double finite_diff_check_sampled(const std::function<Tensor()>& f,
                                 ParamSet& params, double eps,
                                 int coords_per_tensor, uint64_t seed);

}  // namespace mela
