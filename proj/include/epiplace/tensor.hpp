#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace epiplace {

namespace detail {
struct TensorNode;
}

/// Thread-local gradient recording switch. Forward evaluation with recording
/// disabled is pure and allocation-light (no parent links are kept).
bool grad_enabled();
void set_grad_enabled(bool on);

/// RAII guard disabling gradient recording on the current thread.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Dense row-major tensor of 64-bit floats with reverse-mode autodiff.
///
/// A Tensor is a shared handle to a graph node. Operations between tensors
/// record backward closures when gradient mode is on and any input requires
/// grad; the graph is rebuilt on every forward pass (define-by-run).
/// Gradients accumulate additively across fan-out; call zero_grad() between
/// optimization steps.
class Tensor {
public:
    Tensor();  // undefined handle
    Tensor(std::vector<size_t> shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(std::vector<size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<size_t> shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<size_t>& shape() const;
    size_t rank() const;
    size_t size() const;

    std::span<const double> values() const;
    /// Mutable access to the raw values; meant for leaf initialization and
    /// optimizer updates, not for tensors living inside a recorded graph.
    std::span<double> values_mut();

    bool requires_grad() const;
    void set_requires_grad(bool on);
    /// Gradient buffer; empty span until a backward pass has populated it.
    std::span<const double> grad() const;
    void zero_grad();

    /// Value of a single-element tensor.
    double item() const;

    /// Deep copy detached from any graph (keeps requires_grad).
    Tensor clone() const;

    detail::TensorNode* node() const { return node_.get(); }
    const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::TensorNode> node_;

    friend Tensor make_op_result(std::vector<size_t> shape, std::vector<double> values,
                                 std::vector<Tensor> parents,
                                 std::function<void(detail::TensorNode&)> backward_fn,
                                 const char* op_name);
};

/// The recorded operations reachable from one output, in topological order
/// (every node's inputs precede it). Running backward visits each node
/// exactly once, in reverse order.
class ComputeGraph {
public:
    static ComputeGraph trace(const Tensor& output);

    size_t node_count() const { return order_.size(); }
    bool is_topologically_ordered() const;

    /// Seeds d(output)/d(output) = 1 and propagates to every node that
    /// requires grad. The output must be a single-element tensor.
    void run_backward();

private:
    std::vector<std::shared_ptr<detail::TensorNode>> order_;  // inputs before outputs
    std::shared_ptr<detail::TensorNode> output_;
};

/// Convenience: trace from `loss` (a scalar) and run the backward pass.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Operations. All validate shapes and throw std::invalid_argument naming the
// offending shapes. Inputs must be finite; `log` additionally requires
// strictly positive values.
// ---------------------------------------------------------------------------

enum class Activation { Relu, Softplus, Exp, Log };

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor recip(const Tensor& a);

/// out = w.x + b with w:[n_out x n_in], b:[n_out]. A rank-1 x of length n_in
/// yields [n_out]; a rank-2 x of shape [N x n_in] is mapped row-wise to
/// [N x n_out].
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);

/// Same-size cross-correlation with zero padding, stride 1, odd kernels.
/// 1D: x:[C_in x L], kernels:[C_out x C_in x K] -> [C_out x L].
/// 2D: x:[C_in x H x W], kernels:[C_out x C_in x Kh x Kw] -> [C_out x H x W].
Tensor conv_same(const Tensor& x, const Tensor& kernels, const Tensor& bias);

Tensor activation(Activation kind, const Tensor& x);
Tensor relu(const Tensor& x);
Tensor softplus(const Tensor& x);  // log(1 + e^x), stable branch form
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

/// Softmax over the trailing axis, max-shifted. Rank-1 input is one row.
Tensor softmax_rows(const Tensor& x);
/// log softmax over the trailing axis (x - logsumexp per row).
Tensor log_softmax_rows(const Tensor& x);
/// log sum exp over the trailing axis, max-shifted; drops the trailing axis
/// (rank-1 input produces a single-element tensor).
Tensor logsumexp_rows(const Tensor& x);

Tensor sum(const Tensor& x);   // -> [1]
Tensor mean(const Tensor& x);  // -> [1]

Tensor matmul(const Tensor& a, const Tensor& b);            // [m x k].[k x n]
Tensor matvec(const Tensor& a, std::span<const double> v);  // constant vector
Tensor transpose(const Tensor& a);

/// Row sums of a matrix: [R x C] -> [R].
Tensor rowsum(const Tensor& x);
/// out[i,j] = x[i,j] * s[i] with s:[R].
Tensor scale_rows(const Tensor& x, const Tensor& s);

/// Stack n same-shaped tensors into a leading axis: n x shape.
Tensor stack_channels(const std::vector<Tensor>& parts);

/// Gaussian kernel weights from precomputed squared distances:
/// out = exp(-d2 / (2 * exp(2 * log_lengthscale))), differentiable in the
/// (scalar) log-lengthscale. d2 holds constant squared distances.
Tensor gauss_kernel(std::span<const double> squared_dists, std::vector<size_t> shape,
                    const Tensor& log_lengthscale);

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar-valued f at x0. Throws if f is non-finite near x0.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x0,
                  double h = 1e-5);

namespace testing {
/// Fault-injection hook: multiplies the gradient flowing through relu.
/// Exists so negative-control tests (and `selftest --break gradcheck`) can
/// demonstrate that grad_check flags a corrupted backward rule. Leave at 1.
extern double relu_backward_scale;
}  // namespace testing

}  // namespace epiplace
