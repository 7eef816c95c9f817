#include "epiplace/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace epiplace {

namespace detail {

struct TensorNode {
    std::vector<size_t> shape;
    std::vector<double> values;
    std::vector<double> grad;  // sized lazily by ensure_grad()
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;  // empty for leaves
    const char* op_name = "leaf";

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

}  // namespace detail

using detail::TensorNode;

namespace {

thread_local bool g_grad_enabled = true;

size_t shape_product(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t e : shape) n *= e;
    return n;
}

std::string shape_str(const std::vector<size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
    throw std::invalid_argument(std::string(op) + ": " + detail);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        shape_error(op, "shape " + shape_str(a.shape()) + " does not match shape " +
                            shape_str(b.shape()));
}

void require_defined(const char* op, const Tensor& t) {
    if (!t.defined()) shape_error(op, "undefined tensor argument");
}

}  // namespace

double testing::relu_backward_scale = 1.0;

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor() = default;

Tensor::Tensor(std::vector<size_t> shape, std::vector<double> values, bool requires_grad) {
    if (shape_product(shape) != values.size())
        shape_error("Tensor", "shape " + shape_str(shape) + " implies " +
                                  std::to_string(shape_product(shape)) + " values, got " +
                                  std::to_string(values.size()));
    node_ = std::make_shared<TensorNode>();
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(std::vector<size_t> shape, bool requires_grad) {
    size_t n = shape_product(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(std::vector<size_t> shape, double value, bool requires_grad) {
    size_t n = shape_product(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor({1}, {value}, requires_grad);
}

const std::vector<size_t>& Tensor::shape() const { return node_->shape; }
size_t Tensor::rank() const { return node_->shape.size(); }
size_t Tensor::size() const { return node_->values.size(); }

std::span<const double> Tensor::values() const { return node_->values; }
std::span<double> Tensor::values_mut() { return node_->values; }

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool on) { node_->requires_grad = on; }

std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() { node_->grad.assign(node_->values.size(), 0.0); }

double Tensor::item() const {
    if (size() != 1)
        shape_error("item", "tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->values[0];
}

Tensor Tensor::clone() const {
    Tensor out(node_->shape, node_->values, node_->requires_grad);
    return out;
}

/// Central factory: when recording is on and any parent requires grad, the
/// result keeps parent links and the backward closure; otherwise it is a
/// detached constant.
Tensor make_op_result(std::vector<size_t> shape, std::vector<double> values,
                      std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backward_fn, const char* op_name) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->op_name = op_name;
    bool track = false;
    if (g_grad_enabled) {
        for (const Tensor& p : parents)
            if (p.node()->requires_grad) track = true;
    }
    if (track) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (Tensor& p : parents) node->parents.push_back(p.node_ptr());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// ComputeGraph
// ---------------------------------------------------------------------------

ComputeGraph ComputeGraph::trace(const Tensor& output) {
    ComputeGraph g;
    g.output_ = output.node_ptr();
    if (!g.output_) return g;

    // Iterative post-order DFS: parents land in the list before the node.
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    std::unordered_set<TensorNode*> on_list;
    std::vector<TensorNode*> raw_order;
    stack.emplace_back(g.output_.get(), 0);
    visited.insert(g.output_.get());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->parents.size()) {
            TensorNode* child = node->parents[next_child].get();
            ++next_child;
            if (visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            raw_order.push_back(node);
            stack.pop_back();
        }
    }
    // Re-attach ownership in order. All nodes except possibly the output are
    // reachable through parent shared_ptrs, so grab those; the output we own.
    std::unordered_set<TensorNode*> kept;
    g.order_.reserve(raw_order.size());
    auto keep = [&](const std::shared_ptr<TensorNode>& sp) {
        if (kept.insert(sp.get()).second) g.order_.push_back(sp);
    };
    for (TensorNode* n : raw_order) {
        if (n == g.output_.get()) {
            keep(g.output_);
            continue;
        }
        // find an owner among already-kept nodes' parents; the DFS order
        // guarantees some holder exists (any node that listed n as parent).
        // Simpler: search the whole raw graph for a shared_ptr to n.
        bool found = false;
        for (TensorNode* holder : raw_order) {
            for (const auto& sp : holder->parents) {
                if (sp.get() == n) {
                    keep(sp);
                    found = true;
                    break;
                }
            }
            if (found) break;
        }
        if (!found) keep(std::shared_ptr<TensorNode>(g.output_, n));  // aliasing ctor
    }
    return g;
}

bool ComputeGraph::is_topologically_ordered() const {
    std::unordered_set<const TensorNode*> seen;
    for (const auto& node : order_) {
        for (const auto& parent : node->parents)
            if (!seen.count(parent.get())) return false;
        seen.insert(node.get());
    }
    return true;
}

void ComputeGraph::run_backward() {
    if (!output_) throw std::invalid_argument("backward: undefined loss tensor");
    if (output_->values.size() != 1)
        throw std::invalid_argument("backward: loss has shape " + shape_str(output_->shape) +
                                    ", expected a scalar");
    output_->ensure_grad();
    output_->grad[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        TensorNode& node = **it;
        if (node.backward_fn && node.requires_grad) node.backward_fn(node);
    }
}

void backward(const Tensor& loss) {
    ComputeGraph g = ComputeGraph::trace(loss);
    g.run_backward();
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace {

// Accumulate helper: adds into a parent's grad buffer if it participates.
inline bool wants_grad(const std::shared_ptr<TensorNode>& p) { return p->requires_grad; }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_defined("add", a);
    require_defined("add", b);
    require_same_shape("add", a, b);
    std::vector<double> out(a.size());
    auto av = a.values(), bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_op_result(
        a.shape(), std::move(out), {a, b},
        [](TensorNode& self) {
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            if (wants_grad(pa)) {
                pa->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
            }
            if (wants_grad(pb)) {
                pb->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
            }
        },
        "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_defined("sub", a);
    require_defined("sub", b);
    require_same_shape("sub", a, b);
    std::vector<double> out(a.size());
    auto av = a.values(), bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return make_op_result(
        a.shape(), std::move(out), {a, b},
        [](TensorNode& self) {
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            if (wants_grad(pa)) {
                pa->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
            }
            if (wants_grad(pb)) {
                pb->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
            }
        },
        "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_defined("mul", a);
    require_defined("mul", b);
    require_same_shape("mul", a, b);
    std::vector<double> out(a.size());
    auto av = a.values(), bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_op_result(
        a.shape(), std::move(out), {a, b},
        [](TensorNode& self) {
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            if (wants_grad(pa)) {
                pa->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    pa->grad[i] += self.grad[i] * pb->values[i];
            }
            if (wants_grad(pb)) {
                pb->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    pb->grad[i] += self.grad[i] * pa->values[i];
            }
        },
        "mul");
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_defined("div", a);
    require_defined("div", b);
    require_same_shape("div", a, b);
    std::vector<double> out(a.size());
    auto av = a.values(), bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
    return make_op_result(
        a.shape(), std::move(out), {a, b},
        [](TensorNode& self) {
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            if (wants_grad(pa)) {
                pa->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    pa->grad[i] += self.grad[i] / pb->values[i];
            }
            if (wants_grad(pb)) {
                pb->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    pb->grad[i] -= self.grad[i] * pa->values[i] / (pb->values[i] * pb->values[i]);
            }
        },
        "div");
}

Tensor add_scalar(const Tensor& a, double c) {
    require_defined("add_scalar", a);
    std::vector<double> out(a.size());
    auto av = a.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
    return make_op_result(
        a.shape(), std::move(out), {a},
        [](TensorNode& self) {
            auto& pa = self.parents[0];
            if (!wants_grad(pa)) return;
            pa->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        },
        "add_scalar");
}

Tensor mul_scalar(const Tensor& a, double c) {
    require_defined("mul_scalar", a);
    std::vector<double> out(a.size());
    auto av = a.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    return make_op_result(
        a.shape(), std::move(out), {a},
        [c](TensorNode& self) {
            auto& pa = self.parents[0];
            if (!wants_grad(pa)) return;
            pa->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * c;
        },
        "mul_scalar");
}

Tensor recip(const Tensor& a) {
    require_defined("recip", a);
    std::vector<double> out(a.size());
    auto av = a.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / av[i];
    return make_op_result(
        a.shape(), std::move(out), {a},
        [](TensorNode& self) {
            auto& pa = self.parents[0];
            if (!wants_grad(pa)) return;
            pa->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                double v = pa->values[i];
                pa->grad[i] -= self.grad[i] / (v * v);
            }
        },
        "recip");
}

// ---------------------------------------------------------------------------
// dense / conv
// ---------------------------------------------------------------------------

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
    require_defined("dense", x);
    require_defined("dense", w);
    require_defined("dense", b);
    if (w.rank() != 2)
        shape_error("dense", "weight must be rank-2, got " + shape_str(w.shape()));
    size_t n_out = w.shape()[0], n_in = w.shape()[1];
    if (b.shape() != std::vector<size_t>{n_out})
        shape_error("dense", "bias shape " + shape_str(b.shape()) + " does not match weight shape " +
                                 shape_str(w.shape()));
    bool batched = x.rank() == 2;
    size_t rows = batched ? x.shape()[0] : 1;
    size_t x_in = batched ? x.shape()[1] : (x.rank() == 1 ? x.shape()[0] : 0);
    if (x_in != n_in)
        shape_error("dense", "weight shape " + shape_str(w.shape()) + " does not match input shape " +
                                 shape_str(x.shape()));

    std::vector<double> out(rows * n_out);
    auto xv = x.values(), wv = w.values(), bv = b.values();
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * n_in;
        double* or_ = out.data() + r * n_out;
        for (size_t i = 0; i < n_out; ++i) {
            const double* wi = wv.data() + i * n_in;
            double acc = bv[i];
            for (size_t j = 0; j < n_in; ++j) acc += wi[j] * xr[j];
            or_[i] = acc;
        }
    }
    std::vector<size_t> out_shape = batched ? std::vector<size_t>{rows, n_out}
                                            : std::vector<size_t>{n_out};
    return make_op_result(
        std::move(out_shape), std::move(out), {x, w, b},
        [rows, n_in, n_out](TensorNode& self) {
            auto& px = self.parents[0];
            auto& pw = self.parents[1];
            auto& pb = self.parents[2];
            if (wants_grad(px)) px->ensure_grad();
            if (wants_grad(pw)) pw->ensure_grad();
            if (wants_grad(pb)) pb->ensure_grad();
            for (size_t r = 0; r < rows; ++r) {
                const double* g = self.grad.data() + r * n_out;
                const double* xr = px->values.data() + r * n_in;
                for (size_t i = 0; i < n_out; ++i) {
                    double gi = g[i];
                    if (gi == 0.0) continue;
                    const double* wi = pw->values.data() + i * n_in;
                    if (wants_grad(px)) {
                        double* xg = px->grad.data() + r * n_in;
                        for (size_t j = 0; j < n_in; ++j) xg[j] += gi * wi[j];
                    }
                    if (wants_grad(pw)) {
                        double* wg = pw->grad.data() + i * n_in;
                        for (size_t j = 0; j < n_in; ++j) wg[j] += gi * xr[j];
                    }
                    if (wants_grad(pb)) pb->grad[i] += gi;
                }
            }
        },
        "dense");
}

namespace {

void conv_check_common(const Tensor& x, const Tensor& kernels, const Tensor& bias) {
    size_t c_out = kernels.shape()[0], c_in = kernels.shape()[1];
    if (x.shape()[0] != c_in)
        shape_error("conv_same", "input channels " + shape_str(x.shape()) +
                                     " do not match kernel shape " + shape_str(kernels.shape()));
    if (bias.shape() != std::vector<size_t>{c_out})
        shape_error("conv_same", "bias shape " + shape_str(bias.shape()) +
                                     " does not match kernel shape " + shape_str(kernels.shape()));
    for (size_t d = 2; d < kernels.rank(); ++d)
        if (kernels.shape()[d] % 2 == 0)
            shape_error("conv_same",
                        "kernel size must be odd, got " + shape_str(kernels.shape()));
}

}  // namespace

Tensor conv_same(const Tensor& x, const Tensor& kernels, const Tensor& bias) {
    require_defined("conv_same", x);
    require_defined("conv_same", kernels);
    require_defined("conv_same", bias);
    if (!((x.rank() == 2 && kernels.rank() == 3) || (x.rank() == 3 && kernels.rank() == 4)))
        shape_error("conv_same", "expected input " + shape_str(x.shape()) + " with kernels " +
                                     shape_str(kernels.shape()) +
                                     " to be [C_in x L]/[C_out x C_in x K] or "
                                     "[C_in x H x W]/[C_out x C_in x Kh x Kw]");
    conv_check_common(x, kernels, bias);

    size_t c_out = kernels.shape()[0], c_in = kernels.shape()[1];
    auto xv = x.values(), kv = kernels.values(), bv = bias.values();

    if (x.rank() == 2) {
        size_t len = x.shape()[1];
        size_t k = kernels.shape()[2];
        long radius = static_cast<long>(k / 2);
        std::vector<double> out(c_out * len);
        for (size_t co = 0; co < c_out; ++co) {
            double* op = out.data() + co * len;
            for (size_t p = 0; p < len; ++p) op[p] = bv[co];
            for (size_t ci = 0; ci < c_in; ++ci) {
                const double* xr = xv.data() + ci * len;
                const double* kr = kv.data() + (co * c_in + ci) * k;
                for (size_t t = 0; t < k; ++t) {
                    double kw = kr[t];
                    if (kw == 0.0) continue;
                    long off = static_cast<long>(t) - radius;
                    size_t lo = off < 0 ? static_cast<size_t>(-off) : 0;
                    size_t hi = off > 0 ? len - static_cast<size_t>(off) : len;
                    for (size_t p = lo; p < hi; ++p)
                        op[p] += kw * xr[static_cast<size_t>(static_cast<long>(p) + off)];
                }
            }
        }
        return make_op_result(
            {c_out, len}, std::move(out), {x, kernels, bias},
            [c_out, c_in, len, k, radius](TensorNode& self) {
                auto& px = self.parents[0];
                auto& pk = self.parents[1];
                auto& pb = self.parents[2];
                if (wants_grad(px)) px->ensure_grad();
                if (wants_grad(pk)) pk->ensure_grad();
                if (wants_grad(pb)) pb->ensure_grad();
                for (size_t co = 0; co < c_out; ++co) {
                    const double* g = self.grad.data() + co * len;
                    if (wants_grad(pb)) {
                        double acc = 0.0;
                        for (size_t p = 0; p < len; ++p) acc += g[p];
                        pb->grad[co] += acc;
                    }
                    for (size_t ci = 0; ci < c_in; ++ci) {
                        const double* xr = px->values.data() + ci * len;
                        const double* kr = pk->values.data() + (co * c_in + ci) * k;
                        double* xg = wants_grad(px) ? px->grad.data() + ci * len : nullptr;
                        double* kg = wants_grad(pk) ? pk->grad.data() + (co * c_in + ci) * k
                                                    : nullptr;
                        for (size_t t = 0; t < k; ++t) {
                            long off = static_cast<long>(t) - radius;
                            size_t lo = off < 0 ? static_cast<size_t>(-off) : 0;
                            size_t hi = off > 0 ? len - static_cast<size_t>(off) : len;
                            if (kg) {
                                double acc = 0.0;
                                for (size_t p = lo; p < hi; ++p)
                                    acc += g[p] * xr[static_cast<size_t>(static_cast<long>(p) + off)];
                                kg[t] += acc;
                            }
                            if (xg) {
                                double kw = kr[t];
                                if (kw != 0.0)
                                    for (size_t p = lo; p < hi; ++p)
                                        xg[static_cast<size_t>(static_cast<long>(p) + off)] +=
                                            g[p] * kw;
                            }
                        }
                    }
                }
            },
            "conv_same");
    }

    // 2D case.
    size_t h = x.shape()[1], w = x.shape()[2];
    size_t kh = kernels.shape()[2], kw_ = kernels.shape()[3];
    long rh = static_cast<long>(kh / 2), rw = static_cast<long>(kw_ / 2);
    std::vector<double> out(c_out * h * w);
    for (size_t co = 0; co < c_out; ++co) {
        double* op = out.data() + co * h * w;
        for (size_t p = 0; p < h * w; ++p) op[p] = bv[co];
        for (size_t ci = 0; ci < c_in; ++ci) {
            const double* xp = xv.data() + ci * h * w;
            const double* kp = kv.data() + ((co * c_in + ci) * kh) * kw_;
            for (size_t ti = 0; ti < kh; ++ti) {
                long oi = static_cast<long>(ti) - rh;
                for (size_t tj = 0; tj < kw_; ++tj) {
                    double kwv = kp[ti * kw_ + tj];
                    if (kwv == 0.0) continue;
                    long oj = static_cast<long>(tj) - rw;
                    size_t ilo = oi < 0 ? static_cast<size_t>(-oi) : 0;
                    size_t ihi = oi > 0 ? h - static_cast<size_t>(oi) : h;
                    size_t jlo = oj < 0 ? static_cast<size_t>(-oj) : 0;
                    size_t jhi = oj > 0 ? w - static_cast<size_t>(oj) : w;
                    for (size_t i = ilo; i < ihi; ++i) {
                        const double* xrow =
                            xp + static_cast<size_t>(static_cast<long>(i) + oi) * w;
                        double* orow = op + i * w;
                        for (size_t j = jlo; j < jhi; ++j)
                            orow[j] += kwv * xrow[static_cast<size_t>(static_cast<long>(j) + oj)];
                    }
                }
            }
        }
    }
    return make_op_result(
        {c_out, h, w}, std::move(out), {x, kernels, bias},
        [c_out, c_in, h, w, kh, kw_, rh, rw](TensorNode& self) {
            auto& px = self.parents[0];
            auto& pk = self.parents[1];
            auto& pb = self.parents[2];
            if (wants_grad(px)) px->ensure_grad();
            if (wants_grad(pk)) pk->ensure_grad();
            if (wants_grad(pb)) pb->ensure_grad();
            for (size_t co = 0; co < c_out; ++co) {
                const double* g = self.grad.data() + co * h * w;
                if (wants_grad(pb)) {
                    double acc = 0.0;
                    for (size_t p = 0; p < h * w; ++p) acc += g[p];
                    pb->grad[co] += acc;
                }
                for (size_t ci = 0; ci < c_in; ++ci) {
                    const double* xp = px->values.data() + ci * h * w;
                    const double* kp = pk->values.data() + ((co * c_in + ci) * kh) * kw_;
                    double* xg = wants_grad(px) ? px->grad.data() + ci * h * w : nullptr;
                    double* kg =
                        wants_grad(pk) ? pk->grad.data() + ((co * c_in + ci) * kh) * kw_ : nullptr;
                    for (size_t ti = 0; ti < kh; ++ti) {
                        long oi = static_cast<long>(ti) - rh;
                        for (size_t tj = 0; tj < kw_; ++tj) {
                            long oj = static_cast<long>(tj) - rw;
                            size_t ilo = oi < 0 ? static_cast<size_t>(-oi) : 0;
                            size_t ihi = oi > 0 ? h - static_cast<size_t>(oi) : h;
                            size_t jlo = oj < 0 ? static_cast<size_t>(-oj) : 0;
                            size_t jhi = oj > 0 ? w - static_cast<size_t>(oj) : w;
                            if (kg) {
                                double acc = 0.0;
                                for (size_t i = ilo; i < ihi; ++i) {
                                    const double* xrow =
                                        xp + static_cast<size_t>(static_cast<long>(i) + oi) * w;
                                    const double* grow = g + i * w;
                                    for (size_t j = jlo; j < jhi; ++j)
                                        acc += grow[j] *
                                               xrow[static_cast<size_t>(static_cast<long>(j) + oj)];
                                }
                                kg[ti * kw_ + tj] += acc;
                            }
                            if (xg) {
                                double kwv = kp[ti * kw_ + tj];
                                if (kwv == 0.0) continue;
                                for (size_t i = ilo; i < ihi; ++i) {
                                    double* xrow =
                                        xg + static_cast<size_t>(static_cast<long>(i) + oi) * w;
                                    const double* grow = g + i * w;
                                    for (size_t j = jlo; j < jhi; ++j)
                                        xrow[static_cast<size_t>(static_cast<long>(j) + oj)] +=
                                            grow[j] * kwv;
                                }
                            }
                        }
                    }
                }
            }
        },
        "conv_same");
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

Tensor relu(const Tensor& x) {
    require_defined("relu", x);
    std::vector<double> out(x.size());
    auto xv = x.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    return make_op_result(
        x.shape(), std::move(out), {x},
        [](TensorNode& self) {
            auto& px = self.parents[0];
            if (!wants_grad(px)) return;
            px->ensure_grad();
            double scale = testing::relu_backward_scale;
            for (size_t i = 0; i < self.grad.size(); ++i)
                if (px->values[i] > 0.0) px->grad[i] += scale * self.grad[i];
        },
        "relu");
}

Tensor softplus(const Tensor& x) {
    require_defined("softplus", x);
    std::vector<double> out(x.size());
    auto xv = x.values();
    for (size_t i = 0; i < out.size(); ++i) {
        double v = xv[i];
        // stable branch form: max(v, 0) + log1p(exp(-|v|))
        out[i] = (v > 0.0 ? v : 0.0) + std::log1p(std::exp(-std::abs(v)));
    }
    return make_op_result(
        x.shape(), std::move(out), {x},
        [](TensorNode& self) {
            auto& px = self.parents[0];
            if (!wants_grad(px)) return;
            px->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                double v = px->values[i];
                double sig = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                      : std::exp(v) / (1.0 + std::exp(v));
                px->grad[i] += self.grad[i] * sig;
            }
        },
        "softplus");
}

Tensor exp(const Tensor& x) {
    require_defined("exp", x);
    std::vector<double> out(x.size());
    auto xv = x.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xv[i]);
    return make_op_result(
        x.shape(), std::move(out), {x},
        [](TensorNode& self) {
            auto& px = self.parents[0];
            if (!wants_grad(px)) return;
            px->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                px->grad[i] += self.grad[i] * self.values[i];
        },
        "exp");
}

Tensor log(const Tensor& x) {
    require_defined("log", x);
    auto xv = x.values();
    for (size_t i = 0; i < xv.size(); ++i)
        if (!(xv[i] > 0.0))
            throw std::invalid_argument("log: non-positive value " + std::to_string(xv[i]) +
                                        " at index " + std::to_string(i));
    std::vector<double> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(xv[i]);
    return make_op_result(
        x.shape(), std::move(out), {x},
        [](TensorNode& self) {
            auto& px = self.parents[0];
            if (!wants_grad(px)) return;
            px->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                px->grad[i] += self.grad[i] / px->values[i];
        },
        "log");
}

Tensor activation(Activation kind, const Tensor& x) {
    switch (kind) {
        case Activation::Relu: return relu(x);
        case Activation::Softplus: return softplus(x);
        case Activation::Exp: return exp(x);
        case Activation::Log: return log(x);
    }
    throw std::invalid_argument("activation: unknown kind");
}

// ---------------------------------------------------------------------------
// Row-wise reductions (trailing axis)
// ---------------------------------------------------------------------------

namespace {

// Interpret any tensor of rank >= 1 as [rows x k] over the trailing axis.
void trailing_view(const char* op, const Tensor& x, size_t& rows, size_t& k) {
    if (x.rank() < 1) shape_error(op, "expected rank >= 1, got " + shape_str(x.shape()));
    k = x.shape().back();
    if (k == 0) shape_error(op, "trailing axis must be nonempty");
    rows = x.size() / k;
}

std::vector<size_t> drop_trailing(const std::vector<size_t>& shape) {
    if (shape.size() == 1) return {1};
    return std::vector<size_t>(shape.begin(), shape.end() - 1);
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
    require_defined("softmax_rows", x);
    size_t rows, k;
    trailing_view("softmax_rows", x, rows, k);
    std::vector<double> out(x.size());
    auto xv = x.values();
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * k;
        double* or_ = out.data() + r * k;
        double m = xr[0];
        for (size_t i = 1; i < k; ++i) m = std::max(m, xr[i]);
        double denom = 0.0;
        for (size_t i = 0; i < k; ++i) {
            or_[i] = std::exp(xr[i] - m);
            denom += or_[i];
        }
        for (size_t i = 0; i < k; ++i) or_[i] /= denom;
    }
    return make_op_result(
        x.shape(), std::move(out), {x},
        [rows, k](TensorNode& self) {
            auto& px = self.parents[0];
            if (!wants_grad(px)) return;
            px->ensure_grad();
            for (size_t r = 0; r < rows; ++r) {
                const double* s = self.values.data() + r * k;
                const double* g = self.grad.data() + r * k;
                double dot = 0.0;
                for (size_t i = 0; i < k; ++i) dot += g[i] * s[i];
                double* xg = px->grad.data() + r * k;
                for (size_t i = 0; i < k; ++i) xg[i] += s[i] * (g[i] - dot);
            }
        },
        "softmax_rows");
}

Tensor logsumexp_rows(const Tensor& x) {
    require_defined("logsumexp_rows", x);
    size_t rows, k;
    trailing_view("logsumexp_rows", x, rows, k);
    std::vector<double> out(rows);
    auto xv = x.values();
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * k;
        double m = xr[0];
        for (size_t i = 1; i < k; ++i) m = std::max(m, xr[i]);
        double acc = 0.0;
        for (size_t i = 0; i < k; ++i) acc += std::exp(xr[i] - m);
        out[r] = m + std::log(acc);
    }
    return make_op_result(
        drop_trailing(x.shape()), std::move(out), {x},
        [rows, k](TensorNode& self) {
            auto& px = self.parents[0];
            if (!wants_grad(px)) return;
            px->ensure_grad();
            for (size_t r = 0; r < rows; ++r) {
                const double* xr = px->values.data() + r * k;
                double lse = self.values[r];
                double g = self.grad[r];
                double* xg = px->grad.data() + r * k;
                for (size_t i = 0; i < k; ++i) xg[i] += g * std::exp(xr[i] - lse);
            }
        },
        "logsumexp_rows");
}

Tensor log_softmax_rows(const Tensor& x) {
    require_defined("log_softmax_rows", x);
    size_t rows, k;
    trailing_view("log_softmax_rows", x, rows, k);
    std::vector<double> out(x.size());
    auto xv = x.values();
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * k;
        double* or_ = out.data() + r * k;
        double m = xr[0];
        for (size_t i = 1; i < k; ++i) m = std::max(m, xr[i]);
        double acc = 0.0;
        for (size_t i = 0; i < k; ++i) acc += std::exp(xr[i] - m);
        double lse = m + std::log(acc);
        for (size_t i = 0; i < k; ++i) or_[i] = xr[i] - lse;
    }
    return make_op_result(
        x.shape(), std::move(out), {x},
        [rows, k](TensorNode& self) {
            auto& px = self.parents[0];
            if (!wants_grad(px)) return;
            px->ensure_grad();
            for (size_t r = 0; r < rows; ++r) {
                const double* ls = self.values.data() + r * k;
                const double* g = self.grad.data() + r * k;
                double gsum = 0.0;
                for (size_t i = 0; i < k; ++i) gsum += g[i];
                double* xg = px->grad.data() + r * k;
                for (size_t i = 0; i < k; ++i) xg[i] += g[i] - std::exp(ls[i]) * gsum;
            }
        },
        "log_softmax_rows");
}

// ---------------------------------------------------------------------------
// Reductions / linear algebra
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
    require_defined("sum", x);
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    return make_op_result(
        {1}, {acc}, {x},
        [](TensorNode& self) {
            auto& px = self.parents[0];
            if (!wants_grad(px)) return;
            px->ensure_grad();
            double g = self.grad[0];
            for (size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += g;
        },
        "sum");
}

Tensor mean(const Tensor& x) {
    require_defined("mean", x);
    if (x.size() == 0) shape_error("mean", "empty tensor");
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    double inv_n = 1.0 / static_cast<double>(x.size());
    return make_op_result(
        {1}, {acc * inv_n}, {x},
        [inv_n](TensorNode& self) {
            auto& px = self.parents[0];
            if (!wants_grad(px)) return;
            px->ensure_grad();
            double g = self.grad[0] * inv_n;
            for (size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += g;
        },
        "mean");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_defined("matmul", a);
    require_defined("matmul", b);
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        shape_error("matmul", "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                                  " do not conform");
    size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(m * n, 0.0);
    auto av = a.values(), bv = b.values();
    for (size_t i = 0; i < m; ++i) {
        const double* ar = av.data() + i * k;
        double* or_ = out.data() + i * n;
        for (size_t p = 0; p < k; ++p) {
            double apv = ar[p];
            if (apv == 0.0) continue;
            const double* br = bv.data() + p * n;
            for (size_t j = 0; j < n; ++j) or_[j] += apv * br[j];
        }
    }
    return make_op_result(
        {m, n}, std::move(out), {a, b},
        [m, k, n](TensorNode& self) {
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            if (wants_grad(pa)) {
                pa->ensure_grad();
                // dA = G . B^T
                for (size_t i = 0; i < m; ++i) {
                    const double* g = self.grad.data() + i * n;
                    double* ag = pa->grad.data() + i * k;
                    for (size_t p = 0; p < k; ++p) {
                        const double* br = pb->values.data() + p * n;
                        double acc = 0.0;
                        for (size_t j = 0; j < n; ++j) acc += g[j] * br[j];
                        ag[p] += acc;
                    }
                }
            }
            if (wants_grad(pb)) {
                pb->ensure_grad();
                // dB = A^T . G
                for (size_t i = 0; i < m; ++i) {
                    const double* ar = pa->values.data() + i * k;
                    const double* g = self.grad.data() + i * n;
                    for (size_t p = 0; p < k; ++p) {
                        double apv = ar[p];
                        if (apv == 0.0) continue;
                        double* bg = pb->grad.data() + p * n;
                        for (size_t j = 0; j < n; ++j) bg[j] += apv * g[j];
                    }
                }
            }
        },
        "matmul");
}

Tensor matvec(const Tensor& a, std::span<const double> v) {
    require_defined("matvec", a);
    if (a.rank() != 2 || a.shape()[1] != v.size())
        shape_error("matvec", "shape " + shape_str(a.shape()) + " does not match vector length " +
                                  std::to_string(v.size()));
    size_t m = a.shape()[0], k = a.shape()[1];
    std::vector<double> out(m, 0.0);
    auto av = a.values();
    for (size_t i = 0; i < m; ++i) {
        const double* ar = av.data() + i * k;
        double acc = 0.0;
        for (size_t j = 0; j < k; ++j) acc += ar[j] * v[j];
        out[i] = acc;
    }
    std::vector<double> v_copy(v.begin(), v.end());
    return make_op_result(
        {m}, std::move(out), {a},
        [m, k, v_copy = std::move(v_copy)](TensorNode& self) {
            auto& pa = self.parents[0];
            if (!wants_grad(pa)) return;
            pa->ensure_grad();
            for (size_t i = 0; i < m; ++i) {
                double g = self.grad[i];
                if (g == 0.0) continue;
                double* ag = pa->grad.data() + i * k;
                for (size_t j = 0; j < k; ++j) ag[j] += g * v_copy[j];
            }
        },
        "matvec");
}

Tensor transpose(const Tensor& a) {
    require_defined("transpose", a);
    if (a.rank() != 2)
        shape_error("transpose", "expected rank-2, got " + shape_str(a.shape()));
    size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(m * n);
    auto av = a.values();
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
    return make_op_result(
        {n, m}, std::move(out), {a},
        [m, n](TensorNode& self) {
            auto& pa = self.parents[0];
            if (!wants_grad(pa)) return;
            pa->ensure_grad();
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < n; ++j) pa->grad[i * n + j] += self.grad[j * m + i];
        },
        "transpose");
}

Tensor rowsum(const Tensor& x) {
    require_defined("rowsum", x);
    if (x.rank() != 2) shape_error("rowsum", "expected rank-2, got " + shape_str(x.shape()));
    size_t r = x.shape()[0], c = x.shape()[1];
    std::vector<double> out(r, 0.0);
    auto xv = x.values();
    for (size_t i = 0; i < r; ++i) {
        const double* xr = xv.data() + i * c;
        double acc = 0.0;
        for (size_t j = 0; j < c; ++j) acc += xr[j];
        out[i] = acc;
    }
    return make_op_result(
        {r}, std::move(out), {x},
        [r, c](TensorNode& self) {
            auto& px = self.parents[0];
            if (!wants_grad(px)) return;
            px->ensure_grad();
            for (size_t i = 0; i < r; ++i) {
                double g = self.grad[i];
                double* xg = px->grad.data() + i * c;
                for (size_t j = 0; j < c; ++j) xg[j] += g;
            }
        },
        "rowsum");
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
    require_defined("scale_rows", x);
    require_defined("scale_rows", s);
    if (x.rank() != 2 || s.rank() != 1 || s.shape()[0] != x.shape()[0])
        shape_error("scale_rows", "shapes " + shape_str(x.shape()) + " and " +
                                      shape_str(s.shape()) + " do not conform");
    size_t r = x.shape()[0], c = x.shape()[1];
    std::vector<double> out(r * c);
    auto xv = x.values(), sv = s.values();
    for (size_t i = 0; i < r; ++i) {
        const double* xr = xv.data() + i * c;
        double* or_ = out.data() + i * c;
        for (size_t j = 0; j < c; ++j) or_[j] = xr[j] * sv[i];
    }
    return make_op_result(
        {r, c}, std::move(out), {x, s},
        [r, c](TensorNode& self) {
            auto& px = self.parents[0];
            auto& ps = self.parents[1];
            if (wants_grad(px)) {
                px->ensure_grad();
                for (size_t i = 0; i < r; ++i) {
                    double sv = ps->values[i];
                    const double* g = self.grad.data() + i * c;
                    double* xg = px->grad.data() + i * c;
                    for (size_t j = 0; j < c; ++j) xg[j] += g[j] * sv;
                }
            }
            if (wants_grad(ps)) {
                ps->ensure_grad();
                for (size_t i = 0; i < r; ++i) {
                    const double* g = self.grad.data() + i * c;
                    const double* xr = px->values.data() + i * c;
                    double acc = 0.0;
                    for (size_t j = 0; j < c; ++j) acc += g[j] * xr[j];
                    ps->grad[i] += acc;
                }
            }
        },
        "scale_rows");
}

Tensor stack_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("stack_channels: no inputs");
    for (const Tensor& p : parts) {
        require_defined("stack_channels", p);
        if (p.shape() != parts[0].shape())
            shape_error("stack_channels", "mismatched part shapes " + shape_str(parts[0].shape()) +
                                              " vs " + shape_str(p.shape()));
    }
    size_t per = parts[0].size();
    std::vector<size_t> out_shape;
    out_shape.push_back(parts.size());
    for (size_t e : parts[0].shape()) out_shape.push_back(e);
    std::vector<double> out(parts.size() * per);
    for (size_t c = 0; c < parts.size(); ++c) {
        auto pv = parts[c].values();
        std::copy(pv.begin(), pv.end(), out.begin() + static_cast<long>(c * per));
    }
    return make_op_result(
        std::move(out_shape), std::move(out), parts,
        [per](TensorNode& self) {
            for (size_t c = 0; c < self.parents.size(); ++c) {
                auto& p = self.parents[c];
                if (!wants_grad(p)) continue;
                p->ensure_grad();
                const double* g = self.grad.data() + c * per;
                for (size_t i = 0; i < per; ++i) p->grad[i] += g[i];
            }
        },
        "stack_channels");
}

Tensor gauss_kernel(std::span<const double> squared_dists, std::vector<size_t> shape,
                    const Tensor& log_lengthscale) {
    require_defined("gauss_kernel", log_lengthscale);
    if (log_lengthscale.size() != 1)
        shape_error("gauss_kernel", "log lengthscale must be a scalar, got " +
                                        shape_str(log_lengthscale.shape()));
    if (shape_product(shape) != squared_dists.size())
        shape_error("gauss_kernel", "shape " + shape_str(shape) + " does not match " +
                                        std::to_string(squared_dists.size()) + " distances");
    double t = log_lengthscale.item();
    double inv_two_ls2 = 0.5 * std::exp(-2.0 * t);
    std::vector<double> out(squared_dists.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(-squared_dists[i] * inv_two_ls2);
    std::vector<double> d2_copy(squared_dists.begin(), squared_dists.end());
    return make_op_result(
        std::move(shape), std::move(out), {log_lengthscale},
        [inv_two_ls2, d2_copy = std::move(d2_copy)](TensorNode& self) {
            auto& pt = self.parents[0];
            if (!wants_grad(pt)) return;
            pt->ensure_grad();
            // d/dt exp(-d2/2 * e^{-2t}) = w * d2 * e^{-2t}
            double acc = 0.0;
            for (size_t i = 0; i < self.grad.size(); ++i)
                acc += self.grad[i] * self.values[i] * d2_copy[i] * (2.0 * inv_two_ls2);
            pt->grad[0] += acc;
        },
        "gauss_kernel");
}

// ---------------------------------------------------------------------------
// grad_check
// ---------------------------------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x0, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
    Tensor x = x0.clone();
    x.set_requires_grad(true);
    x.zero_grad();
    Tensor loss;
    {
        set_grad_enabled(true);
        loss = f(x);
    }
    if (loss.size() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
    if (!std::isfinite(loss.item()))
        throw std::invalid_argument("grad_check: f is non-finite at x0");
    backward(loss);
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    if (analytic.empty()) analytic.assign(x.size(), 0.0);

    NoGradGuard guard;
    Tensor probe = x0.clone();
    probe.set_requires_grad(false);
    double max_err = 0.0;
    for (size_t i = 0; i < probe.size(); ++i) {
        double orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        double up = f(probe).item();
        probe.values_mut()[i] = orig - h;
        double down = f(probe).item();
        probe.values_mut()[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down))
            throw std::invalid_argument("grad_check: f is non-finite near x0");
        double numeric = (up - down) / (2.0 * h);
        double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace epiplace
