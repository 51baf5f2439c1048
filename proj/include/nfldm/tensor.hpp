#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "rng.hpp"

namespace nfldm {

// Reverse-mode autodiff over dense f32 tensors. A Tensor is a value-semantic
// handle onto a graph node; ops append nodes, backward() walks the graph once.
// Reductions accumulate in double so finite-difference checks stay tight.

inline bool& grad_mode() {
    thread_local bool on = true;
    return on;
}

// Scoped "no graph" switch for sampling / evaluation passes.
struct NoGrad {
    bool prev;
    NoGrad() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGrad() { grad_mode() = prev; }
};

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
    std::vector<int> shape;
    std::vector<float> val;
    std::vector<float> grad;
    bool needs_grad = false; // participates in differentiation
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> back;
    const char* op = "leaf";

    size_t numel() const { return val.size(); }
    void ensure_grad() {
        if (grad.size() != val.size()) grad.assign(val.size(), 0.f);
    }
};

inline size_t shape_numel(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) {
        if (d < 0) throw std::invalid_argument("tensor: negative dim");
        n *= static_cast<size_t>(d);
    }
    return n;
}

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

struct Tensor {
    NodePtr n;

    Tensor() = default;
    explicit Tensor(NodePtr node) : n(std::move(node)) {}

    static Tensor zeros(std::vector<int> shape) {
        auto node = std::make_shared<TensorNode>();
        node->val.assign(shape_numel(shape), 0.f);
        node->shape = std::move(shape);
        return Tensor(node);
    }

    static Tensor full(std::vector<int> shape, float v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.n->val.begin(), t.n->val.end(), v);
        return t;
    }

    static Tensor scalar(float v) { return full({}, v); }

    static Tensor from_data(std::vector<int> shape, std::vector<float> data) {
        if (shape_numel(shape) != data.size())
            throw std::invalid_argument("tensor: data size does not match shape " + shape_str(shape));
        auto node = std::make_shared<TensorNode>();
        node->shape = std::move(shape);
        node->val = std::move(data);
        return Tensor(node);
    }

    static Tensor randn(std::vector<int> shape, Rng& rng, float stdev = 1.f) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.n->val) v = rng.normal_f() * stdev;
        return t;
    }

    static Tensor uniform(std::vector<int> shape, Rng& rng, float a, float b) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.n->val) v = rng.uniform_f(a, b);
        return t;
    }

    bool defined() const { return static_cast<bool>(n); }
    const std::vector<int>& shape() const { return n->shape; }
    size_t numel() const { return n->numel(); }
    std::vector<float>& data() { return n->val; }
    const std::vector<float>& data() const { return n->val; }
    std::vector<float>& grad() { n->ensure_grad(); return n->grad; }

    Tensor& set_requires_grad(bool b) { n->needs_grad = b; return *this; }
    bool requires_grad() const { return n->needs_grad; }

    float item() const {
        if (numel() != 1) throw std::invalid_argument("item(): tensor has more than one element");
        return n->val[0];
    }
};

namespace detail {

inline Tensor make_op(std::vector<int> shape, std::vector<NodePtr> parents, const char* name) {
    auto node = std::make_shared<TensorNode>();
    node->val.assign(shape_numel(shape), 0.f);
    node->shape = std::move(shape);
    node->op = name;
    bool need = false;
    if (grad_mode())
        for (const auto& p : parents)
            if (p->needs_grad) { need = true; break; }
    node->needs_grad = need;
    if (need) node->parents = std::move(parents);
    return Tensor(node);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

} // namespace detail

// Differentiates a scalar root. Gradients of every node reachable from root are
// reset first, so leaf .grad() reflects exactly this call.
inline void backward(const Tensor& root) {
    if (root.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.push_back({root.n.get(), 0});
    seen.insert(root.n.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode* p = node->parents[idx++].get();
            if (p->needs_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (TensorNode* nd : order) nd->grad.assign(nd->val.size(), 0.f);
    root.n->grad[0] = 1.f;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->back) (*it)->back(**it);
}

// Zero the given leaves, then backprop from root. Leaves that do not
// participate in the graph keep their zero gradient.
inline void forward_backward(const Tensor& root, const std::vector<Tensor>& leaves) {
    for (const Tensor& l : leaves) {
        l.n->ensure_grad();
        std::fill(l.n->grad.begin(), l.n->grad.end(), 0.f);
    }
    backward(root);
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace detail {

template <class F, class DF>
Tensor unary_op(const Tensor& x, const char* name, F f, DF dfdx) {
    Tensor y = make_op(x.shape(), {x.n}, name);
    const float* xv = x.data().data();
    float* yv = y.data().data();
    size_t n = x.numel();
    for (size_t i = 0; i < n; ++i) yv[i] = f(xv[i]);
    if (y.requires_grad()) {
        TensorNode* xp = x.n.get();
        y.n->back = [xp, dfdx](TensorNode& self) {
            xp->ensure_grad();
            for (size_t i = 0; i < self.val.size(); ++i)
                xp->grad[i] += self.grad[i] * dfdx(xp->val[i], self.val[i]);
        };
    }
    return y;
}

} // namespace detail

inline Tensor neg(const Tensor& x) {
    return detail::unary_op(x, "neg", [](float v) { return -v; },
                            [](float, float) { return -1.f; });
}

inline Tensor exp_(const Tensor& x) {
    return detail::unary_op(x, "exp", [](float v) { return std::exp(v); },
                            [](float, float y) { return y; });
}

inline Tensor log_(const Tensor& x) {
    return detail::unary_op(x, "log", [](float v) { return std::log(v); },
                            [](float v, float) { return 1.f / v; });
}

inline Tensor softplus(const Tensor& x) {
    return detail::unary_op(
        x, "softplus",
        [](float v) {
            if (v > 20.f) return v;
            if (v < -20.f) return std::exp(v);
            return std::log1p(std::exp(v));
        },
        [](float v, float) { return 1.f / (1.f + std::exp(-v)); });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary_op(x, "sigmoid",
                            [](float v) { return 1.f / (1.f + std::exp(-v)); },
                            [](float, float y) { return y * (1.f - y); });
}

inline Tensor silu(const Tensor& x) {
    return detail::unary_op(
        x, "silu",
        [](float v) { return v / (1.f + std::exp(-v)); },
        [](float v, float) {
            float s = 1.f / (1.f + std::exp(-v));
            return s * (1.f + v * (1.f - s));
        });
}

inline Tensor relu(const Tensor& x) {
    return detail::unary_op(x, "relu", [](float v) { return v > 0.f ? v : 0.f; },
                            [](float v, float) { return v > 0.f ? 1.f : 0.f; });
}

inline Tensor abs_(const Tensor& x) {
    return detail::unary_op(x, "abs", [](float v) { return std::abs(v); },
                            [](float v, float) { return v > 0.f ? 1.f : (v < 0.f ? -1.f : 0.f); });
}

inline Tensor clampf(const Tensor& x, float lo, float hi) {
    return detail::unary_op(
        x, "clamp",
        [lo, hi](float v) { return v < lo ? lo : (v > hi ? hi : v); },
        [lo, hi](float v, float) { return (v > lo && v < hi) ? 1.f : 0.f; });
}

inline Tensor add_s(const Tensor& x, float c) {
    return detail::unary_op(x, "add_s", [c](float v) { return v + c; },
                            [](float, float) { return 1.f; });
}

inline Tensor mul_s(const Tensor& x, float c) {
    return detail::unary_op(x, "mul_s", [c](float v) { return v * c; },
                            [c](float, float) { return c; });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor y = detail::make_op(a.shape(), {a.n, b.n}, "add");
    size_t n = y.numel();
    for (size_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] + b.data()[i];
    if (y.requires_grad()) {
        TensorNode *ap = a.n.get(), *bp = b.n.get();
        y.n->back = [ap, bp](TensorNode& self) {
            ap->ensure_grad();
            bp->ensure_grad();
            for (size_t i = 0; i < self.val.size(); ++i) {
                ap->grad[i] += self.grad[i];
                bp->grad[i] += self.grad[i];
            }
        };
    }
    return y;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor y = detail::make_op(a.shape(), {a.n, b.n}, "sub");
    size_t n = y.numel();
    for (size_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] - b.data()[i];
    if (y.requires_grad()) {
        TensorNode *ap = a.n.get(), *bp = b.n.get();
        y.n->back = [ap, bp](TensorNode& self) {
            ap->ensure_grad();
            bp->ensure_grad();
            for (size_t i = 0; i < self.val.size(); ++i) {
                ap->grad[i] += self.grad[i];
                bp->grad[i] -= self.grad[i];
            }
        };
    }
    return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor y = detail::make_op(a.shape(), {a.n, b.n}, "mul");
    size_t n = y.numel();
    for (size_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] * b.data()[i];
    if (y.requires_grad()) {
        TensorNode *ap = a.n.get(), *bp = b.n.get();
        y.n->back = [ap, bp](TensorNode& self) {
            ap->ensure_grad();
            bp->ensure_grad();
            for (size_t i = 0; i < self.val.size(); ++i) {
                ap->grad[i] += self.grad[i] * bp->val[i];
                bp->grad[i] += self.grad[i] * ap->val[i];
            }
        };
    }
    return y;
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "divide");
    Tensor y = detail::make_op(a.shape(), {a.n, b.n}, "divide");
    size_t n = y.numel();
    for (size_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] / b.data()[i];
    if (y.requires_grad()) {
        TensorNode *ap = a.n.get(), *bp = b.n.get();
        y.n->back = [ap, bp](TensorNode& self) {
            ap->ensure_grad();
            bp->ensure_grad();
            for (size_t i = 0; i < self.val.size(); ++i) {
                float inv = 1.f / bp->val[i];
                ap->grad[i] += self.grad[i] * inv;
                bp->grad[i] -= self.grad[i] * self.val[i] * inv;
            }
        };
    }
    return y;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, float s) { return mul_s(a, s); }
inline Tensor operator*(float s, const Tensor& a) { return mul_s(a, s); }
inline Tensor operator+(const Tensor& a, float s) { return add_s(a, s); }

// Constant copy; gradients stop here.
inline Tensor detach(const Tensor& x) {
    auto node = std::make_shared<TensorNode>();
    node->shape = x.shape();
    node->val = x.data();
    node->op = "detach";
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// reductions / losses
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
    Tensor y = detail::make_op({}, {x.n}, "sum");
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    y.data()[0] = static_cast<float>(acc);
    if (y.requires_grad()) {
        TensorNode* xp = x.n.get();
        y.n->back = [xp](TensorNode& self) {
            xp->ensure_grad();
            float g = self.grad[0];
            for (auto& gv : xp->grad) gv += g;
        };
    }
    return y;
}

inline Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw std::invalid_argument("mean: empty tensor");
    Tensor y = detail::make_op({}, {x.n}, "mean");
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    y.data()[0] = static_cast<float>(acc / static_cast<double>(x.numel()));
    if (y.requires_grad()) {
        TensorNode* xp = x.n.get();
        float inv = 1.f / static_cast<float>(x.numel());
        y.n->back = [xp, inv](TensorNode& self) {
            xp->ensure_grad();
            float g = self.grad[0] * inv;
            for (auto& gv : xp->grad) gv += g;
        };
    }
    return y;
}

// [R, S] -> [R], sum over the last axis
inline Tensor sum_last(const Tensor& x) {
    if (x.shape().size() != 2) throw std::invalid_argument("sum_last: expects [R,S]");
    int r = x.shape()[0], s = x.shape()[1];
    Tensor y = detail::make_op({r}, {x.n}, "sum_last");
    for (int i = 0; i < r; ++i) {
        double acc = 0.0;
        for (int j = 0; j < s; ++j) acc += x.data()[static_cast<size_t>(i) * s + j];
        y.data()[i] = static_cast<float>(acc);
    }
    if (y.requires_grad()) {
        TensorNode* xp = x.n.get();
        y.n->back = [xp, r, s](TensorNode& self) {
            xp->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < s; ++j)
                    xp->grad[static_cast<size_t>(i) * s + j] += self.grad[i];
        };
    }
    return y;
}

// [C, H, W] -> [C], mean over the spatial extent
inline Tensor mean_spatial(const Tensor& x) {
    if (x.shape().size() != 3) throw std::invalid_argument("mean_spatial: expects [C,H,W]");
    int c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
    Tensor y = detail::make_op({c}, {x.n}, "mean_spatial");
    for (int i = 0; i < c; ++i) {
        double acc = 0.0;
        for (int j = 0; j < hw; ++j) acc += x.data()[static_cast<size_t>(i) * hw + j];
        y.data()[i] = static_cast<float>(acc / hw);
    }
    if (y.requires_grad()) {
        TensorNode* xp = x.n.get();
        y.n->back = [xp, c, hw](TensorNode& self) {
            xp->ensure_grad();
            for (int i = 0; i < c; ++i) {
                float g = self.grad[i] / hw;
                for (int j = 0; j < hw; ++j) xp->grad[static_cast<size_t>(i) * hw + j] += g;
            }
        };
    }
    return y;
}

inline Tensor mse_loss(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mse_loss");
    Tensor y = detail::make_op({}, {a.n, b.n}, "mse_loss");
    double acc = 0.0;
    size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) {
        double d = static_cast<double>(a.data()[i]) - b.data()[i];
        acc += d * d;
    }
    y.data()[0] = static_cast<float>(acc / static_cast<double>(n));
    if (y.requires_grad()) {
        TensorNode *ap = a.n.get(), *bp = b.n.get();
        y.n->back = [ap, bp, n](TensorNode& self) {
            ap->ensure_grad();
            bp->ensure_grad();
            float s = self.grad[0] * 2.f / static_cast<float>(n);
            for (size_t i = 0; i < n; ++i) {
                float d = (ap->val[i] - bp->val[i]) * s;
                ap->grad[i] += d;
                bp->grad[i] -= d;
            }
        };
    }
    return y;
}

inline Tensor l1_loss(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "l1_loss");
    Tensor y = detail::make_op({}, {a.n, b.n}, "l1_loss");
    double acc = 0.0;
    size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) acc += std::abs(static_cast<double>(a.data()[i]) - b.data()[i]);
    y.data()[0] = static_cast<float>(acc / static_cast<double>(n));
    if (y.requires_grad()) {
        TensorNode *ap = a.n.get(), *bp = b.n.get();
        y.n->back = [ap, bp, n](TensorNode& self) {
            ap->ensure_grad();
            bp->ensure_grad();
            float s = self.grad[0] / static_cast<float>(n);
            for (size_t i = 0; i < n; ++i) {
                float d = ap->val[i] - bp->val[i];
                float sg = d > 0.f ? s : (d < 0.f ? -s : 0.f);
                ap->grad[i] += sg;
                bp->grad[i] -= sg;
            }
        };
    }
    return y;
}

// MSE over elements where mask != 0; 0 if the mask is empty.
inline Tensor masked_mse(const Tensor& a, const Tensor& b, const std::vector<uint8_t>& mask) {
    detail::check_same_shape(a, b, "masked_mse");
    if (mask.size() != a.numel()) throw std::invalid_argument("masked_mse: mask size mismatch");
    size_t n_valid = 0;
    for (uint8_t m : mask) n_valid += m ? 1 : 0;
    Tensor y = detail::make_op({}, {a.n, b.n}, "masked_mse");
    double acc = 0.0;
    size_t n = a.numel();
    for (size_t i = 0; i < n; ++i)
        if (mask[i]) {
            double d = static_cast<double>(a.data()[i]) - b.data()[i];
            acc += d * d;
        }
    y.data()[0] = n_valid ? static_cast<float>(acc / static_cast<double>(n_valid)) : 0.f;
    if (y.requires_grad() && n_valid) {
        TensorNode *ap = a.n.get(), *bp = b.n.get();
        auto m = mask;
        y.n->back = [ap, bp, m, n_valid](TensorNode& self) {
            ap->ensure_grad();
            bp->ensure_grad();
            float s = self.grad[0] * 2.f / static_cast<float>(n_valid);
            for (size_t i = 0; i < m.size(); ++i)
                if (m[i]) {
                    float d = (ap->val[i] - bp->val[i]) * s;
                    ap->grad[i] += d;
                    bp->grad[i] -= d;
                }
        };
    }
    return y;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw std::invalid_argument("matmul: need [m,k]x[k,n], got " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor y = detail::make_op({m, n}, {a.n, b.n}, "matmul");
    const float* av = a.data().data();
    const float* bv = b.data().data();
    float* yv = y.data().data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int t = 0; t < k; ++t) acc += static_cast<double>(av[i * k + t]) * bv[t * n + j];
            yv[i * n + j] = static_cast<float>(acc);
        }
    if (y.requires_grad()) {
        TensorNode *ap = a.n.get(), *bp = b.n.get();
        y.n->back = [ap, bp, m, k, n](TensorNode& self) {
            ap->ensure_grad();
            bp->ensure_grad();
            // dA = dY B^T ; dB = A^T dY
            for (int i = 0; i < m; ++i)
                for (int t = 0; t < k; ++t) {
                    double acc = 0.0;
                    for (int j = 0; j < n; ++j)
                        acc += static_cast<double>(self.grad[i * n + j]) * bp->val[t * n + j];
                    ap->grad[i * k + t] += static_cast<float>(acc);
                }
            for (int t = 0; t < k; ++t)
                for (int j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < m; ++i)
                        acc += static_cast<double>(ap->val[i * k + t]) * self.grad[i * n + j];
                    bp->grad[t * n + j] += static_cast<float>(acc);
                }
        };
    }
    return y;
}

inline Tensor transpose2d(const Tensor& x) {
    if (x.shape().size() != 2) throw std::invalid_argument("transpose2d: expects [m,n]");
    int m = x.shape()[0], n = x.shape()[1];
    Tensor y = detail::make_op({n, m}, {x.n}, "transpose2d");
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) y.data()[static_cast<size_t>(j) * m + i] = x.data()[static_cast<size_t>(i) * n + j];
    if (y.requires_grad()) {
        TensorNode* xp = x.n.get();
        y.n->back = [xp, m, n](TensorNode& self) {
            xp->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    xp->grad[static_cast<size_t>(i) * n + j] += self.grad[static_cast<size_t>(j) * m + i];
        };
    }
    return y;
}

// y = x W^T + b, with W stored [out, in]; x is [in] or [B, in].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    bool vec = x.shape().size() == 1;
    if (w.shape().size() != 2) throw std::invalid_argument("linear: W must be [out,in]");
    int in = w.shape()[1], out = w.shape()[0];
    int batch = vec ? 1 : x.shape()[0];
    if ((vec && x.shape()[0] != in) || (!vec && (x.shape().size() != 2 || x.shape()[1] != in)))
        throw std::invalid_argument("linear: x " + shape_str(x.shape()) + " vs W " + shape_str(w.shape()));
    bool has_b = b.defined();
    if (has_b && (b.shape().size() != 1 || b.shape()[0] != out))
        throw std::invalid_argument("linear: bias must be [out]");

    std::vector<NodePtr> parents{x.n, w.n};
    if (has_b) parents.push_back(b.n);
    Tensor y = detail::make_op(vec ? std::vector<int>{out} : std::vector<int>{batch, out},
                               std::move(parents), "linear");
    const float* xv = x.data().data();
    const float* wv = w.data().data();
    float* yv = y.data().data();
    for (int i = 0; i < batch; ++i)
        for (int o = 0; o < out; ++o) {
            double acc = has_b ? static_cast<double>(b.data()[o]) : 0.0;
            for (int t = 0; t < in; ++t) acc += static_cast<double>(xv[i * in + t]) * wv[o * in + t];
            yv[i * out + o] = static_cast<float>(acc);
        }
    if (y.requires_grad()) {
        TensorNode* xp = x.n.get();
        TensorNode* wp = w.n.get();
        TensorNode* bp = has_b ? b.n.get() : nullptr;
        y.n->back = [xp, wp, bp, batch, in, out](TensorNode& self) {
            xp->ensure_grad();
            wp->ensure_grad();
            if (bp) bp->ensure_grad();
            for (int i = 0; i < batch; ++i)
                for (int o = 0; o < out; ++o) {
                    float g = self.grad[i * out + o];
                    if (g == 0.f) continue;
                    for (int t = 0; t < in; ++t) {
                        xp->grad[i * in + t] += g * wp->val[o * in + t];
                        wp->grad[o * in + t] += g * xp->val[i * in + t];
                    }
                    if (bp) bp->grad[o] += g;
                }
        };
    }
    return y;
}

inline Tensor linear(const Tensor& x, const Tensor& w) { return linear(x, w, Tensor{}); }

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, std::vector<int> shape) {
    if (shape_numel(shape) != x.numel())
        throw std::invalid_argument("reshape: numel mismatch " + shape_str(x.shape()) + " -> " + shape_str(shape));
    Tensor y = detail::make_op(std::move(shape), {x.n}, "reshape");
    y.data() = x.data();
    if (y.requires_grad()) {
        TensorNode* xp = x.n.get();
        y.n->back = [xp](TensorNode& self) {
            xp->ensure_grad();
            for (size_t i = 0; i < self.val.size(); ++i) xp->grad[i] += self.grad[i];
        };
    }
    return y;
}

inline Tensor concat_dim0(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_dim0: empty list");
    std::vector<int> shape = parts[0].shape();
    if (shape.empty()) throw std::invalid_argument("concat_dim0: scalars not supported");
    size_t tail = 1;
    for (size_t i = 1; i < shape.size(); ++i) tail *= static_cast<size_t>(shape[i]);
    int total = 0;
    std::vector<NodePtr> parents;
    for (const auto& p : parts) {
        if (p.shape().size() != shape.size())
            throw std::invalid_argument("concat_dim0: rank mismatch");
        for (size_t i = 1; i < shape.size(); ++i)
            if (p.shape()[i] != shape[i]) throw std::invalid_argument("concat_dim0: trailing dims differ");
        total += p.shape()[0];
        parents.push_back(p.n);
    }
    shape[0] = total;
    Tensor y = detail::make_op(shape, parents, "concat_dim0");
    size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), y.data().begin() + off);
        off += p.numel();
    }
    if (y.requires_grad()) {
        std::vector<TensorNode*> ps;
        for (const auto& p : parts) ps.push_back(p.n.get());
        y.n->back = [ps](TensorNode& self) {
            size_t off = 0;
            for (TensorNode* p : ps) {
                p->ensure_grad();
                for (size_t i = 0; i < p->val.size(); ++i) p->grad[i] += self.grad[off + i];
                off += p->val.size();
            }
        };
    }
    return y;
}

inline Tensor slice_dim0(const Tensor& x, int a, int b) {
    if (x.shape().empty() || a < 0 || b > x.shape()[0] || a >= b)
        throw std::invalid_argument("slice_dim0: bad range");
    std::vector<int> shape = x.shape();
    size_t tail = 1;
    for (size_t i = 1; i < shape.size(); ++i) tail *= static_cast<size_t>(shape[i]);
    shape[0] = b - a;
    Tensor y = detail::make_op(shape, {x.n}, "slice_dim0");
    std::copy(x.data().begin() + a * tail, x.data().begin() + b * tail, y.data().begin());
    if (y.requires_grad()) {
        TensorNode* xp = x.n.get();
        size_t off = a * tail;
        y.n->back = [xp, off](TensorNode& self) {
            xp->ensure_grad();
            for (size_t i = 0; i < self.val.size(); ++i) xp->grad[off + i] += self.grad[i];
        };
    }
    return y;
}

inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
    if (x.shape().size() != 2 || c0 < 0 || c1 > x.shape()[1] || c0 >= c1)
        throw std::invalid_argument("slice_cols: bad range");
    int r = x.shape()[0], c = x.shape()[1], w = c1 - c0;
    Tensor y = detail::make_op({r, w}, {x.n}, "slice_cols");
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j)
            y.data()[static_cast<size_t>(i) * w + j] = x.data()[static_cast<size_t>(i) * c + c0 + j];
    if (y.requires_grad()) {
        TensorNode* xp = x.n.get();
        y.n->back = [xp, r, c, w, c0](TensorNode& self) {
            xp->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < w; ++j)
                    xp->grad[static_cast<size_t>(i) * c + c0 + j] += self.grad[static_cast<size_t>(i) * w + j];
        };
    }
    return y;
}

// [N] vectors -> [B, N]
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: empty list");
    int n = rows[0].shape().size() == 1 ? rows[0].shape()[0] : -1;
    if (n < 0) throw std::invalid_argument("stack_rows: expects vectors");
    std::vector<NodePtr> parents;
    for (const auto& r : rows) {
        if (r.shape().size() != 1 || r.shape()[0] != n)
            throw std::invalid_argument("stack_rows: length mismatch");
        parents.push_back(r.n);
    }
    Tensor y = detail::make_op({static_cast<int>(rows.size()), n}, parents, "stack_rows");
    for (size_t i = 0; i < rows.size(); ++i)
        std::copy(rows[i].data().begin(), rows[i].data().end(), y.data().begin() + i * n);
    if (y.requires_grad()) {
        std::vector<TensorNode*> ps;
        for (const auto& r : rows) ps.push_back(r.n.get());
        y.n->back = [ps, n](TensorNode& self) {
            for (size_t i = 0; i < ps.size(); ++i) {
                ps[i]->ensure_grad();
                for (int j = 0; j < n; ++j) ps[i]->grad[j] += self.grad[i * n + j];
            }
        };
    }
    return y;
}

// ---------------------------------------------------------------------------
// broadcast helpers on [R, S] matrices and [C, ...] channel tensors
// ---------------------------------------------------------------------------

// y[r, s] = x[r, s] * a[s], a constant
inline Tensor mul_bcast_row(const Tensor& x, const std::vector<float>& a) {
    if (x.shape().size() != 2 || static_cast<int>(a.size()) != x.shape()[1])
        throw std::invalid_argument("mul_bcast_row: shape mismatch");
    int r = x.shape()[0], s = x.shape()[1];
    Tensor y = detail::make_op(x.shape(), {x.n}, "mul_bcast_row");
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < s; ++j)
            y.data()[static_cast<size_t>(i) * s + j] = x.data()[static_cast<size_t>(i) * s + j] * a[j];
    if (y.requires_grad()) {
        TensorNode* xp = x.n.get();
        auto av = a;
        y.n->back = [xp, av, r, s](TensorNode& self) {
            xp->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < s; ++j)
                    xp->grad[static_cast<size_t>(i) * s + j] += self.grad[static_cast<size_t>(i) * s + j] * av[j];
        };
    }
    return y;
}

// y[r, s] = x[r, s] * a[r], a constant
inline Tensor mul_bcast_col(const Tensor& x, const std::vector<float>& a) {
    if (x.shape().size() != 2 || static_cast<int>(a.size()) != x.shape()[0])
        throw std::invalid_argument("mul_bcast_col: shape mismatch");
    int r = x.shape()[0], s = x.shape()[1];
    Tensor y = detail::make_op(x.shape(), {x.n}, "mul_bcast_col");
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < s; ++j)
            y.data()[static_cast<size_t>(i) * s + j] = x.data()[static_cast<size_t>(i) * s + j] * a[i];
    if (y.requires_grad()) {
        TensorNode* xp = x.n.get();
        auto av = a;
        y.n->back = [xp, av, r, s](TensorNode& self) {
            xp->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < s; ++j)
                    xp->grad[static_cast<size_t>(i) * s + j] += self.grad[static_cast<size_t>(i) * s + j] * av[i];
        };
    }
    return y;
}

// x [C, ...] plus per-channel vector v [C]
inline Tensor add_channel_vec(const Tensor& x, const Tensor& v) {
    if (x.shape().empty() || v.shape().size() != 1 || v.shape()[0] != x.shape()[0])
        throw std::invalid_argument("add_channel_vec: shape mismatch");
    int c = x.shape()[0];
    size_t tail = x.numel() / c;
    Tensor y = detail::make_op(x.shape(), {x.n, v.n}, "add_channel_vec");
    for (int i = 0; i < c; ++i)
        for (size_t j = 0; j < tail; ++j)
            y.data()[i * tail + j] = x.data()[i * tail + j] + v.data()[i];
    if (y.requires_grad()) {
        TensorNode *xp = x.n.get(), *vp = v.n.get();
        y.n->back = [xp, vp, c, tail](TensorNode& self) {
            xp->ensure_grad();
            vp->ensure_grad();
            for (int i = 0; i < c; ++i) {
                double acc = 0.0;
                for (size_t j = 0; j < tail; ++j) {
                    float g = self.grad[i * tail + j];
                    xp->grad[i * tail + j] += g;
                    acc += g;
                }
                vp->grad[i] += static_cast<float>(acc);
            }
        };
    }
    return y;
}

// x [C, ...] scaled per channel by v [C]
inline Tensor mul_channel_vec(const Tensor& x, const Tensor& v) {
    if (x.shape().empty() || v.shape().size() != 1 || v.shape()[0] != x.shape()[0])
        throw std::invalid_argument("mul_channel_vec: shape mismatch");
    int c = x.shape()[0];
    size_t tail = x.numel() / c;
    Tensor y = detail::make_op(x.shape(), {x.n, v.n}, "mul_channel_vec");
    for (int i = 0; i < c; ++i)
        for (size_t j = 0; j < tail; ++j)
            y.data()[i * tail + j] = x.data()[i * tail + j] * v.data()[i];
    if (y.requires_grad()) {
        TensorNode *xp = x.n.get(), *vp = v.n.get();
        y.n->back = [xp, vp, c, tail](TensorNode& self) {
            xp->ensure_grad();
            vp->ensure_grad();
            for (int i = 0; i < c; ++i) {
                double acc = 0.0;
                for (size_t j = 0; j < tail; ++j) {
                    float g = self.grad[i * tail + j];
                    xp->grad[i * tail + j] += g * vp->val[i];
                    acc += static_cast<double>(g) * xp->val[i * tail + j];
                }
                vp->grad[i] += static_cast<float>(acc);
            }
        };
    }
    return y;
}

// ---------------------------------------------------------------------------
// structured ops
// ---------------------------------------------------------------------------

// y[r, k] = sum_{j < k} x[r, j]
inline Tensor cumsum_exclusive_last(const Tensor& x) {
    if (x.shape().size() != 2) throw std::invalid_argument("cumsum_exclusive_last: expects [R,S]");
    int r = x.shape()[0], s = x.shape()[1];
    Tensor y = detail::make_op(x.shape(), {x.n}, "cumsum_exclusive_last");
    for (int i = 0; i < r; ++i) {
        double acc = 0.0;
        for (int j = 0; j < s; ++j) {
            y.data()[static_cast<size_t>(i) * s + j] = static_cast<float>(acc);
            acc += x.data()[static_cast<size_t>(i) * s + j];
        }
    }
    if (y.requires_grad()) {
        TensorNode* xp = x.n.get();
        y.n->back = [xp, r, s](TensorNode& self) {
            xp->ensure_grad();
            for (int i = 0; i < r; ++i) {
                double acc = 0.0;
                for (int j = s - 1; j >= 0; --j) {
                    xp->grad[static_cast<size_t>(i) * s + j] += static_cast<float>(acc);
                    acc += self.grad[static_cast<size_t>(i) * s + j];
                }
            }
        };
    }
    return y;
}

inline Tensor softmax_last(const Tensor& x) {
    if (x.shape().size() != 2) throw std::invalid_argument("softmax_last: expects [R,S]");
    int r = x.shape()[0], s = x.shape()[1];
    Tensor y = detail::make_op(x.shape(), {x.n}, "softmax_last");
    for (int i = 0; i < r; ++i) {
        const float* xi = x.data().data() + static_cast<size_t>(i) * s;
        float* yi = y.data().data() + static_cast<size_t>(i) * s;
        float mx = xi[0];
        for (int j = 1; j < s; ++j) mx = std::max(mx, xi[j]);
        double z = 0.0;
        for (int j = 0; j < s; ++j) z += std::exp(static_cast<double>(xi[j]) - mx);
        for (int j = 0; j < s; ++j)
            yi[j] = static_cast<float>(std::exp(static_cast<double>(xi[j]) - mx) / z);
    }
    if (y.requires_grad()) {
        TensorNode* xp = x.n.get();
        y.n->back = [xp, r, s](TensorNode& self) {
            xp->ensure_grad();
            for (int i = 0; i < r; ++i) {
                const float* yi = self.val.data() + static_cast<size_t>(i) * s;
                const float* gi = self.grad.data() + static_cast<size_t>(i) * s;
                double dot = 0.0;
                for (int j = 0; j < s; ++j) dot += static_cast<double>(yi[j]) * gi[j];
                for (int j = 0; j < s; ++j)
                    xp->grad[static_cast<size_t>(i) * s + j] += yi[j] * (gi[j] - static_cast<float>(dot));
            }
        };
    }
    return y;
}

inline Tensor gather_rows(const Tensor& table, const std::vector<int>& idx) {
    if (table.shape().size() != 2) throw std::invalid_argument("gather_rows: table must be [K,C]");
    int k = table.shape()[0], c = table.shape()[1];
    for (int i : idx)
        if (i < 0 || i >= k) throw std::invalid_argument("gather_rows: index out of range");
    Tensor y = detail::make_op({static_cast<int>(idx.size()), c}, {table.n}, "gather_rows");
    for (size_t m = 0; m < idx.size(); ++m)
        std::copy(table.data().begin() + static_cast<size_t>(idx[m]) * c,
                  table.data().begin() + static_cast<size_t>(idx[m] + 1) * c,
                  y.data().begin() + m * c);
    if (y.requires_grad()) {
        TensorNode* tp = table.n.get();
        auto iv = idx;
        y.n->back = [tp, iv, c](TensorNode& self) {
            tp->ensure_grad();
            for (size_t m = 0; m < iv.size(); ++m)
                for (int j = 0; j < c; ++j)
                    tp->grad[static_cast<size_t>(iv[m]) * c + j] += self.grad[m * c + j];
        };
    }
    return y;
}

// Mean-pool rows of `values` into `nbins` bins; empty bins stay zero.
inline Tensor scatter_mean(const Tensor& values, const std::vector<int64_t>& bins, int64_t nbins) {
    if (values.shape().size() != 2 || bins.size() != static_cast<size_t>(values.shape()[0]))
        throw std::invalid_argument("scatter_mean: values [M,C] with one bin per row");
    int m = values.shape()[0], c = values.shape()[1];
    for (int64_t b : bins)
        if (b < 0 || b >= nbins) throw std::invalid_argument("scatter_mean: bin out of range");
    Tensor y = detail::make_op({static_cast<int>(nbins), c}, {values.n}, "scatter_mean");
    std::vector<int32_t> count(nbins, 0);
    std::vector<double> acc(static_cast<size_t>(nbins) * c, 0.0);
    for (int i = 0; i < m; ++i) {
        int64_t b = bins[i];
        ++count[b];
        for (int j = 0; j < c; ++j) acc[static_cast<size_t>(b) * c + j] += values.data()[static_cast<size_t>(i) * c + j];
    }
    for (int64_t b = 0; b < nbins; ++b)
        if (count[b])
            for (int j = 0; j < c; ++j)
                y.data()[static_cast<size_t>(b) * c + j] = static_cast<float>(acc[static_cast<size_t>(b) * c + j] / count[b]);
    if (y.requires_grad()) {
        TensorNode* vp = values.n.get();
        auto bv = bins;
        auto cv = count;
        y.n->back = [vp, bv, cv, c](TensorNode& self) {
            vp->ensure_grad();
            for (size_t i = 0; i < bv.size(); ++i) {
                int64_t b = bv[i];
                float inv = 1.f / cv[b];
                for (int j = 0; j < c; ++j)
                    vp->grad[i * c + j] += self.grad[static_cast<size_t>(b) * c + j] * inv;
            }
        };
    }
    return y;
}

// Group normalization without affine part: x [C, ...], statistics per group.
inline Tensor group_norm_raw(const Tensor& x, int groups, float eps = 1e-5f) {
    if (x.shape().empty()) throw std::invalid_argument("group_norm: scalar input");
    int c = x.shape()[0];
    if (groups < 1 || c % groups != 0)
        throw std::invalid_argument("group_norm: channels " + std::to_string(c) +
                                    " not divisible by groups " + std::to_string(groups));
    size_t tail = x.numel() / c;
    size_t gsz = static_cast<size_t>(c / groups) * tail;
    Tensor y = detail::make_op(x.shape(), {x.n}, "group_norm");
    std::vector<float> istd(groups), mu(groups);
    for (int g = 0; g < groups; ++g) {
        const float* xs = x.data().data() + g * gsz;
        double s = 0.0, s2 = 0.0;
        for (size_t i = 0; i < gsz; ++i) {
            s += xs[i];
            s2 += static_cast<double>(xs[i]) * xs[i];
        }
        double m = s / static_cast<double>(gsz);
        double var = s2 / static_cast<double>(gsz) - m * m;
        if (var < 0) var = 0;
        mu[g] = static_cast<float>(m);
        istd[g] = static_cast<float>(1.0 / std::sqrt(var + eps));
        float* ys = y.data().data() + g * gsz;
        for (size_t i = 0; i < gsz; ++i) ys[i] = (xs[i] - mu[g]) * istd[g];
    }
    if (y.requires_grad()) {
        TensorNode* xp = x.n.get();
        y.n->back = [xp, groups, gsz, istd](TensorNode& self) {
            xp->ensure_grad();
            for (int g = 0; g < groups; ++g) {
                const float* xh = self.val.data() + g * gsz; // normalized values
                const float* gy = self.grad.data() + g * gsz;
                double mg = 0.0, mgx = 0.0;
                for (size_t i = 0; i < gsz; ++i) {
                    mg += gy[i];
                    mgx += static_cast<double>(gy[i]) * xh[i];
                }
                mg /= static_cast<double>(gsz);
                mgx /= static_cast<double>(gsz);
                float* gx = xp->grad.data() + g * gsz;
                for (size_t i = 0; i < gsz; ++i)
                    gx[i] += istd[g] * static_cast<float>(gy[i] - mg - xh[i] * mgx);
            }
        };
    }
    return y;
}

// ---------------------------------------------------------------------------
// conv / resampling
// ---------------------------------------------------------------------------

// Cross-correlation with zero padding: x [Ci,H,W], w [Co,Ci,kh,kw], b [Co].
// Output [Co, (H+2p-kh)/s+1, (W+2p-kw)/s+1].
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride = 1, int pad = 0) {
    if (x.shape().size() != 3 || w.shape().size() != 4 || x.shape()[0] != w.shape()[1])
        throw std::invalid_argument("conv2d: x [Ci,H,W], w [Co,Ci,kh,kw] required, got " +
                                    shape_str(x.shape()) + " and " + shape_str(w.shape()));
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
    int ci = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
    int co = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    int ho = (h + 2 * pad - kh) / stride + 1;
    int wo = (wd + 2 * pad - kw) / stride + 1;
    if (h + 2 * pad < kh || wd + 2 * pad < kw)
        throw std::invalid_argument("conv2d: kernel larger than padded input");
    bool has_b = b.defined();
    if (has_b && (b.shape().size() != 1 || b.shape()[0] != co))
        throw std::invalid_argument("conv2d: bias must be [Co]");

    std::vector<NodePtr> parents{x.n, w.n};
    if (has_b) parents.push_back(b.n);
    Tensor y = detail::make_op({co, ho, wo}, std::move(parents), "conv2d");

    const float* xv = x.data().data();
    const float* wv = w.data().data();
    float* yv = y.data().data();
    for (int oc = 0; oc < co; ++oc) {
        float bias = has_b ? b.data()[oc] : 0.f;
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                double acc = bias;
                int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
                for (int ic = 0; ic < ci; ++ic)
                    for (int ky = 0; ky < kh; ++ky) {
                        int iy = iy0 + ky;
                        if (iy < 0 || iy >= h) continue;
                        const float* xr = xv + (static_cast<size_t>(ic) * h + iy) * wd;
                        const float* wr = wv + ((static_cast<size_t>(oc) * ci + ic) * kh + ky) * kw;
                        for (int kx = 0; kx < kw; ++kx) {
                            int ix = ix0 + kx;
                            if (ix < 0 || ix >= wd) continue;
                            acc += static_cast<double>(xr[ix]) * wr[kx];
                        }
                    }
                yv[(static_cast<size_t>(oc) * ho + oy) * wo + ox] = static_cast<float>(acc);
            }
    }
    if (y.requires_grad()) {
        TensorNode* xp = x.n.get();
        TensorNode* wp = w.n.get();
        TensorNode* bp = has_b ? b.n.get() : nullptr;
        y.n->back = [xp, wp, bp, ci, h, wd, co, kh, kw, ho, wo, stride, pad](TensorNode& self) {
            xp->ensure_grad();
            wp->ensure_grad();
            if (bp) bp->ensure_grad();
            for (int oc = 0; oc < co; ++oc) {
                double bacc = 0.0;
                for (int oy = 0; oy < ho; ++oy)
                    for (int ox = 0; ox < wo; ++ox) {
                        float g = self.grad[(static_cast<size_t>(oc) * ho + oy) * wo + ox];
                        if (g == 0.f) continue;
                        bacc += g;
                        int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
                        for (int ic = 0; ic < ci; ++ic)
                            for (int ky = 0; ky < kh; ++ky) {
                                int iy = iy0 + ky;
                                if (iy < 0 || iy >= h) continue;
                                float* gxr = xp->grad.data() + (static_cast<size_t>(ic) * h + iy) * wd;
                                const float* xr = xp->val.data() + (static_cast<size_t>(ic) * h + iy) * wd;
                                float* gwr = wp->grad.data() + ((static_cast<size_t>(oc) * ci + ic) * kh + ky) * kw;
                                const float* wr = wp->val.data() + ((static_cast<size_t>(oc) * ci + ic) * kh + ky) * kw;
                                for (int kx = 0; kx < kw; ++kx) {
                                    int ix = ix0 + kx;
                                    if (ix < 0 || ix >= wd) continue;
                                    gxr[ix] += g * wr[kx];
                                    gwr[kx] += g * xr[ix];
                                }
                            }
                    }
                if (bp) bp->grad[oc] += static_cast<float>(bacc);
            }
        };
    }
    return y;
}

inline Tensor upsample_nearest2x(const Tensor& x) {
    if (x.shape().size() != 3) throw std::invalid_argument("upsample_nearest2x: expects [C,H,W]");
    int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    Tensor y = detail::make_op({c, h * 2, w * 2}, {x.n}, "upsample_nearest2x");
    for (int ic = 0; ic < c; ++ic)
        for (int iy = 0; iy < 2 * h; ++iy)
            for (int ix = 0; ix < 2 * w; ++ix)
                y.data()[(static_cast<size_t>(ic) * 2 * h + iy) * 2 * w + ix] =
                    x.data()[(static_cast<size_t>(ic) * h + iy / 2) * w + ix / 2];
    if (y.requires_grad()) {
        TensorNode* xp = x.n.get();
        y.n->back = [xp, c, h, w](TensorNode& self) {
            xp->ensure_grad();
            for (int ic = 0; ic < c; ++ic)
                for (int iy = 0; iy < 2 * h; ++iy)
                    for (int ix = 0; ix < 2 * w; ++ix)
                        xp->grad[(static_cast<size_t>(ic) * h + iy / 2) * w + ix / 2] +=
                            self.grad[(static_cast<size_t>(ic) * 2 * h + iy) * 2 * w + ix];
        };
    }
    return y;
}

} // namespace nfldm
