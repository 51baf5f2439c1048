#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <nfldm/tensor.hpp>

namespace nfldm_test {

using nfldm::Tensor;

struct FdResult {
    double max_err = 0.0;
    int checked = 0;
    std::string worst;
};

// Central finite differences against reverse-mode gradients. `build` must
// recompute the scalar loss from the current leaf values on every call.
// Pass if |ad - fd| <= tol * max(1, |ad|, |fd|) everywhere. Default step is
// cbrt(3 * eps_f32) ~ 7e-3, where truncation and f32 rounding balance; ops
// with large third derivatives want a smaller h and a looser tol.
inline FdResult fd_check(std::vector<Tensor> leaves, const std::function<Tensor()>& build,
                         float h = 7e-3f, float tol = 1e-4f) {
    for (auto& l : leaves) l.set_requires_grad(true);
    Tensor loss = build();
    nfldm::forward_backward(loss, leaves);
    std::vector<std::vector<float>> ad;
    for (auto& l : leaves) ad.push_back(l.grad());

    FdResult res;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& data = leaves[li].data();
        for (size_t i = 0; i < data.size(); ++i) {
            float saved = data[i];
            data[i] = saved + h;
            double f1 = build().item();
            data[i] = saved - h;
            double f2 = build().item();
            data[i] = saved;
            double fd = (f1 - f2) / (2.0 * h);
            double a = ad[li][i];
            double denom = std::max({1.0, std::abs(a), std::abs(fd)});
            double err = std::abs(a - fd) / denom;
            ++res.checked;
            if (err > res.max_err) {
                res.max_err = err;
                res.worst = "leaf " + std::to_string(li) + " elem " + std::to_string(i) +
                            " ad=" + std::to_string(a) + " fd=" + std::to_string(fd);
            }
        }
    }
    return res;
}

inline Tensor rand_tensor(std::vector<int> shape, uint64_t seed, float lo = -1.f, float hi = 1.f) {
    nfldm::Rng rng(seed, 0x9e3779b97f4a7c15ULL);
    return Tensor::uniform(std::move(shape), rng, lo, hi);
}

// Uniform values kept away from zero, for ops with kinks there.
inline Tensor rand_tensor_nonzero(std::vector<int> shape, uint64_t seed, float margin = 0.05f) {
    Tensor t = rand_tensor(std::move(shape), seed);
    for (auto& v : t.data()) {
        if (v >= 0.f && v < margin) v += margin;
        if (v < 0.f && v > -margin) v -= margin;
    }
    return t;
}

// Projects a tensor-valued op to a scalar with fixed random coefficients.
// Coefficients are signed powers of two so the projection multiplies without
// rounding, and small enough that the f32 ulp of the stored scalar stays far
// below h * tol.
inline Tensor project_scalar(const Tensor& y, uint64_t seed) {
    nfldm::Rng rng(seed, 17);
    Tensor c = Tensor::zeros(y.shape());
    static const float pool[6] = {-0.5f, -0.25f, -0.125f, 0.125f, 0.25f, 0.5f};
    for (auto& v : c.data()) v = pool[rng.uniform_int(6)];
    return nfldm::sum(nfldm::mul(y, c));
}

} // namespace nfldm_test
