#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "tensor.hpp"

namespace nfldm {

struct AdamConfig {
    float lr = 2e-4f;
    float beta1 = 0.0f;
    float beta2 = 0.99f;
    float eps = 1e-8f;
    float weight_decay = 0.0f; // > 0 switches on decoupled decay
};

struct AdamState {
    std::vector<float> first_moment;
    std::vector<float> second_moment;
    int64_t step_count = 0;
};

// One Adam update. Decay is decoupled: applied to the parameter directly,
// never mixed into the moments.
inline void adam_step(std::span<float> param, std::span<const float> grad,
                      AdamState& st, const AdamConfig& cfg) {
    if (param.size() != grad.size()) throw std::invalid_argument("adam_step: param/grad size mismatch");
    if (st.first_moment.size() != param.size()) st.first_moment.assign(param.size(), 0.f);
    if (st.second_moment.size() != param.size()) st.second_moment.assign(param.size(), 0.f);
    st.step_count += 1;
    double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(st.step_count));
    double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(st.step_count));
    if (bc1 <= 0.0) bc1 = 1.0; // beta1 == 0: no first-moment bias
    for (size_t i = 0; i < param.size(); ++i) {
        if (cfg.weight_decay > 0.f) param[i] -= cfg.lr * cfg.weight_decay * param[i];
        float g = grad[i];
        st.first_moment[i] = cfg.beta1 * st.first_moment[i] + (1.f - cfg.beta1) * g;
        st.second_moment[i] = cfg.beta2 * st.second_moment[i] + (1.f - cfg.beta2) * g * g;
        float mhat = static_cast<float>(st.first_moment[i] / bc1);
        float vhat = static_cast<float>(st.second_moment[i] / bc2);
        param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

// Drives a fixed list of tensors; states are positional.
struct Adam {
    AdamConfig cfg;
    std::vector<AdamState> states;

    explicit Adam(AdamConfig c = {}) : cfg(c) {}

    void step(std::vector<Tensor>& params) {
        if (states.size() != params.size()) states.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor& p = params[i];
            p.n->ensure_grad();
            adam_step(std::span<float>(p.data().data(), p.data().size()),
                      std::span<const float>(p.n->grad.data(), p.n->grad.size()), states[i], cfg);
        }
    }

    static void zero_grads(std::vector<Tensor>& params) {
        for (Tensor& p : params) {
            p.n->ensure_grad();
            std::fill(p.n->grad.begin(), p.n->grad.end(), 0.f);
        }
    }
};

} // namespace nfldm
