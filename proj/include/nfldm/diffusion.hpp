#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "nn.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace nfldm {

// Variance-preserving noise process with linearly increasing per-step rates.
// Internals are double precision: alpha[t]^2 + sigma[t]^2 reproduces 1 to
// round-off and logsnr decreases strictly, so samplers can trust the
// identities the update rules are derived from. t = 0 is the least noisy
// step, t = T-1 the noisiest.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta, alpha, sigma, logsnr;

    static NoiseSchedule vp_linear(int steps = 1000, double beta_lo = 1e-4, double beta_hi = 0.02) {
        if (steps < 2) throw std::invalid_argument("NoiseSchedule: need at least 2 steps");
        if (!(beta_lo > 0.0 && beta_hi < 1.0 && beta_lo <= beta_hi))
            throw std::invalid_argument("NoiseSchedule: need 0 < beta_lo <= beta_hi < 1");
        NoiseSchedule s;
        s.T = steps;
        s.beta.resize(steps);
        s.alpha.resize(steps);
        s.sigma.resize(steps);
        s.logsnr.resize(steps);
        double log_ab = 0.0; // log prod(1 - beta)
        for (int t = 0; t < steps; ++t) {
            s.beta[t] = beta_lo + (beta_hi - beta_lo) * t / (steps - 1);
            log_ab += std::log1p(-s.beta[t]);
            s.alpha[t] = std::exp(0.5 * log_ab);
            s.sigma[t] = std::sqrt(-std::expm1(log_ab));
            s.logsnr[t] = log_ab - std::log(-std::expm1(log_ab));
        }
        return s;
    }

    float a(int t) const { return static_cast<float>(alpha.at(t)); }
    float s(int t) const { return static_cast<float>(sigma.at(t)); }
};

// Velocity parameterization: the net predicts v = alpha*eps - sigma*x0, and
// x0 = alpha*x_t - sigma*v, eps = sigma*x_t + alpha*v recover both endpoints
// (alpha^2 + sigma^2 = 1 makes the three mutually consistent).
inline Tensor diffuse(float a, float s, const Tensor& x0, const Tensor& eps) {
    return add(mul_s(x0, a), mul_s(eps, s));
}
inline Tensor v_target(float a, float s, const Tensor& x0, const Tensor& eps) {
    return sub(mul_s(eps, a), mul_s(x0, s));
}
inline Tensor x0_from_v(float a, float s, const Tensor& xt, const Tensor& v) {
    return sub(mul_s(xt, a), mul_s(v, s));
}
inline Tensor eps_from_v(float a, float s, const Tensor& xt, const Tensor& v) {
    return add(mul_s(xt, s), mul_s(v, a));
}

// Evenly spaced descending subset of {0, ..., T-1}, always covering both
// endpoints: round((T-1) * i / (steps-1)) for i = steps-1 down to 0.
inline std::vector<int> sample_times(int T, int steps) {
    if (steps < 2 || steps > T) throw std::invalid_argument("sample_times: need 2 <= steps <= T");
    std::vector<int> ts(steps);
    for (int i = 0; i < steps; ++i)
        ts[i] = static_cast<int>(std::llround(static_cast<double>(T - 1) * (steps - 1 - i) / (steps - 1)));
    return ts;
}

// One reverse transition t -> t_next (t_next < t). eta = 0 is deterministic;
// eta = 1 over consecutive steps reproduces ancestral sampling. The injected
// noise scale is zeta = eta * (sigma_s / sigma_t) * sqrt(1 - alpha_t^2 /
// alpha_s^2), and the retained direction keeps sqrt(sigma_s^2 - zeta^2) so
// the marginal variance is preserved for the ideal denoiser.
template <class F>
Tensor reverse_step(const NoiseSchedule& ns, F&& denoise, const Tensor& x,
                    int t, int t_next, double eta, Rng& rng) {
    if (t_next >= t) throw std::invalid_argument("reverse_step: t_next must be < t");
    Tensor v = denoise(x, t);
    float at = ns.a(t), st = ns.s(t);
    Tensor x0 = x0_from_v(at, st, x, v);
    Tensor eps = eps_from_v(at, st, x, v);
    double as = ns.alpha[t_next], ss = ns.sigma[t_next];
    double zeta = 0.0;
    if (eta > 0.0) {
        double ratio = 1.0 - (ns.alpha[t] * ns.alpha[t]) / (as * as);
        zeta = eta * (ss / ns.sigma[t]) * std::sqrt(std::max(ratio, 0.0));
    }
    double keep = std::sqrt(std::max(ss * ss - zeta * zeta, 0.0));
    Tensor out = add(mul_s(x0, static_cast<float>(as)), mul_s(eps, static_cast<float>(keep)));
    if (zeta > 0.0)
        out = add(out, mul_s(Tensor::randn(x.shape(), rng), static_cast<float>(zeta)));
    return out;
}

// Walk a descending timestep list down to its last entry, then return the
// clean estimate from one more denoiser call there.
template <class F>
Tensor sample_loop(const NoiseSchedule& ns, F&& denoise, const std::vector<int>& times,
                   Tensor x, double eta, Rng& rng) {
    if (times.size() < 2) throw std::invalid_argument("sample_loop: need at least 2 timesteps");
    for (size_t i = 0; i + 1 < times.size(); ++i)
        x = reverse_step(ns, denoise, x, times[i], times[i + 1], eta, rng);
    int t0 = times.back();
    Tensor v = denoise(x, t0);
    return x0_from_v(ns.a(t0), ns.s(t0), x, v);
}

template <class F>
Tensor ddim_sample(const NoiseSchedule& ns, F&& denoise, const std::vector<int>& shape,
                   int steps, double eta, Rng& rng) {
    Tensor x = Tensor::randn(shape, rng);
    return sample_loop(ns, denoise, sample_times(ns.T, steps), x, eta, rng);
}

// Ancestral sampling in the classic posterior mean/variance form. Kept as an
// independent derivation: it must agree with reverse_step at eta = 1 over
// consecutive steps.
template <class F>
Tensor ddpm_sample(const NoiseSchedule& ns, F&& denoise, Tensor x, Rng& rng) {
    for (int t = ns.T - 1; t >= 1; --t) {
        Tensor v = denoise(x, t);
        Tensor x0 = x0_from_v(ns.a(t), ns.s(t), x, v);
        double ab_t = ns.alpha[t] * ns.alpha[t];
        double ab_s = ns.alpha[t - 1] * ns.alpha[t - 1];
        double bt = 1.0 - ab_t / ab_s;
        double c0 = std::sqrt(ab_s) * bt / (1.0 - ab_t);
        double cx = std::sqrt(1.0 - bt) * (1.0 - ab_s) / (1.0 - ab_t);
        double var = (1.0 - ab_s) / (1.0 - ab_t) * bt;
        x = add(add(mul_s(x0, static_cast<float>(c0)), mul_s(x, static_cast<float>(cx))),
                mul_s(Tensor::randn(x.shape(), rng), static_cast<float>(std::sqrt(var))));
    }
    Tensor v = denoise(x, 0);
    return x0_from_v(ns.a(0), ns.s(0), x, v);
}

// Per-channel location/scale of a latent population (the leading axis of
// rank >= 2 tensors, the whole vector for rank 1). Denoisers train on
// standardized latents; samples are mapped back before decoding.
struct LatentStats {
    std::vector<float> mean, stdev;

    void save(const std::string& path) const {
        std::vector<NftTensor> recs(2);
        recs[0].name = "mean";
        recs[0].dims = {mean.size()};
        recs[0].data = mean;
        recs[1].name = "stdev";
        recs[1].dims = {stdev.size()};
        recs[1].data = stdev;
        nft_write(path, recs);
    }

    static LatentStats load(const std::string& path) {
        LatentStats st;
        for (auto& rec : nft_read(path)) {
            if (rec.name == "mean") st.mean = rec.data;
            else if (rec.name == "stdev") st.stdev = rec.data;
        }
        if (st.mean.empty() || st.mean.size() != st.stdev.size())
            throw std::runtime_error("LatentStats: bad stats file " + path);
        return st;
    }
};

inline int stat_channels(const Tensor& x) {
    return x.shape().empty() ? 0 : x.shape()[0];
}

inline LatentStats compute_latent_stats(const std::vector<Tensor>& pop) {
    if (pop.empty()) throw std::invalid_argument("compute_latent_stats: empty population");
    int c = stat_channels(pop[0]);
    size_t per = pop[0].numel() / c;
    std::vector<double> sum(c, 0.0), sq(c, 0.0);
    for (const Tensor& x : pop) {
        if (stat_channels(x) != c || x.numel() != per * c)
            throw std::invalid_argument("compute_latent_stats: mismatched shapes");
        for (int ch = 0; ch < c; ++ch)
            for (size_t i = 0; i < per; ++i) {
                double v = x.data()[ch * per + i];
                sum[ch] += v;
                sq[ch] += v * v;
            }
    }
    double n = static_cast<double>(pop.size()) * per;
    LatentStats st;
    st.mean.resize(c);
    st.stdev.resize(c);
    for (int ch = 0; ch < c; ++ch) {
        double m = sum[ch] / n;
        double var = std::max(sq[ch] / n - m * m, 0.0);
        st.mean[ch] = static_cast<float>(m);
        st.stdev[ch] = static_cast<float>(std::max(std::sqrt(var), 1e-4));
    }
    return st;
}

// Data-side maps (no gradient tracking): z = (x - mean) / stdev and back.
inline Tensor standardize(const Tensor& x, const LatentStats& st) {
    int c = stat_channels(x);
    if (c != static_cast<int>(st.mean.size()))
        throw std::invalid_argument("standardize: channel count mismatch");
    size_t per = x.numel() / c;
    Tensor y = Tensor::zeros(x.shape());
    for (int ch = 0; ch < c; ++ch)
        for (size_t i = 0; i < per; ++i)
            y.data()[ch * per + i] = (x.data()[ch * per + i] - st.mean[ch]) / st.stdev[ch];
    return y;
}

inline Tensor unstandardize(const Tensor& x, const LatentStats& st) {
    int c = stat_channels(x);
    if (c != static_cast<int>(st.mean.size()))
        throw std::invalid_argument("unstandardize: channel count mismatch");
    size_t per = x.numel() / c;
    Tensor y = Tensor::zeros(x.shape());
    for (int ch = 0; ch < c; ++ch)
        for (size_t i = 0; i < per; ++i)
            y.data()[ch * per + i] = x.data()[ch * per + i] * st.stdev[ch] + st.mean[ch];
    return y;
}

// Residual MLP denoiser for the rank-1 scene code. Input is the noisy code
// concatenated with a timestep embedding and an optional conditioning
// vector (zeros when absent, which doubles as the unconditional branch for
// guidance). The head starts at zero so the initial prediction is v = 0.
struct VectorDenoiserConfig {
    int dim = 16;
    int hidden = 256;
    int blocks = 6;
    int t_dim = 64;
    int cond_dim = 0;
};

struct VectorDenoiser {
    VectorDenoiserConfig cfg;
    LinearLayer lift, head;
    std::vector<LinearLayer> layers;

    VectorDenoiser() = default;
    VectorDenoiser(ParamStore& ps, const std::string& name, const VectorDenoiserConfig& c)
        : cfg(c) {
        if (c.dim < 1 || c.hidden < 1 || c.blocks < 1) throw std::invalid_argument("VectorDenoiser: bad config");
        lift = LinearLayer(ps, name + ".lift", c.dim + c.t_dim + c.cond_dim, c.hidden);
        for (int i = 0; i < c.blocks; ++i)
            layers.emplace_back(ps, name + ".block" + std::to_string(i), c.hidden, c.hidden);
        head = LinearLayer(ps, name + ".head", c.hidden, c.dim, true, true);
    }

    Tensor operator()(const Tensor& x, int t, const Tensor& cond = Tensor{}) const {
        if (x.shape() != std::vector<int>{cfg.dim}) throw std::invalid_argument("VectorDenoiser: bad input shape");
        std::vector<Tensor> parts{x, timestep_embedding(t, cfg.t_dim)};
        if (cfg.cond_dim > 0) parts.push_back(cond.defined() ? cond : Tensor::zeros({cfg.cond_dim}));
        Tensor h = lift(concat_dim0(parts));
        for (const auto& l : layers) h = add(h, l(silu(h)));
        return head(silu(h));
    }
};

// U-shaped denoiser over a [C,H,W] latent map. Each resolution runs one
// residual block; the bottleneck adds attention (cross-attention when
// ctx_dim > 0, else self). A conditioning vector drives the block norms and
// a timestep embedding is added channel-wise. The output conv starts at
// zero.
struct UNet2dConfig {
    int in_ch = 8;
    int out_ch = 8;
    int base = 32;
    int levels = 2;
    int emb_dim = 64;
    int cond_dim = 0;
    int ctx_dim = 0;
};

struct UNet2d {
    UNet2dConfig cfg;
    LinearLayer emb1, emb2;
    Conv2dLayer conv_in, conv_out;
    GroupNormLayer norm_out;
    std::vector<ResBlock2d> down;
    std::vector<Conv2dLayer> down_sample;
    ResBlock2d mid1, mid2;
    AttnBlock2d mid_attn;
    std::vector<Conv2dLayer> up_sample;
    std::vector<ResBlock2d> up;

    UNet2d() = default;
    UNet2d(ParamStore& ps, const std::string& name, const UNet2dConfig& c) : cfg(c) {
        if (c.levels < 1) throw std::invalid_argument("UNet2d: need at least 1 level");
        emb1 = LinearLayer(ps, name + ".emb1", c.emb_dim, c.emb_dim);
        emb2 = LinearLayer(ps, name + ".emb2", c.emb_dim, c.emb_dim);
        conv_in = Conv2dLayer(ps, name + ".in", c.in_ch, c.base, 3);
        for (int l = 0; l < c.levels; ++l) {
            int ci = ch(l > 0 ? l - 1 : 0), co = ch(l);
            down.emplace_back(ps, name + ".down" + std::to_string(l), ci, co, c.emb_dim, c.cond_dim);
            if (l + 1 < c.levels)
                down_sample.emplace_back(ps, name + ".ds" + std::to_string(l), co, co, 3, 2);
        }
        int cb = ch(c.levels - 1);
        mid1 = ResBlock2d(ps, name + ".mid1", cb, cb, c.emb_dim, c.cond_dim);
        mid_attn = AttnBlock2d(ps, name + ".attn", cb, c.ctx_dim > 0 ? c.ctx_dim : -1);
        mid2 = ResBlock2d(ps, name + ".mid2", cb, cb, c.emb_dim, c.cond_dim);
        for (int l = c.levels - 1; l >= 0; --l) {
            int co = ch(l);
            if (l + 1 < c.levels)
                up_sample.emplace_back(ps, name + ".us" + std::to_string(l), ch(l + 1), co, 3);
            up.emplace_back(ps, name + ".up" + std::to_string(l), 2 * co, co, c.emb_dim, c.cond_dim);
        }
        norm_out = GroupNormLayer(ps, name + ".norm_out", c.base);
        conv_out = Conv2dLayer(ps, name + ".out", c.base, c.out_ch, 3, 1, -1, true);
    }

    int ch(int level) const { return cfg.base << level; }

    Tensor operator()(const Tensor& x, int t, const Tensor& cond = Tensor{},
                      const Tensor& ctx = Tensor{}) const {
        if (x.shape().size() != 3 || x.shape()[0] != cfg.in_ch)
            throw std::invalid_argument("UNet2d: bad input shape");
        int side = x.shape()[1] >> (cfg.levels - 1);
        if (side < 2 || (x.shape()[1] % (1 << (cfg.levels - 1))) != 0)
            throw std::invalid_argument("UNet2d: spatial extent too small for level count");
        Tensor e = emb2(silu(emb1(timestep_embedding(t, cfg.emb_dim))));
        Tensor g = cfg.cond_dim > 0 ? (cond.defined() ? cond : Tensor::zeros({cfg.cond_dim})) : Tensor{};
        Tensor h = conv_in(x);
        std::vector<Tensor> skips;
        for (int l = 0; l < cfg.levels; ++l) {
            h = down[l](h, g, e);
            skips.push_back(h);
            if (l + 1 < cfg.levels) h = down_sample[l](h);
        }
        h = mid1(h, g, e);
        if (cfg.ctx_dim > 0)
            h = mid_attn(h, ctx.defined() ? ctx : Tensor::zeros({1, cfg.ctx_dim}));
        else
            h = mid_attn(h);
        h = mid2(h, g, e);
        for (int i = 0; i < cfg.levels; ++i) {
            int l = cfg.levels - 1 - i;
            if (l + 1 < cfg.levels) h = up_sample[i - 1](upsample_nearest2x(h));
            h = up[i](concat_dim0({h, skips[l]}), g, e);
        }
        return conv_out(silu(norm_out(h)));
    }
};

// Road-map image encoder for conditioning: a strided conv stack that yields
// both spatial tokens (for cross-attention) and their mean (for vector
// conditioning). Passing no map to a denoiser and passing these outputs for
// a map are the two branches classifier-free guidance contrasts.
struct BevEncoderConfig {
    int in_ch = 3;
    int width = 32;
    int tok_dim = 32;
};

struct BevEncoder {
    BevEncoderConfig cfg;
    Conv2dLayer c1, c2, c3;

    BevEncoder() = default;
    BevEncoder(ParamStore& ps, const std::string& name, const BevEncoderConfig& c) : cfg(c) {
        c1 = Conv2dLayer(ps, name + ".c1", c.in_ch, c.width, 3);
        c2 = Conv2dLayer(ps, name + ".c2", c.width, c.width, 3, 2);
        c3 = Conv2dLayer(ps, name + ".c3", c.width, c.tok_dim, 1, 1, 0);
    }

    // [C,H,W] -> tokens [H/2 * W/2, tok_dim]
    Tensor tokens(const Tensor& bev) const {
        Tensor h = c3(silu(c2(silu(c1(bev)))));
        int d = h.shape()[0], s = h.shape()[1] * h.shape()[2];
        return transpose2d(reshape(h, {d, s}));
    }

    // [C,H,W] -> [tok_dim]
    Tensor pooled(const Tensor& bev) const {
        Tensor h = c3(silu(c2(silu(c1(bev)))));
        return mean_spatial(h);
    }
};

} // namespace nfldm
