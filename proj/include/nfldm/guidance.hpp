#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "diffusion.hpp"

namespace nfldm {

// Classifier-free blend of two predictions (velocity or noise space — the
// blend commutes with the affine maps between them at a fixed x_t):
// out = uncond + gamma * (cond - uncond). gamma = 1 returns `cond` as-is,
// gamma > 1 extrapolates past it, and passing a negative-prompt prediction
// as `uncond` steers away from that prompt.
inline Tensor guided_mix(const Tensor& uncond, const Tensor& cond, float gamma) {
    if (gamma == 1.f) return cond;
    detail::check_same_shape(uncond, cond, "guided_mix");
    return add(uncond, mul_s(sub(cond, uncond), gamma));
}

// Splice over the trailing spatial cells of a [C,H,W] map: cells with a
// nonzero mask take `repl`, the rest keep `base`. Values are copied, not
// recombined arithmetically, so spliced cells match their source bit for
// bit; gradients route the same way.
inline Tensor splice_map(const Tensor& base, const Tensor& repl, const std::vector<uint8_t>& mask) {
    detail::check_same_shape(base, repl, "splice_map");
    if (base.shape().size() != 3) throw std::invalid_argument("splice_map: expects [C,H,W]");
    size_t cells = static_cast<size_t>(base.shape()[1]) * base.shape()[2];
    if (mask.size() != cells) throw std::invalid_argument("splice_map: mask size mismatch");
    int c = base.shape()[0];
    Tensor y = detail::make_op(base.shape(), {base.n, repl.n}, "splice_map");
    for (int ch = 0; ch < c; ++ch)
        for (size_t i = 0; i < cells; ++i)
            y.data()[ch * cells + i] = mask[i] ? repl.data()[ch * cells + i] : base.data()[ch * cells + i];
    if (y.requires_grad()) {
        TensorNode *bp = base.n.get(), *rp = repl.n.get();
        auto m = mask;
        y.n->back = [bp, rp, m, c, cells](TensorNode& self) {
            bp->ensure_grad();
            rp->ensure_grad();
            for (int ch = 0; ch < c; ++ch)
                for (size_t i = 0; i < cells; ++i)
                    (m[i] ? rp : bp)->grad[ch * cells + i] += self.grad[ch * cells + i];
        };
    }
    return y;
}

// Pool an H x W cell mask by an integer factor; a coarse cell is marked if
// any fine cell under it is.
inline std::vector<uint8_t> downsample_mask(const std::vector<uint8_t>& mask, int h, int w, int f) {
    if (f < 1 || h % f != 0 || w % f != 0 || mask.size() != static_cast<size_t>(h) * w)
        throw std::invalid_argument("downsample_mask: extent not divisible by factor");
    int ho = h / f, wo = w / f;
    std::vector<uint8_t> out(static_cast<size_t>(ho) * wo, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (mask[static_cast<size_t>(y) * w + x]) out[static_cast<size_t>(y / f) * wo + x / f] = 1;
    return out;
}

// Reverse diffusion constrained to a mask. Before every transition the
// complement region is reset to the known map noised to the current level
// (draws from fill_rng, separate from the sampler's own stream), keeping
// the resampled region consistent with its frozen surroundings; the final
// clean estimate is spliced onto the known map once more. With an all-ones
// mask this reproduces sample_loop on step_rng exactly.
template <class F>
Tensor masked_sample_loop(const NoiseSchedule& ns, F&& denoise, const std::vector<int>& times,
                          Tensor x, const Tensor& known, const std::vector<uint8_t>& mask,
                          double eta, Rng& step_rng, Rng& fill_rng) {
    if (times.size() < 2) throw std::invalid_argument("masked_sample_loop: need at least 2 timesteps");
    auto project = [&](const Tensor& cur, int t) {
        Tensor noised = diffuse(ns.a(t), ns.s(t), known, Tensor::randn(known.shape(), fill_rng));
        return splice_map(noised, cur, mask);
    };
    for (size_t i = 0; i + 1 < times.size(); ++i) {
        x = project(x, times[i]);
        x = reverse_step(ns, denoise, x, times[i], times[i + 1], eta, step_rng);
    }
    int t0 = times.back();
    x = project(x, t0);
    Tensor v = denoise(x, t0);
    Tensor x0 = x0_from_v(ns.a(t0), ns.s(t0), x, v);
    return splice_map(known, x0, mask);
}

// Pull the unmasked region of a clean estimate toward a reference:
// out = x0 - w * (x0 - ref) outside the mask, untouched inside. This is the
// reconstruction-guidance nudge applied between denoising and stepping.
inline Tensor recon_pull(const Tensor& x0, const Tensor& ref, const std::vector<uint8_t>& mask, float w) {
    detail::check_same_shape(x0, ref, "recon_pull");
    if (x0.shape().size() != 3) throw std::invalid_argument("recon_pull: expects [C,H,W]");
    size_t cells = static_cast<size_t>(x0.shape()[1]) * x0.shape()[2];
    if (mask.size() != cells) throw std::invalid_argument("recon_pull: mask size mismatch");
    Tensor pulled = add(mul_s(x0, 1.f - w), mul_s(ref, w));
    return splice_map(pulled, x0, mask);
}

// Score-distillation surrogate term. Its gradient with respect to `image`
// is exactly w * (eps_hat - eps): descending it moves the image against the
// prior's correction. The prediction difference enters detached, so nothing
// propagates into the prior.
inline Tensor sds_loss(const Tensor& image, const Tensor& eps_hat, const Tensor& eps, float w) {
    detail::check_same_shape(image, eps_hat, "sds_loss");
    detail::check_same_shape(image, eps, "sds_loss");
    return sum(mul(image, detach(mul_s(sub(eps_hat, eps), w))));
}

// One distillation draw: noise the image to a random mid-range level, ask
// the prior for the noise it sees, and return the surrogate term weighted
// by sigma_t^2. The prior runs without gradient tracking.
template <class P>
Tensor sds_draw(const NoiseSchedule& ns, P&& prior_eps, const Tensor& image,
                int t_lo, int t_hi, Rng& rng) {
    if (t_lo < 0 || t_hi >= ns.T || t_lo > t_hi) throw std::invalid_argument("sds_draw: bad t range");
    int t = t_lo + rng.uniform_int(t_hi - t_lo + 1);
    Tensor eps = Tensor::randn(image.shape(), rng);
    Tensor eps_hat;
    {
        NoGrad off;
        Tensor xt = diffuse(ns.a(t), ns.s(t), detach(image), eps);
        eps_hat = prior_eps(xt, t);
    }
    float w = ns.s(t) * ns.s(t);
    return sds_loss(image, eps_hat, eps, w);
}

} // namespace nfldm
