#pragma once

// Hierarchical latent autoencoder over voxel fields: a global Gaussian code g,
// a coarse vector-quantized 3D code c, and a fine vector-quantized 2D code f.
// Voxel depth is folded into channels so the trunk runs on 2D convolutions.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <nfldm/nn.hpp>
#include <nfldm/tensor.hpp>

namespace nfldm {

// ---------------------------------------------------------------------------
// Gaussian head: KL against the unit normal and the reparameterized draw.
// ---------------------------------------------------------------------------

inline Tensor kl_unit_gaussian(const Tensor& mu, const Tensor& logvar) {
    // 0.5 * sum(mu^2 + e^lv - 1 - lv), elementwise over the code
    detail::check_same_shape(mu, logvar, "kl_unit_gaussian");
    Tensor lv = clampf(logvar, -30.f, 20.f);
    Tensor term = sub(sub(add(mul(mu, mu), exp_(lv)), Tensor::full(mu.shape(), 1.f)), lv);
    return mul_s(sum(term), 0.5f);
}

inline Tensor reparam_gaussian(const Tensor& mu, const Tensor& logvar, const Tensor& eps) {
    detail::check_same_shape(mu, logvar, "reparam_gaussian");
    detail::check_same_shape(mu, eps, "reparam_gaussian");
    Tensor lv = clampf(logvar, -30.f, 20.f);
    return add(mu, mul(exp_(mul_s(lv, 0.5f)), detach(eps)));
}

// ---------------------------------------------------------------------------
// Vector quantizer: nearest codebook row per column of a [D, N] field, with a
// straight-through estimator and the two-term codebook/commitment loss.
// ---------------------------------------------------------------------------

struct QuantizeResult {
    Tensor quantized;       // [D, N], codebook values, gradient passes to input
    Tensor loss;            // scalar: ||sg(z) - e||^2 + 0.25 ||z - sg(e)||^2
    std::vector<int> idx;   // [N] chosen rows
};

struct VectorQuantizer {
    Tensor codebook;  // [K, D]
    int codes = 0, dim = 0;
    std::vector<int64_t> usage;  // selections since the last reseed

    VectorQuantizer() = default;
    VectorQuantizer(ParamStore& ps, const std::string& name, int codes_, int dim_)
        : codes(codes_), dim(dim_), usage(size_t(codes_), 0) {
        codebook = ps.get_or_create(name + ".codebook", {codes_, dim_}, 1.f / std::sqrt(float(dim_)));
    }

    std::vector<int> nearest(const Tensor& z) const {
        const auto& sh = z.shape();
        if (sh.size() != 2 || sh[0] != dim)
            throw std::invalid_argument("quantizer: want [dim, N] input");
        const int n = sh[1];
        std::vector<int> idx(n);
        for (int j = 0; j < n; ++j) {
            double best = 1e300;
            int arg = 0;
            for (int k = 0; k < codes; ++k) {
                double acc = 0;
                for (int d = 0; d < dim; ++d) {
                    double diff = double(z.data()[size_t(d) * n + j]) - codebook.data()[size_t(k) * dim + d];
                    acc += diff * diff;
                }
                if (acc < best) {  // strict: ties keep the lowest row
                    best = acc;
                    arg = k;
                }
            }
            idx[j] = arg;
        }
        return idx;
    }

    QuantizeResult operator()(const Tensor& z) {
        QuantizeResult r;
        r.idx = nearest(z);
        for (int k : r.idx) ++usage[size_t(k)];
        Tensor e = transpose2d(gather_rows(codebook, r.idx));  // [D, N]
        r.loss = add(mse_loss(e, detach(z)), mul_s(mse_loss(z, detach(e)), 0.25f));
        r.quantized = add(z, detach(sub(e, z)));
        return r;
    }

    // Replace rows never selected since the last call with random columns of
    // `z`; the training loop invokes this on a fixed step cadence.
    int reseed_dead(const Tensor& z, Rng& rng) {
        const int n = z.shape()[1];
        int replaced = 0;
        for (int k = 0; k < codes; ++k) {
            if (usage[size_t(k)] > 0) continue;
            int j = int(rng.uniform_int(uint32_t(n)));
            for (int d = 0; d < dim; ++d)
                codebook.data()[size_t(k) * dim + d] = z.data()[size_t(d) * n + j];
            ++replaced;
        }
        std::fill(usage.begin(), usage.end(), 0);
        return replaced;
    }
};

// ---------------------------------------------------------------------------
// The autoencoder.
// ---------------------------------------------------------------------------

struct LatentAEConfig {
    int vox_channels = 9;   // density + features
    int vox_z = 8, vox_x = 16, vox_y = 16;
    int f_channels = 4, f_codes = 128;
    int f_down_stages = 0;  // stride-2 stages before the fine code
    int c_channels = 4, c_z = 2, c_codes = 1024;
    int g_dim = 16;
    int width = 32;

    int f_x() const { return vox_x >> f_down_stages; }
    int f_y() const { return vox_y >> f_down_stages; }
    int c_x() const { return f_x() / 4; }
    int c_y() const { return f_y() / 4; }
};

struct LatentCodes {
    Tensor g;               // [G]
    Tensor c;               // [c_channels * c_z, c_x, c_y] storage layout
    Tensor f;               // [f_channels, f_x, f_y]
    Tensor mu, logvar;      // [G]
    Tensor vq_loss;         // scalar, both quantizers
    std::vector<int> c_idx, f_idx;
};

struct LatentAE {
    LatentAEConfig cfg;
    Conv2dLayer enc_in, enc_f_trunk, enc_f_head;
    std::vector<Conv2dLayer> enc_f_down;   // optional pre-f stride-2 stages
    Conv2dLayer enc_c_down1, enc_c_down2, enc_c_trunk, enc_c_head;
    GroupNormLayer egn_in, egn_f, egn_c1, egn_c2, egn_c3;
    LinearLayer enc_g;

    LinearLayer dec_g;
    Conv2dLayer dec_c_in, dec_c_trunk, dec_up1, dec_up2, dec_join, dec_head;
    std::vector<Conv2dLayer> dec_f_up;     // mirrors enc_f_down
    GroupNormLayer dgn_c, dgn_t, dgn_u1, dgn_u2, dgn_j;
    std::vector<GroupNormLayer> dgn_fu;

    VectorQuantizer vq_c, vq_f;

    LatentAE(ParamStore& ps, const std::string& name, LatentAEConfig cfg_)
        : cfg(cfg_),
          enc_in(ps, name + ".e_in", cfg_.vox_channels * cfg_.vox_z, cfg_.width, 3),
          enc_f_trunk(ps, name + ".e_ft", cfg_.width, cfg_.width, 3),
          enc_f_head(ps, name + ".e_fh", cfg_.width, cfg_.f_channels, 3),
          enc_c_down1(ps, name + ".e_cd1", cfg_.width, cfg_.width, 3, 2),
          enc_c_down2(ps, name + ".e_cd2", cfg_.width, cfg_.width, 3, 2),
          enc_c_trunk(ps, name + ".e_ct", cfg_.width, cfg_.width, 3),
          enc_c_head(ps, name + ".e_ch", cfg_.width, cfg_.c_channels * cfg_.c_z, 3),
          egn_in(ps, name + ".egn_in", cfg_.width),
          egn_f(ps, name + ".egn_f", cfg_.width),
          egn_c1(ps, name + ".egn_c1", cfg_.width),
          egn_c2(ps, name + ".egn_c2", cfg_.width),
          egn_c3(ps, name + ".egn_c3", cfg_.width),
          enc_g(ps, name + ".e_g", cfg_.width, 2 * cfg_.g_dim),
          dec_g(ps, name + ".d_g", cfg_.g_dim, cfg_.width),
          dec_c_in(ps, name + ".d_cin", cfg_.c_channels * cfg_.c_z, cfg_.width, 3),
          dec_c_trunk(ps, name + ".d_ct", cfg_.width, cfg_.width, 3),
          dec_up1(ps, name + ".d_up1", cfg_.width, cfg_.width, 3),
          dec_up2(ps, name + ".d_up2", cfg_.width, cfg_.width, 3),
          dec_join(ps, name + ".d_join", cfg_.width + cfg_.f_channels, cfg_.width, 3),
          dec_head(ps, name + ".d_head", cfg_.width, cfg_.vox_channels * cfg_.vox_z, 3),
          dgn_c(ps, name + ".dgn_c", cfg_.width),
          dgn_t(ps, name + ".dgn_t", cfg_.width),
          dgn_u1(ps, name + ".dgn_u1", cfg_.width),
          dgn_u2(ps, name + ".dgn_u2", cfg_.width),
          dgn_j(ps, name + ".dgn_j", cfg_.width),
          vq_c(ps, name + ".vq_c", cfg_.c_codes, cfg_.c_channels),
          vq_f(ps, name + ".vq_f", cfg_.f_codes, cfg_.f_channels) {
        if (cfg_.f_x() < 4 || cfg_.f_x() % 4 || cfg_.f_y() % 4 || cfg_.vox_z % cfg_.c_z)
            throw std::invalid_argument("latent ae: incompatible extents");
        for (int s = 0; s < cfg_.f_down_stages; ++s) {
            enc_f_down.emplace_back(ps, name + ".e_fd" + std::to_string(s), cfg_.width, cfg_.width, 3, 2);
            dec_f_up.emplace_back(ps, name + ".d_fu" + std::to_string(s), cfg_.width, cfg_.width, 3);
            dgn_fu.emplace_back(ps, name + ".dgn_fu" + std::to_string(s), cfg_.width);
        }
    }

    // `eps` is the reparameterization draw for g, [g_dim].
    LatentCodes encode(const Tensor& vox, const Tensor& eps) {
        const auto& sh = vox.shape();
        if (sh.size() != 4 || sh[0] != cfg.vox_channels || sh[1] != cfg.vox_z ||
            sh[2] != cfg.vox_x || sh[3] != cfg.vox_y)
            throw std::invalid_argument("latent ae: voxel shape mismatch");

        Tensor x = reshape(vox, {cfg.vox_channels * cfg.vox_z, cfg.vox_x, cfg.vox_y});
        x = silu(egn_in(enc_in(x)));
        for (auto& down : enc_f_down) x = silu(down(x));
        Tensor ftr = silu(egn_f(enc_f_trunk(x)));
        Tensor f_pre = enc_f_head(ftr);  // [f_channels, fx, fy]

        Tensor y = silu(egn_c1(enc_c_down1(ftr)));
        y = silu(egn_c2(enc_c_down2(y)));
        y = silu(egn_c3(enc_c_trunk(y)));
        Tensor c_pre = enc_c_head(y);    // [c_channels * c_z, cx, cy]

        Tensor gsrc = mean_spatial(y);
        Tensor gh = enc_g(gsrc);

        LatentCodes out;
        out.mu = slice_dim0(gh, 0, cfg.g_dim);
        out.logvar = slice_dim0(gh, cfg.g_dim, 2 * cfg.g_dim);
        out.g = reparam_gaussian(out.mu, out.logvar, eps);

        const int cn = cfg.c_z * cfg.c_x() * cfg.c_y();
        auto qc = vq_c(reshape(c_pre, {cfg.c_channels, cn}));
        const int fn = cfg.f_x() * cfg.f_y();
        auto qf = vq_f(reshape(f_pre, {cfg.f_channels, fn}));
        out.c = reshape(qc.quantized, {cfg.c_channels * cfg.c_z, cfg.c_x(), cfg.c_y()});
        out.f = reshape(qf.quantized, {cfg.f_channels, cfg.f_x(), cfg.f_y()});
        out.c_idx = std::move(qc.idx);
        out.f_idx = std::move(qf.idx);
        out.vq_loss = add(qc.loss, qf.loss);
        return out;
    }

    // Decode to a voxel field; the density channel passes through softplus.
    Tensor decode(const Tensor& g, const Tensor& c, const Tensor& f) const {
        Tensor x = silu(dgn_c(dec_c_in(c)));
        x = add_channel_vec(x, dec_g(g));
        x = silu(dgn_t(dec_c_trunk(x)));
        x = silu(dgn_u1(dec_up1(upsample_nearest2x(x))));
        x = silu(dgn_u2(dec_up2(upsample_nearest2x(x))));
        x = silu(dgn_j(dec_join(concat_dim0({x, f}))));
        for (size_t s = 0; s < dec_f_up.size(); ++s)
            x = silu(dgn_fu[s](dec_f_up[s](upsample_nearest2x(x))));
        Tensor out = reshape(dec_head(x), {cfg.vox_channels, cfg.vox_z, cfg.vox_x, cfg.vox_y});
        Tensor dens = softplus(slice_dim0(out, 0, 1));
        Tensor feat = slice_dim0(out, 1, cfg.vox_channels);
        return concat_dim0({dens, feat});
    }
};

// ---------------------------------------------------------------------------
// Reconstruction loss over voxel fields: L1 averaged separately over filled
// and unfilled cells (so sparse occupancy cannot drown the signal), with the
// density channel up-weighted 2.5x.
// ---------------------------------------------------------------------------

struct VoxelLossReport {
    Tensor total;
    float filled = 0, empty = 0;
};

inline VoxelLossReport balanced_voxel_l1(const Tensor& pred, const Tensor& target,
                                         const std::vector<uint8_t>& fill_mask,
                                         float density_weight = 2.5f) {
    detail::check_same_shape(pred, target, "balanced_voxel_l1");
    const auto& sh = pred.shape();
    if (sh.size() != 4) throw std::invalid_argument("balanced_voxel_l1: want [C, Z, X, Y]");
    const size_t cells = size_t(sh[1]) * sh[2] * sh[3];
    if (fill_mask.size() != cells) throw std::invalid_argument("balanced_voxel_l1: mask size");

    size_t n_fill = 0;
    for (uint8_t m : fill_mask) n_fill += m ? 1 : 0;
    const size_t n_empty = cells - n_fill;

    Tensor wf = Tensor::zeros(pred.shape());
    Tensor we = Tensor::zeros(pred.shape());
    for (int ch = 0; ch < sh[0]; ++ch) {
        const float cw = ch == 0 ? density_weight : 1.f;
        for (size_t i = 0; i < cells; ++i) {
            (fill_mask[i] ? wf : we).data()[ch * cells + i] = cw;
        }
    }
    Tensor err = abs_(sub(pred, target));
    Tensor lf = n_fill ? mul_s(sum(mul(err, wf)), 1.f / (float(n_fill) * sh[0])) : Tensor::scalar(0.f);
    Tensor le = n_empty ? mul_s(sum(mul(err, we)), 1.f / (float(n_empty) * sh[0])) : Tensor::scalar(0.f);

    VoxelLossReport r;
    r.filled = lf.item();
    r.empty = le.item();
    r.total = add(lf, le);
    return r;
}

} // namespace nfldm
