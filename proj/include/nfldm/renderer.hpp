#pragma once

// Trilinear sampling of voxel grids, volume rendering of density/feature
// fields to feature maps with expected depth, a conv decoder to RGB, and the
// composite scene-autoencoder loss.

#include <cmath>
#include <stdexcept>
#include <vector>

#include <nfldm/camera.hpp>
#include <nfldm/nn.hpp>
#include <nfldm/scene_encoder.hpp>
#include <nfldm/tensor.hpp>

namespace nfldm {

// ---------------------------------------------------------------------------
// Trilinear interpolation of [C, Z, X, Y] values at world points. Queries
// outside the voxel-center hull return zeros. Gradients flow into `values`
// through the 8 corner weights; query positions are constants.
// ---------------------------------------------------------------------------

inline Tensor sample_grid_trilinear(const Tensor& values, const std::vector<Vec3>& points,
                                    const GridSpec& spec) {
    const auto& sh = values.shape();
    if (sh.size() != 4) throw std::invalid_argument("sample_grid_trilinear: want [C, Z, X, Y]");
    const int c = sh[0], nz = sh[1], nx = sh[2], ny = sh[3];
    if (nz != spec.nz || nx != spec.nx || ny != spec.ny)
        throw std::invalid_argument("sample_grid_trilinear: grid/spec extent mismatch");
    const int p = static_cast<int>(points.size());
    const int64_t zxy = int64_t(nz) * nx * ny;

    // per query: flat base corner or -1, plus fractional offsets
    struct Corner { int64_t base; float fx, fy, fz; };
    std::vector<Corner> prep(p);
    for (int i = 0; i < p; ++i) {
        float gx = (points[i].x - spec.origin.x) / spec.vsize.x - 0.5f;
        float gy = (points[i].y - spec.origin.y) / spec.vsize.y - 0.5f;
        float gz = (points[i].z - spec.origin.z) / spec.vsize.z - 0.5f;
        // closed hull of voxel centers; the top face clamps to the last cell
        if (gx < 0 || gy < 0 || gz < 0 || gx > nx - 1 || gy > ny - 1 || gz > nz - 1) {
            prep[i] = {-1, 0, 0, 0};
            continue;
        }
        int ix = std::min(static_cast<int>(gx), nx - 2);
        int iy = std::min(static_cast<int>(gy), ny - 2);
        int iz = std::min(static_cast<int>(gz), nz - 2);
        prep[i] = {(int64_t(iz) * nx + ix) * ny + iy, gx - ix, gy - iy, gz - iz};
    }

    auto out = detail::make_op({c, p}, {values.n}, "sample_grid_trilinear");
    auto vn = values.n;
    const int64_t dz = int64_t(nx) * ny, dx = ny, dy = 1;
    auto corners = [dz, dx, dy](const Corner& cr, int64_t idx[8], float w[8]) {
        idx[0] = cr.base;                  w[0] = (1 - cr.fz) * (1 - cr.fx) * (1 - cr.fy);
        idx[1] = cr.base + dy;             w[1] = (1 - cr.fz) * (1 - cr.fx) * cr.fy;
        idx[2] = cr.base + dx;             w[2] = (1 - cr.fz) * cr.fx * (1 - cr.fy);
        idx[3] = cr.base + dx + dy;        w[3] = (1 - cr.fz) * cr.fx * cr.fy;
        idx[4] = cr.base + dz;             w[4] = cr.fz * (1 - cr.fx) * (1 - cr.fy);
        idx[5] = cr.base + dz + dy;        w[5] = cr.fz * (1 - cr.fx) * cr.fy;
        idx[6] = cr.base + dz + dx;        w[6] = cr.fz * cr.fx * (1 - cr.fy);
        idx[7] = cr.base + dz + dx + dy;   w[7] = cr.fz * cr.fx * cr.fy;
    };

    for (int i = 0; i < p; ++i) {
        if (prep[i].base < 0) continue;
        int64_t idx[8]; float w[8];
        corners(prep[i], idx, w);
        for (int ch = 0; ch < c; ++ch) {
            const float* src = vn->val.data() + int64_t(ch) * zxy;
            double acc = 0;
            for (int k = 0; k < 8; ++k) acc += double(w[k]) * src[idx[k]];
            out.n->val[int64_t(ch) * p + i] = static_cast<float>(acc);
        }
    }
    if (out.n->needs_grad) {
        out.n->back = [vn, prep, c, p, zxy, corners](TensorNode& o) {
            vn->ensure_grad();
            for (int i = 0; i < p; ++i) {
                if (prep[i].base < 0) continue;
                int64_t idx[8]; float w[8];
                corners(prep[i], idx, w);
                for (int ch = 0; ch < c; ++ch) {
                    float go = o.grad[int64_t(ch) * p + i];
                    float* dst = vn->grad.data() + int64_t(ch) * zxy;
                    for (int k = 0; k < 8; ++k) dst[idx[k]] += w[k] * go;
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Volume rendering: march rays through the grid, weight samples by ray
// termination probability, and integrate features and depth.
// ---------------------------------------------------------------------------

struct RenderOutput {
    Tensor feature_map;              // [C, H, W]
    Tensor expected_depth;           // [H*W], meters; far where no mass
    Tensor sample_weights;           // [H*W, n_samples], in [0, 1]
    Tensor background_transmittance; // [H*W]
    int h = 0, w = 0, n_samples = 0;
};

// `pose` carries intrinsics at the render resolution (h, w).
inline RenderOutput render_rays(const VoxelGrid& grid, const CameraPose& pose, int h, int w,
                                int n_samples, float near, float far) {
    if (n_samples < 2 || !(near > 0) || !(far > near))
        throw std::invalid_argument("render_rays: need n_samples >= 2, 0 < near < far");
    const int rays = h * w;
    auto bins = uniform_depth_bins(near, far, n_samples);

    std::vector<Vec3> points(size_t(rays) * n_samples);
    std::vector<float> path_scale(rays);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int r = y * w + x;
            float u = (x - pose.cx) / pose.fx, v = (y - pose.cy) / pose.fy;
            path_scale[r] = std::sqrt(u * u + v * v + 1.f);
            for (int k = 0; k < n_samples; ++k)
                points[size_t(r) * n_samples + k] = lift_pixel(pose, float(x), float(y), bins.depths[k]);
        }

    Tensor dens = sample_grid_trilinear(reshape(grid.density, {1, grid.spec.nz, grid.spec.nx, grid.spec.ny}),
                                        points, grid.spec);        // [1, rays*n]
    Tensor feat = sample_grid_trilinear(grid.feature, points, grid.spec); // [C, rays*n]

    Tensor sig_rows = reshape(dens, {rays, n_samples});
    Tensor weights = occupancy_rows(sig_rows, bins.deltas, path_scale);   // [rays, n]
    Tensor t_bg = background_transmittance_rows(sig_rows, bins.deltas, path_scale);

    // feature_map[ch, r] = sum_k w[r,k] * feat[ch, r, k]
    const int c = grid.feature.shape()[0];
    Tensor w_flat = reshape(weights, {1, rays * n_samples});
    Tensor w_wide = matmul(Tensor::full({c, 1}, 1.f), w_flat);            // [C, rays*n]
    Tensor fm = reshape(sum_last(reshape(mul(feat, w_wide), {c * rays, n_samples})), {c, h, w});

    // expected depth with an empty-ray guard snapping to far
    Tensor wz = sum_last(mul_bcast_row(weights, bins.depths));            // [rays]
    Tensor wsum = sum_last(weights);
    Tensor mask = Tensor::zeros({rays});
    Tensor far_fill = Tensor::zeros({rays});
    for (int r = 0; r < rays; ++r) {
        bool hit = wsum.data()[r] >= 1e-6f;
        mask.data()[r] = hit ? 1.f : 0.f;
        far_fill.data()[r] = hit ? 0.f : far;
    }
    Tensor depth = add(mul(divide(wz, clampf(wsum, 1e-6f, 1e30f)), mask), far_fill);

    RenderOutput out;
    out.h = h; out.w = w; out.n_samples = n_samples;
    out.feature_map = fm;
    out.expected_depth = depth;
    out.sample_weights = weights;
    out.background_transmittance = t_bg;
    return out;
}

// ---------------------------------------------------------------------------
// Feature-map decoder: one nearest-neighbor 2x upsample inside a small conv
// stack, sigmoid RGB output.
// ---------------------------------------------------------------------------

struct RenderDecoder {
    Conv2dLayer conv1, conv2, out_conv;
    GroupNormLayer gn1, gn2;
    int in_channels;

    RenderDecoder(ParamStore& ps, const std::string& name, int in_ch, int width = 32)
        : conv1(ps, name + ".c1", in_ch, width, 3),
          conv2(ps, name + ".c2", width, width, 3),
          out_conv(ps, name + ".out", width, 3, 3),
          gn1(ps, name + ".gn1", width),
          gn2(ps, name + ".gn2", width),
          in_channels(in_ch) {}

    Tensor operator()(const Tensor& feature_map) const {
        if (feature_map.shape()[0] != in_channels)
            throw std::invalid_argument("render decoder: channel mismatch");
        Tensor x = silu(gn1(conv1(feature_map)));
        x = upsample_nearest2x(x);
        x = silu(gn2(conv2(x)));
        return sigmoid(out_conv(x));
    }
};

// ---------------------------------------------------------------------------
// Composite loss: L1 image + masked depth MSE + Bernoulli entropy of the
// per-sample ray weights, with fixed coefficients 1 / 5 / 0.01.
// ---------------------------------------------------------------------------

struct SceneAELossReport {
    Tensor total;
    float image_recon = 0, depth_mse = 0, opacity_entropy = 0;
};

inline Tensor bernoulli_entropy_mean(const Tensor& o_raw) {
    Tensor o = clampf(o_raw, 1e-6f, 1.f - 1e-6f);
    Tensor om = add_s(neg(o), 1.f);
    return neg(mean(add(mul(o, log_(o)), mul(om, log_(om)))));
}

inline SceneAELossReport scene_ae_loss(const Tensor& pred_image, const Tensor& image,
                                       const Tensor& pred_depth, const Tensor& depth,
                                       const std::vector<uint8_t>& depth_valid,
                                       const Tensor& sample_weights) {
    SceneAELossReport r;
    Tensor image_term = l1_loss(pred_image, image);
    Tensor depth_term = masked_mse(pred_depth, depth, depth_valid);
    Tensor entropy_term = bernoulli_entropy_mean(sample_weights);
    r.image_recon = image_term.item();
    r.depth_mse = depth_term.item();
    r.opacity_entropy = entropy_term.item();
    r.total = add(add(image_term, mul_s(depth_term, 5.f)), mul_s(entropy_term, 0.01f));
    return r;
}

} // namespace nfldm
