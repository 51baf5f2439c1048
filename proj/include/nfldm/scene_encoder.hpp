#pragma once

// Per-image encoder producing pixel-aligned density/feature fields, lifting
// them into camera frustums with ray-termination occupancy weights, and fusing
// multiple frustums into a world voxel grid by mean pooling.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include <nfldm/camera.hpp>
#include <nfldm/nn.hpp>
#include <nfldm/tensor.hpp>

namespace nfldm {

// ---------------------------------------------------------------------------
// occupancy: probability mass of a ray terminating in each depth bin.
// O(d) = exp(-sum_{j<d} s_j d_j) * (1 - exp(-s_d d_d)). The double-precision
// path is the reference used by tests; the Tensor path is the trainable one.
// ---------------------------------------------------------------------------

inline std::vector<double> occupancy_weights(const std::vector<double>& sigma,
                                             const std::vector<double>& deltas) {
    if (sigma.size() != deltas.size())
        throw std::invalid_argument("occupancy_weights: sigma/deltas size mismatch");
    std::vector<double> o(sigma.size());
    double acc = 0.0;
    for (size_t d = 0; d < sigma.size(); ++d) {
        if (sigma[d] < 0) throw std::invalid_argument("occupancy_weights: negative sigma");
        if (!(deltas[d] > 0)) throw std::invalid_argument("occupancy_weights: deltas must be > 0");
        o[d] = std::exp(-acc) * (1.0 - std::exp(-sigma[d] * deltas[d]));
        acc += sigma[d] * deltas[d];
    }
    return o;
}

// Differentiable occupancy over a [R, S] tensor of nonnegative densities.
// opt_thickness[s] is the bin extent along the optical axis; path_scale[r]
// stretches it to metric length along each ray. Returns weights [R, S].
inline Tensor occupancy_rows(const Tensor& sigma, const std::vector<float>& opt_thickness,
                             const std::vector<float>& path_scale) {
    const auto& sh = sigma.shape();
    if (sh.size() != 2) throw std::invalid_argument("occupancy_rows: want [rays, samples]");
    Tensor sd = mul_bcast_col(mul_bcast_row(sigma, opt_thickness), path_scale);
    Tensor before = cumsum_exclusive_last(sd);         // sum_{j<d}
    Tensor trans = exp_(neg(before));                  // transmittance entering bin d
    Tensor absorb = add_s(neg(exp_(neg(sd))), 1.f);    // 1 - exp(-s*delta)
    return mul(trans, absorb);
}

// Transmittance remaining after the last bin, [R].
inline Tensor background_transmittance_rows(const Tensor& sigma,
                                            const std::vector<float>& opt_thickness,
                                            const std::vector<float>& path_scale) {
    Tensor sd = mul_bcast_col(mul_bcast_row(sigma, opt_thickness), path_scale);
    return exp_(neg(sum_last(sd)));
}

// ---------------------------------------------------------------------------
// Pixel field map: densities over depth bins plus a feature vector per pixel.
// ---------------------------------------------------------------------------

struct PixelFieldMap {
    Tensor sigma;   // [D, H, W], nonnegative (clamped logits through softplus)
    Tensor feat;    // [C, H, W]
    int d = 0, c = 0, h = 0, w = 0;
};

struct SceneEncoderConfig {
    int depth_bins = 8;     // D
    int feat_channels = 8;  // C
    int downsample = 4;     // image extent / map extent
    int width = 48;         // trunk channels
};

// Small conv trunk: two stride-2 stages (downsample 4) and a joint head
// emitting D density logits + C feature channels.
struct SceneEncoder {
    SceneEncoderConfig cfg;
    Conv2dLayer in_conv, mid_conv, down1, down2, head;
    GroupNormLayer gn1, gn2;

    SceneEncoder(ParamStore& ps, const std::string& name, SceneEncoderConfig cfg_)
        : cfg(cfg_),
          in_conv(ps, name + ".in", 3, cfg_.width, 3),
          mid_conv(ps, name + ".mid", cfg_.width, cfg_.width, 3),
          down1(ps, name + ".down1", cfg_.width, cfg_.width, 3, 2),
          down2(ps, name + ".down2", cfg_.width, cfg_.width, 3, 2),
          head(ps, name + ".head", cfg_.width, cfg_.depth_bins + cfg_.feat_channels, 3),
          gn1(ps, name + ".gn1", cfg_.width),
          gn2(ps, name + ".gn2", cfg_.width) {}

    PixelFieldMap operator()(const Tensor& image) const {
        const auto& sh = image.shape();
        if (sh.size() != 3 || sh[0] != 3)
            throw std::invalid_argument("scene encoder: want [3, H, W] image");
        if (sh[1] % cfg.downsample || sh[2] % cfg.downsample)
            throw std::invalid_argument("scene encoder: extents must divide by downsample");
        Tensor h = silu(in_conv(image));
        h = silu(gn1(down1(h)));
        h = silu(mid_conv(h));
        h = silu(gn2(down2(h)));
        Tensor out = head(h);

        PixelFieldMap m;
        m.d = cfg.depth_bins;
        m.c = cfg.feat_channels;
        m.h = sh[1] / cfg.downsample;
        m.w = sh[2] / cfg.downsample;
        m.sigma = softplus(clampf(slice_dim0(out, 0, cfg.depth_bins), -10.f, 10.f));
        m.feat = slice_dim0(out, cfg.depth_bins, cfg.depth_bins + cfg.feat_channels);
        return m;
    }
};

// ---------------------------------------------------------------------------
// Frustum: the map's pixels pushed along their rays at discrete depths,
// each entry carrying occupancy-scaled features plus the raw density.
// ---------------------------------------------------------------------------

struct Frustum {
    Tensor feat_entries;   // [H*W*D, C]  O(h,w,d) * phi(h,w)
    Tensor dens_entries;   // [H*W*D, 1]  sigma(h,w,d)
    std::vector<Vec3> points;  // world position per entry, same order
    Tensor occupancy;      // [H*W, D]
    int h = 0, w = 0, d = 0, c = 0;
};

// `pose` must carry intrinsics at the pixel-field-map resolution.
inline Frustum build_frustum(const PixelFieldMap& map, const DepthBins& bins,
                             const CameraPose& pose) {
    if (bins.count() != map.d)
        throw std::invalid_argument("build_frustum: depth bin count != map depth channels");
    const int hw = map.h * map.w, d = map.d, c = map.c;

    // per-pixel stretch from optical-axis depth to metric ray length
    std::vector<float> path_scale(hw);
    for (int y = 0; y < map.h; ++y)
        for (int x = 0; x < map.w; ++x) {
            float u = (x - pose.cx) / pose.fx, v = (y - pose.cy) / pose.fy;
            path_scale[y * map.w + x] = std::sqrt(u * u + v * v + 1.f);
        }

    Tensor sig_rows = transpose2d(reshape(map.sigma, {d, hw}));  // [HW, D]
    Tensor occ = occupancy_rows(sig_rows, bins.deltas, path_scale);

    Frustum f;
    f.h = map.h; f.w = map.w; f.d = d; f.c = c;
    f.occupancy = occ;

    // expand phi rows to one per (pixel, depth) entry and scale by occupancy
    std::vector<int> rep(hw * d);
    for (int p = 0; p < hw; ++p)
        for (int k = 0; k < d; ++k) rep[p * d + k] = p;
    Tensor phi_rows = gather_rows(transpose2d(reshape(map.feat, {c, hw})), rep); // [HW*D, C]
    Tensor occ_col = reshape(occ, {hw * d, 1});
    Tensor occ_wide = matmul(occ_col, Tensor::full({1, c}, 1.f));
    f.feat_entries = mul(phi_rows, occ_wide);
    f.dens_entries = reshape(sig_rows, {hw * d, 1});

    f.points.resize(size_t(hw) * d);
    for (int y = 0; y < map.h; ++y)
        for (int x = 0; x < map.w; ++x)
            for (int k = 0; k < d; ++k)
                f.points[(size_t(y) * map.w + x) * d + k] =
                    lift_pixel(pose, float(x), float(y), bins.depths[k]);
    return f;
}

// ---------------------------------------------------------------------------
// Voxel grid: densities and features on a world lattice, mean-pooled from
// frustum entries. Cells receiving no entry stay zero and unmarked.
// ---------------------------------------------------------------------------

struct VoxelGrid {
    Tensor density;  // [Z, X, Y]
    Tensor feature;  // [C, Z, X, Y]
    std::vector<uint8_t> fill_mask;  // [Z*X*Y]
    GridSpec spec;
    int channels = 0;
    int64_t dropped_entries = 0;  // frustum entries falling outside the grid
};

inline VoxelGrid fuse_frustums(const std::vector<Frustum>& frustums, const GridSpec& spec) {
    if (frustums.empty()) throw std::invalid_argument("fuse_frustums: no frustums");
    const int c = frustums[0].c;
    const int64_t cells = spec.cells();

    std::vector<Tensor> feat_parts, dens_parts;
    std::vector<int64_t> bins;
    int64_t dropped = 0;
    for (const auto& f : frustums) {
        if (f.c != c) throw std::invalid_argument("fuse_frustums: feature width mismatch");
        feat_parts.push_back(f.feat_entries);
        dens_parts.push_back(f.dens_entries);
        for (const auto& p : f.points) {
            auto idx = world_to_voxel(spec, p);
            if (idx) {
                bins.push_back(spec.flat(*idx));
            } else {
                bins.push_back(cells);  // spill bin, sliced off below
                ++dropped;
            }
        }
    }

    Tensor feat_rows = concat_dim0(feat_parts);
    Tensor dens_rows = concat_dim0(dens_parts);
    Tensor feat_vox = slice_dim0(scatter_mean(feat_rows, bins, cells + 1), 0, cells);
    Tensor dens_vox = slice_dim0(scatter_mean(dens_rows, bins, cells + 1), 0, cells);

    VoxelGrid v;
    v.spec = spec;
    v.channels = c;
    v.dropped_entries = dropped;
    v.density = reshape(dens_vox, {spec.nz, spec.nx, spec.ny});
    v.feature = reshape(transpose2d(feat_vox), {c, spec.nz, spec.nx, spec.ny});
    v.fill_mask.assign(cells, 0);
    for (int64_t b : bins)
        if (b < cells) v.fill_mask[b] = 1;
    return v;
}

} // namespace nfldm
