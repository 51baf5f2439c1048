#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

namespace nfldm {

struct Vec3 {
    float x = 0, y = 0, z = 0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(float s) const { return {x * s, y * s, z * s}; }
    float dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    float norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const { float n = norm(); return {x / n, y / n, z / n}; }
};

// Row-major 3x3.
struct Mat3 {
    std::array<float, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Mat3 identity() { return {}; }

    // rotation about world z (up), right-handed
    static Mat3 rot_z(float a) {
        float c = std::cos(a), s = std::sin(a);
        return {{c, -s, 0, s, c, 0, 0, 0, 1}};
    }

    Vec3 operator*(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
                m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }

    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                float s = 0;
                for (int k = 0; k < 3; ++k) s += m[i * 3 + k] * o.m[k * 3 + j];
                r.m[i * 3 + j] = s;
            }
        return r;
    }

    Mat3 transposed() const {
        return {{m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]}};
    }
};

// World frame: right-handed, +z up. Camera frame: +z forward (view direction),
// +x right, +y down in the image. x_cam = R * x_world + t.
struct CameraPose {
    Mat3 R;
    Vec3 t;
    float fx = 1, fy = 1, cx = 0, cy = 0;

    Vec3 center() const { return R.transposed() * (Vec3{} - t); }
    Vec3 to_camera(const Vec3& p) const { return R * p + t; }
    Vec3 to_world(const Vec3& pc) const { return R.transposed() * (pc - t); }
};

struct Ray {
    Vec3 origin;
    Vec3 dir; // unit length
};

// Ray through continuous pixel coordinate (u, v); pixel centers are at +0.5.
inline Ray ray_for_pixel(const CameraPose& cam, float u, float v) {
    Vec3 d_cam{(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0f};
    Vec3 d = cam.R.transposed() * d_cam;
    return {cam.center(), d.normalized()};
}

// Depth is measured along the optical axis (camera-frame z), matching the
// depth maps: point = origin + depth * dir / dir_z(camera frame).
inline Vec3 lift_pixel(const CameraPose& cam, float u, float v, float depth) {
    Vec3 d_cam{(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0f};
    return cam.to_world(d_cam * depth);
}

inline bool project_point(const CameraPose& cam, const Vec3& p_world,
                          float& u, float& v, float& depth) {
    Vec3 pc = cam.to_camera(p_world);
    if (pc.z <= 1e-6f) return false;
    u = cam.fx * pc.x / pc.z + cam.cx;
    v = cam.fy * pc.y / pc.z + cam.cy;
    depth = pc.z;
    return true;
}

// Intrinsics rescaled so a (h*s, w*s) image covers the same field of view.
inline CameraPose scale_intrinsics(const CameraPose& cam, float s) {
    CameraPose out = cam;
    out.fx = cam.fx * s;
    out.fy = cam.fy * s;
    out.cx = (cam.cx + 0.5f) * s - 0.5f;
    out.cy = (cam.cy + 0.5f) * s - 0.5f;
    return out;
}

// ---------------------------------------------------------------------------
// Axis-aligned voxel lattice. Grid tensors are indexed [z][x][y]; world points
// are (x, y, z). origin is the low corner of the grid volume.
// ---------------------------------------------------------------------------

struct VoxelIndex {
    int z = 0, x = 0, y = 0;
};

struct GridSpec {
    int nz = 0, nx = 0, ny = 0;
    Vec3 origin;                 // low corner, world coords
    Vec3 vsize{1, 1, 1};         // voxel edge lengths (x, y, z) in meters

    int64_t cells() const { return static_cast<int64_t>(nz) * nx * ny; }
    int64_t flat(const VoxelIndex& i) const {
        return (static_cast<int64_t>(i.z) * nx + i.x) * ny + i.y;
    }

    Vec3 center(const VoxelIndex& i) const {
        return {origin.x + (i.x + 0.5f) * vsize.x,
                origin.y + (i.y + 0.5f) * vsize.y,
                origin.z + (i.z + 0.5f) * vsize.z};
    }

    Vec3 extent() const { return {nx * vsize.x, ny * vsize.y, nz * vsize.z}; }
};

// floor() binning; points on a max face fall outside.
inline std::optional<VoxelIndex> world_to_voxel(const GridSpec& g, const Vec3& p) {
    int ix = static_cast<int>(std::floor((p.x - g.origin.x) / g.vsize.x));
    int iy = static_cast<int>(std::floor((p.y - g.origin.y) / g.vsize.y));
    int iz = static_cast<int>(std::floor((p.z - g.origin.z) / g.vsize.z));
    if (ix < 0 || ix >= g.nx || iy < 0 || iy >= g.ny || iz < 0 || iz >= g.nz) return std::nullopt;
    return VoxelIndex{iz, ix, iy};
}

// ---------------------------------------------------------------------------
// Depth bins for lifting pixel fields into frustums.
// ---------------------------------------------------------------------------

struct DepthBins {
    std::vector<float> depths; // strictly increasing, optical-axis depth
    std::vector<float> deltas; // spacing; last entry replicates its predecessor

    int count() const { return static_cast<int>(depths.size()); }
};

inline DepthBins make_depth_bins(std::vector<float> depths) {
    if (depths.size() < 2) throw std::invalid_argument("depth bins: need >= 2 depths");
    for (size_t i = 1; i < depths.size(); ++i)
        if (depths[i] <= depths[i - 1])
            throw std::invalid_argument("depth bins: depths must be strictly increasing");
    DepthBins b;
    b.deltas.resize(depths.size());
    for (size_t i = 0; i + 1 < depths.size(); ++i) b.deltas[i] = depths[i + 1] - depths[i];
    b.deltas.back() = b.deltas[b.deltas.size() - 2];
    b.depths = std::move(depths);
    return b;
}

// D bins centered on a uniform partition of [near, far].
inline DepthBins uniform_depth_bins(float near, float far, int d) {
    if (!(near > 0) || !(far > near) || d < 2)
        throw std::invalid_argument("depth bins: need 0 < near < far, d >= 2");
    std::vector<float> depths(d);
    float step = (far - near) / d;
    for (int i = 0; i < d; ++i) depths[i] = near + (i + 0.5f) * step;
    return make_depth_bins(std::move(depths));
}

// ---------------------------------------------------------------------------
// Pose JSON record: {"R": [9 floats, row-major], "t": [3], "fx", "fy", "cx", "cy"}
// ---------------------------------------------------------------------------

inline nlohmann::json pose_to_json(const CameraPose& cam) {
    nlohmann::json j;
    j["R"] = std::vector<float>(cam.R.m.begin(), cam.R.m.end());
    j["t"] = std::vector<float>{cam.t.x, cam.t.y, cam.t.z};
    j["fx"] = cam.fx;
    j["fy"] = cam.fy;
    j["cx"] = cam.cx;
    j["cy"] = cam.cy;
    return j;
}

inline CameraPose pose_from_json(const nlohmann::json& j) {
    CameraPose cam;
    auto r = j.at("R").get<std::vector<float>>();
    auto t = j.at("t").get<std::vector<float>>();
    if (r.size() != 9 || t.size() != 3) throw std::runtime_error("pose json: bad R/t length");
    std::copy(r.begin(), r.end(), cam.R.m.begin());
    cam.t = {t[0], t[1], t[2]};
    cam.fx = j.at("fx").get<float>();
    cam.fy = j.at("fy").get<float>();
    cam.cx = j.at("cx").get<float>();
    cam.cy = j.at("cy").get<float>();
    return cam;
}

} // namespace nfldm
