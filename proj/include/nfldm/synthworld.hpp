#pragma once

// Procedural box-world data source: deterministic scene sampling, an analytic
// ray-traced RGB-D renderer, a six-camera rig with short driving trajectories,
// bird's-eye-view rasters, and dataset (de)serialization.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include <nfldm/camera.hpp>
#include <nfldm/io.hpp>
#include <nfldm/rng.hpp>

namespace nfldm {

struct WorldConfig {
    float half_extent = 12.f;   // world is [-e, e]^2 horizontally
    int min_boxes = 2, max_boxes = 6;
    int image_size = 32;
    int n_cameras = 6;          // yaw ring, 360/n apart
    int traj_steps = 9;
    float cam_height = 1.6f;
    float hfov_deg = 70.f;
    float near = 0.5f, far = 28.f;
    int bev_size = 16;
};

struct WorldBox {
    Vec3 center, half;
    float albedo[3];
    int cls = 0;  // 0 building, 1 vegetation
};

struct SceneDescription {
    std::vector<WorldBox> boxes;
    float ground_color[3] = {0.42f, 0.40f, 0.36f};
    float sky_color[3] = {0.65f, 0.78f, 0.92f};
    float global_style = 1.f;  // brightness scalar in [0, 1]
    std::vector<float> trajectory;  // traj_steps * 2 absolute (x, y)
};

// BEV raster legend (also documented in README-format.md)
inline void bev_class_color(int cls, uint8_t rgb[3]) {
    switch (cls) {
        case 1: rgb[0] = 210; rgb[1] = 80; rgb[2] = 60; break;   // building
        case 2: rgb[0] = 70; rgb[1] = 200; rgb[2] = 90; break;   // vegetation
        default: rgb[0] = 50; rgb[1] = 50; rgb[2] = 50; break;   // ground
    }
}

// Camera at `position` yawed about +z; +z_cam forward = rot_z(yaw)*(0,1,0),
// +x_cam right, +y_cam down.
inline CameraPose look_pose(float yaw, Vec3 position, float fx, float fy, float cx, float cy) {
    float s = std::sin(yaw), c = std::cos(yaw);
    CameraPose cam;
    cam.R.m = {c, s, 0.f, 0.f, 0.f, -1.f, -s, c, 0.f};
    cam.t = cam.R * (Vec3{} - position);
    cam.fx = fx; cam.fy = fy; cam.cx = cx; cam.cy = cy;
    return cam;
}

inline float rig_focal(const WorldConfig& cfg) {
    return 0.5f * cfg.image_size / std::tan(0.5f * cfg.hfov_deg * float(M_PI) / 180.f);
}

inline CameraPose rig_camera(const WorldConfig& cfg, Vec3 position, float base_yaw, int cam_idx) {
    float yaw = base_yaw + cam_idx * 2.f * float(M_PI) / cfg.n_cameras;
    float f = rig_focal(cfg);
    float c = 0.5f * (cfg.image_size - 1);
    return look_pose(yaw, position, f, f, c, c);
}

inline SceneDescription generate_scene(uint64_t seed, const WorldConfig& cfg) {
    SceneDescription s;
    Rng rng = substream(seed, "world/scene");

    s.global_style = rng.uniform_f(0.25f, 1.f);

    // trajectory: gentle arc starting near the center
    Rng traj_rng = substream(seed, "world/trajectory");
    float x = traj_rng.uniform_f(-3.f, 3.f), y = traj_rng.uniform_f(-3.f, 3.f);
    float heading = traj_rng.uniform_f(0.f, 2.f * float(M_PI));
    float turn = traj_rng.uniform_f(-0.12f, 0.12f);
    float step = traj_rng.uniform_f(0.9f, 1.4f);
    for (int i = 0; i < cfg.traj_steps; ++i) {
        s.trajectory.push_back(x);
        s.trajectory.push_back(y);
        x = std::clamp(x - step * std::sin(heading), -8.f, 8.f);
        y = std::clamp(y + step * std::cos(heading), -8.f, 8.f);
        heading += turn;
    }

    int n = cfg.min_boxes + int(rng.uniform_int(uint32_t(cfg.max_boxes - cfg.min_boxes + 1)));
    for (int i = 0; i < n; ++i) {
        WorldBox b;
        for (int attempt = 0; attempt < 64; ++attempt) {
            b.center.x = rng.uniform_f(-cfg.half_extent + 3.f, cfg.half_extent - 3.f);
            b.center.y = rng.uniform_f(-cfg.half_extent + 3.f, cfg.half_extent - 3.f);
            bool clear = true;
            for (int t = 0; t < cfg.traj_steps && clear; ++t) {
                float dx = b.center.x - s.trajectory[2 * t];
                float dy = b.center.y - s.trajectory[2 * t + 1];
                clear = dx * dx + dy * dy > 4.5f * 4.5f;
            }
            if (clear) break;
        }
        b.cls = rng.uniform() < 0.3 ? 1 : 0;
        if (b.cls == 0) {
            b.half = {rng.uniform_f(1.0f, 2.5f), rng.uniform_f(1.0f, 2.5f), rng.uniform_f(1.2f, 3.0f)};
            b.albedo[0] = rng.uniform_f(0.45f, 0.85f);
            b.albedo[1] = rng.uniform_f(0.22f, 0.42f);
            b.albedo[2] = rng.uniform_f(0.2f, 0.4f);
        } else {
            b.half = {rng.uniform_f(0.8f, 1.6f), rng.uniform_f(0.8f, 1.6f), rng.uniform_f(0.8f, 1.6f)};
            b.albedo[0] = rng.uniform_f(0.1f, 0.3f);
            b.albedo[1] = rng.uniform_f(0.5f, 0.8f);
            b.albedo[2] = rng.uniform_f(0.15f, 0.4f);
        }
        b.center.z = b.half.z;  // resting on the ground plane z=0
        s.boxes.push_back(b);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Analytic renderer: nearest of ray-plane (ground z=0) and ray-box hits,
// flat shading scaled by global_style brightness. Depth is measured along the
// camera's optical axis; sky pixels report `far`.
// ---------------------------------------------------------------------------

namespace detail {

inline bool ray_box(const Ray& r, const WorldBox& b, float& t_hit) {
    float t0 = 0.f, t1 = 1e30f;
    const float ro[3] = {r.origin.x, r.origin.y, r.origin.z};
    const float rd[3] = {r.dir.x, r.dir.y, r.dir.z};
    const float bc[3] = {b.center.x, b.center.y, b.center.z};
    const float bh[3] = {b.half.x, b.half.y, b.half.z};
    for (int a = 0; a < 3; ++a) {
        if (std::abs(rd[a]) < 1e-9f) {
            if (std::abs(ro[a] - bc[a]) > bh[a]) return false;
            continue;
        }
        float ta = (bc[a] - bh[a] - ro[a]) / rd[a];
        float tb = (bc[a] + bh[a] - ro[a]) / rd[a];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
        if (t0 > t1) return false;
    }
    if (t0 <= 1e-4f) return false;  // origin inside or behind
    t_hit = t0;
    return true;
}

} // namespace detail

struct GroundTruthView {
    std::vector<float> rgb;    // [3, H, W] in [0, 1]
    std::vector<float> depth;  // [H, W] meters (optical axis), far for sky
    int h = 0, w = 0;
};

inline GroundTruthView render_ground_truth(const SceneDescription& scene, const CameraPose& pose,
                                           int res, const WorldConfig& cfg) {
    GroundTruthView out;
    out.h = out.w = res;
    out.rgb.assign(size_t(3) * res * res, 0.f);
    out.depth.assign(size_t(res) * res, 0.f);
    const float bright = 0.45f + 0.55f * scene.global_style;

    for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) {
            Ray r = ray_for_pixel(pose, float(x), float(y));
            float best_t = 1e30f;
            const float* color = scene.sky_color;
            // ground plane z = 0
            if (r.dir.z < -1e-9f) {
                float t = -r.origin.z / r.dir.z;
                if (t > 1e-4f && t < best_t) {
                    best_t = t;
                    color = scene.ground_color;
                }
            }
            for (const auto& b : scene.boxes) {
                float t;
                if (detail::ray_box(r, b, t) && t < best_t) {
                    best_t = t;
                    color = b.albedo;
                }
            }
            // optical-axis depth of the hit
            Vec3 d_cam = pose.R * r.dir;
            float depth = best_t < 1e29f ? best_t * d_cam.z : cfg.far;
            out.depth[size_t(y) * res + x] = std::min(depth, cfg.far);
            for (int ch = 0; ch < 3; ++ch)
                out.rgb[(size_t(ch) * res + y) * res + x] = std::min(1.f, color[ch] * bright);
        }
    return out;
}

// Footprint raster over the horizontal world extent; row 0 is min-y.
inline Image render_bev(const SceneDescription& scene, const WorldConfig& cfg) {
    Image img;
    img.w = img.h = cfg.bev_size;
    img.c = 3;
    img.pix.assign(size_t(img.w) * img.h * 3, 0);
    float cell = 2.f * cfg.half_extent / cfg.bev_size;
    for (int iy = 0; iy < img.h; ++iy)
        for (int ix = 0; ix < img.w; ++ix) {
            float wx = -cfg.half_extent + (ix + 0.5f) * cell;
            float wy = -cfg.half_extent + (iy + 0.5f) * cell;
            int cls = 0;
            for (const auto& b : scene.boxes)
                if (std::abs(wx - b.center.x) <= b.half.x && std::abs(wy - b.center.y) <= b.half.y) {
                    cls = b.cls + 1;
                    break;
                }
            uint8_t rgb[3];
            bev_class_color(cls, rgb);
            for (int ch = 0; ch < 3; ++ch) img.pix[(size_t(iy) * img.w + ix) * 3 + ch] = rgb[ch];
        }
    return img;
}

// ---------------------------------------------------------------------------
// Dataset records: N rig views from the trajectory start plus one held-out
// view from a later trajectory point (novel-view supervision).
// ---------------------------------------------------------------------------

struct DatasetRecord {
    int scene_id = 0;
    std::vector<GroundTruthView> views;
    std::vector<CameraPose> poses;
    int n_input = 0;  // first n_input views feed the encoder; the rest are held out
    float global_style = 1.f;
    std::vector<float> trajectory;
    Image bev;
};

inline DatasetRecord make_record(uint64_t seed, int scene_id, const WorldConfig& cfg) {
    SceneDescription scene = generate_scene(seed + uint64_t(scene_id) * 1000003ULL, cfg);
    DatasetRecord rec;
    rec.scene_id = scene_id;
    rec.global_style = scene.global_style;
    rec.trajectory = scene.trajectory;
    rec.bev = render_bev(scene, cfg);

    Vec3 p0{scene.trajectory[0], scene.trajectory[1], cfg.cam_height};
    for (int k = 0; k < cfg.n_cameras; ++k) {
        CameraPose pose = rig_camera(cfg, p0, 0.f, k);
        rec.poses.push_back(pose);
        rec.views.push_back(render_ground_truth(scene, pose, cfg.image_size, cfg));
    }
    rec.n_input = cfg.n_cameras;

    // held-out view: mid-trajectory position, forward camera
    int mid = cfg.traj_steps / 2;
    Vec3 pm{scene.trajectory[2 * mid], scene.trajectory[2 * mid + 1], cfg.cam_height};
    Rng rng = substream(seed + uint64_t(scene_id) * 1000003ULL, "world/holdout");
    CameraPose held = rig_camera(cfg, pm, rng.uniform_f(0.f, 2.f * float(M_PI)), 0);
    rec.poses.push_back(held);
    rec.views.push_back(render_ground_truth(scene, held, cfg.image_size, cfg));
    return rec;
}

inline void write_dataset(const std::vector<DatasetRecord>& records, const std::string& dir,
                          const WorldConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json meta;
    meta["scenes"] = records.size();
    meta["image_size"] = cfg.image_size;
    meta["near"] = cfg.near;
    meta["far"] = cfg.far;
    meta["bev_size"] = cfg.bev_size;
    meta["half_extent"] = cfg.half_extent;
    std::ofstream(dir + "/meta.json") << meta.dump(2) << "\n";

    char buf[32];
    for (const auto& rec : records) {
        std::snprintf(buf, sizeof buf, "scene_%04d", rec.scene_id);
        std::string sdir = dir + "/" + buf;
        fs::create_directories(sdir);

        const int v = static_cast<int>(rec.views.size());
        const int h = rec.views[0].h, w = rec.views[0].w;
        std::vector<float> depth;
        for (const auto& view : rec.views)
            depth.insert(depth.end(), view.depth.begin(), view.depth.end());
        nft_write_one(sdir + "/depth.nft", "depth",
                      {uint64_t(v), uint64_t(h), uint64_t(w)}, std::move(depth));

        for (int i = 0; i < v; ++i) {
            std::snprintf(buf, sizeof buf, "view_%02d.png", i);
            png_write(sdir + "/" + buf, to_image(rec.views[i].rgb, 3, h, w));
        }
        png_write(sdir + "/bev.png", rec.bev);

        nlohmann::json sj;
        sj["scene_id"] = rec.scene_id;
        sj["n_input"] = rec.n_input;
        sj["global_style"] = rec.global_style;
        sj["trajectory"] = rec.trajectory;
        sj["poses"] = nlohmann::json::array();
        for (const auto& p : rec.poses) sj["poses"].push_back(pose_to_json(p));
        std::ofstream(sdir + "/meta.json") << sj.dump(2) << "\n";
    }
}

inline std::vector<DatasetRecord> read_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(dir + "/meta.json");
    if (!mf) throw std::runtime_error("dataset: missing " + dir + "/meta.json");
    nlohmann::json meta = nlohmann::json::parse(mf);
    const int scenes = meta.at("scenes").get<int>();

    std::vector<DatasetRecord> out;
    char buf[32];
    for (int s = 0; s < scenes; ++s) {
        std::snprintf(buf, sizeof buf, "scene_%04d", s);
        std::string sdir = dir + "/" + buf;
        std::ifstream sf(sdir + "/meta.json");
        if (!sf) throw std::runtime_error("dataset: missing " + sdir + "/meta.json");
        nlohmann::json sj = nlohmann::json::parse(sf);

        DatasetRecord rec;
        rec.scene_id = sj.at("scene_id").get<int>();
        rec.n_input = sj.at("n_input").get<int>();
        rec.global_style = sj.at("global_style").get<float>();
        rec.trajectory = sj.at("trajectory").get<std::vector<float>>();
        for (const auto& pj : sj.at("poses")) rec.poses.push_back(pose_from_json(pj));

        NftTensor depth = nft_read_one(sdir + "/depth.nft");
        if (depth.dims.size() != 3) throw std::runtime_error("dataset: depth.nft wants rank 3");
        const int v = static_cast<int>(depth.dims[0]);
        const int h = static_cast<int>(depth.dims[1]);
        const int w = static_cast<int>(depth.dims[2]);
        for (int i = 0; i < v; ++i) {
            GroundTruthView view;
            view.h = h;
            view.w = w;
            view.depth.assign(depth.data.begin() + size_t(i) * h * w,
                              depth.data.begin() + size_t(i + 1) * h * w);
            std::snprintf(buf, sizeof buf, "view_%02d.png", i);
            view.rgb = to_chw(png_read(sdir + "/" + buf));
            rec.views.push_back(std::move(view));
        }
        rec.bev = png_read(sdir + "/bev.png");
        out.push_back(std::move(rec));
    }
    return out;
}

} // namespace nfldm
