#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "camera.hpp"

namespace nfldm {

// Corner numbering of a cell: bit 0..3 ring the bottom face
// (000, 100, 110, 010 in xyz), bit 4..7 the same ring on top.
// Edges 0..3 bottom ring, 4..7 top ring, 8..11 vertical.
namespace mc {

constexpr int corner_xyz[8][3] = {
    {0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
    {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1},
};
constexpr int edge_corner[12][2] = {
    {0, 1}, {1, 2}, {2, 3}, {3, 0},
    {4, 5}, {5, 6}, {6, 7}, {7, 4},
    {0, 4}, {1, 5}, {2, 6}, {3, 7},
};
// Each face as a corner cycle that is counterclockwise seen from outside
// the cell.
constexpr int face_cycle[6][4] = {
    {0, 3, 2, 1}, // z = 0
    {4, 5, 6, 7}, // z = 1
    {0, 1, 5, 4}, // y = 0
    {3, 7, 6, 2}, // y = 1
    {0, 4, 7, 3}, // x = 0
    {1, 2, 6, 5}, // x = 1
};

} // namespace mc

// The 256-case lookup: for each in/out corner pattern, the crossed-edge bit
// mask and a fan triangulation (flat edge-id triples) of the surface inside
// the cell. Rows are generated once by tracing the crossed edges around the
// cell faces: within a face, each crossing where the counterclockwise walk
// leaves the inside region connects to the crossing just before it along
// the walk. On a face with four crossings that choice cuts each inside
// corner off separately (the chord between a corner's two crossings), and
// it is a function of the shared face pattern alone, so adjacent cells
// always agree and the extracted surface is watertight.
struct MarchingTables {
    std::array<uint16_t, 256> edge_mask{};
    std::array<std::vector<int8_t>, 256> tris;

    static const MarchingTables& get() {
        static const MarchingTables t = build();
        return t;
    }

    static MarchingTables build() {
        int edge_of_pair[8][8];
        for (auto& row : edge_of_pair)
            for (int& v : row) v = -1;
        for (int e = 0; e < 12; ++e) {
            int a = mc::edge_corner[e][0], b = mc::edge_corner[e][1];
            edge_of_pair[a][b] = edge_of_pair[b][a] = e;
        }

        MarchingTables t;
        for (int mask = 0; mask < 256; ++mask) {
            bool in[8];
            for (int c = 0; c < 8; ++c) in[c] = (mask >> c) & 1;

            uint16_t em = 0;
            for (int e = 0; e < 12; ++e)
                if (in[mc::edge_corner[e][0]] != in[mc::edge_corner[e][1]]) em |= uint16_t(1) << e;
            t.edge_mask[mask] = em;
            if (em == 0) continue;

            // succ[e]: the crossing reached from e across the face where the
            // walk over e exits the inside region.
            int succ[12];
            for (int& v : succ) v = -1;
            for (const auto& cyc : mc::face_cycle) {
                int crossings[4], n = 0;
                for (int k = 0; k < 4; ++k) {
                    int a = cyc[k], b = cyc[(k + 1) % 4];
                    if (in[a] != in[b]) crossings[n++] = k;
                }
                for (int k = 0; k < n; ++k) {
                    int a = cyc[crossings[k]], b = cyc[(crossings[k] + 1) % 4];
                    if (!(in[a] && !in[b])) continue; // keep the leaving crossings
                    int prev = crossings[(k + n - 1) % n];
                    int na = cyc[prev], nb = cyc[(prev + 1) % 4];
                    if (in[na] || !in[nb]) throw std::logic_error("marching tables: walk broke");
                    succ[edge_of_pair[a][b]] = edge_of_pair[na][nb];
                }
            }

            bool used[12] = {};
            for (int e0 = 0; e0 < 12; ++e0) {
                if (!(em >> e0 & 1) || used[e0]) continue;
                int poly[12], len = 0, e = e0;
                do {
                    if (len >= 12 || succ[e] < 0) throw std::logic_error("marching tables: open loop");
                    poly[len++] = e;
                    used[e] = true;
                    e = succ[e];
                } while (e != e0);
                if (len < 3) throw std::logic_error("marching tables: short loop");
                // The trace runs with the inside region on the right; reverse
                // so triangle winding puts the normal on the outside.
                for (int i = 1; i + 1 < len; ++i) {
                    t.tris[mask].push_back(static_cast<int8_t>(poly[0]));
                    t.tris[mask].push_back(static_cast<int8_t>(poly[len - i]));
                    t.tris[mask].push_back(static_cast<int8_t>(poly[len - i - 1]));
                }
            }
        }
        return t;
    }
};

struct TriMesh {
    std::vector<Vec3> verts;
    std::vector<std::array<uint32_t, 3>> faces;
};

// Extracts the `value > iso` boundary surface from a scalar field sampled on
// the voxel-center lattice of `spec`. Vertices on a shared lattice edge are
// welded, so the output is indexed and watertight wherever the field drops
// below iso before the lattice ends.
inline TriMesh marching_cubes(const std::vector<float>& field, const GridSpec& spec, float iso) {
    if (field.size() != static_cast<size_t>(spec.cells()))
        throw std::invalid_argument("marching_cubes: field size does not match grid");
    if (spec.nx < 2 || spec.ny < 2 || spec.nz < 2)
        throw std::invalid_argument("marching_cubes: need at least 2 samples per axis");
    const auto& tab = MarchingTables::get();
    TriMesh mesh;
    std::unordered_map<int64_t, uint32_t> weld; // lattice edge -> vertex

    auto value = [&](int x, int y, int z) {
        return field[(static_cast<int64_t>(z) * spec.nx + x) * spec.ny + y];
    };
    auto corner_pos = [&](int x, int y, int z) {
        return spec.center(VoxelIndex{z, x, y});
    };

    for (int z = 0; z + 1 < spec.nz; ++z)
        for (int x = 0; x + 1 < spec.nx; ++x)
            for (int y = 0; y + 1 < spec.ny; ++y) {
                int mask = 0;
                for (int c = 0; c < 8; ++c) {
                    const int* d = mc::corner_xyz[c];
                    if (value(x + d[0], y + d[1], z + d[2]) > iso) mask |= 1 << c;
                }
                const auto& tri = tab.tris[mask];
                if (tri.empty()) continue;

                uint32_t vid[12];
                for (int e = 0; e < 12; ++e) {
                    if (!(tab.edge_mask[mask] >> e & 1)) continue;
                    const int* a = mc::corner_xyz[mc::edge_corner[e][0]];
                    const int* b = mc::corner_xyz[mc::edge_corner[e][1]];
                    int ax = x + a[0], ay = y + a[1], az = z + a[2];
                    int bx = x + b[0], by = y + b[1], bz = z + b[2];
                    // canonical lattice edge: low corner + axis
                    int lx = std::min(ax, bx), ly = std::min(ay, by), lz = std::min(az, bz);
                    int axis = ax != bx ? 0 : ay != by ? 1 : 2;
                    int64_t key = (((static_cast<int64_t>(lz) * spec.nx + lx) * spec.ny + ly) << 2) | axis;
                    auto it = weld.find(key);
                    if (it != weld.end()) {
                        vid[e] = it->second;
                        continue;
                    }
                    float va = value(ax, ay, az), vb = value(bx, by, bz);
                    float tpos = (iso - va) / (vb - va);
                    Vec3 pa = corner_pos(ax, ay, az), pb = corner_pos(bx, by, bz);
                    Vec3 p{pa.x + tpos * (pb.x - pa.x), pa.y + tpos * (pb.y - pa.y),
                           pa.z + tpos * (pb.z - pa.z)};
                    vid[e] = static_cast<uint32_t>(mesh.verts.size());
                    mesh.verts.push_back(p);
                    weld.emplace(key, vid[e]);
                }
                for (size_t i = 0; i + 2 < tri.size(); i += 3)
                    mesh.faces.push_back({vid[tri[i]], vid[tri[i + 1]], vid[tri[i + 2]]});
            }
    return mesh;
}

inline void write_ply(const std::string& path, const TriMesh& mesh) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_ply: cannot open " + path);
    f << "ply\nformat ascii 1.0\n";
    f << "element vertex " << mesh.verts.size() << "\n";
    f << "property float x\nproperty float y\nproperty float z\n";
    f << "element face " << mesh.faces.size() << "\n";
    f << "property list uchar int vertex_indices\nend_header\n";
    for (const Vec3& v : mesh.verts) f << v.x << " " << v.y << " " << v.z << "\n";
    for (const auto& t : mesh.faces) f << "3 " << t[0] << " " << t[1] << " " << t[2] << "\n";
    if (!f) throw std::runtime_error("write_ply: write failed for " + path);
}

} // namespace nfldm
