#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "p2ilf/geometry.hpp"
#include "p2ilf/image.hpp"

namespace p2ilf {

/// Per-class vertex index sets. A vertex may belong to both classes.
struct LandmarkSet3D {
    std::vector<int> ridge;
    std::vector<int> ligament;

    const std::vector<int>& of(LandmarkClass c) const {
        return c == LandmarkClass::Ridge ? ridge : ligament;
    }
    std::vector<int>& of(LandmarkClass c) {
        return c == LandmarkClass::Ridge ? ridge : ligament;
    }

    bool empty() const { return ridge.empty() && ligament.empty(); }

    void normalize() {
        auto tidy = [](std::vector<int>& v) {
            std::sort(v.begin(), v.end());
            v.erase(std::unique(v.begin(), v.end()), v.end());
        };
        tidy(ridge);
        tidy(ligament);
    }

    void validate(size_t vertex_count, const std::string& what) const {
        for (const auto* set : {&ridge, &ligament}) {
            for (int i : *set) {
                if (i < 0 || static_cast<size_t>(i) >= vertex_count) {
                    throw IndexMismatch(what + ": landmark vertex index " + std::to_string(i) +
                                        " out of range (vertex count " +
                                        std::to_string(vertex_count) + ")");
                }
            }
        }
    }
};

/// Triangle mesh with per-vertex anatomical labels. Coordinates in mm.
struct LabelledMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<int, 3>> faces;
    LandmarkSet3D labels;
    // model-frame direction of the liver's anterior side (set by landmark files)
    Vec3 anterior = Vec3::UnitZ();

    void validate(const std::string& what = "mesh") const {
        for (const auto& f : faces) {
            for (int i : f) {
                if (i < 0 || static_cast<size_t>(i) >= vertices.size()) {
                    throw IndexMismatch(what + ": face index " + std::to_string(i) +
                                        " out of range");
                }
            }
            if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) {
                throw IndexMismatch(what + ": face repeats a vertex");
            }
        }
        labels.validate(vertices.size(), what);
    }
};

struct MeshEdge {
    int v0 = -1;
    int v1 = -1;      // v0 < v1
    int face0 = -1;
    int face1 = -1;   // -1 for boundary edges
};

/// Pose-independent adjacency, built once per mesh.
struct MeshTopology {
    std::vector<MeshEdge> edges;
    std::vector<std::vector<int>> vertex_neighbours; // one-ring by shared edge
    std::vector<uint8_t> vertex_on_boundary;
    std::vector<uint8_t> vertex_isolated;
};

inline MeshTopology build_topology(const LabelledMesh& mesh) {
    MeshTopology topo;
    const size_t n = mesh.vertices.size();
    std::unordered_map<uint64_t, int> edge_index;
    edge_index.reserve(mesh.faces.size() * 3);
    auto key = [](int a, int b) {
        if (a > b) {
            std::swap(a, b);
        }
        return (static_cast<uint64_t>(a) << 32) | static_cast<uint32_t>(b);
    };
    for (size_t fi = 0; fi < mesh.faces.size(); ++fi) {
        const auto& f = mesh.faces[fi];
        for (int e = 0; e < 3; ++e) {
            const int a = f[static_cast<size_t>(e)];
            const int b = f[static_cast<size_t>((e + 1) % 3)];
            auto [it, inserted] = edge_index.try_emplace(key(a, b), static_cast<int>(topo.edges.size()));
            if (inserted) {
                MeshEdge me;
                me.v0 = std::min(a, b);
                me.v1 = std::max(a, b);
                me.face0 = static_cast<int>(fi);
                topo.edges.push_back(me);
            } else {
                topo.edges[static_cast<size_t>(it->second)].face1 = static_cast<int>(fi);
            }
        }
    }
    topo.vertex_neighbours.resize(n);
    topo.vertex_on_boundary.assign(n, 0);
    topo.vertex_isolated.assign(n, 1);
    for (const MeshEdge& e : topo.edges) {
        topo.vertex_neighbours[static_cast<size_t>(e.v0)].push_back(e.v1);
        topo.vertex_neighbours[static_cast<size_t>(e.v1)].push_back(e.v0);
        topo.vertex_isolated[static_cast<size_t>(e.v0)] = 0;
        topo.vertex_isolated[static_cast<size_t>(e.v1)] = 0;
        if (e.face1 < 0) {
            topo.vertex_on_boundary[static_cast<size_t>(e.v0)] = 1;
            topo.vertex_on_boundary[static_cast<size_t>(e.v1)] = 1;
        }
    }
    return topo;
}

/// Per-axis (x - mean) / (max - min). Labels and connectivity unchanged.
inline LabelledMesh normalize_vertices(const LabelledMesh& mesh) {
    if (mesh.vertices.empty()) {
        throw DegenerateExtent("normalize_vertices: empty mesh");
    }
    Vec3 lo = mesh.vertices[0];
    Vec3 hi = mesh.vertices[0];
    Vec3 mean = Vec3::Zero();
    for (const Vec3& v : mesh.vertices) {
        lo = lo.cwiseMin(v);
        hi = hi.cwiseMax(v);
        mean += v;
    }
    mean /= static_cast<double>(mesh.vertices.size());
    const Vec3 range = hi - lo;
    for (int a = 0; a < 3; ++a) {
        if (range[a] <= 0.0) {
            throw DegenerateExtent("normalize_vertices: zero extent on axis " + std::to_string(a));
        }
    }
    LabelledMesh out = mesh;
    for (Vec3& v : out.vertices) {
        v = (v - mean).cwiseQuotient(range);
    }
    return out;
}

/// One dilation pass adds every unlabeled vertex within Euclidean `radius` of
/// a currently labeled vertex of `cls`; repeated `passes` times.
inline LabelledMesh dilate_labels_3d(const LabelledMesh& mesh, LandmarkClass cls,
                                     double radius = 20.0, int passes = 2) {
    if (radius <= 0.0) {
        throw DataError("dilate_labels_3d: radius must be positive");
    }
    if (passes < 1) {
        throw DataError("dilate_labels_3d: passes must be >= 1");
    }
    LabelledMesh out = mesh;
    std::vector<uint8_t> labeled(mesh.vertices.size(), 0);
    for (int i : out.labels.of(cls)) {
        labeled[static_cast<size_t>(i)] = 1;
    }
    const double r2 = radius * radius;
    for (int pass = 0; pass < passes; ++pass) {
        std::vector<int> frontier;
        for (size_t i = 0; i < labeled.size(); ++i) {
            if (labeled[i]) {
                frontier.push_back(static_cast<int>(i));
            }
        }
        std::vector<int> added;
        for (size_t i = 0; i < mesh.vertices.size(); ++i) {
            if (labeled[i]) {
                continue;
            }
            for (int j : frontier) {
                if ((mesh.vertices[i] - mesh.vertices[static_cast<size_t>(j)]).squaredNorm() <= r2) {
                    added.push_back(static_cast<int>(i));
                    break;
                }
            }
        }
        if (added.empty()) {
            break;
        }
        for (int i : added) {
            labeled[static_cast<size_t>(i)] = 1;
        }
    }
    std::vector<int>& set = out.labels.of(cls);
    set.clear();
    for (size_t i = 0; i < labeled.size(); ++i) {
        if (labeled[i]) {
            set.push_back(static_cast<int>(i));
        }
    }
    return out;
}

/// Class-wise union of per-view landmark sets.
inline LandmarkSet3D merge_view_landmarks(const std::vector<LandmarkSet3D>& views,
                                          size_t vertex_count) {
    LandmarkSet3D merged;
    for (const LandmarkSet3D& v : views) {
        v.validate(vertex_count, "merge_view_landmarks");
        merged.ridge.insert(merged.ridge.end(), v.ridge.begin(), v.ridge.end());
        merged.ligament.insert(merged.ligament.end(), v.ligament.begin(), v.ligament.end());
    }
    merged.normalize();
    return merged;
}

/// Mean over interior vertices of |v - mean(one-ring)|^2, uniform weights.
/// Boundary and isolated vertices are excluded.
inline double laplacian_smoothness(const LabelledMesh& mesh) {
    const MeshTopology topo = build_topology(mesh);
    double sum = 0.0;
    size_t count = 0;
    for (size_t i = 0; i < mesh.vertices.size(); ++i) {
        if (topo.vertex_isolated[i] || topo.vertex_on_boundary[i]) {
            continue;
        }
        const auto& ring = topo.vertex_neighbours[i];
        Vec3 mean = Vec3::Zero();
        for (int j : ring) {
            mean += mesh.vertices[static_cast<size_t>(j)];
        }
        mean /= static_cast<double>(ring.size());
        sum += (mesh.vertices[i] - mean).squaredNorm();
        ++count;
    }
    return count ? sum / static_cast<double>(count) : 0.0;
}

/// Mean over edges of (len - len_ref)^2. Requires identical connectivity.
inline double edge_length_penalty(const LabelledMesh& mesh, const LabelledMesh& reference) {
    if (mesh.vertices.size() != reference.vertices.size() || mesh.faces != reference.faces) {
        throw ConnectivityMismatch("edge_length_penalty: meshes differ in connectivity");
    }
    const MeshTopology topo = build_topology(mesh);
    if (topo.edges.empty()) {
        return 0.0;
    }
    double sum = 0.0;
    for (const MeshEdge& e : topo.edges) {
        const double len = (mesh.vertices[static_cast<size_t>(e.v1)] -
                            mesh.vertices[static_cast<size_t>(e.v0)]).norm();
        const double len_ref = (reference.vertices[static_cast<size_t>(e.v1)] -
                                reference.vertices[static_cast<size_t>(e.v0)]).norm();
        sum += (len - len_ref) * (len - len_ref);
    }
    return sum / static_cast<double>(topo.edges.size());
}

inline LabelledMesh transformed(const LabelledMesh& mesh, const RigidPose& pose) {
    LabelledMesh out = mesh;
    for (Vec3& v : out.vertices) {
        v = pose.apply(v);
    }
    out.anterior = pose.R * mesh.anterior;
    return out;
}

// ---- Wavefront OBJ (v/f records, 1-based indices) ----

inline LabelledMesh load_obj(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw MissingAsset("cannot open OBJ file: " + path);
    }
    LabelledMesh mesh;
    std::string line;
    int lineno = 0;
    auto fail = [&](const std::string& why) {
        throw ParseError(path + ":" + std::to_string(lineno) + ": " + why);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (line.size() >= 2 && line[0] == 'v' && (line[1] == ' ' || line[1] == '\t')) {
            std::istringstream ss(line.substr(2));
            Vec3 v;
            if (!(ss >> v.x() >> v.y() >> v.z())) {
                fail("malformed vertex record");
            }
            mesh.vertices.push_back(v);
        } else if (line.size() >= 2 && line[0] == 'f' && (line[1] == ' ' || line[1] == '\t')) {
            std::istringstream ss(line.substr(2));
            std::vector<int> idx;
            std::string tok;
            while (ss >> tok) {
                // "f 1/2/3" style: the first field is the vertex index
                const size_t slash = tok.find('/');
                const std::string head = slash == std::string::npos ? tok : tok.substr(0, slash);
                int v = 0;
                const auto res = std::from_chars(head.data(), head.data() + head.size(), v);
                if (res.ec != std::errc() || res.ptr != head.data() + head.size()) {
                    fail("malformed face index '" + tok + "'");
                }
                if (v < 0) {
                    v = static_cast<int>(mesh.vertices.size()) + v + 1; // relative index
                }
                idx.push_back(v - 1);
            }
            if (idx.size() < 3) {
                fail("face with fewer than 3 vertices");
            }
            for (size_t k = 2; k < idx.size(); ++k) { // fan-triangulate polygons
                mesh.faces.push_back({idx[0], idx[k - 1], idx[k]});
            }
        }
        // everything else (vn, vt, comments, groups) is ignored
    }
    try {
        mesh.validate(path);
    } catch (const IndexMismatch& e) {
        throw ParseError(e.what());
    }
    return mesh;
}

inline void save_obj(const LabelledMesh& mesh, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write OBJ file: " + path);
    }
    char buf[128];
    for (const Vec3& v : mesh.vertices) {
        std::snprintf(buf, sizeof(buf), "v %.17g %.17g %.17g\n", v.x(), v.y(), v.z());
        out << buf;
    }
    for (const auto& f : mesh.faces) {
        out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
    }
    if (!out) {
        throw DataError("failed writing OBJ file: " + path);
    }
}

} // namespace p2ilf
