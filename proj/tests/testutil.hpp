#pragma once

#include <filesystem>
#include <string>

#include "p2ilf/bundle.hpp"

namespace testutil {

using namespace p2ilf;

inline CameraIntrinsics simple_camera(int w = 640, int h = 480, double f = 800.0) {
    CameraIntrinsics intr;
    intr.fx = intr.fy = f;
    intr.cx = w / 2.0;
    intr.cy = h / 2.0;
    intr.width = w;
    intr.height = h;
    return intr;
}

inline LabelledMesh single_triangle(double size = 80.0, double z = 0.0) {
    LabelledMesh m;
    m.vertices = {Vec3(-size, -size * 0.8, z), Vec3(size, -size * 0.7, z), Vec3(0.0, size, z)};
    m.faces = {{0, 1, 2}};
    return m;
}

// two parallel triangles on the optical axis; the rear one is occluded
inline LabelledMesh stacked_triangles(double gap = 100.0) {
    LabelledMesh m = single_triangle(80.0, 0.0);
    const int base = 3;
    for (const Vec3& v : single_triangle(30.0, 0.0).vertices) {
        m.vertices.push_back(v + Vec3(0, 0, gap));
    }
    m.faces.push_back({base, base + 1, base + 2});
    return m;
}

inline LabelledMesh regular_grid(int n = 6, double spacing = 10.0) {
    LabelledMesh m;
    for (int j = 0; j <= n; ++j) {
        for (int i = 0; i <= n; ++i) {
            m.vertices.push_back(Vec3(i * spacing, j * spacing, 0.0));
        }
    }
    auto idx = [n](int i, int j) { return j * (n + 1) + i; };
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < n; ++i) {
            m.faces.push_back({idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)});
            m.faces.push_back({idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)});
        }
    }
    return m;
}

inline LabelledMesh tetrahedron(double scale = 10.0) {
    LabelledMesh m;
    m.vertices = {Vec3(1, 1, 1), Vec3(1, -1, -1), Vec3(-1, 1, -1), Vec3(-1, -1, 1)};
    for (Vec3& v : m.vertices) {
        v *= scale;
    }
    m.faces = {{0, 2, 1}, {0, 1, 3}, {0, 3, 2}, {1, 2, 3}};
    return m;
}

inline RigidPose random_pose(Rng& rng, double max_angle = 0.6, double depth = 500.0) {
    Vec6 delta;
    for (int i = 0; i < 3; ++i) {
        delta(i) = rng.uniform(-max_angle, max_angle);
    }
    delta(3) = rng.uniform(-50.0, 50.0);
    delta(4) = rng.uniform(-40.0, 40.0);
    delta(5) = rng.uniform(-60.0, 60.0);
    RigidPose base;
    base.t = Vec3(0, 0, depth);
    return apply_increment(base, delta);
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        namespace fs = std::filesystem;
        path_ = fs::temp_directory_path() /
                ("p2ilf_test_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }

    std::string file(const std::string& name) const { return (path_ / name).string(); }
    std::string str() const { return path_.string(); }

private:
    std::filesystem::path path_;
};

} // namespace testutil
