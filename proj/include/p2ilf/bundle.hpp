#pragma once

#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "p2ilf/io.hpp"
#include "p2ilf/mesh.hpp"
#include "p2ilf/metrics.hpp"
#include "p2ilf/registration.hpp"
#include "p2ilf/render.hpp"

namespace p2ilf {

/// One evaluation case: mesh + 3D landmarks, camera, 2D landmark map, and
/// optionally the laparoscopic image, a liver-region mask and a pose.
struct CaseBundle {
    std::string id;
    std::string manifest_path;
    LabelledMesh mesh;  // labels filled from the 3D landmark file
    CameraIntrinsics camera;
    LandmarkMap2D landmarks2d;
    std::optional<Image<Rgb8>> image;
    std::optional<SoftMask> region_mask;
    std::optional<RigidPose> pose;
};

inline CaseBundle load_bundle(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    const Json j = load_json_file(manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();
    auto resolve = [&](const std::string& rel) { return (base / rel).string(); };
    auto require = [&](const char* key) {
        if (!j.contains(key)) {
            throw MissingAsset(manifest_path + ": missing required key '" + std::string(key) + "'");
        }
        return resolve(j.at(key).get<std::string>());
    };

    CaseBundle b;
    b.manifest_path = manifest_path;
    b.id = j.value("id", fs::path(manifest_path).stem().string());
    b.mesh = load_obj(require("mesh"));
    load_landmarks3d_json(require("landmarks3d"), b.mesh);
    b.camera = load_camera_json(require("camera"));
    b.landmarks2d = load_landmark_map_png(require("landmarks2d"));
    if (b.landmarks2d.width != b.camera.width || b.landmarks2d.height != b.camera.height) {
        throw DimensionMismatch(manifest_path + ": landmark map is " +
                                std::to_string(b.landmarks2d.width) + "x" +
                                std::to_string(b.landmarks2d.height) + " but camera is " +
                                std::to_string(b.camera.width) + "x" +
                                std::to_string(b.camera.height));
    }
    if (j.contains("image")) {
        b.image = load_rgb_png(resolve(j.at("image").get<std::string>()));
        if (b.image->width != b.camera.width || b.image->height != b.camera.height) {
            throw DimensionMismatch(manifest_path + ": image size does not match camera");
        }
    }
    if (j.contains("mask")) {
        b.region_mask = load_mask_png(resolve(j.at("mask").get<std::string>()));
        if (b.region_mask->width != b.camera.width || b.region_mask->height != b.camera.height) {
            throw DimensionMismatch(manifest_path + ": mask size does not match camera");
        }
    }
    if (j.contains("pose")) {
        b.pose = load_pose_json(resolve(j.at("pose").get<std::string>()));
    }
    return b;
}

inline RegistrationProblem problem_from_bundle(const CaseBundle& b) {
    RegistrationProblem prob;
    prob.mesh = b.mesh;
    prob.landmarks3d = b.mesh.labels;
    prob.target2d = b.landmarks2d;
    prob.silhouette_target = b.region_mask;
    prob.intr = b.camera;
    return prob;
}

// ---- synthetic test data ----

namespace detail {

struct IcoBuilder {
    std::vector<Vec3> verts;
    std::vector<std::array<int, 3>> faces;
    std::map<std::pair<int, int>, int> midpoints;

    int midpoint(int a, int b) {
        const auto key = std::minmax(a, b);
        auto it = midpoints.find(key);
        if (it != midpoints.end()) {
            return it->second;
        }
        const Vec3 m = (verts[static_cast<size_t>(a)] + verts[static_cast<size_t>(b)]).normalized();
        verts.push_back(m);
        const int idx = static_cast<int>(verts.size()) - 1;
        midpoints.emplace(key, idx);
        return idx;
    }
};

} // namespace detail

/// Unit icosphere with `subdivisions` refinement steps.
inline LabelledMesh make_icosphere(int subdivisions) {
    const double t = (1.0 + std::sqrt(5.0)) / 2.0;
    detail::IcoBuilder b;
    const double v[12][3] = {{-1, t, 0}, {1, t, 0},  {-1, -t, 0}, {1, -t, 0},
                             {0, -1, t}, {0, 1, t},  {0, -1, -t}, {0, 1, -t},
                             {t, 0, -1}, {t, 0, 1},  {-t, 0, -1}, {-t, 0, 1}};
    for (const auto& p : v) {
        b.verts.push_back(Vec3(p[0], p[1], p[2]).normalized());
    }
    const int f[20][3] = {{0, 11, 5}, {0, 5, 1},   {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                          {1, 5, 9},  {5, 11, 4},  {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                          {3, 9, 4},  {3, 4, 2},   {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                          {4, 9, 5},  {2, 4, 11},  {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
    for (const auto& face : f) {
        b.faces.push_back({face[0], face[1], face[2]});
    }
    for (int s = 0; s < subdivisions; ++s) {
        std::vector<std::array<int, 3>> next;
        next.reserve(b.faces.size() * 4);
        for (const auto& face : b.faces) {
            const int m01 = b.midpoint(face[0], face[1]);
            const int m12 = b.midpoint(face[1], face[2]);
            const int m20 = b.midpoint(face[2], face[0]);
            next.push_back({face[0], m01, m20});
            next.push_back({face[1], m12, m01});
            next.push_back({face[2], m20, m12});
            next.push_back({m01, m12, m20});
        }
        b.faces = std::move(next);
    }
    LabelledMesh mesh;
    mesh.vertices = std::move(b.verts);
    mesh.faces = std::move(b.faces);
    return mesh;
}

/// Liver-like blob for tests and demos: a bumpy squashed icosphere (~mm scale)
/// with a ridge arc painted along the lower anterior margin and a ligament
/// strip along the anterior meridian. Anterior is +z in the model frame.
inline LabelledMesh make_synthetic_liver(uint64_t seed, int subdivisions = 3,
                                         double base_radius = 70.0) {
    LabelledMesh mesh = make_icosphere(subdivisions);
    Rng rng(mix_seed(seed, 0xb10b));
    // a few smooth radial lobes keep the shape star-shaped
    std::vector<Vec3> lobe_dir;
    std::vector<double> lobe_amp;
    for (int i = 0; i < 5; ++i) {
        Vec3 d(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
        if (d.norm() < 1e-6) {
            d = Vec3::UnitX();
        }
        lobe_dir.push_back(d.normalized());
        lobe_amp.push_back(rng.uniform(-0.12, 0.22));
    }
    for (Vec3& v : mesh.vertices) {
        const Vec3 dir = v;  // unit sphere vertex
        double factor = 1.0;
        for (size_t i = 0; i < lobe_dir.size(); ++i) {
            const double c = std::max(0.0, dir.dot(lobe_dir[i]));
            factor += lobe_amp[i] * c * c * c;
        }
        factor = std::max(0.6, factor);
        v = base_radius * factor * Vec3(1.25 * dir.x(), 0.9 * dir.y(), 0.8 * dir.z());
    }
    for (size_t i = 0; i < mesh.vertices.size(); ++i) {
        const Vec3 dir = mesh.vertices[i].normalized();
        // model frame: +y up, +z anterior. Ridge hugs the lower anterior rim.
        if (std::abs(dir.y() + 0.55) < 0.13 && dir.z() > 0.1) {
            mesh.labels.ridge.push_back(static_cast<int>(i));
        }
        if (std::abs(dir.x()) < 0.11 && dir.z() > 0.1 && dir.y() > -0.25) {
            mesh.labels.ligament.push_back(static_cast<int>(i));
        }
    }
    mesh.labels.normalize();
    mesh.anterior = Vec3::UnitZ();
    if (mesh.labels.ridge.empty() || mesh.labels.ligament.empty()) {
        throw AlgorithmError("make_synthetic_liver: label painting produced an empty class");
    }
    return mesh;
}

/// Convex blob with exactly 2n-4 triangular faces: the convex hull of n
/// generic points on an anisotropic sphere, found by brute force (fine at
/// test scale). 27 points give a 50-face mesh.
inline LabelledMesh make_convex_blob(uint64_t seed, int n_points = 27,
                                     const Vec3& radii = Vec3(70.0, 50.0, 45.0)) {
    Rng rng(mix_seed(seed, 0xc0a7));
    std::vector<Vec3> pts;
    while (static_cast<int>(pts.size()) < n_points) {
        Vec3 d(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
        if (d.norm() < 1e-3 || d.norm() > 1.0) {
            continue;
        }
        d.normalize();
        pts.push_back(d.cwiseProduct(radii));
    }
    LabelledMesh mesh;
    mesh.vertices = pts;
    const int n = n_points;
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            for (int k = j + 1; k < n; ++k) {
                const Vec3 nrm = (pts[static_cast<size_t>(j)] - pts[static_cast<size_t>(i)])
                                     .cross(pts[static_cast<size_t>(k)] - pts[static_cast<size_t>(i)]);
                int pos = 0;
                int neg = 0;
                for (int m = 0; m < n; ++m) {
                    if (m == i || m == j || m == k) {
                        continue;
                    }
                    const double s = nrm.dot(pts[static_cast<size_t>(m)] - pts[static_cast<size_t>(i)]);
                    pos += s > 0.0;
                    neg += s < 0.0;
                }
                if (pos == 0) {
                    mesh.faces.push_back({i, j, k});  // all on the negative side
                } else if (neg == 0) {
                    mesh.faces.push_back({i, k, j});
                }
            }
        }
    }
    return mesh;
}

/// Ground-truth pose sampler for synthetic cases: anterior roughly facing the
/// camera with moderate rotation and a mid-range depth.
inline RigidPose sample_synthetic_pose(const LabelledMesh& mesh, const CameraIntrinsics& intr,
                                       uint64_t seed, double max_angle = 0.7853981633974483,
                                       double depth_min = 450.0, double depth_max = 650.0) {
    RigidPose pose = init_random_pose(mesh, intr, mix_seed(seed, 0x6715), depth_min, depth_max,
                                      max_angle);
    Rng rng(mix_seed(seed, 0x0ff5e7));
    pose.t.x() += rng.uniform(-30.0, 30.0);
    pose.t.y() += rng.uniform(-20.0, 20.0);
    return pose;
}

struct SynthOptions {
    double point_radius = 3.0;    // landmark disc radius, full-resolution px
    double sil_dilation = 3.0;    // silhouette curve dilation, px
    bool write_image = true;
    bool write_mask = true;
};

struct SyntheticCase {
    std::string id;
    std::string manifest_path;
    RigidPose gt_pose;
    uint64_t seed = 0;
    LandmarkMap2D landmarks2d;
};

/// Renders the full-resolution 2D landmark map of `mesh` under `pose`
/// (landmark discs plus the dilated view silhouette).
inline LandmarkMap2D render_case_landmarks(const LabelledMesh& mesh, const RigidPose& pose,
                                           const CameraIntrinsics& intr,
                                           const SynthOptions& opts = {}) {
    LandmarkMap2D map = render_landmarks(mesh, mesh.labels, pose, intr, opts.point_radius);
    const SoftMask hard = render_silhouette(mesh, pose, intr, 1.0, 0.0);
    const LandmarkMap2D sil = extract_view_silhouette(hard, opts.sil_dilation);
    for (size_t i = 0; i < map.mask.size(); ++i) {
        map.mask[i] |= sil.mask[i];
    }
    return map;
}

/// Writes a complete self-consistent case (mesh, landmarks, camera, label
/// map, region mask, stand-in image, ground-truth pose, manifest) to disk.
inline SyntheticCase synth_case(const LabelledMesh& mesh, const CameraIntrinsics& intr,
                                const RigidPose& pose, const std::string& out_dir,
                                const std::string& id, uint64_t seed = 0,
                                const SynthOptions& opts = {}) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const fs::path base(out_dir);

    SyntheticCase result;
    result.id = id;
    result.gt_pose = pose;
    result.seed = seed;
    result.landmarks2d = render_case_landmarks(mesh, pose, intr, opts);

    const std::string mesh_file = id + "_mesh.obj";
    const std::string lm3_file = id + "_landmarks3d.json";
    const std::string cam_file = id + "_camera.json";
    const std::string lm2_file = id + "_landmarks2d.png";
    const std::string mask_file = id + "_mask.png";
    const std::string img_file = id + "_image.png";
    const std::string pose_file = id + "_gt_pose.json";

    save_obj(mesh, (base / mesh_file).string());
    save_landmarks3d_json(mesh, (base / lm3_file).string());
    save_camera_json(intr, (base / cam_file).string());
    save_landmark_map_png(result.landmarks2d, (base / lm2_file).string());
    save_pose_json(pose, (base / pose_file).string());

    const SoftMask hard = render_silhouette(mesh, pose, intr, 1.0, 0.0);
    if (opts.write_mask) {
        save_mask_png(hard, (base / mask_file).string());
    }
    if (opts.write_image) {
        // depth-shaded stand-in for the laparoscopic image
        const ProjectedMesh pm = project_mesh(mesh, pose, intr);
        const Image<double> depth = rasterize_depth(mesh, pm, intr);
        double zmin = std::numeric_limits<double>::infinity();
        double zmax = 0.0;
        for (double z : depth.data) {
            if (std::isfinite(z)) {
                zmin = std::min(zmin, z);
                zmax = std::max(zmax, z);
            }
        }
        Image<Rgb8> img(intr.width, intr.height, Rgb8{24, 16, 20});
        if (zmax > zmin) {
            for (int y = 0; y < intr.height; ++y) {
                for (int x = 0; x < intr.width; ++x) {
                    const double z = depth.at(x, y);
                    if (!std::isfinite(z)) {
                        continue;
                    }
                    const double shade = 0.25 + 0.6 * (1.0 - (z - zmin) / (zmax - zmin));
                    img.at(x, y) = {static_cast<uint8_t>(200 * shade),
                                    static_cast<uint8_t>(90 * shade),
                                    static_cast<uint8_t>(70 * shade)};
                }
            }
        }
        save_rgb_png(img, (base / img_file).string());
    }

    Json manifest{{"id", id},
                  {"mesh", mesh_file},
                  {"landmarks3d", lm3_file},
                  {"camera", cam_file},
                  {"landmarks2d", lm2_file},
                  {"pose", pose_file}};
    if (opts.write_mask) {
        manifest["mask"] = mask_file;
    }
    if (opts.write_image) {
        manifest["image"] = img_file;
    }
    result.manifest_path = (base / (id + "_manifest.json")).string();
    save_json_file(manifest, result.manifest_path);
    return result;
}

// ---- overlay rendering ----

/// Draws the silhouette boundary (yellow) and the projected visible ridge
/// (red) / ligament (blue) landmarks over the bundle image. When nothing
/// projects into the frame, returns the unmodified image and sets *warned.
inline Image<Rgb8> render_overlay(const CaseBundle& bundle, const RigidPose& pose,
                                  bool* warned = nullptr) {
    if (warned) {
        *warned = false;
    }
    Image<Rgb8> canvas;
    if (bundle.image) {
        canvas = *bundle.image;
    } else {
        canvas = Image<Rgb8>(bundle.camera.width, bundle.camera.height, Rgb8{0, 0, 0});
    }
    Image<uint8_t> occ;
    try {
        const ProjectedMesh pm = project_mesh(bundle.mesh, pose, bundle.camera);
        occ = rasterize_occupancy(bundle.mesh, pm, bundle.camera);
        size_t filled = 0;
        for (uint8_t v : occ.data) {
            filled += v;
        }
        if (filled == 0) {
            throw EmptyProjection("overlay: nothing in frame");
        }
    } catch (const AlgorithmError&) {
        if (warned) {
            *warned = true;
        }
        return canvas;
    }
    // occupancy boundary in yellow
    for (int y = 0; y < occ.height; ++y) {
        for (int x = 0; x < occ.width; ++x) {
            if (!occ.at(x, y)) {
                continue;
            }
            const bool edge = x == 0 || y == 0 || x + 1 == occ.width || y + 1 == occ.height ||
                              !occ.at(x - 1, y) || !occ.at(x + 1, y) || !occ.at(x, y - 1) ||
                              !occ.at(x, y + 1);
            if (edge) {
                canvas.at(x, y) = {255, 255, 0};
            }
        }
    }
    // projected landmark points: ridge red, ligament blue
    try {
        const LandmarkMap2D lm =
            render_landmarks(bundle.mesh, bundle.mesh.labels, pose, bundle.camera, 2.0);
        for (int y = 0; y < lm.height; ++y) {
            for (int x = 0; x < lm.width; ++x) {
                if (lm.test(x, y, LandmarkClass::Ridge)) {
                    canvas.at(x, y) = {255, 0, 0};
                } else if (lm.test(x, y, LandmarkClass::Ligament)) {
                    canvas.at(x, y) = {0, 0, 255};
                }
            }
        }
    } catch (const AlgorithmError&) {
        // landmarks out of view; boundary alone is still useful
    }
    return canvas;
}

// ---- correspondences from landmark data (PnP front end) ----

namespace detail {

// Greedy nearest-neighbour chain from a lexicographic extremum, giving the
// scattered curve samples a stable along-the-curve order.
template <typename PointT>
std::vector<int> chain_order(const std::vector<PointT>& pts) {
    const int n = static_cast<int>(pts.size());
    std::vector<int> order;
    if (n == 0) {
        return order;
    }
    int start = 0;
    for (int i = 1; i < n; ++i) {
        for (int d = 0; d < pts[0].size(); ++d) {
            if (pts[static_cast<size_t>(i)][d] != pts[static_cast<size_t>(start)][d]) {
                if (pts[static_cast<size_t>(i)][d] < pts[static_cast<size_t>(start)][d]) {
                    start = i;
                }
                break;
            }
        }
    }
    std::vector<uint8_t> used(static_cast<size_t>(n), 0);
    order.push_back(start);
    used[static_cast<size_t>(start)] = 1;
    while (static_cast<int>(order.size()) < n) {
        const auto& cur = pts[static_cast<size_t>(order.back())];
        int best = -1;
        double best_d = std::numeric_limits<double>::infinity();
        for (int i = 0; i < n; ++i) {
            if (used[static_cast<size_t>(i)]) {
                continue;
            }
            const double d = (pts[static_cast<size_t>(i)] - cur).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = i;
            }
        }
        order.push_back(best);
        used[static_cast<size_t>(best)] = 1;
    }
    return order;
}

inline std::vector<int> resample_indices(int n, int k) {
    std::vector<int> out;
    if (n <= 0 || k <= 0) {
        return out;
    }
    if (k == 1) {
        out.push_back(0);
        return out;
    }
    for (int i = 0; i < k; ++i) {
        out.push_back(static_cast<int>(std::lround(static_cast<double>(i) * (n - 1) / (k - 1))));
    }
    return out;
}

} // namespace detail

/// Pairs each landmark class's 3D vertices with its 2D pixels by ordering
/// both as curves and resampling to a common count. The chain direction of
/// the 2D side is ambiguous; both orientations are returned (callers keep
/// the PnP fit with the lower residual). 2D pixels are undistorted.
inline std::pair<std::vector<Correspondence>, std::vector<Correspondence>>
correspondences_from_landmarks(const LabelledMesh& mesh, const LandmarkSet3D& lms,
                               const LandmarkMap2D& map2d, const CameraIntrinsics& intr,
                               int per_class = 12) {
    std::vector<Correspondence> fwd;
    std::vector<Correspondence> rev;
    for (LandmarkClass cls : {LandmarkClass::Ridge, LandmarkClass::Ligament}) {
        const auto& verts = lms.of(cls);
        const std::vector<Pixel> px = map2d.pixels_of(cls);
        if (verts.size() < 2 || px.size() < 2) {
            continue;
        }
        std::vector<Vec3> p3;
        for (int vi : verts) {
            p3.push_back(mesh.vertices[static_cast<size_t>(vi)]);
        }
        std::vector<Vec2> p2 = to_vec2(px);
        const std::vector<int> order3 = detail::chain_order(p3);
        const std::vector<int> order2 = detail::chain_order(p2);
        const int k = std::min({per_class, static_cast<int>(p3.size()), static_cast<int>(p2.size())});
        const std::vector<int> s3 = detail::resample_indices(static_cast<int>(p3.size()), k);
        const std::vector<int> s2 = detail::resample_indices(static_cast<int>(p2.size()), k);
        for (int i = 0; i < k; ++i) {
            const Vec3& q3 = p3[static_cast<size_t>(order3[static_cast<size_t>(s3[static_cast<size_t>(i)])])];
            const Vec2 q2 = undistort(
                intr, p2[static_cast<size_t>(order2[static_cast<size_t>(s2[static_cast<size_t>(i)])])] +
                          Vec2(0.5, 0.5));
            const Vec2 q2r = undistort(
                intr,
                p2[static_cast<size_t>(order2[static_cast<size_t>(s2[static_cast<size_t>(k - 1 - i)])])] +
                    Vec2(0.5, 0.5));
            fwd.push_back({q3, q2});
            rev.push_back({q3, q2r});
        }
    }
    return {fwd, rev};
}

// ---- misc tooling ----

inline void write_trace_csv(const std::vector<RegistrationResult>& results,
                            const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write trace file: " + path);
    }
    out << "restart,iteration,loss\n";
    std::vector<const RegistrationResult*> ordered;
    for (const auto& r : results) {
        ordered.push_back(&r);
    }
    std::sort(ordered.begin(), ordered.end(),
              [](const RegistrationResult* a, const RegistrationResult* b) {
                  return a->restart_index < b->restart_index;
              });
    char buf[64];
    for (const RegistrationResult* r : ordered) {
        for (size_t i = 0; i < r->loss_trace.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%d,%zu,%.17g\n", r->restart_index, i,
                          r->loss_trace[i]);
            out << buf;
        }
    }
}

/// Default RNG seed: the P2ILF_SEED environment variable, else 0.
inline uint64_t default_seed() {
    if (const char* env = std::getenv("P2ILF_SEED")) {
        return static_cast<uint64_t>(std::strtoull(env, nullptr, 10));
    }
    return 0;
}

} // namespace p2ilf
