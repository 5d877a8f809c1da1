#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <vector>

#include "p2ilf/distance.hpp"
#include "p2ilf/geometry.hpp"
#include "p2ilf/image.hpp"
#include "p2ilf/mesh.hpp"

namespace p2ilf {

/// Fraction of predicted pixels within `tolerance` of some ground-truth
/// pixel. tolerance 0 means exact overlap. Empty prediction has no defined
/// ratio and yields NA (nullopt).
inline std::optional<double> precision(const std::vector<Pixel>& pred,
                                       const std::vector<Pixel>& gt, double tolerance = 0.0) {
    if (pred.empty()) {
        return std::nullopt;
    }
    if (gt.empty()) {
        return 0.0;
    }
    size_t tp = 0;
    if (tolerance <= 0.0) {
        std::set<std::pair<int, int>> gt_set;
        for (const Pixel& p : gt) {
            gt_set.emplace(p.x(), p.y());
        }
        for (const Pixel& p : pred) {
            tp += gt_set.count({p.x(), p.y()});
        }
    } else {
        const NearestSet2D nn(to_vec2(gt));
        for (const Pixel& p : pred) {
            if (nn.query(Vec2(p.x(), p.y())).dist <= tolerance) {
                ++tp;
            }
        }
    }
    return static_cast<double>(tp) / static_cast<double>(pred.size());
}

/// Dice coefficient 2|B∩C| / (|B|+|C|); NA when both sets are empty.
inline std::optional<double> dsc(const std::vector<Pixel>& pred, const std::vector<Pixel>& gt) {
    if (pred.empty() && gt.empty()) {
        return std::nullopt;
    }
    std::set<std::pair<int, int>> gt_set;
    for (const Pixel& p : gt) {
        gt_set.emplace(p.x(), p.y());
    }
    size_t inter = 0;
    for (const Pixel& p : pred) {
        inter += gt_set.count({p.x(), p.y()});
    }
    return 2.0 * static_cast<double>(inter) /
           static_cast<double>(pred.size() + gt.size());
}

/// Symmetric distance score over curve pixel sets:
///   G = [ sum_{b in B∩Q} d(b, C\FN) + sum_{c in C\FN} d(c, B∩Q) ] / (2|C| d_max)
///       + |FP| / (|I| - 2|C| d_max) + |FN| / |C|
/// with Q the d_max tolerance region around C, FP the predictions outside Q
/// and FN the ground-truth pixels with no prediction within d_max. NA when
/// the ground truth is empty.
inline std::optional<double> symmetric_distance_score(const std::vector<Pixel>& pred,
                                                      const std::vector<Pixel>& gt, double d_max,
                                                      double domain_size) {
    if (gt.empty()) {
        return std::nullopt;
    }
    if (d_max <= 0.0) {
        throw NonPositiveDenominator("symmetric_distance_score: d_max must be positive");
    }
    const double gt_term = 2.0 * static_cast<double>(gt.size()) * d_max;
    if (domain_size <= gt_term) {
        throw NonPositiveDenominator(
            "symmetric_distance_score: |I| <= 2|C|*d_max leaves a non-positive denominator");
    }

    std::vector<Pixel> pred_in;  // B ∩ Q
    size_t fp = 0;
    if (!pred.empty()) {
        const NearestSet2D nn_gt(to_vec2(gt));
        for (const Pixel& b : pred) {
            if (nn_gt.query(Vec2(b.x(), b.y())).dist <= d_max) {
                pred_in.push_back(b);
            } else {
                ++fp;
            }
        }
    }

    std::vector<Pixel> gt_kept;  // C \ FN
    size_t fn = 0;
    if (pred.empty()) {
        fn = gt.size();
    } else {
        const NearestSet2D nn_pred(to_vec2(pred));
        for (const Pixel& c : gt) {
            if (nn_pred.query(Vec2(c.x(), c.y())).dist <= d_max) {
                gt_kept.push_back(c);
            } else {
                ++fn;
            }
        }
    }

    double sums = 0.0;
    if (!pred_in.empty() && !gt_kept.empty()) {
        const NearestSet2D nn_kept(to_vec2(gt_kept));
        for (const Pixel& b : pred_in) {
            sums += nn_kept.query(Vec2(b.x(), b.y())).dist;
        }
        const NearestSet2D nn_in(to_vec2(pred_in));
        for (const Pixel& c : gt_kept) {
            sums += nn_in.query(Vec2(c.x(), c.y())).dist;
        }
    }

    return sums / gt_term + static_cast<double>(fp) / (domain_size - gt_term) +
           static_cast<double>(fn) / static_cast<double>(gt.size());
}

/// Symmetric sum of mean squared nearest-neighbour distances (mm^2).
inline double chamfer3d(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    if (a.empty() || b.empty()) {
        throw EmptySetError("chamfer3d: empty point set");
    }
    auto directed = [](const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
        double sum = 0.0;
        for (const Vec3& p : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const Vec3& q : to) {
                best = std::min(best, (p - q).squaredNorm());
            }
            sum += best;
        }
        return sum / static_cast<double>(from.size());
    };
    return directed(a, b) + directed(b, a);
}

/// Per-class 3D Chamfer distances; nullopt marks a failure (F) for that
/// class. `overall` averages the classes that were evaluated.
struct Metric3DReport {
    std::optional<double> chamfer_ridge;
    std::optional<double> chamfer_ligament;
    std::optional<double> overall;
};

inline std::vector<Vec3> gather_vertices(const LabelledMesh& mesh, const std::vector<int>& idx) {
    std::vector<Vec3> out;
    out.reserve(idx.size());
    for (int i : idx) {
        out.push_back(mesh.vertices[static_cast<size_t>(i)]);
    }
    return out;
}

inline Metric3DReport mean_chamfer(const LandmarkSet3D& pred, const LandmarkSet3D& gt,
                                   const LabelledMesh& mesh) {
    pred.validate(mesh.vertices.size(), "mean_chamfer: prediction");
    gt.validate(mesh.vertices.size(), "mean_chamfer: ground truth");
    Metric3DReport report;
    double sum = 0.0;
    int n = 0;
    for (LandmarkClass cls : {LandmarkClass::Ridge, LandmarkClass::Ligament}) {
        auto& slot = cls == LandmarkClass::Ridge ? report.chamfer_ridge : report.chamfer_ligament;
        const auto& p = pred.of(cls);
        const auto& g = gt.of(cls);
        if (p.empty() || g.empty()) {
            continue;  // failure flag for this class
        }
        slot = chamfer3d(gather_vertices(mesh, p), gather_vertices(mesh, g));
        sum += *slot;
        ++n;
    }
    if (n > 0) {
        report.overall = sum / n;
    }
    return report;
}

/// Per-class reprojection errors and the 2D Hausdorff distance, in pixels.
/// nullopt marks a failure (F).
struct RegistrationReport {
    std::optional<double> rpe_ridge;
    std::optional<double> rpe_ligament;
    std::optional<double> hausdorff;
};

// Symmetric nearest-neighbour mean between a projected point set and a pixel
// set: average of the two directed mean distances.
inline double symmetric_nn_mean(const std::vector<Vec2>& a, const std::vector<Vec2>& b) {
    const NearestSet2D nn_b(b);
    double sum_a = 0.0;
    for (const Vec2& p : a) {
        sum_a += nn_b.query(p).dist;
    }
    const NearestSet2D nn_a(a);
    double sum_b = 0.0;
    for (const Vec2& q : b) {
        sum_b += nn_a.query(q).dist;
    }
    return 0.5 * (sum_a / static_cast<double>(a.size()) + sum_b / static_cast<double>(b.size()));
}

inline double hausdorff2d(const std::vector<Vec2>& a, const std::vector<Vec2>& b) {
    if (a.empty() || b.empty()) {
        throw EmptySetError("hausdorff2d: empty point set");
    }
    const NearestSet2D nn_b(b);
    double d_ab = 0.0;
    for (const Vec2& p : a) {
        d_ab = std::max(d_ab, nn_b.query(p).dist);
    }
    const NearestSet2D nn_a(a);
    double d_ba = 0.0;
    for (const Vec2& q : b) {
        d_ba = std::max(d_ba, nn_a.query(q).dist);
    }
    return std::max(d_ab, d_ba);
}

inline double hausdorff2d(const std::vector<Pixel>& a, const std::vector<Pixel>& b) {
    if (a.empty() || b.empty()) {
        throw EmptySetError("hausdorff2d: empty pixel set");
    }
    return hausdorff2d(to_vec2(a), to_vec2(b));
}

/// Projects the ground-truth 3D landmark vertices under `pose` and compares
/// them against the ground-truth 2D pixel sets, per class. Classes with
/// missing ground truth, or with every vertex behind the camera, get F.
inline RegistrationReport reprojection_error(const RigidPose& pose, const LandmarkSet3D& gt3d,
                                             const LabelledMesh& mesh, const LandmarkMap2D& gt2d,
                                             const CameraIntrinsics& intr) {
    gt3d.validate(mesh.vertices.size(), "reprojection_error");
    RegistrationReport report;
    std::vector<Vec2> all_proj;
    std::vector<Vec2> all_gt;
    for (LandmarkClass cls : {LandmarkClass::Ridge, LandmarkClass::Ligament}) {
        auto& slot = cls == LandmarkClass::Ridge ? report.rpe_ridge : report.rpe_ligament;
        const auto& idx = gt3d.of(cls);
        const std::vector<Pixel> gt_px = gt2d.pixels_of(cls);
        if (idx.empty() || gt_px.empty()) {
            continue;
        }
        std::vector<Vec2> proj;
        for (int vi : idx) {
            if (auto px = project_checked(intr, pose, mesh.vertices[static_cast<size_t>(vi)])) {
                proj.push_back(*px);
            }
        }
        if (proj.empty()) {
            continue;  // all behind the camera: failure
        }
        const std::vector<Vec2> gt_v = to_vec2(gt_px);
        slot = symmetric_nn_mean(proj, gt_v);
        all_proj.insert(all_proj.end(), proj.begin(), proj.end());
        all_gt.insert(all_gt.end(), gt_v.begin(), gt_v.end());
    }
    if (!all_proj.empty() && !all_gt.empty()) {
        report.hausdorff = hausdorff2d(all_proj, all_gt);
    }
    return report;
}

/// Per-class 2D rates. `present` is false (NA) when the ground truth lacks
/// the class entirely.
struct Metric2DReport {
    struct PerClass {
        bool present = false;
        std::optional<double> precision;
        std::optional<double> dsc;
        std::optional<double> g;
    };
    PerClass ridge;
    PerClass ligament;
    PerClass silhouette;

    const PerClass& of(LandmarkClass c) const {
        switch (c) {
            case LandmarkClass::Ridge:
                return ridge;
            case LandmarkClass::Ligament:
                return ligament;
            default:
                return silhouette;
        }
    }
};

inline Metric2DReport evaluate_2d(const LandmarkMap2D& pred, const LandmarkMap2D& gt,
                                  double tolerance = 0.0, double d_max = 5.0) {
    if (pred.width != gt.width || pred.height != gt.height) {
        throw DimensionMismatch("evaluate_2d: prediction and ground truth sizes differ");
    }
    Metric2DReport report;
    const double domain = static_cast<double>(gt.width) * gt.height;
    for (LandmarkClass cls :
         {LandmarkClass::Ridge, LandmarkClass::Ligament, LandmarkClass::Silhouette}) {
        Metric2DReport::PerClass* slot = nullptr;
        switch (cls) {
            case LandmarkClass::Ridge:
                slot = &report.ridge;
                break;
            case LandmarkClass::Ligament:
                slot = &report.ligament;
                break;
            default:
                slot = &report.silhouette;
                break;
        }
        const std::vector<Pixel> gt_px = gt.pixels_of(cls);
        if (gt_px.empty()) {
            continue;  // NA row
        }
        slot->present = true;
        const std::vector<Pixel> pred_px = pred.pixels_of(cls);
        slot->precision = precision(pred_px, gt_px, tolerance);
        slot->dsc = dsc(pred_px, gt_px);
        slot->g = symmetric_distance_score(pred_px, gt_px, d_max, domain);
    }
    return report;
}

} // namespace p2ilf
