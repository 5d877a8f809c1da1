#pragma once

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <vector>

#include "p2ilf/distance.hpp"
#include "p2ilf/geometry.hpp"
#include "p2ilf/image.hpp"
#include "p2ilf/mesh.hpp"

namespace p2ilf {

/// Per-pose projection cache: camera-frame points, pixel coordinates and a
/// positive-depth flag per vertex.
struct ProjectedMesh {
    std::vector<Vec3> cam;
    std::vector<Vec2> px;
    std::vector<uint8_t> front;
};

inline ProjectedMesh project_mesh(const LabelledMesh& mesh, const RigidPose& pose,
                                  const CameraIntrinsics& intr) {
    ProjectedMesh pm;
    const size_t n = mesh.vertices.size();
    pm.cam.resize(n);
    pm.px.assign(n, Vec2::Zero());
    pm.front.assign(n, 0);
    const double r_max = distortion_valid_radius(intr) * 0.99;
    const double r_max_sq = r_max * r_max;
    for (size_t i = 0; i < n; ++i) {
        const Vec3 pc = pose.apply(mesh.vertices[i]);
        pm.cam[i] = pc;
        if (pc.z() <= 0.0) {
            continue;
        }
        const Vec2 xn(pc.x() / pc.z(), pc.y() / pc.z());
        if (xn.squaredNorm() > r_max_sq) {
            continue;  // outside the distortion model's usable domain
        }
        pm.front[i] = 1;
        pm.px[i] = project_camera_point(intr, pc);
    }
    return pm;
}

namespace detail {

inline bool face_front(const ProjectedMesh& pm, const std::array<int, 3>& f) {
    return pm.front[static_cast<size_t>(f[0])] && pm.front[static_cast<size_t>(f[1])] &&
           pm.front[static_cast<size_t>(f[2])];
}

// Signed orientation of the face w.r.t. the viewing ray through it:
// positive/negative distinguishes front- from back-facing in camera space.
inline double face_orientation(const ProjectedMesh& pm, const std::array<int, 3>& f) {
    const Vec3& a = pm.cam[static_cast<size_t>(f[0])];
    const Vec3& b = pm.cam[static_cast<size_t>(f[1])];
    const Vec3& c = pm.cam[static_cast<size_t>(f[2])];
    return (b - a).cross(c - a).dot(a);
}

inline double edge_function(const Vec2& a, const Vec2& b, const Vec2& p) {
    return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
}

// Pixel-center point-in-triangle union test (both windings accepted).
template <typename PerPixel>
inline void rasterize_face(const Vec2& a, const Vec2& b, const Vec2& c, int width, int height,
                           PerPixel&& emit) {
    const double min_x = std::min({a.x(), b.x(), c.x()});
    const double max_x = std::max({a.x(), b.x(), c.x()});
    const double min_y = std::min({a.y(), b.y(), c.y()});
    const double max_y = std::max({a.y(), b.y(), c.y()});
    const int x0 = std::max(0, static_cast<int>(std::floor(min_x - 0.5)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(max_x - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::floor(min_y - 0.5)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(max_y - 0.5)));
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            const Vec2 p(x + 0.5, y + 0.5);
            const double e0 = edge_function(a, b, p);
            const double e1 = edge_function(b, c, p);
            const double e2 = edge_function(c, a, p);
            const bool inside = (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
            if (inside) {
                emit(x, y, e0, e1, e2);
            }
        }
    }
}

} // namespace detail

/// Hard occupancy of all fully-in-front faces at the intrinsics' resolution.
inline Image<uint8_t> rasterize_occupancy(const LabelledMesh& mesh, const ProjectedMesh& pm,
                                          const CameraIntrinsics& intr) {
    Image<uint8_t> occ(intr.width, intr.height, 0);
    for (const auto& f : mesh.faces) {
        if (!detail::face_front(pm, f)) {
            continue;
        }
        detail::rasterize_face(pm.px[static_cast<size_t>(f[0])], pm.px[static_cast<size_t>(f[1])],
                               pm.px[static_cast<size_t>(f[2])], occ.width, occ.height,
                               [&](int x, int y, double, double, double) { occ.at(x, y) = 1; });
    }
    return occ;
}

/// Depth buffer (camera z, +inf where empty) with perspective-correct
/// interpolation; nearer depth wins.
inline Image<double> rasterize_depth(const LabelledMesh& mesh, const ProjectedMesh& pm,
                                     const CameraIntrinsics& intr) {
    Image<double> depth(intr.width, intr.height, std::numeric_limits<double>::infinity());
    for (const auto& f : mesh.faces) {
        if (!detail::face_front(pm, f)) {
            continue;
        }
        const Vec2& a = pm.px[static_cast<size_t>(f[0])];
        const Vec2& b = pm.px[static_cast<size_t>(f[1])];
        const Vec2& c = pm.px[static_cast<size_t>(f[2])];
        const double iza = 1.0 / pm.cam[static_cast<size_t>(f[0])].z();
        const double izb = 1.0 / pm.cam[static_cast<size_t>(f[1])].z();
        const double izc = 1.0 / pm.cam[static_cast<size_t>(f[2])].z();
        detail::rasterize_face(a, b, c, depth.width, depth.height,
                               [&](int x, int y, double e0, double e1, double e2) {
                                   const double area = e0 + e1 + e2;
                                   if (area == 0.0) {
                                       return;
                                   }
                                   // barycentric weights: e1 belongs to vertex a, etc.
                                   const double wa = e1 / area;
                                   const double wb = e2 / area;
                                   const double wc = e0 / area;
                                   const double iz = wa * iza + wb * izb + wc * izc;
                                   if (iz <= 0.0) {
                                       return;
                                   }
                                   const double z = 1.0 / iz;
                                   double& cell = depth.at(x, y);
                                   if (z < cell) {
                                       cell = z;
                                   }
                               });
    }
    return depth;
}

/// One outline-candidate segment: its two vertices, plus the in-front
/// adjacent face's third vertex, which marks the region side of the segment.
struct OutlineSegment {
    int a = -1;
    int b = -1;
    int opposite = -1;  // third vertex of the front-facing adjacent face
};

/// Edges that can generate the projected outline: open-mesh boundary edges
/// and edges shared by faces of opposite orientation. Edges with a vertex on
/// or behind the camera plane are dropped.
inline std::vector<OutlineSegment> silhouette_segments(const LabelledMesh& mesh,
                                                       const MeshTopology& topo,
                                                       const ProjectedMesh& pm) {
    std::vector<double> orient(mesh.faces.size());
    for (size_t i = 0; i < mesh.faces.size(); ++i) {
        orient[i] = detail::face_front(pm, mesh.faces[i]) ? detail::face_orientation(pm, mesh.faces[i])
                                                          : 0.0;
    }
    auto third_vertex = [&](int face, int va, int vb) {
        for (int v : mesh.faces[static_cast<size_t>(face)]) {
            if (v != va && v != vb) {
                return v;
            }
        }
        return -1;
    };
    std::vector<OutlineSegment> segs;
    for (const MeshEdge& e : topo.edges) {
        if (!pm.front[static_cast<size_t>(e.v0)] || !pm.front[static_cast<size_t>(e.v1)]) {
            continue;
        }
        int region_face = -1;
        if (e.face1 < 0) {
            if (detail::face_front(pm, mesh.faces[static_cast<size_t>(e.face0)])) {
                region_face = e.face0;
            }
        } else if (orient[static_cast<size_t>(e.face0)] * orient[static_cast<size_t>(e.face1)] <= 0.0) {
            // the face oriented toward the camera marks the filled side
            region_face = std::abs(orient[static_cast<size_t>(e.face0)]) >=
                                  std::abs(orient[static_cast<size_t>(e.face1)])
                              ? e.face0
                              : e.face1;
        }
        if (region_face >= 0) {
            segs.push_back({e.v0, e.v1, third_vertex(region_face, e.v0, e.v1)});
        }
    }
    return segs;
}

/// One pixel of the soft silhouette band. `mode` records which branch of the
/// signed field applies, so value and gradient always use the same one.
struct SilhouetteBandPixel {
    enum Mode : uint8_t {
        kClamped = 0,  // occupancy sign times clamped segment distance
        kCorner = 1,   // fillet-arc field at a corner of the outline
    };
    int x = 0;
    int y = 0;
    int seg = -1;
    int seg2 = -1;      // corner partner segment (kCorner only)
    Mode mode = kClamped;
    double sign = 1.0;  // rasterized occupancy sign (+1 inside)
    double f = 0.0;     // signed field value, positive inside
};

struct SoftSilhouetteDetail {
    SoftMask mask;
    Image<uint8_t> occupancy;
    std::vector<OutlineSegment> segments;
    std::vector<SilhouetteBandPixel> band;
    double sigma = 0.0;
};

// Outline corners are replaced by tangent arcs of radius fillet_scale*sigma.
// Distance-to-a-C1-curve keeps the soft field C1 across segment joins; the
// residual medial kinks sit >= one fillet radius deep, where the sigmoid has
// saturated. The fillet vanishes as sigma -> 0, so hard masks are unaffected.
inline constexpr double kFilletScale = 5.0;

// Lazily computed per-vertex 2x6 projection Jacobians for one pose.
namespace detail {

inline double clamped_segment_distance(const Vec2& p, const Vec2& a, const Vec2& b, double& t) {
    const Vec2 e = b - a;
    const double len_sq = e.squaredNorm();
    t = len_sq > 0.0 ? std::clamp((p - a).dot(e) / len_sq, 0.0, 1.0) : 0.0;
    return (p - (a + t * e)).norm();
}

struct VertexJacobians {
    const CameraIntrinsics* intr = nullptr;
    const ProjectedMesh* pm = nullptr;
    std::vector<uint8_t> ready;
    std::vector<Mat2x6> J;

    void reset(const CameraIntrinsics& i, const ProjectedMesh& p) {
        intr = &i;
        pm = &p;
        ready.assign(p.cam.size(), 0);
        J.resize(p.cam.size());
    }

    const Mat2x6& of(int v) {
        if (!ready[static_cast<size_t>(v)]) {
            Vec2 px;
            J[static_cast<size_t>(v)] =
                project_pose_jacobian(*intr, pm->cam[static_cast<size_t>(v)], px);
            ready[static_cast<size_t>(v)] = 1;
        }
        return J[static_cast<size_t>(v)];
    }
};

inline Vec2 rot90(const Vec2& v) { return {-v.y(), v.x()}; }

// Fillet-arc geometry at the corner shared by two outline segments. The arc
// of radius `rho` is tangent to both segments; its Voronoi cell is the wedge
// where both feet fall short of the tangent points.
struct CornerArc {
    bool ok = false;
    int shared = -1;  // vertex indices
    int far1 = -1;
    int far2 = -1;
    double cvx = 1.0;  // +1 convex corner of the region, -1 reflex
    Vec2 u1, u2;       // unit directions from the shared vertex
    double len1 = 0.0;
    double len2 = 0.0;
    double sin_half = 0.0;
    double tangent_len = 0.0;  // distance from the shared vertex to tangency
    Vec2 center;               // arc center
};

inline CornerArc eval_corner_arc(const OutlineSegment& s1, const OutlineSegment& s2,
                                 const ProjectedMesh& pm, double rho) {
    CornerArc arc;
    if (s1.a == s2.a || s1.a == s2.b) {
        arc.shared = s1.a;
        arc.far1 = s1.b;
    } else if (s1.b == s2.a || s1.b == s2.b) {
        arc.shared = s1.b;
        arc.far1 = s1.a;
    } else {
        return arc;
    }
    arc.far2 = (s2.a == arc.shared) ? s2.b : s2.a;
    const Vec2& pv = pm.px[static_cast<size_t>(arc.shared)];
    const Vec2 e1 = pm.px[static_cast<size_t>(arc.far1)] - pv;
    const Vec2 e2 = pm.px[static_cast<size_t>(arc.far2)] - pv;
    arc.len1 = e1.norm();
    arc.len2 = e2.norm();
    if (arc.len1 < 1e-9 || arc.len2 < 1e-9) {
        return arc;
    }
    arc.u1 = e1 / arc.len1;
    arc.u2 = e2 / arc.len2;
    const double nw = (arc.u1 + arc.u2).norm();  // 2 cos(theta/2)
    arc.sin_half = std::sqrt(std::max(0.0, 1.0 - 0.25 * nw * nw));
    // skip near-straight joins (no kink to round) and near-degenerate spikes
    if (nw < 0.05 || arc.sin_half < 0.05) {
        return arc;
    }
    arc.tangent_len = rho * (0.5 * nw) / arc.sin_half;
    if (arc.tangent_len > 0.9 * std::min(arc.len1, arc.len2)) {
        return arc;  // fillet would swallow a whole segment
    }
    // region side of segment 1 decides convex vs reflex
    if (s1.opposite >= 0 && pm.front[static_cast<size_t>(s1.opposite)]) {
        const Vec2 n1 = rot90(arc.u1);
        const double side = n1.dot(pm.px[static_cast<size_t>(s1.opposite)] - pv);
        const double u2_side = n1.dot(arc.u2);
        if (std::abs(side) < 1e-9) {
            return arc;
        }
        arc.cvx = side * u2_side > 0.0 ? 1.0 : -1.0;
    } else {
        return arc;
    }
    arc.center = pv + (rho / arc.sin_half) * (arc.u1 + arc.u2) / nw;
    arc.ok = true;
    return arc;
}

inline bool corner_arc_covers(const CornerArc& arc, const ProjectedMesh& pm, const Vec2& p) {
    const Vec2 d = p - pm.px[static_cast<size_t>(arc.shared)];
    return d.dot(arc.u1) < arc.tangent_len && d.dot(arc.u2) < arc.tangent_len;
}

} // namespace detail

/// Evaluates the signed outline field at the band pixel's center using the
/// branch recorded in `bp`, optionally accumulating dF/dpose into *dF.
inline double outline_field(const SilhouetteBandPixel& bp,
                            const std::vector<OutlineSegment>& segs, const ProjectedMesh& pm,
                            double sigma, Eigen::Matrix<double, 1, 6>* dF,
                            detail::VertexJacobians* jac) {
    const Vec2 p(bp.x + 0.5, bp.y + 0.5);
    const OutlineSegment& s1 = segs[static_cast<size_t>(bp.seg)];
    if (bp.mode == SilhouetteBandPixel::kClamped) {
        const Vec2& pa = pm.px[static_cast<size_t>(s1.a)];
        const Vec2& pb = pm.px[static_cast<size_t>(s1.b)];
        double t;
        const double dist = detail::clamped_segment_distance(p, pa, pb, t);
        if (dF) {
            dF->setZero();
            if (dist > 1e-9) {
                const Vec2 u = (p - (pa + t * (pb - pa))) / dist;
                *dF = -bp.sign * u.transpose() * ((1.0 - t) * jac->of(s1.a) + t * jac->of(s1.b));
            }
        }
        return bp.sign * dist;
    }
    // kCorner: signed distance to the fillet arc, F = cvx * (rho - |p - C|)
    const double rho = kFilletScale * sigma;
    const detail::CornerArc arc =
        detail::eval_corner_arc(s1, segs[static_cast<size_t>(bp.seg2)], pm, rho);
    const Vec2 pc = p - arc.center;
    const double r = pc.norm();
    if (dF) {
        dF->setZero();
        if (r > 1e-9) {
            // dC = dV + d(rho/sin_half * bhat), bhat = (u1+u2)/|u1+u2|
            const Vec2 w = arc.u1 + arc.u2;
            const double nw = w.norm();
            const Vec2 bhat = w / nw;
            const Eigen::Matrix2d pu1 = Eigen::Matrix2d::Identity() - arc.u1 * arc.u1.transpose();
            const Eigen::Matrix2d pu2 = Eigen::Matrix2d::Identity() - arc.u2 * arc.u2.transpose();
            const Mat2x6& Jv = jac->of(arc.shared);
            const Eigen::Matrix<double, 2, 6> du1 = pu1 * (jac->of(arc.far1) - Jv) / arc.len1;
            const Eigen::Matrix<double, 2, 6> du2 = pu2 * (jac->of(arc.far2) - Jv) / arc.len2;
            const Eigen::Matrix<double, 2, 6> dw = du1 + du2;
            const Eigen::Matrix2d pb = Eigen::Matrix2d::Identity() - bhat * bhat.transpose();
            const Eigen::Matrix<double, 2, 6> dbhat = pb * dw / nw;
            const Eigen::Matrix<double, 1, 6> dcos =
                arc.u2.transpose() * du1 + arc.u1.transpose() * du2;
            // sin_half^2 = (1 - u1.u2)/2
            const Eigen::Matrix<double, 1, 6> dsin = -dcos / (4.0 * arc.sin_half);
            const double rad = rho / arc.sin_half;
            const Eigen::Matrix<double, 2, 6> dC =
                Jv + rad * dbhat - (rad / arc.sin_half) * bhat * dsin;
            *dF = arc.cvx * (pc / r).transpose() * dC;
        }
    }
    return arc.cvx * (rho - r);
}

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Bucket grid over 2D segments for banded nearest-segment queries.
class SegmentGrid {
public:
    SegmentGrid(const std::vector<OutlineSegment>& segs, const ProjectedMesh& pm, double cell,
                int width, int height)
        : cell_(cell),
          nx_(std::max(1, static_cast<int>(width / cell) + 1)),
          ny_(std::max(1, static_cast<int>(height / cell) + 1)) {
        buckets_.resize(static_cast<size_t>(nx_) * ny_);
        for (size_t si = 0; si < segs.size(); ++si) {
            const Vec2& a = pm.px[static_cast<size_t>(segs[si].a)];
            const Vec2& b = pm.px[static_cast<size_t>(segs[si].b)];
            const int gx0 = clampx(static_cast<int>(std::floor(std::min(a.x(), b.x()) / cell_)) - 1);
            const int gx1 = clampx(static_cast<int>(std::floor(std::max(a.x(), b.x()) / cell_)) + 1);
            const int gy0 = clampy(static_cast<int>(std::floor(std::min(a.y(), b.y()) / cell_)) - 1);
            const int gy1 = clampy(static_cast<int>(std::floor(std::max(a.y(), b.y()) / cell_)) + 1);
            for (int gy = gy0; gy <= gy1; ++gy) {
                for (int gx = gx0; gx <= gx1; ++gx) {
                    buckets_[static_cast<size_t>(gy) * nx_ + gx].push_back(static_cast<int>(si));
                }
            }
        }
    }

    struct Hit {
        int seg = -1;
        double t = 0.0;
        double dist = std::numeric_limits<double>::infinity();
    };

    // Two nearest segments among those whose inflated bbox covers p's cell.
    bool query(const Vec2& p, const std::vector<OutlineSegment>& segs, const ProjectedMesh& pm,
               Hit& best, Hit& second) const {
        const int gx = clampx(static_cast<int>(std::floor(p.x() / cell_)));
        const int gy = clampy(static_cast<int>(std::floor(p.y() / cell_)));
        best = Hit{};
        second = Hit{};
        for (int si : buckets_[static_cast<size_t>(gy) * nx_ + gx]) {
            const Vec2& a = pm.px[static_cast<size_t>(segs[static_cast<size_t>(si)].a)];
            const Vec2& b = pm.px[static_cast<size_t>(segs[static_cast<size_t>(si)].b)];
            double t;
            const double d = clamped_segment_distance(p, a, b, t);
            if (d < best.dist) {
                second = best;
                best = {si, t, d};
            } else if (d < second.dist) {
                second = {si, t, d};
            }
        }
        return best.seg >= 0;
    }

private:
    int clampx(int g) const { return std::clamp(g, 0, nx_ - 1); }
    int clampy(int g) const { return std::clamp(g, 0, ny_ - 1); }

    double cell_;
    int nx_;
    int ny_;
    std::vector<std::vector<int>> buckets_;
};

} // namespace detail

/// Soft silhouette with gradient bookkeeping. `intr` must already be at the
/// target render resolution; `pm` the matching projection. sigma = 0 gives
/// the hard occupancy mask. `band_factor` is the sigmoid cut-off in sigmas.
inline SoftSilhouetteDetail render_silhouette_detail(const LabelledMesh& mesh,
                                                     const MeshTopology& topo,
                                                     const ProjectedMesh& pm,
                                                     const CameraIntrinsics& intr, double sigma,
                                                     double band_factor = 12.0) {
    SoftSilhouetteDetail out;
    out.sigma = sigma;
    out.occupancy = rasterize_occupancy(mesh, pm, intr);
    size_t filled = 0;
    for (uint8_t v : out.occupancy.data) {
        filled += v;
    }
    if (filled == 0) {
        throw EmptyProjection("render_silhouette: no face projects inside the image");
    }
    out.mask = SoftMask(intr.width, intr.height);
    if (sigma <= 0.0) {
        for (size_t i = 0; i < out.mask.data.size(); ++i) {
            out.mask.data[i] = out.occupancy.data[i] ? 1.0 : 0.0;
        }
        return out;
    }

    out.segments = silhouette_segments(mesh, topo, pm);

    // saturated far from the outline; exact signed distance inside the band
    const double band_px = sigma * band_factor + 2.0;
    const detail::SegmentGrid grid(out.segments, pm, band_px + 4.0, intr.width, intr.height);
    const double rho = kFilletScale * sigma;
    std::unordered_map<int, std::vector<int>> vertex_segs;
    vertex_segs.reserve(out.segments.size() * 2);
    for (size_t si = 0; si < out.segments.size(); ++si) {
        vertex_segs[out.segments[si].a].push_back(static_cast<int>(si));
        vertex_segs[out.segments[si].b].push_back(static_cast<int>(si));
    }
    for (int y = 0; y < intr.height; ++y) {
        for (int x = 0; x < intr.width; ++x) {
            const bool inside = out.occupancy.at(x, y) != 0;
            SilhouetteBandPixel bp;
            bp.x = x;
            bp.y = y;
            bp.sign = inside ? 1.0 : -1.0;
            const Vec2 p(x + 0.5, y + 0.5);
            detail::SegmentGrid::Hit best;
            detail::SegmentGrid::Hit second;
            if (!grid.query(p, out.segments, pm, best, second) || best.dist > band_px) {
                // no outline segment within the band: sigmoid fully saturated
                out.mask.at(x, y) = inside ? 1.0 : 0.0;
                continue;
            }
            bp.seg = best.seg;
            bp.mode = SilhouetteBandPixel::kClamped;
            // pixel inside the Voronoi wedge of a corner fillet?
            const OutlineSegment& s1 = out.segments[static_cast<size_t>(best.seg)];
            double best_vdist = std::numeric_limits<double>::infinity();
            for (int vtx : {s1.a, s1.b}) {
                for (int partner : vertex_segs[vtx]) {
                    if (partner == best.seg) {
                        continue;
                    }
                    const detail::CornerArc arc = detail::eval_corner_arc(
                        s1, out.segments[static_cast<size_t>(partner)], pm, rho);
                    if (!arc.ok || !detail::corner_arc_covers(arc, pm, p)) {
                        continue;
                    }
                    const double vd = (p - pm.px[static_cast<size_t>(arc.shared)]).norm();
                    if (vd < best_vdist) {
                        best_vdist = vd;
                        bp.mode = SilhouetteBandPixel::kCorner;
                        bp.seg2 = partner;
                    }
                }
            }
            bp.f = outline_field(bp, out.segments, pm, sigma, nullptr, nullptr);
            out.mask.at(x, y) = detail::sigmoid(bp.f / sigma);
            out.band.push_back(bp);
        }
    }
    return out;
}

/// Rasterizes the mesh silhouette at resolution (width*scale, height*scale).
/// sigma > 0 yields a sigmoid-of-signed-distance soft boundary; sigma = 0 a
/// hard binary mask. Throws EmptyProjection when nothing lands in frame.
inline SoftMask render_silhouette(const LabelledMesh& mesh, const RigidPose& pose,
                                  const CameraIntrinsics& intr, double scale = 1.0,
                                  double sigma = 0.0) {
    if (scale <= 0.0 || scale > 1.0) {
        throw DataError("render_silhouette: scale must be in (0, 1]");
    }
    const CameraIntrinsics si = intr.scaled(scale);
    const MeshTopology topo = build_topology(mesh);
    const ProjectedMesh pm = project_mesh(mesh, pose, si);
    return render_silhouette_detail(mesh, topo, pm, si, sigma).mask;
}

/// Vertex indices with positive depth, projecting inside the image, and not
/// occluded by any face (depth-buffer test at the intrinsics' resolution).
inline std::vector<int> visible_vertices_at(const LabelledMesh& mesh, const ProjectedMesh& pm,
                                            const CameraIntrinsics& intr) {
    const Image<double> depth = rasterize_depth(mesh, pm, intr);
    std::vector<int> visible;
    for (size_t i = 0; i < mesh.vertices.size(); ++i) {
        if (!pm.front[i]) {
            continue;
        }
        const Vec2& px = pm.px[i];
        if (px.x() < 0.0 || px.x() >= intr.width || px.y() < 0.0 || px.y() >= intr.height) {
            continue;
        }
        const int ix = std::min(intr.width - 1, static_cast<int>(px.x()));
        const int iy = std::min(intr.height - 1, static_cast<int>(px.y()));
        const double z = pm.cam[i].z();
        if (z <= depth.at(ix, iy) * (1.0 + 1e-3) + 1e-6) {
            visible.push_back(static_cast<int>(i));
        }
    }
    return visible;
}

inline std::vector<int> visible_vertices(const LabelledMesh& mesh, const RigidPose& pose,
                                         const CameraIntrinsics& intr) {
    const ProjectedMesh pm = project_mesh(mesh, pose, intr);
    return visible_vertices_at(mesh, pm, intr);
}

/// Splats every visible landmark vertex as a point_radius-pixel disc into its
/// class channel. Throws EmptyProjection when no landmark vertex is visible.
inline LandmarkMap2D render_landmarks(const LabelledMesh& mesh, const LandmarkSet3D& landmarks,
                                      const RigidPose& pose, const CameraIntrinsics& intr,
                                      double point_radius = 3.0) {
    landmarks.validate(mesh.vertices.size(), "render_landmarks");
    const ProjectedMesh pm = project_mesh(mesh, pose, intr);
    const std::vector<int> visible = visible_vertices_at(mesh, pm, intr);
    std::vector<uint8_t> vis_flag(mesh.vertices.size(), 0);
    for (int i : visible) {
        vis_flag[static_cast<size_t>(i)] = 1;
    }
    LandmarkMap2D map(intr.width, intr.height);
    size_t drawn = 0;
    const double r2 = point_radius * point_radius;
    const int r_ceil = static_cast<int>(std::ceil(point_radius));
    for (LandmarkClass cls : {LandmarkClass::Ridge, LandmarkClass::Ligament}) {
        for (int vi : landmarks.of(cls)) {
            if (!vis_flag[static_cast<size_t>(vi)]) {
                continue;
            }
            ++drawn;
            const Vec2& c = pm.px[static_cast<size_t>(vi)];
            const int x0 = std::max(0, static_cast<int>(std::floor(c.x() - r_ceil)));
            const int x1 = std::min(intr.width - 1, static_cast<int>(std::ceil(c.x() + r_ceil)));
            const int y0 = std::max(0, static_cast<int>(std::floor(c.y() - r_ceil)));
            const int y1 = std::min(intr.height - 1, static_cast<int>(std::ceil(c.y() + r_ceil)));
            for (int y = y0; y <= y1; ++y) {
                for (int x = x0; x <= x1; ++x) {
                    const Vec2 p(x + 0.5, y + 0.5);
                    if ((p - c).squaredNorm() <= r2) {
                        map.set(x, y, cls);
                    }
                }
            }
        }
    }
    if (drawn == 0) {
        throw EmptyProjection("render_landmarks: no landmark vertex visible");
    }
    return map;
}

/// Marks, per column scanned top to bottom, every background-to-liver
/// transition (the upper occluding boundary), then dilates the curve.
inline LandmarkMap2D extract_view_silhouette(const SoftMask& mask, double dilation = 0.0) {
    LandmarkMap2D map(mask.width, mask.height);
    std::vector<Pixel> marks;
    for (int x = 0; x < mask.width; ++x) {
        for (int y = 1; y < mask.height; ++y) {
            const bool above = mask.at(x, y - 1) > 0.5;
            const bool here = mask.at(x, y) > 0.5;
            if (!above && here) {
                marks.emplace_back(x, y);
            }
        }
    }
    if (marks.empty()) {
        return map;
    }
    if (dilation <= 0.0) {
        for (const Pixel& p : marks) {
            map.set(p.x(), p.y(), LandmarkClass::Silhouette);
        }
        return map;
    }
    const DistanceTransform edt = distance_transform(marks, mask.width, mask.height);
    const double r2 = dilation * dilation;
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            if (edt.sq_dist_at(x, y) <= r2) {
                map.set(x, y, LandmarkClass::Silhouette);
            }
        }
    }
    return map;
}

/// High-pass contour enhancement: FFT, zero the low-frequency bins within
/// `radius` of DC (wrapped), inverse FFT, absolute value rescaled to [0,1].
inline Image<double> contour_enhance(const Image<double>& image, double radius = 8.0) {
    if (image.width <= 0 || image.height <= 0) {
        throw DataError("contour_enhance: empty image");
    }
    const int W = image.width;
    const int H = image.height;
    const int Wc = W / 2 + 1;
    std::vector<double> in(static_cast<size_t>(W) * H);
    for (size_t i = 0; i < in.size(); ++i) {
        in[i] = image.data[i];
    }
    std::vector<fftw_complex> freq(static_cast<size_t>(H) * Wc);
    std::vector<double> back(static_cast<size_t>(W) * H);
    {
        // FFTW planning is not thread-safe
        static std::mutex plan_mutex;
        std::lock_guard<std::mutex> lock(plan_mutex);
        fftw_plan fwd = fftw_plan_dft_r2c_2d(H, W, in.data(), freq.data(), FFTW_ESTIMATE);
        fftw_execute(fwd);
        fftw_destroy_plan(fwd);
        const double r2 = radius * radius;
        for (int ky = 0; ky < H; ++ky) {
            const int fy = std::min(ky, H - ky);
            for (int kx = 0; kx < Wc; ++kx) {
                const int fx = std::min(kx, W - kx);
                if (fx * fx + fy * fy <= r2) {
                    freq[static_cast<size_t>(ky) * Wc + kx][0] = 0.0;
                    freq[static_cast<size_t>(ky) * Wc + kx][1] = 0.0;
                }
            }
        }
        fftw_plan bwd = fftw_plan_dft_c2r_2d(H, W, freq.data(), back.data(), FFTW_ESTIMATE);
        fftw_execute(bwd);
        fftw_destroy_plan(bwd);
    }
    Image<double> out(W, H);
    const double norm = 1.0 / (static_cast<double>(W) * H);
    double max_v = 0.0;
    for (size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = std::abs(back[i] * norm);
        max_v = std::max(max_v, out.data[i]);
    }
    if (max_v > 0.0) {
        for (double& v : out.data) {
            v /= max_v;
        }
    }
    return out;
}

} // namespace p2ilf
