#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <optional>

#include "p2ilf/errors.hpp"

namespace p2ilf {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat2x3 = Eigen::Matrix<double, 2, 3>;
using Mat2x6 = Eigen::Matrix<double, 2, 6>;

/// Pinhole camera with Brown lens distortion (k1,k2,k3 radial; p1,p2
/// tangential). Focal lengths and principal point are in pixels.
struct CameraIntrinsics {
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    double k1 = 0.0;
    double k2 = 0.0;
    double k3 = 0.0;
    double p1 = 0.0;
    double p2 = 0.0;
    int width = 0;
    int height = 0;

    bool has_distortion() const {
        return k1 != 0.0 || k2 != 0.0 || k3 != 0.0 || p1 != 0.0 || p2 != 0.0;
    }

    // Camera for an image downscaled by factor s (0 < s <= 1).
    CameraIntrinsics scaled(double s) const {
        CameraIntrinsics out = *this;
        out.fx = fx * s;
        out.fy = fy * s;
        out.cx = cx * s;
        out.cy = cy * s;
        out.width = std::max(1, static_cast<int>(std::lround(width * s)));
        out.height = std::max(1, static_cast<int>(std::lround(height * s)));
        return out;
    }
};

// Brown distortion on normalized image coordinates (x/z, y/z).
inline Vec2 distort_normalized(const CameraIntrinsics& intr, const Vec2& xn) {
    const double x = xn.x();
    const double y = xn.y();
    const double r2 = x * x + y * y;
    const double r4 = r2 * r2;
    const double r6 = r4 * r2;
    const double radial = 1.0 + intr.k1 * r2 + intr.k2 * r4 + intr.k3 * r6;
    const double xd = x * radial + 2.0 * intr.p1 * x * y + intr.p2 * (r2 + 2.0 * x * x);
    const double yd = y * radial + intr.p1 * (r2 + 2.0 * y * y) + 2.0 * intr.p2 * x * y;
    return {xd, yd};
}

// d(distorted)/d(normalized), 2x2.
inline Eigen::Matrix2d distort_jacobian(const CameraIntrinsics& intr, const Vec2& xn) {
    const double x = xn.x();
    const double y = xn.y();
    const double r2 = x * x + y * y;
    const double r4 = r2 * r2;
    const double r6 = r4 * r2;
    const double radial = 1.0 + intr.k1 * r2 + intr.k2 * r4 + intr.k3 * r6;
    const double dradial_dr2 = intr.k1 + 2.0 * intr.k2 * r2 + 3.0 * intr.k3 * r4;
    Eigen::Matrix2d J;
    J(0, 0) = radial + x * dradial_dr2 * 2.0 * x + 2.0 * intr.p1 * y + 6.0 * intr.p2 * x;
    J(0, 1) = x * dradial_dr2 * 2.0 * y + 2.0 * intr.p1 * x + 2.0 * intr.p2 * y;
    J(1, 0) = y * dradial_dr2 * 2.0 * x + 2.0 * intr.p2 * y + 2.0 * intr.p1 * x;
    J(1, 1) = radial + y * dradial_dr2 * 2.0 * y + 6.0 * intr.p1 * y + 2.0 * intr.p2 * x;
    return J;
}

inline Vec2 pixel_from_normalized(const CameraIntrinsics& intr, const Vec2& xn) {
    return {intr.fx * xn.x() + intr.cx, intr.fy * xn.y() + intr.cy};
}

inline Vec2 normalized_from_pixel(const CameraIntrinsics& intr, const Vec2& px) {
    return {(px.x() - intr.cx) / intr.fx, (px.y() - intr.cy) / intr.fy};
}

// Largest normalized radius where the radial distortion stays monotonic.
// Beyond it the Brown model folds back and projections are meaningless.
inline double distortion_valid_radius(const CameraIntrinsics& intr) {
    if (intr.k1 == 0.0 && intr.k2 == 0.0 && intr.k3 == 0.0) {
        return std::numeric_limits<double>::infinity();
    }
    for (double r = 0.0; r <= 10.0; r += 0.01) {
        const double r2 = r * r;
        const double slope = 1.0 + 3.0 * intr.k1 * r2 + 5.0 * intr.k2 * r2 * r2 +
                             7.0 * intr.k3 * r2 * r2 * r2;
        if (slope <= 0.0) {
            return std::max(0.0, r - 0.01);
        }
    }
    return std::numeric_limits<double>::infinity();
}

inline Mat3 rot_x(double angle) {
    return Eigen::AngleAxisd(angle, Vec3::UnitX()).toRotationMatrix();
}

inline Mat3 rot_y(double angle) {
    return Eigen::AngleAxisd(angle, Vec3::UnitY()).toRotationMatrix();
}

inline Mat3 rot_z(double angle) {
    return Eigen::AngleAxisd(angle, Vec3::UnitZ()).toRotationMatrix();
}

inline Mat3 skew(const Vec3& v) {
    Mat3 m;
    m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    return m;
}

inline Mat3 so3_exp(const Vec3& w) {
    const double theta = w.norm();
    if (theta < 1e-12) {
        return Mat3::Identity() + skew(w);
    }
    return Eigen::AngleAxisd(theta, w / theta).toRotationMatrix();
}

inline Vec3 so3_log(const Mat3& R) {
    Eigen::AngleAxisd aa(R);
    return aa.angle() * aa.axis();
}

// Nearest rotation matrix (polar decomposition, det fixed to +1).
inline Mat3 orthonormalized(const Mat3& M) {
    Eigen::JacobiSVD<Mat3> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 R = svd.matrixU() * svd.matrixV().transpose();
    if (R.determinant() < 0.0) {
        Mat3 flip = Mat3::Identity();
        flip(2, 2) = -1.0;
        R = svd.matrixU() * flip * svd.matrixV().transpose();
    }
    return R;
}

// Geodesic distance in SO(3), radians.
inline double rotation_angle_between(const Mat3& a, const Mat3& b) {
    const double c = ((a.transpose() * b).trace() - 1.0) * 0.5;
    return std::acos(std::clamp(c, -1.0, 1.0));
}

/// Rigid transform: camera point = R * model point + t. Translation is in
/// millimetres.
struct RigidPose {
    Mat3 R = Mat3::Identity();
    Vec3 t = Vec3::Zero();

    Vec3 apply(const Vec3& p) const { return R * p + t; }

    RigidPose inverse() const { return {R.transpose(), -(R.transpose() * t)}; }

    bool is_valid(double tol = 1e-9) const {
        return (R.transpose() * R - Mat3::Identity()).norm() < tol &&
               std::abs(R.determinant() - 1.0) < tol && t.allFinite();
    }

    static RigidPose identity() { return {}; }
};

inline Vec3 apply_pose(const RigidPose& pose, const Vec3& p) { return pose.apply(p); }

// compose(a, b) applies b first, then a.
inline RigidPose compose(const RigidPose& a, const RigidPose& b) {
    return {a.R * b.R, a.R * b.t + a.t};
}

// Local 6-DoF chart used by all pose optimizers: delta = (w, v), applied as
// left multiplication by (exp(w), v). Camera points move as
// p' = exp(w) * (R p + t) + v.
inline RigidPose apply_increment(const RigidPose& pose, const Vec6& delta) {
    const Mat3 dR = so3_exp(delta.head<3>());
    RigidPose out;
    out.R = orthonormalized(dR * pose.R);
    out.t = dR * pose.t + delta.tail<3>();
    return out;
}

// Projection of a camera-frame point, without the depth check.
inline Vec2 project_camera_point(const CameraIntrinsics& intr, const Vec3& pc) {
    const Vec2 xn(pc.x() / pc.z(), pc.y() / pc.z());
    return pixel_from_normalized(intr, distort_normalized(intr, xn));
}

// Projection plus d(pixel)/d(camera point), 2x3.
inline Vec2 project_camera_point_jacobian(const CameraIntrinsics& intr, const Vec3& pc,
                                          Mat2x3& J) {
    const double iz = 1.0 / pc.z();
    const Vec2 xn(pc.x() * iz, pc.y() * iz);
    Mat2x3 Jn;
    Jn << iz, 0, -pc.x() * iz * iz, 0, iz, -pc.y() * iz * iz;
    const Eigen::Matrix2d Jd = distort_jacobian(intr, xn);
    Eigen::Matrix2d K;
    K << intr.fx, 0, 0, intr.fy;
    J = K * Jd * Jn;
    return pixel_from_normalized(intr, distort_normalized(intr, xn));
}

// d(pixel)/d(pose delta) in the apply_increment chart, 2x6.
inline Mat2x6 project_pose_jacobian(const CameraIntrinsics& intr, const Vec3& pc, Vec2& px) {
    Mat2x3 Jc;
    px = project_camera_point_jacobian(intr, pc, Jc);
    Mat2x6 J;
    J.leftCols<3>() = Jc * (-skew(pc));
    J.rightCols<3>() = Jc;
    return J;
}

inline std::optional<Vec2> project_checked(const CameraIntrinsics& intr, const RigidPose& pose,
                                           const Vec3& p) {
    const Vec3 pc = pose.apply(p);
    if (pc.z() <= 0.0) {
        return std::nullopt;
    }
    return project_camera_point(intr, pc);
}

/// Projects a model point to (possibly out-of-image) pixel coordinates.
/// Throws NonPositiveDepth when the point is on or behind the camera plane.
inline Vec2 project(const CameraIntrinsics& intr, const RigidPose& pose, const Vec3& p) {
    const Vec3 pc = pose.apply(p);
    if (pc.z() <= 0.0) {
        throw NonPositiveDepth("project: point behind camera (z=" + std::to_string(pc.z()) + ")");
    }
    return project_camera_point(intr, pc);
}

/// Inverts the distortion map by Newton iteration on normalized coordinates.
/// Input and output are pixel coordinates; the result reprojects through
/// distort_normalized to the input within tol_px, else NoConvergence.
inline Vec2 undistort(const CameraIntrinsics& intr, const Vec2& px, int max_iters = 50,
                      double tol_px = 1e-6) {
    const Vec2 target = normalized_from_pixel(intr, px);
    const double scale = std::max(std::abs(intr.fx), std::abs(intr.fy));
    // the inverse map can amplify the residual, so converge well past tol_px
    const double tol_n = tol_px / scale / 20.0;
    const double r_valid = distortion_valid_radius(intr);
    Vec2 xn = target;
    bool converged = false;
    for (int i = 0; i < max_iters; ++i) {
        const Vec2 res = distort_normalized(intr, xn) - target;
        if (res.norm() < tol_n) {
            converged = true;
            break;
        }
        const Eigen::Matrix2d J = distort_jacobian(intr, xn);
        const double det = J.determinant();
        if (!std::isfinite(det) || std::abs(det) < 1e-15) {
            break;
        }
        xn -= J.inverse() * res;
        if (!xn.allFinite()) {
            break;
        }
    }
    converged = converged || (distort_normalized(intr, xn) - target).norm() < tol_n;
    // a root beyond the fold of the radial polynomial is a spurious branch:
    // the forward map is not invertible at such points
    if (!converged || xn.norm() > r_valid) {
        throw NoConvergence("undistort: no valid root within the distortion domain");
    }
    return pixel_from_normalized(intr, xn);
}

} // namespace p2ilf
