#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <thread>
#include <vector>

#include "p2ilf/distance.hpp"
#include "p2ilf/geometry.hpp"
#include "p2ilf/image.hpp"
#include "p2ilf/mesh.hpp"
#include "p2ilf/metrics.hpp"
#include "p2ilf/render.hpp"

namespace p2ilf {

// ---- deterministic RNG (stable across platforms and stdlib versions) ----

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed + 0x9e3779b97f4a7c15ULL) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

private:
    uint64_t state_;
};

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// ---- problem & result types ----

struct Correspondence {
    Vec3 p3;  // model frame, mm
    Vec2 p2;  // undistorted image frame, px
};

struct RegistrationProblem {
    LabelledMesh mesh;
    LandmarkSet3D landmarks3d;
    LandmarkMap2D target2d;
    std::optional<SoftMask> silhouette_target;
    CameraIntrinsics intr;

    void validate() const {
        mesh.validate("problem mesh");
        landmarks3d.validate(mesh.vertices.size(), "problem landmarks");
        if (target2d.width && (target2d.width != intr.width || target2d.height != intr.height)) {
            throw DimensionMismatch("registration problem: target2d does not match camera size");
        }
        if (silhouette_target &&
            (silhouette_target->width != intr.width || silhouette_target->height != intr.height)) {
            throw DimensionMismatch("registration problem: silhouette mask does not match camera size");
        }
    }
};

struct RegistrationResult {
    RigidPose pose;
    double final_loss = std::numeric_limits<double>::infinity();
    std::vector<double> loss_trace;
    int restart_index = 0;
    bool converged = false;
    uint64_t seed = 0;
};

struct OptimizerConfig {
    int iterations = 150;           // gradient steps (phase 1 for chamfer-dr)
    int phase2_iterations = 25;     // chamfer-dr correspondence refinement
    double rot_step = 0.02;         // initial rotation step, rad
    double trans_step = 5.0;        // initial translation step, mm
    double step_decay_floor = 0.1;  // linear decay to this fraction at the last step
    double weight_ligament = 5.0;
    double weight_ridge = 1.0;
    double weight_silhouette = 0.5;
    double chamfer_weight = 1.0;
    int restarts = 1;
    double render_scale = 0.2;
    double sigma = 1.5;             // soft-silhouette boundary width, scaled px
    double splat_radius = 2.0;      // landmark disc radius, scaled px
    double splat_sigma_start = 4.0; // landmark splat softness, decays linearly
    double splat_sigma_end = 1.0;
    double sil_radius = 2.0;        // silhouette curve half-thickness, scaled px
    double depth_min = 300.0;       // random-init depth range, mm
    double depth_max = 800.0;
    double max_init_angle = 1.5707963267948966; // per-axis random-init bound, rad
    double pixel_subsample = 0.0;   // fraction of pixels kept per step; 0 = all
    double band_factor = 12.0;      // soft-boundary sigmoid cut-off, sigmas
    double fd_step = 1e-4;          // finite-difference fallback step
    uint64_t seed = 0;
    int threads = 0;                // restart parallelism; 0 = hardware

    static OptimizerConfig nct_defaults() {
        OptimizerConfig cfg;
        cfg.iterations = 150;
        cfg.restarts = 30;
        cfg.render_scale = 0.2;
        return cfg;
    }

    static OptimizerConfig ucl_defaults() {
        OptimizerConfig cfg;
        cfg.iterations = 100;
        cfg.phase2_iterations = 25;
        cfg.restarts = 1;
        cfg.render_scale = 0.2;
        return cfg;
    }
};

inline double smooth_l1(double x, double eps = 1.0) {
    const double ax = std::abs(x);
    return ax < eps ? 0.5 * x * x / eps : ax - 0.5 * eps;
}

inline double smooth_l1_grad(double x, double eps = 1.0) {
    return std::clamp(x / eps, -1.0, 1.0);
}

// ---- PnP ----

namespace detail {

// Gauss-Newton (with Levenberg damping) on the 6-DoF chart, minimizing the
// summed squared pixel reprojection residuals against a pinhole camera.
struct GnOutcome {
    RigidPose pose;
    double cost = std::numeric_limits<double>::infinity();
    std::vector<double> cost_trace;
    bool converged = false;
};

inline GnOutcome refine_pose_gn(const RigidPose& init, const std::vector<Vec3>& p3,
                                const std::vector<Vec2>& p2, const CameraIntrinsics& intr,
                                int max_iters = 100, double tol = 1e-10) {
    GnOutcome out;
    out.pose = init;
    const size_t n = p3.size();
    auto cost_of = [&](const RigidPose& pose) {
        double c = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const Vec3 pc = pose.apply(p3[i]);
            if (pc.z() <= 0.0) {
                return std::numeric_limits<double>::infinity();
            }
            c += (project_camera_point(intr, pc) - p2[i]).squaredNorm();
        }
        return c;
    };
    out.cost = cost_of(out.pose);
    out.cost_trace.push_back(out.cost);
    double lambda = 1e-9;
    for (int iter = 0; iter < max_iters; ++iter) {
        Eigen::Matrix<double, 6, 6> JtJ = Eigen::Matrix<double, 6, 6>::Zero();
        Vec6 Jtr = Vec6::Zero();
        for (size_t i = 0; i < n; ++i) {
            const Vec3 pc = out.pose.apply(p3[i]);
            if (pc.z() <= 0.0) {
                continue;
            }
            Vec2 px;
            const Mat2x6 J = project_pose_jacobian(intr, pc, px);
            const Vec2 r = px - p2[i];
            JtJ += J.transpose() * J;
            Jtr += J.transpose() * r;
        }
        bool stepped = false;
        for (int attempt = 0; attempt < 8; ++attempt) {
            Eigen::Matrix<double, 6, 6> H = JtJ;
            H.diagonal().array() += lambda;
            const Vec6 delta = H.ldlt().solve(-Jtr);
            if (!delta.allFinite()) {
                lambda *= 10.0;
                continue;
            }
            const RigidPose cand = apply_increment(out.pose, delta);
            const double cand_cost = cost_of(cand);
            if (cand_cost <= out.cost) {
                const double change = out.cost - cand_cost;
                out.pose = cand;
                out.cost = cand_cost;
                out.cost_trace.push_back(out.cost);
                lambda = std::max(lambda * 0.1, 1e-12);
                stepped = true;
                if (change < tol) {
                    out.converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if (!stepped) {
            out.converged = true;
            break;
        }
        if (out.converged) {
            break;
        }
    }
    return out;
}

// EPnP-style closed-form initialization (4 control points; 3 in the planar
// case), followed by candidate selection on reprojection error.
inline RigidPose epnp_init(const std::vector<Vec3>& p3, const std::vector<Vec2>& p2_norm) {
    const int n = static_cast<int>(p3.size());
    Vec3 centroid = Vec3::Zero();
    for (const Vec3& p : p3) {
        centroid += p;
    }
    centroid /= n;
    Mat3 cov = Mat3::Zero();
    for (const Vec3& p : p3) {
        cov += (p - centroid) * (p - centroid).transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    const Vec3 evals = eig.eigenvalues();  // ascending
    const Mat3 evecs = eig.eigenvectors();
    if (evals(2) <= 0.0 || evals(1) <= 1e-12 * evals(2)) {
        throw DegenerateConfiguration("pnp: correspondences are collinear or coincident");
    }
    const bool planar = evals(0) <= 1e-9 * evals(2);
    const int nc = planar ? 3 : 4;

    std::vector<Vec3> cw(static_cast<size_t>(nc));
    cw[0] = centroid;
    for (int j = 1; j < nc; ++j) {
        const int axis = 3 - j;  // strongest directions first
        cw[static_cast<size_t>(j)] =
            centroid + std::sqrt(evals(axis) / n) * evecs.col(axis);
    }

    // barycentric coordinates: p = sum_j alpha_j cw_j, sum alpha = 1
    Eigen::Matrix<double, 3, Eigen::Dynamic> basis(3, nc - 1);
    for (int j = 1; j < nc; ++j) {
        basis.col(j - 1) = cw[static_cast<size_t>(j)] - cw[0];
    }
    const auto basis_qr = basis.colPivHouseholderQr();
    Eigen::MatrixXd alphas(n, nc);
    for (int i = 0; i < n; ++i) {
        const Eigen::VectorXd beta = basis_qr.solve(p3[static_cast<size_t>(i)] - cw[0]);
        alphas(i, 0) = 1.0 - beta.sum();
        for (int j = 1; j < nc; ++j) {
            alphas(i, j) = beta(j - 1);
        }
    }

    const int dim = 3 * nc;
    Eigen::MatrixXd M(2 * n, dim);
    for (int i = 0; i < n; ++i) {
        const double u = p2_norm[static_cast<size_t>(i)].x();
        const double v = p2_norm[static_cast<size_t>(i)].y();
        for (int j = 0; j < nc; ++j) {
            const double a = alphas(i, j);
            M(2 * i, 3 * j) = a;
            M(2 * i, 3 * j + 1) = 0.0;
            M(2 * i, 3 * j + 2) = -a * u;
            M(2 * i + 1, 3 * j) = 0.0;
            M(2 * i + 1, 3 * j + 1) = a;
            M(2 * i + 1, 3 * j + 2) = -a * v;
        }
    }
    const Eigen::MatrixXd MtM = M.transpose() * M;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> null_eig(MtM);
    const Eigen::MatrixXd V = null_eig.eigenvectors();  // ascending eigenvalues

    // squared distances between world control points
    std::vector<std::pair<int, int>> pairs;
    for (int a = 0; a < nc; ++a) {
        for (int b = a + 1; b < nc; ++b) {
            pairs.emplace_back(a, b);
        }
    }

    auto control_diff = [&](const Eigen::VectorXd& x, int a, int b) {
        return Vec3(x(3 * a) - x(3 * b), x(3 * a + 1) - x(3 * b + 1), x(3 * a + 2) - x(3 * b + 2));
    };

    auto pose_from_x = [&](Eigen::VectorXd x) -> std::optional<RigidPose> {
        // flip so that the mean point depth is positive
        double zsum = 0.0;
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < nc; ++j) {
                zsum += alphas(i, j) * x(3 * j + 2);
            }
        }
        if (zsum < 0.0) {
            x = -x;
        }
        Eigen::Matrix<double, 3, Eigen::Dynamic> src(3, nc);
        Eigen::Matrix<double, 3, Eigen::Dynamic> dst(3, nc);
        for (int j = 0; j < nc; ++j) {
            src.col(j) = cw[static_cast<size_t>(j)];
            dst.col(j) = Vec3(x(3 * j), x(3 * j + 1), x(3 * j + 2));
        }
        const Eigen::Matrix4d T = Eigen::umeyama(src, dst, false);
        RigidPose pose;
        pose.R = orthonormalized(T.topLeftCorner<3, 3>());
        pose.t = T.topRightCorner<3, 1>();
        return pose;
    };

    auto reproj_error = [&](const RigidPose& pose) {
        double err = 0.0;
        for (int i = 0; i < n; ++i) {
            const Vec3 pc = pose.apply(p3[static_cast<size_t>(i)]);
            if (pc.z() <= 0.0) {
                return std::numeric_limits<double>::infinity();
            }
            const Vec2 proj(pc.x() / pc.z(), pc.y() / pc.z());
            err += (proj - p2_norm[static_cast<size_t>(i)]).squaredNorm();
        }
        return err;
    };

    std::optional<RigidPose> best;
    double best_err = std::numeric_limits<double>::infinity();

    // case N=1: x = beta * v, beta from control-point distance ratios
    {
        const Eigen::VectorXd v = V.col(0);
        double num = 0.0;
        double den = 0.0;
        for (const auto& [a, b] : pairs) {
            const double dc = control_diff(v, a, b).norm();
            const double dw = (cw[static_cast<size_t>(a)] - cw[static_cast<size_t>(b)]).norm();
            num += dc * dw;
            den += dc * dc;
        }
        if (den > 0.0) {
            if (auto pose = pose_from_x(v * (num / den))) {
                const double err = reproj_error(*pose);
                if (err < best_err) {
                    best_err = err;
                    best = pose;
                }
            }
        }
    }

    // case N=2: x = b1 v1 + b2 v2; solve the distance system for
    // (b1^2, b1 b2, b2^2) by linear least squares
    if (V.cols() >= 2 && pairs.size() >= 3) {
        const Eigen::VectorXd v1 = V.col(0);
        const Eigen::VectorXd v2 = V.col(1);
        Eigen::MatrixXd L(static_cast<int>(pairs.size()), 3);
        Eigen::VectorXd rho(static_cast<int>(pairs.size()));
        for (size_t k = 0; k < pairs.size(); ++k) {
            const auto [a, b] = pairs[k];
            const Vec3 d1 = control_diff(v1, a, b);
            const Vec3 d2 = control_diff(v2, a, b);
            L(static_cast<int>(k), 0) = d1.dot(d1);
            L(static_cast<int>(k), 1) = 2.0 * d1.dot(d2);
            L(static_cast<int>(k), 2) = d2.dot(d2);
            rho(static_cast<int>(k)) =
                (cw[static_cast<size_t>(a)] - cw[static_cast<size_t>(b)]).squaredNorm();
        }
        const Eigen::Vector3d bsol = L.colPivHouseholderQr().solve(rho);
        double b1 = std::sqrt(std::abs(bsol(0)));
        double b2 = std::sqrt(std::abs(bsol(2)));
        if (bsol(1) < 0.0) {
            b2 = -b2;
        }
        if (auto pose = pose_from_x(b1 * v1 + b2 * v2)) {
            const double err = reproj_error(*pose);
            if (err < best_err) {
                best_err = err;
                best = pose;
            }
        }
    }

    if (!best || !std::isfinite(best_err)) {
        throw DegenerateConfiguration("pnp: no usable closed-form initialization");
    }
    return *best;
}

} // namespace detail

/// Pose minimizing the summed squared reprojection residuals of the given
/// correspondences (EPnP-style initialization + Gauss-Newton). The 2D side is
/// expected in undistorted pixels; only the pinhole part of `intr` is used.
inline RigidPose pnp_register(const std::vector<Correspondence>& corrs,
                              const CameraIntrinsics& intr, int max_iters = 100,
                              double tol = 1e-10) {
    if (corrs.size() < 4) {
        throw DegenerateConfiguration("pnp_register: need at least 4 correspondences, got " +
                                      std::to_string(corrs.size()));
    }
    CameraIntrinsics pinhole = intr;
    pinhole.k1 = pinhole.k2 = pinhole.k3 = pinhole.p1 = pinhole.p2 = 0.0;
    std::vector<Vec3> p3(corrs.size());
    std::vector<Vec2> p2(corrs.size());
    std::vector<Vec2> p2n(corrs.size());
    for (size_t i = 0; i < corrs.size(); ++i) {
        p3[i] = corrs[i].p3;
        p2[i] = corrs[i].p2;
        p2n[i] = normalized_from_pixel(pinhole, corrs[i].p2);
    }
    const RigidPose init = detail::epnp_init(p3, p2n);
    const detail::GnOutcome gn = detail::refine_pose_gn(init, p3, p2, pinhole, max_iters, tol);
    if (!std::isfinite(gn.cost) || !gn.pose.is_valid(1e-6)) {
        throw NoConvergence("pnp_register: refinement did not reach a finite optimum");
    }
    RigidPose out = gn.pose;
    out.R = orthonormalized(out.R);
    return out;
}

struct RansacResult {
    RigidPose pose;
    std::vector<int> inliers;  // indices whose original pairing reprojects within threshold
};

/// RANSAC over minimal 4-point samples with reprojection-threshold consensus,
/// a full refit on the inliers, and optional rounds that re-pair every 2D
/// point with its nearest projected 3D point before refitting again.
inline RansacResult pnp_ransac_register(const std::vector<Correspondence>& corrs,
                                        const CameraIntrinsics& intr, double threshold_px = 3.0,
                                        int max_iters = 500, uint64_t seed = 0,
                                        int recompute_rounds = 10) {
    const int n = static_cast<int>(corrs.size());
    if (n < 4) {
        throw DegenerateConfiguration("pnp_ransac_register: need at least 4 correspondences");
    }
    CameraIntrinsics pinhole = intr;
    pinhole.k1 = pinhole.k2 = pinhole.k3 = pinhole.p1 = pinhole.p2 = 0.0;

    auto inliers_of = [&](const RigidPose& pose) {
        std::vector<int> idx;
        for (int i = 0; i < n; ++i) {
            const Vec3 pc = pose.apply(corrs[static_cast<size_t>(i)].p3);
            if (pc.z() <= 0.0) {
                continue;
            }
            if ((project_camera_point(pinhole, pc) - corrs[static_cast<size_t>(i)].p2).norm() <=
                threshold_px) {
                idx.push_back(i);
            }
        }
        return idx;
    };

    Rng rng(mix_seed(seed, 0x9a15));
    std::vector<int> best_inliers;
    RigidPose best_pose;
    int iters = max_iters;
    for (int it = 0; it < iters; ++it) {
        int pick[4];
        for (int k = 0; k < 4;) {
            const int c = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n)));
            bool dup = false;
            for (int m = 0; m < k; ++m) {
                dup |= pick[m] == c;
            }
            if (!dup) {
                pick[k++] = c;
            }
        }
        std::vector<Correspondence> sample = {corrs[static_cast<size_t>(pick[0])],
                                              corrs[static_cast<size_t>(pick[1])],
                                              corrs[static_cast<size_t>(pick[2])],
                                              corrs[static_cast<size_t>(pick[3])]};
        RigidPose cand;
        try {
            cand = pnp_register(sample, pinhole, 30, 1e-10);
        } catch (const AlgorithmError&) {
            continue;
        }
        const std::vector<int> inl = inliers_of(cand);
        if (inl.size() > best_inliers.size()) {
            best_inliers = inl;
            best_pose = cand;
            // adaptive iteration count at 0.99 confidence
            const double w = static_cast<double>(inl.size()) / n;
            const double denom = std::log(std::max(1e-12, 1.0 - w * w * w * w));
            if (denom < 0.0) {
                iters = std::min(iters, static_cast<int>(std::ceil(std::log(0.01) / denom)));
            }
        }
        if (static_cast<int>(best_inliers.size()) == n) {
            break;
        }
    }
    if (best_inliers.size() < 4) {
        throw NoModelFound("pnp_ransac_register: no sample reached 4 inliers");
    }

    auto refit = [&](const std::vector<Correspondence>& set, const RigidPose& fallback) {
        try {
            return pnp_register(set, pinhole);
        } catch (const AlgorithmError&) {
            return fallback;
        }
    };

    std::vector<Correspondence> subset;
    for (int i : best_inliers) {
        subset.push_back(corrs[static_cast<size_t>(i)]);
    }
    RigidPose pose = refit(subset, best_pose);

    // Labrunie-style rounds: re-pair each 2D point with the nearest projected
    // 3D point, keep pairs within threshold, refit until the set stabilizes.
    std::vector<int> last_assign;
    for (int round = 0; round < recompute_rounds; ++round) {
        std::vector<Vec2> proj(static_cast<size_t>(n), Vec2::Zero());
        std::vector<uint8_t> front(static_cast<size_t>(n), 0);
        for (int j = 0; j < n; ++j) {
            const Vec3 pc = pose.apply(corrs[static_cast<size_t>(j)].p3);
            if (pc.z() > 0.0) {
                front[static_cast<size_t>(j)] = 1;
                proj[static_cast<size_t>(j)] = project_camera_point(pinhole, pc);
            }
        }
        std::vector<int> assign(static_cast<size_t>(n), -1);
        std::vector<Correspondence> pairs;
        for (int k = 0; k < n; ++k) {
            double best_d = std::numeric_limits<double>::infinity();
            int best_j = -1;
            for (int j = 0; j < n; ++j) {
                if (!front[static_cast<size_t>(j)]) {
                    continue;
                }
                const double d = (proj[static_cast<size_t>(j)] - corrs[static_cast<size_t>(k)].p2).norm();
                if (d < best_d) {
                    best_d = d;
                    best_j = j;
                }
            }
            if (best_j >= 0 && best_d <= threshold_px) {
                assign[static_cast<size_t>(k)] = best_j;
                pairs.push_back({corrs[static_cast<size_t>(best_j)].p3, corrs[static_cast<size_t>(k)].p2});
            }
        }
        if (pairs.size() < 4 || assign == last_assign) {
            break;
        }
        last_assign = assign;
        pose = refit(pairs, pose);
    }

    RansacResult out;
    out.pose = pose;
    out.inliers = inliers_of(pose);
    return out;
}

// ---- shared descent machinery ----

namespace detail {

struct Descent {
    RigidPose pose;
    double loss = std::numeric_limits<double>::infinity();
    std::vector<double> trace;
    bool converged = false;
};

// Normalized block gradient descent on the 6-DoF chart. Rotation and
// translation blocks take fixed-size steps that decay linearly. `monotone`
// adds backtracking so the trace never increases.
template <typename Objective>
Descent descend(Objective& obj, const RigidPose& init, const OptimizerConfig& cfg, int iterations,
                bool monotone) {
    Descent st;
    st.pose = init;
    st.loss = obj.loss(init);  // EmptyProjection at the start propagates
    st.trace.push_back(st.loss);
    RigidPose best_pose = st.pose;
    double best_loss = st.loss;

    for (int it = 0; it < iterations; ++it) {
        const double decay =
            iterations > 1
                ? 1.0 - (1.0 - cfg.step_decay_floor) * (static_cast<double>(it) / (iterations - 1))
                : 1.0;
        Vec6 grad = Vec6::Zero();
        bool have_grad = false;
        try {
            obj.loss_and_gradient(st.pose, grad);
            have_grad = grad.allFinite() && grad.squaredNorm() > 0.0;
        } catch (const EmptyProjection&) {
            have_grad = false;
        }
        if (!have_grad) {
            // per-coordinate central differences as the degenerate fallback
            for (int k = 0; k < 6; ++k) {
                Vec6 dp = Vec6::Zero();
                dp(k) = cfg.fd_step;
                double lp = st.loss;
                double lm = st.loss;
                try {
                    lp = obj.loss(apply_increment(st.pose, dp));
                    dp(k) = -cfg.fd_step;
                    lm = obj.loss(apply_increment(st.pose, dp));
                } catch (const EmptyProjection&) {
                    continue;
                }
                grad(k) = (lp - lm) / (2.0 * cfg.fd_step);
            }
            if (!grad.allFinite() || grad.squaredNorm() == 0.0) {
                st.trace.push_back(st.loss);
                continue;
            }
        }
        Vec6 step = Vec6::Zero();
        const double wn = grad.head<3>().norm();
        const double vn = grad.tail<3>().norm();
        if (wn > 0.0) {
            step.head<3>() = -(cfg.rot_step * decay / wn) * grad.head<3>();
        }
        if (vn > 0.0) {
            step.tail<3>() = -(cfg.trans_step * decay / vn) * grad.tail<3>();
        }

        bool moved = false;
        Vec6 s = step;
        for (int half = 0; half < 8; ++half) {
            const RigidPose cand = apply_increment(st.pose, s);
            double cand_loss;
            try {
                cand_loss = obj.loss(cand);
            } catch (const EmptyProjection&) {
                s *= 0.5;
                continue;
            }
            if (!std::isfinite(cand_loss) || (monotone && cand_loss > st.loss)) {
                s *= 0.5;
                continue;
            }
            st.pose = cand;
            st.loss = cand_loss;
            moved = true;
            break;
        }
        if (!moved && !monotone) {
            throw EmptyProjection("descent: model left the frame and step halving failed");
        }
        if (st.loss < best_loss) {
            best_loss = st.loss;
            best_pose = st.pose;
        }
        st.trace.push_back(st.loss);
        obj.on_iteration(it, iterations);
    }
    st.pose = best_pose;
    st.loss = best_loss;
    st.trace.push_back(best_loss);
    st.converged = true;
    return st;
}

// downsampled copy of a soft mask by box averaging
inline SoftMask downsample_mask(const SoftMask& m, int out_w, int out_h) {
    SoftMask out(out_w, out_h, 0.0);
    Image<double> counts(out_w, out_h, 0.0);
    const double sx = static_cast<double>(out_w) / m.width;
    const double sy = static_cast<double>(out_h) / m.height;
    for (int y = 0; y < m.height; ++y) {
        const int oy = std::min(out_h - 1, static_cast<int>((y + 0.5) * sy));
        for (int x = 0; x < m.width; ++x) {
            const int ox = std::min(out_w - 1, static_cast<int>((x + 0.5) * sx));
            out.at(ox, oy) += m.at(x, y);
            counts.at(ox, oy) += 1.0;
        }
    }
    for (size_t i = 0; i < out.data.size(); ++i) {
        if (counts.data[i] > 0.0) {
            out.data[i] /= counts.data[i];
        }
    }
    return out;
}

} // namespace detail

// ---- objective: smooth-L1 soft-silhouette reprojection (mask target) ----

class SilhouetteObjective {
public:
    SilhouetteObjective(const RegistrationProblem& problem, const OptimizerConfig& cfg)
        : mesh_(problem.mesh),
          topo_(build_topology(problem.mesh)),
          intr_(problem.intr.scaled(cfg.render_scale)),
          sigma_(cfg.sigma),
          band_factor_(cfg.band_factor) {
        if (!problem.silhouette_target) {
            throw DataError("silhouette_register: silhouette_target mask is required");
        }
        target_ = detail::downsample_mask(*problem.silhouette_target, intr_.width, intr_.height);
        npix_ = static_cast<double>(target_.data.size());
    }

    double loss(const RigidPose& pose) const {
        const ProjectedMesh pm = project_mesh(mesh_, pose, intr_);
        const SoftSilhouetteDetail det =
            render_silhouette_detail(mesh_, topo_, pm, intr_, sigma_, band_factor_);
        return loss_of(det.mask);
    }

    double loss_and_gradient(const RigidPose& pose, Vec6& grad) const {
        const ProjectedMesh pm = project_mesh(mesh_, pose, intr_);
        const SoftSilhouetteDetail det =
            render_silhouette_detail(mesh_, topo_, pm, intr_, sigma_, band_factor_);
        grad.setZero();
        detail::VertexJacobians jac;
        jac.reset(intr_, pm);
        Eigen::Matrix<double, 1, 6> dF;
        for (const SilhouetteBandPixel& bp : det.band) {
            const double v = det.mask.at(bp.x, bp.y);
            const double diff = v - target_.at(bp.x, bp.y);
            const double dl_dv = smooth_l1_grad(diff) / npix_;
            const double dv_df = v * (1.0 - v) / sigma_;
            outline_field(bp, det.segments, pm, sigma_, &dF, &jac);
            grad += (dl_dv * dv_df) * dF.transpose();
        }
        return loss_of(det.mask);
    }

    void on_iteration(int, int) {}

private:
    double loss_of(const SoftMask& mask) const {
        double sum = 0.0;
        for (size_t i = 0; i < mask.data.size(); ++i) {
            sum += smooth_l1(mask.data[i] - target_.data[i]);
        }
        return sum / npix_;
    }

    const LabelledMesh& mesh_;
    MeshTopology topo_;
    CameraIntrinsics intr_;
    SoftMask target_;
    double sigma_;
    double band_factor_;
    double npix_ = 1.0;
};

/// GRASP-style registration: gradient descent on the smooth-L1 error between
/// the rendered soft silhouette and the target liver mask.
inline RegistrationResult silhouette_register(const RegistrationProblem& problem,
                                              const RigidPose& init, const OptimizerConfig& cfg) {
    problem.validate();
    SilhouetteObjective obj(problem, cfg);
    const detail::Descent st = detail::descend(obj, init, cfg, cfg.iterations, /*monotone=*/true);
    RegistrationResult res;
    res.pose = st.pose;
    res.final_loss = st.loss;
    res.loss_trace = st.trace;
    res.converged = st.converged;
    res.seed = cfg.seed;
    return res;
}

// ---- objective: weighted landmark-map squared error (NCT) ----

class LandmarkMapObjective {
public:
    LandmarkMapObjective(const RegistrationProblem& problem, const OptimizerConfig& cfg)
        : mesh_(problem.mesh),
          landmarks_(problem.landmarks3d),
          topo_(build_topology(problem.mesh)),
          intr_(problem.intr.scaled(cfg.render_scale)),
          cfg_(cfg) {
        const LandmarkMap2D scaled = downsample(problem.target2d, cfg.render_scale, intr_.width,
                                                intr_.height);
        target_ridge_ = channel_of(scaled, LandmarkClass::Ridge);
        target_ligament_ = channel_of(scaled, LandmarkClass::Ligament);
        target_sil_ = channel_of(scaled, LandmarkClass::Silhouette);
        target_ligament_px_ = scaled.pixels_of(LandmarkClass::Ligament);
        target_ridge_px_ = scaled.pixels_of(LandmarkClass::Ridge);
        npix_ = static_cast<double>(intr_.width) * intr_.height;
        splat_sigma_ = cfg.splat_sigma_start;
    }

    const CameraIntrinsics& scaled_intr() const { return intr_; }
    const std::vector<Pixel>& target_ligament_pixels() const { return target_ligament_px_; }
    const std::vector<Pixel>& target_ridge_pixels() const { return target_ridge_px_; }

    // splat softness decays linearly between the configured bounds
    void on_iteration(int it, int total) {
        const double f = total > 1 ? static_cast<double>(it + 1) / (total - 1) : 1.0;
        splat_sigma_ = cfg_.splat_sigma_start +
                       std::min(1.0, f) * (cfg_.splat_sigma_end - cfg_.splat_sigma_start);
    }

    double loss(const RigidPose& pose) const { return evaluate(pose, nullptr); }

    double loss_and_gradient(const RigidPose& pose, Vec6& grad) const {
        grad.setZero();
        return evaluate(pose, &grad);
    }

private:
    struct PointChannel {
        SoftMask value;
        std::vector<int32_t> vert;
        std::vector<double> dist;
    };

    static SoftMask channel_of(const LandmarkMap2D& map, LandmarkClass cls) {
        SoftMask out(map.width, map.height, 0.0);
        const uint8_t bit = class_bit(cls);
        for (size_t i = 0; i < map.mask.size(); ++i) {
            out.data[i] = (map.mask[i] & bit) ? 1.0 : 0.0;
        }
        return out;
    }

    PointChannel splat(const std::vector<int>& verts, const std::vector<uint8_t>& vis,
                       const ProjectedMesh& pm) const {
        PointChannel ch;
        ch.value = SoftMask(intr_.width, intr_.height, 0.0);
        ch.vert.assign(ch.value.data.size(), -1);
        ch.dist.assign(ch.value.data.size(), 0.0);
        const double reach = cfg_.splat_radius + 10.0 * splat_sigma_;
        for (int vi : verts) {
            if (!vis[static_cast<size_t>(vi)]) {
                continue;
            }
            const Vec2& c = pm.px[static_cast<size_t>(vi)];
            const int x0 = std::max(0, static_cast<int>(std::floor(c.x() - reach)));
            const int x1 = std::min(intr_.width - 1, static_cast<int>(std::ceil(c.x() + reach)));
            const int y0 = std::max(0, static_cast<int>(std::floor(c.y() - reach)));
            const int y1 = std::min(intr_.height - 1, static_cast<int>(std::ceil(c.y() + reach)));
            for (int y = y0; y <= y1; ++y) {
                for (int x = x0; x <= x1; ++x) {
                    const double d = (Vec2(x + 0.5, y + 0.5) - c).norm();
                    const double v = detail::sigmoid((cfg_.splat_radius - d) / splat_sigma_);
                    const size_t idx = static_cast<size_t>(y) * intr_.width + x;
                    if (v > ch.value.data[idx]) {
                        ch.value.data[idx] = v;
                        ch.vert[idx] = vi;
                        ch.dist[idx] = d;
                    }
                }
            }
        }
        return ch;
    }

    double evaluate(const RigidPose& pose, Vec6* grad) const {
        const ProjectedMesh pm = project_mesh(mesh_, pose, intr_);
        const std::vector<int> visible = visible_vertices_at(mesh_, pm, intr_);
        std::vector<uint8_t> vis(mesh_.vertices.size(), 0);
        for (int i : visible) {
            vis[static_cast<size_t>(i)] = 1;
        }
        bool any_landmark = false;
        for (LandmarkClass cls : {LandmarkClass::Ridge, LandmarkClass::Ligament}) {
            for (int vi : landmarks_.of(cls)) {
                any_landmark |= vis[static_cast<size_t>(vi)] != 0;
            }
        }
        if (!any_landmark) {
            throw EmptyProjection("landmark render: no landmark vertex visible");
        }

        const SoftSilhouetteDetail sil = render_silhouette_detail(
            mesh_, topo_, pm, intr_, cfg_.sigma, cfg_.band_factor + cfg_.sil_radius / cfg_.sigma);

        detail::VertexJacobians jac;
        if (grad) {
            jac.reset(intr_, pm);
        }

        double total = 0.0;
        // ridge / ligament point channels
        for (LandmarkClass cls : {LandmarkClass::Ridge, LandmarkClass::Ligament}) {
            const double w = cls == LandmarkClass::Ridge ? cfg_.weight_ridge : cfg_.weight_ligament;
            const SoftMask& target = cls == LandmarkClass::Ridge ? target_ridge_ : target_ligament_;
            const PointChannel ch = splat(landmarks_.of(cls), vis, pm);
            for (size_t i = 0; i < ch.value.data.size(); ++i) {
                const double diff = ch.value.data[i] - target.data[i];
                total += w * diff * diff;
                if (grad && ch.vert[i] >= 0 && ch.dist[i] > 1e-9) {
                    const double v = ch.value.data[i];
                    const double dv_dd = -v * (1.0 - v) / splat_sigma_;
                    const int x = static_cast<int>(i) % intr_.width;
                    const int y = static_cast<int>(i) / intr_.width;
                    const Vec2 c = pm.px[static_cast<size_t>(ch.vert[i])];
                    const Vec2 u = (Vec2(x + 0.5, y + 0.5) - c) / ch.dist[i];
                    const Eigen::Matrix<double, 1, 6> dd = -u.transpose() * jac.of(ch.vert[i]);
                    *grad += (2.0 * w * diff * dv_dd / npix_) * dd.transpose();
                }
            }
        }
        // silhouette channel: soft band around the upper occluding boundary
        {
            const double w = cfg_.weight_silhouette;
            SoftMask sil_chan(intr_.width, intr_.height, 0.0);
            std::vector<double> contrib(sil.band.size(), 0.0);
            for (size_t k = 0; k < sil.band.size(); ++k) {
                const SilhouetteBandPixel& bp = sil.band[k];
                if (bp.y <= 0 || bp.y + 1 >= intr_.height) {
                    continue;
                }
                // upper boundary: the mask grows downward across this pixel
                if (sil.mask.at(bp.x, bp.y + 1) <= sil.mask.at(bp.x, bp.y - 1)) {
                    continue;
                }
                const double v = detail::sigmoid((cfg_.sil_radius - std::abs(bp.f)) / cfg_.sigma);
                sil_chan.at(bp.x, bp.y) = v;
                contrib[k] = v;
            }
            for (size_t i = 0; i < sil_chan.data.size(); ++i) {
                const double diff = sil_chan.data[i] - target_sil_.data[i];
                total += w * diff * diff;
            }
            if (grad) {
                Eigen::Matrix<double, 1, 6> dF;
                for (size_t k = 0; k < sil.band.size(); ++k) {
                    const double v = contrib[k];
                    if (v <= 0.0 || std::abs(sil.band[k].f) < 1e-9) {
                        continue;
                    }
                    const SilhouetteBandPixel& bp = sil.band[k];
                    const double diff = v - target_sil_.at(bp.x, bp.y);
                    const double dv_df = -v * (1.0 - v) / cfg_.sigma * (bp.f > 0.0 ? 1.0 : -1.0);
                    outline_field(bp, sil.segments, pm, cfg_.sigma, &dF, &jac);
                    *grad += (2.0 * w * diff * dv_df / npix_) * dF.transpose();
                }
            }
        }
        return total / npix_;
    }

    const LabelledMesh& mesh_;
    LandmarkSet3D landmarks_;
    MeshTopology topo_;
    CameraIntrinsics intr_;
    OptimizerConfig cfg_;
    SoftMask target_ridge_;
    SoftMask target_ligament_;
    SoftMask target_sil_;
    std::vector<Pixel> target_ligament_px_;
    std::vector<Pixel> target_ridge_px_;
    double npix_ = 1.0;
    double splat_sigma_ = 2.0;
};

/// Samples the initial pose of the random-restart scheme: a random depth on
/// the optical axis, the anterior side turned toward the camera, then an
/// independent uniform rotation within `max_init_angle` per axis.
inline RigidPose init_random_pose(const LabelledMesh& mesh, const CameraIntrinsics&,
                                  uint64_t rng_seed, double depth_min = 300.0,
                                  double depth_max = 800.0,
                                  double max_angle = 1.5707963267948966) {
    Rng rng(mix_seed(rng_seed, 0x51eed));
    RigidPose pose;
    const Vec3 a = mesh.anterior.normalized();
    Mat3 align = Mat3::Identity();
    const double c = a.dot(Vec3::UnitZ());
    if (c < 1.0 - 1e-12) {
        const Vec3 axis_raw = a.cross(Vec3::UnitZ());
        if (axis_raw.norm() < 1e-12) {
            align = rot_x(M_PI);  // anterior = -z
        } else {
            align = Eigen::AngleAxisd(std::acos(std::clamp(c, -1.0, 1.0)), axis_raw.normalized())
                        .toRotationMatrix();
        }
    }
    const Mat3 face_camera = rot_x(M_PI) * align;  // anterior -> -z (toward camera)
    const double ax = rng.uniform(-max_angle, max_angle);
    const double ay = rng.uniform(-max_angle, max_angle);
    const double az = rng.uniform(-max_angle, max_angle);
    pose.R = rot_z(az) * rot_y(ay) * rot_x(ax) * face_camera;
    pose.t = Vec3(0.0, 0.0, rng.uniform(depth_min, depth_max));
    return pose;
}

/// Returns the configured canonical pose, or throws MissingCanonicalPose.
inline RigidPose init_canonical_pose(const std::optional<RigidPose>& config_pose) {
    if (!config_pose) {
        throw MissingCanonicalPose("init_canonical_pose: no canonical pose configured");
    }
    return *config_pose;
}

/// Chordal-mean rotation (averaged matrix projected back to SO(3)) and
/// arithmetic-mean translation.
inline RigidPose average_poses(const std::vector<RigidPose>& poses) {
    if (poses.empty()) {
        throw MissingCanonicalPose("average_poses: empty pose list");
    }
    Mat3 rsum = Mat3::Zero();
    Vec3 tsum = Vec3::Zero();
    for (const RigidPose& p : poses) {
        rsum += p.R;
        tsum += p.t;
    }
    RigidPose mean;
    mean.R = orthonormalized(rsum / static_cast<double>(poses.size()));
    mean.t = tsum / static_cast<double>(poses.size());
    return mean;
}

/// Runs `run(restart_index, seed)` for `restarts` independent seeds in
/// parallel and returns the result with the lowest final loss (ties by
/// restart index). Every restart failing raises AllRestartsFailed.
template <typename RunFn>
RegistrationResult multi_start(int restarts, uint64_t base_seed, int threads, RunFn&& run,
                               std::vector<RegistrationResult>* all_results = nullptr) {
    if (restarts < 1) {
        throw DataError("multi_start: restarts must be >= 1");
    }
    std::vector<std::optional<RegistrationResult>> results(static_cast<size_t>(restarts));
    std::vector<std::string> errors(static_cast<size_t>(restarts));
    std::atomic<int> next{0};
    const int nthreads =
        std::max(1, std::min(restarts, threads > 0
                                           ? threads
                                           : static_cast<int>(std::thread::hardware_concurrency())));
    auto worker = [&]() {
        for (;;) {
            const int idx = next.fetch_add(1);
            if (idx >= restarts) {
                return;
            }
            try {
                RegistrationResult r = run(idx, mix_seed(base_seed, static_cast<uint64_t>(idx)));
                r.restart_index = idx;
                results[static_cast<size_t>(idx)] = std::move(r);
            } catch (const Error& e) {
                errors[static_cast<size_t>(idx)] = e.what();
            }
        }
    };
    if (nthreads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < nthreads; ++i) {
            pool.emplace_back(worker);
        }
        for (auto& t : pool) {
            t.join();
        }
    }
    std::optional<RegistrationResult> best;
    for (auto& r : results) {
        if (!r) {
            continue;
        }
        if (all_results) {
            all_results->push_back(*r);
        }
        if (!best || r->final_loss < best->final_loss) {
            best = *r;
        }
    }
    if (!best) {
        std::string why;
        for (const auto& e : errors) {
            if (!e.empty()) {
                why = e;
                break;
            }
        }
        throw AllRestartsFailed("multi_start: every restart failed (" + why + ")");
    }
    return *best;
}

namespace detail {

// Translate parallel to the image plane until the rendered and target
// centroids of the strongest available class overlap.
inline RigidPose prealign_translation(const LabelledMesh& mesh, const LandmarkSet3D& lms,
                                      const CameraIntrinsics& intr, RigidPose pose,
                                      const std::vector<Pixel>& target_liga,
                                      const std::vector<Pixel>& target_ridge) {
    for (int round = 0; round < 3; ++round) {
        const ProjectedMesh pm = project_mesh(mesh, pose, intr);
        const std::vector<int> visible = visible_vertices_at(mesh, pm, intr);
        std::vector<uint8_t> vis(mesh.vertices.size(), 0);
        for (int i : visible) {
            vis[static_cast<size_t>(i)] = 1;
        }
        Vec2 rendered = Vec2::Zero();
        Vec2 target = Vec2::Zero();
        double depth = 0.0;
        int count = 0;
        for (const auto& [verts, pixels] :
             {std::make_pair(&lms.ligament, &target_liga), std::make_pair(&lms.ridge, &target_ridge)}) {
            if (pixels->empty()) {
                continue;
            }
            Vec2 r = Vec2::Zero();
            double z = 0.0;
            int c = 0;
            for (int vi : *verts) {
                if (vis[static_cast<size_t>(vi)]) {
                    r += pm.px[static_cast<size_t>(vi)];
                    z += pm.cam[static_cast<size_t>(vi)].z();
                    ++c;
                }
            }
            if (c == 0) {
                continue;
            }
            rendered = r / c;
            depth = z / c;
            Vec2 t = Vec2::Zero();
            for (const Pixel& p : *pixels) {
                t += Vec2(p.x() + 0.5, p.y() + 0.5);
            }
            target = t / static_cast<double>(pixels->size());
            count = c;
            break;  // ligament preferred, ridge as fallback
        }
        if (count == 0) {
            return pose;
        }
        const Vec2 dpx = target - rendered;
        if (dpx.norm() < 0.25) {
            break;
        }
        pose.t.x() += dpx.x() * depth / intr.fx;
        pose.t.y() += dpx.y() * depth / intr.fy;
    }
    return pose;
}

} // namespace detail

/// NCT-style registration: random restarts, ligament-centroid pre-alignment,
/// then fixed-iteration SGD on the weighted per-pixel squared error between
/// the rendered landmark map and the target.
inline RegistrationResult landmark_render_register(const RegistrationProblem& problem,
                                                   const OptimizerConfig& cfg,
                                                   std::vector<RegistrationResult>* all_results = nullptr) {
    problem.validate();
    if (problem.target2d.pixels_of(LandmarkClass::Ridge).empty() &&
        problem.target2d.pixels_of(LandmarkClass::Ligament).empty() &&
        problem.target2d.pixels_of(LandmarkClass::Silhouette).empty()) {
        throw AllRestartsFailed("landmark_render_register: target map carries no landmark pixels");
    }
    if (problem.landmarks3d.empty()) {
        throw DataError("landmark_render_register: 3D landmarks are required");
    }
    auto run = [&](int, uint64_t seed) {
        LandmarkMapObjective obj(problem, cfg);
        RigidPose init = init_random_pose(problem.mesh, problem.intr, seed, cfg.depth_min,
                                          cfg.depth_max, cfg.max_init_angle);
        init = detail::prealign_translation(problem.mesh, problem.landmarks3d, obj.scaled_intr(),
                                            init, obj.target_ligament_pixels(),
                                            obj.target_ridge_pixels());
        const detail::Descent st = detail::descend(obj, init, cfg, cfg.iterations, /*monotone=*/false);
        RegistrationResult res;
        res.pose = st.pose;
        res.final_loss = st.loss;
        res.loss_trace = st.trace;
        res.converged = st.converged;
        res.seed = seed;
        return res;
    };
    return multi_start(cfg.restarts, cfg.seed, cfg.threads, run, all_results);
}

/// Variant used when a specific initial pose is wanted (restarts = 1).
inline RegistrationResult landmark_render_register_from(const RegistrationProblem& problem,
                                                        const RigidPose& init,
                                                        const OptimizerConfig& cfg) {
    problem.validate();
    LandmarkMapObjective obj(problem, cfg);
    const detail::Descent st = detail::descend(obj, init, cfg, cfg.iterations, /*monotone=*/false);
    RegistrationResult res;
    res.pose = st.pose;
    res.final_loss = st.loss;
    res.loss_trace = st.trace;
    res.converged = st.converged;
    res.seed = cfg.seed;
    return res;
}

// ---- objective: soft-silhouette image loss + symmetric 2D Chamfer (UCL) ----

class ChamferObjective {
public:
    ChamferObjective(const RegistrationProblem& problem, const OptimizerConfig& cfg)
        : mesh_(problem.mesh),
          landmarks_(problem.landmarks3d),
          topo_(build_topology(problem.mesh)),
          intr_(problem.intr.scaled(cfg.render_scale)),
          cfg_(cfg) {
        if (problem.silhouette_target) {
            target_mask_ = detail::downsample_mask(*problem.silhouette_target, intr_.width,
                                                   intr_.height);
        } else {
            // fall back to the silhouette curve channel of the landmark map
            const LandmarkMap2D scaled = downsample(problem.target2d, cfg.render_scale,
                                                    intr_.width, intr_.height);
            target_mask_ = SoftMask(intr_.width, intr_.height, 0.0);
            for (size_t i = 0; i < scaled.mask.size(); ++i) {
                target_mask_.data[i] =
                    (scaled.mask[i] & class_bit(LandmarkClass::Silhouette)) ? 1.0 : 0.0;
            }
        }
        npix_ = static_cast<double>(target_mask_.data.size());
        const LandmarkMap2D scaled = downsample(problem.target2d, cfg.render_scale, intr_.width,
                                                intr_.height);
        for (LandmarkClass cls : {LandmarkClass::Ridge, LandmarkClass::Ligament}) {
            ClassTarget& ct = cls == LandmarkClass::Ridge ? ridge_ : ligament_;
            ct.pixels = scaled.pixels_of(cls);
            if (!ct.pixels.empty()) {
                ct.edt = distance_transform(ct.pixels, intr_.width, intr_.height);
                // deterministic stride subsample for the reverse direction
                const size_t cap = 2048;
                const size_t stride = std::max<size_t>(1, ct.pixels.size() / cap);
                for (size_t i = 0; i < ct.pixels.size(); i += stride) {
                    ct.samples.push_back(ct.pixels[i]);
                }
            }
        }
    }

    double loss(const RigidPose& pose) const { return evaluate(pose, nullptr); }

    double loss_and_gradient(const RigidPose& pose, Vec6& grad) const {
        grad.setZero();
        return evaluate(pose, &grad);
    }

    void on_iteration(int, int) {}

private:
    struct ClassTarget {
        std::vector<Pixel> pixels;
        std::vector<Pixel> samples;
        DistanceTransform edt;
    };

    double evaluate(const RigidPose& pose, Vec6* grad) const {
        const ProjectedMesh pm = project_mesh(mesh_, pose, intr_);
        const SoftSilhouetteDetail det =
            render_silhouette_detail(mesh_, topo_, pm, intr_, cfg_.sigma, cfg_.band_factor);
        detail::VertexJacobians jac;
        if (grad) {
            jac.reset(intr_, pm);
        }
        // image loss: squared error between soft mask and target mask
        double total = 0.0;
        for (size_t i = 0; i < det.mask.data.size(); ++i) {
            const double diff = det.mask.data[i] - target_mask_.data[i];
            total += diff * diff;
        }
        total /= npix_;
        if (grad) {
            Eigen::Matrix<double, 1, 6> dF;
            for (const SilhouetteBandPixel& bp : det.band) {
                const double v = det.mask.at(bp.x, bp.y);
                const double diff = v - target_mask_.at(bp.x, bp.y);
                const double dv_df = v * (1.0 - v) / cfg_.sigma;
                outline_field(bp, det.segments, pm, cfg_.sigma, &dF, &jac);
                *grad += (2.0 * diff * dv_df / npix_) * dF.transpose();
            }
        }

        // symmetric Chamfer between projected landmark points and target pixels
        for (LandmarkClass cls : {LandmarkClass::Ridge, LandmarkClass::Ligament}) {
            const ClassTarget& ct = cls == LandmarkClass::Ridge ? ridge_ : ligament_;
            const auto& verts = landmarks_.of(cls);
            if (ct.pixels.empty() || verts.empty()) {
                continue;
            }
            std::vector<int> front_verts;
            std::vector<Vec2> proj;
            for (int vi : verts) {
                if (pm.front[static_cast<size_t>(vi)]) {
                    front_verts.push_back(vi);
                    proj.push_back(pm.px[static_cast<size_t>(vi)]);
                }
            }
            if (proj.empty()) {
                continue;
            }
            // forward: projected point -> nearest target pixel (via EDT features)
            double fwd = 0.0;
            for (size_t k = 0; k < proj.size(); ++k) {
                const int x = std::clamp(static_cast<int>(proj[k].x()), 0, intr_.width - 1);
                const int y = std::clamp(static_cast<int>(proj[k].y()), 0, intr_.height - 1);
                const Pixel f = ct.edt.feature_at(x, y);
                const Vec2 fc(f.x() + 0.5, f.y() + 0.5);
                const Vec2 d = proj[k] - fc;
                fwd += d.squaredNorm();
                if (grad) {
                    *grad += (cfg_.chamfer_weight * 2.0 / proj.size()) *
                             (d.transpose() * jac.of(front_verts[k])).transpose();
                }
            }
            total += cfg_.chamfer_weight * fwd / proj.size();
            // reverse: sampled target pixel -> nearest projected point
            const NearestSet2D nn(proj);
            double rev = 0.0;
            for (const Pixel& s : ct.samples) {
                const Vec2 sc(s.x() + 0.5, s.y() + 0.5);
                const auto q = nn.query(sc);
                const Vec2 d = proj[static_cast<size_t>(q.index)] - sc;
                rev += d.squaredNorm();
                if (grad) {
                    *grad += (cfg_.chamfer_weight * 2.0 / ct.samples.size()) *
                             (d.transpose() * jac.of(front_verts[static_cast<size_t>(q.index)]))
                                 .transpose();
                }
            }
            total += cfg_.chamfer_weight * rev / ct.samples.size();
        }
        return total;
    }

    const LabelledMesh& mesh_;
    LandmarkSet3D landmarks_;
    MeshTopology topo_;
    CameraIntrinsics intr_;
    OptimizerConfig cfg_;
    SoftMask target_mask_;
    ClassTarget ridge_;
    ClassTarget ligament_;
    double npix_ = 1.0;
};

/// UCL-style two-phase registration: Chamfer-guided differentiable rendering,
/// then Gauss-Newton on the nearest-neighbour correspondences frozen at the
/// end of phase 1.
inline RegistrationResult chamfer_register(const RegistrationProblem& problem,
                                           const RigidPose& init, const OptimizerConfig& cfg) {
    problem.validate();
    if (problem.landmarks3d.empty()) {
        throw DataError("chamfer_register: 3D landmarks are required");
    }
    ChamferObjective obj(problem, cfg);
    detail::Descent st = detail::descend(obj, init, cfg, cfg.iterations, /*monotone=*/true);

    RegistrationResult res;
    res.pose = st.pose;
    res.final_loss = st.loss;
    res.loss_trace = st.trace;
    res.seed = cfg.seed;

    if (cfg.phase2_iterations > 0) {
        // freeze nearest-neighbour correspondences at full resolution
        std::vector<Vec3> p3;
        std::vector<Vec2> p2;
        for (LandmarkClass cls : {LandmarkClass::Ridge, LandmarkClass::Ligament}) {
            const std::vector<Pixel> target_px = problem.target2d.pixels_of(cls);
            if (target_px.empty()) {
                continue;
            }
            const NearestSet2D nn(to_vec2(target_px));
            for (int vi : problem.landmarks3d.of(cls)) {
                const Vec3& p = problem.mesh.vertices[static_cast<size_t>(vi)];
                if (auto px = project_checked(problem.intr, res.pose, p)) {
                    const auto q = nn.query(*px);
                    p3.push_back(p);
                    p2.push_back(nn.point(q.index) + Vec2(0.5, 0.5));  // pixel center
                }
            }
        }
        if (p3.size() >= 4) {
            const detail::GnOutcome gn =
                detail::refine_pose_gn(res.pose, p3, p2, problem.intr, cfg.phase2_iterations, 1e-12);
            res.pose = gn.pose;
            // per-point RMS reprojection of the frozen correspondences
            for (size_t i = 1; i < gn.cost_trace.size(); ++i) {
                res.loss_trace.push_back(std::sqrt(gn.cost_trace[i] / p3.size()));
            }
            res.final_loss = std::sqrt(gn.cost / p3.size());
            res.loss_trace.push_back(res.final_loss);
        }
    }
    res.converged = true;
    return res;
}

/// Reprojection RMSE of explicit correspondences under a pose, in pixels.
inline double reprojection_rmse(const std::vector<Correspondence>& corrs,
                                const CameraIntrinsics& intr, const RigidPose& pose) {
    if (corrs.empty()) {
        throw EmptySetError("reprojection_rmse: no correspondences");
    }
    double sum = 0.0;
    for (const Correspondence& c : corrs) {
        sum += (project(intr, pose, c.p3) - c.p2).squaredNorm();
    }
    return std::sqrt(sum / corrs.size());
}

} // namespace p2ilf
