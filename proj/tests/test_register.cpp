#include <catch2/catch_amalgamated.hpp>

#include "p2ilf/bundle.hpp"
#include "p2ilf/registration.hpp"
#include "testutil.hpp"

using namespace p2ilf;
using Catch::Approx;

namespace {

// noise-free correspondences generated by forward projection
std::vector<Correspondence> synth_correspondences(Rng& rng, const RigidPose& pose,
                                                  const CameraIntrinsics& intr, int n,
                                                  double noise_px = 0.0) {
    std::vector<Correspondence> out;
    while (static_cast<int>(out.size()) < n) {
        const Vec3 p(rng.uniform(-80, 80), rng.uniform(-80, 80), rng.uniform(-80, 80));
        const Vec3 pc = pose.apply(p);
        if (pc.z() < 100.0) {
            continue;
        }
        Vec2 px = project_camera_point(intr, pc);
        if (noise_px > 0.0) {
            // Box-Muller, deterministic through Rng
            const double u1 = std::max(1e-12, rng.uniform());
            const double u2 = rng.uniform();
            px.x() += noise_px * std::sqrt(-2.0 * std::log(u1)) * std::cos(2 * M_PI * u2);
            px.y() += noise_px * std::sqrt(-2.0 * std::log(u1)) * std::sin(2 * M_PI * u2);
        }
        out.push_back({p, px});
    }
    return out;
}

RegistrationProblem synthetic_problem(uint64_t seed, const CameraIntrinsics& intr,
                                      RigidPose* gt_out) {
    const LabelledMesh blob = make_synthetic_liver(seed, 2);
    const RigidPose gt = sample_synthetic_pose(blob, intr, seed);
    RegistrationProblem prob;
    prob.mesh = blob;
    prob.landmarks3d = blob.labels;
    prob.intr = intr;
    prob.target2d = render_case_landmarks(blob, gt, intr);
    prob.silhouette_target = render_silhouette(blob, gt, intr, 1.0, 0.0);
    if (gt_out) {
        *gt_out = gt;
    }
    return prob;
}

double silhouette_iou(const RegistrationProblem& prob, const RigidPose& pose) {
    const SoftMask a = render_silhouette(prob.mesh, pose, prob.intr, 1.0, 0.0);
    const SoftMask& b = *prob.silhouette_target;
    double inter = 0;
    double uni = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const bool pa = a.data[i] > 0.5;
        const bool pb = b.data[i] > 0.5;
        inter += pa && pb;
        uni += pa || pb;
    }
    return uni > 0 ? inter / uni : 0.0;
}

double combined_reprojection(const RegistrationProblem& prob, const RigidPose& pose) {
    const RegistrationReport rep =
        reprojection_error(pose, prob.landmarks3d, prob.mesh, prob.target2d, prob.intr);
    REQUIRE(rep.rpe_ridge.has_value());
    REQUIRE(rep.rpe_ligament.has_value());
    return 0.5 * (*rep.rpe_ridge + *rep.rpe_ligament);
}

} // namespace

TEST_CASE("pnp_register recovers noise-free poses") {
    const CameraIntrinsics intr = testutil::simple_camera();
    Rng rng(1001);
    for (int trial = 0; trial < 10; ++trial) {
        const RigidPose gt = testutil::random_pose(rng, 0.8, 550.0);
        const auto corrs = synth_correspondences(rng, gt, intr, 8);
        const RigidPose est = pnp_register(corrs, intr);
        CHECK(rotation_angle_between(est.R, gt.R) < 1e-6);
        CHECK((est.t - gt.t).norm() < 1e-3);
        CHECK(est.is_valid(1e-6));
    }
}

TEST_CASE("pnp_register rejects under-determined input") {
    const CameraIntrinsics intr = testutil::simple_camera();
    Rng rng(2);
    const RigidPose gt = testutil::random_pose(rng);
    auto corrs = synth_correspondences(rng, gt, intr, 3);
    CHECK_THROWS_AS(pnp_register(corrs, intr), DegenerateConfiguration);

    // coincident/collinear points are degenerate too
    std::vector<Correspondence> line;
    for (int i = 0; i < 8; ++i) {
        const Vec3 p(i * 10.0, 0, 0);
        line.push_back({p, project(intr, gt, p)});
    }
    CHECK_THROWS_AS(pnp_register(line, intr), DegenerateConfiguration);
}

TEST_CASE("pnp_register tolerates pixel noise") {
    const CameraIntrinsics intr = testutil::simple_camera();
    Rng rng(31);
    int ok = 0;
    const int trials = 100;
    for (int trial = 0; trial < trials; ++trial) {
        const RigidPose gt = testutil::random_pose(rng, 0.6, 550.0);
        const auto corrs = synth_correspondences(rng, gt, intr, 20, 1.0);
        const RigidPose est = pnp_register(corrs, intr);
        ok += reprojection_rmse(corrs, intr, est) <= 2.0;
    }
    CHECK(ok == trials);
}

TEST_CASE("pnp_ransac_register") {
    const CameraIntrinsics intr = testutil::simple_camera();

    SECTION("clean input matches the full fit") {
        Rng rng(77);
        const RigidPose gt = testutil::random_pose(rng, 0.5, 500.0);
        const auto corrs = synth_correspondences(rng, gt, intr, 16);
        const RigidPose full = pnp_register(corrs, intr);
        const RansacResult res = pnp_ransac_register(corrs, intr, 3.0, 300, 5);
        CHECK(rotation_angle_between(res.pose.R, full.R) < 1e-6);
        CHECK((res.pose.t - full.t).norm() < 1e-6);
        CHECK(res.inliers.size() == corrs.size());
    }

    SECTION("planted outliers are rejected") {
        Rng rng(99);
        const RigidPose gt = testutil::random_pose(rng, 0.5, 500.0);
        auto corrs = synth_correspondences(rng, gt, intr, 20);
        for (int i = 0; i < 10; ++i) {
            Correspondence c;
            c.p3 = Vec3(rng.uniform(-80, 80), rng.uniform(-80, 80), rng.uniform(-80, 80));
            c.p2 = Vec2(rng.uniform(0, intr.width), rng.uniform(0, intr.height));
            corrs.push_back(c);
        }
        const RansacResult res = pnp_ransac_register(corrs, intr, 3.0, 500, 7);
        CHECK(rotation_angle_between(res.pose.R, gt.R) < 0.5 * M_PI / 180.0);
        // every clean pair is an inlier
        for (int i = 0; i < 20; ++i) {
            CHECK(std::count(res.inliers.begin(), res.inliers.end(), i) == 1);
        }
    }

    SECTION("all-outlier input finds no model") {
        Rng rng(13);
        std::vector<Correspondence> junk;
        // depth-inconsistent pairs: no pose reprojects any 4 of them together
        for (int i = 0; i < 10; ++i) {
            junk.push_back({Vec3(rng.uniform(-80, 80), rng.uniform(-80, 80), rng.uniform(-80, 80)),
                            Vec2(rng.uniform(0, 30), rng.uniform(0, 30))});
            junk.back().p2 += Vec2(i % 2 ? 600 : 0, i % 3 ? 440 : 0);
        }
        CHECK_THROWS_AS(pnp_ransac_register(junk, intr, 0.05, 120, 3), NoModelFound);
    }
}

TEST_CASE("silhouette_register descends the smooth-L1 mask error") {
    CameraIntrinsics intr = testutil::simple_camera(480, 360, 600.0);
    RigidPose gt;
    RegistrationProblem prob = synthetic_problem(41, intr, &gt);
    OptimizerConfig cfg;
    cfg.iterations = 80;
    cfg.render_scale = 0.25;

    SECTION("starting at the optimum stays there") {
        OptimizerConfig short_cfg = cfg;
        short_cfg.iterations = 30;
        const RegistrationResult res = silhouette_register(prob, gt, short_cfg);
        for (size_t i = 1; i < res.loss_trace.size(); ++i) {
            CHECK(res.loss_trace[i] <= res.loss_trace[i - 1] + 1e-12);
        }
        CHECK(combined_reprojection(prob, res.pose) <= 1.0);
    }

    SECTION("recovers from a 10 degree / 20 mm perturbation") {
        Vec6 delta;
        delta << 0.10, -0.08, 0.09, 12.0, -9.0, 13.0;  // ~10 deg, ~20 mm
        const RigidPose init = apply_increment(gt, delta);
        const RegistrationResult res = silhouette_register(prob, init, cfg);
        CHECK(silhouette_iou(prob, res.pose) >= 0.95);
        CHECK(res.pose.is_valid(1e-6));
    }

    SECTION("a model fully out of frame cannot start") {
        RigidPose out_of_frame = gt;
        out_of_frame.t = Vec3(5000.0, 5000.0, 700.0);
        CHECK_THROWS_AS(silhouette_register(prob, out_of_frame, cfg), EmptyProjection);
    }
}

TEST_CASE("landmark_render_register") {
    CameraIntrinsics intr = testutil::simple_camera(480, 360, 600.0);
    RigidPose gt;
    RegistrationProblem prob = synthetic_problem(42, intr, &gt);

    SECTION("a single restart from the optimum does not regress") {
        OptimizerConfig cfg;
        cfg.iterations = 40;
        cfg.render_scale = 0.25;
        const RegistrationResult res = landmark_render_register_from(prob, gt, cfg);
        CHECK(res.final_loss <= res.loss_trace.front() + 1e-12);
        CHECK(res.final_loss == Approx(res.loss_trace.back()));
        CHECK(combined_reprojection(prob, res.pose) <= 2.0);
    }

    SECTION("an empty target map fails every restart") {
        RegistrationProblem empty = prob;
        empty.target2d = LandmarkMap2D(intr.width, intr.height);
        OptimizerConfig cfg;
        cfg.restarts = 2;
        CHECK_THROWS_AS(landmark_render_register(empty, cfg), AllRestartsFailed);
    }

    SECTION("multi-restart drives reprojection error down on a synthetic case") {
        OptimizerConfig cfg = OptimizerConfig::nct_defaults();
        cfg.restarts = 12;
        cfg.iterations = 120;
        cfg.render_scale = 0.25;
        cfg.seed = 5;
        cfg.max_init_angle = M_PI / 3.0;
        std::vector<RegistrationResult> all;
        const RegistrationResult best = landmark_render_register(prob, cfg, &all);
        CHECK(best.pose.is_valid(1e-6));
        for (const RegistrationResult& r : all) {
            CHECK(best.final_loss <= r.final_loss);
        }
        CHECK(combined_reprojection(prob, best.pose) <= 8.0);
    }
}

TEST_CASE("chamfer_register") {
    CameraIntrinsics intr = testutil::simple_camera(480, 360, 600.0);
    RigidPose gt;
    RegistrationProblem prob = synthetic_problem(43, intr, &gt);

    SECTION("a zero-iteration schedule returns the initial pose") {
        OptimizerConfig cfg;
        cfg.iterations = 0;
        cfg.phase2_iterations = 0;
        const RegistrationResult res = chamfer_register(prob, gt, cfg);
        CHECK((res.pose.R - gt.R).norm() < 1e-15);
        CHECK((res.pose.t - gt.t).norm() < 1e-15);
        CHECK(res.final_loss == Approx(res.loss_trace.back()));
    }

    SECTION("phase 2 with near-perfect correspondences behaves like a PnP refit") {
        // 5 degree / small-shift start so that phase-1 pairing is clean
        Vec6 delta;
        delta << 0.04, -0.05, 0.04, 8.0, -6.0, 10.0;
        const RigidPose init = apply_increment(gt, delta);
        OptimizerConfig cfg = OptimizerConfig::ucl_defaults();
        cfg.iterations = 60;
        cfg.render_scale = 0.25;
        const RegistrationResult res = chamfer_register(prob, init, cfg);

        // explicit PnP on the landmark correspondences of the ground truth
        std::vector<Correspondence> corrs;
        for (LandmarkClass cls : {LandmarkClass::Ridge, LandmarkClass::Ligament}) {
            for (int vi : prob.landmarks3d.of(cls)) {
                const Vec3& p = prob.mesh.vertices[static_cast<size_t>(vi)];
                if (auto px = project_checked(prob.intr, gt, p)) {
                    corrs.push_back({p, *px});
                }
            }
        }
        const RigidPose pnp = pnp_register(corrs, prob.intr);
        CHECK(reprojection_rmse(corrs, prob.intr, res.pose) <=
              reprojection_rmse(corrs, prob.intr, pnp) + 1.0);
    }
}

TEST_CASE("init_random_pose sampling") {
    const LabelledMesh blob = make_synthetic_liver(3, 1);
    const CameraIntrinsics intr = testutil::simple_camera();

    SECTION("deterministic under a fixed seed") {
        const RigidPose a = init_random_pose(blob, intr, 99);
        const RigidPose b = init_random_pose(blob, intr, 99);
        CHECK((a.R - b.R).norm() == 0.0);
        CHECK((a.t - b.t).norm() == 0.0);
    }

    SECTION("per-axis applied rotations stay below the bound") {
        const Mat3 face_camera = rot_x(M_PI);  // anterior +z mapped onto -z
        for (uint64_t seed = 0; seed < 1000; ++seed) {
            const RigidPose p = init_random_pose(blob, intr, seed, 300.0, 800.0, M_PI / 2.0);
            const Mat3 rand = p.R * face_camera.transpose();
            // recover the z-y-x Euler angles of the applied rotation
            const double beta = std::asin(std::clamp(-rand(2, 0), -1.0, 1.0));
            const double alpha = std::atan2(rand(2, 1), rand(2, 2));
            const double gamma = std::atan2(rand(1, 0), rand(0, 0));
            CHECK(std::abs(alpha) < M_PI / 2.0);
            CHECK(std::abs(beta) < M_PI / 2.0);
            CHECK(std::abs(gamma) < M_PI / 2.0);
            CHECK(p.t.x() == 0.0);
            CHECK(p.t.y() == 0.0);
            CHECK(p.t.z() >= 300.0);
            CHECK(p.t.z() <= 800.0);
        }
    }

    SECTION("a degenerate depth range is honoured") {
        const RigidPose p = init_random_pose(blob, intr, 5, 500.0, 500.0);
        CHECK((p.t - Vec3(0, 0, 500)).norm() == 0.0);
    }

    SECTION("the anterior side faces the camera before the random rotation") {
        const RigidPose p = init_random_pose(blob, intr, 7, 500.0, 500.0, 0.0);
        CHECK((p.R * blob.anterior - Vec3(0, 0, -1)).norm() < 1e-12);
    }
}

TEST_CASE("init_canonical_pose and pose averaging") {
    Rng rng(6);
    const RigidPose p = testutil::random_pose(rng);

    CHECK_THROWS_AS(init_canonical_pose(std::nullopt), MissingCanonicalPose);
    const RigidPose got = init_canonical_pose(p);
    CHECK((got.R - p.R).norm() == 0.0);

    const RigidPose mean_pp = average_poses({p, p});
    CHECK((mean_pp.R - p.R).norm() < 1e-12);
    CHECK((mean_pp.t - p.t).norm() == 0.0);

    RigidPose plus;
    plus.R = rot_z(10.0 * M_PI / 180.0);
    RigidPose minus;
    minus.R = rot_z(-10.0 * M_PI / 180.0);
    const RigidPose mean = average_poses({plus, minus});
    CHECK((mean.R - Mat3::Identity()).norm() < 1e-9);
}

TEST_CASE("multi_start selection") {
    SECTION("one restart is the plain run") {
        auto run = [](int, uint64_t seed) {
            RegistrationResult r;
            r.final_loss = 4.2;
            r.seed = seed;
            r.loss_trace = {4.2};
            return r;
        };
        const RegistrationResult res = multi_start(1, 9, 1, run);
        CHECK(res.final_loss == 4.2);
        CHECK(res.restart_index == 0);
    }

    SECTION("the minimum of all restarts wins and all results are retrievable") {
        auto run = [](int idx, uint64_t) {
            RegistrationResult r;
            r.final_loss = std::abs(idx - 5) + 0.5;
            r.loss_trace = {r.final_loss};
            return r;
        };
        std::vector<RegistrationResult> all;
        const RegistrationResult res = multi_start(8, 0, 2, run, &all);
        CHECK(res.restart_index == 5);
        CHECK(all.size() == 8);
        for (const auto& r : all) {
            CHECK(res.final_loss <= r.final_loss);
        }
    }

    SECTION("failures are tolerated until every restart fails") {
        auto flaky = [](int idx, uint64_t) -> RegistrationResult {
            if (idx != 3) {
                throw EmptyProjection("nothing visible");
            }
            RegistrationResult r;
            r.final_loss = 1.0;
            r.loss_trace = {1.0};
            return r;
        };
        CHECK(multi_start(6, 0, 2, flaky).restart_index == 3);
        auto doomed = [](int, uint64_t) -> RegistrationResult {
            throw EmptyProjection("nothing visible");
        };
        CHECK_THROWS_AS(multi_start(4, 0, 2, doomed), AllRestartsFailed);
    }
}

TEST_CASE("gauge consistency: transforming the model transforms the answer") {
    const CameraIntrinsics intr = testutil::simple_camera();
    Rng rng(404);
    const RigidPose gt = testutil::random_pose(rng, 0.5, 520.0);
    const auto corrs = synth_correspondences(rng, gt, intr, 12);

    const RigidPose q = testutil::random_pose(rng, 0.7, 0.0);
    std::vector<Correspondence> moved = corrs;
    for (Correspondence& c : moved) {
        c.p3 = q.apply(c.p3);  // same 2D targets, re-expressed model frame
    }
    const RigidPose est = pnp_register(moved, intr);
    const RigidPose expect = compose(gt, q.inverse());
    CHECK(rotation_angle_between(est.R, expect.R) < 1e-6);
    CHECK((est.t - expect.t).norm() < 1e-3);
}

TEST_CASE("analytic soft-silhouette gradients match finite differences") {
    // quick self-check; the acceptance suite runs the full 20-pose version
    const LabelledMesh hull = make_convex_blob(5);
    CameraIntrinsics intr = testutil::simple_camera(640, 480, 800.0);
    RigidPose gt;
    gt.t = Vec3(0, 0, 500);
    RegistrationProblem prob;
    prob.mesh = hull;
    prob.landmarks3d = hull.labels;
    prob.intr = intr;
    prob.silhouette_target = render_silhouette(hull, gt, intr, 1.0, 0.0);
    prob.target2d = LandmarkMap2D(intr.width, intr.height);
    OptimizerConfig cfg;
    cfg.render_scale = 0.5;
    cfg.sigma = 1.5;
    cfg.band_factor = 25.0;
    SilhouetteObjective obj(prob, cfg);
    Rng rng(4242);
    for (int trial = 0; trial < 5; ++trial) {
        Vec6 delta;
        for (int i = 0; i < 3; ++i) {
            delta(i) = rng.uniform(-0.5, 0.5);
        }
        for (int i = 3; i < 6; ++i) {
            delta(i) = rng.uniform(-40, 40);
        }
        const RigidPose pose = apply_increment(gt, delta);
        Vec6 g;
        obj.loss_and_gradient(pose, g);
        Vec6 fd;
        const double h = 1e-4;
        for (int k = 0; k < 6; ++k) {
            Vec6 d = Vec6::Zero();
            d(k) = h;
            const double lp = obj.loss(apply_increment(pose, d));
            d(k) = -h;
            const double lm = obj.loss(apply_increment(pose, d));
            fd(k) = (lp - lm) / (2 * h);
        }
        CHECK((g - fd).norm() < 1e-3 * std::max(1e-12, fd.norm()));
    }
}
