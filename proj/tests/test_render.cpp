#include <catch2/catch_amalgamated.hpp>

#include "oracle.hpp"
#include "p2ilf/bundle.hpp"
#include "p2ilf/render.hpp"
#include "testutil.hpp"

using namespace p2ilf;
using Catch::Approx;

namespace {

std::vector<Pixel> boundary_pixels(const Image<uint8_t>& occ) {
    std::vector<Pixel> out;
    for (int y = 0; y < occ.height; ++y) {
        for (int x = 0; x < occ.width; ++x) {
            if (!occ.at(x, y)) {
                continue;
            }
            const bool edge = x == 0 || y == 0 || x + 1 == occ.width || y + 1 == occ.height ||
                              !occ.at(x - 1, y) || !occ.at(x + 1, y) || !occ.at(x, y - 1) ||
                              !occ.at(x, y + 1);
            if (edge) {
                out.emplace_back(x, y);
            }
        }
    }
    return out;
}

Image<uint8_t> to_occupancy(const SoftMask& m) {
    Image<uint8_t> occ(m.width, m.height, 0);
    for (size_t i = 0; i < m.data.size(); ++i) {
        occ.data[i] = m.data[i] > 0.5 ? 1 : 0;
    }
    return occ;
}

} // namespace

TEST_CASE("hard silhouette equals the point-in-triangle union oracle") {
    const CameraIntrinsics intr = testutil::simple_camera(320, 240, 400.0);
    RigidPose pose;
    pose.t = Vec3(0, 0, 400);

    SECTION("single large triangle") {
        const LabelledMesh tri = testutil::single_triangle();
        const SoftMask mask = render_silhouette(tri, pose, intr, 1.0, 0.0);
        const Image<uint8_t> ref = oracle::rasterize_union(tri, pose, intr);
        for (size_t i = 0; i < mask.data.size(); ++i) {
            CHECK(mask.data[i] == static_cast<double>(ref.data[i]));
        }
    }

    SECTION("blob with under 100 faces") {
        const LabelledMesh blob = make_convex_blob(3);  // 50 faces
        Rng rng(31);
        const RigidPose rp = testutil::random_pose(rng, 0.5, 450);
        const SoftMask mask = render_silhouette(blob, rp, intr, 1.0, 0.0);
        const Image<uint8_t> ref = oracle::rasterize_union(blob, rp, intr);
        size_t mismatches = 0;
        for (size_t i = 0; i < mask.data.size(); ++i) {
            mismatches += (mask.data[i] > 0.5) != (ref.data[i] != 0);
        }
        CHECK(mismatches == 0);
    }

    SECTION("mesh behind the camera is an empty projection") {
        RigidPose behind;
        behind.t = Vec3(0, 0, -400);
        CHECK_THROWS_AS(render_silhouette(testutil::single_triangle(), behind, intr, 1.0, 0.0),
                        EmptyProjection);
    }
}

TEST_CASE("soft mask converges to the hard mask as sigma shrinks") {
    const CameraIntrinsics intr = testutil::simple_camera(320, 240, 400.0);
    const LabelledMesh blob = make_icosphere(2);
    LabelledMesh scaled = blob;
    for (Vec3& v : scaled.vertices) {
        v *= 60.0;
    }
    RigidPose pose;
    pose.t = Vec3(0, 0, 420);

    const SoftMask hard = render_silhouette(scaled, pose, intr, 1.0, 0.0);
    const SoftMask soft = render_silhouette(scaled, pose, intr, 1.0, 1e-3);

    const std::vector<Pixel> boundary = boundary_pixels(to_occupancy(hard));
    const NearestSet2D nn(to_vec2(boundary));
    for (int y = 0; y < hard.height; ++y) {
        for (int x = 0; x < hard.width; ++x) {
            const bool hard_in = hard.at(x, y) > 0.5;
            const bool soft_in = soft.at(x, y) > 0.5;
            if (hard_in != soft_in) {
                // disagreements only within the one-pixel boundary band
                CHECK(nn.query(Vec2(x, y)).dist <= 1.5);
            }
        }
    }
}

TEST_CASE("soft mask grows monotonically into the interior") {
    const CameraIntrinsics intr = testutil::simple_camera(320, 240, 400.0);
    const LabelledMesh tri = testutil::single_triangle();
    RigidPose pose;
    pose.t = Vec3(0, 0, 400);
    const SoftMask soft = render_silhouette(tri, pose, intr, 1.0, 2.0);

    // march from outside toward the projected incenter
    const ProjectedMesh pm = project_mesh(tri, pose, intr.scaled(1.0));
    const Vec2 a = pm.px[0];
    const Vec2 b = pm.px[1];
    const Vec2 c = pm.px[2];
    const double la = (b - c).norm();
    const double lb = (a - c).norm();
    const double lc = (a - b).norm();
    const Vec2 incenter = (la * a + lb * b + lc * c) / (la + lb + lc);
    const Vec2 start(3.0, 3.0);
    double prev = -1.0;
    for (double t = 0.0; t <= 1.0; t += 0.02) {
        const Vec2 p = start + t * (incenter - start);
        const int x = std::clamp(static_cast<int>(p.x()), 0, soft.width - 1);
        const int y = std::clamp(static_cast<int>(p.y()), 0, soft.height - 1);
        const double v = soft.at(x, y);
        CHECK(v >= prev - 1e-9);
        prev = std::max(prev, v);
    }
}

TEST_CASE("visible_vertices matches the ray-cast oracle") {
    const CameraIntrinsics intr = testutil::simple_camera(320, 240, 300.0);

    SECTION("a single front triangle is fully visible") {
        RigidPose pose;
        pose.t = Vec3(0, 0, 400);
        const LabelledMesh tri = testutil::single_triangle();
        CHECK(visible_vertices(tri, pose, intr) == std::vector<int>{0, 1, 2});
    }

    SECTION("the rear of two stacked triangles is occluded") {
        RigidPose pose;
        pose.t = Vec3(0, 0, 400);
        const LabelledMesh stack = testutil::stacked_triangles(120.0);
        const std::vector<int> vis = visible_vertices(stack, pose, intr);
        CHECK(vis == oracle::visible_by_raycast(stack, pose, intr));
        // rear triangle (indices 3..5) projects inside the front one
        for (int i : vis) {
            CHECK(i < 3);
        }
    }

    SECTION("blob visibility agrees with ray casting") {
        const LabelledMesh blob = make_convex_blob(12);
        Rng rng(5);
        const RigidPose pose = testutil::random_pose(rng, 0.4, 500);
        CHECK(visible_vertices(blob, pose, intr) == oracle::visible_by_raycast(blob, pose, intr));
    }

    SECTION("vertices behind the camera are excluded") {
        RigidPose pose;
        pose.t = Vec3(0, 0, -50);
        const LabelledMesh tri = testutil::single_triangle();
        CHECK(visible_vertices(tri, pose, intr).empty());
    }
}

TEST_CASE("render_landmarks splats visible landmark vertices") {
    CameraIntrinsics intr = testutil::simple_camera(400, 300, 500.0);
    RigidPose pose;
    pose.t = Vec3(0, 0, 500);

    SECTION("one centred ridge vertex becomes a disc at the principal point") {
        LabelledMesh m = testutil::single_triangle(60.0);
        m.vertices.push_back(Vec3(0, 0, -10.0));  // in front of the triangle plane
        m.labels.ridge = {3};
        const LandmarkMap2D map = render_landmarks(m, m.labels, pose, intr, 2.0);
        const int cx = static_cast<int>(intr.cx);
        const int cy = static_cast<int>(intr.cy);
        CHECK(map.test(cx, cy, LandmarkClass::Ridge));
        CHECK(map.test(cx + 1, cy, LandmarkClass::Ridge));
        CHECK_FALSE(map.test(cx + 4, cy, LandmarkClass::Ridge));
        // disc pixels sit within the radius of the projection
        for (const Pixel& p : map.pixels_of(LandmarkClass::Ridge)) {
            CHECK((Vec2(p.x() + 0.5, p.y() + 0.5) - Vec2(intr.cx, intr.cy)).norm() <= 2.0);
        }
    }

    SECTION("occluded vertices are not rendered") {
        LabelledMesh stack = testutil::stacked_triangles(120.0);
        stack.labels.ligament = {3, 4, 5};  // rear triangle, hidden
        CHECK_THROWS_AS(render_landmarks(stack, stack.labels, pose, intr, 2.0), EmptyProjection);
    }

    SECTION("empty landmark set has nothing to draw") {
        const LabelledMesh tri = testutil::single_triangle();
        CHECK_THROWS_AS(render_landmarks(tri, tri.labels, pose, intr, 2.0), EmptyProjection);
    }
}

TEST_CASE("extract_view_silhouette marks upper occluding transitions") {
    SECTION("filled rectangle yields exactly its top edge") {
        SoftMask mask(40, 30, 0.0);
        for (int y = 10; y < 25; ++y) {
            for (int x = 5; x < 35; ++x) {
                mask.at(x, y) = 1.0;
            }
        }
        const LandmarkMap2D sil = extract_view_silhouette(mask, 0.0);
        for (int y = 0; y < 30; ++y) {
            for (int x = 0; x < 40; ++x) {
                const bool expect = y == 10 && x >= 5 && x < 35;
                CHECK(sil.test(x, y, LandmarkClass::Silhouette) == expect);
            }
        }
    }

    SECTION("filled circle yields the upper arc (first-transition oracle)") {
        SoftMask mask(60, 60, 0.0);
        for (int y = 0; y < 60; ++y) {
            for (int x = 0; x < 60; ++x) {
                if ((Vec2(x, y) - Vec2(30, 32)).norm() <= 20.0) {
                    mask.at(x, y) = 1.0;
                }
            }
        }
        const LandmarkMap2D sil = extract_view_silhouette(mask, 0.0);
        const auto expect = oracle::first_transitions(mask);
        std::set<std::pair<int, int>> got;
        for (const Pixel& p : sil.pixels_of(LandmarkClass::Silhouette)) {
            got.emplace(p.x(), p.y());
        }
        CHECK(got == expect);
        // the arc stays in the upper half
        for (const auto& [x, y] : got) {
            CHECK(y <= 32);
        }
    }

    SECTION("empty mask yields an empty map") {
        const LandmarkMap2D sil = extract_view_silhouette(SoftMask(20, 20, 0.0), 2.0);
        CHECK(sil.count_of(LandmarkClass::Silhouette) == 0);
    }

    SECTION("dilated output stays within `dilation` of boundary pixels") {
        const CameraIntrinsics intr = testutil::simple_camera(200, 150, 250.0);
        const LabelledMesh blob = make_synthetic_liver(2, 2);
        RigidPose pose;
        pose.R = rot_x(M_PI);
        pose.t = Vec3(0, 0, 450);
        const SoftMask hard = render_silhouette(blob, pose, intr, 1.0, 0.0);
        const double dilation = 2.5;
        const LandmarkMap2D sil = extract_view_silhouette(hard, dilation);
        const std::vector<Pixel> boundary = boundary_pixels(to_occupancy(hard));
        REQUIRE_FALSE(boundary.empty());
        const NearestSet2D nn(to_vec2(boundary));
        for (const Pixel& p : sil.pixels_of(LandmarkClass::Silhouette)) {
            CHECK(nn.query(Vec2(p.x(), p.y())).dist <= dilation + 1e-9);
        }
    }
}

TEST_CASE("contour_enhance is a high-pass filter") {
    SECTION("constant images vanish") {
        Image<double> img(24, 18, 0.7);
        const Image<double> out = contour_enhance(img);
        for (double v : out.data) {
            CHECK(v == 0.0);
        }
    }

    SECTION("single impulse equals impulse minus its low-pass part") {
        const int W = 32;
        const int H = 32;
        const double radius = 4.0;
        Image<double> img(W, H, 0.0);
        img.at(10, 12) = 1.0;
        const Image<double> out = contour_enhance(img, radius);

        // closed form by linearity: subtract the zeroed low-frequency basis sum
        Image<double> expect(W, H, 0.0);
        double max_v = 0.0;
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                double low = 0.0;
                for (int ky = 0; ky < H; ++ky) {
                    const int fy = std::min(ky, H - ky);
                    for (int kx = 0; kx < W; ++kx) {
                        const int fx = std::min(kx, W - kx);
                        if (fx * fx + fy * fy <= radius * radius) {
                            low += std::cos(2.0 * M_PI *
                                            (kx * (x - 10.0) / W + ky * (y - 12.0) / H));
                        }
                    }
                }
                const double val = std::abs((x == 10 && y == 12 ? 1.0 : 0.0) - low / (W * H));
                expect.at(x, y) = val;
                max_v = std::max(max_v, val);
            }
        }
        for (size_t i = 0; i < out.data.size(); ++i) {
            CHECK(out.data[i] == Approx(expect.data[i] / max_v).margin(1e-9));
        }
    }

    SECTION("step edges peak at the edge") {
        const int W = 64;
        Image<double> img(W, 32, 0.0);
        for (int y = 0; y < 32; ++y) {
            for (int x = 30; x < W; ++x) {
                img.at(x, y) = 1.0;
            }
        }
        const Image<double> out = contour_enhance(img, 3.0);
        int best_x = 0;
        double best_v = -1.0;
        for (int x = 0; x < W; ++x) {
            const double v = out.at(x, 16);
            if (v > best_v) {
                best_v = v;
                best_x = x;
            }
        }
        CHECK(std::abs(best_x - 30) <= 1);
    }
}

TEST_CASE("low-resolution rendering keeps the boundary within ceil(1/s) px") {
    const CameraIntrinsics intr = testutil::simple_camera(320, 240, 400.0);
    const LabelledMesh blob = make_synthetic_liver(21, 2);
    RigidPose pose;
    pose.R = rot_x(M_PI);
    pose.t = Vec3(0, 0, 500);

    const double s = 1.0 / 3.0;
    const SoftMask full = render_silhouette(blob, pose, intr, 1.0, 0.0);
    const SoftMask low = render_silhouette(blob, pose, intr, s, 0.0);

    // nearest-neighbour upsample of the low-resolution mask
    SoftMask up(full.width, full.height, 0.0);
    for (int y = 0; y < up.height; ++y) {
        for (int x = 0; x < up.width; ++x) {
            const int lx = std::min(low.width - 1, static_cast<int>((x + 0.5) * s));
            const int ly = std::min(low.height - 1, static_cast<int>((y + 0.5) * s));
            up.at(x, y) = low.at(lx, ly);
        }
    }
    const std::vector<Pixel> bf = boundary_pixels(to_occupancy(full));
    const std::vector<Pixel> bu = boundary_pixels(to_occupancy(up));
    REQUIRE_FALSE(bf.empty());
    REQUIRE_FALSE(bu.empty());
    CHECK(hausdorff2d(bf, bu) <= std::ceil(1.0 / s));
}
