#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <fstream>

#include "p2ilf/bundle.hpp"
#include "p2ilf/io.hpp"
#include "testutil.hpp"

using namespace p2ilf;
using Catch::Approx;

namespace {

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

} // namespace

TEST_CASE("file format round trips") {
    testutil::TempDir dir("io");

    SECTION("pose JSON") {
        Rng rng(3);
        const RigidPose pose = testutil::random_pose(rng);
        save_pose_json(pose, dir.file("pose.json"));
        const RigidPose back = load_pose_json(dir.file("pose.json"));
        CHECK((back.R - pose.R).norm() == 0.0);
        CHECK((back.t - pose.t).norm() == 0.0);
    }

    SECTION("camera JSON with optional distortion keys") {
        CameraIntrinsics intr = testutil::simple_camera(1920, 1080, 1234.5);
        intr.k1 = -0.07;
        intr.p2 = 3e-4;
        save_camera_json(intr, dir.file("cam.json"));
        const CameraIntrinsics back = load_camera_json(dir.file("cam.json"));
        CHECK(back.fx == intr.fx);
        CHECK(back.k1 == intr.k1);
        CHECK(back.k3 == 0.0);

        std::ofstream minimal(dir.file("minimal.json"));
        minimal << R"({"fx":100,"fy":100,"cx":50,"cy":50,"width":100,"height":100})";
        minimal.close();
        const CameraIntrinsics m = load_camera_json(dir.file("minimal.json"));
        CHECK(m.k1 == 0.0);
        CHECK(m.p1 == 0.0);
    }

    SECTION("label map palette PNG") {
        Rng rng(7);
        LandmarkMap2D map(37, 23);
        for (int i = 0; i < 120; ++i) {
            const int x = static_cast<int>(rng.uniform_int(37));
            const int y = static_cast<int>(rng.uniform_int(23));
            switch (rng.uniform_int(4)) {
                case 0:
                    map.set(x, y, LandmarkClass::Ridge);
                    break;
                case 1:
                    map.set(x, y, LandmarkClass::Ligament);
                    break;
                case 2:
                    map.set(x, y, LandmarkClass::Silhouette);
                    break;
                default:
                    map.set(x, y, LandmarkClass::Ridge);
                    map.set(x, y, LandmarkClass::Ligament);
                    break;
            }
        }
        save_landmark_map_png(map, dir.file("map.png"));
        const LandmarkMap2D back = load_landmark_map_png(dir.file("map.png"));
        CHECK(back == map);

        // palette colors follow the figure convention
        const Image<Rgb8> rgb = load_rgb_png(dir.file("map.png"));
        for (int y = 0; y < map.height; ++y) {
            for (int x = 0; x < map.width; ++x) {
                const uint8_t bits = map.at(x, y);
                const Rgb8 c = rgb.at(x, y);
                if (bits == class_bit(LandmarkClass::Ridge)) {
                    CHECK(c == Rgb8{255, 0, 0});
                } else if (bits == class_bit(LandmarkClass::Ligament)) {
                    CHECK(c == Rgb8{0, 0, 255});
                } else if (bits == class_bit(LandmarkClass::Silhouette)) {
                    CHECK(c == Rgb8{255, 255, 0});
                }
            }
        }
    }

    SECTION("grayscale mask PNG") {
        SoftMask m(16, 9, 0.0);
        for (size_t i = 0; i < m.data.size(); ++i) {
            m.data[i] = (i % 256) / 255.0;
        }
        save_mask_png(m, dir.file("mask.png"));
        const SoftMask back = load_mask_png(dir.file("mask.png"));
        for (size_t i = 0; i < m.data.size(); ++i) {
            CHECK(back.data[i] == Approx(m.data[i]).margin(0.5 / 255.0));
        }
    }

    SECTION("3D landmark JSON keeps sets and the anterior direction") {
        LabelledMesh blob = make_synthetic_liver(4, 2);
        blob.anterior = Vec3(0, 0, -1);
        save_landmarks3d_json(blob, dir.file("lm3.json"));
        LabelledMesh other = blob;
        other.labels = {};
        other.anterior = Vec3::UnitZ();
        load_landmarks3d_json(dir.file("lm3.json"), other);
        CHECK(other.labels.ridge == blob.labels.ridge);
        CHECK(other.labels.ligament == blob.labels.ligament);
        CHECK((other.anterior - blob.anterior).norm() < 1e-12);
    }
}

TEST_CASE("synth_case produces self-consistent bundles") {
    testutil::TempDir dir("synth");
    const LabelledMesh blob = make_synthetic_liver(8, 2);
    const CameraIntrinsics intr = testutil::simple_camera(480, 360, 550.0);
    const RigidPose gt = sample_synthetic_pose(blob, intr, 8);

    const SyntheticCase sc = synth_case(blob, intr, gt, dir.str(), "t1", 8);
    const CaseBundle bundle = load_bundle(sc.manifest_path);

    SECTION("all referenced assets load and cross-validate") {
        CHECK(bundle.id == "t1");
        CHECK(bundle.mesh.vertices.size() == blob.vertices.size());
        CHECK(bundle.camera.width == intr.width);
        CHECK(bundle.pose.has_value());
        CHECK(bundle.image.has_value());
        CHECK(bundle.region_mask.has_value());
    }

    SECTION("re-rendering the ground truth reproduces the landmark map bit-exactly") {
        const LandmarkMap2D again = render_case_landmarks(bundle.mesh, *bundle.pose, bundle.camera);
        CHECK(again == bundle.landmarks2d);
    }

    SECTION("identity metric checks all pass on the bundle") {
        const std::vector<Pixel> ridge = bundle.landmarks2d.pixels_of(LandmarkClass::Ridge);
        CHECK(*precision(ridge, ridge, 0.0) == 1.0);
        CHECK(*dsc(ridge, ridge) == 1.0);
        CHECK(*symmetric_distance_score(ridge, ridge, 5.0,
                                        static_cast<double>(intr.width) * intr.height) == 0.0);
        const RegistrationReport rep = reprojection_error(*bundle.pose, bundle.mesh.labels,
                                                          bundle.mesh, bundle.landmarks2d,
                                                          bundle.camera);
        CHECK(*rep.rpe_ridge <= 1.0);
        CHECK(*rep.rpe_ligament <= 1.0);
    }

    SECTION("regeneration with the same seed is byte-identical") {
        testutil::TempDir dir2("synth2");
        const SyntheticCase sc2 = synth_case(blob, intr, gt, dir2.str(), "t1", 8);
        for (const char* name :
             {"t1_mesh.obj", "t1_landmarks3d.json", "t1_camera.json", "t1_landmarks2d.png",
              "t1_mask.png", "t1_image.png", "t1_gt_pose.json", "t1_manifest.json"}) {
            CHECK(file_bytes(dir.file(name)) == file_bytes(dir2.file(name)));
        }
    }
}

TEST_CASE("load_bundle reports broken inputs precisely") {
    testutil::TempDir dir("bundle");
    const LabelledMesh blob = make_synthetic_liver(9, 2);
    const CameraIntrinsics intr = testutil::simple_camera(320, 240, 400.0);
    const RigidPose gt = sample_synthetic_pose(blob, intr, 9);
    const SyntheticCase sc = synth_case(blob, intr, gt, dir.str(), "c", 9);

    SECTION("camera / label-map size mismatch") {
        // shrink the label map by rewriting it at half size
        LandmarkMap2D small(intr.width / 2, intr.height / 2);
        small.set(3, 3, LandmarkClass::Ridge);
        save_landmark_map_png(small, dir.file("c_landmarks2d.png"));
        CHECK_THROWS_AS(load_bundle(sc.manifest_path), DimensionMismatch);
    }

    SECTION("landmark index out of range names the landmark file") {
        Json j = load_json_file(dir.file("c_landmarks3d.json"));
        j["ridge"].push_back(static_cast<int>(blob.vertices.size()) + 5);
        save_json_file(j, dir.file("c_landmarks3d.json"));
        try {
            load_bundle(sc.manifest_path);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("landmarks3d") != std::string::npos);
        }
    }

    SECTION("missing assets are reported as such") {
        std::filesystem::remove(dir.file("c_camera.json"));
        CHECK_THROWS_AS(load_bundle(sc.manifest_path), MissingAsset);
    }
}

TEST_CASE("render_overlay") {
    testutil::TempDir dir("overlay");
    const LabelledMesh blob = make_synthetic_liver(10, 2);
    const CameraIntrinsics intr = testutil::simple_camera(320, 240, 380.0);
    const RigidPose gt = sample_synthetic_pose(blob, intr, 10);
    const SyntheticCase sc = synth_case(blob, intr, gt, dir.str(), "c", 10);
    const CaseBundle bundle = load_bundle(sc.manifest_path);

    SECTION("ground-truth overlay curves land on the bundled landmarks") {
        bool warned = true;
        const Image<Rgb8> img = render_overlay(bundle, gt, &warned);
        CHECK_FALSE(warned);
        std::vector<Pixel> drawn_ridge;
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x) {
                if (img.at(x, y) == Rgb8{255, 0, 0}) {
                    drawn_ridge.emplace_back(x, y);
                }
            }
        }
        REQUIRE_FALSE(drawn_ridge.empty());
        const NearestSet2D nn(to_vec2(bundle.landmarks2d.pixels_of(LandmarkClass::Ridge)));
        for (const Pixel& p : drawn_ridge) {
            CHECK(nn.query(Vec2(p.x(), p.y())).dist <= 1.0);
        }
    }

    SECTION("an out-of-frame pose returns the untouched image with a warning") {
        RigidPose far = gt;
        far.t = Vec3(9000.0, 9000.0, 600.0);
        bool warned = false;
        const Image<Rgb8> img = render_overlay(bundle, far, &warned);
        CHECK(warned);
        REQUIRE(bundle.image.has_value());
        CHECK(img.data == bundle.image->data);
    }
}

TEST_CASE("trace CSV lists every restart in order") {
    testutil::TempDir dir("trace");
    RegistrationResult a;
    a.restart_index = 1;
    a.loss_trace = {3.0, 2.0};
    RegistrationResult b;
    b.restart_index = 0;
    b.loss_trace = {5.5};
    write_trace_csv({a, b}, dir.file("trace.csv"));
    const std::string text = file_bytes(dir.file("trace.csv"));
    CHECK(text == "restart,iteration,loss\n0,0,5.5\n1,0,3\n1,1,2\n");
}

TEST_CASE("P2ILF_SEED is the default seed") {
    ::setenv("P2ILF_SEED", "1234", 1);
    CHECK(default_seed() == 1234);
    ::unsetenv("P2ILF_SEED");
    CHECK(default_seed() == 0);
}

TEST_CASE("correspondences_from_landmarks supports PnP on synthetic cases") {
    const LabelledMesh blob = make_synthetic_liver(12, 3);
    const CameraIntrinsics intr = testutil::simple_camera(640, 480, 700.0);
    const RigidPose gt = sample_synthetic_pose(blob, intr, 12);
    const LandmarkMap2D map = render_case_landmarks(blob, gt, intr, {1.0, 1.0});

    auto [fwd, rev] = correspondences_from_landmarks(blob, blob.labels, map, intr);
    REQUIRE(fwd.size() >= 4);
    double best = std::numeric_limits<double>::infinity();
    for (const auto* corrs : {&fwd, &rev}) {
        try {
            const RigidPose est = pnp_register(*corrs, intr);
            best = std::min(best, reprojection_rmse(*corrs, intr, est));
        } catch (const AlgorithmError&) {
        }
    }
    // curve resampling is approximate; a loose fit is all this path promises
    CHECK(best < 40.0);
}
