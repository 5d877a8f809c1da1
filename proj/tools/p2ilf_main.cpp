// Command-line front end: synthetic case generation, registration,
// evaluation metrics and overlay rendering.

#include <CLI11.hpp>

#include <atomic>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include "p2ilf/bundle.hpp"

namespace {

using namespace p2ilf;

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitAlgorithm = 3;

std::string fmt_opt(const std::optional<double>& v, const char* sentinel) {
    if (!v) {
        return sentinel;
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", *v);
    return buf;
}

void write_csv(const std::string& path, const std::string& header,
               const std::vector<std::string>& rows) {
    std::ostream* out = &std::cout;
    std::ofstream file;
    if (!path.empty() && path != "-") {
        file.open(path);
        if (!file) {
            throw DataError("cannot write CSV file: " + path);
        }
        out = &file;
    }
    *out << header << '\n';
    for (const std::string& r : rows) {
        *out << r << '\n';
    }
}

// one whitespace-separated record per line; '#' starts a comment
std::vector<std::vector<std::string>> read_list_file(const std::string& path, size_t columns) {
    std::ifstream in(path);
    if (!in) {
        throw MissingAsset("cannot open list file: " + path);
    }
    std::vector<std::vector<std::string>> rows;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') {
            continue;
        }
        std::istringstream ss(line);
        std::vector<std::string> fields;
        std::string tok;
        while (ss >> tok) {
            fields.push_back(tok);
        }
        if (fields.size() != columns) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": expected " +
                             std::to_string(columns) + " fields, got " +
                             std::to_string(fields.size()));
        }
        rows.push_back(std::move(fields));
    }
    return rows;
}

// run `fn(i)` for each case index, `jobs` at a time; results stay ordered
void for_each_case(size_t count, int jobs, const std::function<void(size_t)>& fn) {
    if (count == 0) {
        return;
    }
    const int nthreads = std::max(1, std::min<int>(jobs > 0 ? jobs : 1, static_cast<int>(count)));
    if (nthreads == 1) {
        for (size_t i = 0; i < count; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    std::vector<std::string> errors(count);
    for (int t = 0; t < nthreads; ++t) {
        pool.emplace_back([&]() {
            for (;;) {
                const size_t i = next.fetch_add(1);
                if (i >= count) {
                    return;
                }
                try {
                    fn(i);
                } catch (const Error& e) {
                    errors[i] = e.what();
                }
            }
        });
    }
    for (auto& th : pool) {
        th.join();
    }
    for (const std::string& e : errors) {
        if (!e.empty()) {
            throw DataError(e);
        }
    }
}

struct RegisterArgs {
    std::string method;
    std::string mesh_path;
    std::string landmarks3d_path;
    std::string landmarks2d_path;
    std::string camera_path;
    std::string mask_path;
    std::string init_path;
    std::string out_path;
    std::string trace_path;
    int restarts = -1;
    int iterations = -1;
    uint64_t seed = 0;
    bool seed_set = false;
    double render_scale = 0.2;
    double threshold = 3.0;
    int jobs = 0;
};

int run_register(const RegisterArgs& args) {
    RegistrationProblem prob;
    prob.mesh = load_obj(args.mesh_path);
    load_landmarks3d_json(args.landmarks3d_path, prob.mesh);
    prob.landmarks3d = prob.mesh.labels;
    prob.intr = load_camera_json(args.camera_path);
    prob.target2d = load_landmark_map_png(args.landmarks2d_path);
    if (!args.mask_path.empty()) {
        prob.silhouette_target = load_mask_png(args.mask_path);
    }
    prob.validate();

    OptimizerConfig cfg;
    cfg.seed = args.seed_set ? args.seed : default_seed();
    cfg.render_scale = args.render_scale;
    cfg.threads = args.jobs;

    std::vector<RegistrationResult> all;
    RegistrationResult result;

    if (args.method == "pnp" || args.method == "pnp-ransac") {
        auto [fwd, rev] = correspondences_from_landmarks(prob.mesh, prob.landmarks3d,
                                                         prob.target2d, prob.intr);
        if (fwd.size() < 4) {
            throw DegenerateConfiguration("register: fewer than 4 usable correspondences");
        }
        auto fit = [&](const std::vector<Correspondence>& corrs) {
            if (args.method == "pnp") {
                return pnp_register(corrs, prob.intr);
            }
            return pnp_ransac_register(corrs, prob.intr, args.threshold, 500, cfg.seed).pose;
        };
        RigidPose best_pose;
        double best_rmse = std::numeric_limits<double>::infinity();
        for (const auto* corrs : {&fwd, &rev}) {
            try {
                const RigidPose pose = fit(*corrs);
                const double rmse = reprojection_rmse(*corrs, prob.intr, pose);
                if (rmse < best_rmse) {
                    best_rmse = rmse;
                    best_pose = pose;
                }
            } catch (const AlgorithmError&) {
                // keep the other chain orientation
            }
        }
        if (!std::isfinite(best_rmse)) {
            throw NoConvergence("register: PnP failed for both curve orientations");
        }
        result.pose = best_pose;
        result.final_loss = best_rmse;
        result.loss_trace = {best_rmse};
        result.converged = true;
        result.seed = cfg.seed;
        all.push_back(result);
    } else if (args.method == "landmark-dr") {
        cfg = OptimizerConfig::nct_defaults();
        cfg.seed = args.seed_set ? args.seed : default_seed();
        cfg.render_scale = args.render_scale;
        cfg.threads = args.jobs;
        if (args.restarts > 0) {
            cfg.restarts = args.restarts;
        }
        if (args.iterations > 0) {
            cfg.iterations = args.iterations;
        }
        result = landmark_render_register(prob, cfg, &all);
    } else if (args.method == "silhouette" || args.method == "chamfer-dr") {
        if (args.method == "chamfer-dr") {
            cfg = OptimizerConfig::ucl_defaults();
            cfg.seed = args.seed_set ? args.seed : default_seed();
            cfg.render_scale = args.render_scale;
        }
        if (args.iterations > 0) {
            cfg.iterations = args.iterations;
        }
        RigidPose init;
        if (!args.init_path.empty()) {
            init = load_pose_json(args.init_path);
        } else if (args.method == "chamfer-dr") {
            init.t = Vec3(0, 0, 500);  // identity rotation at mid depth
        } else {
            init = init_random_pose(prob.mesh, prob.intr, cfg.seed, 500.0, 500.0, 0.0);
        }
        result = args.method == "silhouette" ? silhouette_register(prob, init, cfg)
                                             : chamfer_register(prob, init, cfg);
        all.push_back(result);
    } else {
        throw CLI::ValidationError("--method", "unknown method '" + args.method + "'");
    }

    save_pose_json(result.pose, args.out_path);
    if (!args.trace_path.empty()) {
        write_trace_csv(all, args.trace_path);
    }
    std::cerr << "pose written to " << args.out_path << " (loss " << result.final_loss
              << ", restart " << result.restart_index << ")\n";
    return 0;
}

std::string eval2d_row(const std::string& id, const LandmarkMap2D& pred, const LandmarkMap2D& gt,
                       double tolerance, double d_max) {
    const Metric2DReport rep = evaluate_2d(pred, gt, tolerance, d_max);
    std::ostringstream os;
    os << id;
    for (const auto* c : {&rep.ridge, &rep.ligament, &rep.silhouette}) {
        os << ',' << (c->present ? fmt_opt(c->precision, "NA") : "NA");
    }
    for (const auto* c : {&rep.ridge, &rep.ligament, &rep.silhouette}) {
        os << ',' << (c->present ? fmt_opt(c->dsc, "NA") : "NA");
    }
    for (const auto* c : {&rep.ridge, &rep.ligament, &rep.silhouette}) {
        os << ',' << (c->present ? fmt_opt(c->g, "NA") : "NA");
    }
    return os.str();
}

std::string eval3d_row(const std::string& id, const std::string& pred_path,
                       const std::string& gt_path, const std::string& mesh_path) {
    LabelledMesh mesh = load_obj(mesh_path);
    const LandmarkSet3D pred = landmarks3d_from_json(pred_path);
    const LandmarkSet3D gt = landmarks3d_from_json(gt_path);
    const Metric3DReport rep = mean_chamfer(pred, gt, mesh);
    std::ostringstream os;
    os << id << ',' << fmt_opt(rep.chamfer_ridge, "F") << ',' << fmt_opt(rep.chamfer_ligament, "F")
       << ',' << fmt_opt(rep.overall, "F");
    return os.str();
}

std::string evalreg_row(const std::string& id, const std::string& pose_path,
                        const std::string& manifest_path) {
    const CaseBundle bundle = load_bundle(manifest_path);
    const RigidPose pose = load_pose_json(pose_path);
    const RegistrationReport rep =
        reprojection_error(pose, bundle.mesh.labels, bundle.mesh, bundle.landmarks2d, bundle.camera);
    std::ostringstream os;
    os << id << ',' << fmt_opt(rep.rpe_ridge, "F") << ',' << fmt_opt(rep.rpe_ligament, "F") << ','
       << fmt_opt(rep.hausdorff, "F");
    return os.str();
}

} // namespace

int main(int argc, char** argv) {
    using namespace p2ilf;
    CLI::App app{"Rigid 3D-2D liver registration and landmark evaluation"};
    app.require_subcommand(1);

    // ---- synth ----
    auto* synth = app.add_subcommand("synth", "Generate a self-consistent synthetic case");
    std::string synth_out;
    std::string synth_id = "case";
    std::string synth_mesh_path;
    std::string synth_lm3_path;
    uint64_t synth_seed = default_seed();
    int synth_width = 960;
    int synth_height = 540;
    int synth_subdiv = 3;
    double synth_max_angle_deg = 45.0;
    synth->add_option("--out-dir", synth_out, "Output directory")->required();
    synth->add_option("--id", synth_id, "Case identifier");
    synth->add_option("--seed", synth_seed, "RNG seed (default: P2ILF_SEED or 0)");
    synth->add_option("--mesh", synth_mesh_path, "Use this mesh instead of a generated blob");
    synth->add_option("--landmarks3d", synth_lm3_path, "3D landmarks for --mesh");
    synth->add_option("--width", synth_width, "Image width");
    synth->add_option("--height", synth_height, "Image height");
    synth->add_option("--subdiv", synth_subdiv, "Blob subdivision level");
    synth->add_option("--max-angle", synth_max_angle_deg, "Ground-truth rotation bound, deg");

    // ---- register ----
    auto* reg = app.add_subcommand("register", "Register a mesh to 2D landmark annotations");
    RegisterArgs ra;
    reg->add_option("--method", ra.method, "pnp|pnp-ransac|silhouette|landmark-dr|chamfer-dr")
        ->required();
    reg->add_option("--mesh", ra.mesh_path)->required();
    reg->add_option("--landmarks3d", ra.landmarks3d_path)->required();
    reg->add_option("--landmarks2d", ra.landmarks2d_path)->required();
    reg->add_option("--camera", ra.camera_path)->required();
    reg->add_option("--mask", ra.mask_path, "Liver region mask (silhouette method)");
    reg->add_option("--init", ra.init_path, "Initial pose JSON");
    reg->add_option("--restarts", ra.restarts);
    reg->add_option("--iterations", ra.iterations);
    auto* seed_opt = reg->add_option("--seed", ra.seed, "RNG seed (default: P2ILF_SEED or 0)");
    reg->add_option("--render-scale", ra.render_scale);
    reg->add_option("--threshold", ra.threshold, "RANSAC inlier threshold, px");
    reg->add_option("--jobs", ra.jobs, "Restart parallelism");
    reg->add_option("--out", ra.out_path, "Output pose JSON")->required();
    reg->add_option("--trace", ra.trace_path, "Loss trace CSV");

    // ---- eval-2d ----
    auto* e2d = app.add_subcommand("eval-2d", "2D landmark metrics (precision, DSC, G)");
    std::string e2d_pred;
    std::string e2d_gt;
    std::string e2d_id = "case";
    std::string e2d_list;
    std::string e2d_out;
    double e2d_tolerance = 0.0;
    double e2d_dmax = 5.0;
    int e2d_jobs = 1;
    e2d->add_option("--pred", e2d_pred, "Predicted label map PNG");
    e2d->add_option("--gt", e2d_gt, "Ground-truth label map PNG");
    e2d->add_option("--id", e2d_id);
    e2d->add_option("--list", e2d_list, "Batch file: id pred gt");
    e2d->add_option("--tolerance", e2d_tolerance, "Precision tolerance, px");
    e2d->add_option("--dmax", e2d_dmax, "Symmetric-distance tolerance, px");
    e2d->add_option("--jobs", e2d_jobs);
    e2d->add_option("--out", e2d_out, "Output CSV (default stdout)");

    // ---- eval-3d ----
    auto* e3d = app.add_subcommand("eval-3d", "3D landmark Chamfer metrics");
    std::string e3d_pred;
    std::string e3d_gt;
    std::string e3d_mesh;
    std::string e3d_id = "case";
    std::string e3d_list;
    std::string e3d_out;
    int e3d_jobs = 1;
    e3d->add_option("--pred", e3d_pred, "Predicted 3D landmark JSON");
    e3d->add_option("--gt", e3d_gt, "Ground-truth 3D landmark JSON");
    e3d->add_option("--mesh", e3d_mesh, "Mesh OBJ");
    e3d->add_option("--id", e3d_id);
    e3d->add_option("--list", e3d_list, "Batch file: id pred gt mesh");
    e3d->add_option("--jobs", e3d_jobs);
    e3d->add_option("--out", e3d_out);

    // ---- eval-reg ----
    auto* ereg = app.add_subcommand("eval-reg", "Registration reprojection metrics");
    std::string ereg_pose;
    std::string ereg_case;
    std::string ereg_id = "case";
    std::string ereg_list;
    std::string ereg_out;
    int ereg_jobs = 1;
    ereg->add_option("--pose", ereg_pose, "Estimated pose JSON");
    ereg->add_option("--case", ereg_case, "Case manifest JSON");
    ereg->add_option("--id", ereg_id);
    ereg->add_option("--list", ereg_list, "Batch file: id pose manifest");
    ereg->add_option("--jobs", ereg_jobs);
    ereg->add_option("--out", ereg_out);

    // ---- render-overlay ----
    auto* ov = app.add_subcommand("render-overlay", "Overlay a registered model on the image");
    std::string ov_case;
    std::string ov_pose;
    std::string ov_out;
    ov->add_option("--case", ov_case, "Case manifest JSON")->required();
    ov->add_option("--pose", ov_pose, "Pose JSON")->required();
    ov->add_option("--out", ov_out, "Output PNG")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*synth) {
            LabelledMesh mesh;
            if (!synth_mesh_path.empty()) {
                mesh = load_obj(synth_mesh_path);
                if (synth_lm3_path.empty()) {
                    throw DataError("synth: --landmarks3d is required with --mesh");
                }
                load_landmarks3d_json(synth_lm3_path, mesh);
            } else {
                mesh = make_synthetic_liver(synth_seed, synth_subdiv);
            }
            CameraIntrinsics intr;
            intr.width = synth_width;
            intr.height = synth_height;
            intr.fx = intr.fy = 1.05 * synth_width;
            intr.cx = synth_width / 2.0;
            intr.cy = synth_height / 2.0;
            const RigidPose pose = sample_synthetic_pose(
                mesh, intr, synth_seed, synth_max_angle_deg * M_PI / 180.0);
            const SyntheticCase sc = synth_case(mesh, intr, pose, synth_out, synth_id, synth_seed);
            std::cout << sc.manifest_path << '\n';
            return 0;
        }
        if (*reg) {
            ra.seed_set = seed_opt->count() > 0;
            return run_register(ra);
        }
        if (*e2d) {
            std::vector<std::vector<std::string>> cases;
            if (!e2d_list.empty()) {
                cases = read_list_file(e2d_list, 3);
            } else if (!e2d_pred.empty() && !e2d_gt.empty()) {
                cases.push_back({e2d_id, e2d_pred, e2d_gt});
            } else {
                throw DataError("eval-2d: provide --pred/--gt or --list");
            }
            std::vector<std::string> rows(cases.size());
            for_each_case(cases.size(), e2d_jobs, [&](size_t i) {
                const LandmarkMap2D pred = load_landmark_map_png(cases[i][1]);
                const LandmarkMap2D gt = load_landmark_map_png(cases[i][2]);
                rows[i] = eval2d_row(cases[i][0], pred, gt, e2d_tolerance, e2d_dmax);
            });
            write_csv(e2d_out,
                      "id,precision_ridge,precision_ligament,precision_silhouette,"
                      "dsc_ridge,dsc_ligament,dsc_silhouette,g_ridge,g_ligament,g_silhouette",
                      rows);
            return 0;
        }
        if (*e3d) {
            std::vector<std::vector<std::string>> cases;
            if (!e3d_list.empty()) {
                cases = read_list_file(e3d_list, 4);
            } else if (!e3d_pred.empty() && !e3d_gt.empty() && !e3d_mesh.empty()) {
                cases.push_back({e3d_id, e3d_pred, e3d_gt, e3d_mesh});
            } else {
                throw DataError("eval-3d: provide --pred/--gt/--mesh or --list");
            }
            std::vector<std::string> rows(cases.size());
            for_each_case(cases.size(), e3d_jobs, [&](size_t i) {
                rows[i] = eval3d_row(cases[i][0], cases[i][1], cases[i][2], cases[i][3]);
            });
            write_csv(e3d_out, "id,chamfer_ridge,chamfer_ligament,overall_mean", rows);
            return 0;
        }
        if (*ereg) {
            std::vector<std::vector<std::string>> cases;
            if (!ereg_list.empty()) {
                cases = read_list_file(ereg_list, 3);
            } else if (!ereg_pose.empty() && !ereg_case.empty()) {
                cases.push_back({ereg_id, ereg_pose, ereg_case});
            } else {
                throw DataError("eval-reg: provide --pose/--case or --list");
            }
            std::vector<std::string> rows(cases.size());
            for_each_case(cases.size(), ereg_jobs, [&](size_t i) {
                rows[i] = evalreg_row(cases[i][0], cases[i][1], cases[i][2]);
            });
            write_csv(ereg_out, "id,rpe_ridge,rpe_ligament,hausdorff", rows);
            return 0;
        }
        if (*ov) {
            const CaseBundle bundle = load_bundle(ov_case);
            const RigidPose pose = load_pose_json(ov_pose);
            bool warned = false;
            const Image<Rgb8> img = render_overlay(bundle, pose, &warned);
            save_rgb_png(img, ov_out);
            if (warned) {
                std::cerr << "warning: model projects outside the frame; wrote the plain image\n";
            }
            return 0;
        }
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitData;
    } catch (const AlgorithmError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitAlgorithm;
    } catch (const CLI::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    }
    return 0;
}
