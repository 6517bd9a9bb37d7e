#include "dayolo/cli.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "dayolo/checkpoint.hpp"
#include "dayolo/data.hpp"
#include "dayolo/evaluation.hpp"
#include "dayolo/plot.hpp"
#include "dayolo/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dayolo {

namespace {

std::optional<uint64_t> env_seed_override() {
    const char* v = std::getenv("DAYOLO_SEED");
    if (!v || !*v) return std::nullopt;
    return std::strtoull(v, nullptr, 10);
}

Dataset load_split(const std::string& data_root, const std::string& split_name) {
    std::string manifest = (fs::path(data_root) / "manifest.json").string();
    if (split_name == "source-train") return load_dataset(manifest, "train", 0);
    if (split_name == "target-train") return load_dataset(manifest, "train", 1);
    if (split_name == "source-val") return load_dataset(manifest, "val", 0);
    if (split_name == "target-val") return load_dataset(manifest, "val", 1);
    throw ValidationError("unknown split '" + split_name +
                          "' (expected source-train|target-train|source-val|target-val)");
}

int run_gen_data(const std::string& out_dir, uint64_t seed, const SceneSpec& scene,
                 const CorruptionSpec& corruption, const GenCounts& counts) {
    if (auto s = env_seed_override()) seed = *s;
    auto manifest = generate_synthetic_domain_pair(scene, corruption, counts, seed, out_dir);
    std::cerr << "generated " << manifest.entries.size() << " images under " << out_dir << "\n";
    json j;
    j["manifest"] = (fs::path(out_dir) / "manifest.json").string();
    j["entries"] = manifest.entries.size();
    j["seed"] = seed;
    std::cout << j.dump() << "\n";
    return 0;
}

int run_train(const std::string& config_path, int steps_override, long long seed_override) {
    TrainConfig cfg = TrainConfig::from_json_file(config_path);
    if (steps_override >= 0) cfg.steps = steps_override;
    if (seed_override >= 0) cfg.seed = uint64_t(seed_override);
    if (auto s = env_seed_override()) cfg.seed = *s;
    cfg.validate();
    if (cfg.data_root.empty()) throw ValidationError("config: data_root is required");

    std::string manifest = (fs::path(cfg.data_root) / "manifest.json").string();
    Dataset source_train = load_dataset(manifest, "train", 0);
    Dataset target_train = load_dataset(manifest, "train", 1);
    Dataset source_val = load_dataset(manifest, "val", 0);
    Dataset target_val = load_dataset(manifest, "val", 1);
    std::cerr << "train: " << source_train.size() << " source / " << target_train.size()
              << " target images, " << cfg.steps << " steps\n";

    FitResult result = fit(cfg, source_train, target_train,
                           source_val.items.empty() ? nullptr : &source_val,
                           target_val.items.empty() ? nullptr : &target_val);
    json j;
    j["checkpoint"] = result.checkpoint_path;
    j["metrics"] = result.metrics_path;
    j["steps"] = result.steps_run;
    if (result.final_source_map) j["map_source_val"] = *result.final_source_map;
    if (result.final_target_map) j["map_target_val"] = *result.final_target_map;
    std::cout << j.dump() << "\n";
    return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_root, const std::string& split,
             float conf, float nms, const std::string& out_path) {
    auto ck = load_checkpoint(ckpt_path);
    Dataset ds = load_split(data_root, split);
    ApResult result = evaluate_map(*ck.model, ds, conf, nms);
    std::string table_json = ap_result_to_json(result, ds.class_names, conf, nms);
    std::cerr << render_ap_table(result, ds.class_names);
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        if (!out) throw IoError("cannot write AP table: " + out_path);
        out << table_json << "\n";
    }
    std::cout << table_json << "\n";
    return 0;
}

int run_detect(const std::string& ckpt_path, const std::string& image_path, float conf, float nms,
               const std::string& out_json, const std::string& annotated_png) {
    auto ck = load_checkpoint(ckpt_path);
    Tensor pixels = load_image_tensor(image_path);
    int orig_h = pixels.dim(1), orig_w = pixels.dim(2);
    int h = std::max(32, (orig_h + 16) / 32 * 32);
    int w = std::max(32, (orig_w + 16) / 32 * 32);
    if (h != orig_h || w != orig_w) {
        std::cerr << "resizing " << orig_w << "x" << orig_h << " -> " << w << "x" << h << "\n";
        cv::Mat m(orig_h, orig_w, CV_32FC3);
        for (int y = 0; y < orig_h; ++y)
            for (int x = 0; x < orig_w; ++x)
                for (int c = 0; c < 3; ++c) m.at<cv::Vec3f>(y, x)[c] = pixels.at3(c, y, x);
        cv::resize(m, m, {w, h}, 0, 0, cv::INTER_LINEAR);
        Tensor resized({3, h, w});
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c) resized.at3(c, y, x) = m.at<cv::Vec3f>(y, x)[c];
        pixels = std::move(resized);
    }

    NoGradGuard no_grad;
    auto grids_v = ck.model->forward_grids(make_constant(pixels));
    std::array<Tensor, kScaleCount> grids;
    for (int k = 0; k < kScaleCount; ++k) grids[size_t(k)] = grids_v[size_t(k)].data->value;
    auto dets = decode_detections(grids, ck.model_config.anchors, ck.model_config.num_classes,
                                  conf, nms);

    json j;
    j["image"] = image_path;
    j["detections"] = json::array();
    for (const auto& d : dets)
        j["detections"].push_back({{"class", d.best_class()},
                                   {"score", d.score()},
                                   {"objectness", d.objectness},
                                   {"cx", d.cx},
                                   {"cy", d.cy},
                                   {"w", d.w},
                                   {"h", d.h}});
    std::string text = j.dump(2);
    if (!out_json.empty()) {
        std::ofstream out(out_json);
        if (!out) throw IoError("cannot write detections: " + out_json);
        out << text << "\n";
    }
    std::cout << text << "\n";

    if (!annotated_png.empty()) {
        cv::Mat img = cv::imread(image_path, cv::IMREAD_COLOR);
        if (img.empty()) throw IoError("cannot read image: " + image_path);
        for (const auto& d : dets) {
            int x0 = int((d.cx - d.w / 2) * float(img.cols));
            int y0 = int((d.cy - d.h / 2) * float(img.rows));
            int x1 = int((d.cx + d.w / 2) * float(img.cols));
            int y1 = int((d.cy + d.h / 2) * float(img.rows));
            cv::rectangle(img, {x0, y0}, {x1, y1}, {255, 255, 255}, 1);
            char label[48];
            std::snprintf(label, sizeof label, "c%d %.2f", d.best_class(), d.score());
            cv::putText(img, label, {x0, std::max(10, y0 - 3)}, cv::FONT_HERSHEY_SIMPLEX, 0.35,
                        {255, 255, 255}, 1);
        }
        if (!cv::imwrite(annotated_png, img)) throw IoError("cannot write " + annotated_png);
        std::cerr << "annotated image: " << annotated_png << "\n";
    }
    return 0;
}

int run_export_features(const std::string& ckpt_path, const std::string& data_root,
                        const std::string& split, const std::string& out_csv) {
    auto ck = load_checkpoint(ckpt_path);
    Dataset ds = load_split(data_root, split);
    if (ds.items.empty()) throw ValidationError("split '" + split + "' is empty");
    export_features(*ck.model, ds, out_csv);
    json j;
    j["features"] = out_csv;
    j["records"] = ds.items.size() * kScaleCount;
    std::cout << j.dump() << "\n";
    return 0;
}

int run_plot(const std::string& metrics, const std::string& ap_json, const std::string& features,
             int scale, const std::string& out_dir) {
    if (metrics.empty() && ap_json.empty() && features.empty())
        throw ValidationError("plot: nothing to do; pass --metrics, --ap, or --features");
    std::vector<std::string> written;
    if (!metrics.empty())
        for (auto& p : plot_metrics(metrics, out_dir)) written.push_back(p);
    if (!ap_json.empty())
        for (auto& p : plot_pr_curves(ap_json, out_dir)) written.push_back(p);
    if (!features.empty())
        for (auto& p : plot_embedding(features, scale, out_dir)) written.push_back(p);
    json j;
    j["plots"] = written;
    std::cout << j.dump() << "\n";
    return 0;
}

int run_validate_log(const std::string& metrics) {
    LogValidation v = validate_metrics_log(metrics);
    json j;
    j["lines_checked"] = v.lines_checked;
    j["violations"] = v.violations;
    j["max_residual"] = v.max_residual;
    j["ok"] = v.ok();
    std::cout << j.dump() << "\n";
    return v.ok() ? 0 : 1;
}

}  // namespace

int dispatch(int argc, const char* const* argv) {
    CLI::App app{"DA-YOLO: domain adaptive one-stage detection on synthetic benchmarks"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate the synthetic clear->fog dataset pair");
    std::string gen_out = "dataset";
    uint64_t gen_seed = 7;
    SceneSpec scene;
    CorruptionSpec corruption;
    corruption.fog_strength = 0.7f;
    corruption.blur_radius = 1.2f;
    corruption.color_gain = {0.85f, 0.95f, 1.1f};
    corruption.color_bias = {0.03f, 0.02f, 0.0f};
    corruption.noise_sigma = 0.03f;
    GenCounts counts;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--image-size", scene.image_size, "image size (multiple of 32)");
    gen->add_option("--classes", scene.num_classes, "number of classes (1..3)");
    gen->add_option("--min-objects", scene.min_objects, "min objects per image");
    gen->add_option("--max-objects", scene.max_objects, "max objects per image");
    gen->add_option("--min-scale", scene.min_scale, "min object size fraction");
    gen->add_option("--max-scale", scene.max_scale, "max object size fraction");
    gen->add_option("--clutter", scene.clutter_count, "clutter dots per image");
    gen->add_option("--train-source", counts.train_source, "source train images");
    gen->add_option("--train-target", counts.train_target, "target train images");
    gen->add_option("--val-source", counts.val_source, "source val images");
    gen->add_option("--val-target", counts.val_target, "target val images");
    gen->add_option("--fog", corruption.fog_strength, "fog strength");
    gen->add_option("--blur", corruption.blur_radius, "gaussian blur sigma (px)");
    gen->add_option("--noise", corruption.noise_sigma, "additive noise sigma");
    gen->add_option("--gain-r", corruption.color_gain[0], "red channel gain");
    gen->add_option("--gain-g", corruption.color_gain[1], "green channel gain");
    gen->add_option("--gain-b", corruption.color_gain[2], "blue channel gain");
    gen->add_option("--bias-r", corruption.color_bias[0], "red channel bias");
    gen->add_option("--bias-g", corruption.color_bias[1], "green channel bias");
    gen->add_option("--bias-b", corruption.color_bias[2], "blue channel bias");

    // train
    auto* train = app.add_subcommand("train", "train from a JSON config");
    std::string train_config;
    int train_steps = -1;
    long long train_seed = -1;
    train->add_option("--config", train_config, "config JSON path")->required();
    train->add_option("--steps", train_steps, "override config steps");
    train->add_option("--seed", train_seed, "override config seed");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint (per-class AP + mAP)");
    std::string eval_ckpt, eval_root, eval_split = "target-val", eval_out;
    float eval_conf = 0.25f, eval_nms = 0.45f;
    eval->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
    eval->add_option("--data-root", eval_root, "dataset root directory")->required();
    eval->add_option("--split", eval_split, "source-train|target-train|source-val|target-val");
    eval->add_option("--conf", eval_conf, "confidence threshold");
    eval->add_option("--nms", eval_nms, "NMS IoU threshold");
    eval->add_option("--out", eval_out, "write the AP table JSON here too");

    // detect
    auto* detect = app.add_subcommand("detect", "run detection on one image");
    std::string det_ckpt, det_image, det_out, det_annotated;
    float det_conf = 0.25f, det_nms = 0.45f;
    detect->add_option("--ckpt", det_ckpt, "checkpoint path")->required();
    detect->add_option("--image", det_image, "input image (PNG)")->required();
    detect->add_option("--conf", det_conf, "confidence threshold");
    detect->add_option("--nms", det_nms, "NMS IoU threshold");
    detect->add_option("--out", det_out, "write detections JSON here too");
    detect->add_option("--annotated", det_annotated, "write an annotated PNG");

    // export-features
    auto* exp = app.add_subcommand("export-features", "export per-scale averaged features as CSV");
    std::string exp_ckpt, exp_root, exp_split = "target-val", exp_out = "features.csv";
    exp->add_option("--ckpt", exp_ckpt, "checkpoint path")->required();
    exp->add_option("--data-root", exp_root, "dataset root directory")->required();
    exp->add_option("--split", exp_split, "dataset split");
    exp->add_option("--out", exp_out, "output CSV path");

    // plot
    auto* plot = app.add_subcommand("plot", "render curves/scatter PNGs from emitted files");
    std::string plot_metrics_path, plot_ap, plot_features, plot_out = "plots";
    int plot_scale = 3;
    plot->add_option("--metrics", plot_metrics_path, "metrics JSONL from train");
    plot->add_option("--ap", plot_ap, "AP table JSON from eval");
    plot->add_option("--features", plot_features, "feature CSV from export-features");
    plot->add_option("--scale", plot_scale, "feature scale for the embedding (1..3)");
    plot->add_option("--out-dir", plot_out, "output directory");

    // validate-log
    auto* vlog = app.add_subcommand("validate-log", "check the Eq.6 identity on a metrics log");
    std::string vlog_metrics;
    vlog->add_option("--metrics", vlog_metrics, "metrics JSONL path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return 1;
    }

    try {
        if (gen->parsed()) return run_gen_data(gen_out, gen_seed, scene, corruption, counts);
        if (train->parsed()) return run_train(train_config, train_steps, train_seed);
        if (eval->parsed())
            return run_eval(eval_ckpt, eval_root, eval_split, eval_conf, eval_nms, eval_out);
        if (detect->parsed())
            return run_detect(det_ckpt, det_image, det_conf, det_nms, det_out, det_annotated);
        if (exp->parsed()) return run_export_features(exp_ckpt, exp_root, exp_split, exp_out);
        if (plot->parsed())
            return run_plot(plot_metrics_path, plot_ap, plot_features, plot_scale, plot_out);
        if (vlog->parsed()) return run_validate_log(vlog_metrics);
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

}  // namespace dayolo
