#include "dayolo/data.hpp"

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace dayolo {

// ---------------------------------------------------------------------------
// specs
// ---------------------------------------------------------------------------

void SceneSpec::validate() const {
    if (image_size <= 0 || image_size % 32 != 0)
        throw ValidationError("scene: image_size must be a positive multiple of 32");
    if (num_classes < 1 || num_classes > 3)
        throw ValidationError("scene: num_classes must be 1..3 (disc, square, triangle)");
    if (min_objects < 0 || max_objects < min_objects)
        throw ValidationError("scene: bad object count range");
    if (!(min_scale > 0.0f) || max_scale < min_scale || max_scale > 0.9f)
        throw ValidationError("scene: bad object scale range");
    if (clutter_count < 0) throw ValidationError("scene: clutter_count must be >= 0");
}

std::vector<std::string> SceneSpec::class_names() const {
    static const std::vector<std::string> names = {"disc", "square", "triangle"};
    return {names.begin(), names.begin() + num_classes};
}

void CorruptionSpec::validate() const {
    if (fog_strength < 0.0f) throw ValidationError("corruption: fog_strength must be >= 0");
    if (blur_radius < 0.0f) throw ValidationError("corruption: blur_radius must be >= 0");
    if (noise_sigma < 0.0f) throw ValidationError("corruption: noise_sigma must be >= 0");
}

bool CorruptionSpec::is_identity() const {
    return fog_strength == 0.0f && blur_radius == 0.0f && noise_sigma == 0.0f &&
           color_gain == std::array<float, 3>{1.0f, 1.0f, 1.0f} &&
           color_bias == std::array<float, 3>{0.0f, 0.0f, 0.0f};
}

// ---------------------------------------------------------------------------
// tensor <-> mat
// ---------------------------------------------------------------------------

namespace {

// planar RGB float [3,H,W] -> interleaved 8-bit BGR
cv::Mat tensor_to_bgr8(const Tensor& t) {
    int h = t.dim(1), w = t.dim(2);
    cv::Mat m(h, w, CV_8UC3);
    for (int y = 0; y < h; ++y) {
        auto* row = m.ptr<cv::Vec3b>(y);
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                float v = std::clamp(t.at3(c, y, x), 0.0f, 1.0f);
                row[x][2 - c] = uchar(std::lround(v * 255.0f));
            }
        }
    }
    return m;
}

Tensor bgr8_to_tensor(const cv::Mat& m) {
    Tensor t({3, m.rows, m.cols});
    for (int y = 0; y < m.rows; ++y) {
        const auto* row = m.ptr<cv::Vec3b>(y);
        for (int x = 0; x < m.cols; ++x)
            for (int c = 0; c < 3; ++c) t.at3(c, y, x) = float(row[x][2 - c]) / 255.0f;
    }
    return t;
}

}  // namespace

Tensor load_image_tensor(const std::string& path) {
    cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
    if (m.empty()) throw IoError("cannot read image: " + path);
    return bgr8_to_tensor(m);
}

void save_image_tensor(const Tensor& pixels, const std::string& path) {
    if (pixels.ndim() != 3 || pixels.dim(0) != 3)
        throw ShapeError("save_image_tensor: pixels must be [3,H,W]");
    if (!cv::imwrite(path, tensor_to_bgr8(pixels))) throw IoError("cannot write image: " + path);
}

double luminance_stddev(const Tensor& pixels) {
    int h = pixels.dim(1), w = pixels.dim(2);
    double sum = 0.0, sum2 = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double l = 0.299 * pixels.at3(0, y, x) + 0.587 * pixels.at3(1, y, x) +
                       0.114 * pixels.at3(2, y, x);
            sum += l;
            sum2 += l * l;
        }
    double n = double(h) * w;
    double mean = sum / n;
    return std::sqrt(std::max(0.0, sum2 / n - mean * mean));
}

// ---------------------------------------------------------------------------
// scene rendering
// ---------------------------------------------------------------------------

namespace {

struct SceneObject {
    int class_id;
    float cx, cy, w, h;  // normalized
    cv::Scalar color;    // RGB in [0,1]
};

// bright background, dark saturated objects: fog (a blend toward white)
// then strictly compresses luminance contrast instead of adding its own
const cv::Scalar kClassColors[3] = {
    {0.72, 0.12, 0.10},  // disc: red
    {0.10, 0.50, 0.12},  // square: green
    {0.12, 0.22, 0.70},  // triangle: blue
};

const cv::Scalar kPalette[4] = {
    {0.88, 0.88, 0.90},
    {0.90, 0.87, 0.82},
    {0.84, 0.89, 0.86},
    {0.86, 0.84, 0.90},
};

cv::Scalar jitter_color(const cv::Scalar& base, Rng& rng, double amount) {
    cv::Scalar out;
    for (int c = 0; c < 3; ++c)
        out[c] = std::clamp(base[c] + rng.uniform(-amount, amount), 0.05, 0.95);
    return out;
}

// rgb float scene, interleaved CV_32FC3 with channel order R,G,B
cv::Mat render_scene(const SceneSpec& spec, Rng& rng, std::vector<SceneObject>& objects_out) {
    int n = spec.image_size;
    cv::Scalar bg = jitter_color(kPalette[rng.uniform_int(0, 3)], rng, 0.04);
    cv::Mat img(n, n, CV_32FC3);
    double grad = rng.uniform(-0.04, 0.04);
    for (int y = 0; y < n; ++y) {
        float shade = float(grad * (double(y) / n - 0.5));
        auto* row = img.ptr<cv::Vec3f>(y);
        for (int x = 0; x < n; ++x)
            for (int c = 0; c < 3; ++c) row[x][c] = std::clamp(float(bg[c]) + shade, 0.0f, 1.0f);
    }

    // clutter: small luminance-jittered dots; the shared per-channel delta
    // keeps them chroma-neutral so they never read as class-colored
    for (int i = 0; i < spec.clutter_count; ++i) {
        int cx = rng.uniform_int(0, n - 1);
        int cy = rng.uniform_int(0, n - 1);
        int r = rng.uniform_int(1, 2);
        double delta = rng.uniform(-0.18, 0.18);
        cv::Scalar col;
        for (int c = 0; c < 3; ++c) col[c] = std::clamp(bg[c] + delta, 0.05, 0.95);
        cv::circle(img, {cx, cy}, r, col, cv::FILLED, cv::LINE_8);
    }

    int count = rng.uniform_int(spec.min_objects, spec.max_objects);
    std::vector<SceneObject> objects;
    for (int i = 0; i < count; ++i) {
        for (int attempt = 0; attempt < 50; ++attempt) {
            SceneObject o;
            o.class_id = rng.uniform_int(0, spec.num_classes - 1);
            float s = float(rng.uniform(spec.min_scale, spec.max_scale));
            o.w = s;
            o.h = o.class_id == 2 ? s * float(rng.uniform(0.8, 1.1)) : s;
            float margin_x = o.w * 0.5f + 0.02f;
            float margin_y = o.h * 0.5f + 0.02f;
            o.cx = float(rng.uniform(margin_x, 1.0f - margin_x));
            o.cy = float(rng.uniform(margin_y, 1.0f - margin_y));
            o.color = jitter_color(kClassColors[o.class_id], rng, 0.08);
            bool clear = true;
            for (const auto& prev : objects)
                if (box_iou(o.cx, o.cy, o.w, o.h, prev.cx, prev.cy, prev.w, prev.h) > 0.15) {
                    clear = false;
                    break;
                }
            if (!clear) continue;
            objects.push_back(o);
            break;
        }
    }

    for (auto& o : objects) {
        int px = int(std::lround(o.cx * n)), py = int(std::lround(o.cy * n));
        int half_w = int(std::lround(o.w * n * 0.5)), half_h = int(std::lround(o.h * n * 0.5));
        if (o.class_id == 0) half_h = half_w;
        switch (o.class_id) {
            case 0:
                cv::circle(img, {px, py}, half_w, o.color, cv::FILLED, cv::LINE_8);
                break;
            case 1:
                cv::rectangle(img, {px - half_w, py - half_h}, {px + half_w, py + half_h}, o.color,
                              cv::FILLED, cv::LINE_8);
                break;
            default: {
                std::vector<cv::Point> pts = {{px, py - half_h},
                                              {px - half_w, py + half_h},
                                              {px + half_w, py + half_h}};
                cv::fillConvexPoly(img, pts, o.color, cv::LINE_8);
                break;
            }
        }
        // the stored box covers the pixels actually rasterized
        o.cx = (float(px) + 0.5f) / float(n);
        o.cy = (float(py) + 0.5f) / float(n);
        o.w = float(2 * half_w + 1) / float(n);
        o.h = float(2 * half_h + 1) / float(n);
    }

    objects_out = std::move(objects);
    return img;
}

Tensor mat32f_to_tensor(const cv::Mat& img) {
    Tensor t({3, img.rows, img.cols});
    for (int y = 0; y < img.rows; ++y) {
        const auto* row = img.ptr<cv::Vec3f>(y);
        for (int x = 0; x < img.cols; ++x)
            for (int c = 0; c < 3; ++c) t.at3(c, y, x) = row[x][c];
    }
    return t;
}

// quantize like the PNG writer does, so loaded pixels match saved pixels
Tensor quantize_tensor(const Tensor& t) {
    Tensor out = t;
    for (float& v : out.data)
        v = float(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
    return out;
}

}  // namespace

Tensor apply_corruption(const Tensor& pixels, const CorruptionSpec& spec, uint64_t noise_seed) {
    spec.validate();
    if (spec.is_identity()) return pixels;

    int h = pixels.dim(1), w = pixels.dim(2);
    cv::Mat img(h, w, CV_32FC3);
    for (int y = 0; y < h; ++y) {
        auto* row = img.ptr<cv::Vec3f>(y);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) row[x][c] = pixels.at3(c, y, x);
    }

    if (spec.blur_radius > 0.0f) {
        int k = 2 * int(std::ceil(3.0f * spec.blur_radius)) + 1;
        cv::GaussianBlur(img, img, {k, k}, spec.blur_radius, spec.blur_radius,
                         cv::BORDER_REPLICATE);
    }

    if (spec.fog_strength > 0.0f) {
        for (int y = 0; y < h; ++y) {
            float t = std::min(1.0f, spec.fog_strength * (0.3f + 0.7f * float(y) / float(h)));
            auto* row = img.ptr<cv::Vec3f>(y);
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c) row[x][c] = (1.0f - t) * row[x][c] + t;
        }
    }

    bool shift = spec.color_gain != std::array<float, 3>{1.0f, 1.0f, 1.0f} ||
                 spec.color_bias != std::array<float, 3>{0.0f, 0.0f, 0.0f};
    if (shift) {
        for (int y = 0; y < h; ++y) {
            auto* row = img.ptr<cv::Vec3f>(y);
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c)
                    row[x][c] = row[x][c] * spec.color_gain[size_t(c)] + spec.color_bias[size_t(c)];
        }
    }

    if (spec.noise_sigma > 0.0f) {
        Rng rng(noise_seed);
        for (int y = 0; y < h; ++y) {
            auto* row = img.ptr<cv::Vec3f>(y);
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c)
                    row[x][c] += float(rng.normal()) * spec.noise_sigma;
        }
    }

    Tensor out = mat32f_to_tensor(img);
    for (float& v : out.data) v = std::clamp(v, 0.0f, 1.0f);
    return out;
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

void DatasetManifest::save(const std::string& path) const {
    json j;
    j["format"] = "dayolo-dataset-v1";
    j["class_names"] = class_names;
    j["image_size"] = image_size;
    j["seed"] = seed;
    j["spec_hash"] = spec_hash;
    if (created_at) j["created_at"] = *created_at;
    json jentries = json::array();
    for (const auto& e : entries) {
        json je;
        je["image"] = e.image_path;
        if (e.label_path)
            je["label"] = *e.label_path;
        else
            je["label"] = nullptr;
        je["domain"] = e.domain;
        je["split"] = e.split;
        jentries.push_back(je);
    }
    j["entries"] = jentries;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed: " + path);
}

DatasetManifest DatasetManifest::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read manifest: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ValidationError("malformed manifest " + path + ": " + e.what());
    }
    DatasetManifest m;
    m.root = fs::path(path).parent_path().string();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.image_size = j.value("image_size", 0);
    m.seed = j.value("seed", uint64_t(0));
    m.spec_hash = j.value("spec_hash", std::string());
    if (j.contains("created_at") && !j["created_at"].is_null())
        m.created_at = j["created_at"].get<std::string>();
    for (const auto& je : j.at("entries")) {
        ManifestEntry e;
        e.image_path = je.at("image").get<std::string>();
        if (je.contains("label") && !je["label"].is_null())
            e.label_path = je["label"].get<std::string>();
        e.domain = je.at("domain").get<int>();
        e.split = je.at("split").get<std::string>();
        m.entries.push_back(std::move(e));
    }
    return m;
}

// ---------------------------------------------------------------------------
// generator
// ---------------------------------------------------------------------------

namespace {

constexpr uint64_t kStreamTrainSource = 1;
constexpr uint64_t kStreamTrainTarget = 2;
constexpr uint64_t kStreamVal = 3;
constexpr uint64_t kStreamNoiseTrain = 4;
constexpr uint64_t kStreamNoiseVal = 5;

std::string spec_hash_of(const SceneSpec& s, const CorruptionSpec& c) {
    json j;
    j["scene"] = {s.image_size,  s.num_classes, s.min_objects, s.max_objects,
                  s.min_scale,   s.max_scale,   s.clutter_count};
    j["corruption"] = {c.fog_strength, c.blur_radius, c.color_gain, c.color_bias, c.noise_sigma};
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)fnv1a64(j.dump()));
    return buf;
}

void write_label_json(const std::string& path, const std::vector<BoxAnnotation>& boxes) {
    json j;
    j["boxes"] = json::array();
    for (const auto& b : boxes)
        j["boxes"].push_back({{"class", b.class_id}, {"cx", b.cx}, {"cy", b.cy}, {"w", b.w}, {"h", b.h}});
    std::ofstream out(path);
    if (!out) throw IoError("cannot write label: " + path);
    out << j.dump(2) << "\n";
}

struct GeneratedImage {
    Tensor pixels;
    std::vector<BoxAnnotation> boxes;
};

GeneratedImage make_scene_image(const SceneSpec& spec, uint64_t scene_seed) {
    Rng rng(scene_seed);
    std::vector<SceneObject> objects;
    cv::Mat img = render_scene(spec, rng, objects);
    GeneratedImage out;
    out.pixels = mat32f_to_tensor(img);
    for (const auto& o : objects) out.boxes.push_back({o.class_id, o.cx, o.cy, o.w, o.h});
    return out;
}

}  // namespace

DatasetManifest generate_synthetic_domain_pair(const SceneSpec& scene,
                                               const CorruptionSpec& corruption,
                                               const GenCounts& counts, uint64_t seed,
                                               const std::string& out_dir) {
    scene.validate();
    corruption.validate();
    if (counts.train_source < 1 || counts.train_target < 1 || counts.val_source < 1 ||
        counts.val_target < 1)
        throw ValidationError("generator: all split counts must be >= 1");

    std::error_code ec;
    for (const char* d : {"source/train/images", "source/train/labels", "source/val/images",
                          "source/val/labels", "target/train/images", "target/val/images",
                          "target/val/labels"}) {
        fs::create_directories(fs::path(out_dir) / d, ec);
        if (ec) throw IoError("cannot create " + (fs::path(out_dir) / d).string() + ": " + ec.message());
    }

    DatasetManifest manifest;
    manifest.root = out_dir;
    manifest.class_names = scene.class_names();
    manifest.image_size = scene.image_size;
    manifest.seed = seed;
    manifest.spec_hash = spec_hash_of(scene, corruption);
    // no created_at: generator output is fully seed-determined

    char name[64];

    // source train
    for (int i = 0; i < counts.train_source; ++i) {
        auto gen = make_scene_image(scene, child_seed(seed, kStreamTrainSource, uint64_t(i)));
        std::snprintf(name, sizeof name, "src_train_%05d", i);
        std::string img_rel = std::string("source/train/images/") + name + ".png";
        std::string lbl_rel = std::string("source/train/labels/") + name + ".json";
        save_image_tensor(gen.pixels, (fs::path(out_dir) / img_rel).string());
        write_label_json((fs::path(out_dir) / lbl_rel).string(), gen.boxes);
        manifest.entries.push_back({img_rel, lbl_rel, 0, "train"});
    }

    // target train: corrupted disjoint scenes, images only
    for (int i = 0; i < counts.train_target; ++i) {
        auto gen = make_scene_image(scene, child_seed(seed, kStreamTrainTarget, uint64_t(i)));
        Tensor corrupted =
            apply_corruption(gen.pixels, corruption, child_seed(seed, kStreamNoiseTrain, uint64_t(i)));
        std::snprintf(name, sizeof name, "tgt_train_%05d", i);
        std::string img_rel = std::string("target/train/images/") + name + ".png";
        save_image_tensor(corrupted, (fs::path(out_dir) / img_rel).string());
        manifest.entries.push_back({img_rel, std::nullopt, 1, "train"});
    }

    // val: paired scenes, clean for source and corrupted for target
    int val_scenes = std::max(counts.val_source, counts.val_target);
    for (int i = 0; i < val_scenes; ++i) {
        auto gen = make_scene_image(scene, child_seed(seed, kStreamVal, uint64_t(i)));
        if (i < counts.val_source) {
            std::snprintf(name, sizeof name, "src_val_%05d", i);
            std::string img_rel = std::string("source/val/images/") + name + ".png";
            std::string lbl_rel = std::string("source/val/labels/") + name + ".json";
            save_image_tensor(gen.pixels, (fs::path(out_dir) / img_rel).string());
            write_label_json((fs::path(out_dir) / lbl_rel).string(), gen.boxes);
            manifest.entries.push_back({img_rel, lbl_rel, 0, "val"});
        }
        if (i < counts.val_target) {
            Tensor corrupted = apply_corruption(gen.pixels, corruption,
                                                child_seed(seed, kStreamNoiseVal, uint64_t(i)));
            std::snprintf(name, sizeof name, "tgt_val_%05d", i);
            std::string img_rel = std::string("target/val/images/") + name + ".png";
            std::string lbl_rel = std::string("target/val/labels/") + name + ".json";
            save_image_tensor(corrupted, (fs::path(out_dir) / img_rel).string());
            write_label_json((fs::path(out_dir) / lbl_rel).string(), gen.boxes);
            manifest.entries.push_back({img_rel, lbl_rel, 1, "val"});
        }
    }

    manifest.save((fs::path(out_dir) / "manifest.json").string());
    return manifest;
}

// ---------------------------------------------------------------------------
// load / save
// ---------------------------------------------------------------------------

namespace {

std::vector<BoxAnnotation> read_label_json(const std::string& path, int num_classes,
                                           size_t record_index) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read label: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ValidationError("record " + std::to_string(record_index) + ": malformed label " +
                              path + ": " + e.what());
    }
    std::vector<BoxAnnotation> boxes;
    for (const auto& jb : j.at("boxes")) {
        BoxAnnotation b;
        b.class_id = jb.at("class").get<int>();
        b.cx = jb.at("cx").get<float>();
        b.cy = jb.at("cy").get<float>();
        b.w = jb.at("w").get<float>();
        b.h = jb.at("h").get<float>();
        if (b.class_id < 0 || b.class_id >= num_classes)
            throw ValidationError("record " + std::to_string(record_index) + ": class_id " +
                                  std::to_string(b.class_id) + " outside [0," +
                                  std::to_string(num_classes) + ")");
        if (!(b.w > 0.0f) || !(b.h > 0.0f))
            throw ValidationError("record " + std::to_string(record_index) +
                                  ": non-positive box size");
        // clamp corners into [0,1]; boxes already in bounds pass through
        // untouched so save/load round-trips exactly
        const float slack = 1e-6f;
        if (b.cx - b.w * 0.5f < -slack || b.cx + b.w * 0.5f > 1.0f + slack ||
            b.cy - b.h * 0.5f < -slack || b.cy + b.h * 0.5f > 1.0f + slack) {
            float x0 = std::clamp(b.cx - b.w * 0.5f, 0.0f, 1.0f);
            float x1 = std::clamp(b.cx + b.w * 0.5f, 0.0f, 1.0f);
            float y0 = std::clamp(b.cy - b.h * 0.5f, 0.0f, 1.0f);
            float y1 = std::clamp(b.cy + b.h * 0.5f, 0.0f, 1.0f);
            if (x1 <= x0 || y1 <= y0)
                throw ValidationError("record " + std::to_string(record_index) +
                                      ": box lies outside the image");
            b.cx = (x0 + x1) * 0.5f;
            b.cy = (y0 + y1) * 0.5f;
            b.w = x1 - x0;
            b.h = y1 - y0;
        }
        boxes.push_back(b);
    }
    return boxes;
}

std::string stem_of(const std::string& rel_path) {
    return fs::path(rel_path).stem().string();
}

}  // namespace

Dataset load_dataset(const std::string& manifest_path, const std::string& split_filter,
                     int domain_filter) {
    DatasetManifest m = DatasetManifest::load(manifest_path);
    Dataset ds;
    ds.class_names = m.class_names;
    ds.image_size = m.image_size;
    ds.seed = m.seed;
    ds.spec_hash = m.spec_hash;
    int num_classes = int(m.class_names.size());
    for (size_t i = 0; i < m.entries.size(); ++i) {
        const auto& e = m.entries[i];
        if (!split_filter.empty() && e.split != split_filter) continue;
        if (domain_filter >= 0 && e.domain != domain_filter) continue;
        DatasetItem item;
        item.split = e.split;
        item.sample.domain = e.domain;
        item.sample.id = stem_of(e.image_path);
        item.sample.pixels = load_image_tensor((fs::path(m.root) / e.image_path).string());
        if (e.label_path)
            item.sample.annotations =
                read_label_json((fs::path(m.root) / *e.label_path).string(), num_classes, i);
        ds.items.push_back(std::move(item));
    }
    return ds;
}

std::string save_dataset(const Dataset& dataset, const std::string& directory) {
    std::error_code ec;
    fs::create_directories(directory, ec);
    if (ec) throw IoError("cannot create " + directory + ": " + ec.message());

    DatasetManifest manifest;
    manifest.root = directory;
    manifest.class_names = dataset.class_names;
    manifest.image_size = dataset.image_size;
    manifest.seed = dataset.seed;
    manifest.spec_hash = dataset.spec_hash;
    {
        // wall-clock stamp; comparisons ignore it
        std::time_t now = std::time(nullptr);
        char buf[32];
        std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
        manifest.created_at = std::string(buf);
    }

    std::array<int, 4> counters = {0, 0, 0, 0};  // src/train, src/val, tgt/train, tgt/val
    for (const auto& item : dataset.items) {
        const bool target = item.sample.domain == 1;
        const std::string base = std::string(target ? "target/" : "source/") + item.split;
        fs::create_directories(fs::path(directory) / base / "images", ec);
        if (ec) throw IoError("cannot create directories under " + directory);
        int& counter = counters[size_t((target ? 2 : 0) + (item.split == "val" ? 1 : 0))];
        char name[64];
        std::snprintf(name, sizeof name, "%s_%s_%05d", target ? "tgt" : "src",
                      item.split.c_str(), counter++);
        std::string img_rel = base + "/images/" + name + ".png";
        save_image_tensor(item.sample.pixels, (fs::path(directory) / img_rel).string());
        std::optional<std::string> lbl_rel;
        if (!(target && item.split == "train")) {
            fs::create_directories(fs::path(directory) / base / "labels", ec);
            lbl_rel = base + "/labels/" + name + ".json";
            write_label_json((fs::path(directory) / *lbl_rel).string(), item.sample.annotations);
        }
        manifest.entries.push_back({img_rel, lbl_rel, item.sample.domain, item.split});
    }

    std::string manifest_path = (fs::path(directory) / "manifest.json").string();
    manifest.save(manifest_path);
    return manifest_path;
}

}  // namespace dayolo
