#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "dayolo/model.hpp"

namespace dayolo {

// ---------------------------------------------------------------------------
// specs
// ---------------------------------------------------------------------------

// Synthetic scene parameters. Classes are drawn from {disc, square,
// triangle}; object boxes always lie fully inside the image.
struct SceneSpec {
    int image_size = 128;  // multiple of 32
    int num_classes = 3;
    int min_objects = 1;
    int max_objects = 3;
    float min_scale = 0.18f;  // object size as a fraction of image size
    float max_scale = 0.38f;
    int clutter_count = 14;  // small non-object distractors per image

    void validate() const;
    std::vector<std::string> class_names() const;
};

// Target-domain corruption. All-zero spec leaves pixels byte-identical.
// Applied as: blur, fog, per-channel gain/bias, additive noise.
struct CorruptionSpec {
    float fog_strength = 0.0f;  // alpha toward white, stronger near the bottom
    float blur_radius = 0.0f;   // gaussian sigma in pixels
    std::array<float, 3> color_gain = {1.0f, 1.0f, 1.0f};
    std::array<float, 3> color_bias = {0.0f, 0.0f, 0.0f};
    float noise_sigma = 0.0f;

    void validate() const;
    bool is_identity() const;
};

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

struct ManifestEntry {
    std::string image_path;                  // relative to the manifest root
    std::optional<std::string> label_path;   // absent for target-train images
    int domain = 0;                          // source = 0, target = 1
    std::string split;                       // "train" or "val"
};

struct DatasetManifest {
    std::string root;  // directory holding manifest.json
    std::vector<ManifestEntry> entries;
    std::vector<std::string> class_names;
    int image_size = 0;
    uint64_t seed = 0;
    std::string spec_hash;
    std::optional<std::string> created_at;

    void save(const std::string& path) const;
    static DatasetManifest load(const std::string& path);
};

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

struct DatasetItem {
    ImageSample sample;
    std::string split;
};

struct Dataset {
    std::vector<DatasetItem> items;
    std::vector<std::string> class_names;
    int image_size = 0;
    uint64_t seed = 0;
    std::string spec_hash;

    size_t size() const { return items.size(); }
};

struct GenCounts {
    int train_source = 8;
    int train_target = 8;
    int val_source = 4;
    int val_target = 4;
};

// Writes root/{source,target}/{train,val}/{images,labels} plus
// root/manifest.json. Val scenes are paired across domains (same scene,
// clean vs corrupted); train scenes are disjoint streams. Target-train
// entries carry no label files. Fully deterministic in (seed, specs).
DatasetManifest generate_synthetic_domain_pair(const SceneSpec& scene,
                                               const CorruptionSpec& corruption,
                                               const GenCounts& counts, uint64_t seed,
                                               const std::string& out_dir);

// Loads samples in manifest order, optionally filtered by split and/or
// domain. Boxes are clamped to [0,1]; malformed records raise
// ValidationError with the record index, missing files IoError with the
// path.
Dataset load_dataset(const std::string& manifest_path, const std::string& split_filter = "",
                     int domain_filter = -1);

// Writes the dataset into the canonical layout under `directory` and
// returns the manifest path. Labels are written for every item except
// target-domain training samples.
std::string save_dataset(const Dataset& dataset, const std::string& directory);

// ---------------------------------------------------------------------------
// image helpers
// ---------------------------------------------------------------------------

// PNG -> [3,H,W] float RGB in [0,1]. IoError if unreadable.
Tensor load_image_tensor(const std::string& path);
void save_image_tensor(const Tensor& pixels, const std::string& path);

// standard deviation of luminance (0.299 R + 0.587 G + 0.114 B)
double luminance_stddev(const Tensor& pixels);

// Applies a corruption to [3,H,W] pixels; noise drawn from `noise_seed`.
Tensor apply_corruption(const Tensor& pixels, const CorruptionSpec& spec, uint64_t noise_seed);

}  // namespace dayolo
