#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dayolo/autograd.hpp"

namespace dayolo {

// ---------------------------------------------------------------------------
// detection domain types
// ---------------------------------------------------------------------------

constexpr int kScaleCount = 3;
constexpr int kStrides[kScaleCount] = {8, 16, 32};

// Normalized center-size box annotation. class_id in [0, M).
struct BoxAnnotation {
    int class_id = 0;
    float cx = 0, cy = 0, w = 0, h = 0;
};

// One image with domain label (source=0, target=1). pixels [3,H,W] in [0,1].
struct ImageSample {
    Tensor pixels;
    int domain = 0;
    std::vector<BoxAnnotation> annotations;
    std::string id;
};

// Backbone tap output. data is [C,H,W] (or [B,C,H,W] for batched forwards).
struct FeatureMap {
    int scale_index = 1;  // 1..3 for strides 8/16/32
    int stride = 8;
    Var data;
};

// Raw head output, [A*(5+M), H, W] (batched: leading B). Channel layout per
// anchor a at base a*(5+M): tx, ty, tw, th, objectness, then M class logits.
// All entries are pre-activation.
struct DetectionGrid {
    int scale_index = 1;
    Var data;
};

struct Detection {
    int scale_index = 1;
    float cx = 0, cy = 0, w = 0, h = 0;  // normalized, clamped to [0,1]
    float objectness = 0;
    std::vector<float> class_scores;
    int cell_u = 0, cell_v = 0;
    int anchor_index = 0;

    int best_class() const;
    float score() const;  // objectness * best class probability
};

// Per-scale anchor shapes in normalized image units.
struct Anchors {
    std::array<std::vector<std::pair<float, float>>, kScaleCount> per_scale;

    int per_scale_count() const { return int(per_scale[0].size()); }
    void validate() const;
    static Anchors defaults();
};

// ---------------------------------------------------------------------------
// box utilities
// ---------------------------------------------------------------------------

// IoU of two normalized center-size boxes.
double box_iou(float acx, float acy, float aw, float ah, float bcx, float bcy, float bw, float bh);

// IoU of two box shapes centered at the origin (used for anchor assignment).
double shape_iou(float aw, float ah, float bw, float bh);

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

struct Conv2dLayer {
    Var w, b;
    int stride = 1, pad = 1;

    Var forward(const Var& x) const { return conv2d(x, w, b, stride, pad); }
};

struct LinearLayer {
    Var w, b;

    Var forward(const Var& x) const { return linear(x, w, b); }
};

struct ModelConfig {
    int num_classes = 3;
    std::vector<int> widths = {16, 32, 64, 128, 256};  // stride-2 stage widths
    Anchors anchors = Anchors::defaults();
    int head_hidden_scale = 1;  // head 3x3 keeps C_k channels

    int anchors_per_scale() const { return anchors.per_scale_count(); }
    int grid_channels() const { return anchors_per_scale() * (5 + num_classes); }
    std::array<int, kScaleCount> tap_channels() const {
        return {widths[2], widths[3], widths[4]};
    }
};

struct NamedParam {
    std::string name;
    Var param;
};

// Compact YOLOv3-style detector: five stride-2 conv stages (the last three
// followed by a stride-1 conv), taps at strides 8/16/32 feeding one head per
// scale. Heads emit raw logit grids.
class DetectorModel {
public:
    DetectorModel(ModelConfig cfg, uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }

    // [B,3,H,W] or [3,H,W]; H and W must be positive multiples of 32.
    std::array<FeatureMap, kScaleCount> backbone_forward(const Var& input) const;

    DetectionGrid head_forward(const FeatureMap& map) const;

    std::array<DetectionGrid, kScaleCount> forward_grids(const Var& input) const;

    std::vector<NamedParam> parameters() const;           // backbone + heads
    std::vector<NamedParam> backbone_parameters() const;  // the 0.001-lr group

private:
    ModelConfig cfg_;
    std::vector<Conv2dLayer> stem_;                       // stride-2 stages (+1 extra conv on taps)
    std::array<std::vector<Conv2dLayer>, kScaleCount> heads_;
    std::array<int, kScaleCount> tap_after_;              // stem index whose output is tap k
};

// He-normal initialized conv/linear layer factories (deterministic per rng).
Conv2dLayer make_conv(Rng& rng, int cin, int cout, int k, int stride, int pad);
LinearLayer make_linear(Rng& rng, int in, int out);

// ---------------------------------------------------------------------------
// decoding
// ---------------------------------------------------------------------------

// Decode one image's raw grids into detections: centers via sigmoid offsets,
// sizes via anchor * exp, objectness threshold, per-class greedy NMS across
// all scales. Thresholds must lie in (0,1).
std::vector<Detection> decode_detections(const std::array<Tensor, kScaleCount>& grids,
                                         const Anchors& anchors, int num_classes,
                                         float conf_threshold, float nms_iou);

// Greedy per-class NMS on an already-decoded list (descending score; ties by
// scale, cell, anchor). Removes boxes with IoU > nms_iou vs a kept box.
std::vector<Detection> nms_filter(std::vector<Detection> dets, float nms_iou);

// ---------------------------------------------------------------------------
// target encoding / detection loss
// ---------------------------------------------------------------------------

// Builds logit grids that decode back to the given boxes (inverse of
// decode_detections for the responsible cells); all other cells carry
// objectness logit -obj_logit. Used for round-trip checks and synthetic
// oracle grids.
std::array<Tensor, kScaleCount> encode_detection_grids(
    const std::vector<BoxAnnotation>& annotations, const Anchors& anchors, int num_classes,
    const std::array<std::pair<int, int>, kScaleCount>& grid_hw, float obj_logit = 10.0f);

// Responsibility assignment: every annotation goes to the cell containing its
// center at the (scale, anchor) whose shape-IoU with the box is highest.
// Annotations are processed in canonical order (class, cx, cy, w, h); if two
// claim the same slot the canonically-first wins and the loser contributes no
// object terms. Returns the slot per annotation index, or nullopt for losers.
struct ResponsibleSlot {
    int scale = 0;  // 0..2
    int anchor = 0;
    int u = 0, v = 0;
};
std::vector<std::optional<ResponsibleSlot>> assign_responsibility(
    const std::vector<BoxAnnotation>& annotations, const Anchors& anchors,
    const std::array<std::pair<int, int>, kScaleCount>& grid_hw);

// Squared-error detector loss over raw grids:
//   lambda_coord * [(sx-tx)^2 + (sy-ty)^2 + (sqrt(w)-sqrt(gt_w))^2 + ...]
//   + (obj-1)^2 on responsible slots + lambda_noobj * obj^2 elsewhere
//   + sum_c (class_c - onehot_c)^2 on responsible slots,
// with sx etc. the sigmoid/exp-decoded quantities. Accumulated in double.
Var detection_loss(const std::array<DetectionGrid, kScaleCount>& grids,
                   const std::vector<BoxAnnotation>& annotations, const Anchors& anchors,
                   int num_classes, float lambda_coord, float lambda_noobj);

}  // namespace dayolo
