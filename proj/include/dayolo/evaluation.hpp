#pragma once

#include <map>
#include <string>
#include <vector>

#include "dayolo/data.hpp"
#include "dayolo/model.hpp"

namespace dayolo {

// one detection or ground-truth box tied to an image
struct EvalBox {
    std::string image_id;
    int class_id = 0;
    float score = 1.0f;  // ignored for ground truth
    float cx = 0, cy = 0, w = 0, h = 0;
};

struct ClassAp {
    int class_id = 0;
    double ap = 0.0;
    int gt_count = 0;
    int det_count = 0;
    // ranked-sweep PR points (recall, precision), for plotting
    std::vector<std::pair<double, double>> pr_points;
};

struct ApResult {
    std::vector<ClassAp> per_class;      // classes with >= 1 ground truth
    std::vector<int> fp_only_classes;    // detected classes with no GT anywhere
    double map = 0.0;
    int num_images = 0;
};

// PASCAL-style AP at a single IoU threshold with all-point interpolation.
// Detections are ranked by (score desc, image_id asc, box ascending); each
// matches the highest-IoU unmatched ground truth of its class in its image
// when that IoU clears the threshold. mAP averages classes with >= 1 GT.
ApResult average_precision(const std::vector<EvalBox>& detections,
                           const std::vector<EvalBox>& ground_truths, double iou_threshold = 0.5);

// Runs the detector over an annotated dataset and scores it. Throws
// ValidationError when the dataset is empty, carries no annotations, or its
// class count disagrees with the model.
ApResult evaluate_map(const DetectorModel& model, const Dataset& dataset, float conf_threshold,
                      float nms_iou);

std::string render_ap_table(const ApResult& result, const std::vector<std::string>& class_names);
std::string ap_result_to_json(const ApResult& result, const std::vector<std::string>& class_names,
                              float conf_threshold, float nms_iou);

// Spatially-averaged tap activations, one CSV row per (image, scale):
// id, domain, scale, v0..v{C_k-1}. Row width follows the scale's channel
// count.
void export_features(const DetectorModel& model, const Dataset& dataset,
                     const std::string& out_csv_path);

}  // namespace dayolo
