#include "dayolo/evaluation.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <tuple>

using nlohmann::json;

namespace dayolo {

namespace {

// deterministic ranking: score desc, then image id, then box lexicographic
bool eval_rank(const EvalBox& a, const EvalBox& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    return std::tie(a.cx, a.cy, a.w, a.h) < std::tie(b.cx, b.cy, b.w, b.h);
}

bool gt_rank(const EvalBox& a, const EvalBox& b) {
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    return std::tie(a.cx, a.cy, a.w, a.h) < std::tie(b.cx, b.cy, b.w, b.h);
}

// area under the monotone envelope of the ranked PR sweep
double all_point_ap(const std::vector<char>& tp_flags, int gt_count) {
    if (gt_count == 0) return 0.0;
    size_t n = tp_flags.size();
    std::vector<double> precision(n), recall(n);
    int tp = 0;
    for (size_t i = 0; i < n; ++i) {
        tp += tp_flags[i] ? 1 : 0;
        precision[i] = double(tp) / double(i + 1);
        recall[i] = double(tp) / double(gt_count);
    }
    // envelope: max precision at any recall >= r
    for (size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0.0, prev_recall = 0.0;
    for (size_t i = 0; i < n; ++i) {
        if (recall[i] > prev_recall) {
            ap += (recall[i] - prev_recall) * precision[i];
            prev_recall = recall[i];
        }
    }
    return ap;
}

}  // namespace

ApResult average_precision(const std::vector<EvalBox>& detections,
                           const std::vector<EvalBox>& ground_truths, double iou_threshold) {
    for (const auto& d : detections)
        if (d.score < 0.0f || d.score > 1.0f)
            throw ValidationError("average_precision: detection score outside [0,1]");

    std::set<int> gt_classes, det_classes;
    for (const auto& g : ground_truths) gt_classes.insert(g.class_id);
    for (const auto& d : detections) det_classes.insert(d.class_id);

    ApResult result;
    for (int cls : det_classes)
        if (!gt_classes.count(cls)) result.fp_only_classes.push_back(cls);

    double ap_sum = 0.0;
    for (int cls : gt_classes) {
        std::vector<EvalBox> dets, gts;
        for (const auto& d : detections)
            if (d.class_id == cls) dets.push_back(d);
        for (const auto& g : ground_truths)
            if (g.class_id == cls) gts.push_back(g);
        std::sort(dets.begin(), dets.end(), eval_rank);
        std::sort(gts.begin(), gts.end(), gt_rank);

        std::vector<char> matched(gts.size(), 0);
        std::vector<char> tp_flags;
        tp_flags.reserve(dets.size());
        for (const auto& d : dets) {
            double best_iou = 0.0;
            int best_gt = -1;
            for (size_t gi = 0; gi < gts.size(); ++gi) {
                if (matched[gi] || gts[gi].image_id != d.image_id) continue;
                double iou = box_iou(d.cx, d.cy, d.w, d.h, gts[gi].cx, gts[gi].cy, gts[gi].w, gts[gi].h);
                if (iou > best_iou) {  // equal-IoU tie keeps the earlier canonical GT
                    best_iou = iou;
                    best_gt = int(gi);
                }
            }
            bool tp = best_gt >= 0 && best_iou >= iou_threshold;
            if (tp) matched[size_t(best_gt)] = 1;
            tp_flags.push_back(tp ? 1 : 0);
        }

        ClassAp ca;
        ca.class_id = cls;
        ca.gt_count = int(gts.size());
        ca.det_count = int(dets.size());
        ca.ap = all_point_ap(tp_flags, ca.gt_count);
        int tp = 0;
        for (size_t i = 0; i < tp_flags.size(); ++i) {
            tp += tp_flags[i] ? 1 : 0;
            ca.pr_points.push_back({double(tp) / double(ca.gt_count), double(tp) / double(i + 1)});
        }
        ap_sum += ca.ap;
        result.per_class.push_back(std::move(ca));
    }

    result.map = result.per_class.empty() ? 0.0 : ap_sum / double(result.per_class.size());
    return result;
}

ApResult evaluate_map(const DetectorModel& model, const Dataset& dataset, float conf_threshold,
                      float nms_iou) {
    if (dataset.items.empty()) throw ValidationError("evaluate_map: dataset is empty");
    if (int(dataset.class_names.size()) != model.config().num_classes)
        throw ValidationError("evaluate_map: dataset has " +
                              std::to_string(dataset.class_names.size()) + " classes, model expects " +
                              std::to_string(model.config().num_classes));
    bool any_gt = false;
    for (const auto& item : dataset.items)
        if (!item.sample.annotations.empty()) any_gt = true;
    if (!any_gt) throw ValidationError("evaluate_map: dataset carries no annotations");

    NoGradGuard no_grad;
    std::vector<EvalBox> dets, gts;
    for (const auto& item : dataset.items) {
        const ImageSample& s = item.sample;
        auto grids_v = model.forward_grids(make_constant(s.pixels));
        std::array<Tensor, kScaleCount> grids;
        for (int k = 0; k < kScaleCount; ++k) grids[size_t(k)] = grids_v[size_t(k)].data->value;
        auto decoded = decode_detections(grids, model.config().anchors, model.config().num_classes,
                                         conf_threshold, nms_iou);
        for (const auto& d : decoded)
            dets.push_back({s.id, d.best_class(), d.score(), d.cx, d.cy, d.w, d.h});
        for (const auto& a : s.annotations)
            gts.push_back({s.id, a.class_id, 1.0f, a.cx, a.cy, a.w, a.h});
    }
    ApResult result = average_precision(dets, gts, 0.5);
    result.num_images = int(dataset.items.size());
    return result;
}

std::string render_ap_table(const ApResult& result, const std::vector<std::string>& class_names) {
    std::string out;
    char line[128];
    std::snprintf(line, sizeof line, "%-12s %8s %6s %6s\n", "class", "AP", "nGT", "nDet");
    out += line;
    for (const auto& ca : result.per_class) {
        std::string name = ca.class_id < int(class_names.size()) ? class_names[size_t(ca.class_id)]
                                                                 : std::to_string(ca.class_id);
        std::snprintf(line, sizeof line, "%-12s %8.4f %6d %6d\n", name.c_str(), ca.ap, ca.gt_count,
                      ca.det_count);
        out += line;
    }
    std::snprintf(line, sizeof line, "%-12s %8.4f\n", "mAP", result.map);
    out += line;
    return out;
}

std::string ap_result_to_json(const ApResult& result, const std::vector<std::string>& class_names,
                              float conf_threshold, float nms_iou) {
    json j;
    j["map"] = result.map;
    j["num_images"] = result.num_images;
    j["conf_threshold"] = conf_threshold;
    j["nms_iou"] = nms_iou;
    j["classes"] = json::array();
    for (const auto& ca : result.per_class) {
        json jc;
        jc["class_id"] = ca.class_id;
        jc["name"] = ca.class_id < int(class_names.size()) ? class_names[size_t(ca.class_id)]
                                                           : std::to_string(ca.class_id);
        jc["ap"] = ca.ap;
        jc["gt_count"] = ca.gt_count;
        jc["det_count"] = ca.det_count;
        json pr = json::array();
        for (auto [r, p] : ca.pr_points) pr.push_back({r, p});
        jc["pr_points"] = pr;
        j["classes"].push_back(jc);
    }
    j["fp_only_classes"] = result.fp_only_classes;
    return j.dump(2);
}

void export_features(const DetectorModel& model, const Dataset& dataset,
                     const std::string& out_csv_path) {
    std::ofstream out(out_csv_path);
    if (!out) throw IoError("cannot write feature table: " + out_csv_path);
    auto taps = model.config().tap_channels();
    int cmax = *std::max_element(taps.begin(), taps.end());
    out << "id,domain,scale";
    for (int c = 0; c < cmax; ++c) out << ",v" << c;
    out << "\n";

    NoGradGuard no_grad;
    char num[32];
    for (const auto& item : dataset.items) {
        auto maps = model.backbone_forward(make_constant(item.sample.pixels));
        for (int k = 0; k < kScaleCount; ++k) {
            const Tensor& m = maps[size_t(k)].data->value;
            int c = m.dim(0), hw = m.dim(1) * m.dim(2);
            out << item.sample.id << "," << item.sample.domain << "," << (k + 1);
            for (int ci = 0; ci < c; ++ci) {
                double s = 0.0;
                for (int i = 0; i < hw; ++i) s += m.data[size_t(ci) * size_t(hw) + size_t(i)];
                std::snprintf(num, sizeof num, "%.6g", s / double(hw));
                out << "," << num;
            }
            out << "\n";
        }
    }
    if (!out) throw IoError("write failed: " + out_csv_path);
}

}  // namespace dayolo
