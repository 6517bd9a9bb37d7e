#pragma once

#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "dayolo/adaptation.hpp"
#include "dayolo/data.hpp"
#include "dayolo/grl.hpp"
#include "dayolo/model.hpp"

namespace dayolo {

enum class ImageAlign { kOff, kEia, kRia };

struct TrainConfig {
    // data / outputs
    std::string data_root;
    std::string out_dir = "out";

    // model
    int num_classes = 3;
    std::vector<int> widths = {16, 32, 64, 128, 256};

    // detection loss
    float lambda_coord = 5.0f;
    float lambda_noobj = 0.5f;

    // adaptation (Eq. 6 lambda and module toggles)
    float lambda_da = 0.5f;
    ImageAlign image_align = ImageAlign::kRia;
    bool msia = true;
    bool mlcr = true;
    std::array<float, kScaleCount> ria_weights = {1.0f, 0.5f, 0.1f};
    float eia_weight = 1.0f / 3.0f;
    GrlConfig grl;

    // MSIA instance selection
    float msia_conf = 0.5f;
    float nms_iou = 0.45f;
    int top_k = 8;
    int roi_pool_size = 3;
    bool msia_source_uses_gt = false;  // pool source GT boxes instead of detections

    // optimizer (split learning rates per the training protocol)
    float lr_backbone = 0.001f;
    float lr_rest = 0.01f;
    float weight_decay = 0.0005f;
    float momentum = 0.9f;
    int grad_accum = 1;

    int steps = 1000;
    uint64_t seed = 7;
    int eval_interval = 200;
    float eval_conf = 0.25f;
    float eval_nms = 0.45f;
    int probe_batch = 16;
    int probe_interval = 0;  // 0 = only alongside evals

    void validate() const;
    ScaleWeights scale_weights() const;
    std::string config_hash() const;

    static TrainConfig from_json_file(const std::string& path);
    static TrainConfig from_json_text(const std::string& text);
    std::string to_json_text() const;
};

// All loss components of one training step. l_total satisfies
// l_total = l_det + lambda_da * (l_ria + l_msia + l_mlcr).
struct LossBundle {
    double l_det = 0.0;
    double l_ria = 0.0;
    double l_msia = 0.0;
    double l_mlcr = 0.0;
    double l_total = 0.0;
    int step = 0;
};

// Eq. 6 composition. Throws DivergenceError naming the first non-finite
// component.
double compose_total_loss(double l_det, double l_ria, double l_msia, double l_mlcr,
                          double lambda_da);

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

// SGD with momentum and decoupled L2 weight decay added to the gradient.
// Parameters whose gradient was never allocated this step are skipped.
class Sgd {
public:
    struct Group {
        std::vector<Var> params;
        float lr = 0.01f;
    };

    Sgd(std::vector<Group> groups, float momentum, float weight_decay);

    void zero_grad();
    void step();

private:
    std::vector<Group> groups_;
    std::vector<std::vector<Tensor>> velocity_;
    float momentum_;
    float weight_decay_;
};

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

// One optimizer step on a (source, target) pair. Detection loss uses the
// source only; adaptation losses use both images and are normalized by the
// pair size before entering Eq. 6. The returned bundle reflects the state
// before the parameter update. Throws ValidationError if the target sample
// carries annotations.
LossBundle train_step(DetectorModel& model, AdaptationModule& adaptation, Sgd& optimizer,
                      const ImageSample& source, const ImageSample& target,
                      const TrainConfig& cfg, int step);

struct FitResult {
    std::string checkpoint_path;
    std::string metrics_path;
    int steps_run = 0;
    std::optional<double> final_source_map;
    std::optional<double> final_target_map;
};

// The full training protocol: paired source/target batches cycling the
// shorter dataset, per-step loss logging, periodic val mAP, divergence
// guard, final checkpoint with the adaptation heads in their own section.
FitResult fit(const TrainConfig& cfg, const Dataset& source_train, const Dataset& target_train,
              const Dataset* source_val = nullptr, const Dataset* target_val = nullptr);

// Accuracy of the stride-8 image-level domain classifier on a probe batch:
// an image is called "target" when its mean map probability exceeds 0.5.
double domain_probe_accuracy(const DetectorModel& model, const AdaptationModule& adaptation,
                             const std::vector<const ImageSample*>& probe);

// Mean |image-level map mean - instance probability| over a batch, using the
// MSIA instance selection (falling back to the top detection per scale when
// nothing clears the threshold, so untrained models stay measurable). Images
// with no instances contribute nothing; nullopt when none yields any.
std::optional<double> consensus_gap(const DetectorModel& model, const AdaptationModule& adaptation,
                                    const std::vector<const ImageSample*>& batch,
                                    const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// metrics log
// ---------------------------------------------------------------------------

struct LogValidation {
    int lines_checked = 0;
    int violations = 0;
    double max_residual = 0.0;
    bool ok() const { return lines_checked > 0 && violations == 0; }
};

// Re-checks the Eq. 6 identity on every loss line of a metrics log.
LogValidation validate_metrics_log(const std::string& path, double tolerance = 1e-6);

}  // namespace dayolo
