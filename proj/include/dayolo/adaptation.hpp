#pragma once

#include "dayolo/grl.hpp"
#include "dayolo/model.hpp"

namespace dayolo {

// ---------------------------------------------------------------------------
// domain types
// ---------------------------------------------------------------------------

// Per-location domain probability emitted by an image-level classifier.
// probs is [1, H_k, W_k], entries strictly inside (0,1).
struct DomainProbMap {
    int scale_index = 1;
    Var probs;
};

// Fixed convention across every loss: source = 0, target = 1.
constexpr int kDomainSource = 0;
constexpr int kDomainTarget = 1;

// Per-scale loss weights lambda_k for strides (8, 16, 32).
struct ScaleWeights {
    std::array<float, kScaleCount> lambda = {1.0f, 0.5f, 0.1f};

    // regressive weights: decreasing with depth
    static ScaleWeights ria(float l1 = 1.0f, float l2 = 0.5f, float l3 = 0.1f) {
        ScaleWeights w{{l1, l2, l3}};
        w.validate_ria();
        return w;
    }
    // equal weights, summing to 1
    static ScaleWeights eia(float l = 1.0f / 3.0f) { return ScaleWeights{{l, l, l}}; }

    void validate_nonnegative() const {
        for (float l : lambda)
            if (l < 0.0f) throw ValidationError("scale weights must be >= 0");
    }
    void validate_ria() const {
        validate_nonnegative();
        if (!(lambda[0] >= lambda[1] && lambda[1] >= lambda[2]))
            throw ValidationError("RIA weights must decrease with depth (lambda1 >= lambda2 >= lambda3)");
    }
    void validate_eia() const {
        validate_nonnegative();
        if (!(lambda[0] == lambda[1] && lambda[1] == lambda[2]))
            throw ValidationError("EIA weights must be equal across scales");
    }
};

// ---------------------------------------------------------------------------
// classifiers
// ---------------------------------------------------------------------------

// Image-level domain classifier for one scale: GRL, then two 1x1 convs
// (hidden width 64) and a pointwise sigmoid. Preserves spatial dims.
struct ImageDomainClassifier {
    int scale_index = 1;
    int in_channels = 0;
    Conv2dLayer conv1, conv2;

    DomainProbMap forward(const FeatureMap& map, float lambda_grl) const;
};

// Instance-level domain classifier for one scale: GRL, flatten, two fully
// connected layers (hidden 128), sigmoid. Emits the probability that the
// instance comes from the target domain.
struct InstanceDomainClassifier {
    int scale_index = 1;
    int in_features = 0;  // C_k * P * P
    LinearLayer fc1, fc2;

    Var forward(const Var& instance_feature, float lambda_grl) const;
};

// The three image-level + three instance-level classifiers plus pooling
// config. Parameters are named under "adaptation/".
class AdaptationModule {
public:
    AdaptationModule(const ModelConfig& model_cfg, int pool_size, uint64_t init_seed);

    int pool_size() const { return pool_size_; }

    const ImageDomainClassifier& image_classifier(int scale_index) const;
    const InstanceDomainClassifier& instance_classifier(int scale_index) const;

    std::vector<NamedParam> parameters() const;

private:
    int pool_size_;
    std::array<ImageDomainClassifier, kScaleCount> image_cls_;
    std::array<InstanceDomainClassifier, kScaleCount> instance_cls_;
};

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

// ROI max pooling of a normalized center-size box over a [C,H,W] feature
// map: the covered cell region is split into pool x pool bins, each taking
// its max (empty bins the nearest covered cell). Box coordinates are
// constants; gradient reaches only the pooled activations. Throws
// "degenerate ROI" when the box clamps to zero area on the grid.
Var roi_pool(const FeatureMap& map, float cx, float cy, float w, float h, int pool);

// ---------------------------------------------------------------------------
// losses (plain Eq. 2/3/5 sums; the train step normalizes by batch size)
// ---------------------------------------------------------------------------

// L = -sum_{i,k,u,v} lambda_k [D_i log f + (1-D_i) log(1-f)]
Var ria_loss(const std::vector<std::array<DomainProbMap, kScaleCount>>& prob_maps,
             const std::vector<int>& domain_labels, const ScaleWeights& weights);

// L = -sum_{i,j,k} lambda_k [D_i log p + (1-D_i) log(1-p)]
// instance_probs[i][k] holds image i's per-detection probabilities at scale k.
Var msia_loss(const std::vector<std::array<std::vector<Var>, kScaleCount>>& instance_probs,
              const std::vector<int>& domain_labels, const ScaleWeights& weights);

// L = sum_{i,j,k} | mean_{u,v}(prob_map_{i,k}) - p_{i,j}^k |
Var mlcr_loss(const std::vector<std::array<DomainProbMap, kScaleCount>>& prob_maps,
              const std::vector<std::array<std::vector<Var>, kScaleCount>>& instance_probs);

// MSIA instance selection: objectness-thresholded, NMS-filtered detections
// capped at top_k per scale by objectness. Applied identically to source and
// target images.
std::vector<Detection> select_instances(const std::array<Tensor, kScaleCount>& grids,
                                        const Anchors& anchors, int num_classes,
                                        float conf_threshold, float nms_iou, int top_k);

}  // namespace dayolo
