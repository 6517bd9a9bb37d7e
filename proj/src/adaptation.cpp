#include "dayolo/adaptation.hpp"

#include <algorithm>
#include <cmath>

namespace dayolo {

// ---------------------------------------------------------------------------
// classifiers
// ---------------------------------------------------------------------------

DomainProbMap ImageDomainClassifier::forward(const FeatureMap& map, float lambda_grl) const {
    if (map.scale_index != scale_index)
        throw ShapeError("image domain classifier for scale " + std::to_string(scale_index) +
                         " fed scale " + std::to_string(map.scale_index));
    const Tensor& v = map.data->value;
    int c = v.ndim() == 4 ? v.dim(1) : v.dim(0);
    if (c != in_channels)
        throw ShapeError("image domain classifier expects " + std::to_string(in_channels) +
                         " channels, got " + std::to_string(c));
    Var x = grl_apply(map.data, lambda_grl);
    x = leaky_relu(conv1.forward(x));
    x = sigmoid(conv2.forward(x));
    return DomainProbMap{scale_index, x};
}

Var InstanceDomainClassifier::forward(const Var& instance_feature, float lambda_grl) const {
    const Tensor& v = instance_feature->value;
    if (v.numel() != in_features)
        throw ShapeError("instance domain classifier expects " + std::to_string(in_features) +
                         " features, got " + std::to_string(v.numel()));
    Var x = grl_apply(instance_feature, lambda_grl);
    // flatten: linear() treats the [C,P,P] tensor as one feature vector
    Tensor flat({int(v.numel())}, v.data);
    Var xf = make_op(std::move(flat), {x}, [](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        for (size_t i = 0; i < self.grad.data.size(); ++i) p->grad.data[i] += self.grad.data[i];
    });
    xf = leaky_relu(fc1.forward(xf));
    return sigmoid(fc2.forward(xf));
}

AdaptationModule::AdaptationModule(const ModelConfig& model_cfg, int pool_size, uint64_t init_seed)
    : pool_size_(pool_size) {
    if (pool_size_ <= 0) throw ValidationError("adaptation: pool size must be positive");
    Rng rng(child_seed(init_seed, 13, 0));
    auto taps = model_cfg.tap_channels();
    for (int k = 0; k < kScaleCount; ++k) {
        int c = taps[size_t(k)];
        ImageDomainClassifier& ic = image_cls_[size_t(k)];
        ic.scale_index = k + 1;
        ic.in_channels = c;
        ic.conv1 = make_conv(rng, c, 64, 1, 1, 0);
        ic.conv2 = make_conv(rng, 64, 1, 1, 1, 0);

        InstanceDomainClassifier& nc = instance_cls_[size_t(k)];
        nc.scale_index = k + 1;
        nc.in_features = c * pool_size_ * pool_size_;
        nc.fc1 = make_linear(rng, nc.in_features, 128);
        nc.fc2 = make_linear(rng, 128, 1);
    }
}

const ImageDomainClassifier& AdaptationModule::image_classifier(int scale_index) const {
    if (scale_index < 1 || scale_index > kScaleCount)
        throw ValidationError("scale_index must be 1..3");
    return image_cls_[size_t(scale_index - 1)];
}

const InstanceDomainClassifier& AdaptationModule::instance_classifier(int scale_index) const {
    if (scale_index < 1 || scale_index > kScaleCount)
        throw ValidationError("scale_index must be 1..3");
    return instance_cls_[size_t(scale_index - 1)];
}

std::vector<NamedParam> AdaptationModule::parameters() const {
    std::vector<NamedParam> out;
    for (int k = 0; k < kScaleCount; ++k) {
        std::string ib = "adaptation/img_cls" + std::to_string(k);
        out.push_back({ib + "/conv0/w", image_cls_[size_t(k)].conv1.w});
        out.push_back({ib + "/conv0/b", image_cls_[size_t(k)].conv1.b});
        out.push_back({ib + "/conv1/w", image_cls_[size_t(k)].conv2.w});
        out.push_back({ib + "/conv1/b", image_cls_[size_t(k)].conv2.b});
        std::string nb = "adaptation/inst_cls" + std::to_string(k);
        out.push_back({nb + "/fc0/w", instance_cls_[size_t(k)].fc1.w});
        out.push_back({nb + "/fc0/b", instance_cls_[size_t(k)].fc1.b});
        out.push_back({nb + "/fc1/w", instance_cls_[size_t(k)].fc2.w});
        out.push_back({nb + "/fc1/b", instance_cls_[size_t(k)].fc2.b});
    }
    return out;
}

// ---------------------------------------------------------------------------
// ROI pooling
// ---------------------------------------------------------------------------

Var roi_pool(const FeatureMap& map, float cx, float cy, float w, float h, int pool) {
    const Tensor& v = map.data->value;
    if (v.ndim() != 3) throw ShapeError("roi_pool: feature map must be [C,H,W]");
    if (!(w > 0.0f) || !(h > 0.0f)) throw ValidationError("degenerate ROI");
    int gh = v.dim(1), gw = v.dim(2);
    float x0 = std::clamp(cx - w * 0.5f, 0.0f, 1.0f);
    float x1 = std::clamp(cx + w * 0.5f, 0.0f, 1.0f);
    float y0 = std::clamp(cy - h * 0.5f, 0.0f, 1.0f);
    float y1 = std::clamp(cy + h * 0.5f, 0.0f, 1.0f);
    if (x1 <= x0 || y1 <= y0) throw ValidationError("degenerate ROI");
    int cx0 = int(std::floor(x0 * float(gw)));
    int cx1 = int(std::ceil(x1 * float(gw)));
    int cy0 = int(std::floor(y0 * float(gh)));
    int cy1 = int(std::ceil(y1 * float(gh)));
    return roi_max_pool(map.data, cx0, cx1, cy0, cy1, pool);
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

namespace {

void check_labels(const std::vector<int>& labels, size_t n, const char* who) {
    if (labels.size() != n)
        throw ValidationError(std::string(who) + ": one domain label per image required");
    for (int d : labels)
        if (d != 0 && d != 1) throw ValidationError(std::string(who) + ": domain labels must be 0 or 1");
}

Var zero_scalar() { return make_constant(Tensor::scalar(0.0f)); }

}  // namespace

Var ria_loss(const std::vector<std::array<DomainProbMap, kScaleCount>>& prob_maps,
             const std::vector<int>& domain_labels, const ScaleWeights& weights) {
    check_labels(domain_labels, prob_maps.size(), "ria_loss");
    weights.validate_nonnegative();
    std::vector<Var> terms;
    for (size_t i = 0; i < prob_maps.size(); ++i)
        for (int k = 0; k < kScaleCount; ++k)
            terms.push_back(bce_sum(prob_maps[i][size_t(k)].probs, domain_labels[i],
                                    weights.lambda[size_t(k)]));
    if (terms.empty()) return zero_scalar();
    Var total = terms[0];
    for (size_t t = 1; t < terms.size(); ++t) total = add(total, terms[t]);
    return total;
}

Var msia_loss(const std::vector<std::array<std::vector<Var>, kScaleCount>>& instance_probs,
              const std::vector<int>& domain_labels, const ScaleWeights& weights) {
    check_labels(domain_labels, instance_probs.size(), "msia_loss");
    weights.validate_nonnegative();
    std::vector<Var> terms;
    for (size_t i = 0; i < instance_probs.size(); ++i)
        for (int k = 0; k < kScaleCount; ++k)
            for (const Var& p : instance_probs[i][size_t(k)])
                terms.push_back(bce_sum(p, domain_labels[i], weights.lambda[size_t(k)]));
    if (terms.empty()) return zero_scalar();
    Var total = terms[0];
    for (size_t t = 1; t < terms.size(); ++t) total = add(total, terms[t]);
    return total;
}

Var mlcr_loss(const std::vector<std::array<DomainProbMap, kScaleCount>>& prob_maps,
              const std::vector<std::array<std::vector<Var>, kScaleCount>>& instance_probs) {
    if (prob_maps.size() != instance_probs.size())
        throw ValidationError("mlcr_loss: prob_maps and instance_probs must cover the same images");
    std::vector<Var> terms;
    for (size_t i = 0; i < prob_maps.size(); ++i) {
        for (int k = 0; k < kScaleCount; ++k) {
            if (instance_probs[i][size_t(k)].empty()) continue;
            Var map_mean = mean_all(prob_maps[i][size_t(k)].probs);
            for (const Var& p : instance_probs[i][size_t(k)])
                terms.push_back(abs_diff(map_mean, p));
        }
    }
    if (terms.empty()) return zero_scalar();
    Var total = terms[0];
    for (size_t t = 1; t < terms.size(); ++t) total = add(total, terms[t]);
    return total;
}

std::vector<Detection> select_instances(const std::array<Tensor, kScaleCount>& grids,
                                        const Anchors& anchors, int num_classes,
                                        float conf_threshold, float nms_iou, int top_k) {
    auto dets = decode_detections(grids, anchors, num_classes, conf_threshold, nms_iou);
    // cap per scale by objectness
    std::vector<Detection> out;
    for (int k = 1; k <= kScaleCount; ++k) {
        std::vector<Detection> at_scale;
        for (const auto& d : dets)
            if (d.scale_index == k) at_scale.push_back(d);
        std::stable_sort(at_scale.begin(), at_scale.end(),
                         [](const Detection& a, const Detection& b) { return a.objectness > b.objectness; });
        if (int(at_scale.size()) > top_k) at_scale.resize(size_t(top_k));
        for (auto& d : at_scale) out.push_back(std::move(d));
    }
    return out;
}

}  // namespace dayolo
