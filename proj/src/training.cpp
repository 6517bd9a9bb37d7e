#include "dayolo/training.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include "dayolo/checkpoint.hpp"
#include "dayolo/evaluation.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dayolo {

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (num_classes < 1) throw ValidationError("config: num_classes must be >= 1");
    if (lambda_da < 0.0f) throw ValidationError("config: lambda_da must be >= 0");
    if (steps < 0) throw ValidationError("config: steps must be >= 0");
    if (grad_accum < 1) throw ValidationError("config: grad_accum must be >= 1");
    if (eval_interval < 1) throw ValidationError("config: eval_interval must be >= 1");
    if (roi_pool_size < 1) throw ValidationError("config: roi_pool_size must be >= 1");
    if (top_k < 0) throw ValidationError("config: top_k must be >= 0");
    grl.validate();
    scale_weights();  // mode-specific validation
}

ScaleWeights TrainConfig::scale_weights() const {
    if (image_align == ImageAlign::kEia) {
        ScaleWeights w{{eia_weight, eia_weight, eia_weight}};
        w.validate_eia();
        return w;
    }
    ScaleWeights w{ria_weights};
    if (image_align == ImageAlign::kRia) w.validate_ria();
    return w;
}

namespace {

const char* align_name(ImageAlign a) {
    switch (a) {
        case ImageAlign::kOff: return "off";
        case ImageAlign::kEia: return "eia";
        default: return "ria";
    }
}

ImageAlign align_from(const std::string& s) {
    if (s == "off") return ImageAlign::kOff;
    if (s == "eia") return ImageAlign::kEia;
    if (s == "ria") return ImageAlign::kRia;
    throw ValidationError("config: image_align must be off|eia|ria, got '" + s + "'");
}

}  // namespace

std::string TrainConfig::to_json_text() const {
    json j;
    j["data_root"] = data_root;
    j["out_dir"] = out_dir;
    j["num_classes"] = num_classes;
    j["widths"] = widths;
    j["lambda_coord"] = lambda_coord;
    j["lambda_noobj"] = lambda_noobj;
    j["lambda_da"] = lambda_da;
    j["image_align"] = align_name(image_align);
    j["msia"] = msia;
    j["mlcr"] = mlcr;
    j["ria_weights"] = ria_weights;
    j["eia_weight"] = eia_weight;
    j["grl"] = {{"lambda", grl.lambda_grl},
                {"schedule", grl.schedule == GrlConfig::Schedule::kRamp ? "ramp" : "constant"},
                {"ramp_gamma", grl.ramp_gamma},
                {"ramp_total_steps", grl.ramp_total_steps}};
    j["msia_conf"] = msia_conf;
    j["nms_iou"] = nms_iou;
    j["top_k"] = top_k;
    j["roi_pool_size"] = roi_pool_size;
    j["msia_source_uses_gt"] = msia_source_uses_gt;
    j["lr_backbone"] = lr_backbone;
    j["lr_rest"] = lr_rest;
    j["weight_decay"] = weight_decay;
    j["momentum"] = momentum;
    j["grad_accum"] = grad_accum;
    j["steps"] = steps;
    j["seed"] = seed;
    j["eval_interval"] = eval_interval;
    j["eval_conf"] = eval_conf;
    j["eval_nms"] = eval_nms;
    j["probe_batch"] = probe_batch;
    j["probe_interval"] = probe_interval;
    return j.dump(2);
}

TrainConfig TrainConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("config: malformed JSON: ") + e.what());
    }
    TrainConfig c;
    c.data_root = j.value("data_root", c.data_root);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.widths = j.value("widths", c.widths);
    c.lambda_coord = j.value("lambda_coord", c.lambda_coord);
    c.lambda_noobj = j.value("lambda_noobj", c.lambda_noobj);
    c.lambda_da = j.value("lambda_da", c.lambda_da);
    if (j.contains("image_align")) c.image_align = align_from(j["image_align"].get<std::string>());
    c.msia = j.value("msia", c.msia);
    c.mlcr = j.value("mlcr", c.mlcr);
    c.ria_weights = j.value("ria_weights", c.ria_weights);
    c.eia_weight = j.value("eia_weight", c.eia_weight);
    if (j.contains("grl")) {
        const auto& g = j["grl"];
        c.grl.lambda_grl = g.value("lambda", c.grl.lambda_grl);
        std::string sched = g.value("schedule", std::string("constant"));
        if (sched == "ramp")
            c.grl.schedule = GrlConfig::Schedule::kRamp;
        else if (sched == "constant")
            c.grl.schedule = GrlConfig::Schedule::kConstant;
        else
            throw ValidationError("config: grl.schedule must be constant|ramp");
        c.grl.ramp_gamma = g.value("ramp_gamma", c.grl.ramp_gamma);
        c.grl.ramp_total_steps = g.value("ramp_total_steps", c.grl.ramp_total_steps);
    }
    c.msia_conf = j.value("msia_conf", c.msia_conf);
    c.nms_iou = j.value("nms_iou", c.nms_iou);
    c.top_k = j.value("top_k", c.top_k);
    c.roi_pool_size = j.value("roi_pool_size", c.roi_pool_size);
    c.msia_source_uses_gt = j.value("msia_source_uses_gt", c.msia_source_uses_gt);
    c.lr_backbone = j.value("lr_backbone", c.lr_backbone);
    c.lr_rest = j.value("lr_rest", c.lr_rest);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.momentum = j.value("momentum", c.momentum);
    c.grad_accum = j.value("grad_accum", c.grad_accum);
    c.steps = j.value("steps", c.steps);
    c.seed = j.value("seed", c.seed);
    c.eval_interval = j.value("eval_interval", c.eval_interval);
    c.eval_conf = j.value("eval_conf", c.eval_conf);
    c.eval_nms = j.value("eval_nms", c.eval_nms);
    c.probe_batch = j.value("probe_batch", c.probe_batch);
    c.probe_interval = j.value("probe_interval", c.probe_interval);
    c.validate();
    return c;
}

TrainConfig TrainConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

std::string TrainConfig::config_hash() const {
    // hash the training recipe, not the filesystem locations
    TrainConfig canonical = *this;
    canonical.data_root.clear();
    canonical.out_dir.clear();
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  (unsigned long long)fnv1a64(canonical.to_json_text()));
    return buf;
}

// ---------------------------------------------------------------------------
// Eq. 6
// ---------------------------------------------------------------------------

double compose_total_loss(double l_det, double l_ria, double l_msia, double l_mlcr,
                          double lambda_da) {
    const struct {
        const char* name;
        double v;
    } parts[] = {{"l_det", l_det}, {"l_ria", l_ria}, {"l_msia", l_msia}, {"l_mlcr", l_mlcr}};
    for (const auto& p : parts)
        if (!std::isfinite(p.v))
            throw DivergenceError(std::string("total loss aborted: component ") + p.name +
                                  " is not finite (" + std::to_string(p.v) + ")");
    return l_det + lambda_da * (l_ria + l_msia + l_mlcr);
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

Sgd::Sgd(std::vector<Group> groups, float momentum, float weight_decay)
    : groups_(std::move(groups)), momentum_(momentum), weight_decay_(weight_decay) {
    velocity_.resize(groups_.size());
    for (size_t g = 0; g < groups_.size(); ++g) {
        velocity_[g].reserve(groups_[g].params.size());
        for (const auto& p : groups_[g].params) velocity_[g].push_back(Tensor::zeros(p->value.shape));
    }
}

void Sgd::zero_grad() {
    for (auto& g : groups_)
        for (auto& p : g.params)
            if (p->has_grad()) p->grad.fill(0.0f);
}

void Sgd::step() {
    for (size_t g = 0; g < groups_.size(); ++g) {
        float lr = groups_[g].lr;
        for (size_t i = 0; i < groups_[g].params.size(); ++i) {
            Node& p = *groups_[g].params[i];
            if (!p.has_grad()) continue;  // untouched this step
            Tensor& v = velocity_[g][i];
            for (size_t j = 0; j < p.value.data.size(); ++j) {
                float grad = p.grad.data[j] + weight_decay_ * p.value.data[j];
                v.data[j] = momentum_ * v.data[j] + grad;
                p.value.data[j] -= lr * v.data[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// train step
// ---------------------------------------------------------------------------

namespace {

struct AdaptationForward {
    std::array<DomainProbMap, kScaleCount> prob_maps;
    std::array<std::vector<Var>, kScaleCount> instance_probs;
    bool has_maps = false;
};

// forward one image through the adaptation heads as configured
AdaptationForward adaptation_forward(const DetectorModel& model, const AdaptationModule& adaptation,
                                     const std::array<FeatureMap, kScaleCount>& taps,
                                     const std::array<DetectionGrid, kScaleCount>& grids,
                                     const ImageSample& sample, const TrainConfig& cfg,
                                     float grl_lambda) {
    AdaptationForward out;
    bool need_maps = cfg.image_align != ImageAlign::kOff || cfg.mlcr;
    bool need_instances = cfg.msia || cfg.mlcr;

    if (need_maps) {
        for (int k = 0; k < kScaleCount; ++k)
            out.prob_maps[size_t(k)] =
                adaptation.image_classifier(k + 1).forward(taps[size_t(k)], grl_lambda);
        out.has_maps = true;
    }

    if (need_instances) {
        std::vector<Detection> instances;
        if (sample.domain == kDomainSource && cfg.msia_source_uses_gt) {
            // GT alternative: pool each annotation at its responsible scale
            std::array<std::pair<int, int>, kScaleCount> grid_hw;
            for (int k = 0; k < kScaleCount; ++k) {
                const Tensor& g = grids[size_t(k)].data->value;
                grid_hw[size_t(k)] = {g.dim(1), g.dim(2)};
            }
            auto slots =
                assign_responsibility(sample.annotations, model.config().anchors, grid_hw);
            for (size_t i = 0; i < sample.annotations.size(); ++i) {
                if (!slots[i]) continue;
                const auto& a = sample.annotations[i];
                Detection d;
                d.scale_index = slots[i]->scale + 1;
                d.cx = a.cx;
                d.cy = a.cy;
                d.w = a.w;
                d.h = a.h;
                instances.push_back(d);
            }
        } else {
            std::array<Tensor, kScaleCount> grid_vals;
            for (int k = 0; k < kScaleCount; ++k) grid_vals[size_t(k)] = grids[size_t(k)].data->value;
            instances = select_instances(grid_vals, model.config().anchors,
                                         model.config().num_classes, cfg.msia_conf, cfg.nms_iou,
                                         cfg.top_k);
        }
        for (const auto& d : instances) {
            int k = d.scale_index - 1;
            Var feat = roi_pool(taps[size_t(k)], d.cx, d.cy, d.w, d.h, adaptation.pool_size());
            Var p = adaptation.instance_classifier(d.scale_index).forward(feat, grl_lambda);
            out.instance_probs[size_t(k)].push_back(std::move(p));
        }
    }
    return out;
}

}  // namespace

LossBundle train_step(DetectorModel& model, AdaptationModule& adaptation, Sgd& optimizer,
                      const ImageSample& source, const ImageSample& target,
                      const TrainConfig& cfg, int step) {
    if (source.domain != kDomainSource || target.domain != kDomainTarget)
        throw ValidationError("train_step: pair must be (source, target) in that order");
    if (!target.annotations.empty())
        throw ValidationError("train_step: target image '" + target.id +
                              "' carries annotations; the target domain is unsupervised");

    const bool adapt = cfg.image_align != ImageAlign::kOff || cfg.msia || cfg.mlcr;
    const float grl_lambda = cfg.grl.lambda_at(step);

    // source forward + detection loss
    Var src_input = make_constant(source.pixels);
    auto src_taps = model.backbone_forward(src_input);
    std::array<DetectionGrid, kScaleCount> src_grids;
    for (int k = 0; k < kScaleCount; ++k) src_grids[size_t(k)] = model.head_forward(src_taps[size_t(k)]);
    Var l_det = detection_loss(src_grids, source.annotations, model.config().anchors,
                               model.config().num_classes, cfg.lambda_coord, cfg.lambda_noobj);

    Var l_ria, l_msia, l_mlcr;
    if (adapt) {
        Var tgt_input = make_constant(target.pixels);
        auto tgt_taps = model.backbone_forward(tgt_input);
        std::array<DetectionGrid, kScaleCount> tgt_grids;
        for (int k = 0; k < kScaleCount; ++k)
            tgt_grids[size_t(k)] = model.head_forward(tgt_taps[size_t(k)]);

        auto src_fwd =
            adaptation_forward(model, adaptation, src_taps, src_grids, source, cfg, grl_lambda);
        auto tgt_fwd =
            adaptation_forward(model, adaptation, tgt_taps, tgt_grids, target, cfg, grl_lambda);

        std::vector<int> labels = {kDomainSource, kDomainTarget};
        std::vector<std::array<DomainProbMap, kScaleCount>> maps;
        std::vector<std::array<std::vector<Var>, kScaleCount>> probs;
        if (src_fwd.has_maps) {
            maps = {src_fwd.prob_maps, tgt_fwd.prob_maps};
        }
        probs = {src_fwd.instance_probs, tgt_fwd.instance_probs};

        // Eq. 2/3/5 are plain sums; normalize by the pair size here. The
        // image-level term is additionally weighted per location (lambda_k
        // over H_k*W_k): the raw per-scale sums grow with map area and blow
        // past the split learning rates at any useful image size.
        const float inv_batch = 0.5f;
        ScaleWeights weights = cfg.scale_weights();
        if (cfg.image_align != ImageAlign::kOff) {
            std::vector<Var> per_image;
            for (size_t i = 0; i < maps.size(); ++i) {
                ScaleWeights per_loc = weights;
                for (int k = 0; k < kScaleCount; ++k) {
                    const Tensor& pm = maps[i][size_t(k)].probs->value;
                    per_loc.lambda[size_t(k)] /= float(pm.dim(1) * pm.dim(2));
                }
                per_image.push_back(ria_loss({maps[i]}, {labels[i]}, per_loc));
            }
            Var ria_sum = per_image[0];
            for (size_t i = 1; i < per_image.size(); ++i) ria_sum = add(ria_sum, per_image[i]);
            l_ria = scale(ria_sum, inv_batch);
        }
        if (cfg.msia) l_msia = scale(msia_loss(probs, labels, weights), inv_batch);
        if (cfg.mlcr) l_mlcr = scale(mlcr_loss(maps, probs), inv_batch);
    }

    auto value_of = [](const Var& v) { return v ? double(v->value.data[0]) : 0.0; };
    LossBundle bundle;
    bundle.step = step;
    bundle.l_det = value_of(l_det);
    bundle.l_ria = value_of(l_ria);
    bundle.l_msia = value_of(l_msia);
    bundle.l_mlcr = value_of(l_mlcr);
    bundle.l_total =
        compose_total_loss(bundle.l_det, bundle.l_ria, bundle.l_msia, bundle.l_mlcr, cfg.lambda_da);

    // assemble the Eq. 6 graph and step
    Var total = l_det;
    if (adapt) {
        std::vector<Var> da_terms;
        if (l_ria) da_terms.push_back(l_ria);
        if (l_msia) da_terms.push_back(l_msia);
        if (l_mlcr) da_terms.push_back(l_mlcr);
        if (!da_terms.empty()) {
            Var da_sum = da_terms[0];
            for (size_t i = 1; i < da_terms.size(); ++i) da_sum = add(da_sum, da_terms[i]);
            total = add(total, scale(da_sum, cfg.lambda_da));
        }
    }
    if (cfg.grad_accum > 1) total = scale(total, 1.0f / float(cfg.grad_accum));

    backward(total);
    if ((step + 1) % cfg.grad_accum == 0) {
        optimizer.step();
        optimizer.zero_grad();
    }
    return bundle;
}

// ---------------------------------------------------------------------------
// probes
// ---------------------------------------------------------------------------

double domain_probe_accuracy(const DetectorModel& model, const AdaptationModule& adaptation,
                             const std::vector<const ImageSample*>& probe) {
    if (probe.empty()) throw ValidationError("probe batch is empty");
    NoGradGuard no_grad;
    int correct = 0;
    for (const ImageSample* s : probe) {
        auto taps = model.backbone_forward(make_constant(s->pixels));
        auto pm = adaptation.image_classifier(1).forward(taps[0], 1.0f);
        double mean = pm.probs->value.sum_double() / double(pm.probs->value.numel());
        int pred = mean > 0.5 ? kDomainTarget : kDomainSource;
        if (pred == s->domain) ++correct;
    }
    return double(correct) / double(probe.size());
}

std::optional<double> consensus_gap(const DetectorModel& model, const AdaptationModule& adaptation,
                                    const std::vector<const ImageSample*>& batch,
                                    const TrainConfig& cfg) {
    NoGradGuard no_grad;
    double sum = 0.0;
    int count = 0;
    for (const ImageSample* s : batch) {
        auto taps = model.backbone_forward(make_constant(s->pixels));
        std::array<Tensor, kScaleCount> grid_vals;
        for (int k = 0; k < kScaleCount; ++k)
            grid_vals[size_t(k)] = model.head_forward(taps[size_t(k)]).data->value;
        auto instances = select_instances(grid_vals, model.config().anchors,
                                          model.config().num_classes, cfg.msia_conf, cfg.nms_iou,
                                          cfg.top_k);
        // keep the gap measurable on untrained models, whose objectness
        // starts below the MSIA threshold: fall back to the top detection
        // per scale
        if (instances.empty())
            instances = select_instances(grid_vals, model.config().anchors,
                                         model.config().num_classes, 0.01f, cfg.nms_iou, 1);
        if (instances.empty()) continue;
        std::array<double, kScaleCount> map_mean{};
        std::array<bool, kScaleCount> have{};
        for (const auto& d : instances) {
            int k = d.scale_index - 1;
            if (!have[size_t(k)]) {
                auto pm = adaptation.image_classifier(d.scale_index).forward(taps[size_t(k)], 1.0f);
                map_mean[size_t(k)] =
                    pm.probs->value.sum_double() / double(pm.probs->value.numel());
                have[size_t(k)] = true;
            }
            Var feat = roi_pool(taps[size_t(k)], d.cx, d.cy, d.w, d.h, adaptation.pool_size());
            Var p = adaptation.instance_classifier(d.scale_index).forward(feat, 1.0f);
            sum += std::fabs(map_mean[size_t(k)] - double(p->value.data[0]));
            ++count;
        }
    }
    if (count == 0) return std::nullopt;
    return sum / double(count);
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

namespace {

std::vector<size_t> shuffled_indices(size_t n, Rng& rng) {
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t(0));
    for (size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[size_t(rng.next_u64() % i)]);
    return idx;
}

void dump_recent(const std::deque<LossBundle>& recent) {
    std::cerr << "divergence guard: last " << recent.size() << " loss bundles:\n";
    for (const auto& b : recent)
        std::cerr << "  step " << b.step << " det=" << b.l_det << " ria=" << b.l_ria
                  << " msia=" << b.l_msia << " mlcr=" << b.l_mlcr << " total=" << b.l_total << "\n";
}

}  // namespace

FitResult fit(const TrainConfig& cfg, const Dataset& source_train, const Dataset& target_train,
              const Dataset* source_val, const Dataset* target_val) {
    cfg.validate();
    if (source_train.items.empty() || target_train.items.empty())
        throw ValidationError("fit: training datasets must be non-empty");
    bool any_annotated = false;
    for (const auto& it : source_train.items)
        if (!it.sample.annotations.empty()) any_annotated = true;
    if (!any_annotated) throw ValidationError("fit: source training set carries no annotations");

    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw IoError("cannot create out_dir " + cfg.out_dir + ": " + ec.message());

    ModelConfig mc;
    mc.num_classes = cfg.num_classes;
    mc.widths = cfg.widths;
    DetectorModel model(mc, cfg.seed);
    AdaptationModule adaptation(mc, cfg.roi_pool_size, cfg.seed);

    Sgd::Group backbone_group{{}, cfg.lr_backbone};
    for (const auto& np : model.backbone_parameters()) backbone_group.params.push_back(np.param);
    Sgd::Group rest_group{{}, cfg.lr_rest};
    for (const auto& np : model.parameters())
        if (np.name.rfind("backbone/", 0) != 0) rest_group.params.push_back(np.param);
    for (const auto& np : adaptation.parameters()) rest_group.params.push_back(np.param);
    Sgd optimizer({backbone_group, rest_group}, cfg.momentum, cfg.weight_decay);

    std::string metrics_path = (fs::path(cfg.out_dir) / "metrics.jsonl").string();
    std::ofstream log(metrics_path);
    if (!log) throw IoError("cannot write metrics log: " + metrics_path);

    // fixed probe batch from the val splits, for the domain-accuracy trace
    std::vector<const ImageSample*> probe;
    if (source_val && target_val) {
        int per = std::max(1, cfg.probe_batch / 2);
        for (int i = 0; i < per && i < int(source_val->items.size()); ++i)
            probe.push_back(&source_val->items[size_t(i)].sample);
        for (int i = 0; i < per && i < int(target_val->items.size()); ++i)
            probe.push_back(&target_val->items[size_t(i)].sample);
    }

    const bool adapt = cfg.image_align != ImageAlign::kOff || cfg.msia || cfg.mlcr;

    Rng order_rng(child_seed(cfg.seed, 21, 0));
    std::vector<size_t> src_order, tgt_order;
    size_t src_pos = 0, tgt_pos = 0;
    std::deque<LossBundle> recent;
    FitResult result;
    result.metrics_path = metrics_path;

    auto write_eval = [&](int step) {
        json j;
        j["step"] = step;
        j["kind"] = "eval";
        if (source_val && !source_val->items.empty()) {
            double m = evaluate_map(model, *source_val, cfg.eval_conf, cfg.eval_nms).map;
            j["map_source_val"] = m;
            result.final_source_map = m;
        }
        if (target_val && !target_val->items.empty()) {
            double m = evaluate_map(model, *target_val, cfg.eval_conf, cfg.eval_nms).map;
            j["map_target_val"] = m;
            result.final_target_map = m;
        }
        if (!probe.empty() && adapt)
            j["probe_domain_acc"] = domain_probe_accuracy(model, adaptation, probe);
        log << j.dump() << "\n";
        log.flush();
    };

    for (int step = 0; step < cfg.steps; ++step) {
        if (src_pos >= src_order.size()) {
            src_order = shuffled_indices(source_train.items.size(), order_rng);
            src_pos = 0;
        }
        if (tgt_pos >= tgt_order.size()) {
            tgt_order = shuffled_indices(target_train.items.size(), order_rng);
            tgt_pos = 0;
        }
        const ImageSample& src = source_train.items[src_order[src_pos++]].sample;
        const ImageSample& tgt = target_train.items[tgt_order[tgt_pos++]].sample;

        LossBundle bundle;
        try {
            bundle = train_step(model, adaptation, optimizer, src, tgt, cfg, step);
        } catch (const DivergenceError&) {
            dump_recent(recent);
            throw;
        }
        recent.push_back(bundle);
        if (recent.size() > 10) recent.pop_front();

        if (!std::isfinite(bundle.l_total) || bundle.l_total > 1e6) {
            dump_recent(recent);
            throw DivergenceError("fit: l_total = " + std::to_string(bundle.l_total) + " at step " +
                                  std::to_string(step));
        }

        json j;
        j["step"] = step;
        j["l_det"] = bundle.l_det;
        j["l_ria"] = bundle.l_ria;
        j["l_msia"] = bundle.l_msia;
        j["l_mlcr"] = bundle.l_mlcr;
        j["l_total"] = bundle.l_total;
        j["lambda_da"] = cfg.lambda_da;
        j["lr_backbone"] = cfg.lr_backbone;
        j["lr_rest"] = cfg.lr_rest;
        log << j.dump() << "\n";

        if ((step + 1) % cfg.eval_interval == 0) write_eval(step + 1);
        if (cfg.probe_interval > 0 && (step + 1) % cfg.probe_interval == 0 && !probe.empty() &&
            adapt) {
            json pj;
            pj["step"] = step + 1;
            pj["kind"] = "probe";
            pj["probe_domain_acc"] = domain_probe_accuracy(model, adaptation, probe);
            log << pj.dump() << "\n";
        }
        result.steps_run = step + 1;
    }
    if (cfg.steps > 0 && cfg.steps % cfg.eval_interval != 0) write_eval(cfg.steps);

    result.checkpoint_path = (fs::path(cfg.out_dir) / "ckpt.bin").string();
    save_checkpoint(result.checkpoint_path, model, &adaptation, cfg.steps, cfg.config_hash());
    return result;
}

// ---------------------------------------------------------------------------
// log validation
// ---------------------------------------------------------------------------

LogValidation validate_metrics_log(const std::string& path, double tolerance) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read metrics log: " + path);
    LogValidation v;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ValidationError("metrics log line " + std::to_string(lineno) + ": " + e.what());
        }
        if (!j.contains("l_total")) continue;  // eval lines
        double expected = j.at("l_det").get<double>() +
                          j.at("lambda_da").get<double>() *
                              (j.at("l_ria").get<double>() + j.at("l_msia").get<double>() +
                               j.at("l_mlcr").get<double>());
        double residual = std::fabs(expected - j.at("l_total").get<double>());
        v.max_residual = std::max(v.max_residual, residual);
        if (residual > tolerance) ++v.violations;
        ++v.lines_checked;
    }
    return v;
}

}  // namespace dayolo
