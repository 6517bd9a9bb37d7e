#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "dayolo/model.hpp"
#include "oracles.hpp"

using namespace dayolo;

namespace {

Tensor random_image(int h, int w, Rng& rng) {
    Tensor t({3, h, w});
    for (float& v : t.data) v = float(rng.uniform());
    return t;
}

// anchors shared by the decode fixtures: one anchor per scale
Anchors single_anchor(float w, float h) {
    Anchors a;
    for (int k = 0; k < kScaleCount; ++k) a.per_scale[size_t(k)] = {{w, h}};
    return a;
}

std::array<Tensor, kScaleCount> empty_grids(int num_classes, int a_count,
                                            std::array<std::pair<int, int>, kScaleCount> hw,
                                            float obj_logit = -10.0f) {
    std::array<Tensor, kScaleCount> grids;
    int per = 5 + num_classes;
    for (int k = 0; k < kScaleCount; ++k) {
        grids[size_t(k)] = Tensor({a_count * per, hw[size_t(k)].first, hw[size_t(k)].second});
        for (int a = 0; a < a_count; ++a)
            for (int v = 0; v < hw[size_t(k)].first; ++v)
                for (int u = 0; u < hw[size_t(k)].second; ++u)
                    grids[size_t(k)].at3(a * per + 4, v, u) = obj_logit;
    }
    return grids;
}

std::vector<BoxAnnotation> random_annotations(Rng& rng, int count, int num_classes) {
    std::vector<BoxAnnotation> anns;
    for (int i = 0; i < count; ++i) {
        BoxAnnotation a;
        a.class_id = rng.uniform_int(0, num_classes - 1);
        a.w = float(rng.uniform(0.08, 0.5));
        a.h = float(rng.uniform(0.08, 0.5));
        a.cx = float(rng.uniform(a.w / 2, 1.0 - a.w / 2));
        a.cy = float(rng.uniform(a.h / 2, 1.0 - a.h / 2));
        anns.push_back(a);
    }
    return anns;
}

}  // namespace

TEST_CASE("backbone tap shapes follow the stride arithmetic") {
    ModelConfig cfg;
    DetectorModel model(cfg, 1);
    NoGradGuard eval_only;

    SUBCASE("416x416 batched") {
        Tensor x({2, 3, 416, 416});
        auto maps = model.backbone_forward(make_constant(x));
        CHECK(maps[0].data->value.shape == std::vector<int>{2, 64, 52, 52});
        CHECK(maps[1].data->value.shape == std::vector<int>{2, 128, 26, 26});
        CHECK(maps[2].data->value.shape == std::vector<int>{2, 256, 13, 13});
        CHECK(maps[0].stride == 8);
        CHECK(maps[2].stride == 32);
    }
    SUBCASE("128x128") {
        Rng rng(1);
        auto maps = model.backbone_forward(make_constant(random_image(128, 128, rng)));
        CHECK(maps[0].data->value.shape == std::vector<int>{64, 16, 16});
        CHECK(maps[1].data->value.shape == std::vector<int>{128, 8, 8});
        CHECK(maps[2].data->value.shape == std::vector<int>{256, 4, 4});
    }
    SUBCASE("non multiple of 32 rejected, naming the dimension") {
        Tensor x({1, 3, 100, 100});
        CHECK_THROWS_WITH_AS(model.backbone_forward(make_constant(x)),
                             doctest::Contains("height 100"), ShapeError);
        Tensor y({1, 3, 128, 100});
        CHECK_THROWS_WITH_AS(model.backbone_forward(make_constant(y)),
                             doctest::Contains("width 100"), ShapeError);
    }
}

TEST_CASE("head output grid shapes and channel checks") {
    ModelConfig cfg;
    cfg.num_classes = 2;  // A=3, M=2 -> 21 channels
    DetectorModel model(cfg, 1);
    NoGradGuard eval_only;

    FeatureMap small{1, 8, make_constant(Tensor({64, 16, 16}))};
    CHECK(model.head_forward(small).data->value.shape == std::vector<int>{21, 16, 16});
    FeatureMap medium{2, 16, make_constant(Tensor({128, 8, 8}))};
    CHECK(model.head_forward(medium).data->value.shape == std::vector<int>{21, 8, 8});

    FeatureMap wrong{2, 16, make_constant(Tensor({64, 16, 16}))};
    CHECK_THROWS_AS(model.head_forward(wrong), ShapeError);
}

TEST_CASE("forward passes are deterministic in evaluation mode") {
    ModelConfig cfg;
    DetectorModel model(cfg, 3);
    Rng rng(5);
    Tensor img = random_image(64, 64, rng);
    NoGradGuard eval_only;
    auto a = model.forward_grids(make_constant(img));
    auto b = model.forward_grids(make_constant(img));
    for (int k = 0; k < kScaleCount; ++k)
        CHECK(std::memcmp(a[size_t(k)].data->value.data.data(), b[size_t(k)].data->value.data.data(),
                          a[size_t(k)].data->value.data.size() * 4) == 0);
}

TEST_CASE("decode_detections") {
    int m = 2;
    Anchors anchors = single_anchor(0.25f, 0.25f);

    SUBCASE("all objectness below threshold decodes to nothing") {
        auto grids = empty_grids(m, 1, {{{16, 16}, {8, 8}, {4, 4}}});
        CHECK(decode_detections(grids, anchors, m, 0.5f, 0.45f).empty());
    }
    SUBCASE("single live cell decodes to the hand-computed box") {
        auto grids = empty_grids(m, 1, {{{16, 16}, {8, 8}, {4, 4}}});
        Tensor& g = grids[2];  // 4x4 scale
        g.at3(4, 0, 0) = 10.0f;
        g.at3(5, 0, 0) = 3.0f;
        auto dets = decode_detections(grids, anchors, m, 0.5f, 0.45f);
        REQUIRE(dets.size() == 1);
        CHECK(dets[0].scale_index == 3);
        CHECK(dets[0].cx == doctest::Approx(0.125).epsilon(1e-6));
        CHECK(dets[0].cy == doctest::Approx(0.125).epsilon(1e-6));
        CHECK(dets[0].w == doctest::Approx(0.25).epsilon(1e-6));
        CHECK(dets[0].h == doctest::Approx(0.25).epsilon(1e-6));
        CHECK(dets[0].objectness > 0.99f);
        CHECK(dets[0].best_class() == 0);
    }
    SUBCASE("thresholds outside (0,1) rejected") {
        auto grids = empty_grids(m, 1, {{{16, 16}, {8, 8}, {4, 4}}});
        CHECK_THROWS_AS(decode_detections(grids, anchors, m, 0.0f, 0.45f), ValidationError);
        CHECK_THROWS_AS(decode_detections(grids, anchors, m, 0.5f, 1.0f), ValidationError);
    }
}

TEST_CASE("nms keeps the higher-scoring of two overlapping same-class boxes") {
    // IoU of the pair, by an independent corner-rectangle oracle; dyadic
    // coordinates keep the value exactly 0.6 in float
    oracle::Box a{"i", 0, 0.9, 0.25, 0.25, 0.25, 0.25};
    oracle::Box b{"i", 0, 0.8, 0.25, 0.3125, 0.25, 0.25};
    REQUIRE(oracle::rect_iou(a, b) == doctest::Approx(0.6).epsilon(1e-12));

    Detection d1;
    d1.cx = 0.25f;
    d1.cy = 0.25f;
    d1.w = d1.h = 0.25f;
    d1.objectness = 0.9f;
    d1.class_scores = {1.0f};
    Detection d2 = d1;
    d2.cy = 0.3125f;
    d2.objectness = 0.8f;

    auto kept = nms_filter({d1, d2}, 0.5f);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].objectness == doctest::Approx(0.9f));

    SUBCASE("different classes are never suppressed against each other") {
        Detection e1 = d1, e2 = d2;
        e1.class_scores = {1.0f, 0.0f};
        e2.class_scores = {0.0f, 1.0f};
        CHECK(nms_filter({e1, e2}, 0.5f).size() == 2);
    }
    SUBCASE("IoU exactly at the threshold is kept") {
        auto kept2 = nms_filter({d1, d2}, 0.6f);
        CHECK(kept2.size() == 2);
    }
}

TEST_CASE("decoded boxes stay in bounds and kept pairs respect the NMS bound") {
    Rng rng(17);
    ModelConfig cfg;
    for (int trial = 0; trial < 10; ++trial) {
        auto grids = empty_grids(cfg.num_classes, 3, {{{8, 8}, {4, 4}, {2, 2}}});
        for (int k = 0; k < kScaleCount; ++k)
            for (float& v : grids[size_t(k)].data) v = float(rng.normal() * 3.0);
        float nms_iou = 0.45f;
        auto dets = decode_detections(grids, cfg.anchors, cfg.num_classes, 0.3f, nms_iou);
        for (const auto& d : dets) {
            CHECK(d.cx - d.w / 2 >= -1e-6f);
            CHECK(d.cy - d.h / 2 >= -1e-6f);
            CHECK(d.cx + d.w / 2 <= 1.0f + 1e-6f);
            CHECK(d.cy + d.h / 2 <= 1.0f + 1e-6f);
            CHECK(d.objectness >= 0.3f);
        }
        for (size_t i = 0; i < dets.size(); ++i)
            for (size_t j = i + 1; j < dets.size(); ++j) {
                if (dets[i].best_class() != dets[j].best_class()) continue;
                CHECK(box_iou(dets[i].cx, dets[i].cy, dets[i].w, dets[i].h, dets[j].cx, dets[j].cy,
                              dets[j].w, dets[j].h) <= double(nms_iou) + 1e-6);
            }
    }
}

TEST_CASE("encode then decode round-trips the boxes") {
    Rng rng(23);
    ModelConfig cfg;
    std::array<std::pair<int, int>, kScaleCount> hw = {{{16, 16}, {8, 8}, {4, 4}}};
    for (int trial = 0; trial < 20; ++trial) {
        auto anns = random_annotations(rng, rng.uniform_int(1, 3), cfg.num_classes);
        auto grids = encode_detection_grids(anns, cfg.anchors, cfg.num_classes, hw, 12.0f);
        auto slots = assign_responsibility(anns, cfg.anchors, hw);
        auto dets = decode_detections(grids, cfg.anchors, cfg.num_classes, 0.5f, 0.99f);
        for (size_t i = 0; i < anns.size(); ++i) {
            if (!slots[i]) continue;
            double best = 1e9;
            const Detection* match = nullptr;
            for (const auto& d : dets) {
                double dist = std::fabs(d.cx - anns[i].cx) + std::fabs(d.cy - anns[i].cy);
                if (dist < best) {
                    best = dist;
                    match = &d;
                }
            }
            REQUIRE(match != nullptr);
            CHECK(std::fabs(match->cx - anns[i].cx) < 1e-5);
            CHECK(std::fabs(match->cy - anns[i].cy) < 1e-5);
            CHECK(std::fabs(match->w - anns[i].w) < 1e-5);
            CHECK(std::fabs(match->h - anns[i].h) < 1e-5);
            CHECK(match->best_class() == anns[i].class_id);
        }
    }
}

TEST_CASE("detection_loss examples") {
    ModelConfig cfg;
    std::array<std::pair<int, int>, kScaleCount> hw = {{{16, 16}, {8, 8}, {4, 4}}};
    auto wrap = [](std::array<Tensor, kScaleCount> grids) {
        std::array<DetectionGrid, kScaleCount> out;
        for (int k = 0; k < kScaleCount; ++k)
            out[size_t(k)] = DetectionGrid{k + 1, make_leaf(std::move(grids[size_t(k)]), true)};
        return out;
    };

    SUBCASE("exact targets and hard negatives give (numerically) zero") {
        std::vector<BoxAnnotation> anns = {{0, 0.42f, 0.37f, 0.22f, 0.28f}, {2, 0.7f, 0.7f, 0.3f, 0.2f}};
        auto grids = wrap(encode_detection_grids(anns, cfg.anchors, cfg.num_classes, hw, 25.0f));
        Var loss = detection_loss(grids, anns, cfg.anchors, cfg.num_classes, 5.0f, 0.5f);
        CHECK(loss->value.data[0] < 1e-9f);
    }
    SUBCASE("x offset of 0.1 with lambda_coord 5 costs 0.05") {
        std::vector<BoxAnnotation> anns = {{1, 0.41f, 0.52f, 0.2f, 0.2f}};
        auto raw = encode_detection_grids(anns, cfg.anchors, cfg.num_classes, hw, 25.0f);
        auto slots = assign_responsibility(anns, cfg.anchors, hw);
        REQUIRE(slots[0]);
        const auto& s = *slots[0];
        int per = 5 + cfg.num_classes;
        auto [gh, gw] = hw[size_t(s.scale)];
        (void)gh;
        float fx = anns[0].cx * float(gw) - float(s.u);
        REQUIRE(fx + 0.1f < 1.0f);
        float shifted = fx + 0.1f;
        raw[size_t(s.scale)].at3(s.anchor * per + 0, s.v, s.u) =
            std::log(shifted / (1.0f - shifted));
        Var loss = detection_loss(wrap(std::move(raw)), anns, cfg.anchors, cfg.num_classes, 5.0f, 0.5f);
        CHECK(loss->value.data[0] == doctest::Approx(0.05).epsilon(1e-4));
    }
    SUBCASE("no annotations and silent grids cost zero") {
        auto grids = empty_grids(cfg.num_classes, 3, hw, -25.0f);
        Var loss = detection_loss(wrap(std::move(grids)), {}, cfg.anchors, cfg.num_classes, 5.0f, 0.5f);
        CHECK(loss->value.data[0] < 1e-9f);
    }
    SUBCASE("class_id out of range rejected") {
        std::vector<BoxAnnotation> anns = {{3, 0.5f, 0.5f, 0.2f, 0.2f}};
        auto grids = wrap(empty_grids(cfg.num_classes, 3, hw));
        CHECK_THROWS_AS(detection_loss(grids, anns, cfg.anchors, cfg.num_classes, 5.0f, 0.5f),
                        ValidationError);
    }
}

TEST_CASE("detection_loss properties") {
    Rng rng(31);
    ModelConfig cfg;
    std::array<std::pair<int, int>, kScaleCount> hw = {{{4, 4}, {2, 2}, {1, 1}}};

    auto random_grids = [&] {
        std::array<Tensor, kScaleCount> grids;
        int per = 5 + cfg.num_classes;
        for (int k = 0; k < kScaleCount; ++k) {
            grids[size_t(k)] = Tensor({3 * per, hw[size_t(k)].first, hw[size_t(k)].second});
            for (float& v : grids[size_t(k)].data) v = float(rng.normal());
        }
        return grids;
    };
    auto wrap = [](const std::array<Tensor, kScaleCount>& grids) {
        std::array<DetectionGrid, kScaleCount> out;
        for (int k = 0; k < kScaleCount; ++k)
            out[size_t(k)] = DetectionGrid{k + 1, make_constant(grids[size_t(k)])};
        return out;
    };

    SUBCASE("permutation invariance and nonnegativity") {
        for (int trial = 0; trial < 20; ++trial) {
            auto grids = random_grids();
            auto anns = random_annotations(rng, 5, cfg.num_classes);
            Var l1 = detection_loss(wrap(grids), anns, cfg.anchors, cfg.num_classes, 5.0f, 0.5f);
            std::reverse(anns.begin(), anns.end());
            std::swap(anns[0], anns[2]);
            Var l2 = detection_loss(wrap(grids), anns, cfg.anchors, cfg.num_classes, 5.0f, 0.5f);
            CHECK(l1->value.data[0] == l2->value.data[0]);
            CHECK(l1->value.data[0] >= 0.0f);
        }
    }
    SUBCASE("matches the scalar-loop oracle") {
        for (int trial = 0; trial < 50; ++trial) {
            auto grids = random_grids();
            auto anns = random_annotations(rng, rng.uniform_int(0, 5), cfg.num_classes);
            Var l = detection_loss(wrap(grids), anns, cfg.anchors, cfg.num_classes, 5.0f, 0.5f);
            double want =
                oracle::detection_loss(grids, anns, cfg.anchors, cfg.num_classes, 5.0, 0.5);
            CHECK(std::fabs(double(l->value.data[0]) - want) <= 1e-5 * std::max(1.0, want));
        }
    }
}

TEST_CASE("anchor validation") {
    CHECK_NOTHROW(Anchors::defaults().validate());
    Anchors bad = Anchors::defaults();
    bad.per_scale[2] = {{0.01f, 0.01f}, {0.02f, 0.02f}, {0.01f, 0.02f}};
    CHECK_THROWS_AS(bad.validate(), ValidationError);  // deep scale smaller than shallow
    Anchors neg = Anchors::defaults();
    neg.per_scale[0][0] = {-0.1f, 0.1f};
    CHECK_THROWS_AS(neg.validate(), ValidationError);
}
