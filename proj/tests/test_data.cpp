#include <doctest.h>

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "dayolo/data.hpp"

using namespace dayolo;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("dayolo_test_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

SceneSpec small_scene() {
    SceneSpec s;
    s.image_size = 64;
    return s;
}

CorruptionSpec fog_spec() {
    CorruptionSpec c;
    c.fog_strength = 0.6f;
    c.blur_radius = 1.0f;
    c.color_gain = {0.9f, 1.0f, 1.1f};
    c.noise_sigma = 0.02f;
    return c;
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        std::ifstream in(e.path(), std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        out[fs::relative(e.path(), root).string()] = std::move(bytes);
    }
    return out;
}

}  // namespace

TEST_CASE("generator determinism: same seed, same specs, identical trees") {
    TempDir d1("gen1"), d2("gen2");
    GenCounts counts{4, 4, 2, 2};
    generate_synthetic_domain_pair(small_scene(), fog_spec(), counts, 99, d1.str());
    generate_synthetic_domain_pair(small_scene(), fog_spec(), counts, 99, d2.str());
    auto t1 = tree_bytes(d1.path), t2 = tree_bytes(d2.path);
    REQUIRE(t1.size() == t2.size());
    for (const auto& [rel, bytes] : t1) {
        REQUIRE(t2.count(rel));
        CHECK(bytes == t2[rel]);
    }

    SUBCASE("different seed changes the images") {
        TempDir d3("gen3");
        generate_synthetic_domain_pair(small_scene(), fog_spec(), counts, 100, d3.str());
        auto t3 = tree_bytes(d3.path);
        bool any_diff = false;
        for (const auto& [rel, bytes] : t1)
            if (t3.count(rel) && t3[rel] != bytes) any_diff = true;
        CHECK(any_diff);
    }
}

TEST_CASE("generator counts and split structure") {
    TempDir dir("counts");
    GenCounts counts{8, 8, 4, 4};
    auto manifest = generate_synthetic_domain_pair(small_scene(), fog_spec(), counts, 5, dir.str());

    std::map<std::pair<int, std::string>, int> per_split;
    for (const auto& e : manifest.entries) per_split[{e.domain, e.split}]++;
    CHECK(per_split[{0, "train"}] == 8);
    CHECK(per_split[{1, "train"}] == 8);
    CHECK(per_split[{0, "val"}] == 4);
    CHECK(per_split[{1, "val"}] == 4);

    for (const auto& e : manifest.entries) {
        CHECK(fs::exists(fs::path(dir.str()) / e.image_path));
        bool should_have_label = !(e.domain == 1 && e.split == "train");
        CHECK(e.label_path.has_value() == should_have_label);
        if (e.label_path) CHECK(fs::exists(fs::path(dir.str()) / *e.label_path));
    }
}

TEST_CASE("identity corruption makes target val byte-identical to paired source val") {
    TempDir dir("ident");
    CorruptionSpec none;  // all-zero
    REQUIRE(none.is_identity());
    generate_synthetic_domain_pair(small_scene(), none, {2, 2, 3, 3}, 11, dir.str());
    for (int i = 0; i < 3; ++i) {
        char a[64], b[64];
        std::snprintf(a, sizeof a, "source/val/images/src_val_%05d.png", i);
        std::snprintf(b, sizeof b, "target/val/images/tgt_val_%05d.png", i);
        std::ifstream fa(fs::path(dir.str()) / a, std::ios::binary);
        std::ifstream fb(fs::path(dir.str()) / b, std::ios::binary);
        std::string ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
        std::string bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
        REQUIRE(!ba.empty());
        CHECK(ba == bb);
    }
}

TEST_CASE("load_dataset") {
    TempDir dir("load");
    auto manifest =
        generate_synthetic_domain_pair(small_scene(), fog_spec(), {3, 3, 2, 2}, 21, dir.str());
    std::string mpath = (fs::path(dir.str()) / "manifest.json").string();

    SUBCASE("samples arrive in manifest order with the right shapes") {
        Dataset all = load_dataset(mpath);
        CHECK(all.size() == 10);
        CHECK(all.class_names == std::vector<std::string>{"disc", "square", "triangle"});
        for (const auto& item : all.items) {
            CHECK(item.sample.pixels.shape == std::vector<int>{3, 64, 64});
            for (float v : item.sample.pixels.data) {
                CHECK(v >= 0.0f);
                CHECK(v <= 1.0f);
            }
        }
    }
    SUBCASE("target-train samples carry no annotations") {
        Dataset tt = load_dataset(mpath, "train", 1);
        CHECK(tt.size() == 3);
        for (const auto& item : tt.items) CHECK(item.sample.annotations.empty());
    }
    SUBCASE("source-train samples carry annotations in [0,1]") {
        Dataset st = load_dataset(mpath, "train", 0);
        CHECK(st.size() == 3);
        int boxes = 0;
        for (const auto& item : st.items)
            for (const auto& b : item.sample.annotations) {
                ++boxes;
                CHECK(b.cx - b.w / 2 >= -1e-6f);
                CHECK(b.cx + b.w / 2 <= 1.0f + 1e-6f);
            }
        CHECK(boxes > 0);
    }
    SUBCASE("missing image file raises an IoError naming the path") {
        fs::remove(fs::path(dir.str()) / "source/train/images/src_train_00001.png");
        CHECK_THROWS_WITH_AS(load_dataset(mpath, "train", 0),
                             doctest::Contains("src_train_00001.png"), IoError);
    }
    SUBCASE("class_id == M raises a validation error with the record index") {
        std::string label = (fs::path(dir.str()) / "source/train/labels/src_train_00000.json").string();
        nlohmann::json j;
        j["boxes"] = {{{"class", 3}, {"cx", 0.5}, {"cy", 0.5}, {"w", 0.2}, {"h", 0.2}}};
        std::ofstream(label) << j.dump();
        CHECK_THROWS_WITH_AS(load_dataset(mpath, "train", 0), doctest::Contains("class_id 3"),
                             ValidationError);
    }
    SUBCASE("non-positive box size rejected") {
        std::string label = (fs::path(dir.str()) / "source/train/labels/src_train_00000.json").string();
        nlohmann::json j;
        j["boxes"] = {{{"class", 0}, {"cx", 0.5}, {"cy", 0.5}, {"w", 0.0}, {"h", 0.2}}};
        std::ofstream(label) << j.dump();
        CHECK_THROWS_AS(load_dataset(mpath, "train", 0), ValidationError);
    }
}

TEST_CASE("save_dataset round-trips") {
    TempDir dir("save_src"), out("save_dst");
    generate_synthetic_domain_pair(small_scene(), fog_spec(), {3, 3, 2, 2}, 33, dir.str());
    Dataset ds = load_dataset((fs::path(dir.str()) / "manifest.json").string());

    std::string manifest2 = save_dataset(ds, out.str());
    Dataset ds2 = load_dataset(manifest2);
    REQUIRE(ds2.size() == ds.size());
    for (size_t i = 0; i < ds.size(); ++i) {
        const auto& a = ds.items[i].sample;
        const auto& b = ds2.items[i].sample;
        CHECK(a.domain == b.domain);
        REQUIRE(a.annotations.size() == b.annotations.size());
        for (size_t k = 0; k < a.annotations.size(); ++k) {
            CHECK(std::fabs(a.annotations[k].cx - b.annotations[k].cx) < 1e-9);
            CHECK(std::fabs(a.annotations[k].cy - b.annotations[k].cy) < 1e-9);
            CHECK(std::fabs(a.annotations[k].w - b.annotations[k].w) < 1e-9);
            CHECK(std::fabs(a.annotations[k].h - b.annotations[k].h) < 1e-9);
            CHECK(a.annotations[k].class_id == b.annotations[k].class_id);
        }
        CHECK(a.pixels.data == b.pixels.data);  // 8-bit quantized both ways
    }

    SUBCASE("two saves differ only in the timestamp") {
        TempDir out2("save_dst2");
        save_dataset(ds, out2.str());
        auto strip = [](std::string text) {
            auto pos = text.find("created_at");
            if (pos != std::string::npos) {
                auto end = text.find('\n', pos);
                text.erase(pos, end - pos);
            }
            return text;
        };
        std::ifstream m1(fs::path(out.str()) / "manifest.json");
        std::ifstream m2(fs::path(out2.str()) / "manifest.json");
        std::string s1((std::istreambuf_iterator<char>(m1)), std::istreambuf_iterator<char>());
        std::string s2((std::istreambuf_iterator<char>(m2)), std::istreambuf_iterator<char>());
        CHECK(strip(s1) == strip(s2));
    }
}

TEST_CASE("empty dataset saves to a valid zero-entry manifest") {
    TempDir dir("empty");
    Dataset empty;
    empty.class_names = {"disc"};
    empty.image_size = 64;
    std::string mpath = save_dataset(empty, dir.str());
    Dataset back = load_dataset(mpath);
    CHECK(back.size() == 0);
    CHECK(back.class_names == std::vector<std::string>{"disc"});
}

TEST_CASE("fog strictly lowers luminance contrast") {
    TempDir dir("fog");
    generate_synthetic_domain_pair(small_scene(), CorruptionSpec{}, {1, 1, 2, 2}, 55, dir.str());
    Dataset ds = load_dataset((fs::path(dir.str()) / "manifest.json").string(), "val", 0);
    REQUIRE(ds.size() == 2);
    for (const auto& item : ds.items) {
        double prev = -1.0;
        bool first = true;
        for (float beta : {0.0f, 0.25f, 0.5f, 0.75f, 1.0f}) {
            CorruptionSpec c;
            c.fog_strength = beta;
            Tensor corrupted = apply_corruption(item.sample.pixels, c, 1);
            double sd = luminance_stddev(corrupted);
            if (!first) CHECK(sd < prev);
            prev = sd;
            first = false;
        }
    }
}

TEST_CASE("annotations cover their objects (color-mask overlap >= 90%)") {
    TempDir dir("mask");
    SceneSpec scene = small_scene();
    scene.image_size = 96;
    generate_synthetic_domain_pair(scene, CorruptionSpec{}, {6, 1, 1, 1}, 77, dir.str());
    Dataset ds = load_dataset((fs::path(dir.str()) / "manifest.json").string(), "train", 0);

    auto class_mask = [](const Tensor& px, int cls, int y, int x) {
        float r = px.at3(0, y, x), g = px.at3(1, y, x), b = px.at3(2, y, x);
        switch (cls) {
            case 0: return r > 0.65f && r - std::max(g, b) > 0.25f;
            case 1: return g > 0.6f && g - std::max(r, b) > 0.25f;
            default: return b > 0.6f && b - std::max(r, g) > 0.25f;
        }
    };

    for (const auto& item : ds.items) {
        const Tensor& px = item.sample.pixels;
        int n = px.dim(1);
        for (int cls = 0; cls < 2; ++cls) {  // discs and squares
            bool has_class = false;
            for (const auto& a : item.sample.annotations)
                if (a.class_id == cls) has_class = true;
            if (!has_class) continue;
            int total = 0, inside = 0;
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x) {
                    if (!class_mask(px, cls, y, x)) continue;
                    ++total;
                    float fx = (float(x) + 0.5f) / float(n);
                    float fy = (float(y) + 0.5f) / float(n);
                    for (const auto& a : item.sample.annotations) {
                        if (a.class_id != cls) continue;
                        if (std::fabs(fx - a.cx) <= a.w / 2 && std::fabs(fy - a.cy) <= a.h / 2) {
                            ++inside;
                            break;
                        }
                    }
                }
            if (total == 0) continue;
            CHECK(double(inside) / double(total) >= 0.9);
        }
    }
}

TEST_CASE("spec validation") {
    SceneSpec bad = small_scene();
    bad.image_size = 100;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    SceneSpec bad2 = small_scene();
    bad2.num_classes = 4;
    CHECK_THROWS_AS(bad2.validate(), ValidationError);
    CorruptionSpec bc;
    bc.noise_sigma = -0.1f;
    CHECK_THROWS_AS(bc.validate(), ValidationError);
    GenCounts zero{0, 1, 1, 1};
    TempDir dir("val");
    CHECK_THROWS_AS(
        generate_synthetic_domain_pair(small_scene(), CorruptionSpec{}, zero, 1, dir.str()),
        ValidationError);
}
