#include "dayolo/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>
#include <map>

using nlohmann::json;

namespace dayolo {

namespace {

constexpr char kMagic[8] = {'D', 'A', 'Y', 'O', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

uint32_t read_u32(std::istream& in) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
}

json anchors_to_json(const Anchors& a) {
    json j = json::array();
    for (int k = 0; k < kScaleCount; ++k) {
        json scale = json::array();
        for (auto [w, h] : a.per_scale[size_t(k)]) scale.push_back({w, h});
        j.push_back(scale);
    }
    return j;
}

Anchors anchors_from_json(const json& j) {
    Anchors a;
    for (int k = 0; k < kScaleCount; ++k) {
        for (const auto& wh : j.at(size_t(k)))
            a.per_scale[size_t(k)].push_back({wh.at(0).get<float>(), wh.at(1).get<float>()});
    }
    a.validate();
    return a;
}

void write_entry(std::ostream& out, const std::string& name, const Tensor& t) {
    write_u32(out, uint32_t(name.size()));
    out.write(name.data(), std::streamsize(name.size()));
    write_u32(out, uint32_t(t.shape.size()));
    for (int d : t.shape) write_u32(out, uint32_t(d));
    out.write(reinterpret_cast<const char*>(t.data.data()), std::streamsize(t.data.size() * 4));
}

}  // namespace

void save_checkpoint(const std::string& path, const DetectorModel& model,
                     const AdaptationModule* adaptation, int step, const std::string& config_hash) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);

    const ModelConfig& cfg = model.config();
    json header;
    header["step"] = step;
    header["config_hash"] = config_hash;
    header["num_classes"] = cfg.num_classes;
    header["widths"] = cfg.widths;
    header["anchors"] = anchors_to_json(cfg.anchors);
    header["pool_size"] = adaptation ? adaptation->pool_size() : 0;
    header["sections"] = adaptation ? json::array({"detector", "adaptation"})
                                    : json::array({"detector"});
    std::string hs = header.dump();

    out.write(kMagic, 8);
    write_u32(out, kVersion);
    write_u32(out, uint32_t(hs.size()));
    out.write(hs.data(), std::streamsize(hs.size()));

    auto det_params = model.parameters();
    std::vector<NamedParam> all = det_params;
    if (adaptation) {
        auto ap = adaptation->parameters();
        all.insert(all.end(), ap.begin(), ap.end());
    }
    write_u32(out, uint32_t(all.size()));
    for (const auto& np : all) write_entry(out, np.name, np.param->value);
    if (!out) throw IoError("write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint: " + path);

    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw ValidationError("not a dayolo checkpoint: " + path);
    uint32_t version = read_u32(in);
    if (version != kVersion)
        throw ValidationError("unsupported checkpoint version " + std::to_string(version));

    uint32_t hlen = read_u32(in);
    std::string hs(hlen, '\0');
    in.read(hs.data(), hlen);
    json header = json::parse(hs);

    LoadedCheckpoint ck;
    ck.step = header.at("step").get<int>();
    ck.config_hash = header.value("config_hash", std::string());
    ck.model_config.num_classes = header.at("num_classes").get<int>();
    ck.model_config.widths = header.at("widths").get<std::vector<int>>();
    ck.model_config.anchors = anchors_from_json(header.at("anchors"));
    ck.pool_size = header.value("pool_size", 0);

    std::map<std::string, Tensor> arrays;
    uint32_t count = read_u32(in);
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t nlen = read_u32(in);
        std::string name(nlen, '\0');
        in.read(name.data(), nlen);
        uint32_t ndim = read_u32(in);
        std::vector<int> shape(ndim);
        for (uint32_t d = 0; d < ndim; ++d) shape[d] = int(read_u32(in));
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(t.data.size() * 4));
        if (!in) throw IoError("truncated checkpoint: " + path);
        arrays.emplace(std::move(name), std::move(t));
    }

    auto restore = [&arrays, &path](const std::vector<NamedParam>& params) {
        for (const auto& np : params) {
            auto it = arrays.find(np.name);
            if (it == arrays.end())
                throw ValidationError("checkpoint " + path + " missing array " + np.name);
            if (it->second.shape != np.param->value.shape)
                throw ValidationError("checkpoint array " + np.name + " has shape " +
                                      shape_str(it->second.shape) + ", model expects " +
                                      shape_str(np.param->value.shape));
            np.param->value = it->second;
        }
    };

    ck.model = std::make_unique<DetectorModel>(ck.model_config, 0);
    restore(ck.model->parameters());
    if (ck.pool_size > 0) {
        ck.adaptation = std::make_unique<AdaptationModule>(ck.model_config, ck.pool_size, 0);
        restore(ck.adaptation->parameters());
    }
    return ck;
}

}  // namespace dayolo
