#pragma once

#include <memory>
#include <string>

#include "dayolo/adaptation.hpp"
#include "dayolo/model.hpp"

namespace dayolo {

// Single-file weight archive: a JSON header (config hash, step count, anchor
// table, model config) followed by named float arrays. Detector weights live
// under backbone/ and heads/; adaptation-head weights in their own
// adaptation/ section so deployment can drop them.
void save_checkpoint(const std::string& path, const DetectorModel& model,
                     const AdaptationModule* adaptation, int step, const std::string& config_hash);

struct LoadedCheckpoint {
    ModelConfig model_config;
    int pool_size = 3;
    int step = 0;
    std::string config_hash;
    std::unique_ptr<DetectorModel> model;
    std::unique_ptr<AdaptationModule> adaptation;  // null when the section is absent
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace dayolo
