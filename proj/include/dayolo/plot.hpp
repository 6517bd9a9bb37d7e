#pragma once

#include <string>
#include <vector>

namespace dayolo {

// Plot emitters consume only files written by the other subcommands.
// Each returns the list of files it wrote.

// loss curves (and mAP / probe-accuracy traces when eval lines exist)
std::vector<std::string> plot_metrics(const std::string& metrics_jsonl,
                                      const std::string& out_dir);

// per-class precision-recall curves from an AP table JSON
std::vector<std::string> plot_pr_curves(const std::string& ap_json_path,
                                        const std::string& out_dir);

// 2-D PCA scatter of exported features at one scale, colored by domain
std::vector<std::string> plot_embedding(const std::string& features_csv, int scale_index,
                                        const std::string& out_dir);

}  // namespace dayolo
