#include "dayolo/plot.hpp"

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dayolo/common.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dayolo {

namespace {

constexpr int kW = 720, kH = 480, kMargin = 56;

const cv::Scalar kSeries[6] = {
    {180, 119, 31},  // BGR: blue-ish
    {14, 127, 255},  // orange
    {44, 160, 44},   // green
    {40, 39, 214},   // red
    {189, 103, 148}, // purple
    {127, 127, 127},
};

struct Series {
    std::string name;
    std::vector<double> x, y;
};

void draw_chart(const std::string& title, const std::vector<Series>& series,
                const std::string& path) {
    cv::Mat img(kH, kW, CV_8UC3, cv::Scalar(255, 255, 255));
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (size_t i = 0; i < s.x.size(); ++i) {
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    if (xmin > xmax) {
        xmin = 0;
        xmax = 1;
        ymin = 0;
        ymax = 1;
    }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    auto px = [&](double x) {
        return kMargin + int((x - xmin) / (xmax - xmin) * (kW - 2 * kMargin));
    };
    auto py = [&](double y) {
        return kH - kMargin - int((y - ymin) / (ymax - ymin) * (kH - 2 * kMargin));
    };

    cv::rectangle(img, {kMargin, kMargin}, {kW - kMargin, kH - kMargin}, {200, 200, 200}, 1);
    cv::putText(img, title, {kMargin, kMargin - 18}, cv::FONT_HERSHEY_SIMPLEX, 0.55, {40, 40, 40},
                1, cv::LINE_AA);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4g", ymin);
    cv::putText(img, buf, {4, kH - kMargin}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {90, 90, 90}, 1);
    std::snprintf(buf, sizeof buf, "%.4g", ymax);
    cv::putText(img, buf, {4, kMargin + 10}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {90, 90, 90}, 1);
    std::snprintf(buf, sizeof buf, "%.4g", xmin);
    cv::putText(img, buf, {kMargin, kH - kMargin + 18}, cv::FONT_HERSHEY_SIMPLEX, 0.4,
                {90, 90, 90}, 1);
    std::snprintf(buf, sizeof buf, "%.4g", xmax);
    cv::putText(img, buf, {kW - kMargin - 40, kH - kMargin + 18}, cv::FONT_HERSHEY_SIMPLEX, 0.4,
                {90, 90, 90}, 1);

    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const cv::Scalar& col = kSeries[si % 6];
        for (size_t i = 1; i < s.x.size(); ++i)
            cv::line(img, {px(s.x[i - 1]), py(s.y[i - 1])}, {px(s.x[i]), py(s.y[i])}, col, 1,
                     cv::LINE_AA);
        cv::putText(img, s.name, {kW - kMargin - 120, kMargin + 16 + 16 * int(si)},
                    cv::FONT_HERSHEY_SIMPLEX, 0.42, col, 1, cv::LINE_AA);
    }
    if (!cv::imwrite(path, img)) throw IoError("cannot write plot: " + path);
}

void draw_scatter(const std::string& title, const std::vector<std::array<double, 2>>& pts,
                  const std::vector<int>& domains, const std::string& path) {
    cv::Mat img(kH, kW, CV_8UC3, cv::Scalar(255, 255, 255));
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& p : pts) {
        xmin = std::min(xmin, p[0]);
        xmax = std::max(xmax, p[0]);
        ymin = std::min(ymin, p[1]);
        ymax = std::max(ymax, p[1]);
    }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    cv::putText(img, title, {kMargin, kMargin - 18}, cv::FONT_HERSHEY_SIMPLEX, 0.55, {40, 40, 40},
                1, cv::LINE_AA);
    cv::putText(img, "source", {kW - kMargin - 110, kMargin + 16}, cv::FONT_HERSHEY_SIMPLEX, 0.42,
                {40, 39, 214}, 1, cv::LINE_AA);
    cv::putText(img, "target", {kW - kMargin - 110, kMargin + 32}, cv::FONT_HERSHEY_SIMPLEX, 0.42,
                {180, 119, 31}, 1, cv::LINE_AA);
    for (size_t i = 0; i < pts.size(); ++i) {
        int x = kMargin + int((pts[i][0] - xmin) / (xmax - xmin) * (kW - 2 * kMargin));
        int y = kH - kMargin - int((pts[i][1] - ymin) / (ymax - ymin) * (kH - 2 * kMargin));
        cv::circle(img, {x, y}, 3, domains[i] == 0 ? cv::Scalar(40, 39, 214) : cv::Scalar(180, 119, 31),
                   cv::FILLED, cv::LINE_AA);
    }
    if (!cv::imwrite(path, img)) throw IoError("cannot write plot: " + path);
}

}  // namespace

std::vector<std::string> plot_metrics(const std::string& metrics_jsonl, const std::string& out_dir) {
    std::ifstream in(metrics_jsonl);
    if (!in) throw IoError("cannot read metrics log: " + metrics_jsonl);
    std::error_code ec;
    fs::create_directories(out_dir, ec);

    Series det{"l_det", {}, {}}, ria{"l_ria", {}, {}}, msia{"l_msia", {}, {}},
        mlcr{"l_mlcr", {}, {}}, total{"l_total", {}, {}};
    Series map_s{"map_source", {}, {}}, map_t{"map_target", {}, {}}, acc{"probe_acc", {}, {}};
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        double step = j.value("step", 0);
        if (j.contains("l_total")) {
            det.x.push_back(step);
            det.y.push_back(j["l_det"].get<double>());
            ria.x.push_back(step);
            ria.y.push_back(j["l_ria"].get<double>());
            msia.x.push_back(step);
            msia.y.push_back(j["l_msia"].get<double>());
            mlcr.x.push_back(step);
            mlcr.y.push_back(j["l_mlcr"].get<double>());
            total.x.push_back(step);
            total.y.push_back(j["l_total"].get<double>());
        } else {
            if (j.contains("map_source_val")) {
                map_s.x.push_back(step);
                map_s.y.push_back(j["map_source_val"].get<double>());
            }
            if (j.contains("map_target_val")) {
                map_t.x.push_back(step);
                map_t.y.push_back(j["map_target_val"].get<double>());
            }
            if (j.contains("probe_domain_acc")) {
                acc.x.push_back(step);
                acc.y.push_back(j["probe_domain_acc"].get<double>());
            }
        }
    }

    std::vector<std::string> written;
    std::string losses_png = (fs::path(out_dir) / "losses.png").string();
    draw_chart("training losses", {det, ria, msia, mlcr, total}, losses_png);
    written.push_back(losses_png);
    if (!map_s.x.empty() || !map_t.x.empty()) {
        std::string map_png = (fs::path(out_dir) / "map.png").string();
        draw_chart("validation mAP@0.5", {map_s, map_t}, map_png);
        written.push_back(map_png);
    }
    if (!acc.x.empty()) {
        std::string acc_png = (fs::path(out_dir) / "probe_acc.png").string();
        draw_chart("domain classifier probe accuracy", {acc}, acc_png);
        written.push_back(acc_png);
    }
    return written;
}

std::vector<std::string> plot_pr_curves(const std::string& ap_json_path,
                                        const std::string& out_dir) {
    std::ifstream in(ap_json_path);
    if (!in) throw IoError("cannot read AP table: " + ap_json_path);
    json j;
    in >> j;
    std::error_code ec;
    fs::create_directories(out_dir, ec);

    std::vector<Series> series;
    for (const auto& jc : j.at("classes")) {
        Series s;
        s.name = jc.at("name").get<std::string>();
        s.x.push_back(0.0);
        s.y.push_back(1.0);
        for (const auto& pt : jc.at("pr_points")) {
            s.x.push_back(pt.at(0).get<double>());
            s.y.push_back(pt.at(1).get<double>());
        }
        series.push_back(std::move(s));
    }
    char title[96];
    std::snprintf(title, sizeof title, "precision-recall (mAP %.4f)", j.value("map", 0.0));
    std::string path = (fs::path(out_dir) / "pr_curves.png").string();
    draw_chart(title, series, path);
    return {path};
}

std::vector<std::string> plot_embedding(const std::string& features_csv, int scale_index,
                                        const std::string& out_dir) {
    std::ifstream in(features_csv);
    if (!in) throw IoError("cannot read feature table: " + features_csv);
    std::error_code ec;
    fs::create_directories(out_dir, ec);

    std::string line;
    std::getline(in, line);  // header
    std::vector<std::vector<double>> rows;
    std::vector<int> domains;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        std::getline(ss, field, ',');  // id
        std::getline(ss, field, ',');
        int domain = std::stoi(field);
        std::getline(ss, field, ',');
        int scale = std::stoi(field);
        if (scale != scale_index) continue;
        std::vector<double> v;
        while (std::getline(ss, field, ',')) v.push_back(std::stod(field));
        rows.push_back(std::move(v));
        domains.push_back(domain);
    }
    if (rows.size() < 2) throw ValidationError("embedding plot needs at least 2 records at scale " +
                                               std::to_string(scale_index));

    size_t dim = rows[0].size();
    Eigen::MatrixXd x(long(rows.size()), long(dim));
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t d = 0; d < dim; ++d) x(long(i), long(d)) = rows[i][d];
    Eigen::RowVectorXd mean = x.colwise().mean();
    x.rowwise() -= mean;
    Eigen::MatrixXd cov = (x.adjoint() * x) / double(rows.size() - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    // top-2 principal directions (eigenvalues ascending)
    Eigen::MatrixXd basis = eig.eigenvectors().rightCols(2);
    Eigen::MatrixXd proj = x * basis;

    std::vector<std::array<double, 2>> pts(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) pts[i] = {proj(long(i), 1), proj(long(i), 0)};
    std::string path =
        (fs::path(out_dir) / ("embedding_scale" + std::to_string(scale_index) + ".png")).string();
    draw_scatter("feature embedding (PCA), scale " + std::to_string(scale_index), pts, domains,
                 path);
    return {path};
}

}  // namespace dayolo
