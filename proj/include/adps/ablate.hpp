#pragma once

// Ablation presets: the k sweep, the fusion-mode and mask-metric
// comparisons, and the framework variants (full / no-teacher / no-student /
// no-psm-wmb). Each grid entry is an independent train+evaluate run on the
// toy dataset; results land in a CSV and a bar chart of AP_seg.

#include <atomic>
#include <chrono>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include <opencv2/imgproc.hpp>

#include "adps/config.hpp"
#include "adps/data.hpp"
#include "adps/image_io.hpp"
#include "adps/metrics.hpp"
#include "adps/trainer.hpp"

namespace adps::ablate {

struct GridEntry {
  std::string name;
  config::TrainConfig cfg;
};

struct GridResult {
  std::string name;
  config::TrainConfig cfg;
  metrics::MetricsReport report;
  real train_seconds = 0.0;
};

inline std::vector<GridEntry> build_grid(const std::string& grid,
                                         const config::TrainConfig& base) {
  std::vector<GridEntry> entries;
  auto add_k = [&] {
    for (int k : {1, 2, 4, 8, 16}) {
      config::TrainConfig c = base;
      c.k = k;
      // k=16 needs at least k * deepest_stride pixels per side.
      const int min_res = k * c.stage_strides.back();
      if (c.resolution < min_res) c.resolution = min_res;
      entries.push_back({"k" + std::to_string(k), c});
    }
  };
  auto add_fusion = [&] {
    for (const char* mode : {"wmb", "difference", "concat-conv"}) {
      config::TrainConfig c = base;
      c.fusion_mode = mode;
      entries.push_back({std::string("fusion-") + mode, c});
    }
  };
  auto add_metric = [&] {
    for (const char* metric : {"cosine", "mse"}) {
      config::TrainConfig c = base;
      c.mask_metric = metric;
      entries.push_back({std::string("metric-") + metric, c});
    }
  };
  auto add_framework = [&] {
    for (const char* variant : {"full", "no-teacher", "no-student", "no-psm-wmb"}) {
      config::TrainConfig c = base;
      c.variant = config::variant_from_string(variant);
      entries.push_back({std::string(variant), c});
    }
  };

  if (grid == "k") add_k();
  else if (grid == "fusion") add_fusion();
  else if (grid == "metric") add_metric();
  else if (grid == "framework") add_framework();
  else if (grid == "all") {
    add_k();
    add_fusion();
    add_metric();
    add_framework();
  } else {
    throw ConfigError("unknown ablation grid '" + grid +
                      "' (expected k|fusion|metric|framework|all)");
  }
  return entries;
}

inline GridResult run_entry(const GridEntry& entry) {
  GridResult r;
  r.name = entry.name;
  r.cfg = entry.cfg;
  auto [train, test] = data::load(entry.cfg.dataset_spec());
  std::vector<Tensor> normals;
  for (const auto& li : train) normals.push_back(li.image);
  const auto t0 = std::chrono::steady_clock::now();
  trainer::Model model = trainer::train(normals, entry.cfg);
  r.train_seconds =
      std::chrono::duration<real>(std::chrono::steady_clock::now() - t0).count();
  r.report = trainer::evaluate(model, test);
  return r;
}

// jobs > 1 runs grid entries on worker threads; each entry is self-contained
// and seeded independently, so results do not depend on the schedule.
inline std::vector<GridResult> run_grid(const std::vector<GridEntry>& entries, int jobs = 1) {
  std::vector<GridResult> results(entries.size());
  if (jobs <= 1) {
    for (std::size_t i = 0; i < entries.size(); ++i) results[i] = run_entry(entries[i]);
    return results;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (int t = 0; t < jobs; ++t)
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= entries.size()) return;
        results[i] = run_entry(entries[i]);
      }
    });
  for (auto& th : pool) th.join();
  return results;
}

inline void write_csv(const std::string& path, const std::vector<GridResult>& results) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path);
  out << "name,k,fusion_mode,mask_metric,variant,resolution,seed,"
         "auroc_cla,auroc_seg,pro_seg,ap_seg,train_seconds\n";
  out.precision(6);
  out << std::fixed;
  for (const GridResult& r : results) {
    out << r.name << "," << r.cfg.k << "," << r.cfg.fusion_mode << "," << r.cfg.mask_metric
        << "," << config::to_string(r.cfg.variant) << "," << r.cfg.resolution << ","
        << r.cfg.seed << "," << r.report.auroc_cla << "," << r.report.auroc_seg << ","
        << r.report.pro_seg << "," << r.report.ap_seg << "," << r.train_seconds << "\n";
  }
}

// AP_seg bar chart rendered with OpenCV drawing primitives.
inline void write_chart(const std::string& path, const std::vector<GridResult>& results) {
  const int bar_w = 56, gap = 24, margin = 60, height = 360;
  const int width = margin * 2 + static_cast<int>(results.size()) * (bar_w + gap);
  cv::Mat img(height, std::max(width, 320), CV_8UC3, cv::Scalar(250, 250, 250));
  const int base_y = height - 70;
  const int plot_h = base_y - 30;
  cv::line(img, {margin - 10, base_y}, {img.cols - margin + 10, base_y},
           cv::Scalar(60, 60, 60), 1);
  for (std::size_t i = 0; i < results.size(); ++i) {
    const int x = margin + static_cast<int>(i) * (bar_w + gap);
    const double ap = std::min(1.0, std::max(0.0, static_cast<double>(results[i].report.ap_seg)));
    const int h = static_cast<int>(ap * plot_h);
    cv::rectangle(img, {x, base_y - h}, {x + bar_w, base_y}, cv::Scalar(180, 120, 40),
                  cv::FILLED);
    char label[32];
    std::snprintf(label, sizeof(label), "%.3f", ap);
    cv::putText(img, label, {x - 4, base_y - h - 8}, cv::FONT_HERSHEY_SIMPLEX, 0.45,
                cv::Scalar(30, 30, 30), 1);
    cv::putText(img, results[i].name, {x - 4, base_y + 22}, cv::FONT_HERSHEY_SIMPLEX, 0.42,
                cv::Scalar(30, 30, 30), 1);
  }
  cv::putText(img, "AP_seg", {10, 24}, cv::FONT_HERSHEY_SIMPLEX, 0.55, cv::Scalar(30, 30, 30),
              1);
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  cv::imwrite(path, img);
}

}  // namespace adps::ablate
