#pragma once

// Image file I/O and resizing, backed by OpenCV imgcodecs/imgproc. This is
// the only header (together with data.hpp) that touches OpenCV; the numeric
// core stays independent of it.
//
// Images are exchanged as [1, H, W, C] tensors in [0, 1], RGB channel order.
// Masks are single-channel PNGs with {0, 255} values, binarized at 0.5 on
// load. Images resize bilinearly, masks with nearest-neighbour.

#include <filesystem>
#include <fstream>
#include <string>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "adps/errors.hpp"
#include "adps/tensor.hpp"

namespace adps::io {

inline Tensor from_mat(const cv::Mat& m) {
  cv::Mat f;
  m.convertTo(f, CV_64F, 1.0 / 255.0);
  const int ch = f.channels();
  Tensor t(1, f.rows, f.cols, ch);
  for (int y = 0; y < f.rows; ++y) {
    const double* row = f.ptr<double>(y);
    for (int x = 0; x < f.cols; ++x)
      for (int c = 0; c < ch; ++c)
        t.at(0, y, x, c) = row[x * ch + (ch == 3 ? 2 - c : c)];  // BGR -> RGB
  }
  return t;
}

inline cv::Mat to_mat_u8(const Tensor& t) {
  if (t.c() != 1 && t.c() != 3) throw ShapeError("to_mat_u8: expected 1 or 3 channels");
  cv::Mat m(t.h(), t.w(), t.c() == 3 ? CV_8UC3 : CV_8UC1);
  for (int y = 0; y < t.h(); ++y) {
    unsigned char* row = m.ptr<unsigned char>(y);
    for (int x = 0; x < t.w(); ++x)
      for (int c = 0; c < t.c(); ++c) {
        const double v = std::min(1.0, std::max(0.0, t.at(0, y, x, t.c() == 3 ? 2 - c : c)));
        row[x * t.c() + c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
  }
  return m;
}

// Load PNG/BMP/JPEG. Grayscale files are expanded when three channels are
// requested.
inline Tensor load_image(const std::string& path, int channels = 3) {
  cv::Mat m = cv::imread(path, channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
  if (m.empty()) throw LayoutError("cannot read image: " + path);
  return from_mat(m);
}

inline Tensor load_mask(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw LayoutError("cannot read mask: " + path);
  Tensor t = from_mat(m);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = t[i] >= 0.5 ? 1.0 : 0.0;
  return t;
}

inline void save_image(const std::string& path, const Tensor& t) {
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  if (!cv::imwrite(path, to_mat_u8(t))) throw LayoutError("cannot write image: " + path);
}

inline void save_mask(const std::string& path, const Tensor& binary) {
  Tensor t = binary;
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = t[i] > 0.5 ? 1.0 : 0.0;
  save_image(path, t);
}

// 8-bit heatmap with a viridis colormap; input values are clipped to [0, 1].
inline void save_heatmap(const std::string& path, const Tensor& map) {
  if (map.c() != 1) throw ShapeError("save_heatmap: expected single channel");
  cv::Mat gray(map.h(), map.w(), CV_8UC1);
  for (int y = 0; y < map.h(); ++y)
    for (int x = 0; x < map.w(); ++x) {
      const double v = std::min(1.0, std::max(0.0, map.at(0, y, x, 0)));
      gray.at<unsigned char>(y, x) = static_cast<unsigned char>(std::lround(v * 255.0));
    }
  cv::Mat colored;
  cv::applyColorMap(gray, colored, cv::COLORMAP_VIRIDIS);
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  if (!cv::imwrite(path, colored)) throw LayoutError("cannot write heatmap: " + path);
}

inline Tensor resize_image(const Tensor& t, int size) {
  if (t.h() == size && t.w() == size) return t;
  cv::Mat m(t.h(), t.w(), CV_64FC(t.c()));
  for (int y = 0; y < t.h(); ++y) {
    double* row = m.ptr<double>(y);
    for (int x = 0; x < t.w(); ++x)
      for (int c = 0; c < t.c(); ++c) row[x * t.c() + c] = t.at(0, y, x, c);
  }
  cv::Mat r;
  cv::resize(m, r, cv::Size(size, size), 0, 0, cv::INTER_LINEAR);
  Tensor out(1, size, size, t.c());
  for (int y = 0; y < size; ++y) {
    const double* row = r.ptr<double>(y);
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < t.c(); ++c)
        out.at(0, y, x, c) = std::min(1.0, std::max(0.0, row[x * t.c() + c]));
  }
  return out;
}

inline Tensor resize_mask(const Tensor& t, int size) {
  if (t.h() == size && t.w() == size) return t;
  Tensor out = resize_nearest(t, size, size);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] >= 0.5 ? 1.0 : 0.0;
  return out;
}

// Raw float dump with a JSON sidecar describing the shape; exact
// reprocessing path next to the 8-bit PNGs.
inline void save_raw_map(const std::string& path, const Tensor& map) {
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(map.data()),
            static_cast<std::streamsize>(map.size() * sizeof(real)));
  std::ofstream side(path + ".json", std::ios::trunc);
  side << "{\"dtype\":\"float64\",\"layout\":\"nhwc\",\"shape\":[" << map.n() << "," << map.h()
       << "," << map.w() << "," << map.c() << "]}\n";
}

}  // namespace adps::io
