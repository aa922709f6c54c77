#pragma once

#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "artfix/image.hpp"

namespace artfix {

struct ImageIoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline ImageTensor from_mat(const cv::Mat& bgr8, ValueDomain domain) {
  if (bgr8.empty() || bgr8.type() != CV_8UC3) throw ImageIoError("from_mat: expected an 8-bit 3-channel image");
  const std::size_t H = std::size_t(bgr8.rows), W = std::size_t(bgr8.cols), HW = H * W;
  ImageTensor img(1, 3, H, W, ValueDomain::byte255);
  for (std::size_t y = 0; y < H; ++y) {
    const auto* row = bgr8.ptr<cv::Vec3b>(int(y));
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.values[c * HW + y * W + x] = double(row[x][2 - c]);
  }
  return domain == ValueDomain::byte255 ? img : img.converted(domain);
}

/// Quantizes image n of the batch to 8-bit BGR (grayscale is replicated).
inline cv::Mat to_mat(const ImageTensor& img, std::size_t n = 0) {
  const ImageTensor b = img.converted(ValueDomain::byte255);
  const std::size_t H = b.height(), W = b.width(), HW = H * W, C = b.channels();
  cv::Mat m(int(H), int(W), CV_8UC3);
  for (std::size_t y = 0; y < H; ++y) {
    auto* row = m.ptr<cv::Vec3b>(int(y));
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = b.values[(n * C + (C == 3 ? c : 0)) * HW + y * W + x];
        row[x][2 - c] = cv::saturate_cast<uchar>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
  }
  return m;
}

/// Decodes a PNG/JPEG as RGB.
inline ImageTensor read_image(const std::filesystem::path& path, ValueDomain domain = ValueDomain::unit01) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (m.empty()) throw ImageIoError("cannot decode image " + path.string());
  return from_mat(m, domain);
}

inline void write_image(const std::filesystem::path& path, const ImageTensor& img, std::size_t n = 0) {
  if (!cv::imwrite(path.string(), to_mat(img, n))) throw ImageIoError("cannot write image " + path.string());
}

/// Single-channel mask PNG: nonzero pixels are artifact.
inline ArtifactMask read_mask(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw ImageIoError("cannot decode mask " + path.string());
  ArtifactMask out(std::size_t(m.rows), std::size_t(m.cols));
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) out.set(std::size_t(y), std::size_t(x), m.at<uchar>(y, x) != 0);
  return out;
}

inline void write_mask(const std::filesystem::path& path, const ArtifactMask& mask) {
  cv::Mat m(int(mask.height()), int(mask.width()), CV_8UC1);
  for (std::size_t y = 0; y < mask.height(); ++y)
    for (std::size_t x = 0; x < mask.width(); ++x) m.at<uchar>(int(y), int(x)) = mask(y, x) ? 255 : 0;
  if (!cv::imwrite(path.string(), m)) throw ImageIoError("cannot write mask " + path.string());
}

/// Side-by-side strip of equally sized images with a 2-pixel white gutter.
inline void write_strip(const std::filesystem::path& path, const std::vector<ImageTensor>& images) {
  if (images.empty()) throw std::invalid_argument("write_strip: no images");
  std::vector<cv::Mat> parts;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (i) parts.emplace_back(int(images[0].height()), 2, CV_8UC3, cv::Scalar(255, 255, 255));
    parts.push_back(to_mat(images[i]));
  }
  cv::Mat strip;
  cv::hconcat(parts, strip);
  if (!cv::imwrite(path.string(), strip)) throw ImageIoError("cannot write image " + path.string());
}

inline bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  for (char& ch : ext) ch = char(std::tolower(static_cast<unsigned char>(ch)));
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

/// Image files directly inside dir, sorted by filename.
inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace artfix
