#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

#include "artfix/image.hpp"
#include "artfix/image_io.hpp"

namespace artfix {

struct DatasetSpec {
  std::filesystem::path root_path;
  int patch_size = 64;
  double train_fraction = 1.0;
  double validation_fraction = 0.0;
  ValueDomain normalization = ValueDomain::signed11;
  std::uint64_t shuffle_seed = 0;

  void validate() const {
    if (root_path.empty()) throw std::invalid_argument("dataset root_path is not set");
    if (patch_size < 1) throw std::invalid_argument("dataset patch_size must be positive");
    if (train_fraction < 0 || validation_fraction < 0 || std::abs(train_fraction + validation_fraction - 1.0) > 1e-9)
      throw std::invalid_argument("dataset train and validation fractions must be non-negative and sum to 1");
  }
};

struct Dataset {
  std::vector<ImageTensor> train;
  std::vector<ImageTensor> validation;
  std::vector<std::string> train_ids;
  std::vector<std::string> validation_ids;
};

/// Centre-crops to a square and resizes to size x size (area resampling).
inline ImageTensor crop_resize(const cv::Mat& bgr8, int size, ValueDomain domain) {
  const int side = std::min(bgr8.rows, bgr8.cols);
  cv::Mat sq = bgr8(cv::Rect((bgr8.cols - side) / 2, (bgr8.rows - side) / 2, side, side));
  if (side != size) {
    cv::Mat r;
    cv::resize(sq, r, cv::Size(size, size), 0, 0, side > size ? cv::INTER_AREA : cv::INTER_LINEAR);
    sq = r;
  }
  return from_mat(sq.clone(), domain);
}

/// Permutation of [0, n) fixed by seed.
inline std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit draw so the order is library independent.
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[std::size_t(rng() % i)]);
  return order;
}

/// Decodes every image under root_path (sorted by name, then shuffled by
/// shuffle_seed) and splits it. Undecodable files are skipped with a warning.
inline Dataset load_dataset(const DatasetSpec& spec) {
  spec.validate();
  if (!std::filesystem::is_directory(spec.root_path))
    throw std::invalid_argument("dataset root_path '" + spec.root_path.string() + "' is not a directory");
  std::vector<ImageTensor> images;
  std::vector<std::string> ids;
  for (const auto& path : list_images(spec.root_path)) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (m.empty()) {
      spdlog::warn("skipping unreadable image {}", path.string());
      continue;
    }
    images.push_back(crop_resize(m, spec.patch_size, spec.normalization));
    ids.push_back(path.filename().string());
  }
  if (images.empty()) throw std::runtime_error("dataset '" + spec.root_path.string() + "' has no readable images");

  const auto order = shuffled_order(images.size(), spec.shuffle_seed);
  const auto n_train = std::size_t(std::llround(spec.train_fraction * double(images.size())));
  Dataset d;
  for (std::size_t k = 0; k < order.size(); ++k) {
    auto& imgs = k < n_train ? d.train : d.validation;
    auto& names = k < n_train ? d.train_ids : d.validation_ids;
    imgs.push_back(std::move(images[order[k]]));
    names.push_back(ids[order[k]]);
  }
  return d;
}

/// Stacks single images (same shape and domain) into one batch.
inline ImageTensor stack_images(const std::vector<ImageTensor>& items, const std::vector<std::size_t>& which) {
  if (which.empty()) throw std::invalid_argument("stack_images: empty selection");
  const ImageTensor& first = items.at(which[0]);
  ImageTensor out(which.size(), first.channels(), first.height(), first.width(), first.domain);
  const std::size_t per = first.size();
  for (std::size_t k = 0; k < which.size(); ++k) {
    const ImageTensor& im = items.at(which[k]);
    if (!im.same_shape(first) || im.domain != first.domain || im.batch() != 1)
      throw std::invalid_argument("stack_images: images differ in shape or domain");
    std::copy(im.values.data.begin(), im.values.data.end(), out.values.data.begin() + std::ptrdiff_t(k * per));
  }
  return out;
}

/// Batches over items in the order fixed by seed; the last may be short.
inline std::vector<ImageTensor> make_batches(const std::vector<ImageTensor>& items, std::size_t batch_size,
                                             std::uint64_t seed) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (items.empty()) throw std::invalid_argument("make_batches: no images");
  const auto order = shuffled_order(items.size(), seed);
  std::vector<ImageTensor> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::vector<std::size_t> which(order.begin() + std::ptrdiff_t(i),
                                         order.begin() + std::ptrdiff_t(std::min(order.size(), i + batch_size)));
    out.push_back(stack_images(items, which));
  }
  return out;
}

/// load_dataset followed by make_batches over the training split.
inline std::vector<ImageTensor> ingest(const DatasetSpec& spec, std::size_t batch_size) {
  return make_batches(load_dataset(spec).train, batch_size, spec.shuffle_seed);
}

}  // namespace artfix
