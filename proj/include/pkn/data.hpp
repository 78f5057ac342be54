// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "pkn/error.hpp"
#include "pkn/tensor.hpp"

namespace pkn {

/// Images in [0,1], stored as float N x C x H x W, with integer labels.
struct Dataset {
  std::vector<float> images;
  Shape sample_shape;  // C, H, W
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::string split = "train";

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return numel(sample_shape); }
  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(images).subspan(i * sample_size(), sample_size());
  }

  void validate() const {
    if (sample_shape.size() != 3) throw InputError("dataset: sample shape must be C,H,W");
    if (images.size() != size() * sample_size()) throw InputError("dataset: image buffer does not match label count");
    for (auto y : labels)
      if (y < 0 || std::size_t(y) >= num_classes) throw InputError("dataset: label " + std::to_string(y) + " out of range");
    for (auto v : images)
      if (!(v >= 0.0f && v <= 1.0f)) throw InputError("dataset: pixel outside [0,1]");
  }

  /// The first n samples (all of them when n >= size()).
  Dataset head(std::size_t n) const {
    n = std::min(n, size());
    Dataset out{{images.begin(), images.begin() + n * sample_size()}, sample_shape,
                {labels.begin(), labels.begin() + n}, num_classes, split};
    return out;
  }
};

namespace detail {

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

inline unsigned char to_byte(float v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t at) {
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) | (std::uint32_t(b[at + 2]) << 8) |
         std::uint32_t(b[at + 3]);
}

inline void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// CIFAR-10 binary: records of 1 label byte + 3072 channel-planar pixel bytes.

inline constexpr std::size_t kCifarRecord = 3073;

inline Dataset parse_cifar10(const std::vector<unsigned char>& bytes, const std::string& source) {
  if (bytes.size() % kCifarRecord != 0) {
    throw CorruptFileError(source + ": size " + std::to_string(bytes.size()) + " is not a multiple of " +
                           std::to_string(kCifarRecord) + " (expected " +
                           std::to_string((bytes.size() / kCifarRecord + 1) * kCifarRecord) + " or " +
                           std::to_string(bytes.size() / kCifarRecord * kCifarRecord) + " bytes)");
  }
  const std::size_t n = bytes.size() / kCifarRecord;
  Dataset ds;
  ds.sample_shape = {3, 32, 32};
  ds.num_classes = 10;
  ds.labels.resize(n);
  ds.images.resize(n * 3072);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kCifarRecord;
    if (rec[0] > 9) {
      throw CorruptRecordError(source + ": record " + std::to_string(i) + " has label " + std::to_string(rec[0]));
    }
    ds.labels[i] = rec[0];
    for (std::size_t k = 0; k < 3072; ++k) ds.images[i * 3072 + k] = float(rec[1 + k]) / 255.0f;
  }
  return ds;
}

inline Dataset read_cifar10_binary(const std::filesystem::path& path) {
  return parse_cifar10(detail::read_bytes(path), path.string());
}

/// Reads data_batch_1..5.bin (train) or test_batch.bin (test) from `dir`.
inline Dataset read_cifar10_dir(const std::filesystem::path& dir, bool train) {
  Dataset all;
  all.sample_shape = {3, 32, 32};
  all.num_classes = 10;
  all.split = train ? "train" : "test";
  std::vector<std::string> files;
  if (train) {
    for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
  } else {
    files.push_back("test_batch.bin");
  }
  for (const auto& f : files) {
    auto part = read_cifar10_binary(dir / f);
    all.images.insert(all.images.end(), part.images.begin(), part.images.end());
    all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
  }
  return all;
}

inline void write_cifar10_binary(const std::filesystem::path& path, const Dataset& ds) {
  if (ds.sample_shape != Shape{3, 32, 32}) throw InputError("cifar10 writer needs 3x32x32 samples");
  std::vector<unsigned char> bytes;
  bytes.reserve(ds.size() * kCifarRecord);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] < 0 || ds.labels[i] > 9) throw InputError("cifar10 writer: label out of range");
    bytes.push_back(static_cast<unsigned char>(ds.labels[i]));
    for (auto v : ds.image(i)) bytes.push_back(detail::to_byte(v));
  }
  detail::write_bytes(path, bytes);
}

// ---------------------------------------------------------------------------
// MNIST IDX: big-endian headers, magic 0x803 (images) and 0x801 (labels).

inline constexpr std::uint32_t kIdxImages = 0x00000803;
inline constexpr std::uint32_t kIdxLabels = 0x00000801;

inline Dataset parse_mnist_idx(const std::vector<unsigned char>& img, const std::vector<unsigned char>& lab,
                               const std::string& source) {
  if (img.size() < 16) throw FormatError(source + ": image file shorter than its header");
  if (lab.size() < 8) throw FormatError(source + ": label file shorter than its header");
  if (auto m = detail::read_be32(img, 0); m != kIdxImages) {
    throw FormatError(source + ": image magic " + std::to_string(m) + ", expected " + std::to_string(kIdxImages));
  }
  if (auto m = detail::read_be32(lab, 0); m != kIdxLabels) {
    throw FormatError(source + ": label magic " + std::to_string(m) + ", expected " + std::to_string(kIdxLabels));
  }
  const std::size_t n = detail::read_be32(img, 4), rows = detail::read_be32(img, 8), cols = detail::read_be32(img, 12);
  const std::size_t nl = detail::read_be32(lab, 4);
  if (img.size() - 16 != n * rows * cols) {
    throw FormatError(source + ": header declares " + std::to_string(n) + "x" + std::to_string(rows) + "x" +
                      std::to_string(cols) + " pixels, payload has " + std::to_string(img.size() - 16));
  }
  if (lab.size() - 8 != nl) {
    throw FormatError(source + ": header declares " + std::to_string(nl) + " labels, payload has " +
                      std::to_string(lab.size() - 8));
  }
  if (nl != n) throw FormatError(source + ": " + std::to_string(n) + " images but " + std::to_string(nl) + " labels");
  Dataset ds;
  ds.sample_shape = {1, rows, cols};
  ds.num_classes = 10;
  ds.labels.resize(n);
  ds.images.resize(n * rows * cols);
  for (std::size_t i = 0; i < n; ++i) {
    if (lab[8 + i] > 9) {
      throw CorruptRecordError(source + ": label " + std::to_string(lab[8 + i]) + " at index " + std::to_string(i));
    }
    ds.labels[i] = lab[8 + i];
  }
  for (std::size_t k = 0; k < ds.images.size(); ++k) ds.images[k] = float(img[16 + k]) / 255.0f;
  return ds;
}

inline Dataset read_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  return parse_mnist_idx(detail::read_bytes(images), detail::read_bytes(labels), images.string());
}

inline void write_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                            const Dataset& ds) {
  if (ds.sample_shape.size() != 3 || ds.sample_shape[0] != 1) throw InputError("idx writer needs 1xHxW samples");
  std::vector<unsigned char> img, lab;
  detail::put_be32(img, kIdxImages);
  detail::put_be32(img, std::uint32_t(ds.size()));
  detail::put_be32(img, std::uint32_t(ds.sample_shape[1]));
  detail::put_be32(img, std::uint32_t(ds.sample_shape[2]));
  for (auto v : ds.images) img.push_back(detail::to_byte(v));
  detail::put_be32(lab, kIdxLabels);
  detail::put_be32(lab, std::uint32_t(ds.size()));
  for (auto y : ds.labels) lab.push_back(static_cast<unsigned char>(y));
  detail::write_bytes(images, img);
  detail::write_bytes(labels, lab);
}

// ---------------------------------------------------------------------------
// Synthetic spirals

struct SpiralOptions {
  std::size_t n_per_class = 200;
  std::size_t classes = 3;
  double noise_sd = 0.05;
  std::size_t image_size = 16;
  double turns = 1.0;
  double blob_sigma = 0.9;  // pixels
};

/// The raw 2-D points: arm c of radius t in [0.15, 1] at angle
/// 2*pi*(turns*t + c/classes), plus Gaussian noise. Class-interleaved order.
inline std::vector<std::pair<double, double>> spiral_points(const SpiralOptions& o, std::uint64_t seed,
                                                            std::vector<int>* labels = nullptr) {
  if (o.classes < 2) throw ConfigError("spirals: need at least 2 classes");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> radius(0.15, 1.0);
  std::normal_distribution<double> noise(0.0, o.noise_sd > 0 ? o.noise_sd : 1.0);
  std::vector<std::pair<double, double>> pts;
  for (std::size_t i = 0; i < o.n_per_class; ++i) {
    for (std::size_t c = 0; c < o.classes; ++c) {
      const double t = radius(rng);
      const double theta = 2 * std::numbers::pi * (o.turns * t + double(c) / double(o.classes));
      double x = t * std::cos(theta), y = t * std::sin(theta);
      if (o.noise_sd > 0) {
        x += noise(rng);
        y += noise(rng);
      }
      pts.emplace_back(x, y);
      if (labels) labels->push_back(int(c));
    }
  }
  return pts;
}

/// Spiral points rendered as a Gaussian blob on a 1 x S x S image.
inline Dataset synthetic_spirals(const SpiralOptions& o, std::uint64_t seed) {
  Dataset ds;
  ds.sample_shape = {1, o.image_size, o.image_size};
  ds.num_classes = o.classes;
  const auto pts = spiral_points(o, seed, &ds.labels);
  const std::size_t S = o.image_size;
  ds.images.assign(pts.size() * S * S, 0.0f);
  const double inv = 1.0 / (2 * o.blob_sigma * o.blob_sigma);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double u = (std::clamp(pts[i].first, -1.2, 1.2) + 1.2) / 2.4 * double(S - 1);
    const double v = (std::clamp(pts[i].second, -1.2, 1.2) + 1.2) / 2.4 * double(S - 1);
    for (std::size_t r = 0; r < S; ++r)
      for (std::size_t c = 0; c < S; ++c) {
        const double d2 = (double(r) - v) * (double(r) - v) + (double(c) - u) * (double(c) - u);
        ds.images[i * S * S + r * S + c] = float(std::exp(-d2 * inv));
      }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentPolicy {
  double hflip_prob = 0.5;
  std::pair<double, double> brightness{0.8, 1.2};
  std::pair<double, double> contrast{0.8, 1.2};
  std::pair<double, double> saturation{0.8, 1.2};

  static AugmentPolicy identity() { return {0.0, {1, 1}, {1, 1}, {1, 1}}; }
};

struct AugmentDraw {
  bool flip = false;
  double brightness = 1, contrast = 1, saturation = 1;
};

inline AugmentDraw sample_augment(const AugmentPolicy& p, std::mt19937_64& rng) {
  auto factor = [&](std::pair<double, double> r) {
    if (r.first == r.second) return r.first;
    return std::uniform_real_distribution<double>(r.first, r.second)(rng);
  };
  AugmentDraw d;
  d.flip = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p.hflip_prob;
  d.brightness = factor(p.brightness);
  d.contrast = factor(p.contrast);
  d.saturation = factor(p.saturation);
  return d;
}

/// Mirrors the width axis of one C x H x W image in place.
inline void hflip(std::span<float> img, const Shape& shape) {
  const std::size_t C = shape[0], H = shape[1], W = shape[2];
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t r = 0; r < H; ++r) {
      float* row = img.data() + (c * H + r) * W;
      std::reverse(row, row + W);
    }
}

/// Flip, then brightness, contrast and saturation, then clamp to [0,1].
/// Grey is the channel mean for single-channel images and ITU-R 601 luma
/// for three channels.
inline void apply_augment(std::span<float> img, const Shape& shape, const AugmentDraw& d) {
  const std::size_t C = shape[0], HW = shape[1] * shape[2];
  if (d.flip) hflip(img, shape);
  auto clamp01 = [](double v) { return float(std::clamp(v, 0.0, 1.0)); };
  if (d.brightness != 1)
    for (auto& v : img) v = clamp01(v * d.brightness);
  auto grey_at = [&](std::size_t k) {
    if (C == 3) return 0.299 * img[k] + 0.587 * img[HW + k] + 0.114 * img[2 * HW + k];
    double s = 0;
    for (std::size_t c = 0; c < C; ++c) s += img[c * HW + k];
    return s / double(C);
  };
  if (d.contrast != 1) {
    double mean = 0;
    for (std::size_t k = 0; k < HW; ++k) mean += grey_at(k);
    mean /= double(HW);
    for (auto& v : img) v = clamp01(mean + d.contrast * (v - mean));
  }
  if (d.saturation != 1 && C > 1) {
    for (std::size_t k = 0; k < HW; ++k) {
      const double g = grey_at(k);
      for (std::size_t c = 0; c < C; ++c) img[c * HW + k] = clamp01(g + d.saturation * (img[c * HW + k] - g));
    }
  }
}

// ---------------------------------------------------------------------------
// Normalization and batching

struct Normalization {
  std::vector<double> mean, std;
};

/// Per-channel mean and standard deviation over the whole split.
inline Normalization compute_normalization(const Dataset& ds) {
  const std::size_t C = ds.sample_shape[0], HW = ds.sample_shape[1] * ds.sample_shape[2];
  Normalization n{std::vector<double>(C, 0), std::vector<double>(C, 0)};
  std::vector<long double> s(C, 0), s2(C, 0);
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t k = 0; k < HW; ++k) {
        const long double v = ds.images[(i * C + c) * HW + k];
        s[c] += v;
        s2[c] += v * v;
      }
  const long double count = (long double)ds.size() * HW;
  for (std::size_t c = 0; c < C; ++c) {
    n.mean[c] = double(s[c] / count);
    const double var = double(s2[c] / count) - n.mean[c] * n.mean[c];
    n.std[c] = std::sqrt(std::max(var, 1e-12));
  }
  return n;
}

/// Index order for one epoch, split into batches; the last one may be short.
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                                     std::optional<std::uint64_t> shuffle_seed) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle_seed) {
    std::mt19937_64 rng(*shuffle_seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + i, order.begin() + std::min(n, i + batch_size));
  }
  return out;
}

template <class T>
struct Batch {
  Tensor<T> images;
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

struct LoaderOptions {
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  bool shuffle = true;
  std::optional<AugmentPolicy> augment;
  std::optional<Normalization> normalization;
  bool prefetch = false;
  std::size_t prefetch_depth = 2;
};

/// Produces the batches of an epoch in a seeded order. Every random draw
/// for batch b of epoch e comes from its own generator seeded by
/// (seed, e, b), so the optional background worker yields exactly the
/// batches the synchronous path would.
template <class T>
class BatchLoader {
 public:
  BatchLoader(const Dataset& data, LoaderOptions opts) : data_(&data), opts_(std::move(opts)) {
    if (opts_.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  }

  std::size_t batches_per_epoch() const { return (data_->size() + opts_.batch_size - 1) / opts_.batch_size; }

  template <class Fn>
  void for_each_batch(std::size_t epoch, Fn&& fn) const {
    auto plan = batches(data_->size(), opts_.batch_size,
                        opts_.shuffle ? std::optional<std::uint64_t>(mix(epoch, ~std::uint64_t{0})) : std::nullopt);
    if (!opts_.prefetch) {
      for (std::size_t b = 0; b < plan.size(); ++b) fn(make(plan[b], epoch, b));
      return;
    }
    run_prefetched(plan, epoch, fn);
  }

  Batch<T> make(const std::vector<std::size_t>& idx, std::size_t epoch, std::size_t b) const {
    const auto& ds = *data_;
    const std::size_t S = ds.sample_size(), C = ds.sample_shape[0], HW = S / C;
    std::vector<T> values(idx.size() * S);
    std::vector<float> scratch(S);
    std::mt19937_64 rng(mix(epoch, b));
    Batch<T> out;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto src = ds.image(idx[i]);
      std::copy(src.begin(), src.end(), scratch.begin());
      if (opts_.augment) apply_augment(scratch, ds.sample_shape, sample_augment(*opts_.augment, rng));
      for (std::size_t k = 0; k < S; ++k) {
        double v = scratch[k];
        if (opts_.normalization) {
          const std::size_t c = k / HW;
          v = (v - opts_.normalization->mean[c]) / opts_.normalization->std[c];
        }
        values[i * S + k] = T(v);
      }
      out.labels.push_back(ds.labels[idx[i]]);
    }
    Shape shape{idx.size()};
    shape.insert(shape.end(), ds.sample_shape.begin(), ds.sample_shape.end());
    out.images = Tensor<T>(std::move(shape), std::move(values));
    out.indices = idx;
    return out;
  }

 private:
  std::uint64_t mix(std::uint64_t epoch, std::uint64_t b) const {
    std::seed_seq seq{std::uint32_t(opts_.seed), std::uint32_t(opts_.seed >> 32), std::uint32_t(epoch),
                      std::uint32_t(b), std::uint32_t(b >> 32)};
    std::uint32_t words[2];
    seq.generate(words, words + 2);
    return (std::uint64_t(words[0]) << 32) | words[1];
  }

  template <class Fn>
  void run_prefetched(const std::vector<std::vector<std::size_t>>& plan, std::size_t epoch, Fn& fn) const {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<Batch<T>> ready;
    std::exception_ptr error;
    bool done = false, stop = false;
    std::thread worker([&] {
      try {
        for (std::size_t b = 0; b < plan.size(); ++b) {
          auto batch = make(plan[b], epoch, b);
          std::unique_lock lock(mu);
          cv.wait(lock, [&] { return stop || ready.size() < opts_.prefetch_depth; });
          if (stop) return;
          ready.push_back(std::move(batch));
          cv.notify_all();
        }
      } catch (...) {
        std::lock_guard lock(mu);
        error = std::current_exception();
      }
      std::lock_guard lock(mu);
      done = true;
      cv.notify_all();
    });
    auto shutdown = [&] {
      {
        std::lock_guard lock(mu);
        stop = true;
      }
      cv.notify_all();
      worker.join();
    };
    try {
      for (std::size_t b = 0; b < plan.size(); ++b) {
        Batch<T> batch;
        {
          std::unique_lock lock(mu);
          cv.wait(lock, [&] { return !ready.empty() || error || done; });
          if (ready.empty()) break;
          batch = std::move(ready.front());
          ready.pop_front();
          cv.notify_all();
        }
        fn(std::move(batch));
      }
    } catch (...) {
      shutdown();
      throw;
    }
    shutdown();
    if (error) std::rethrow_exception(error);
  }

  const Dataset* data_;
  LoaderOptions opts_;
};

}  // namespace pkn
