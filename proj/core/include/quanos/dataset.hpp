#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "quanos/tensor.hpp"

namespace quanos {

enum class DatasetFormat { idx, cifar10, cifar100 };

DatasetFormat parse_dataset_format(const std::string& name);

/// Per-channel affine map applied on top of the [0,1] pixel scaling:
/// stored = (raw / 255 - mean) / std.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> std;

  bool is_identity() const;
};

/// Decoded image-classification data, NCHW float images.
struct Dataset {
  std::vector<float> images;  // size() * channels * height * width
  std::vector<int> labels;
  std::vector<int> coarse_labels;  // CIFAR-100 only
  std::size_t channels = 0, height = 0, width = 0;
  std::size_t num_classes = 0;
  std::string split = "train";
  Normalization normalization;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_numel() const { return channels * height * width; }
  std::span<const float> image(std::size_t i) const;

  /// Copies the listed samples into a [n,C,H,W] tensor.
  Tensor<float> batch_images(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  /// Samples [first, first + count) as a tensor.
  Tensor<float> slice_images(std::size_t first, std::size_t count) const;

  /// Valid input domain after normalization (over all channels).
  std::pair<double, double> input_domain() const;

  /// Undo the normalization of sample i, returning 8-bit pixels.
  std::vector<std::uint8_t> raw_pixels(std::size_t i) const;

  /// Checks label range and sample counts. Throws ValidationError.
  void validate() const;
};

/// Reads a whole file, transparently gunzipping when it starts with the
/// gzip magic.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

/// Decoders for the official binary layouts. Throw FormatError with the byte
/// offset of the first inconsistency.
Dataset decode_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                   std::size_t num_classes = 10);
Dataset decode_cifar(std::span<const std::uint8_t> records, DatasetFormat format);

/// Inverse of the decoders (normalization is undone first).
std::vector<std::uint8_t> encode_idx_images(const Dataset& d);
std::vector<std::uint8_t> encode_idx_labels(const Dataset& d);
std::vector<std::uint8_t> encode_cifar(const Dataset& d, DatasetFormat format);

/// Loads the standard file set under `root`:
///   idx      {train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]
///   cifar10  data_batch_{1..5}.bin / test_batch.bin
///   cifar100 train.bin / test.bin
/// `root` may also name a single file (the images file for idx).
Dataset load_dataset(const std::filesystem::path& root, DatasetFormat format, const std::string& split = "train");

/// Directory from QUANOS_DATA_DIR, or `fallback` when unset.
std::filesystem::path data_dir_from_env(const std::filesystem::path& fallback = {});

/// n samples drawn without replacement, in draw order. Deterministic in seed.
Dataset sample_subset(const Dataset& d, std::size_t n, std::uint64_t seed);

/// Per-channel standardization with the dataset's own statistics; the
/// applied mean/std are recorded in `normalization`.
Dataset standardize(const Dataset& d);

}  // namespace quanos
