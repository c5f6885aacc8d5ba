#include "quanos/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>

#include "quanos/error.hpp"
#include "quanos/rng.hpp"

namespace quanos {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;
constexpr std::size_t kCifarPixels = 3 * 32 * 32;

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  if (offset + 4 > bytes.size()) throw FormatError("truncated IDX header", bytes.size());
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

float to_unit(std::uint8_t byte) { return static_cast<float>(byte) / 255.0f; }

std::uint8_t from_unit(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
}

std::filesystem::path first_existing(const std::filesystem::path& dir, std::initializer_list<std::string> names) {
  for (const auto& n : names) {
    if (std::filesystem::exists(dir / n)) return dir / n;
  }
  throw IoError("none of the expected dataset files exist under " + dir.string() + " (looked for " +
                *names.begin() + ")");
}

void append_dataset(Dataset& into, const Dataset& more) {
  if (into.labels.empty() && into.images.empty()) {
    into = more;
    return;
  }
  into.images.insert(into.images.end(), more.images.begin(), more.images.end());
  into.labels.insert(into.labels.end(), more.labels.begin(), more.labels.end());
}

}  // namespace

DatasetFormat parse_dataset_format(const std::string& name) {
  if (name == "idx" || name == "mnist") return DatasetFormat::idx;
  if (name == "cifar10" || name == "cifar-binary") return DatasetFormat::cifar10;
  if (name == "cifar100") return DatasetFormat::cifar100;
  throw ArgumentError("unknown dataset format '" + name + "' (expected idx, cifar10 or cifar100)");
}

bool Normalization::is_identity() const {
  return std::all_of(mean.begin(), mean.end(), [](double m) { return m == 0.0; }) &&
         std::all_of(std.begin(), std.end(), [](double s) { return s == 1.0; });
}

std::span<const float> Dataset::image(std::size_t i) const {
  if (i >= size()) throw IndexError("sample " + std::to_string(i) + " out of range");
  return std::span<const float>(images).subspan(i * sample_numel(), sample_numel());
}

Tensor<float> Dataset::batch_images(std::span<const std::size_t> indices) const {
  std::vector<float> data;
  data.reserve(indices.size() * sample_numel());
  for (auto i : indices) {
    auto img = image(i);
    data.insert(data.end(), img.begin(), img.end());
  }
  return Tensor<float>({indices.size(), channels, height, width}, std::move(data));
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

Tensor<float> Dataset::slice_images(std::size_t first, std::size_t count) const {
  if (first + count > size()) throw IndexError("slice past the end of the dataset");
  const auto begin = images.begin() + static_cast<std::ptrdiff_t>(first * sample_numel());
  return Tensor<float>({count, channels, height, width},
                       std::vector<float>(begin, begin + static_cast<std::ptrdiff_t>(count * sample_numel())));
}

std::pair<double, double> Dataset::input_domain() const {
  if (normalization.is_identity()) return {0.0, 1.0};
  double lo = 0, hi = 0;
  for (std::size_t c = 0; c < normalization.mean.size(); ++c) {
    const double a = (0.0 - normalization.mean[c]) / normalization.std[c];
    const double b = (1.0 - normalization.mean[c]) / normalization.std[c];
    lo = c == 0 ? a : std::min(lo, a);
    hi = c == 0 ? b : std::max(hi, b);
  }
  return {lo, hi};
}

std::vector<std::uint8_t> Dataset::raw_pixels(std::size_t i) const {
  auto img = image(i);
  std::vector<std::uint8_t> out(img.size());
  const std::size_t plane = height * width;
  for (std::size_t j = 0; j < img.size(); ++j) {
    double v = img[j];
    if (!normalization.mean.empty()) {
      const std::size_t c = j / plane;
      v = v * normalization.std[c] + normalization.mean[c];
    }
    out[j] = from_unit(v);
  }
  return out;
}

void Dataset::validate() const {
  if (images.size() != size() * sample_numel()) throw ValidationError("image buffer does not match label count");
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
      throw ValidationError("label " + std::to_string(l) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
  int err = 0;
  const char* msg = gzerror(f, &err);
  gzclose(f);
  if (n < 0 || (err != Z_OK && err != Z_STREAM_END)) {
    throw IoError("read error in " + path.string() + ": " + (msg ? msg : "unknown"));
  }
  return out;
}

Dataset decode_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                   std::size_t num_classes) {
  const auto magic = read_be32(images, 0);
  if (magic != kIdxImagesMagic) throw FormatError("bad IDX image magic number", 0);
  const std::size_t count = read_be32(images, 4);
  const std::size_t rows = read_be32(images, 8);
  const std::size_t cols = read_be32(images, 12);
  const std::size_t pixels = rows * cols;
  if (images.size() != 16 + count * pixels) {
    throw FormatError("IDX image payload has " + std::to_string(images.size() - 16) + " bytes, header declares " +
                          std::to_string(count * pixels),
                      std::min(images.size(), 16 + count * pixels));
  }
  if (read_be32(labels, 0) != kIdxLabelsMagic) throw FormatError("bad IDX label magic number", 0);
  const std::size_t label_count = read_be32(labels, 4);
  if (label_count != count) throw FormatError("IDX label count does not match image count", 4);
  if (labels.size() != 8 + count) throw FormatError("IDX label payload truncated", std::min(labels.size(), 8 + count));

  Dataset d;
  d.channels = 1;
  d.height = rows;
  d.width = cols;
  d.num_classes = num_classes;
  d.images.resize(count * pixels);
  std::transform(images.begin() + 16, images.end(), d.images.begin(), to_unit);
  d.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    d.labels[i] = labels[8 + i];
    if (static_cast<std::size_t>(d.labels[i]) >= num_classes) {
      throw FormatError("label " + std::to_string(d.labels[i]) + " >= " + std::to_string(num_classes), 8 + i);
    }
  }
  return d;
}

Dataset decode_cifar(std::span<const std::uint8_t> records, DatasetFormat format) {
  if (format == DatasetFormat::idx) throw ArgumentError("decode_cifar called with idx format");
  const std::size_t label_bytes = format == DatasetFormat::cifar100 ? 2 : 1;
  const std::size_t record = label_bytes + kCifarPixels;
  if (records.size() % record != 0 || records.empty()) {
    throw FormatError("CIFAR file length " + std::to_string(records.size()) + " is not a multiple of the " +
                          std::to_string(record) + "-byte record",
                      records.size() - records.size() % record);
  }
  Dataset d;
  d.channels = 3;
  d.height = d.width = 32;
  d.num_classes = format == DatasetFormat::cifar100 ? 100 : 10;
  const std::size_t count = records.size() / record;
  d.images.resize(count * kCifarPixels);
  d.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t base = i * record;
    const int label = records[base + label_bytes - 1];
    if (static_cast<std::size_t>(label) >= d.num_classes) {
      throw FormatError("CIFAR label " + std::to_string(label) + " out of range", base + label_bytes - 1);
    }
    if (label_bytes == 2) d.coarse_labels.push_back(records[base]);
    d.labels[i] = label;
    std::transform(records.begin() + static_cast<std::ptrdiff_t>(base + label_bytes),
                   records.begin() + static_cast<std::ptrdiff_t>(base + record),
                   d.images.begin() + static_cast<std::ptrdiff_t>(i * kCifarPixels), to_unit);
  }
  return d;
}

std::vector<std::uint8_t> encode_idx_images(const Dataset& d) {
  if (d.channels != 1) throw ArgumentError("IDX images are single-channel");
  std::vector<std::uint8_t> out;
  write_be32(out, kIdxImagesMagic);
  write_be32(out, static_cast<std::uint32_t>(d.size()));
  write_be32(out, static_cast<std::uint32_t>(d.height));
  write_be32(out, static_cast<std::uint32_t>(d.width));
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto px = d.raw_pixels(i);
    out.insert(out.end(), px.begin(), px.end());
  }
  return out;
}

std::vector<std::uint8_t> encode_idx_labels(const Dataset& d) {
  std::vector<std::uint8_t> out;
  write_be32(out, kIdxLabelsMagic);
  write_be32(out, static_cast<std::uint32_t>(d.size()));
  for (int l : d.labels) out.push_back(static_cast<std::uint8_t>(l));
  return out;
}

std::vector<std::uint8_t> encode_cifar(const Dataset& d, DatasetFormat format) {
  if (d.channels != 3 || d.height != 32 || d.width != 32) throw ArgumentError("CIFAR records are 3x32x32");
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (format == DatasetFormat::cifar100) {
      out.push_back(static_cast<std::uint8_t>(i < d.coarse_labels.size() ? d.coarse_labels[i] : 0));
    }
    out.push_back(static_cast<std::uint8_t>(d.labels[i]));
    auto px = d.raw_pixels(i);
    out.insert(out.end(), px.begin(), px.end());
  }
  return out;
}

Dataset load_dataset(const std::filesystem::path& root, DatasetFormat format, const std::string& split) {
  const bool train = split == "train";
  if (!train && split != "test") throw ArgumentError("split must be train or test, got '" + split + "'");
  Dataset d;
  switch (format) {
    case DatasetFormat::idx: {
      std::filesystem::path images, labels;
      if (std::filesystem::is_regular_file(root)) {
        images = root;
        auto name = root.filename().string();
        if (auto pos = name.find("images-idx3"); pos != std::string::npos) {
          name.replace(pos, 11, "labels-idx1");
        }
        labels = root.parent_path() / name;
      } else {
        const std::string prefix = train ? "train" : "t10k";
        images = first_existing(root, {prefix + "-images-idx3-ubyte", prefix + "-images-idx3-ubyte.gz",
                                       prefix + "-images.idx3-ubyte"});
        labels = first_existing(root, {prefix + "-labels-idx1-ubyte", prefix + "-labels-idx1-ubyte.gz",
                                       prefix + "-labels.idx1-ubyte"});
      }
      d = decode_idx(read_file_bytes(images), read_file_bytes(labels));
      break;
    }
    case DatasetFormat::cifar10: {
      if (std::filesystem::is_regular_file(root)) {
        d = decode_cifar(read_file_bytes(root), format);
      } else if (train) {
        for (int b = 1; b <= 5; ++b) {
          append_dataset(d, decode_cifar(read_file_bytes(first_existing(root, {"data_batch_" + std::to_string(b) + ".bin"})),
                                         format));
        }
      } else {
        d = decode_cifar(read_file_bytes(first_existing(root, {"test_batch.bin"})), format);
      }
      break;
    }
    case DatasetFormat::cifar100: {
      const auto file = std::filesystem::is_regular_file(root) ? root
                                                               : first_existing(root, {train ? "train.bin" : "test.bin"});
      d = decode_cifar(read_file_bytes(file), format);
      break;
    }
  }
  d.split = split;
  return d;
}

std::filesystem::path data_dir_from_env(const std::filesystem::path& fallback) {
  if (const char* env = std::getenv("QUANOS_DATA_DIR"); env && *env) return env;
  return fallback;
}

Dataset sample_subset(const Dataset& d, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ArgumentError("subset size must be positive");
  if (n > d.size()) {
    throw ArgumentError("subset of " + std::to_string(n) + " requested from " + std::to_string(d.size()) + " samples");
  }
  rng::Engine eng(seed);
  const auto idx = rng::sample_indices(d.size(), n, eng);
  Dataset out = d;
  out.images.clear();
  out.labels.clear();
  out.coarse_labels.clear();
  out.images.reserve(n * d.sample_numel());
  for (auto i : idx) {
    auto img = d.image(i);
    out.images.insert(out.images.end(), img.begin(), img.end());
    out.labels.push_back(d.labels[i]);
    if (i < d.coarse_labels.size()) out.coarse_labels.push_back(d.coarse_labels[i]);
  }
  return out;
}

Dataset standardize(const Dataset& d) {
  if (!d.normalization.mean.empty() && !d.normalization.is_identity()) {
    throw StateError("dataset is already standardized");
  }
  Dataset out = d;
  const std::size_t plane = d.height * d.width;
  out.normalization.mean.assign(d.channels, 0.0);
  out.normalization.std.assign(d.channels, 1.0);
  for (std::size_t c = 0; c < d.channels; ++c) {
    double s = 0, ss = 0;
    const double n = static_cast<double>(d.size() * plane);
    for (std::size_t i = 0; i < d.size(); ++i) {
      for (std::size_t j = 0; j < plane; ++j) {
        const double v = d.images[(i * d.channels + c) * plane + j];
        s += v;
        ss += v * v;
      }
    }
    const double mean = s / n;
    const double sd = std::sqrt(std::max(ss / n - mean * mean, 1e-12));
    out.normalization.mean[c] = mean;
    out.normalization.std[c] = sd;
    for (std::size_t i = 0; i < d.size(); ++i) {
      for (std::size_t j = 0; j < plane; ++j) {
        auto& v = out.images[(i * d.channels + c) * plane + j];
        v = static_cast<float>((v - mean) / sd);
      }
    }
  }
  return out;
}

}  // namespace quanos
