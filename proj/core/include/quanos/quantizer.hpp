#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "quanos/tensor.hpp"
#include "quanos/types.hpp"

namespace quanos {

/// Bit widths at or above this are treated as full precision: the quantizer
/// returns its input unchanged.
inline constexpr int kFullPrecisionBits = 32;

/// Symmetric uniform quantization of `in` into `out` with one max-abs scale
/// for the whole span.
///
///   bits >= 2:  s = max|x| / (2^(bits-1) - 1),  y = round(x / s) * s
///               (round half away from zero; at most 2^bits - 1 levels)
///   bits == 1:  y = mean|x| * (x >= 0 ? 1 : -1)  (two levels)
///
/// All-zero input is copied through. Throws ArgumentError for bits < 1.
template <typename T>
void quantize_values(std::span<const T> in, std::span<T> out, int bits);

/// Step size used by quantize_values for bits >= 2 (0 for all-zero input).
template <typename T>
double quantization_step(std::span<const T> in, int bits);

/// Fake quantization with a straight-through gradient, one scale per tensor.
template <typename T>
Tensor<T> fake_quantize(const Tensor<T>& x, int bits);

/// Same as fake_quantize but with one scale per sample (leading axis), so a
/// sample's quantized activations do not depend on the rest of its batch.
template <typename T>
Tensor<T> fake_quantize_per_sample(const Tensor<T>& x, int bits);

/// Per-layer precision assignment. Weights and activations of a layer share
/// one width.
struct BitWidthPlan {
  std::map<int, int> bits;  // layer id -> k_l
  int k_initial = 16;
  std::string provenance = "manual";

  static BitWidthPlan uniform(const std::vector<int>& layer_ids, int bits);

  bool contains(int layer_id) const { return bits.count(layer_id) != 0; }
  /// Throws PlanError when the layer has no entry.
  int at(int layer_id) const;
  std::vector<int> ordered_bits() const;

  /// Every id in `layer_ids` has exactly one entry, no extras, and every
  /// width lies in [1, k_initial]. Throws PlanError otherwise.
  void validate(const std::vector<int>& layer_ids) const;

  /// `layer,bits` CSV preceded by `# k_initial=` and `# provenance=` lines.
  std::string to_csv() const;

  /// Parses to_csv() output. Keys are layer ids, or `C<n>` meaning the n-th
  /// (1-based) entry of `ordered_ids`. Rows may use ',' or whitespace.
  /// A single row listing every width in `ordered_ids` order is also
  /// accepted, and widths may carry a "b" or "-b" suffix.
  static BitWidthPlan parse(std::string_view text, const std::vector<int>& ordered_ids = {});

  bool operator==(const BitWidthPlan& other) const { return bits == other.bits && k_initial == other.k_initial; }
};

/// k = k_initial - round(clamp(ans, 0, 1) * k_initial), clamped to [1, k_initial].
int bits_from_sensitivity(double ans, int k_initial);

/// Applies bits_from_sensitivity to every layer of the report. When
/// `required_ids` is non-empty each of them must have an ANS value.
BitWidthPlan assign_bitwidths(const AnsReport& ans, int k_initial, const std::vector<int>& required_ids = {});

/// Arithmetic mean of the per-layer widths.
double plan_average_bits(const BitWidthPlan& plan);

}  // namespace quanos
