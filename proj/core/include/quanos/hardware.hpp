#pragma once

// Analytical energy and memory model of a precision-scalable MAC accelerator.
//
// Per layer with I input channels, O output channels, an N x N input map,
// k x k kernels, an M x M output map and k_b-bit operands:
//
//   accesses   N_A = N^2 I + k^2 I O
//   MACs       N_C = M^2 I k^2 O
//   energy     E   = N_A * 2.5 k_b + N_C * (3.1 k_b / 32 + 0.1)      [pJ]
//   configured E_c = N_A * 2.5 k_b + N_C * (3.1 k_b / 32 + 0.1) * m(k_b)
//   memory     M_l = I O k^2 k_b                                    [bits]
//
// m(k_b) is the configuration's normalized energy per MAC (1 at 16 bits).
// Only the MAC term is scaled. Weight/input reuse, control and instruction
// energy are ignored.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "quanos/network.hpp"
#include "quanos/quantizer.hpp"

namespace quanos {

struct LayerDims {
  std::uint64_t I = 1, O = 1, N = 1, k = 1, M = 1;
  int kb = 16;

  /// Throws ArgumentError for zero extents or kb < 1.
  void validate() const;
};

struct OpCounts {
  std::uint64_t accesses = 0;  // N_A
  std::uint64_t macs = 0;      // N_C
};

/// Exact counts. Throws ArgumentError if a count does not fit in 64 bits.
OpCounts count_ops(const LayerDims& d);

struct EnergyTables {
  double access_pj_per_bit = 2.5;
  double mult32_pj = 3.1;
  double add32_pj = 0.1;

  double access_pj(int kb) const { return access_pj_per_bit * kb; }
  double mac_pj(int kb) const { return mult32_pj * kb / 32.0 + add32_pj; }
  void validate() const;
};

double layer_energy(const LayerDims& d, const EnergyTables& t = {});

/// Normalized MAC energy per bit width. The standard configuration is 1
/// everywhere; other configurations list explicit widths.
struct HardwareConfig {
  std::string name = "standard";
  std::map<int, double> multiplier;  // empty: identically 1

  static HardwareConfig standard() { return {}; }
  bool is_identity() const { return multiplier.empty(); }
  /// Throws CalibrationError when kb is not tabulated.
  double at(int kb) const;
  /// m(16) = 1, every entry in (0, 1] and non-decreasing in kb. Throws
  /// CalibrationError.
  void validate() const;
};

double layer_energy_config(const LayerDims& d, const EnergyTables& t, const HardwareConfig& hw);

/// I * O * k^2 * k_b bits. Throws ArgumentError for kb < 1.
std::uint64_t layer_memory(const LayerDims& d);

/// Calibration text: optional header "config,kb,multiplier", then one row per
/// (config, width). '#' starts a comment.
std::vector<HardwareConfig> parse_calibration(const std::string& text);
std::vector<HardwareConfig> load_calibration(const std::filesystem::path& path);
std::string calibration_to_csv(const std::vector<HardwareConfig>& configs);

/// Weight layer as seen by the cost model. `slot` is the plan key whose
/// width applies; `fixed_bits` overrides the plan (e.g. an unquantized
/// classifier).
struct CostLayer {
  std::string name;
  int slot = 0;
  LayerDims dims;
  std::optional<int> fixed_bits;
};

struct CostModel {
  std::string name;
  std::vector<CostLayer> layers;

  /// Distinct plan slots in first-use order.
  std::vector<int> slots() const;
  /// Applies plan widths; throws PlanError when a slot is missing.
  std::vector<LayerDims> resolve(const BitWidthPlan& plan) const;
};

/// Preset layer tables:
///   vgg19-cifar     16 conv layers (C1..C16) plus the 512->10 classifier as
///                   slot C17, 32x32 input, 2x2 pooling after C2, C4, C8,
///                   C12, C16
///   resnet18-cifar  17 conv layers (C1..C17); the three 1x1 projection
///                   shortcuts are charged at the width of the block's
///                   second conv (the layer they feed)
/// Slots are numbered 1..17 so plans may use C<n> or n keys.
CostModel cost_preset(const std::string& name);
std::vector<std::string> cost_preset_names();

/// Cost model of an actual network: quantizable layers and projections use
/// their owner's slot; the classifier is charged at `classifier_bits`.
CostModel cost_model_from_network(const NetworkModel& model, int classifier_bits = 16);

struct EnergyRow {
  std::string name;
  int slot = 0;
  LayerDims dims;
  OpCounts ops;
  double access_pj = 0;
  double compute_pj = 0;  // unscaled MAC energy
  std::vector<double> total_pj;  // one per config, same order as EnergyReport::configs
  std::uint64_t memory_bits = 0;
};

struct EnergyReport {
  std::string model;
  std::vector<HardwareConfig> configs;
  std::vector<EnergyRow> rows;
  std::vector<EnergyRow> baseline_rows;

  double total_pj(std::size_t config) const;
  double baseline_total_pj(std::size_t config) const;
  double energy_ratio(std::size_t config) const;
  std::uint64_t memory_bits() const;
  std::uint64_t baseline_memory_bits() const;
  double memory_ratio() const;
  std::size_t config_index(const std::string& name) const;

  /// Per-layer rows as CSV.
  std::string layers_csv() const;
  /// One row per configuration with totals and ratios.
  std::string summary_csv() const;
  /// Human-readable table in mJ with 3 significant digits.
  std::string table() const;
};

EnergyReport network_report(const CostModel& model, const BitWidthPlan& plan,
                            const std::vector<HardwareConfig>& configs, const BitWidthPlan& baseline,
                            const EnergyTables& tables = {});

/// One calibration target: the configured energy of `plan` relative to the
/// model's uniform 16-bit energy under the same configuration.
struct CalibrationTarget {
  BitWidthPlan plan;
  double ratio = 1;
};

struct CalibrationFit {
  HardwareConfig config;
  double a = 0, g = 1;
  double max_error = 0;
};

/// Fits m(k) = a + (1 - a) (k / 16)^g, a in [0, 1), g > 0, minimizing the
/// largest absolute ratio error over the targets. The table covers 1..16
/// bits.
CalibrationFit fit_calibration(const std::string& name, const CostModel& model,
                               const std::vector<CalibrationTarget>& targets, const EnergyTables& tables = {});

}  // namespace quanos
