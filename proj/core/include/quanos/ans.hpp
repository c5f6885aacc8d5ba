#pragma once

// Adversarial noise sensitivity: for each quantizable layer, the relative L2
// change of its activation tap between a clean input and its adversary,
//
//   ANS_l = || a_adv - a || / || a ||,
//
// averaged over samples. A sample whose clean activation is all zero
// contributes 0.

#include <span>
#include <utility>
#include <vector>

#include "quanos/adversary.hpp"
#include "quanos/dataset.hpp"
#include "quanos/network.hpp"
#include "quanos/types.hpp"

namespace quanos {

/// One sample's ratio. Returns 0 when `clean` has zero norm.
double ans_ratio(std::span<const float> clean, std::span<const float> adversarial);

/// Requires capture on the model (StateError otherwise). Forward passes run
/// in eval mode and in the model's default mode.
AnsReport compute_ans(NetworkModel& model, const Dataset& samples, const AttackConfig& cfg, int epoch = 0,
                      std::size_t batch_size = 100);

/// Mean over samples of per-sample ratios, grouped by layer id (one inner
/// vector per batch).
std::map<int, double> mean_ans(const std::map<int, std::vector<std::vector<double>>>& per_sample);

struct AblationPoint {
  double fraction = 0;
  double adversarial_accuracy = 0;
};

/// Adversarial accuracy of the model with `layer`'s units ablated at each
/// fraction in `grid` (same mask seed for every point).
std::vector<AblationPoint> ablation_curve(const NetworkModel& model, int layer, const Dataset& data,
                                          const AttackConfig& cfg, std::span<const double> grid,
                                          std::uint64_t seed = 0);

/// Layer ids with the highest and lowest ANS, ties broken by lower id.
std::pair<int, int> ans_extremes(const AnsReport& report);

}  // namespace quanos
