#pragma once

// White-box L-infinity attacks.
//
// Both attacks share one kernel: start at x (or a seeded point in the box),
// then repeat x <- P(x + alpha * sign(dL/dx)), where P clamps every element
// into [max(x0 - eps, lo), min(x0 + eps, hi)]. The box edges are pulled in by
// at most one float ULP so that |x_adv - x0| <= eps holds when evaluated in
// double precision. FGSM is one step with alpha = eps.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "quanos/dataset.hpp"
#include "quanos/network.hpp"
#include "quanos/tensor.hpp"
#include "quanos/types.hpp"

namespace quanos {

/// Scalar loss as a function of the attacked input.
using InputLoss = std::function<Tensor<float>(const Tensor<float>& x)>;

/// Runs the attack described by `cfg` against an arbitrary differentiable
/// loss. Throws NumericError if a gradient is not finite.
Tensor<float> attack(const InputLoss& loss, const Tensor<float>& x, const AttackConfig& cfg);

/// Attacks a classifier with the summed cross-entropy of its logits.
Tensor<float> attack(const Classifier& model, const Tensor<float>& x, std::span<const int> labels,
                     const AttackConfig& cfg);

Tensor<float> fgsm(const Classifier& model, const Tensor<float>& x, std::span<const int> labels,
                   const AttackConfig& cfg);
Tensor<float> pgd(const Classifier& model, const Tensor<float>& x, std::span<const int> labels,
                  const AttackConfig& cfg);

/// Fraction of correct argmax predictions on clean data.
double clean_accuracy(const Classifier& model, const Dataset& data, std::size_t batch_size = 100);

/// Accuracy on per-sample adversaries. Batches use a seed derived from
/// cfg.seed and the batch index, so the result is deterministic.
double adversarial_accuracy(const Classifier& model, const Dataset& data, const AttackConfig& cfg,
                            std::size_t batch_size = 100);

/// Clean accuracy minus adversarial accuracy, in percentage points.
inline double adversarial_loss(double clean_acc, double adv_acc) { return (clean_acc - adv_acc) * 100.0; }

}  // namespace quanos
