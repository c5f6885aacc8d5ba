#pragma once

// SGD training, adversarial training and the ANS-driven hybrid quantization
// procedure:
//
//   1. train a few epochs at a uniform k_initial plan
//   2. measure ANS on a seeded training subset
//   3. derive per-layer widths from ANS
//   4. keep training under the hybrid plan
//
// The iterative variant repeats 2-4, refining each layer from its current
// width, until the plan stops changing or max_rounds is reached.

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "quanos/dataset.hpp"
#include "quanos/network.hpp"
#include "quanos/types.hpp"

namespace quanos {

enum class AdvTrainMode { none, fgsm, pgd };
enum class QuanosMode { off, single, iterative };

std::string to_string(AdvTrainMode m);
std::string to_string(QuanosMode m);
AdvTrainMode parse_adv_train_mode(const std::string& s);
QuanosMode parse_quanos_mode(const std::string& s);

struct TrainConfig {
  int epochs = 40;
  int epochs_before_ans = 6;
  double lr = 0.02;
  std::vector<int> lr_decay_epochs;  // multiply by lr_decay at each listed epoch
  double lr_decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;

  AdvTrainMode adv_train = AdvTrainMode::none;
  AttackConfig adv_attack = AttackConfig::fgsm(0.1);

  QuanosMode quanos = QuanosMode::off;
  int max_rounds = 3;
  int k_initial = 16;
  std::size_t ans_samples = 1000;
  AttackConfig ans_attack = AttackConfig::fgsm(0.05);

  /// Throws ArgumentError.
  void validate() const;
  double lr_at(int epoch) const;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_accuracy = 0;
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();
  bool quantized = false;
  double average_bits = 0;  // 0 when no plan is active
  bool adversarial = false;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;

  void append(const TrainLog& other) { epochs.insert(epochs.end(), other.epochs.begin(), other.epochs.end()); }
  std::string to_csv() const;
};

/// SGD with momentum and L2 weight decay:
///   v <- mu v + (g + wd w),  w <- w - lr v
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor<float>*> params, double momentum, double weight_decay);
  void step(double lr);
  void zero_grad();

 private:
  std::vector<Tensor<float>*> params_;
  std::vector<std::vector<float>> velocity_;
  double momentum_, weight_decay_;
};

class Trainer {
 public:
  Trainer(NetworkModel& model, TrainConfig cfg);

  /// One optimizer step on a batch in training mode. Returns the mean loss.
  /// Throws NumericError on a non-finite loss.
  double train_step(const Tensor<float>& x, std::span<const int> labels, std::size_t* correct = nullptr);

  /// Attacks the batch against the current model (eval mode), then trains on
  /// the clean and adversarial halves together.
  double adv_train_step(const Tensor<float>& x, std::span<const int> labels, std::size_t* correct = nullptr);

  EpochRecord run_epoch(const Dataset& train, const Dataset* test, int epoch, bool adversarial);
  /// Epochs [first, end).
  TrainLog train(const Dataset& train, const Dataset* test, int first, int end, bool adversarial);

  NetworkModel& model() { return *model_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  NetworkModel* model_;
  TrainConfig cfg_;
  SgdOptimizer opt_;
  double lr_;
  std::uint64_t steps_ = 0;
};

/// Plain training for cfg.epochs (adversarial when cfg.adv_train != none).
TrainLog train(NetworkModel& model, const Dataset& train, const TrainConfig& cfg, const Dataset* test = nullptr);

struct QuanosResult {
  BitWidthPlan plan;
  std::vector<AnsReport> reports;  // one per round, in order
  std::vector<BitWidthPlan> plans;
  int plan_epoch = 0;  // first epoch trained under the final plan
  TrainLog log;
};

/// Layer-wise width refinement for the iterative variant: each layer goes
/// from its current width k to k - round(clamp(ans) * k), floored at 1.
BitWidthPlan refine_plan(const BitWidthPlan& current, const AnsReport& ans);

QuanosResult quanos_procedure(NetworkModel& model, const Dataset& train, const TrainConfig& cfg,
                              const Dataset* test = nullptr);

}  // namespace quanos
