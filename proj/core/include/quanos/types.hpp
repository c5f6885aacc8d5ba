#pragma once

// Plain value types shared between the attack, sensitivity and plan modules.

#include <cstdint>
#include <map>
#include <string>

namespace quanos {

enum class AttackKind { fgsm, pgd };

std::string to_string(AttackKind kind);
AttackKind parse_attack_kind(const std::string& name);

struct AttackConfig {
  AttackKind kind = AttackKind::fgsm;
  double epsilon = 0.05;  // L-infinity budget in input units
  double alpha = 2.0 / 255.0;
  int steps = 7;
  double clip_lo = 0.0;
  double clip_hi = 1.0;
  bool random_start = false;
  /// false reproduces the literal unsigned update x + alpha * grad.
  bool signed_steps = true;
  std::uint64_t seed = 0;

  /// Throws ArgumentError when the budget, step or clip range is invalid.
  void validate() const;

  static AttackConfig fgsm(double epsilon) {
    AttackConfig c;
    c.kind = AttackKind::fgsm;
    c.epsilon = epsilon;
    return c;
  }
  static AttackConfig pgd(double epsilon, double alpha, int steps) {
    AttackConfig c;
    c.kind = AttackKind::pgd;
    c.epsilon = epsilon;
    c.alpha = alpha;
    c.steps = steps;
    return c;
  }
};

/// Per-layer adversarial noise sensitivity with the sampling setup that
/// produced it.
struct AnsReport {
  std::map<int, double> values;  // layer id -> ANS
  std::size_t sample_count = 0;
  AttackConfig attack;
  int epoch = 0;
  std::string aggregation = "mean_of_ratios";
};

}  // namespace quanos
