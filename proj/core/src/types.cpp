#include "quanos/types.hpp"

#include <cmath>

#include "quanos/error.hpp"

namespace quanos {

std::string to_string(AttackKind kind) { return kind == AttackKind::fgsm ? "fgsm" : "pgd"; }

AttackKind parse_attack_kind(const std::string& name) {
  if (name == "fgsm") return AttackKind::fgsm;
  if (name == "pgd") return AttackKind::pgd;
  throw ArgumentError("unknown attack '" + name + "' (expected fgsm or pgd)");
}

void AttackConfig::validate() const {
  if (!std::isfinite(epsilon) || epsilon < 0) throw ArgumentError("attack epsilon must be >= 0");
  if (!(clip_lo < clip_hi)) throw ArgumentError("attack clip range needs lo < hi");
  if (kind == AttackKind::pgd) {
    if (!(alpha > 0)) throw ArgumentError("pgd alpha must be > 0");
    if (steps < 1) throw ArgumentError("pgd needs at least one step");
  }
}

}  // namespace quanos
