#include "quanos/adversary.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "quanos/error.hpp"
#include "quanos/ops.hpp"
#include "quanos/rng.hpp"

namespace quanos {

namespace {

constexpr float kInf = std::numeric_limits<float>::infinity();

// Largest float <= v (as a real number).
float float_at_most(double v) {
  float f = static_cast<float>(v);
  while (static_cast<double>(f) > v) f = std::nextafter(f, -kInf);
  return f;
}

float float_at_least(double v) {
  float f = static_cast<float>(v);
  while (static_cast<double>(f) < v) f = std::nextafter(f, kInf);
  return f;
}

struct Box {
  std::vector<float> lo, hi;
};

Box feasible_box(std::span<const float> x0, const AttackConfig& cfg) {
  const float clip_lo = float_at_least(cfg.clip_lo);
  const float clip_hi = float_at_most(cfg.clip_hi);
  Box b{std::vector<float>(x0.size()), std::vector<float>(x0.size())};
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const double c = x0[i];
    float lo = float_at_least(c - cfg.epsilon);
    float hi = float_at_most(c + cfg.epsilon);
    // Float rounding of c +- eps can land just outside the ball.
    while (c - static_cast<double>(lo) > cfg.epsilon) lo = std::nextafter(lo, kInf);
    while (static_cast<double>(hi) - c > cfg.epsilon) hi = std::nextafter(hi, -kInf);
    lo = std::max(lo, clip_lo);
    hi = std::min(hi, clip_hi);
    if (lo > hi) lo = hi = std::clamp(x0[i], clip_lo, clip_hi);
    b.lo[i] = lo;
    b.hi[i] = hi;
  }
  return b;
}

}  // namespace

Tensor<float> attack(const InputLoss& loss, const Tensor<float>& x, const AttackConfig& cfg) {
  cfg.validate();
  const auto x0 = x.data();
  const Box box = feasible_box(x0, cfg);
  const int steps = cfg.kind == AttackKind::fgsm ? 1 : cfg.steps;
  const float alpha = static_cast<float>(cfg.kind == AttackKind::fgsm ? cfg.epsilon : cfg.alpha);

  std::vector<float> cur(x0.begin(), x0.end());
  if (cfg.random_start && cfg.kind == AttackKind::pgd) {
    rng::Engine eng(cfg.seed);
    for (std::size_t i = 0; i < cur.size(); ++i) {
      const float r = static_cast<float>(rng::uniform(eng, -cfg.epsilon, cfg.epsilon));
      cur[i] = std::clamp(cur[i] + r, box.lo[i], box.hi[i]);
    }
  }
  if (cfg.epsilon == 0.0) return Tensor<float>(x.shape(), std::move(cur));

  for (int t = 0; t < steps; ++t) {
    Tensor<float> xt(x.shape(), cur, true);
    Tensor<float> l = loss(xt);
    std::vector<float> g(cur.size(), 0.0f);
    if (l.requires_grad()) {
      l.backward();
      if (xt.has_grad()) std::copy(xt.grad().begin(), xt.grad().end(), g.begin());
    }
    for (std::size_t i = 0; i < cur.size(); ++i) {
      if (!std::isfinite(g[i])) throw NumericError("attack gradient is not finite at element " + std::to_string(i));
      const float step = cfg.signed_steps ? alpha * static_cast<float>((g[i] > 0) - (g[i] < 0)) : alpha * g[i];
      cur[i] = std::clamp(cur[i] + step, box.lo[i], box.hi[i]);
    }
  }
  return Tensor<float>(x.shape(), std::move(cur));
}

Tensor<float> attack(const Classifier& model, const Tensor<float>& x, std::span<const int> labels,
                     const AttackConfig& cfg) {
  const float batch = static_cast<float>(labels.size());
  return attack(
      [&](const Tensor<float>& xi) {
        // Summed loss: every sample sees the gradient of its own loss.
        return ops::scale(ops::softmax_cross_entropy(model.logits(xi), labels), batch);
      },
      x, cfg);
}

Tensor<float> fgsm(const Classifier& model, const Tensor<float>& x, std::span<const int> labels,
                   const AttackConfig& cfg) {
  if (cfg.kind != AttackKind::fgsm) throw ArgumentError("fgsm called with a pgd config");
  return attack(model, x, labels, cfg);
}

Tensor<float> pgd(const Classifier& model, const Tensor<float>& x, std::span<const int> labels,
                  const AttackConfig& cfg) {
  if (cfg.kind != AttackKind::pgd) throw ArgumentError("pgd called with an fgsm config");
  return attack(model, x, labels, cfg);
}

namespace {

std::size_t count_correct(const Tensor<float>& logits, std::span<const int> labels) {
  const auto pred = ops::argmax_rows(logits);
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) n += pred[i] == labels[i];
  return n;
}

}  // namespace

double clean_accuracy(const Classifier& model, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) return 0.0;
  NoGradGuard no_grad;
  std::size_t correct = 0;
  for (std::size_t first = 0; first < data.size(); first += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - first);
    const auto x = data.slice_images(first, n);
    correct += count_correct(model.logits(x), std::span(data.labels).subspan(first, n));
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double adversarial_accuracy(const Classifier& model, const Dataset& data, const AttackConfig& cfg,
                            std::size_t batch_size) {
  cfg.validate();
  if (data.size() == 0) return 0.0;
  std::size_t correct = 0;
  std::uint64_t batch = 0;
  for (std::size_t first = 0; first < data.size(); first += batch_size, ++batch) {
    const std::size_t n = std::min(batch_size, data.size() - first);
    const auto x = data.slice_images(first, n);
    const auto y = std::span(data.labels).subspan(first, n);
    AttackConfig c = cfg;
    c.seed = cfg.seed ^ (0x9E3779B97F4A7C15ull * (batch + 1));
    const auto x_adv = attack(model, x, y, c);
    NoGradGuard no_grad;
    correct += count_correct(model.logits(x_adv), y);
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace quanos
