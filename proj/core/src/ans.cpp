#include "quanos/ans.hpp"

#include <algorithm>
#include <cmath>

#include "quanos/error.hpp"

namespace quanos {

double ans_ratio(std::span<const float> clean, std::span<const float> adversarial) {
  if (clean.size() != adversarial.size()) throw DimensionError("ans_ratio: activation sizes differ");
  double num = 0, den = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const double a = clean[i];
    const double d = static_cast<double>(adversarial[i]) - a;
    num += d * d;
    den += a * a;
  }
  return den == 0 ? 0.0 : std::sqrt(num) / std::sqrt(den);
}

std::map<int, double> mean_ans(const std::map<int, std::vector<std::vector<double>>>& per_sample) {
  std::map<int, double> out;
  for (const auto& [id, batches] : per_sample) {
    std::vector<double> all;
    for (const auto& b : batches) all.insert(all.end(), b.begin(), b.end());
    // Sorted summation keeps the mean independent of sample order.
    std::sort(all.begin(), all.end());
    double s = 0;
    for (double v : all) s += v;
    out[id] = all.empty() ? 0.0 : s / static_cast<double>(all.size());
  }
  return out;
}

AnsReport compute_ans(NetworkModel& model, const Dataset& samples, const AttackConfig& cfg, int epoch,
                      std::size_t batch_size) {
  if (!model.capture_enabled()) throw StateError("compute_ans needs activation capture enabled on the model");
  if (samples.size() == 0) throw ArgumentError("compute_ans needs at least one sample");
  cfg.validate();

  std::map<int, std::vector<std::vector<double>>> ratios;
  ForwardOptions opts;
  opts.param_grads = false;
  std::uint64_t batch = 0;
  for (std::size_t first = 0; first < samples.size(); first += batch_size, ++batch) {
    const std::size_t n = std::min(batch_size, samples.size() - first);
    const auto x = samples.slice_images(first, n);
    const auto y = std::span(samples.labels).subspan(first, n);

    std::map<int, Tensor<float>> clean;
    {
      NoGradGuard no_grad;
      model.forward(x, opts);
      clean = model.captured();
    }
    AttackConfig c = cfg;
    c.seed = cfg.seed ^ (0x9E3779B97F4A7C15ull * (batch + 1));
    const auto x_adv = attack(static_cast<const Classifier&>(model), x, y, c);
    {
      NoGradGuard no_grad;
      model.forward(x_adv, opts);
    }
    const auto& adv = model.captured();
    for (const auto& [id, a] : clean) {
      const auto& b = adv.at(id);
      const std::size_t units = a.size() / n;
      std::vector<double> r(n);
      for (std::size_t i = 0; i < n; ++i) {
        r[i] = ans_ratio(a.data().subspan(i * units, units), b.data().subspan(i * units, units));
      }
      ratios[id].push_back(std::move(r));
    }
  }

  AnsReport report;
  report.values = mean_ans(ratios);
  report.sample_count = samples.size();
  report.attack = cfg;
  report.epoch = epoch;
  return report;
}

std::vector<AblationPoint> ablation_curve(const NetworkModel& model, int layer, const Dataset& data,
                                          const AttackConfig& cfg, std::span<const double> grid, std::uint64_t seed) {
  std::vector<AblationPoint> out;
  for (double p : grid) {
    AblatedModel view(model, make_ablation(model, layer, p, seed));
    out.push_back({p, adversarial_accuracy(view, data, cfg)});
  }
  return out;
}

std::pair<int, int> ans_extremes(const AnsReport& report) {
  if (report.values.empty()) throw ArgumentError("empty ANS report");
  auto hi = report.values.begin(), lo = report.values.begin();
  for (auto it = report.values.begin(); it != report.values.end(); ++it) {
    if (it->second > hi->second) hi = it;
    if (it->second < lo->second) lo = it;
  }
  return {hi->first, lo->first};
}

}  // namespace quanos
