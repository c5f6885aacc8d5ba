#pragma once

// Shared helpers for the unit suites: random tensors, a finite-difference
// gradient oracle, scratch directories and tiny synthetic datasets.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "quanos/dataset.hpp"
#include "quanos/ops.hpp"
#include "quanos/rng.hpp"
#include "quanos/tensor.hpp"

namespace quanos::test {

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, rng::Engine& eng, double lo = -1.0, double hi = 1.0,
                        bool requires_grad = false) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng::uniform(eng, lo, hi));
  return Tensor<T>(shape, std::move(v), requires_grad);
}

inline std::size_t pick(rng::Engine& eng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng::below(eng, hi - lo + 1));
}

using DiffFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// Normwise relative error between reverse-mode and central-difference
// gradients of L = sum(f(inputs) * R) for a fixed random R, worst input.
inline double gradient_error(const DiffFn& f, const std::vector<Tensor<double>>& inputs, rng::Engine& eng,
                             double h = 1e-5) {
  std::vector<Tensor<double>> leaves;
  for (const auto& t : inputs) leaves.emplace_back(t.shape(), t.values(), true);
  const auto out = f(leaves);
  const auto weights = random_tensor<double>(out.shape(), eng);
  auto loss = ops::sum(ops::mul(out, weights));
  loss.backward();

  auto eval = [&](const std::vector<Tensor<double>>& xs) {
    NoGradGuard guard;
    const auto y = f(xs);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * weights[i];
    return s;
  };

  double worst = 0;
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    std::vector<double> numeric(inputs[which].size());
    for (std::size_t j = 0; j < numeric.size(); ++j) {
      auto probe = [&](double delta) {
        std::vector<Tensor<double>> xs;
        for (const auto& t : inputs) xs.emplace_back(t.shape(), t.values());
        xs[which].mutable_data()[j] += delta;
        return eval(xs);
      };
      numeric[j] = (probe(h) - probe(-h)) / (2 * h);
    }
    std::vector<double> analytic(numeric.size(), 0.0);
    if (leaves[which].has_grad()) std::copy(leaves[which].grad().begin(), leaves[which].grad().end(), analytic.begin());
    double diff = 0, na = 0, nn = 0;
    for (std::size_t j = 0; j < numeric.size(); ++j) {
      diff += (analytic[j] - numeric[j]) * (analytic[j] - numeric[j]);
      na += analytic[j] * analytic[j];
      nn += numeric[j] * numeric[j];
    }
    const double scale = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
    worst = std::max(worst, std::sqrt(diff) / scale);
  }
  return worst;
}

// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("quanos-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// n samples of a C x H x W image set whose class is encoded by which
// quadrant is bright; linearly separable and learnable in a few epochs.
inline Dataset quadrant_dataset(std::size_t n, std::uint64_t seed, std::size_t side = 8) {
  rng::Engine eng(seed);
  Dataset d;
  d.channels = 1;
  d.height = d.width = side;
  d.num_classes = 4;
  d.images.resize(n * side * side);
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(rng::below(eng, 4));
    d.labels[i] = c;
    const std::size_t r0 = (c / 2) * side / 2, c0 = (c % 2) * side / 2;
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const bool on = y >= r0 && y < r0 + side / 2 && x >= c0 && x < c0 + side / 2;
        const double base = on ? 0.75 : 0.15;
        d.images[i * side * side + y * side + x] = static_cast<float>(base + rng::uniform(eng, -0.1, 0.1));
      }
    }
  }
  return d;
}

}  // namespace quanos::test
