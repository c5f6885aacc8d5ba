#pragma once

// Differentiable layer ops over NCHW tensors. Each op records its own
// backward closure; see tensor.hpp for the graph mechanics.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "quanos/tensor.hpp"

namespace quanos::ops {

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
/// Elementwise product; shapes must match exactly.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T alpha);
template <typename T>
Tensor<T> square(const Tensor<T>& a);
template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);
/// Same storage order, new extents.
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);
/// [B, ...] -> [B, prod(...)].
template <typename T>
Tensor<T> flatten(const Tensor<T>& a);

/// Cross-correlation. input [B,I,H,W], kernel [O,I,k,k], bias [O] or empty.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding);

/// input [B,F], weight [C,F], bias [C] or empty -> [B,C].
template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

/// max(x, 0); the subgradient at exactly 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& x);

/// 2x2 window, stride 2. Odd trailing rows/columns are dropped.
template <typename T>
Tensor<T> max_pool2(const Tensor<T>& x);

/// Non-overlapping window x window mean (stride = window). Trailing
/// rows/columns that do not fill a window are dropped. window == 0 means
/// global average over the whole map.
template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, std::size_t window = 2);

template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

/// Per-channel batch normalization over [B,C,H,W] or [B,C]. Training mode
/// uses batch statistics (B >= 2 required) and updates `state` with an
/// exponential moving average; eval mode normalizes with the running stats.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, bool training);

/// Eval-mode batch norm that only reads the running statistics.
template <typename T>
Tensor<T> batch_norm_eval(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          const BatchNormState<T>& state);

/// Mean softmax cross-entropy over the batch. Returns a scalar.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// Applies `fn` to the values in the forward pass and passes the incoming
/// gradient through unchanged (straight-through estimator).
template <typename T>
Tensor<T> straight_through(const Tensor<T>& x,
                           const std::function<void(std::span<const T>, std::span<T>)>& fn,
                           const char* op_name = "straight_through");

/// Row-wise argmax of [B,C] logits.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits);

}  // namespace quanos::ops
