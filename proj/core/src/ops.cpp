#include "quanos/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace quanos::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(const Tensor<T>& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
  }
}

template <typename T>
bool wants_grad(const std::shared_ptr<Node<T>>& n) {
  return n->requires_grad;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result<T>(a.shape(), std::move(out), "add", {a.node(), b.node()}, [](Node<T>& n) {
    for (auto& p : n.parents) {
      if (!wants_grad(p)) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result<T>(a.shape(), std::move(out), "sub", {a.node(), b.node()}, [](Node<T>& n) {
    if (wants_grad(n.parents[0])) {
      auto& g = n.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (wants_grad(n.parents[1])) {
      auto& g = n.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {a.node(), b.node()}, [](Node<T>& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (wants_grad(pa)) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb->value[i];
    }
    if (wants_grad(pb)) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa->value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T alpha) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * a[i];
  return detail::make_result<T>(a.shape(), std::move(out), "scale", {a.node()}, [alpha](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += alpha * n.grad[i];
  });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * a[i];
  return detail::make_result<T>(a.shape(), std::move(out), "square", {a.node()}, [](Node<T>& n) {
    auto& p = n.parents[0];
    auto& g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(2) * p->value[i] * n.grad[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  return detail::make_result<T>(Shape{1}, {total}, "sum", {a.node()}, [](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (auto& v : g) v += n.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.empty()) throw ContractError("mean of an empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return detail::make_result<T>(std::move(shape), a.values(), "reshape", {a.node()}, [](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& a) {
  if (a.rank() < 2) throw DimensionError("flatten needs a batch axis, got " + shape_str(a.shape()));
  const std::size_t batch = a.dim(0);
  std::size_t features = 1;
  for (std::size_t i = 1; i < a.rank(); ++i) features *= a.dim(i);
  return reshape(a, Shape{batch, features});
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (stride == 0) throw ArgumentError("conv2d: stride must be positive");
  const std::size_t B = input.dim(0), I = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t O = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != I) {
    throw DimensionError("conv2d: input has " + std::to_string(I) + " channels but kernel expects " +
                         std::to_string(kernel.dim(1)));
  }
  if (kernel.dim(3) != k) throw DimensionError("conv2d: kernel must be square, got " + shape_str(kernel.shape()));
  const bool has_bias = !bias.empty();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != O)) {
    throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(O) + " output channels");
  }
  if (H + 2 * padding < k || W + 2 * padding < k) {
    throw DimensionError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                         shape_str(input.shape()));
  }
  const std::size_t Ho = (H + 2 * padding - k) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - k) / stride + 1;
  const std::size_t rows = I * k * k, cols = Ho * Wo;
  const auto pad = static_cast<std::ptrdiff_t>(padding);

  std::vector<T> col(B * rows * cols);
  const T* x = input.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    T* cb = col.data() + b * rows * cols;
    for (std::size_t c = 0; c < I; ++c) {
      const T* xc = x + (b * I + c) * H * W;
      for (std::size_t ki = 0; ki < k; ++ki) {
        for (std::size_t kj = 0; kj < k; ++kj) {
          T* row = cb + ((c * k + ki) * k + kj) * cols;
          for (std::size_t oh = 0; oh < Ho; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + ki) - pad;
            for (std::size_t ow = 0; ow < Wo; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + kj) - pad;
              const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(H) &&
                                  iw < static_cast<std::ptrdiff_t>(W);
              row[oh * Wo + ow] = inside ? xc[ih * static_cast<std::ptrdiff_t>(W) + iw] : T(0);
            }
          }
        }
      }
    }
  }

  std::vector<T> out(B * O * cols);
  CMapMat<T> wmat(kernel.data().data(), static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(rows));
  for (std::size_t b = 0; b < B; ++b) {
    CMapMat<T> cm(col.data() + b * rows * cols, rows, cols);
    MapMat<T> om(out.data() + b * O * cols, O, cols);
    om.noalias() = wmat * cm;
    if (has_bias) {
      for (std::size_t o = 0; o < O; ++o) om.row(o).array() += bias[o];
    }
  }

  std::vector<std::shared_ptr<Node<T>>> parents{input.node(), kernel.node()};
  if (has_bias) parents.push_back(bias.node());
  const bool keep_cols = kernel.requires_grad();
  auto backward = [B, I, H, W, O, k, stride, pad, Ho, Wo, rows, cols, has_bias,
                   col = keep_cols ? std::move(col) : std::vector<T>{}](Node<T>& n) {
    auto& in = n.parents[0];
    auto& ker = n.parents[1];
    if (wants_grad(ker)) {
      auto& gw = ker->grad_buffer();
      MapMat<T> gwm(gw.data(), O, rows);
      for (std::size_t b = 0; b < B; ++b) {
        CMapMat<T> gy(n.grad.data() + b * O * cols, O, cols);
        CMapMat<T> cm(col.data() + b * rows * cols, rows, cols);
        gwm.noalias() += gy * cm.transpose();
      }
    }
    if (has_bias && wants_grad(n.parents[2])) {
      auto& gb = n.parents[2]->grad_buffer();
      for (std::size_t b = 0; b < B; ++b) {
        CMapMat<T> gy(n.grad.data() + b * O * cols, O, cols);
        for (std::size_t o = 0; o < O; ++o) gb[o] += gy.row(o).sum();
      }
    }
    if (wants_grad(in)) {
      auto& gx = in->grad_buffer();
      CMapMat<T> wm(ker->value.data(), O, rows);
      RowMat<T> dcol(rows, cols);
      for (std::size_t b = 0; b < B; ++b) {
        CMapMat<T> gy(n.grad.data() + b * O * cols, O, cols);
        dcol.noalias() = wm.transpose() * gy;
        for (std::size_t c = 0; c < I; ++c) {
          T* gxc = gx.data() + (b * I + c) * H * W;
          for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
              const T* row = dcol.data() + ((c * k + ki) * k + kj) * cols;
              for (std::size_t oh = 0; oh < Ho; ++oh) {
                const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + ki) - pad;
                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t ow = 0; ow < Wo; ++ow) {
                  const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + kj) - pad;
                  if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                  gxc[ih * static_cast<std::ptrdiff_t>(W) + iw] += row[oh * Wo + ow];
                }
              }
            }
          }
        }
      }
    }
  };
  return detail::make_result<T>(Shape{B, O, Ho, Wo}, std::move(out), "conv2d", std::move(parents),
                                std::move(backward));
}

template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(input, 2, "dense input");
  require_rank(weight, 2, "dense weight");
  const std::size_t B = input.dim(0), F = input.dim(1), C = weight.dim(0);
  if (weight.dim(1) != F) {
    throw DimensionError("dense: input has " + std::to_string(F) + " features but weight expects " +
                         std::to_string(weight.dim(1)));
  }
  const bool has_bias = !bias.empty();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != C)) {
    throw DimensionError("dense: bias shape " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(C) + " outputs");
  }
  std::vector<T> out(B * C);
  {
    CMapMat<T> xm(input.data().data(), B, F);
    CMapMat<T> wm(weight.data().data(), C, F);
    MapMat<T> om(out.data(), B, C);
    om.noalias() = xm * wm.transpose();
    if (has_bias) {
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) om(b, c) += bias[c];
    }
  }
  std::vector<std::shared_ptr<Node<T>>> parents{input.node(), weight.node()};
  if (has_bias) parents.push_back(bias.node());
  return detail::make_result<T>(Shape{B, C}, std::move(out), "dense", std::move(parents),
                                [B, F, C, has_bias](Node<T>& n) {
    auto& in = n.parents[0];
    auto& w = n.parents[1];
    CMapMat<T> gy(n.grad.data(), B, C);
    if (wants_grad(in)) {
      MapMat<T> gx(in->grad_buffer().data(), B, F);
      gx.noalias() += gy * CMapMat<T>(w->value.data(), C, F);
    }
    if (wants_grad(w)) {
      MapMat<T> gw(w->grad_buffer().data(), C, F);
      gw.noalias() += gy.transpose() * CMapMat<T>(in->value.data(), B, F);
    }
    if (has_bias && wants_grad(n.parents[2])) {
      auto& gb = n.parents[2]->grad_buffer();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) gb[c] += gy(b, c);
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return detail::make_result<T>(x.shape(), std::move(out), "relu", {x.node()}, [](Node<T>& n) {
    auto& p = n.parents[0];
    auto& g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p->value[i] > T(0)) g[i] += n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> max_pool2(const Tensor<T>& x) {
  require_rank(x, 4, "max_pool2");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < 2 || W < 2) throw DimensionError("max_pool2: spatial extent below 2 in " + shape_str(x.shape()));
  const std::size_t Ho = H / 2, Wo = W / 2;
  std::vector<T> out(B * C * Ho * Wo);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T* src = x.data().data() + bc * H * W;
    for (std::size_t oh = 0; oh < Ho; ++oh) {
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        std::size_t best = (2 * oh) * W + 2 * ow;
        for (std::size_t di = 0; di < 2; ++di) {
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = (2 * oh + di) * W + 2 * ow + dj;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const std::size_t o = bc * Ho * Wo + oh * Wo + ow;
        out[o] = src[best];
        arg[o] = bc * H * W + best;
      }
    }
  }
  return detail::make_result<T>(Shape{B, C, Ho, Wo}, std::move(out), "max_pool2", {x.node()},
                                [arg = std::move(arg)](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += n.grad[i];
  });
}

template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, std::size_t window) {
  require_rank(x, 4, "avg_pool");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const bool global = window == 0;
  const std::size_t wh = global ? H : window, ww = global ? W : window;
  if (wh == 0 || ww == 0 || H < wh || W < ww) {
    throw DimensionError("avg_pool: window " + std::to_string(window) + " does not fit " + shape_str(x.shape()));
  }
  const std::size_t Ho = H / wh, Wo = W / ww;
  const T inv = T(1) / static_cast<T>(wh * ww);
  std::vector<T> out(B * C * Ho * Wo, T(0));
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T* src = x.data().data() + bc * H * W;
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        T acc = T(0);
        for (std::size_t di = 0; di < wh; ++di)
          for (std::size_t dj = 0; dj < ww; ++dj) acc += src[(oh * wh + di) * W + ow * ww + dj];
        out[bc * Ho * Wo + oh * Wo + ow] = acc * inv;
      }
  }
  return detail::make_result<T>(Shape{B, C, Ho, Wo}, std::move(out), "avg_pool", {x.node()},
                                [B, C, H, W, Ho, Wo, wh, ww, inv](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t bc = 0; bc < B * C; ++bc)
      for (std::size_t oh = 0; oh < Ho; ++oh)
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          const T gv = n.grad[bc * Ho * Wo + oh * Wo + ow] * inv;
          for (std::size_t di = 0; di < wh; ++di)
            for (std::size_t dj = 0; dj < ww; ++dj) g[bc * H * W + (oh * wh + di) * W + ow * ww + dj] += gv;
        }
  });
}

namespace {

template <typename T>
Tensor<T> batch_norm_impl(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          const BatchNormState<T>& stats, BatchNormState<T>* update) {
  const bool training = update != nullptr;
  const BatchNormState<T>& state = stats;
  if (x.rank() != 2 && x.rank() != 4) throw DimensionError("batch_norm: expected rank 2 or 4, got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1);
  const std::size_t S = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (gamma.size() != C || beta.size() != C || state.running_mean.size() != C || state.running_var.size() != C) {
    throw DimensionError("batch_norm: parameters do not match " + std::to_string(C) + " channels");
  }
  if (training && B < 2) throw ContractError("batch_norm: training mode needs a batch of at least 2");

  const std::size_t m = B * S;
  std::vector<T> mu(C), invstd(C);
  if (training) {
    for (std::size_t c = 0; c < C; ++c) {
      T acc = T(0);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t s = 0; s < S; ++s) acc += x[(b * C + c) * S + s];
      mu[c] = acc / static_cast<T>(m);
      T var = T(0);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t s = 0; s < S; ++s) {
          const T d = x[(b * C + c) * S + s] - mu[c];
          var += d * d;
        }
      const T biased = var / static_cast<T>(m);
      invstd[c] = T(1) / std::sqrt(biased + state.eps);
      const T unbiased = var / static_cast<T>(m - 1);
      update->running_mean[c] = (T(1) - state.momentum) * state.running_mean[c] + state.momentum * mu[c];
      update->running_var[c] = (T(1) - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = state.running_mean[c];
      invstd[c] = T(1) / std::sqrt(state.running_var[c] + state.eps);
    }
  }

  std::vector<T> xhat(x.size()), out(x.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t i = (b * C + c) * S + s;
        xhat[i] = (x[i] - mu[c]) * invstd[c];
        out[i] = gamma[c] * xhat[i] + beta[c];
      }

  return detail::make_result<T>(
      x.shape(), std::move(out), "batch_norm", {x.node(), gamma.node(), beta.node()},
      [B, C, S, m, training, invstd = std::move(invstd), xhat = std::move(xhat)](Node<T>& n) {
        auto& px = n.parents[0];
        auto& pg = n.parents[1];
        auto& pb = n.parents[2];
        std::vector<T> sum_dy(C, T(0)), sum_dy_xhat(C, T(0));
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t s = 0; s < S; ++s) {
              const std::size_t i = (b * C + c) * S + s;
              sum_dy[c] += n.grad[i];
              sum_dy_xhat[c] += n.grad[i] * xhat[i];
            }
        if (wants_grad(pg)) {
          auto& g = pg->grad_buffer();
          for (std::size_t c = 0; c < C; ++c) g[c] += sum_dy_xhat[c];
        }
        if (wants_grad(pb)) {
          auto& g = pb->grad_buffer();
          for (std::size_t c = 0; c < C; ++c) g[c] += sum_dy[c];
        }
        if (wants_grad(px)) {
          auto& g = px->grad_buffer();
          const T mm = static_cast<T>(m);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
              const T gam = pg->value[c];
              for (std::size_t s = 0; s < S; ++s) {
                const std::size_t i = (b * C + c) * S + s;
                if (training) {
                  // d/dx of gamma * (x - mean) / std with batch statistics.
                  g[i] += gam * invstd[c] / mm * (mm * n.grad[i] - sum_dy[c] - xhat[i] * sum_dy_xhat[c]);
                } else {
                  g[i] += gam * invstd[c] * n.grad[i];
                }
              }
            }
        }
      });
}

}  // namespace

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, bool training) {
  return batch_norm_impl(x, gamma, beta, state, training ? &state : nullptr);
}

template <typename T>
Tensor<T> batch_norm_eval(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          const BatchNormState<T>& state) {
  return batch_norm_impl<T>(x, gamma, beta, state, nullptr);
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  if (labels.size() != B) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(B));
  }
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= C) {
      throw IndexError("label " + std::to_string(labels[b]) + " out of range for " + std::to_string(C) + " classes");
    }
  }
  std::vector<T> prob(B * C);
  T loss = T(0);
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = logits.data().data() + b * C;
    const T mx = *std::max_element(row, row + C);
    T z = T(0);
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t c = 0; c < C; ++c) prob[b * C + c] = std::exp(row[c] - lse);
    loss += lse - row[labels[b]];
  }
  if (B > 0) loss /= static_cast<T>(B);
  std::vector<int> y(labels.begin(), labels.end());
  return detail::make_result<T>(Shape{1}, {loss}, "softmax_cross_entropy", {logits.node()},
                                [B, C, prob = std::move(prob), y = std::move(y)](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    const T s = n.grad[0] / static_cast<T>(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const T target = static_cast<int>(c) == y[b] ? T(1) : T(0);
        g[b * C + c] += s * (prob[b * C + c] - target);
      }
  });
}

template <typename T>
Tensor<T> straight_through(const Tensor<T>& x,
                           const std::function<void(std::span<const T>, std::span<T>)>& fn,
                           const char* op_name) {
  std::vector<T> out(x.size());
  fn(x.data(), out);
  return detail::make_result<T>(x.shape(), std::move(out), op_name, {x.node()}, [](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  require_rank(logits, 2, "argmax_rows");
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  std::vector<int> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = logits.data().data() + b * C;
    out[b] = static_cast<int>(std::max_element(row, row + C) - row);
  }
  return out;
}

#define QUANOS_INSTANTIATE_OPS(T)                                                                       \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> scale(const Tensor<T>&, T);                                                        \
  template Tensor<T> square(const Tensor<T>&);                                                          \
  template Tensor<T> sum(const Tensor<T>&);                                                             \
  template Tensor<T> mean(const Tensor<T>&);                                                            \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                  \
  template Tensor<T> flatten(const Tensor<T>&);                                                         \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t); \
  template Tensor<T> dense(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> relu(const Tensor<T>&);                                                            \
  template Tensor<T> max_pool2(const Tensor<T>&);                                                       \
  template Tensor<T> avg_pool(const Tensor<T>&, std::size_t);                                           \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormState<T>&, bool); \
  template Tensor<T> batch_norm_eval(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const BatchNormState<T>&); \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>);                     \
  template Tensor<T> straight_through(const Tensor<T>&,                                                 \
                                      const std::function<void(std::span<const T>, std::span<T>)>&,    \
                                      const char*);                                                     \
  template std::vector<int> argmax_rows(const Tensor<T>&);

QUANOS_INSTANTIATE_OPS(float)
QUANOS_INSTANTIATE_OPS(double)

#undef QUANOS_INSTANTIATE_OPS

}  // namespace quanos::ops
