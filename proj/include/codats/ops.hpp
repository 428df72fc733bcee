#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "codats/rng.hpp"
#include "codats/tape.hpp"
#include "codats/tensor.hpp"

namespace codats {

enum class Mode { Train, Inference };

// Per-channel running statistics for batch normalization. Held outside the
// parameter groups; updated as a side effect of train-mode forward passes.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.99);
  T epsilon = T(1e-3);

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(Tensor<T>::zeros({channels})),
        running_var(Tensor<T>::full({channels}, T(1))) {}
};

namespace detail {

// c[m x k] += a[m x n] * b[k x n]^T
template <typename T>
void gemm_abT_accumulate(const T* a, const T* b, T* c, std::size_t m, std::size_t n,
                         std::size_t k) {
#pragma omp parallel for schedule(static) if (m * n * k > 65536)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    const T* arow = a + i * n;
    T* crow = c + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const T* brow = b + l * n;
      T acc = T(0);
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[l] += acc;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
template <typename T>
void gemm_aTb_accumulate(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                         std::size_t n) {
#pragma omp parallel for schedule(static) if (m * k * n > 65536)
  for (std::ptrdiff_t l = 0; l < static_cast<std::ptrdiff_t>(k); ++l) {
    T* crow = c + l * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = a[i * k + l];
      if (av == T(0)) continue;
      const T* brow = b + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Gathers the same-padded conv window matrix: cols[(b*H + t), (dk*Kin + c)].
template <typename T>
Tensor<T> im2col_same(const Tensor<T>& x, std::size_t kernel, std::size_t pad_left) {
  const std::size_t B = x.shape[0], H = x.shape[1], Kin = x.shape[2];
  Tensor<T> cols({B * H, kernel * Kin});
#pragma omp parallel for schedule(static) if (B * H * kernel * Kin > 65536)
  for (std::ptrdiff_t row = 0; row < static_cast<std::ptrdiff_t>(B * H); ++row) {
    const std::size_t b = static_cast<std::size_t>(row) / H;
    const std::size_t t = static_cast<std::size_t>(row) % H;
    T* dst = cols.data() + row * kernel * Kin;
    for (std::size_t dk = 0; dk < kernel; ++dk) {
      const std::ptrdiff_t src_t = static_cast<std::ptrdiff_t>(t + dk) -
                                   static_cast<std::ptrdiff_t>(pad_left);
      if (src_t >= 0 && src_t < static_cast<std::ptrdiff_t>(H)) {
        const T* src = x.data() + (b * H + src_t) * Kin;
        std::copy(src, src + Kin, dst + dk * Kin);
      }
      // pad region stays zero
    }
  }
  return cols;
}

}  // namespace detail

// ---- matmul --------------------------------------------------------------
// a[m x k] * b[k x n]; backward d/da = g*b^T, d/db = a^T*g.

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.val(a);
  const Tensor<T>& bv = tape.val(b);
  require_rank(av, 2, "matmul");
  require_rank(bv, 2, "matmul");
  if (av.shape[1] != bv.shape[0]) {
    throw std::invalid_argument("matmul: inner extents " + std::to_string(av.shape[1]) + " vs " +
                                std::to_string(bv.shape[0]));
  }
  const std::size_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  Tensor<T> out({m, n});
  gemm_accumulate(av.data(), bv.data(), out.data(), m, k, n);
  Var y = tape.push(std::move(out), "matmul");
  tape.set_backward(y, [a, b, y, m, k, n](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(y);
    detail::gemm_abT_accumulate(g.data(), tp.val(b).data(), tp.grad(a).data(), m, n, k);
    detail::gemm_aTb_accumulate(tp.val(a).data(), g.data(), tp.grad(b).data(), m, k, n);
  });
  return y;
}

// ---- conv1d, same padding --------------------------------------------------
// Cross-correlation, stride 1, no kernel flip, no bias. x is B x H x Kin,
// w is k x Kin x F; output keeps the time extent H. Even kernels pad
// (k-1)/2 left and k/2 right.

template <typename T>
Var conv1d_same(Tape<T>& tape, Var x, Var w) {
  const Tensor<T>& xv = tape.val(x);
  const Tensor<T>& wv = tape.val(w);
  require_rank(xv, 3, "conv1d_same");
  require_rank(wv, 3, "conv1d_same");
  if (xv.shape[2] != wv.shape[1]) {
    throw std::invalid_argument("conv1d_same: input channels " + std::to_string(xv.shape[2]) +
                                " vs kernel channels " + std::to_string(wv.shape[1]));
  }
  const std::size_t B = xv.shape[0], H = xv.shape[1], Kin = xv.shape[2];
  const std::size_t kernel = wv.shape[0], F = wv.shape[2];
  const std::size_t pad_left = (kernel - 1) / 2;

  Tensor<T> cols = detail::im2col_same(xv, kernel, pad_left);
  Tensor<T> out({B, H, F});
  // w's row-major layout is already (kernel*Kin) x F
  gemm_accumulate(cols.data(), wv.data(), out.data(), B * H, kernel * Kin, F);
  Var y = tape.push(std::move(out), "conv1d_same");
  tape.set_backward(y, [x, w, y, B, H, Kin, kernel, F, pad_left,
                        cols = std::move(cols)](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(y);
    // dw = cols^T * g
    detail::gemm_aTb_accumulate(cols.data(), g.data(), tp.grad(w).data(), B * H, kernel * Kin, F);
    // dcols = g * w^T, then scatter-add back onto the time axis
    Tensor<T> dcols({B * H, kernel * Kin});
    detail::gemm_abT_accumulate(g.data(), tp.val(w).data(), dcols.data(), B * H, F, kernel * Kin);
    Tensor<T>& dx = tp.grad(x);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = 0; t < H; ++t) {
        const T* src = dcols.data() + (b * H + t) * kernel * Kin;
        for (std::size_t dk = 0; dk < kernel; ++dk) {
          const std::ptrdiff_t dst_t = static_cast<std::ptrdiff_t>(t + dk) -
                                       static_cast<std::ptrdiff_t>(pad_left);
          if (dst_t < 0 || dst_t >= static_cast<std::ptrdiff_t>(H)) continue;
          T* dst = dx.data() + (b * H + dst_t) * Kin;
          const T* s = src + dk * Kin;
          for (std::size_t c = 0; c < Kin; ++c) dst[c] += s[c];
        }
      }
    }
  });
  return y;
}

// ---- relu ------------------------------------------------------------------

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.val(x);
  Tensor<T> out(xv.shape);
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  Var y = tape.push(std::move(out), "relu");
  tape.set_backward(y, [x, y](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(y);
    const Tensor<T>& xv = tp.val(x);
    Tensor<T>& dx = tp.grad(x);
    // subgradient 0 at x == 0
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (xv[i] > T(0)) dx[i] += g[i];
    }
  });
  return y;
}

// ---- batchnorm1d -------------------------------------------------------------
// Normalizes each channel of a B x H x C tensor over the B*H axis. Train mode
// uses batch statistics (population variance) and updates the running state;
// inference mode uses the running statistics.

template <typename T>
Var batchnorm1d(Tape<T>& tape, Var x, Var gamma, Var beta, BatchNormState<T>& state, Mode mode) {
  const Tensor<T>& xv = tape.val(x);
  require_rank(xv, 3, "batchnorm1d");
  const std::size_t B = xv.shape[0], H = xv.shape[1], C = xv.shape[2];
  require_shape(tape.val(gamma), {C}, "batchnorm1d gamma");
  require_shape(tape.val(beta), {C}, "batchnorm1d beta");
  require_shape(state.running_mean, {C}, "batchnorm1d running_mean");
  const std::size_t m = B * H;

  const Tensor<T>& gv = tape.val(gamma);
  const Tensor<T>& bv = tape.val(beta);

  if (mode == Mode::Train) {
    if (m < 2) throw std::invalid_argument("batchnorm1d: train mode needs B*H >= 2");
    Tensor<T> mean({C}), var({C});
    for (std::size_t c = 0; c < C; ++c) {
      T acc = T(0);
      for (std::size_t i = 0; i < m; ++i) acc += xv[i * C + c];
      mean[c] = acc / static_cast<T>(m);
    }
    for (std::size_t c = 0; c < C; ++c) {
      T acc = T(0);
      for (std::size_t i = 0; i < m; ++i) {
        const T d = xv[i * C + c] - mean[c];
        acc += d * d;
      }
      var[c] = acc / static_cast<T>(m);
    }
    Tensor<T> inv_std({C});
    for (std::size_t c = 0; c < C; ++c) {
      const T denom = var[c] + state.epsilon;
      if (!(denom > T(0))) throw std::runtime_error("batchnorm1d: non-positive variance plus epsilon");
      inv_std[c] = T(1) / std::sqrt(denom);
    }
    Tensor<T> xhat(xv.shape), out(xv.shape);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t c = 0; c < C; ++c) {
        const T h = (xv[i * C + c] - mean[c]) * inv_std[c];
        xhat[i * C + c] = h;
        out[i * C + c] = gv[c] * h + bv[c];
      }
    }
    for (std::size_t c = 0; c < C; ++c) {
      state.running_mean[c] = state.momentum * state.running_mean[c] + (T(1) - state.momentum) * mean[c];
      state.running_var[c] = state.momentum * state.running_var[c] + (T(1) - state.momentum) * var[c];
    }
    Var y = tape.push(std::move(out), "batchnorm1d");
    tape.set_backward(y, [x, gamma, beta, y, m, C, xhat = std::move(xhat),
                          inv_std = std::move(inv_std)](Tape<T>& tp) {
      const Tensor<T>& g = tp.grad(y);
      const Tensor<T>& gv = tp.val(gamma);
      Tensor<T>& dx = tp.grad(x);
      Tensor<T>& dgamma = tp.grad(gamma);
      Tensor<T>& dbeta = tp.grad(beta);
      for (std::size_t c = 0; c < C; ++c) {
        T sum_g = T(0), sum_gx = T(0);
        for (std::size_t i = 0; i < m; ++i) {
          sum_g += g[i * C + c];
          sum_gx += g[i * C + c] * xhat[i * C + c];
        }
        dgamma[c] += sum_gx;
        dbeta[c] += sum_g;
        const T mean_g = sum_g / static_cast<T>(m);
        const T mean_gx = sum_gx / static_cast<T>(m);
        const T scale = gv[c] * inv_std[c];
        for (std::size_t i = 0; i < m; ++i) {
          dx[i * C + c] += scale * (g[i * C + c] - mean_g - xhat[i * C + c] * mean_gx);
        }
      }
    });
    return y;
  }

  // inference: affine transform by running statistics
  Tensor<T> inv_std({C});
  for (std::size_t c = 0; c < C; ++c) {
    const T denom = state.running_var[c] + state.epsilon;
    if (!(denom > T(0))) throw std::runtime_error("batchnorm1d: non-positive variance plus epsilon");
    inv_std[c] = T(1) / std::sqrt(denom);
  }
  Tensor<T> out(xv.shape);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t c = 0; c < C; ++c) {
      out[i * C + c] = gv[c] * (xv[i * C + c] - state.running_mean[c]) * inv_std[c] + bv[c];
    }
  }
  Tensor<T> rmean = state.running_mean;
  Var y = tape.push(std::move(out), "batchnorm1d");
  tape.set_backward(y, [x, gamma, beta, y, m, C, inv_std = std::move(inv_std),
                        rmean = std::move(rmean)](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(y);
    const Tensor<T>& gv = tp.val(gamma);
    const Tensor<T>& xv = tp.val(x);
    Tensor<T>& dx = tp.grad(x);
    Tensor<T>& dgamma = tp.grad(gamma);
    Tensor<T>& dbeta = tp.grad(beta);
    for (std::size_t c = 0; c < C; ++c) {
      const T scale = gv[c] * inv_std[c];
      T sum_g = T(0), sum_gx = T(0);
      for (std::size_t i = 0; i < m; ++i) {
        sum_g += g[i * C + c];
        sum_gx += g[i * C + c] * (xv[i * C + c] - rmean[c]) * inv_std[c];
        dx[i * C + c] += scale * g[i * C + c];
      }
      dgamma[c] += sum_gx;
      dbeta[c] += sum_g;
    }
  });
  return y;
}

// ---- global average pooling --------------------------------------------------
// Mean over the time axis: B x H x C -> B x C. Output is length-independent.

template <typename T>
Var global_avg_pool(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.val(x);
  require_rank(xv, 3, "global_avg_pool");
  const std::size_t B = xv.shape[0], H = xv.shape[1], C = xv.shape[2];
  Tensor<T> out({B, C});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < H; ++t) {
      for (std::size_t c = 0; c < C; ++c) out.at2(b, c) += xv.at3(b, t, c);
    }
  }
  const T inv_h = T(1) / static_cast<T>(H);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= inv_h;
  Var y = tape.push(std::move(out), "global_avg_pool");
  tape.set_backward(y, [x, y, B, H, C, inv_h](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(y);
    Tensor<T>& dx = tp.grad(x);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = 0; t < H; ++t) {
        for (std::size_t c = 0; c < C; ++c) dx.at3(b, t, c) += g.at2(b, c) * inv_h;
      }
    }
  });
  return y;
}

// ---- dropout ------------------------------------------------------------------
// Train mode zeroes each element independently with probability rate and
// scales survivors by 1/(1-rate); the mask is drawn elementwise in row-major
// order. Inference mode is the identity.

template <typename T>
Var dropout(Tape<T>& tape, Var x, double rate, Rng& rng, Mode mode) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  const Tensor<T>& xv = tape.val(x);
  if (mode == Mode::Inference || rate == 0.0) {
    Tensor<T> out = xv;
    Var y = tape.push(std::move(out), "dropout");
    tape.set_backward(y, [x, y](Tape<T>& tp) { tp.accumulate(x, tp.grad(y)); });
    return y;
  }
  const T keep_scale = T(1.0 / (1.0 - rate));
  Tensor<T> mult(xv.shape);
  for (std::size_t i = 0; i < mult.numel(); ++i) {
    mult[i] = rng.uniform() < rate ? T(0) : keep_scale;
  }
  Tensor<T> out(xv.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] * mult[i];
  Var y = tape.push(std::move(out), "dropout");
  tape.set_backward(y, [x, y, mult = std::move(mult)](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(y);
    Tensor<T>& dx = tp.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g[i] * mult[i];
  });
  return y;
}

// ---- softmax --------------------------------------------------------------------
// Row-wise softmax of B x L logits, differentiable.

template <typename T>
Var softmax(Tape<T>& tape, Var logits) {
  const Tensor<T>& zv = tape.val(logits);
  require_rank(zv, 2, "softmax");
  const std::size_t B = zv.shape[0], L = zv.shape[1];
  Tensor<T> probs({B, L});
  for (std::size_t b = 0; b < B; ++b) {
    T mx = zv.at2(b, 0);
    for (std::size_t j = 1; j < L; ++j) mx = std::max(mx, zv.at2(b, j));
    T sum = T(0);
    for (std::size_t j = 0; j < L; ++j) {
      const T e = std::exp(zv.at2(b, j) - mx);
      probs.at2(b, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < L; ++j) probs.at2(b, j) /= sum;
  }
  Var y = tape.push(std::move(probs), "softmax");
  tape.set_backward(y, [logits, y, B, L](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(y);
    const Tensor<T>& p = tp.val(y);
    Tensor<T>& dz = tp.grad(logits);
    for (std::size_t b = 0; b < B; ++b) {
      T inner = T(0);
      for (std::size_t j = 0; j < L; ++j) inner += g.at2(b, j) * p.at2(b, j);
      for (std::size_t j = 0; j < L; ++j) {
        dz.at2(b, j) += p.at2(b, j) * (g.at2(b, j) - inner);
      }
    }
  });
  return y;
}

// ---- fused softmax cross entropy ---------------------------------------------
// Numerically stable log-softmax cross entropy averaged over the batch; the
// row softmax probabilities are exposed alongside the loss node.

template <typename T>
struct XentResult {
  Var loss;
  Tensor<T> probs;
};

template <typename T>
XentResult<T> softmax_xent(Tape<T>& tape, Var logits, const std::vector<int>& labels) {
  const Tensor<T>& zv = tape.val(logits);
  require_rank(zv, 2, "softmax_xent");
  const std::size_t B = zv.shape[0], L = zv.shape[1];
  if (L < 2) throw std::invalid_argument("softmax_xent: need at least 2 classes");
  if (labels.size() != B) {
    throw std::invalid_argument("softmax_xent: " + std::to_string(labels.size()) +
                                " labels for batch " + std::to_string(B));
  }
  for (int lab : labels) {
    if (lab < 0 || static_cast<std::size_t>(lab) >= L) {
      throw std::invalid_argument("softmax_xent: label " + std::to_string(lab) +
                                  " out of range [0, " + std::to_string(L) + ")");
    }
  }
  Tensor<T> probs({B, L});
  T loss_acc = T(0);
  for (std::size_t b = 0; b < B; ++b) {
    T mx = zv.at2(b, 0);
    for (std::size_t j = 1; j < L; ++j) mx = std::max(mx, zv.at2(b, j));
    T sum = T(0);
    for (std::size_t j = 0; j < L; ++j) {
      const T e = std::exp(zv.at2(b, j) - mx);
      probs.at2(b, j) = e;
      sum += e;
    }
    const T lse = std::log(sum) + mx;
    for (std::size_t j = 0; j < L; ++j) probs.at2(b, j) /= sum;
    loss_acc += lse - zv.at2(b, static_cast<std::size_t>(labels[b]));
  }
  Tensor<T> probs_out = probs;
  Var y = tape.push(Tensor<T>::scalar(loss_acc / static_cast<T>(B)), "softmax_xent");
  tape.set_backward(y, [logits, y, B, L, labels, probs = std::move(probs)](Tape<T>& tp) {
    const T g = tp.grad(y)[0];
    Tensor<T>& dz = tp.grad(logits);
    const T inv_b = T(1) / static_cast<T>(B);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t j = 0; j < L; ++j) {
        const T delta = (static_cast<std::size_t>(labels[b]) == j) ? T(1) : T(0);
        dz.at2(b, j) += g * (probs.at2(b, j) - delta) * inv_b;
      }
    }
  });
  return {y, std::move(probs_out)};
}

// ---- gradient reversal ------------------------------------------------------
// Forward is the bit-exact identity; backward multiplies the upstream
// gradient by -lambda.

template <typename T>
Var grl(Tape<T>& tape, Var x, T lambda) {
  if (lambda < T(0)) throw std::invalid_argument("grl: lambda must be non-negative");
  Tensor<T> out = tape.val(x);
  Var y = tape.push(std::move(out), "grl");
  tape.set_backward(y, [x, y, lambda](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(y);
    Tensor<T>& dx = tp.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += -lambda * g[i];
  });
  return y;
}

// ---- mean over batch ----------------------------------------------------------
// B x L -> L, arithmetic mean over the batch axis.

template <typename T>
Var mean_over_batch(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.val(x);
  require_rank(xv, 2, "mean_over_batch");
  const std::size_t B = xv.shape[0], L = xv.shape[1];
  Tensor<T> out({L});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < L; ++j) out[j] += xv.at2(b, j);
  }
  const T inv_b = T(1) / static_cast<T>(B);
  for (std::size_t j = 0; j < L; ++j) out[j] *= inv_b;
  Var y = tape.push(std::move(out), "mean_over_batch");
  tape.set_backward(y, [x, y, B, L, inv_b](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(y);
    Tensor<T>& dx = tp.grad(x);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t j = 0; j < L; ++j) dx.at2(b, j) += g[j] * inv_b;
    }
  });
  return y;
}

// ---- KL divergence of a known distribution against a prediction ----------------
// sum_y p_y * ln(p_y / q_y) with 0*ln(0/.) = 0; q is clamped to [1e-6, 1]
// before the log and the divergence is differentiable with respect to q only.
// A clamped prediction identical to p contributes no loss and no gradient.

inline constexpr double kKlClampFloor = 1e-6;

inline void validate_distribution(const std::vector<double>& p, const char* where) {
  double sum = 0.0;
  for (double v : p) {
    if (v < 0.0) throw std::invalid_argument(std::string(where) + ": negative probability");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw std::invalid_argument(std::string(where) + ": probabilities sum to " +
                                std::to_string(sum) + ", not 1");
  }
}

template <typename T>
Var kl_true_vs_pred(Tape<T>& tape, const std::vector<double>& p_true, Var q) {
  validate_distribution(p_true, "kl_true_vs_pred");
  const Tensor<T>& qv = tape.val(q);
  require_rank(qv, 1, "kl_true_vs_pred");
  const std::size_t L = qv.shape[0];
  if (p_true.size() != L) {
    throw std::invalid_argument("kl_true_vs_pred: distribution length " +
                                std::to_string(p_true.size()) + " vs prediction length " +
                                std::to_string(L));
  }
  std::vector<T> clamped(L);
  bool identical = true;
  for (std::size_t j = 0; j < L; ++j) {
    clamped[j] = std::clamp(qv[j], T(kKlClampFloor), T(1));
    if (clamped[j] != static_cast<T>(p_true[j])) identical = false;
  }
  double acc = 0.0;
  for (std::size_t j = 0; j < L; ++j) {
    if (p_true[j] > 0.0) {
      acc += p_true[j] * (std::log(p_true[j]) - std::log(static_cast<double>(clamped[j])));
    }
  }
  Var y = tape.push(Tensor<T>::scalar(identical ? T(0) : static_cast<T>(acc)), "kl_true_vs_pred");
  tape.set_backward(y, [q, y, L, p_true, clamped = std::move(clamped), identical](Tape<T>& tp) {
    if (identical) return;
    const T g = tp.grad(y)[0];
    const Tensor<T>& qv = tp.val(q);
    Tensor<T>& dq = tp.grad(q);
    for (std::size_t j = 0; j < L; ++j) {
      if (p_true[j] <= 0.0) continue;
      if (qv[j] < T(kKlClampFloor) || qv[j] > T(1)) continue;  // clamp is flat outside
      dq[j] += g * (-static_cast<T>(p_true[j]) / clamped[j]);
    }
  });
  return y;
}

// ---- small structural helpers ---------------------------------------------

// Contiguous row slice [begin, end) of the leading axis.
template <typename T>
Var slice_rows(Tape<T>& tape, Var x, std::size_t begin, std::size_t end) {
  const Tensor<T>& xv = tape.val(x);
  if (xv.rank() < 1 || begin >= end || end > xv.shape[0]) {
    throw std::invalid_argument("slice_rows: bad range [" + std::to_string(begin) + ", " +
                                std::to_string(end) + ") for shape " + shape_str(xv.shape));
  }
  Shape out_shape = xv.shape;
  out_shape[0] = end - begin;
  const std::size_t row = xv.numel() / xv.shape[0];
  Tensor<T> out(out_shape);
  std::copy(xv.data() + begin * row, xv.data() + end * row, out.data());
  Var y = tape.push(std::move(out), "slice_rows");
  tape.set_backward(y, [x, y, begin, row](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(y);
    Tensor<T>& dx = tp.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) dx[begin * row + i] += g[i];
  });
  return y;
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.val(a);
  const Tensor<T>& bv = tape.val(b);
  if (!av.same_shape(bv)) {
    throw std::invalid_argument("add: shapes " + shape_str(av.shape) + " vs " +
                                shape_str(bv.shape));
  }
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
  Var y = tape.push(std::move(out), "add");
  tape.set_backward(y, [a, b, y](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(y);
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
  return y;
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.val(a);
  const Tensor<T>& bv = tape.val(b);
  if (!av.same_shape(bv)) {
    throw std::invalid_argument("mul: shapes " + shape_str(av.shape) + " vs " +
                                shape_str(bv.shape));
  }
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  Var y = tape.push(std::move(out), "mul");
  tape.set_backward(y, [a, b, y](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(y);
    const Tensor<T>& av = tp.val(a);
    const Tensor<T>& bv = tp.val(b);
    Tensor<T>& da = tp.grad(a);
    for (std::size_t i = 0; i < g.numel(); ++i) da[i] += g[i] * bv[i];
    Tensor<T>& db = tp.grad(b);
    for (std::size_t i = 0; i < g.numel(); ++i) db[i] += g[i] * av[i];
  });
  return y;
}

template <typename T>
Var scale(Tape<T>& tape, Var x, T c) {
  const Tensor<T>& xv = tape.val(x);
  Tensor<T> out(xv.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = c * xv[i];
  Var y = tape.push(std::move(out), "scale");
  tape.set_backward(y, [x, y, c](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(y);
    Tensor<T>& dx = tp.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += c * g[i];
  });
  return y;
}

// Row-wise bias add: x[B x N] + b[N].
template <typename T>
Var add_rowwise(Tape<T>& tape, Var x, Var bias) {
  const Tensor<T>& xv = tape.val(x);
  const Tensor<T>& bv = tape.val(bias);
  require_rank(xv, 2, "add_rowwise");
  require_shape(bv, {xv.shape[1]}, "add_rowwise bias");
  const std::size_t B = xv.shape[0], N = xv.shape[1];
  Tensor<T> out(xv.shape);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < N; ++j) out.at2(b, j) = xv.at2(b, j) + bv[j];
  }
  Var y = tape.push(std::move(out), "add_rowwise");
  tape.set_backward(y, [x, bias, y, B, N](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(y);
    tp.accumulate(x, g);
    Tensor<T>& db = tp.grad(bias);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t j = 0; j < N; ++j) db[j] += g.at2(b, j);
    }
  });
  return y;
}

}  // namespace codats
