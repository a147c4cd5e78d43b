// Forward operations with reverse-mode rules.
//
// Reductions (matmul, conv, pooling, sums) accumulate in double regardless of
// the storage scalar. Broadcasting is deliberately narrow: operands must have
// equal rank and may only stretch size-1 dims of one side; anything else is a
// loud dimension error.
#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <optional>
#include <vector>

#include "mtseg/tensor.hpp"

namespace mtseg {

namespace detail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[m×n] (+)= op(A)·op(B), accumulating through double.
template <typename T>
void gemm(bool ta, bool tb, Index m, Index n, Index k, const T* a, const T* b, T* c,
          bool accumulate) {
  using DM = EMat<double>;
  Eigen::Map<const EMat<T>> A(a, ta ? k : m, ta ? m : k);
  Eigen::Map<const EMat<T>> B(b, tb ? n : k, tb ? k : n);
  DM Ad = ta ? DM(A.template cast<double>().transpose()) : DM(A.template cast<double>());
  DM Bd = tb ? DM(B.template cast<double>().transpose()) : DM(B.template cast<double>());
  DM Cd(m, n);
  Cd.noalias() = Ad * Bd;
  Eigen::Map<EMat<T>> C(c, m, n);
  if (accumulate)
    C += Cd.template cast<T>();
  else
    C = Cd.template cast<T>();
}

// Shared plumbing: outputs require grad only under an active tape fed by at
// least one grad-carrying input.
template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> value, std::vector<NodePtr<T>> inputs,
                  std::function<void(Node<T>&)> backprop) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (auto* tape = Tape<T>::active()) {
    bool rg = false;
    for (const auto& in : inputs)
      if (in && in->requires_grad) rg = true;
    if (rg) {
      node->requires_grad = true;
      node->inputs = std::move(inputs);
      node->backprop = std::move(backprop);
      tape->record(node);
    }
  }
  return Tensor<T>::from_node(node);
}

template <typename T>
void accumulate_into(Node<T>& in, const std::vector<double>& acc) {
  in.ensure_grad();
  for (std::size_t i = 0; i < acc.size(); ++i) in.grad[i] += static_cast<T>(acc[i]);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError(str_cat("matmul expects rank-2 operands, got ", shape_str(a.shape()),
                                 " and ", shape_str(b.shape())));
  if (a.dim(1) != b.dim(0))
    throw DimensionError(str_cat("matmul: inner dimensions disagree: ", shape_str(a.shape()),
                                 " vs ", shape_str(b.shape())));
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m * n));
  detail::gemm(false, false, m, n, k, a.values().data(), b.values().data(), out.data(), false);

  return detail::make_op<T>(
      {m, n}, std::move(out), {a.node(), b.node()}, [m, n, k](Node<T>& o) {
        auto& na = *o.inputs[0];
        auto& nb = *o.inputs[1];
        if (na.requires_grad) {
          na.ensure_grad();
          detail::gemm(false, true, m, k, n, o.grad.data(), nb.value.data(), na.grad.data(), true);
        }
        if (nb.requires_grad) {
          nb.ensure_grad();
          detail::gemm(true, false, k, n, m, na.value.data(), o.grad.data(), nb.grad.data(), true);
        }
      });
}

// y = x·Wᵀ + b with x:[n×in], W:[out×in], b:[out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2)
    throw DimensionError(str_cat("linear expects rank-2 x and W, got ", shape_str(x.shape()),
                                 " and ", shape_str(w.shape())));
  const Index n = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (w.dim(1) != in)
    throw DimensionError(str_cat("linear: W ", shape_str(w.shape()), " does not match x ",
                                 shape_str(x.shape())));
  if (b.numel() != out)
    throw DimensionError(str_cat("linear: bias ", shape_str(b.shape()), " does not match W ",
                                 shape_str(w.shape())));
  std::vector<T> y(static_cast<std::size_t>(n * out));
  detail::gemm(false, true, n, out, in, x.values().data(), w.values().data(), y.data(), false);
  const auto& bias = b.values();
  for (Index r = 0; r < n; ++r)
    for (Index c = 0; c < out; ++c) y[static_cast<std::size_t>(r * out + c)] += bias[c];

  return detail::make_op<T>(
      {n, out}, std::move(y), {x.node(), w.node(), b.node()}, [n, in, out](Node<T>& o) {
        auto& gx = *o.inputs[0];
        auto& gw = *o.inputs[1];
        auto& gb = *o.inputs[2];
        if (gx.requires_grad) {
          gx.ensure_grad();
          detail::gemm(false, false, n, in, out, o.grad.data(), gw.value.data(), gx.grad.data(),
                       true);
        }
        if (gw.requires_grad) {
          gw.ensure_grad();
          detail::gemm(true, false, out, in, n, o.grad.data(), gx.value.data(), gw.grad.data(),
                       true);
        }
        if (gb.requires_grad) {
          gb.ensure_grad();
          for (Index c = 0; c < out; ++c) {
            double acc = 0.0;
            for (Index r = 0; r < n; ++r) acc += static_cast<double>(o.grad[r * out + c]);
            gb.grad[c] += static_cast<T>(acc);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation with zero padding
// ---------------------------------------------------------------------------

inline Index conv_out_extent(Index in, Index k, Index stride, Index pad) {
  const Index span = in + 2 * pad - k;
  if (span < 0)
    throw ConfigError(str_cat("conv2d: kernel ", k, " exceeds padded extent ", in + 2 * pad));
  if (span % stride != 0)
    throw ConfigError(str_cat("conv2d: non-integral output extent for input ", in, ", kernel ", k,
                              ", stride ", stride, ", pad ", pad));
  return span / stride + 1;
}

namespace detail {

// Patch matrix for convolution: rows are output positions, columns the
// flattened (ci, ky, kx) receptive field, zeros where the window leaves the
// input.
template <typename T>
std::vector<T> im2col(const T* x, Index ci, Index h, Index w, Index kh, Index kw, Index stride,
                      Index pad, Index oh, Index ow) {
  std::vector<T> cols(static_cast<std::size_t>(oh * ow * ci * kh * kw), T(0));
  const Index patch = ci * kh * kw;
  for (Index i = 0; i < oh; ++i) {
    for (Index j = 0; j < ow; ++j) {
      T* row = cols.data() + (i * ow + j) * patch;
      for (Index d = 0; d < ci; ++d) {
        const T* xc = x + d * h * w;
        for (Index ky = 0; ky < kh; ++ky) {
          const Index iy = i * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const Index x0 = j * stride - pad;
          const Index k0 = std::max<Index>(0, -x0);
          const Index k1 = std::min<Index>(kw, w - x0);
          T* dst = row + (d * kh + ky) * kw;
          const T* src = xc + iy * w + x0;
          for (Index kx = k0; kx < k1; ++kx) dst[kx] = src[kx];
        }
      }
    }
  }
  return cols;
}

// Adjoint of im2col: scatter-add patch rows back into image positions.
template <typename T>
void col2im_accumulate(const std::vector<T>& cols, Index ci, Index h, Index w, Index kh, Index kw,
                       Index stride, Index pad, Index oh, Index ow, std::vector<double>& gx) {
  const Index patch = ci * kh * kw;
  for (Index i = 0; i < oh; ++i) {
    for (Index j = 0; j < ow; ++j) {
      const T* row = cols.data() + (i * ow + j) * patch;
      for (Index d = 0; d < ci; ++d) {
        for (Index ky = 0; ky < kh; ++ky) {
          const Index iy = i * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (Index kx = 0; kx < kw; ++kx) {
            const Index ix = j * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            gx[(d * h + iy) * w + ix] += static_cast<double>(row[(d * kh + ky) * kw + kx]);
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Index stride,
                 Index pad) {
  if (x.rank() != 3 || w.rank() != 4)
    throw DimensionError(str_cat("conv2d expects x:[C,H,W] and w:[Co,Ci,kh,kw], got ",
                                 shape_str(x.shape()), " and ", shape_str(w.shape())));
  if (stride <= 0) throw ConfigError("conv2d: stride must be positive");
  if (pad < 0) throw ConfigError("conv2d: pad must be non-negative");
  const Index ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const Index co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != ci)
    throw DimensionError(str_cat("conv2d: weight expects ", w.dim(1), " input channels, x has ",
                                 ci));
  if (b.numel() != co)
    throw DimensionError(str_cat("conv2d: bias ", shape_str(b.shape()), " does not match ", co,
                                 " output channels"));
  const Index oh = conv_out_extent(h, kh, stride, pad);
  const Index ow = conv_out_extent(wd, kw, stride, pad);
  const Index positions = oh * ow;
  const Index patch = ci * kh * kw;

  auto cols = detail::im2col(x.values().data(), ci, h, wd, kh, kw, stride, pad, oh, ow);
  std::vector<T> y(static_cast<std::size_t>(co * positions));
  // y[co x positions] = W[co x patch] * cols^T
  detail::gemm(false, true, co, positions, patch, w.values().data(), cols.data(), y.data(),
               false);
  const T* bv = b.values().data();
  for (Index c = 0; c < co; ++c)
    for (Index p = 0; p < positions; ++p) y[static_cast<std::size_t>(c * positions + p)] += bv[c];

  return detail::make_op<T>(
      {co, oh, ow}, std::move(y), {x.node(), w.node(), b.node()},
      [ci, h, wd, co, kh, kw, oh, ow, stride, pad, positions, patch](Node<T>& o) {
        auto& nx = *o.inputs[0];
        auto& nw = *o.inputs[1];
        auto& nb = *o.inputs[2];
        const T* g = o.grad.data();
        if (nb.requires_grad) {
          std::vector<double> gb(nb.value.size(), 0.0);
          for (Index c = 0; c < co; ++c) {
            double acc = 0.0;
            for (Index p = 0; p < positions; ++p)
              acc += static_cast<double>(g[c * positions + p]);
            gb[c] = acc;
          }
          detail::accumulate_into(nb, gb);
        }
        if (nw.requires_grad) {
          auto cols = detail::im2col(nx.value.data(), ci, h, wd, kh, kw, stride, pad, oh, ow);
          nw.ensure_grad();
          // gw[co x patch] += g[co x positions] * cols[positions x patch]
          detail::gemm(false, false, co, patch, positions, g, cols.data(), nw.grad.data(), true);
        }
        if (nx.requires_grad) {
          // gcols[positions x patch] = g^T[positions x co] * W[co x patch]
          std::vector<T> gcols(static_cast<std::size_t>(positions * patch));
          detail::gemm(true, false, positions, patch, co, g, nw.value.data(), gcols.data(),
                       false);
          std::vector<double> gx(nx.value.size(), 0.0);
          detail::col2im_accumulate(gcols, ci, h, wd, kh, kw, stride, pad, oh, ow, gx);
          detail::accumulate_into(nx, gx);
        }
      });
}

enum class PadMode { Zero, Replicate };

// Depthwise convolution of every channel with one fixed [kh×kw] kernel,
// stride 1, same-size output. The kernel is a constant, not a parameter.
// Replicate padding clamps border reads to the image, so zero-sum kernels
// respond with exact zeros on constant channels everywhere.
template <typename T>
Tensor<T> depthwise_fixed_conv(const Tensor<T>& x, const std::vector<T>& kernel, Index kh,
                               Index kw, PadMode pad = PadMode::Zero) {
  if (x.rank() != 3)
    throw DimensionError(str_cat("depthwise conv expects [C,H,W], got ", shape_str(x.shape())));
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const Index ph = kh / 2, pw = kw / 2;
  const bool rep = pad == PadMode::Replicate;
  std::vector<T> y(x.values().size());
  const T* xv = x.values().data();
  for (Index d = 0; d < c; ++d) {
    const T* xc = xv + d * h * w;
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        double acc = 0.0;
        for (Index ky = 0; ky < kh; ++ky) {
          Index iy = i - ph + ky;
          if (rep)
            iy = std::clamp<Index>(iy, 0, h - 1);
          else if (iy < 0 || iy >= h)
            continue;
          for (Index kx = 0; kx < kw; ++kx) {
            Index ix = j - pw + kx;
            if (rep)
              ix = std::clamp<Index>(ix, 0, w - 1);
            else if (ix < 0 || ix >= w)
              continue;
            acc += static_cast<double>(xc[iy * w + ix]) *
                   static_cast<double>(kernel[ky * kw + kx]);
          }
        }
        y[static_cast<std::size_t>((d * h + i) * w + j)] = static_cast<T>(acc);
      }
    }
  }
  return detail::make_op<T>(
      x.shape(), std::move(y), {x.node()}, [kernel, kh, kw, c, h, w, rep](Node<T>& o) {
        auto& nx = *o.inputs[0];
        if (!nx.requires_grad) return;
        const Index ph = kh / 2, pw = kw / 2;
        std::vector<double> gx(nx.value.size(), 0.0);
        const T* g = o.grad.data();
        for (Index d = 0; d < c; ++d) {
          for (Index i = 0; i < h; ++i) {
            for (Index j = 0; j < w; ++j) {
              const double go = static_cast<double>(g[(d * h + i) * w + j]);
              for (Index ky = 0; ky < kh; ++ky) {
                Index iy = i - ph + ky;
                if (rep)
                  iy = std::clamp<Index>(iy, 0, h - 1);
                else if (iy < 0 || iy >= h)
                  continue;
                for (Index kx = 0; kx < kw; ++kx) {
                  Index ix = j - pw + kx;
                  if (rep)
                    ix = std::clamp<Index>(ix, 0, w - 1);
                  else if (ix < 0 || ix >= w)
                    continue;
                  gx[(d * h + iy) * w + ix] += go * static_cast<double>(kernel[ky * kw + kx]);
                }
              }
            }
          }
        }
        detail::accumulate_into(nx, gx);
      });
}

// ---------------------------------------------------------------------------
// softmax / layer norm / activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank())
    throw DimensionError(str_cat("softmax: axis ", axis, " invalid for ", shape_str(x.shape())));
  const Shape& s = x.shape();
  Index inner = 1, outer = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= s[i];
  const Index n = s[axis];

  std::vector<T> y(x.values().size());
  const T* xv = x.values().data();
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (Index i = 0; i < n; ++i)
        mx = std::max(mx, static_cast<double>(xv[base + i * inner]));
      double sum = 0.0;
      for (Index i = 0; i < n; ++i) sum += std::exp(static_cast<double>(xv[base + i * inner]) - mx);
      for (Index i = 0; i < n; ++i)
        y[static_cast<std::size_t>(base + i * inner)] =
            static_cast<T>(std::exp(static_cast<double>(xv[base + i * inner]) - mx) / sum);
    }
  }

  return detail::make_op<T>(
      x.shape(), std::move(y), {x.node()}, [outer, inner, n](Node<T>& o) {
        auto& nx = *o.inputs[0];
        if (!nx.requires_grad) return;
        std::vector<double> gx(nx.value.size(), 0.0);
        const T* g = o.grad.data();
        const T* yv = o.value.data();
        for (Index ou = 0; ou < outer; ++ou) {
          for (Index in = 0; in < inner; ++in) {
            const Index base = ou * n * inner + in;
            double dot = 0.0;
            for (Index i = 0; i < n; ++i)
              dot += static_cast<double>(g[base + i * inner]) *
                     static_cast<double>(yv[base + i * inner]);
            for (Index i = 0; i < n; ++i) {
              const Index p = base + i * inner;
              gx[p] = static_cast<double>(yv[p]) * (static_cast<double>(g[p]) - dot);
            }
          }
        }
        detail::accumulate_into(nx, gx);
      });
}

// Zero-mean unit-variance over the last dimension, then affine.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps = 1e-5) {
  if (x.rank() < 1) throw DimensionError("layer_norm: input must have rank >= 1");
  const Index d = x.dim(x.rank() - 1);
  if (d == 0) throw DimensionError("layer_norm: zero-length normalized dimension");
  if (gain.numel() != d || bias.numel() != d)
    throw DimensionError(str_cat("layer_norm: affine ", shape_str(gain.shape()), "/",
                                 shape_str(bias.shape()), " does not match last dim ", d));
  const Index rows = x.numel() / d;
  std::vector<T> y(x.values().size());
  const T* xv = x.values().data();
  const T* gv = gain.values().data();
  const T* bv = bias.values().data();
  for (Index r = 0; r < rows; ++r) {
    const T* row = xv + r * d;
    double mean = 0.0;
    for (Index i = 0; i < d; ++i) mean += static_cast<double>(row[i]);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (Index i = 0; i < d; ++i) {
      const double c = static_cast<double>(row[i]) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (Index i = 0; i < d; ++i) {
      const double xhat = (static_cast<double>(row[i]) - mean) * inv;
      y[static_cast<std::size_t>(r * d + i)] =
          static_cast<T>(xhat * static_cast<double>(gv[i]) + static_cast<double>(bv[i]));
    }
  }

  return detail::make_op<T>(
      x.shape(), std::move(y), {x.node(), gain.node(), bias.node()}, [rows, d, eps](Node<T>& o) {
        auto& nx = *o.inputs[0];
        auto& ng = *o.inputs[1];
        auto& nb = *o.inputs[2];
        const T* xv2 = nx.value.data();
        const T* gv2 = ng.value.data();
        const T* g = o.grad.data();
        std::vector<double> gx(nx.value.size(), 0.0);
        std::vector<double> gg(ng.value.size(), 0.0);
        std::vector<double> gb(nb.value.size(), 0.0);
        std::vector<double> xhat(static_cast<std::size_t>(d));
        for (Index r = 0; r < rows; ++r) {
          const T* row = xv2 + r * d;
          const T* gr = g + r * d;
          double mean = 0.0;
          for (Index i = 0; i < d; ++i) mean += static_cast<double>(row[i]);
          mean /= static_cast<double>(d);
          double var = 0.0;
          for (Index i = 0; i < d; ++i) {
            const double c = static_cast<double>(row[i]) - mean;
            var += c * c;
          }
          var /= static_cast<double>(d);
          const double inv = 1.0 / std::sqrt(var + eps);
          double m1 = 0.0, m2 = 0.0;  // means of γ·g and γ·g·x̂
          for (Index i = 0; i < d; ++i) {
            xhat[i] = (static_cast<double>(row[i]) - mean) * inv;
            const double gg_i = static_cast<double>(gv2[i]) * static_cast<double>(gr[i]);
            m1 += gg_i;
            m2 += gg_i * xhat[i];
            gg[i] += static_cast<double>(gr[i]) * xhat[i];
            gb[i] += static_cast<double>(gr[i]);
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          for (Index i = 0; i < d; ++i) {
            const double gg_i = static_cast<double>(gv2[i]) * static_cast<double>(gr[i]);
            gx[r * d + i] = (gg_i - m1 - xhat[i] * m2) * inv;
          }
        }
        if (nx.requires_grad) detail::accumulate_into(nx, gx);
        if (ng.requires_grad) detail::accumulate_into(ng, gg);
        if (nb.requires_grad) detail::accumulate_into(nb, gb);
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> y(x.values().size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = static_cast<double>(x.values()[i]);
    y[i] = static_cast<T>(v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                   : std::exp(v) / (1.0 + std::exp(v)));
  }
  return detail::make_op<T>(x.shape(), std::move(y), {x.node()}, [](Node<T>& o) {
    auto& nx = *o.inputs[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    for (std::size_t i = 0; i < o.value.size(); ++i) {
      const double s = static_cast<double>(o.value[i]);
      nx.grad[i] += static_cast<T>(static_cast<double>(o.grad[i]) * s * (1.0 - s));
    }
  });
}

// slope 0 gives max(0, x) exactly.
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope = 0.01) {
  std::vector<T> y(x.values().size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const T v = x.values()[i];
    y[i] = v > T(0) ? v : static_cast<T>(slope * static_cast<double>(v));
  }
  return detail::make_op<T>(x.shape(), std::move(y), {x.node()}, [slope](Node<T>& o) {
    auto& nx = *o.inputs[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    for (std::size_t i = 0; i < o.value.size(); ++i)
      nx.grad[i] += nx.value[i] > T(0)
                        ? o.grad[i]
                        : static_cast<T>(slope * static_cast<double>(o.grad[i]));
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return leaky_relu(x, 0.0);
}

// ---------------------------------------------------------------------------
// pooling / upsampling
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 3)
    throw DimensionError(str_cat("global_avg_pool expects [C,H,W], got ", shape_str(x.shape())));
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const Index hw = h * w;
  std::vector<T> y(static_cast<std::size_t>(c));
  for (Index d = 0; d < c; ++d) {
    double acc = 0.0;
    const T* p = x.values().data() + d * hw;
    for (Index i = 0; i < hw; ++i) acc += static_cast<double>(p[i]);
    y[static_cast<std::size_t>(d)] = static_cast<T>(acc / static_cast<double>(hw));
  }
  return detail::make_op<T>({c, 1, 1}, std::move(y), {x.node()}, [c, hw](Node<T>& o) {
    auto& nx = *o.inputs[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    for (Index d = 0; d < c; ++d) {
      const T g = static_cast<T>(static_cast<double>(o.grad[d]) / static_cast<double>(hw));
      T* p = nx.grad.data() + d * hw;
      for (Index i = 0; i < hw; ++i) p[i] += g;
    }
  });
}

namespace detail {
// Box sum over a zero-padded k×k neighborhood, divided by k². The operator is
// its own adjoint, so forward and backward share it.
template <typename T>
std::vector<T> box_mean(const T* x, Index c, Index h, Index w, Index k) {
  const Index r = k / 2;
  const double inv = 1.0 / static_cast<double>(k * k);
  std::vector<T> y(static_cast<std::size_t>(c * h * w));
  for (Index d = 0; d < c; ++d) {
    const T* xc = x + d * h * w;
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        double acc = 0.0;
        const Index y0 = std::max<Index>(0, i - r), y1 = std::min(h - 1, i + r);
        const Index x0 = std::max<Index>(0, j - r), x1 = std::min(w - 1, j + r);
        for (Index iy = y0; iy <= y1; ++iy)
          for (Index ix = x0; ix <= x1; ++ix) acc += static_cast<double>(xc[iy * w + ix]);
        y[static_cast<std::size_t>((d * h + i) * w + j)] = static_cast<T>(acc * inv);
      }
    }
  }
  return y;
}
}  // namespace detail

template <typename T>
Tensor<T> local_avg_pool(const Tensor<T>& x, Index k) {
  if (x.rank() != 3)
    throw DimensionError(str_cat("local_avg_pool expects [C,H,W], got ", shape_str(x.shape())));
  if (k <= 0 || k % 2 == 0)
    throw ConfigError(str_cat("local_avg_pool: window must be odd and positive, got ", k));
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto y = detail::box_mean(x.values().data(), c, h, w, k);
  return detail::make_op<T>(x.shape(), std::move(y), {x.node()}, [c, h, w, k](Node<T>& o) {
    auto& nx = *o.inputs[0];
    if (!nx.requires_grad) return;
    auto back = detail::box_mean(o.grad.data(), c, h, w, k);
    nx.ensure_grad();
    for (std::size_t i = 0; i < back.size(); ++i) nx.grad[i] += back[i];
  });
}

// Bilinear upsampling with half-pixel centers: source coordinate for output
// index o is (o + 0.5)/f - 0.5, clamped to the valid range.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, Index factor) {
  if (x.rank() != 3)
    throw DimensionError(str_cat("upsample_bilinear expects [C,H,W], got ", shape_str(x.shape())));
  if (factor < 1) throw ConfigError(str_cat("upsample_bilinear: factor must be >= 1, got ", factor));
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const Index oh = h * factor, ow = w * factor;

  auto axis_weights = [factor](Index in, Index out) {
    std::vector<std::array<double, 3>> ws(static_cast<std::size_t>(out));  // {i0, i1, frac}
    for (Index o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
      src = std::min(std::max(src, 0.0), static_cast<double>(in - 1));
      const Index i0 = static_cast<Index>(std::floor(src));
      const Index i1 = std::min(i0 + 1, in - 1);
      ws[static_cast<std::size_t>(o)] = {static_cast<double>(i0), static_cast<double>(i1),
                                         src - static_cast<double>(i0)};
    }
    return ws;
  };
  const auto wy = axis_weights(h, oh);
  const auto wx = axis_weights(w, ow);

  std::vector<T> y(static_cast<std::size_t>(c * oh * ow));
  const T* xv = x.values().data();
  for (Index d = 0; d < c; ++d) {
    const T* xc = xv + d * h * w;
    for (Index i = 0; i < oh; ++i) {
      const Index y0 = static_cast<Index>(wy[i][0]), y1 = static_cast<Index>(wy[i][1]);
      const double fy = wy[i][2];
      for (Index j = 0; j < ow; ++j) {
        const Index x0 = static_cast<Index>(wx[j][0]), x1 = static_cast<Index>(wx[j][1]);
        const double fx = wx[j][2];
        const double v = (1.0 - fy) * ((1.0 - fx) * static_cast<double>(xc[y0 * w + x0]) +
                                       fx * static_cast<double>(xc[y0 * w + x1])) +
                         fy * ((1.0 - fx) * static_cast<double>(xc[y1 * w + x0]) +
                               fx * static_cast<double>(xc[y1 * w + x1]));
        y[static_cast<std::size_t>((d * oh + i) * ow + j)] = static_cast<T>(v);
      }
    }
  }

  return detail::make_op<T>(
      {c, oh, ow}, std::move(y), {x.node()}, [c, h, w, oh, ow, wy, wx](Node<T>& o) {
        auto& nx = *o.inputs[0];
        if (!nx.requires_grad) return;
        std::vector<double> gx(nx.value.size(), 0.0);
        const T* g = o.grad.data();
        for (Index d = 0; d < c; ++d) {
          for (Index i = 0; i < oh; ++i) {
            const Index y0 = static_cast<Index>(wy[i][0]), y1 = static_cast<Index>(wy[i][1]);
            const double fy = wy[i][2];
            for (Index j = 0; j < ow; ++j) {
              const Index x0 = static_cast<Index>(wx[j][0]), x1 = static_cast<Index>(wx[j][1]);
              const double fx = wx[j][2];
              const double go = static_cast<double>(g[(d * oh + i) * ow + j]);
              gx[(d * h + y0) * w + x0] += go * (1.0 - fy) * (1.0 - fx);
              gx[(d * h + y0) * w + x1] += go * (1.0 - fy) * fx;
              gx[(d * h + y1) * w + x0] += go * fy * (1.0 - fx);
              gx[(d * h + y1) * w + x1] += go * fy * fx;
            }
          }
        }
        detail::accumulate_into(nx, gx);
      });
}

// ---------------------------------------------------------------------------
// elementwise and shape suite
// ---------------------------------------------------------------------------

namespace detail {

// Validates the narrow broadcast rule and returns per-dim strides with zeros
// on stretched dims. Only one operand may carry size-1 stretches.
template <typename T>
void binary_broadcast_plan(const Tensor<T>& a, const Tensor<T>& b, const char* opname,
                           Shape& out_shape, std::vector<Index>& sa, std::vector<Index>& sb) {
  if (a.rank() != b.rank())
    throw DimensionError(str_cat(opname, ": rank mismatch between ", shape_str(a.shape()),
                                 " and ", shape_str(b.shape())));
  const int r = a.rank();
  bool a_stretch = false, b_stretch = false;
  out_shape.resize(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    const Index da = a.dim(i), db = b.dim(i);
    if (da == db) {
      out_shape[i] = da;
    } else if (da == 1) {
      a_stretch = true;
      out_shape[i] = db;
    } else if (db == 1) {
      b_stretch = true;
      out_shape[i] = da;
    } else {
      throw DimensionError(str_cat(opname, ": incompatible shapes ", shape_str(a.shape()), " and ",
                                   shape_str(b.shape())));
    }
  }
  if (a_stretch && b_stretch)
    throw DimensionError(str_cat(opname, ": two-sided broadcast between ", shape_str(a.shape()),
                                 " and ", shape_str(b.shape()), " is not supported"));
  auto full_sa = row_major_strides(a.shape());
  auto full_sb = row_major_strides(b.shape());
  sa.assign(static_cast<std::size_t>(r), 0);
  sb.assign(static_cast<std::size_t>(r), 0);
  for (int i = 0; i < r; ++i) {
    sa[i] = a.dim(i) == 1 && out_shape[i] != 1 ? 0 : full_sa[i];
    sb[i] = b.dim(i) == 1 && out_shape[i] != 1 ? 0 : full_sb[i];
  }
}

// Walk an output shape applying f(out_flat, a_flat, b_flat).
template <typename F>
void broadcast_walk(const Shape& out_shape, const std::vector<Index>& sa,
                    const std::vector<Index>& sb, F&& f) {
  const Index total = numel(out_shape);
  const int r = static_cast<int>(out_shape.size());
  std::vector<Index> idx(static_cast<std::size_t>(r), 0);
  Index ia = 0, ib = 0;
  for (Index flat = 0; flat < total; ++flat) {
    f(flat, ia, ib);
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out_shape[d]) break;
      ia -= sa[d] * out_shape[d];
      ib -= sb[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

template <typename T>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* opname, bool is_mul) {
  Shape out_shape;
  std::vector<Index> sa, sb;
  binary_broadcast_plan(a, b, opname, out_shape, sa, sb);
  std::vector<T> y(static_cast<std::size_t>(numel(out_shape)));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  broadcast_walk(out_shape, sa, sb, [&](Index o, Index ia, Index ib) {
    y[static_cast<std::size_t>(o)] = is_mul ? av[ia] * bv[ib] : av[ia] + bv[ib];
  });
  return make_op<T>(
      out_shape, std::move(y), {a.node(), b.node()},
      [out_shape, sa, sb, is_mul](Node<T>& o) {
        auto& na = *o.inputs[0];
        auto& nb = *o.inputs[1];
        std::vector<double> ga(na.value.size(), 0.0), gb(nb.value.size(), 0.0);
        const T* g = o.grad.data();
        const T* av2 = na.value.data();
        const T* bv2 = nb.value.data();
        broadcast_walk(out_shape, sa, sb, [&](Index out, Index ia, Index ib) {
          const double go = static_cast<double>(g[out]);
          if (is_mul) {
            ga[ia] += go * static_cast<double>(bv2[ib]);
            gb[ib] += go * static_cast<double>(av2[ia]);
          } else {
            ga[ia] += go;
            gb[ib] += go;
          }
        });
        if (na.requires_grad) accumulate_into(na, ga);
        if (nb.requires_grad) accumulate_into(nb, gb);
      });
}

}  // namespace detail

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, "mul", true);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, "add", false);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: empty input list");
  const int r = parts[0].rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw DimensionError(str_cat("concat: axis ", axis, " invalid for rank ", r));
  Shape out_shape = parts[0].shape();
  Index axis_total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r)
      throw DimensionError(str_cat("concat: rank mismatch, ", shape_str(parts[0].shape()), " vs ",
                                   shape_str(p.shape())));
    for (int i = 0; i < r; ++i)
      if (i != axis && p.dim(i) != out_shape[i])
        throw DimensionError(str_cat("concat: non-concat dims disagree: ",
                                     shape_str(parts[0].shape()), " vs ", shape_str(p.shape())));
    axis_total += p.dim(axis);
  }
  out_shape[axis] = axis_total;

  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[i];

  std::vector<T> y(static_cast<std::size_t>(numel(out_shape)));
  std::vector<Index> axis_sizes;
  Index offset = 0;
  for (const auto& p : parts) {
    const Index an = p.dim(axis);
    axis_sizes.push_back(an);
    const T* pv = p.values().data();
    for (Index o = 0; o < outer; ++o)
      std::memcpy(y.data() + (o * axis_total + offset) * inner, pv + o * an * inner,
                  static_cast<std::size_t>(an * inner) * sizeof(T));
    offset += an;
  }

  std::vector<NodePtr<T>> inputs;
  for (const auto& p : parts) inputs.push_back(p.node());
  return detail::make_op<T>(
      out_shape, std::move(y), std::move(inputs),
      [outer, inner, axis_total, axis_sizes](Node<T>& o) {
        Index off = 0;
        for (std::size_t pi = 0; pi < o.inputs.size(); ++pi) {
          auto& in = *o.inputs[pi];
          const Index an = axis_sizes[pi];
          if (in.requires_grad) {
            in.ensure_grad();
            for (Index ou = 0; ou < outer; ++ou) {
              const T* src = o.grad.data() + (ou * axis_total + off) * inner;
              T* dst = in.grad.data() + ou * an * inner;
              for (Index i = 0; i < an * inner; ++i) dst[i] += src[i];
            }
          }
          off += an;
        }
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (numel(new_shape) != x.numel())
    throw DimensionError(str_cat("reshape: cannot view ", shape_str(x.shape()), " as ",
                                 shape_str(new_shape)));
  std::vector<T> y = x.values();
  return detail::make_op<T>(std::move(new_shape), std::move(y), {x.node()}, [](Node<T>& o) {
    auto& nx = *o.inputs[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) nx.grad[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r)
    throw DimensionError(str_cat("transpose: perm size ", perm.size(), " != rank ", r));
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int p : perm) {
    if (p < 0 || p >= r || seen[p])
      throw DimensionError("transpose: perm is not a permutation of the axes");
    seen[p] = true;
  }
  Shape out_shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  const auto in_strides = row_major_strides(x.shape());
  std::vector<Index> gather(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) gather[i] = in_strides[perm[i]];

  std::vector<T> y(x.values().size());
  const T* xv = x.values().data();
  std::vector<Index> idx(static_cast<std::size_t>(r), 0);
  Index src = 0;
  const Index total = x.numel();
  for (Index flat = 0; flat < total; ++flat) {
    y[static_cast<std::size_t>(flat)] = xv[src];
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      src += gather[d];
      if (idx[d] < out_shape[d]) break;
      src -= gather[d] * out_shape[d];
      idx[d] = 0;
    }
  }

  return detail::make_op<T>(
      out_shape, std::move(y), {x.node()}, [out_shape, gather, r](Node<T>& o) {
        auto& nx = *o.inputs[0];
        if (!nx.requires_grad) return;
        nx.ensure_grad();
        std::vector<Index> idx(static_cast<std::size_t>(r), 0);
        Index src = 0;
        const Index total = static_cast<Index>(o.grad.size());
        for (Index flat = 0; flat < total; ++flat) {
          nx.grad[static_cast<std::size_t>(src)] += o.grad[static_cast<std::size_t>(flat)];
          for (int d = r - 1; d >= 0; --d) {
            ++idx[d];
            src += gather[d];
            if (idx[d] < out_shape[d]) break;
            src -= gather[d] * out_shape[d];
            idx[d] = 0;
          }
        }
      });
}

// Contiguous slab [start, start+len) along one axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, Index start, Index len) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw DimensionError(str_cat("slice: axis ", axis, " invalid for ", shape_str(x.shape())));
  if (start < 0 || len <= 0 || start + len > x.dim(axis))
    throw DimensionError(str_cat("slice: range [", start, ",", start + len, ") out of bounds for ",
                                 shape_str(x.shape()), " axis ", axis));
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  const Index an = x.dim(axis);
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);

  std::vector<T> y(static_cast<std::size_t>(numel(out_shape)));
  const T* xv = x.values().data();
  for (Index o = 0; o < outer; ++o)
    std::memcpy(y.data() + o * len * inner, xv + (o * an + start) * inner,
                static_cast<std::size_t>(len * inner) * sizeof(T));

  return detail::make_op<T>(
      out_shape, std::move(y), {x.node()}, [outer, inner, an, start, len](Node<T>& o) {
        auto& nx = *o.inputs[0];
        if (!nx.requires_grad) return;
        nx.ensure_grad();
        for (Index ou = 0; ou < outer; ++ou) {
          const T* src = o.grad.data() + ou * len * inner;
          T* dst = nx.grad.data() + (ou * an + start) * inner;
          for (Index i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
      });
}

// Gather whole channels (axis 0) by index; duplicates allowed.
template <typename T>
Tensor<T> channel_select(const Tensor<T>& x, const std::vector<Index>& channels) {
  if (x.rank() < 1) throw DimensionError("channel_select: input must have rank >= 1");
  const Index c = x.dim(0);
  const Index inner = x.numel() / std::max<Index>(c, 1);
  for (Index ch : channels)
    if (ch < 0 || ch >= c)
      throw DimensionError(str_cat("channel_select: channel ", ch, " out of range [0,", c, ")"));
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<Index>(channels.size());
  std::vector<T> y(static_cast<std::size_t>(numel(out_shape)));
  for (std::size_t i = 0; i < channels.size(); ++i)
    std::memcpy(y.data() + static_cast<Index>(i) * inner, x.values().data() + channels[i] * inner,
                static_cast<std::size_t>(inner) * sizeof(T));
  return detail::make_op<T>(
      out_shape, std::move(y), {x.node()}, [channels, inner](Node<T>& o) {
        auto& nx = *o.inputs[0];
        if (!nx.requires_grad) return;
        nx.ensure_grad();
        for (std::size_t i = 0; i < channels.size(); ++i) {
          const T* src = o.grad.data() + static_cast<Index>(i) * inner;
          T* dst = nx.grad.data() + channels[i] * inner;
          for (Index j = 0; j < inner; ++j) dst[j] += src[j];
        }
      });
}

// ---------------------------------------------------------------------------
// reductions and scalar arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.values()) acc += static_cast<double>(v);
  return detail::make_op<T>(Shape{}, {static_cast<T>(acc)}, {x.node()}, [](Node<T>& o) {
    auto& nx = *o.inputs[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    const T g = o.grad[0];
    for (auto& v : nx.grad) v += g;
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, double c) {
  std::vector<T> y(x.values().size());
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = static_cast<T>(static_cast<double>(x.values()[i]) * c);
  return detail::make_op<T>(x.shape(), std::move(y), {x.node()}, [c](Node<T>& o) {
    auto& nx = *o.inputs[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      nx.grad[i] += static_cast<T>(static_cast<double>(o.grad[i]) * c);
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, double c) {
  std::vector<T> y(x.values().size());
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = static_cast<T>(static_cast<double>(x.values()[i]) + c);
  return detail::make_op<T>(x.shape(), std::move(y), {x.node()}, [](Node<T>& o) {
    auto& nx = *o.inputs[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) nx.grad[i] += o.grad[i];
  });
}

// Elementwise a/b, same shapes. Used on scalars when assembling losses.
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(str_cat("div: shape mismatch ", shape_str(a.shape()), " vs ",
                                 shape_str(b.shape())));
  std::vector<T> y(a.values().size());
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = static_cast<T>(static_cast<double>(a.values()[i]) /
                          static_cast<double>(b.values()[i]));
  return detail::make_op<T>(a.shape(), std::move(y), {a.node(), b.node()}, [](Node<T>& o) {
    auto& na = *o.inputs[0];
    auto& nb = *o.inputs[1];
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const double g = static_cast<double>(o.grad[i]);
      const double bv = static_cast<double>(nb.value[i]);
      if (na.requires_grad) {
        na.ensure_grad();
        na.grad[i] += static_cast<T>(g / bv);
      }
      if (nb.requires_grad) {
        nb.ensure_grad();
        nb.grad[i] += static_cast<T>(-g * static_cast<double>(na.value[i]) / (bv * bv));
      }
    }
  });
}

// max(log x, floor). Non-positive x lands on the floor with zero gradient, so
// log(0) never propagates a non-finite value.
template <typename T>
Tensor<T> log_clip(const Tensor<T>& x, double floor) {
  std::vector<T> y(x.values().size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = static_cast<double>(x.values()[i]);
    y[i] = static_cast<T>(v > 0.0 ? std::max(std::log(v), floor) : floor);
  }
  return detail::make_op<T>(x.shape(), std::move(y), {x.node()}, [floor](Node<T>& o) {
    auto& nx = *o.inputs[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const double v = static_cast<double>(nx.value[i]);
      if (v > 0.0 && std::log(v) > floor)
        nx.grad[i] += static_cast<T>(static_cast<double>(o.grad[i]) / v);
    }
  });
}

}  // namespace mtseg
