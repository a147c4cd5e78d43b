#include "mtseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mtseg {

BinaryMask::BinaryMask(Shape s, std::vector<std::uint8_t> data)
    : shape(std::move(s)), v(std::move(data)) {
  if (numel(shape) != static_cast<Index>(v.size()))
    throw DimensionError(str_cat("mask data size ", v.size(), " does not match shape ",
                                 shape_str(shape)));
  for (auto b : v)
    if (b > 1) throw InputError(str_cat("mask values must be 0 or 1, got ", int(b)));
}

Index BinaryMask::count() const {
  Index n = 0;
  for (auto b : v) n += b;
  return n;
}

ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& target) {
  if (pred.shape != target.shape)
    throw DimensionError(str_cat("confusion: shape mismatch ", shape_str(pred.shape), " vs ",
                                 shape_str(target.shape)));
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.v.size(); ++i) {
    const bool p = pred.v[i], t = target.v[i];
    if (p && t)
      ++c.tp;
    else if (p && !t)
      ++c.fp;
    else if (!p && t)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

double dice_coef(const BinaryMask& pred, const BinaryMask& target) {
  const auto c = confusion(pred, target);
  const Index pred_n = c.tp + c.fp;
  const Index tgt_n = c.tp + c.fn;
  if (pred_n == 0 && tgt_n == 0) return 1.0;
  if (pred_n == 0 || tgt_n == 0) return 0.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(pred_n + tgt_n);
}

double sensitivity(const BinaryMask& pred, const BinaryMask& target) {
  const auto c = confusion(pred, target);
  if (c.tp + c.fn == 0) return 1.0;
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

namespace {

// Felzenszwalb-Huttenlocher 1-D squared distance transform.
void edt_1d(std::vector<double>& f, std::vector<double>& d, std::vector<Index>& v,
            std::vector<double>& z, Index n) {
  Index k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (Index q = 1; q < n; ++q) {
    double s;
    while (true) {
      const Index p = v[k];
      s = ((f[q] + static_cast<double>(q * q)) - (f[p] + static_cast<double>(p * p))) /
          (2.0 * static_cast<double>(q - p));
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (Index q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const Index p = v[k];
    const double dq = static_cast<double>(q - p);
    d[q] = dq * dq + f[p];
  }
}

constexpr double kFar = 1e18;

}  // namespace

std::vector<double> squared_distance_transform(const Shape& shape,
                                               const std::vector<std::uint8_t>& mask) {
  const Index total = numel(shape);
  std::vector<double> dist(static_cast<std::size_t>(total));
  for (Index i = 0; i < total; ++i) dist[i] = mask[static_cast<std::size_t>(i)] ? 0.0 : kFar;

  const int rank = static_cast<int>(shape.size());
  const auto strides = row_major_strides(shape);
  std::vector<double> f, d, z;
  std::vector<Index> v;
  for (int axis = 0; axis < rank; ++axis) {
    const Index n = shape[axis];
    if (n <= 1) continue;
    f.resize(static_cast<std::size_t>(n));
    d.resize(static_cast<std::size_t>(n));
    v.resize(static_cast<std::size_t>(n));
    z.resize(static_cast<std::size_t>(n + 1));
    const Index stride = strides[axis];
    const Index lines = total / n;
    for (Index line = 0; line < lines; ++line) {
      // decompose the line id into a base offset skipping this axis
      Index rem = line, base = 0;
      for (int ax = rank - 1; ax >= 0; --ax) {
        if (ax == axis) continue;
        const Index len = shape[ax];
        base += (rem % len) * strides[ax];
        rem /= len;
      }
      for (Index i = 0; i < n; ++i) f[i] = dist[static_cast<std::size_t>(base + i * stride)];
      edt_1d(f, d, v, z, n);
      for (Index i = 0; i < n; ++i) dist[static_cast<std::size_t>(base + i * stride)] = d[i];
    }
  }
  return dist;
}

namespace {

// Directed distances from every point of `from` to the nearest point of `to`.
std::vector<double> directed_distances(const BinaryMask& from, const BinaryMask& to) {
  const auto sq = squared_distance_transform(to.shape, to.v);
  std::vector<double> out;
  for (std::size_t i = 0; i < from.v.size(); ++i)
    if (from.v[i]) out.push_back(std::sqrt(sq[i]));
  return out;
}

double nearest_rank_percentile(std::vector<double> v, double pct) {
  std::sort(v.begin(), v.end());
  const Index n = static_cast<Index>(v.size());
  Index rank = static_cast<Index>(std::ceil(pct * static_cast<double>(n)));
  rank = std::max<Index>(1, std::min(rank, n));
  return v[static_cast<std::size_t>(rank - 1)];
}

}  // namespace

Hd95Result hd95(const BinaryMask& pred, const BinaryMask& target, bool pooled) {
  if (pred.shape != target.shape)
    throw DimensionError(str_cat("hd95: shape mismatch ", shape_str(pred.shape), " vs ",
                                 shape_str(target.shape)));
  const bool pe = pred.empty_mask(), te = target.empty_mask();
  if (pe && te) return {0.0, false};
  if (pe || te) return {0.0, true};
  auto d_t2p = directed_distances(target, pred);
  auto d_p2t = directed_distances(pred, target);
  if (pooled) {
    d_t2p.insert(d_t2p.end(), d_p2t.begin(), d_p2t.end());
    return {nearest_rank_percentile(std::move(d_t2p), 0.95), false};
  }
  return {std::max(nearest_rank_percentile(std::move(d_t2p), 0.95),
                   nearest_rank_percentile(std::move(d_p2t), 0.95)),
          false};
}

std::array<BinaryMask, 3> labels_to_regions(const Shape& shape,
                                            const std::vector<std::uint8_t>& labels) {
  if (numel(shape) != static_cast<Index>(labels.size()))
    throw DimensionError(str_cat("labels size ", labels.size(), " does not match shape ",
                                 shape_str(shape)));
  std::vector<std::uint8_t> wt(labels.size()), tc(labels.size()), et(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    switch (labels[i]) {
      case 0: wt[i] = 0; tc[i] = 0; et[i] = 0; break;
      case 1: wt[i] = 1; tc[i] = 1; et[i] = 0; break;
      case 2: wt[i] = 1; tc[i] = 0; et[i] = 0; break;
      case 4: wt[i] = 1; tc[i] = 1; et[i] = 1; break;
      default:
        throw InputError(str_cat("unknown label value ", int(labels[i]),
                                 " (expected 0, 1, 2, or 4)"));
    }
  }
  return {BinaryMask(shape, std::move(wt)), BinaryMask(shape, std::move(tc)),
          BinaryMask(shape, std::move(et))};
}

namespace {
template <typename T>
BinaryMask threshold_impl(const Shape& shape, const std::vector<T>& probs) {
  std::vector<std::uint8_t> m(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) m[i] = probs[i] > T(0.5) ? 1 : 0;
  return BinaryMask(shape, std::move(m));
}
}  // namespace

BinaryMask threshold_mask(const Shape& shape, const std::vector<float>& probs) {
  return threshold_impl(shape, probs);
}
BinaryMask threshold_mask(const Shape& shape, const std::vector<double>& probs) {
  return threshold_impl(shape, probs);
}

}  // namespace mtseg
