#ifndef DFN_LOSSES_HPP_
#define DFN_LOSSES_HPP_

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dfn/label_map.hpp"
#include "dfn/ops.hpp"
#include "dfn/tensor.hpp"

namespace dfn {

struct LossConfig {
  double lambda = 0.1;   // weight of the boundary loss in the total
  double gamma = 2.0;    // focal exponent
  double alpha_f = 0.75; // weight on boundary (positive) pixels
  std::optional<int> ignore_label;

  void validate() const {
    if (!(lambda >= 0) || !std::isfinite(lambda))
      throw ConfigError("loss: lambda must be finite and non-negative");
    if (!(gamma >= 0) || !std::isfinite(gamma))
      throw ConfigError("loss: gamma must be finite and non-negative");
    if (!(alpha_f > 0) || !(alpha_f <= 1))
      throw ConfigError("loss: alpha_f must be in (0,1]");
  }
};

// Mean over non-ignored pixels of -log softmax(scores)[label], stabilized via
// log-sum-exp. Scores are [N,K,H,W]; labels [N,H,W].
template <typename T>
Tensor<T> softmax_ce(const Tensor<T>& scores, const LabelBatch& labels,
                     std::optional<int> ignore_label = {}) {
  detail::require_rank4(scores, "softmax_ce scores");
  const int N = scores.dim(0), K = scores.dim(1), H = scores.dim(2),
            W = scores.dim(3);
  if (labels.n != N || labels.h != H || labels.w != W)
    throw DimensionError("softmax_ce: labels [" + std::to_string(labels.n) +
                         "," + std::to_string(labels.h) + "," +
                         std::to_string(labels.w) + "] do not match scores " +
                         shape_str(scores.shape()));
  const std::int64_t hw = std::int64_t(H) * W;

  auto pixel_lse = [&](const T* base, std::int64_t px) {
    T mx = base[px];
    for (int k = 1; k < K; ++k) mx = std::max(mx, base[k * hw + px]);
    T denom = T(0);
    for (int k = 0; k < K; ++k) denom += std::exp(base[k * hw + px] - mx);
    return mx + std::log(denom);
  };

  T total = T(0);
  std::int64_t count = 0;
  for (int n = 0; n < N; ++n) {
    const T* base = scores.ptr() + std::int64_t(n) * K * hw;
    for (std::int64_t px = 0; px < hw; ++px) {
      const int t = labels.values[std::size_t(n) * hw + px];
      if (ignore_label && t == *ignore_label) continue;
      if (t >= K)
        throw DataError("softmax_ce: label " + std::to_string(t) +
                        " out of range [0," + std::to_string(K) +
                        ") at pixel (n=" + std::to_string(n) + ", y=" +
                        std::to_string(px / W) + ", x=" +
                        std::to_string(px % W) + ")");
      total += pixel_lse(base, px) - base[t * hw + px];
      ++count;
    }
  }
  const T loss = count ? total / T(count) : T(0);

  auto sn = scores.node();
  auto lbl = std::make_shared<LabelBatch>(labels);
  return make_op_output<T>(
      Shape{}, std::vector<T>{loss}, {scores},
      [sn, lbl, ignore_label, N, K, W, hw, count](TensorNode<T>& self) {
        if (!sn->requires_grad || count == 0) return;
        const T g = self.grad[0] / T(count);
        T* gx = sn->ensure_grad().data();
        const T* x = sn->value.data();
        for (int n = 0; n < N; ++n) {
          const std::int64_t base = std::int64_t(n) * K * hw;
          for (std::int64_t px = 0; px < hw; ++px) {
            const int t = lbl->values[std::size_t(n) * hw + px];
            if (ignore_label && t == *ignore_label) continue;
            T mx = x[base + px];
            for (int k = 1; k < K; ++k)
              mx = std::max(mx, x[base + k * hw + px]);
            T denom = T(0);
            for (int k = 0; k < K; ++k)
              denom += std::exp(x[base + k * hw + px] - mx);
            for (int k = 0; k < K; ++k) {
              const T p = std::exp(x[base + k * hw + px] - mx) / denom;
              gx[base + k * hw + px] += g * (p - (k == t ? T(1) : T(0)));
            }
          }
        }
      });
}

// Binary focal loss over boundary logits [N,1,H,W] against a {0,1} mask.
// Per pixel:
//   boundary:      alpha_f   * (1-p)^gamma * -log(p)
//   non-boundary: (1-alpha_f)*    p^gamma  * -log(1-p)
// with p = sigmoid(logit) clamped to [1e-7, 1-1e-7] before the logs; the
// result is the mean over all pixels.
inline constexpr double kProbClamp = 1e-7;

template <typename T>
Tensor<T> focal_loss(const Tensor<T>& logits, const BoundaryBatch& boundary,
                     double gamma, double alpha_f) {
  detail::require_rank4(logits, "focal_loss logits");
  const int N = logits.dim(0), C = logits.dim(1), H = logits.dim(2),
            W = logits.dim(3);
  if (C != 1)
    throw DimensionError("focal_loss: logits must have one channel, got " +
                         shape_str(logits.shape()));
  if (boundary.n != N || boundary.h != H || boundary.w != W)
    throw DimensionError("focal_loss: boundary mask does not match logits " +
                         shape_str(logits.shape()));
  if (!(gamma >= 0)) throw ConfigError("focal_loss: gamma must be >= 0");

  const std::int64_t total_px = std::int64_t(N) * H * W;
  const T lo = T(kProbClamp), hi = T(1) - T(kProbClamp);
  const T ga = T(gamma), af = T(alpha_f);

  T total = T(0);
  for (std::int64_t i = 0; i < total_px; ++i) {
    const T z = logits.ptr()[i];
    const T p = std::min(std::max(stable_sigmoid(z), lo), hi);
    const T q = std::min(std::max(stable_sigmoid(-z), lo), hi);  // 1 - p
    if (boundary.mask[std::size_t(i)])
      total += af * std::pow(q, ga) * -std::log(p);
    else
      total += (T(1) - af) * std::pow(p, ga) * -std::log(q);
  }
  const T loss = total / T(total_px);

  auto zn = logits.node();
  auto mask = std::make_shared<std::vector<std::uint8_t>>(boundary.mask);
  return make_op_output<T>(
      Shape{}, std::vector<T>{loss}, {logits},
      [zn, mask, total_px, lo, hi, ga, af](TensorNode<T>& self) {
        if (!zn->requires_grad) return;
        const T g = self.grad[0] / T(total_px);
        T* gz = zn->ensure_grad().data();
        const T* zv = zn->value.data();
        for (std::int64_t i = 0; i < total_px; ++i) {
          const T s = stable_sigmoid(zv[i]);
          const T q = stable_sigmoid(-zv[i]);
          const T pc = std::min(std::max(s, lo), hi);
          const T qc = std::min(std::max(q, lo), hi);
          T d;
          if ((*mask)[std::size_t(i)])
            d = -af * std::pow(q, ga) * (ga * s * -std::log(pc) + q);
          else
            d = (T(1) - af) * std::pow(s, ga) * (ga * q * -std::log(qc) + s);
          gz[i] += g * d;
        }
      });
}

template <typename T>
struct LossTerms {
  Tensor<T> total;   // loss used for the optimizer step
  Tensor<T> seg;     // segmentation term
  Tensor<T> border;  // boundary term (constant zero when no border maps)
};

// Combined objective: the segmentation term averages cross-entropy over the
// supervised stages (all of them under deep supervision, otherwise only the
// final fused output), the boundary term averages focal loss over every
// boundary map, and total = seg + lambda * border.
template <typename T>
LossTerms<T> combined_loss(const std::vector<Tensor<T>>& seg_scores,
                           const std::vector<Tensor<T>>& border_scores,
                           const LabelBatch& labels,
                           const BoundaryBatch& boundary, const LossConfig& cfg,
                           bool deep_supervision) {
  cfg.validate();
  if (seg_scores.empty())
    throw UsageError("combined_loss: no segmentation scores");

  Tensor<T> seg;
  if (deep_supervision) {
    for (const auto& s : seg_scores) {
      Tensor<T> ce = softmax_ce(s, labels, cfg.ignore_label);
      seg = seg.defined() ? add(seg, ce) : ce;
    }
    if (seg_scores.size() > 1) seg = scale(seg, T(1) / T(seg_scores.size()));
  } else {
    seg = softmax_ce(seg_scores.back(), labels, cfg.ignore_label);
  }

  if (border_scores.empty()) {
    LossTerms<T> out;
    out.seg = seg;
    out.border = Tensor<T>::scalar(T(0));
    out.total = seg;
    return out;
  }

  Tensor<T> border;
  for (const auto& b : border_scores) {
    Tensor<T> fl = focal_loss(b, boundary, cfg.gamma, cfg.alpha_f);
    border = border.defined() ? add(border, fl) : fl;
  }
  if (border_scores.size() > 1)
    border = scale(border, T(1) / T(border_scores.size()));

  LossTerms<T> out;
  out.seg = seg;
  out.border = border;
  out.total = add(seg, scale(border, T(cfg.lambda)));
  return out;
}

}  // namespace dfn

#endif  // DFN_LOSSES_HPP_
