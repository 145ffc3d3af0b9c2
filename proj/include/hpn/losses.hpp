#pragma once

// Matching objectives: the hinge-on-L2-distance loss, the softmax (binary
// cross-entropy) loss, and the composite hybrid loss with the auxiliary
// terms applied to the Siamese and asymmetric branch outputs.
//
// A batch is N encodings per modality plus a list of (x row, y row, label)
// pair specs; positives reference the same row on both sides, generated
// negatives cross rows. Every loss term is the arithmetic mean over pairs.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hpn/model.hpp"
#include "hpn/tensor.hpp"
#include "hpn/util.hpp"

namespace hpn {

/// Squared epsilon inside the distance square root; keeps the gradient
/// finite when matched descriptors coincide.
inline constexpr double kDistanceEpsSq = 1e-12;

struct LossConfig {
  Variant variant = Variant::kL2Hinge;
  double margin = 1.0;  // C in the hinge loss
  double main_weight = 1.0;
  double aux_weight_siam = 1.0;
  double aux_weight_asym = 1.0;

  void validate() const {
    if (!(margin > 0.0)) throw std::invalid_argument("loss config: margin must be > 0");
    if (main_weight < 0.0 || aux_weight_siam < 0.0 || aux_weight_asym < 0.0)
      throw std::invalid_argument("loss config: weights must be >= 0");
  }
};

struct PairSpec {
  std::int32_t x_row;
  std::int32_t y_row;
  Label label;
};

/// Identity pairing (row i with row i) for already-aligned batches.
inline std::vector<PairSpec> aligned_pairs(std::span<const Label> labels) {
  std::vector<PairSpec> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    out[i] = {static_cast<std::int32_t>(i), static_cast<std::int32_t>(i), labels[i]};
  return out;
}

// ---------------------------------------------------------------------------
// Hinge on distance: match -> d, nonmatch -> max(0, C - d). The kink takes
// subgradient 0, so negatives past the margin produce exactly zero gradient.

template <typename T>
Tensor<T> hinge_from_distance(const Tensor<T>& dist, std::vector<Label> labels,
                              T margin, Tape<T>* tape = nullptr) {
  if (dist.rank() != 1)
    throw std::invalid_argument("hinge_from_distance: distances must be [N], got " + shape_str(dist.shape()));
  if (static_cast<std::size_t>(dist.dim(0)) != labels.size())
    throw std::invalid_argument("hinge_from_distance: label count does not match distances");
  const int n = dist.dim(0);
  Tensor<T> out = Tensor<T>::zeros({n}, detail::wants_grad(tape, {&dist}));
  auto lab = std::make_shared<std::vector<Label>>(std::move(labels));
  const T* d = dist.data();
  T* o = out.mutable_data();
  for (int i = 0; i < n; ++i)
    o[i] = is_match((*lab)[static_cast<std::size_t>(i)]) ? d[i] : std::max(T(0), margin - d[i]);
  if (out.requires_grad()) {
    tape->record(out, [dist, out, lab, margin]() {
      const int n = dist.dim(0);
      const T* go = out.grad_data();
      const T* d = dist.data();
      T* gd = dist.grad_data();
      for (int i = 0; i < n; ++i) {
        if (is_match((*lab)[static_cast<std::size_t>(i)]))
          gd[i] += go[i];
        else if (d[i] < margin)
          gd[i] -= go[i];
      }
    });
  }
  return out;
}

/// Scalar hinge-L2 loss for one descriptor pair (Eq. form of the batch op).
template <typename T>
double hinge_l2(std::span<const T> dx, std::span<const T> dy, Label label, double margin) {
  if (dx.size() != dy.size())
    throw std::invalid_argument("hinge_l2: descriptor widths differ");
  double s = 0;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    const double d = static_cast<double>(dx[i]) - static_cast<double>(dy[i]);
    s += d * d;
  }
  const double dist = std::sqrt(s);
  return is_match(label) ? dist : std::max(0.0, margin - dist);
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy over [N,2] logits (log-sum-exp with max
// subtraction), class 1 = match. Returns per-sample losses [N].

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::vector<Label> labels,
                                Tape<T>* tape = nullptr) {
  if (logits.rank() != 2 || logits.dim(1) != 2)
    throw std::invalid_argument("softmax_cross_entropy: logits must be [N,2], got " + shape_str(logits.shape()));
  if (static_cast<std::size_t>(logits.dim(0)) != labels.size())
    throw std::invalid_argument("softmax_cross_entropy: label count does not match logits");
  const int n = logits.dim(0);
  Tensor<T> out = Tensor<T>::zeros({n}, detail::wants_grad(tape, {&logits}));
  auto lab = std::make_shared<std::vector<Label>>(std::move(labels));
  const T* lp = logits.data();
  T* o = out.mutable_data();
  for (int i = 0; i < n; ++i) {
    const T l0 = lp[2 * i], l1 = lp[2 * i + 1];
    const T m = std::max(l0, l1);
    const T lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
    const T target = is_match((*lab)[static_cast<std::size_t>(i)]) ? l1 : l0;
    o[i] = lse - target;
  }
  if (out.requires_grad()) {
    tape->record(out, [logits, out, lab]() {
      const int n = logits.dim(0);
      const T* go = out.grad_data();
      const T* lp = logits.data();
      T* gl = logits.grad_data();
      for (int i = 0; i < n; ++i) {
        const T l0 = lp[2 * i], l1 = lp[2 * i + 1];
        const T m = std::max(l0, l1);
        const T e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
        const T inv = T(1) / (e0 + e1);
        const bool match = is_match((*lab)[static_cast<std::size_t>(i)]);
        gl[2 * i] += go[i] * (e0 * inv - (match ? T(0) : T(1)));
        gl[2 * i + 1] += go[i] * (e1 * inv - (match ? T(1) : T(0)));
      }
    });
  }
  return out;
}

/// Mean softmax match loss over a logits batch (the spec's scalar form).
template <typename T>
double softmax_match_loss(const Tensor<T>& logits, std::span<const Label> labels) {
  Tensor<T> per = softmax_cross_entropy(logits, std::vector<Label>(labels.begin(), labels.end()),
                                        static_cast<Tape<T>*>(nullptr));
  double s = 0;
  for (T v : per.values()) s += static_cast<double>(v);
  return s / static_cast<double>(per.numel());
}

// ---------------------------------------------------------------------------
// Family loss on one vector pair stream. Selects the hinge or softmax
// family per the config and reduces to a scalar mean over pairs.

enum class HeadChoice { kMain, kSiam, kAsym };

template <typename T>
const LinearLayer<T>& classifier_head(const HybridNetwork<T>& net, HeadChoice which) {
  switch (which) {
    case HeadChoice::kMain: return net.head_main;
    case HeadChoice::kSiam: return net.head_siam;
    default: return net.head_asym;
  }
}

template <typename T>
Tensor<T> pair_family_loss(const HybridNetwork<T>& net, const Tensor<T>& x_vecs,
                           const Tensor<T>& y_vecs, std::span<const PairSpec> pairs,
                           HeadChoice head, const LossConfig& cfg, Tape<T>* tape = nullptr) {
  if (cfg.variant != net.variant)
    throw std::invalid_argument("loss config variant does not match network variant");
  std::vector<std::int32_t> ix(pairs.size()), iy(pairs.size());
  std::vector<Label> labels(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    ix[i] = pairs[i].x_row;
    iy[i] = pairs[i].y_row;
    labels[i] = pairs[i].label;
  }
  Tensor<T> gx = gather_rows(x_vecs, std::move(ix), tape);
  Tensor<T> gy = gather_rows(y_vecs, std::move(iy), tape);
  if (cfg.variant == Variant::kL2Hinge) {
    Tensor<T> d = row_l2_distance(gx, gy, static_cast<T>(kDistanceEpsSq), tape);
    Tensor<T> h = hinge_from_distance(d, std::move(labels), static_cast<T>(cfg.margin), tape);
    return mean_all(h, tape);
  }
  const LinearLayer<T>& hd = classifier_head(net, head);
  if (!hd.defined())
    throw std::invalid_argument("softmax loss requires classifier heads on the network");
  Tensor<T> summed = add(gx, gy, tape);
  Tensor<T> logits = linear(summed, hd.w, hd.b, tape);
  Tensor<T> ce = softmax_cross_entropy(logits, std::move(labels), tape);
  return mean_all(ce, tape);
}

// ---------------------------------------------------------------------------
// Composite hybrid loss:
//   total = w_main * L(x_hat, y_hat)
//         + w_siam * L(W_s(x), W_s(y))
//         + w_asym * L(W_x(x), W_y(y))
// with every term drawn from the main loss family. Zero-weight terms are
// skipped entirely (no graph built).

template <typename T>
struct HybridLossParts {
  Tensor<T> total;      // scalar, connected to the tape
  double main = 0.0;    // weighted term values, parts sum to total
  double aux_siam = 0.0;
  double aux_asym = 0.0;
};

template <typename T>
HybridLossParts<T> hybrid_loss(const HybridNetwork<T>& net, const EncodingBatch<T>& ex,
                               const EncodingBatch<T>& ey, std::span<const PairSpec> pairs,
                               const LossConfig& cfg, Tape<T>* tape = nullptr) {
  cfg.validate();
  if (cfg.variant != net.variant)
    throw std::invalid_argument("loss config variant does not match network variant");
  if (ex.modality != Modality::kX || ey.modality != Modality::kY)
    throw std::invalid_argument("hybrid_loss: expects (modality X, modality Y) encoding batches");
  HybridLossParts<T> parts;
  Tensor<T> total;
  auto accumulate = [&](const Tensor<T>& vx, const Tensor<T>& vy, HeadChoice head,
                        double weight, double& slot) {
    if (weight == 0.0) return;
    Tensor<T> term = pair_family_loss(net, vx, vy, pairs, head, cfg, tape);
    Tensor<T> weighted = scale(term, static_cast<T>(weight), tape);
    slot = static_cast<double>(weighted.value_at(0));
    total = total.defined() ? add(total, weighted, tape) : weighted;
  };
  accumulate(ex.hybrid, ey.hybrid, HeadChoice::kMain, cfg.main_weight, parts.main);
  accumulate(ex.siam, ey.siam, HeadChoice::kSiam, cfg.aux_weight_siam, parts.aux_siam);
  accumulate(ex.asym, ey.asym, HeadChoice::kAsym, cfg.aux_weight_asym, parts.aux_asym);
  if (!total.defined()) total = Tensor<T>::scalar(T(0));
  parts.total = total;
  return parts;
}

}  // namespace hpn
