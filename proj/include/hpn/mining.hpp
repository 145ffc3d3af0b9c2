#pragma once

// Hard negative mining. Per batch of N positive pairs: compute the 2N
// encodings in two per-modality forward passes (no gradients), pick
// M = round(h_m * N) anchor rows at random, and give each anchor the
// hardest negative found by scanning the cached descriptors; the remaining
// N - M anchors get random negatives. Candidate scoring touches only the
// cached 128-d vectors, never the full network, which is the point.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "hpn/data.hpp"
#include "hpn/losses.hpp"
#include "hpn/model.hpp"
#include "hpn/tensor.hpp"
#include "hpn/util.hpp"

namespace hpn {

enum class MiningScore : std::uint8_t {
  kDistance,         // hardest = minimal descriptor L2 distance
  kHeadProbability,  // hardest = maximal match probability via the linear head
};

struct MiningConfig {
  double h_m = 0.8;
  bool enabled = true;
  int start_epoch = 1;
  // Scoring used by the softmax variant; the L2 variant always ranks by
  // distance.
  MiningScore softmax_score = MiningScore::kHeadProbability;

  void validate() const {
    if (h_m < 0.0 || h_m > 1.0) throw std::invalid_argument("mining: h_m must be in [0,1]");
    if (start_epoch < 1) throw std::invalid_argument("mining: start_epoch must be >= 1");
  }
};

struct MiningStats {
  std::size_t mined = 0;
  std::size_t randomly_drawn = 0;
  std::size_t pair_scores = 0;  // descriptor-level candidate evaluations
};

/// Core selection on cached descriptors: returns a negative row j != i for
/// every anchor i in [0, N). `head_direction` (w_match - w_nonmatch of the
/// scoring head) is required for kHeadProbability; the match probability is
/// monotone in its dot product with y_hat, so candidates are ranked by that
/// dot product. Hardness ties break toward the lowest index.
template <typename T>
std::vector<std::int32_t> mine_negative_rows(const Tensor<T>& x_desc, const Tensor<T>& y_desc,
                                             MiningScore score,
                                             const std::vector<T>& head_direction, double h_m,
                                             RngEngine& rng, MiningStats* stats = nullptr) {
  if (x_desc.rank() != 2 || y_desc.rank() != 2 || x_desc.dim(0) != y_desc.dim(0) ||
      x_desc.dim(1) != y_desc.dim(1))
    throw std::invalid_argument("mine_negative_rows: descriptor sets must be [N,D] with equal shapes");
  const int n = x_desc.dim(0);
  const int d = x_desc.dim(1);
  if (n < 2) throw std::invalid_argument("mine_negative_rows: need at least 2 pairs");
  if (h_m < 0.0 || h_m > 1.0) throw std::invalid_argument("mine_negative_rows: h_m must be in [0,1]");
  if (score == MiningScore::kHeadProbability && static_cast<int>(head_direction.size()) != d)
    throw std::invalid_argument("mine_negative_rows: head direction width mismatch");

  const int m = static_cast<int>(std::lround(h_m * n));
  std::vector<std::uint32_t> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(i);
  shuffle_inplace(order, rng);
  std::vector<std::uint8_t> is_mined(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < m; ++i) is_mined[order[static_cast<std::size_t>(i)]] = 1;

  const T* xd = x_desc.data();
  const T* yd = y_desc.data();
  std::vector<std::int32_t> out(static_cast<std::size_t>(n), -1);
  std::size_t scores_done = 0;
  for (int i = 0; i < n; ++i) {
    if (!is_mined[static_cast<std::size_t>(i)]) {
      std::size_t j = uniform_index(rng, static_cast<std::size_t>(n - 1));
      if (j >= static_cast<std::size_t>(i)) ++j;
      out[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(j);
      continue;
    }
    std::int32_t best_j = -1;
    double best = 0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      double v;
      if (score == MiningScore::kDistance) {
        const T* a = xd + static_cast<std::int64_t>(i) * d;
        const T* b = yd + static_cast<std::int64_t>(j) * d;
        double s = 0;
        for (int c = 0; c < d; ++c) {
          const double diff = static_cast<double>(a[c]) - static_cast<double>(b[c]);
          s += diff * diff;
        }
        v = -s;  // smaller distance = harder
      } else {
        const T* b = yd + static_cast<std::int64_t>(j) * d;
        double s = 0;
        for (int c = 0; c < d; ++c)
          s += static_cast<double>(head_direction[static_cast<std::size_t>(c)]) *
               static_cast<double>(b[c]);
        v = s;  // larger match logit margin = harder
      }
      ++scores_done;
      if (best_j < 0 || v > best) {
        best = v;
        best_j = j;
      }
    }
    out[static_cast<std::size_t>(i)] = best_j;
  }
  if (stats) {
    stats->mined += static_cast<std::size_t>(m);
    stats->randomly_drawn += static_cast<std::size_t>(n - m);
    stats->pair_scores += scores_done;
  }
  return out;
}

/// Spec-level op: mines against the hybrid descriptors of the current
/// (frozen for the step) network and returns the N negative pairs.
template <typename T>
std::vector<PatchPair> mine_batch(const HybridNetwork<T>& net, std::span<const PatchPair> positives,
                                  const NormalizationStats& norm, const MiningConfig& cfg,
                                  RngEngine& rng, MiningStats* stats = nullptr) {
  cfg.validate();
  if (positives.size() < 2) throw std::invalid_argument("mine_batch: need at least 2 positive pairs");
  Tensor<T> xb = patch_batch<T>(positives, Modality::kX, norm);
  Tensor<T> yb = patch_batch<T>(positives, Modality::kY, norm);
  EncodingBatch<T> ex = encode(net, xb, Modality::kX);
  EncodingBatch<T> ey = encode(net, yb, Modality::kY);
  MiningScore score = MiningScore::kDistance;
  std::vector<T> dir;
  if (net.variant == Variant::kSoftmax && cfg.softmax_score == MiningScore::kHeadProbability) {
    score = MiningScore::kHeadProbability;
    dir = head_direction(net.head_main);
  }
  std::vector<std::int32_t> rows =
      mine_negative_rows(ex.hybrid, ey.hybrid, score, dir, cfg.h_m, rng, stats);
  std::vector<PatchPair> out;
  out.reserve(positives.size());
  for (std::size_t i = 0; i < positives.size(); ++i) {
    PatchPair neg;
    neg.x = positives[i].x;
    neg.y = positives[static_cast<std::size_t>(rows[i])].y;
    neg.label = Label::kNonMatch;
    neg.source_id = positives[i].source_id;
    out.push_back(neg);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Saturation diagnostic: histogram of negative-pair descriptor distances
// and the fraction past the hinge margin (zero-gradient region).

struct HardnessHistogram {
  std::vector<std::size_t> counts;
  double lo = 0.0, hi = 0.0;  // distance range covered by the bins
  double inactive_fraction = 0.0;
  std::size_t negatives = 0;
};

inline HardnessHistogram histogram_of_distances(std::span<const double> distances, int bins,
                                                double margin) {
  if (bins < 1) throw std::invalid_argument("hardness_histogram: bins must be >= 1");
  HardnessHistogram h;
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  h.negatives = distances.size();
  if (distances.empty()) return h;
  double hi = 0;
  for (double d : distances) hi = std::max(hi, d);
  h.lo = 0.0;
  h.hi = std::max(hi, 1e-12);
  std::size_t inactive = 0;
  for (double d : distances) {
    int b = static_cast<int>(static_cast<double>(bins) * d / h.hi);
    if (b >= bins) b = bins - 1;
    ++h.counts[static_cast<std::size_t>(b)];
    if (d >= margin) ++inactive;
  }
  h.inactive_fraction = static_cast<double>(inactive) / static_cast<double>(distances.size());
  return h;
}

template <typename T>
HardnessHistogram hardness_histogram(const HybridNetwork<T>& net, std::span<const PatchPair> pairs,
                                     const NormalizationStats& norm, int bins,
                                     double margin = 1.0) {
  std::vector<const PatchData*> xs, ys;
  for (const PatchPair& p : pairs) {
    if (is_match(p.label)) continue;
    xs.push_back(&p.x);
    ys.push_back(&p.y);
  }
  std::vector<double> distances;
  distances.reserve(xs.size());
  const std::size_t kBatch = 256;
  for (std::size_t at = 0; at < xs.size(); at += kBatch) {
    const std::size_t n = std::min(kBatch, xs.size() - at);
    Tensor<T> xb = patch_batch<T>(std::span<const PatchData* const>(xs.data() + at, n),
                                  norm.mean_x, norm.std_x);
    Tensor<T> yb = patch_batch<T>(std::span<const PatchData* const>(ys.data() + at, n),
                                  norm.mean_y, norm.std_y);
    EncodingBatch<T> ex = encode(net, xb, Modality::kX);
    EncodingBatch<T> ey = encode(net, yb, Modality::kY);
    const T* a = ex.hybrid.data();
    const T* b = ey.hybrid.data();
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (int c = 0; c < kDescriptorDim; ++c) {
        const double d = static_cast<double>(a[i * kDescriptorDim + c]) -
                         static_cast<double>(b[i * kDescriptorDim + c]);
        s += d * d;
      }
      distances.push_back(std::sqrt(s));
    }
  }
  return histogram_of_distances(distances, bins, margin);
}

}  // namespace hpn
