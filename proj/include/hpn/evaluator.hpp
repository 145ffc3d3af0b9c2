#pragma once

// Evaluation: ROC / FPR95 over scored pairs, descriptor-set export (HDSC),
// exact brute-force KNN matching between descriptor sets, and the end-to-end
// model/dataset evaluation report.
//
// Scores are oriented so that higher means "more likely a match": the L2
// variant scores with the negated descriptor distance, the softmax variant
// with the match probability.

#include <algorithm>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hpn/data.hpp"
#include "hpn/model.hpp"
#include "hpn/util.hpp"

namespace hpn {

struct ScoredPair {
  double score;
  Label label;
};

struct RocPoint {
  double fpr, tpr;
};

namespace detail {

struct RecallSweep {
  std::vector<RocPoint> points;  // one per distinct score, descending score
  double fpr95 = 1.0;
};

inline RecallSweep sweep_operating_points(std::span<const ScoredPair> scored) {
  std::size_t n_pos = 0, n_neg = 0;
  for (const ScoredPair& s : scored) (is_match(s.label) ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument("evaluation needs at least one positive and one negative pair");
  std::vector<ScoredPair> sorted(scored.begin(), scored.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const ScoredPair& a, const ScoredPair& b) { return a.score > b.score; });
  RecallSweep out;
  std::size_t tp = 0, fp = 0;
  bool fpr95_set = false;
  std::size_t i = 0;
  while (i < sorted.size()) {
    // All pairs sharing one score form a single operating point.
    const double s = sorted[i].score;
    while (i < sorted.size() && sorted[i].score == s) {
      (is_match(sorted[i].label) ? tp : fp)++;
      ++i;
    }
    const double tpr = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double fpr = static_cast<double>(fp) / static_cast<double>(n_neg);
    out.points.push_back({fpr, tpr});
    if (!fpr95_set && tpr >= 0.95) {
      out.fpr95 = fpr;
      fpr95_set = true;
    }
  }
  return out;
}

}  // namespace detail

/// False positive rate at the largest score threshold reaching 95% recall.
inline double fpr95(std::span<const ScoredPair> scored) {
  return detail::sweep_operating_points(scored).fpr95;
}

/// Monotone ROC staircase from (0,0) to (1,1), one point per distinct score.
inline std::vector<RocPoint> roc(std::span<const ScoredPair> scored) {
  auto sweep = detail::sweep_operating_points(scored);
  std::vector<RocPoint> out;
  out.reserve(sweep.points.size() + 1);
  out.push_back({0.0, 0.0});
  out.insert(out.end(), sweep.points.begin(), sweep.points.end());
  return out;
}

/// Area under the staircase (step integral).
inline double roc_auc(std::span<const RocPoint> curve) {
  double area = 0;
  for (std::size_t i = 1; i < curve.size(); ++i)
    area += (curve[i].fpr - curve[i - 1].fpr) * curve[i].tpr;
  return area;
}

// ---------------------------------------------------------------------------
// Descriptor sets and the HDSC file format: magic "HDSC", u32 n, u32 d=128,
// then n*d little-endian f32 values.

struct DescriptorSet {
  Modality modality = Modality::kX;
  std::uint32_t count = 0;
  std::uint32_t dim = kDescriptorDim;
  std::vector<float> data;  // row-major [count, dim]
  std::vector<std::uint64_t> source_ids;

  const float* row(std::size_t i) const { return data.data() + i * dim; }
};

inline std::vector<std::uint8_t> serialize_descriptors(const DescriptorSet& set) {
  ByteWriter w;
  w.magic("HDSC");
  w.u32(set.count);
  w.u32(set.dim);
  for (float v : set.data) w.f32(v);
  return w.take();
}

inline DescriptorSet parse_descriptors(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (!r.magic("HDSC")) throw std::runtime_error("descriptor file: bad magic (expected HDSC)");
  DescriptorSet set;
  if (!r.u32(set.count) || !r.u32(set.dim))
    throw std::runtime_error("descriptor file: truncated header");
  if (set.dim != kDescriptorDim)
    throw std::runtime_error("descriptor file: dimension " + std::to_string(set.dim) + " unsupported");
  set.data.resize(static_cast<std::size_t>(set.count) * set.dim);
  for (float& v : set.data)
    if (!r.f32(v)) throw std::runtime_error("descriptor file: truncated data");
  if (!r.done()) throw std::runtime_error("descriptor file: trailing bytes");
  set.source_ids.resize(set.count);
  for (std::uint32_t i = 0; i < set.count; ++i) set.source_ids[i] = i;
  return set;
}

/// Encodes one modality's patches into their hybrid descriptors, in batches.
template <typename T>
DescriptorSet encode_descriptor_set(const HybridNetwork<T>& net,
                                    std::span<const PatchData* const> patches, Modality modality,
                                    const NormalizationStats& norm, std::size_t batch = 256) {
  DescriptorSet set;
  set.modality = modality;
  set.count = static_cast<std::uint32_t>(patches.size());
  set.data.resize(patches.size() * static_cast<std::size_t>(kDescriptorDim));
  set.source_ids.resize(patches.size());
  const double mean = modality == Modality::kX ? norm.mean_x : norm.mean_y;
  const double stddev = modality == Modality::kX ? norm.std_x : norm.std_y;
  for (std::size_t at = 0; at < patches.size(); at += batch) {
    const std::size_t n = std::min(batch, patches.size() - at);
    Tensor<T> b = patch_batch<T>(std::span<const PatchData* const>(patches.data() + at, n), mean, stddev);
    EncodingBatch<T> enc = encode(net, b, modality);
    const T* h = enc.hybrid.data();
    for (std::size_t i = 0; i < n * static_cast<std::size_t>(kDescriptorDim); ++i)
      set.data[at * kDescriptorDim + i] = static_cast<float>(h[i]);
  }
  for (std::size_t i = 0; i < patches.size(); ++i) set.source_ids[i] = i;
  return set;
}

// ---------------------------------------------------------------------------
// Exact KNN between descriptor sets; ties break toward the lower index.

struct Neighbor {
  std::int32_t index;
  double distance;
};

inline std::vector<std::vector<Neighbor>> knn_match(const DescriptorSet& qx,
                                                    const DescriptorSet& ry, int k) {
  if (ry.count == 0) throw std::invalid_argument("knn_match: reference set is empty");
  if (k < 1 || static_cast<std::uint32_t>(k) > ry.count)
    throw std::invalid_argument("knn_match: k must be in [1, |reference|]");
  if (qx.dim != ry.dim) throw std::invalid_argument("knn_match: descriptor widths differ");
  std::vector<std::vector<Neighbor>> out(qx.count);
  parallel_for_chunks(qx.count, [&](std::size_t qi) {
    const float* q = qx.row(qi);
    std::vector<std::pair<double, std::int32_t>> d(ry.count);
    for (std::uint32_t j = 0; j < ry.count; ++j) {
      const float* r = ry.row(j);
      double s = 0;
      for (std::uint32_t c = 0; c < ry.dim; ++c) {
        const double diff = static_cast<double>(q[c]) - static_cast<double>(r[c]);
        s += diff * diff;
      }
      d[j] = {s, static_cast<std::int32_t>(j)};
    }
    std::partial_sort(d.begin(), d.begin() + k, d.end());
    auto& row = out[qi];
    row.resize(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) row[static_cast<std::size_t>(j)] = {d[static_cast<std::size_t>(j)].second,
                                                                    std::sqrt(d[static_cast<std::size_t>(j)].first)};
  });
  return out;
}

// ---------------------------------------------------------------------------
// End-to-end evaluation.

struct EvalReport {
  Variant variant = Variant::kL2Hinge;
  double fpr95 = 1.0;
  std::vector<RocPoint> roc;
  std::size_t n_pos = 0, n_neg = 0;
  std::string checkpoint_id;
  std::string config_hash;
};

/// Scores labeled pairs with the variant's pair score (higher = match).
template <typename T>
std::vector<ScoredPair> score_pairs(const HybridNetwork<T>& net, std::span<const PatchPair> pairs,
                                    const NormalizationStats& norm, std::size_t batch = 256) {
  std::vector<ScoredPair> out;
  out.reserve(pairs.size());
  std::vector<T> head_dir;
  double head_bias = 0;
  if (net.variant == Variant::kSoftmax) {
    if (!net.head_main.defined())
      throw std::invalid_argument("score_pairs: softmax variant requires the classifier head");
    head_dir = head_direction(net.head_main);
    head_bias = static_cast<double>(net.head_main.b.value_at(1)) -
                static_cast<double>(net.head_main.b.value_at(0));
  }
  for (std::size_t at = 0; at < pairs.size(); at += batch) {
    const std::size_t n = std::min(batch, pairs.size() - at);
    std::span<const PatchPair> chunk(pairs.data() + at, n);
    Tensor<T> xb = patch_batch<T>(chunk, Modality::kX, norm);
    Tensor<T> yb = patch_batch<T>(chunk, Modality::kY, norm);
    EncodingBatch<T> ex = encode(net, xb, Modality::kX);
    EncodingBatch<T> ey = encode(net, yb, Modality::kY);
    const T* a = ex.hybrid.data();
    const T* b = ey.hybrid.data();
    for (std::size_t i = 0; i < n; ++i) {
      double score;
      if (net.variant == Variant::kL2Hinge) {
        double s = 0;
        for (int c = 0; c < kDescriptorDim; ++c) {
          const double d = static_cast<double>(a[i * kDescriptorDim + c]) -
                           static_cast<double>(b[i * kDescriptorDim + c]);
          s += d * d;
        }
        score = -std::sqrt(s);
      } else {
        double z = head_bias;
        for (int c = 0; c < kDescriptorDim; ++c)
          z += static_cast<double>(head_dir[static_cast<std::size_t>(c)]) *
               (static_cast<double>(a[i * kDescriptorDim + c]) +
                static_cast<double>(b[i * kDescriptorDim + c]));
        score = 1.0 / (1.0 + std::exp(-z));  // match probability
      }
      out.push_back({score, chunk[i].label});
    }
  }
  return out;
}

template <typename T>
EvalReport evaluate(const HybridNetwork<T>& net, std::span<const PatchPair> pairs,
                    const NormalizationStats& norm, std::size_t batch = 256) {
  std::vector<ScoredPair> scored = score_pairs(net, pairs, norm, batch);
  EvalReport report;
  report.variant = net.variant;
  report.roc = roc(scored);
  report.fpr95 = fpr95(scored);
  for (const ScoredPair& s : scored) (is_match(s.label) ? report.n_pos : report.n_neg)++;
  return report;
}

inline std::string report_to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["fpr95"] = report.fpr95;
  j["variant"] = variant_name(report.variant);
  j["pairs"] = {{"positives", report.n_pos}, {"negatives", report.n_neg}};
  j["checkpoint_id"] = report.checkpoint_id;
  j["config_hash"] = report.config_hash;
  nlohmann::ordered_json points = nlohmann::ordered_json::array();
  for (const RocPoint& p : report.roc) points.push_back({p.fpr, p.tpr});
  j["roc"] = std::move(points);
  return j.dump(1) + "\n";
}

}  // namespace hpn
