#pragma once

// SGD-with-momentum training loop: per-batch hard negative mining, flip
// augmentation, the composite hybrid loss, the step LR schedule, early
// stopping on validation loss, best-checkpoint retention, and per-epoch
// loss logging (line-delimited JSON records).
//
// A training batch of N positive pairs is expanded to 2N loss pairs: the N
// positives plus N generated negatives (x_i, y_j) indexed into the same 2N
// unique patches, so each unique patch is encoded once per step.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hpn/data.hpp"
#include "hpn/losses.hpp"
#include "hpn/mining.hpp"
#include "hpn/model.hpp"
#include "hpn/tensor.hpp"
#include "hpn/util.hpp"

namespace hpn {

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int batch_size = 128;
  std::vector<int> lr_drop_epochs{75, 95};  // x0.1 after epoch 75 and again at 95
  double lr_drop_factor = 0.1;
  int early_stop_patience = 10;
  int max_epochs = 120;
  std::uint64_t seed = 1;
  double init_sigma = 0.01;
  MiningConfig mining{};
  LossConfig loss{};

  void validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("train config: lr must be > 0");
    if (momentum < 0.0 || momentum >= 1.0)
      throw std::invalid_argument("train config: momentum must be in [0,1)");
    if (weight_decay < 0.0) throw std::invalid_argument("train config: weight_decay must be >= 0");
    if (batch_size < 2) throw std::invalid_argument("train config: batch_size must be >= 2");
    if (early_stop_patience < 1) throw std::invalid_argument("train config: patience must be >= 1");
    if (max_epochs < 0) throw std::invalid_argument("train config: max_epochs must be >= 0");
    if (!(init_sigma > 0.0)) throw std::invalid_argument("train config: init_sigma must be > 0");
    if (!(lr_drop_factor > 0.0)) throw std::invalid_argument("train config: lr_drop_factor must be > 0");
    mining.validate();
    loss.validate();
  }
};

enum class Arch { kSiameseOnly, kAsymmetricOnly, kHybrid, kHybridAux };

inline const char* arch_name(Arch a) {
  switch (a) {
    case Arch::kSiameseOnly: return "siamese";
    case Arch::kAsymmetricOnly: return "asymmetric";
    case Arch::kHybrid: return "hybrid";
    default: return "hybrid_aux";
  }
}

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double train_total = 0, train_main = 0, train_aux_s = 0, train_aux_a = 0;
  double val_total = 0, val_main = 0, val_aux_s = 0, val_aux_a = 0;
  double mined_fraction = 0;
  double seconds = 0;
};

struct TrainLog {
  std::vector<EpochRecord> records;
};

inline void write_train_log(const TrainLog& log, std::ostream& out, bool stable_timing = false) {
  for (const EpochRecord& r : log.records) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["lr"] = r.lr;
    j["train_total"] = r.train_total;
    j["train_main"] = r.train_main;
    j["train_aux_s"] = r.train_aux_s;
    j["train_aux_a"] = r.train_aux_a;
    j["val_total"] = r.val_total;
    j["val_main"] = r.val_main;
    j["val_aux_s"] = r.val_aux_s;
    j["val_aux_a"] = r.val_aux_a;
    j["mined_fraction"] = r.mined_fraction;
    j["seconds"] = stable_timing ? 0.0 : r.seconds;
    out << j.dump() << "\n";
  }
}

inline TrainLog read_train_log(std::istream& in) {
  TrainLog log;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    EpochRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.lr = j.at("lr").get<double>();
    r.train_total = j.at("train_total").get<double>();
    r.train_main = j.at("train_main").get<double>();
    r.train_aux_s = j.at("train_aux_s").get<double>();
    r.train_aux_a = j.at("train_aux_a").get<double>();
    r.val_total = j.at("val_total").get<double>();
    r.val_main = j.at("val_main").get<double>();
    r.val_aux_s = j.at("val_aux_s").get<double>();
    r.val_aux_a = j.at("val_aux_a").get<double>();
    r.mined_fraction = j.at("mined_fraction").get<double>();
    r.seconds = j.at("seconds").get<double>();
    log.records.push_back(r);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Optimizer.

template <typename T>
struct SgdState {
  std::vector<std::vector<T>> velocity;

  template <typename ParamSpan>
  void init(const ParamSpan& params) {
    velocity.clear();
    for (const auto& p : params)
      velocity.emplace_back(static_cast<std::size_t>(p.tensor.numel()), T(0));
  }
};

/// v <- momentum*v + (grad + weight_decay*param); param <- param - lr*v.
/// Biases are excluded from weight decay. Parameters whose gradient buffer
/// was never touched by the current graph are left untouched.
template <typename T>
void sgd_step(std::span<const ParamRef<T>> params, SgdState<T>& state, double lr,
              double momentum, double weight_decay) {
  if (state.velocity.size() != params.size())
    throw std::invalid_argument("sgd_step: velocity state does not match parameter list");
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const ParamRef<T>& p = params[pi];
    if (!p.tensor.grad_allocated()) continue;
    std::vector<T>& v = state.velocity[pi];
    if (v.size() != static_cast<std::size_t>(p.tensor.numel()))
      throw std::invalid_argument("sgd_step: velocity shape mismatch for " + p.name);
    const T* g = p.tensor.grad_data();
    T* w = p.tensor.mutable_data();
    const T mu = static_cast<T>(momentum);
    const T wd = p.is_bias ? T(0) : static_cast<T>(weight_decay);
    const T step = static_cast<T>(lr);
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = mu * v[i] + (g[i] + wd * w[i]);
      w[i] -= step * v[i];
    }
  }
}

// ---------------------------------------------------------------------------

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int epoch, int batch)
      : std::runtime_error("training diverged (non-finite loss) at epoch " +
                           std::to_string(epoch) + ", batch " + std::to_string(batch)),
        epoch(epoch),
        batch(batch) {}
  int epoch, batch;
};

/// Stops once the monitored value has not improved for `patience`
/// consecutive observations.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {}

  bool observe(double value) {
    if (value < best_) {
      best_ = value;
      since_ = 0;
      improved_ = true;
    } else {
      ++since_;
      improved_ = false;
    }
    return since_ >= patience_;
  }

  bool improved_last() const { return improved_; }
  double best() const { return best_; }

 private:
  int patience_;
  int since_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
  bool improved_ = false;
};

/// Learning rate for a 1-indexed epoch: dropped once for every configured
/// drop epoch already completed.
inline double epoch_lr(const TrainConfig& cfg, int epoch) {
  double lr = cfg.lr;
  for (int d : cfg.lr_drop_epochs)
    if (epoch > d) lr *= cfg.lr_drop_factor;
  return lr;
}

/// Shuffled index order for an epoch; depends only on (seed, epoch), never
/// on the architecture arm, so all ablation arms see identical data order.
inline std::vector<std::uint32_t> epoch_order(std::uint64_t seed, int epoch,
                                              std::span<const std::uint32_t> base) {
  std::vector<std::uint32_t> order(base.begin(), base.end());
  RngEngine rng(derive_seed(seed, {0xE90C, static_cast<std::uint64_t>(epoch)}));
  shuffle_inplace(order, rng);
  return order;
}

// ---------------------------------------------------------------------------
// Arm-specific forward.

template <typename T>
struct ArmEncodings {
  Tensor<T> x_main, y_main;  // vectors consumed by the arm's main loss
  Tensor<T> x_siam, y_siam;  // hybrid arms only
  Tensor<T> x_asym, y_asym;  // hybrid arms only
};

template <typename T>
ArmEncodings<T> arm_encode(const HybridNetwork<T>& net, Arch arch, const Tensor<T>& x_patches,
                           const Tensor<T>& y_patches, Tape<T>* tape = nullptr) {
  ArmEncodings<T> enc;
  switch (arch) {
    case Arch::kSiameseOnly:
      enc.x_main = branch_forward(net.siamese, net.variant, x_patches, tape);
      enc.y_main = branch_forward(net.siamese, net.variant, y_patches, tape);
      break;
    case Arch::kAsymmetricOnly:
      enc.x_main = branch_forward(net.asym_x, net.variant, x_patches, tape);
      enc.y_main = branch_forward(net.asym_y, net.variant, y_patches, tape);
      break;
    default: {
      EncodingBatch<T> ex = encode(net, x_patches, Modality::kX, tape);
      EncodingBatch<T> ey = encode(net, y_patches, Modality::kY, tape);
      enc.x_main = ex.hybrid;
      enc.y_main = ey.hybrid;
      enc.x_siam = ex.siam;
      enc.y_siam = ey.siam;
      enc.x_asym = ex.asym;
      enc.y_asym = ey.asym;
      break;
    }
  }
  return enc;
}

template <typename T>
struct ArmLossParts {
  Tensor<T> total;
  double main = 0, aux_s = 0, aux_a = 0;
};

template <typename T>
ArmLossParts<T> arm_loss(const HybridNetwork<T>& net, Arch arch, const ArmEncodings<T>& enc,
                         std::span<const PairSpec> pairs, const LossConfig& cfg, Tape<T>* tape = nullptr) {
  ArmLossParts<T> out;
  if (arch == Arch::kSiameseOnly || arch == Arch::kAsymmetricOnly) {
    const HeadChoice head = arch == Arch::kSiameseOnly ? HeadChoice::kSiam : HeadChoice::kAsym;
    Tensor<T> term = pair_family_loss(net, enc.x_main, enc.y_main, pairs, head, cfg, tape);
    if (cfg.main_weight != 1.0) term = scale(term, static_cast<T>(cfg.main_weight), tape);
    out.total = term;
    out.main = static_cast<double>(term.value_at(0));
    return out;
  }
  EncodingBatch<T> ex{Modality::kX, enc.x_siam, enc.x_asym, enc.x_main};
  EncodingBatch<T> ey{Modality::kY, enc.y_siam, enc.y_asym, enc.y_main};
  HybridLossParts<T> parts = hybrid_loss(net, ex, ey, pairs, cfg, tape);
  out.total = parts.total;
  out.main = parts.main;
  out.aux_s = parts.aux_siam;
  out.aux_a = parts.aux_asym;
  return out;
}

/// Mining score space for an arm: its own operative descriptors and, for
/// the softmax variant with head scoring, the matching classifier head.
template <typename T>
void arm_mining_score(const HybridNetwork<T>& net, Arch arch, const MiningConfig& cfg,
                      MiningScore& score, std::vector<T>& dir) {
  score = MiningScore::kDistance;
  dir.clear();
  if (net.variant != Variant::kSoftmax || cfg.softmax_score != MiningScore::kHeadProbability)
    return;
  score = MiningScore::kHeadProbability;
  switch (arch) {
    case Arch::kSiameseOnly: dir = head_direction(net.head_siam); break;
    case Arch::kAsymmetricOnly: dir = head_direction(net.head_asym); break;
    default: dir = head_direction(net.head_main); break;
  }
}

// ---------------------------------------------------------------------------

template <typename T>
struct TrainResult {
  TrainLog log;
  std::vector<std::uint8_t> best_checkpoint;
  NormalizationStats stats;
};

struct TrainHooks {
  // Called whenever validation improves, with the serialized checkpoint.
  std::function<void(std::span<const std::uint8_t>, int)> on_best;
};

namespace detail {

template <typename T>
Tensor<T> vstack_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("vstack_rows: no parts");
  const int d = parts.front().dim(1);
  int rows = 0;
  for (const Tensor<T>& p : parts) rows += p.dim(0);
  Tensor<T> out = Tensor<T>::zeros({rows, d});
  T* dst = out.mutable_data();
  for (const Tensor<T>& p : parts) {
    std::copy(p.values().begin(), p.values().end(), dst);
    dst += p.numel();
  }
  return out;
}

}  // namespace detail

template <typename T>
TrainResult<T> train(HybridNetwork<T>& net, std::span<const PatchPair> pairs,
                     const DatasetSplit& split, const TrainConfig& cfg,
                     Arch arch = Arch::kHybridAux, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (cfg.loss.variant != net.variant)
    throw std::invalid_argument("train: config variant does not match network variant");

  // Effective loss weights per arm; the plain hybrid arm zeroes the
  // auxiliary terms.
  LossConfig loss_cfg = cfg.loss;
  if (arch == Arch::kHybrid) {
    loss_cfg.aux_weight_siam = 0.0;
    loss_cfg.aux_weight_asym = 0.0;
  }

  std::vector<std::uint32_t> train_pos, val_pos;
  for (std::uint32_t i : split.train)
    if (is_match(pairs[i].label)) train_pos.push_back(i);
  for (std::uint32_t i : split.val)
    if (is_match(pairs[i].label)) val_pos.push_back(i);
  if (train_pos.size() < 2) throw std::invalid_argument("train: need at least 2 training positives");
  if (val_pos.size() < 2) throw std::invalid_argument("train: need at least 2 validation positives");

  const NormalizationStats norm = compute_stats(pairs, train_pos);

  // Fixed validation negatives: one random pairing per validation positive,
  // generated once (no augmentation, no mining on the validation side).
  std::vector<PairSpec> val_pairs;
  {
    const std::size_t nv = val_pos.size();
    RngEngine rng(derive_seed(cfg.seed, {0x7A11}));
    for (std::size_t i = 0; i < nv; ++i)
      val_pairs.push_back({static_cast<std::int32_t>(i), static_cast<std::int32_t>(i), Label::kMatch});
    for (std::size_t i = 0; i < nv; ++i) {
      std::size_t j = uniform_index(rng, nv - 1);
      if (j >= i) ++j;
      val_pairs.push_back({static_cast<std::int32_t>(i), static_cast<std::int32_t>(j), Label::kNonMatch});
    }
  }

  auto params = parameters(net);
  SgdState<T> sgd;
  sgd.init(params);

  TrainResult<T> result;
  result.stats = norm;
  result.best_checkpoint = export_params(net);
  EarlyStopper stopper(cfg.early_stop_patience);

  const std::size_t kEvalBatch = 256;
  auto validate_epoch = [&]() {
    std::vector<Tensor<T>> xm, ym, xs, ys, xa, ya;
    for (std::size_t at = 0; at < val_pos.size(); at += kEvalBatch) {
      const std::size_t n = std::min(kEvalBatch, val_pos.size() - at);
      std::vector<const PatchData*> px(n), py(n);
      for (std::size_t i = 0; i < n; ++i) {
        const PatchPair& p = pairs[val_pos[at + i]];
        px[i] = &p.x;
        py[i] = &p.y;
      }
      Tensor<T> xb = patch_batch<T>(px, norm.mean_x, norm.std_x);
      Tensor<T> yb = patch_batch<T>(py, norm.mean_y, norm.std_y);
      ArmEncodings<T> enc = arm_encode(net, arch, xb, yb);
      xm.push_back(enc.x_main);
      ym.push_back(enc.y_main);
      if (enc.x_siam.defined()) {
        xs.push_back(enc.x_siam);
        ys.push_back(enc.y_siam);
        xa.push_back(enc.x_asym);
        ya.push_back(enc.y_asym);
      }
    }
    ArmEncodings<T> full;
    full.x_main = detail::vstack_rows(xm);
    full.y_main = detail::vstack_rows(ym);
    if (!xs.empty()) {
      full.x_siam = detail::vstack_rows(xs);
      full.y_siam = detail::vstack_rows(ys);
      full.x_asym = detail::vstack_rows(xa);
      full.y_asym = detail::vstack_rows(ya);
    }
    return arm_loss(net, arch, full, val_pairs, loss_cfg);
  };

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto wall_start = std::chrono::steady_clock::now();
    const double lr = epoch_lr(cfg, epoch);
    const std::vector<std::uint32_t> order = epoch_order(cfg.seed, epoch, train_pos);
    RngEngine rng_mine(derive_seed(cfg.seed, {0x391E, static_cast<std::uint64_t>(epoch)}));
    RngEngine rng_aug(derive_seed(cfg.seed, {0x0A26, static_cast<std::uint64_t>(epoch)}));

    double sum_total = 0, sum_main = 0, sum_aux_s = 0, sum_aux_a = 0;
    std::size_t pair_count = 0, mined_count = 0, negative_count = 0;
    const bool mine_now = cfg.mining.enabled && epoch >= cfg.mining.start_epoch;

    int batch_index = 0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t n = std::min(order.size() - at, static_cast<std::size_t>(cfg.batch_size));
      if (n < 2) break;  // a single leftover positive cannot form a negative
      std::vector<const PatchPair*> raw(n);
      for (std::size_t i = 0; i < n; ++i) raw[i] = &pairs[order[at + i]];

      // Per-pair flip masks, drawn in batch order.
      std::vector<PatchPair> augmented(n);
      for (std::size_t i = 0; i < n; ++i) augmented[i] = augment(*raw[i], rng_aug);

      Tensor<T> xb = patch_batch<T>(augmented, Modality::kX, norm);
      Tensor<T> yb = patch_batch<T>(augmented, Modality::kY, norm);

      Tape<T> tape;
      ArmEncodings<T> enc = arm_encode(net, arch, xb, yb, &tape);

      // Negative row selection reads the step's cached descriptor values;
      // no gradients flow through the selection itself.
      std::vector<std::int32_t> neg_rows;
      MiningStats mstats;
      if (mine_now) {
        MiningScore score;
        std::vector<T> dir;
        arm_mining_score(net, arch, cfg.mining, score, dir);
        neg_rows = mine_negative_rows(enc.x_main, enc.y_main, score, dir, cfg.mining.h_m,
                                      rng_mine, &mstats);
      } else {
        neg_rows.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
          std::size_t j = uniform_index(rng_mine, n - 1);
          if (j >= i) ++j;
          neg_rows[i] = static_cast<std::int32_t>(j);
        }
        mstats.randomly_drawn = n;
      }
      mined_count += mstats.mined;
      negative_count += n;

      std::vector<PairSpec> batch_pairs;
      batch_pairs.reserve(2 * n);
      for (std::size_t i = 0; i < n; ++i)
        batch_pairs.push_back({static_cast<std::int32_t>(i), static_cast<std::int32_t>(i), Label::kMatch});
      for (std::size_t i = 0; i < n; ++i)
        batch_pairs.push_back({static_cast<std::int32_t>(i), neg_rows[i], Label::kNonMatch});

      ArmLossParts<T> loss = arm_loss(net, arch, enc, batch_pairs, loss_cfg, &tape);
      const double total = static_cast<double>(loss.total.value_at(0));
      if (!std::isfinite(total)) throw DivergenceError(epoch, batch_index);

      for (const auto& p : params) p.tensor.reset_grad();
      tape.backward_release(loss.total);
      sgd_step(std::span<const ParamRef<T>>(params), sgd, lr, cfg.momentum, cfg.weight_decay);

      const double w = static_cast<double>(2 * n);
      sum_total += total * w;
      sum_main += loss.main * w;
      sum_aux_s += loss.aux_s * w;
      sum_aux_a += loss.aux_a * w;
      pair_count += 2 * n;
      ++batch_index;
    }

    ArmLossParts<T> val = validate_epoch();
    const double val_total = static_cast<double>(val.total.value_at(0));
    if (!std::isfinite(val_total)) throw DivergenceError(epoch, -1);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    if (pair_count > 0) {
      rec.train_total = sum_total / static_cast<double>(pair_count);
      rec.train_main = sum_main / static_cast<double>(pair_count);
      rec.train_aux_s = sum_aux_s / static_cast<double>(pair_count);
      rec.train_aux_a = sum_aux_a / static_cast<double>(pair_count);
    }
    rec.val_total = val_total;
    rec.val_main = val.main;
    rec.val_aux_s = val.aux_s;
    rec.val_aux_a = val.aux_a;
    rec.mined_fraction = negative_count
                             ? static_cast<double>(mined_count) / static_cast<double>(negative_count)
                             : 0.0;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
    result.log.records.push_back(rec);

    const bool stop = stopper.observe(val_total);
    if (stopper.improved_last()) {
      result.best_checkpoint = export_params(net);
      if (hooks.on_best) hooks.on_best(result.best_checkpoint, epoch);
    }
    if (stop) break;
  }

  // Hand back the best-validation parameters.
  if (!result.log.records.empty()) {
    HybridNetwork<T> best = import_params<T>(result.best_checkpoint);
    auto src = parameters(best);
    for (std::size_t i = 0; i < params.size(); ++i)
      std::copy(src[i].tensor.values().begin(), src[i].tensor.values().end(),
                params[i].tensor.mutable_values().begin());
  }
  return result;
}

/// One ablation arm of the auxiliary-loss study, trained from a fresh
/// seed-deterministic initialization.
template <typename T>
TrainLog ablation_run(std::span<const PatchPair> pairs, const DatasetSplit& split, Arch arch,
                      const TrainConfig& cfg) {
  HybridNetwork<T> net = make_network<T>(cfg.loss.variant);
  init_params(net, cfg.seed, cfg.init_sigma);
  return train(net, pairs, split, cfg, arch).log;
}

}  // namespace hpn
