#pragma once

// The hybrid matching network: a weight-sharing Siamese branch, two
// modality-specific asymmetric branches, per-modality 256->128 merge layers
// producing the encodings x_hat / y_hat, and (for the softmax variant)
// three independent 128->2 classifier heads. Includes parameter init,
// the versioned binary checkpoint format, and per-pair scoring.

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hpn/tensor.hpp"
#include "hpn/util.hpp"

namespace hpn {

enum class Variant : std::uint8_t { kL2Hinge = 0, kSoftmax = 1 };
enum class Modality : std::uint8_t { kX = 0, kY = 1 };

inline const char* variant_name(Variant v) {
  return v == Variant::kL2Hinge ? "l2" : "softmax";
}

inline constexpr int kPatchSize = 64;
inline constexpr int kDescriptorDim = 128;
inline constexpr double kUnitNormEps = 1e-8;

struct ConvSpec {
  int in_ch, out_ch, k, stride, pad;
};

/// Convolution stack of one sub-network branch. Both variants share the
/// first five layers; the softmax variant appends a sixth 3x3 conv.
inline std::vector<ConvSpec> branch_conv_plan(Variant v) {
  std::vector<ConvSpec> plan = {
      {1, 32, 5, 1, 2}, {32, 64, 5, 1, 2}, {64, 128, 3, 1, 1},
      {128, 256, 3, 1, 0}, {256, 256, 3, 1, 0}};
  if (v == Variant::kSoftmax) plan.push_back({256, 256, 3, 1, 0});
  return plan;
}

// A 3x3/stride-2 boundary-clamped pool follows each of the first three convs.
inline constexpr int kPooledConvs = 3;
inline constexpr int kPoolK = 3;
inline constexpr int kPoolStride = 2;

inline int branch_fc_input_dim(Variant v) {
  // 4x4x256 for the five-conv stack, 2x2x256 after the sixth conv.
  return v == Variant::kL2Hinge ? 4 * 4 * 256 : 2 * 2 * 256;
}

template <typename T>
struct ConvLayer {
  Tensor<T> w, b;
};

template <typename T>
struct LinearLayer {
  Tensor<T> w, b;
  bool defined() const { return w.defined(); }
};

template <typename T>
struct BranchParams {
  std::vector<ConvLayer<T>> convs;
  LinearLayer<T> fc;
};

template <typename T>
struct HybridNetwork {
  Variant variant = Variant::kL2Hinge;
  BranchParams<T> siamese;   // shared mapping W_s, one storage used by both paths
  BranchParams<T> asym_x;    // W_x
  BranchParams<T> asym_y;    // W_y
  LinearLayer<T> merge_x;    // FC_x: 256 -> 128
  LinearLayer<T> merge_y;    // FC_y: 256 -> 128
  // Softmax-variant classifier heads (128 -> 2), independent per loss term.
  LinearLayer<T> head_main, head_siam, head_asym;
};

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T> tensor;
  bool is_bias;
};

namespace detail {

template <typename T>
BranchParams<T> make_branch(Variant v, bool requires_grad) {
  BranchParams<T> br;
  for (const ConvSpec& c : branch_conv_plan(v)) {
    br.convs.push_back({Tensor<T>::zeros({c.out_ch, c.in_ch, c.k, c.k}, requires_grad),
                        Tensor<T>::zeros({c.out_ch}, requires_grad)});
  }
  br.fc.w = Tensor<T>::zeros({kDescriptorDim, branch_fc_input_dim(v)}, requires_grad);
  br.fc.b = Tensor<T>::zeros({kDescriptorDim}, requires_grad);
  return br;
}

template <typename T>
LinearLayer<T> make_linear(int out_dim, int in_dim, bool requires_grad) {
  return {Tensor<T>::zeros({out_dim, in_dim}, requires_grad),
          Tensor<T>::zeros({out_dim}, requires_grad)};
}

template <typename T>
void branch_params(const std::string& prefix, const BranchParams<T>& br,
                   std::vector<ParamRef<T>>& out) {
  for (std::size_t i = 0; i < br.convs.size(); ++i) {
    out.push_back({prefix + ".conv" + std::to_string(i) + ".w", br.convs[i].w, false});
    out.push_back({prefix + ".conv" + std::to_string(i) + ".b", br.convs[i].b, true});
  }
  out.push_back({prefix + ".fc.w", br.fc.w, false});
  out.push_back({prefix + ".fc.b", br.fc.b, true});
}

}  // namespace detail

template <typename T>
HybridNetwork<T> make_network(Variant v, bool requires_grad = true) {
  HybridNetwork<T> net;
  net.variant = v;
  net.siamese = detail::make_branch<T>(v, requires_grad);
  net.asym_x = detail::make_branch<T>(v, requires_grad);
  net.asym_y = detail::make_branch<T>(v, requires_grad);
  net.merge_x = detail::make_linear<T>(kDescriptorDim, 2 * kDescriptorDim, requires_grad);
  net.merge_y = detail::make_linear<T>(kDescriptorDim, 2 * kDescriptorDim, requires_grad);
  if (v == Variant::kSoftmax) {
    net.head_main = detail::make_linear<T>(2, kDescriptorDim, requires_grad);
    net.head_siam = detail::make_linear<T>(2, kDescriptorDim, requires_grad);
    net.head_asym = detail::make_linear<T>(2, kDescriptorDim, requires_grad);
  }
  return net;
}

/// All learnable tensors in declared (checkpoint) order.
template <typename T>
std::vector<ParamRef<T>> parameters(const HybridNetwork<T>& net) {
  std::vector<ParamRef<T>> out;
  detail::branch_params("siamese", net.siamese, out);
  detail::branch_params("asym_x", net.asym_x, out);
  detail::branch_params("asym_y", net.asym_y, out);
  out.push_back({"merge_x.w", net.merge_x.w, false});
  out.push_back({"merge_x.b", net.merge_x.b, true});
  out.push_back({"merge_y.w", net.merge_y.w, false});
  out.push_back({"merge_y.b", net.merge_y.b, true});
  if (net.variant == Variant::kSoftmax) {
    out.push_back({"head_main.w", net.head_main.w, false});
    out.push_back({"head_main.b", net.head_main.b, true});
    out.push_back({"head_siam.w", net.head_siam.w, false});
    out.push_back({"head_siam.b", net.head_siam.b, true});
    out.push_back({"head_asym.w", net.head_asym.w, false});
    out.push_back({"head_asym.b", net.head_asym.b, true});
  }
  return out;
}

template <typename T>
std::int64_t parameter_count(const HybridNetwork<T>& net) {
  std::int64_t n = 0;
  for (const auto& p : parameters(net)) n += p.tensor.numel();
  return n;
}

/// Weights ~ N(0, sigma^2), biases zero; the two asymmetric branches start
/// from identical values and diverge during training.
template <typename T>
void init_params(HybridNetwork<T>& net, std::uint64_t rng_seed, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("init_params: sigma must be > 0");
  RngEngine rng(derive_seed(rng_seed, {0x1217}));
  GaussianSampler gauss(rng);
  auto fill_branch = [&](BranchParams<T>& br) {
    for (auto& c : br.convs) {
      for (T& v : c.w.mutable_values()) v = static_cast<T>(gauss.next() * sigma);
      for (T& v : c.b.mutable_values()) v = T(0);
    }
    for (T& v : br.fc.w.mutable_values()) v = static_cast<T>(gauss.next() * sigma);
    for (T& v : br.fc.b.mutable_values()) v = T(0);
  };
  auto fill_linear = [&](LinearLayer<T>& l) {
    for (T& v : l.w.mutable_values()) v = static_cast<T>(gauss.next() * sigma);
    for (T& v : l.b.mutable_values()) v = T(0);
  };
  fill_branch(net.siamese);
  fill_branch(net.asym_x);
  // Identical initialization of the asymmetric subnets (distinct storage).
  for (std::size_t i = 0; i < net.asym_x.convs.size(); ++i) {
    std::copy(net.asym_x.convs[i].w.values().begin(), net.asym_x.convs[i].w.values().end(),
              net.asym_y.convs[i].w.mutable_values().begin());
    std::copy(net.asym_x.convs[i].b.values().begin(), net.asym_x.convs[i].b.values().end(),
              net.asym_y.convs[i].b.mutable_values().begin());
  }
  std::copy(net.asym_x.fc.w.values().begin(), net.asym_x.fc.w.values().end(),
            net.asym_y.fc.w.mutable_values().begin());
  std::copy(net.asym_x.fc.b.values().begin(), net.asym_x.fc.b.values().end(),
            net.asym_y.fc.b.mutable_values().begin());
  fill_linear(net.merge_x);
  fill_linear(net.merge_y);
  if (net.variant == Variant::kSoftmax) {
    fill_linear(net.head_main);
    fill_linear(net.head_siam);
    fill_linear(net.head_asym);
  }
}

// ---------------------------------------------------------------------------
// Forward passes.

/// Counts patches pushed through encode(); tests probe it to verify the
/// mining cost contract.
struct EncodeCounter {
  static inline thread_local std::uint64_t patches = 0;
};

/// One sub-network: conv/relu stacks with pools after the first three
/// convs, then FC; the L2 variant ends with unit normalization.
/// `trace`, when given, receives (layer name, output shape) per layer.
template <typename T>
Tensor<T> branch_forward(const BranchParams<T>& br, Variant v, const Tensor<T>& patches,
                         Tape<T>* tape = nullptr,
                         std::vector<std::pair<std::string, Shape>>* trace = nullptr) {
  Tensor<T> h = patches;
  for (std::size_t i = 0; i < br.convs.size(); ++i) {
    const ConvSpec spec = branch_conv_plan(v)[i];
    h = conv2d(h, br.convs[i].w, br.convs[i].b, spec.stride, spec.pad, tape);
    h = relu(h, tape);
    if (trace) trace->push_back({"conv" + std::to_string(i), h.shape()});
    if (i < kPooledConvs) {
      h = maxpool2d(h, kPoolK, kPoolStride, /*ceil_mode=*/true, tape);
      if (trace) trace->push_back({"pool" + std::to_string(i), h.shape()});
    }
  }
  h = reshape(h, {h.dim(0), static_cast<int>(h.numel() / h.dim(0))}, tape);
  h = linear(h, br.fc.w, br.fc.b, tape);
  if (trace) trace->push_back({"fc", h.shape()});
  if (v == Variant::kL2Hinge) {
    h = unit_normalize(h, static_cast<T>(kUnitNormEps), tape);
    if (trace) trace->push_back({"unit_norm", h.shape()});
  }
  return h;
}

template <typename T>
struct EncodingBatch {
  Modality modality;
  Tensor<T> siam;    // W_s(p), [N,128]
  Tensor<T> asym;    // W_x(p) or W_y(p), [N,128]
  Tensor<T> hybrid;  // merge(concat(siam, asym)), [N,128]
};

template <typename T>
void check_patch_batch(const Tensor<T>& patches) {
  if (patches.rank() != 4 || patches.dim(1) != 1 || patches.dim(2) != kPatchSize ||
      patches.dim(3) != kPatchSize)
    throw std::invalid_argument("encode: patches must be [N,1,64,64], got " +
                                shape_str(patches.shape()));
}

/// Full per-modality encoding: shared branch, modality branch, and the
/// hybrid merge. In the L2 variant all three vectors are unit-normalized.
template <typename T>
EncodingBatch<T> encode(const HybridNetwork<T>& net, const Tensor<T>& patches,
                        Modality m, Tape<T>* tape = nullptr) {
  check_patch_batch(patches);
  EncodeCounter::patches += static_cast<std::uint64_t>(patches.dim(0));
  EncodingBatch<T> enc;
  enc.modality = m;
  enc.siam = branch_forward(net.siamese, net.variant, patches, tape);
  const BranchParams<T>& asym_branch = (m == Modality::kX) ? net.asym_x : net.asym_y;
  enc.asym = branch_forward(asym_branch, net.variant, patches, tape);
  const LinearLayer<T>& merge = (m == Modality::kX) ? net.merge_x : net.merge_y;
  Tensor<T> joined = concat(enc.siam, enc.asym, tape);
  enc.hybrid = linear(joined, merge.w, merge.b, tape);
  if (net.variant == Variant::kL2Hinge)
    enc.hybrid = unit_normalize(enc.hybrid, static_cast<T>(kUnitNormEps), tape);
  return enc;
}

template <typename T>
struct Encoding {
  Modality modality;
  std::vector<T> siam, asym, hybrid;
};

template <typename T>
Encoding<T> get_encoding(const EncodingBatch<T>& batch, int row) {
  const int n = batch.hybrid.dim(0);
  if (row < 0 || row >= n) throw std::out_of_range("get_encoding: row out of range");
  auto take = [row](const Tensor<T>& t) {
    const T* p = t.data() + static_cast<std::int64_t>(row) * t.dim(1);
    return std::vector<T>(p, p + t.dim(1));
  };
  return Encoding<T>{batch.modality, take(batch.siam), take(batch.asym), take(batch.hybrid)};
}

/// Pair similarity. L2 variant: the descriptor L2 distance (lower is more
/// similar). Softmax variant: the match probability from the main head
/// applied to x_hat + y_hat (higher is more similar).
template <typename T>
double score_pair(const HybridNetwork<T>& net, const Encoding<T>& ex, const Encoding<T>& ey) {
  if (ex.modality != Modality::kX || ey.modality != Modality::kY)
    throw std::invalid_argument("score_pair: expects (modality X, modality Y) encodings");
  if (ex.hybrid.size() != ey.hybrid.size())
    throw std::invalid_argument("score_pair: encoding widths differ");
  if (net.variant == Variant::kL2Hinge) {
    double s = 0;
    for (std::size_t i = 0; i < ex.hybrid.size(); ++i) {
      const double d = static_cast<double>(ex.hybrid[i]) - static_cast<double>(ey.hybrid[i]);
      s += d * d;
    }
    return std::sqrt(s);
  }
  if (!net.head_main.defined())
    throw std::invalid_argument("score_pair: softmax variant requires the classifier head");
  const int d = kDescriptorDim;
  double l0 = static_cast<double>(net.head_main.b.value_at(0));
  double l1 = static_cast<double>(net.head_main.b.value_at(1));
  const T* w = net.head_main.w.data();
  for (int j = 0; j < d; ++j) {
    const double s = static_cast<double>(ex.hybrid[static_cast<std::size_t>(j)]) +
                     static_cast<double>(ey.hybrid[static_cast<std::size_t>(j)]);
    l0 += static_cast<double>(w[j]) * s;
    l1 += static_cast<double>(w[d + j]) * s;
  }
  const double m = std::max(l0, l1);
  const double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
  return e1 / (e0 + e1);
}

/// Row difference w_match - w_nonmatch of a 128->2 classifier head. The
/// head's match probability is monotone in the dot product of this vector
/// with the summed encodings, which makes candidate ranking a single dot
/// product per descriptor.
template <typename T>
std::vector<T> head_direction(const LinearLayer<T>& head) {
  if (!head.defined()) throw std::invalid_argument("head_direction: classifier head is empty");
  std::vector<T> dir(static_cast<std::size_t>(kDescriptorDim));
  const T* w = head.w.data();
  for (int j = 0; j < kDescriptorDim; ++j)
    dir[static_cast<std::size_t>(j)] = w[kDescriptorDim + j] - w[j];
  return dir;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "HYBN", u16 version, u8 variant, shape table, then all
// parameters as little-endian f32 in declared layer order.

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kBadMagic, kBadVersion, kVariantMismatch, kShapeMismatch, kTruncated };
  CheckpointError(Kind k, const std::string& msg)
      : std::runtime_error("checkpoint: " + msg), kind(k) {}
  Kind kind;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

inline std::vector<Shape> expected_param_shapes(Variant v) {
  auto net = make_network<float>(v, false);
  std::vector<Shape> shapes;
  for (const auto& p : parameters(net)) shapes.push_back(p.tensor.shape());
  return shapes;
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> export_params(const HybridNetwork<T>& net) {
  ByteWriter w;
  w.magic("HYBN");
  w.u16(kCheckpointVersion);
  w.u8(static_cast<std::uint8_t>(net.variant));
  auto params = parameters(net);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.u8(static_cast<std::uint8_t>(p.tensor.rank()));
    for (int d : p.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
  }
  for (const auto& p : params)
    for (T v : p.tensor.values()) w.f32(static_cast<float>(v));
  return w.take();
}

template <typename T>
HybridNetwork<T> import_params(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (!r.magic("HYBN")) throw CheckpointError(CheckpointError::Kind::kBadMagic, "bad magic (expected HYBN)");
  std::uint16_t version = 0;
  if (!r.u16(version)) throw CheckpointError(CheckpointError::Kind::kTruncated, "truncated header");
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointError::Kind::kBadVersion,
                          "unsupported version " + std::to_string(version));
  std::uint8_t variant_byte = 0;
  if (!r.u8(variant_byte)) throw CheckpointError(CheckpointError::Kind::kTruncated, "truncated header");
  if (variant_byte > 1)
    throw CheckpointError(CheckpointError::Kind::kVariantMismatch,
                          "unknown variant tag " + std::to_string(variant_byte));
  const Variant variant = static_cast<Variant>(variant_byte);

  std::uint32_t count = 0;
  if (!r.u32(count)) throw CheckpointError(CheckpointError::Kind::kTruncated, "truncated shape table");
  std::vector<Shape> shapes(count);
  for (auto& s : shapes) {
    std::uint8_t nd = 0;
    if (!r.u8(nd)) throw CheckpointError(CheckpointError::Kind::kTruncated, "truncated shape table");
    s.resize(nd);
    for (auto& d : s) {
      std::uint32_t v = 0;
      if (!r.u32(v)) throw CheckpointError(CheckpointError::Kind::kTruncated, "truncated shape table");
      d = static_cast<int>(v);
    }
  }

  const std::vector<Shape> expected = detail::expected_param_shapes(variant);
  if (shapes != expected) {
    const Variant other = variant == Variant::kL2Hinge ? Variant::kSoftmax : Variant::kL2Hinge;
    if (shapes == detail::expected_param_shapes(other))
      throw CheckpointError(CheckpointError::Kind::kVariantMismatch,
                            std::string("shape table matches variant '") + variant_name(other) +
                                "' but header declares '" + variant_name(variant) + "'");
    throw CheckpointError(CheckpointError::Kind::kShapeMismatch,
                          "shape table does not match the " + std::string(variant_name(variant)) +
                              " architecture");
  }

  HybridNetwork<T> net = make_network<T>(variant, true);
  auto params = parameters(net);
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (T& v : params[i].tensor.mutable_values()) {
      float f = 0;
      if (!r.f32(f))
        throw CheckpointError(CheckpointError::Kind::kTruncated,
                              "truncated parameter data in " + params[i].name);
      v = static_cast<T>(f);
    }
  }
  if (!r.done())
    throw CheckpointError(CheckpointError::Kind::kTruncated,
                          std::to_string(r.remaining()) + " unexpected trailing bytes");
  return net;
}

template <typename T>
void save_checkpoint(const HybridNetwork<T>& net, const std::string& path) {
  auto bytes = export_params(net);
  write_file_bytes(path, bytes);
}

template <typename T>
HybridNetwork<T> load_checkpoint(const std::string& path) {
  return import_params<T>(read_file_bytes(path));
}

}  // namespace hpn
