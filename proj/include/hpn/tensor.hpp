#pragma once

// Dense row-major tensors with tape-based reverse-mode automatic
// differentiation. Every layer primitive the network needs lives here:
// conv2d (cross-correlation), maxpool2d, linear, relu, unit_normalize,
// concat, plus the small glue ops (reshape, gather_rows, add, scale,
// reductions, row L2 distance).
//
// Conventions:
//  - Activations are [N, C, H, W]; matrices are [rows, cols]; all storage
//    is row-major and contiguous.
//  - A Tensor is a cheap handle to a shared node; handle constness does not
//    imply value constness (grad accumulation goes through const handles,
//    like the pointee of a shared_ptr).
//  - Ops record their backward closure on a Tape when one is passed and an
//    input requires gradients; with a null tape they are pure forward.
//  - Gradients accumulate additively, which is what makes weight sharing
//    (the Siamese branch) come out right.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hpn/util.hpp"

namespace hpn {

namespace detail {

// Allocator whose default construct leaves trivials uninitialized; op
// outputs are fully overwritten, so zero-filling them first is pure memory
// traffic.
template <typename T, typename A = std::allocator<T>>
class default_init_allocator : public A {
 public:
  template <typename U>
  struct rebind {
    using other = default_init_allocator<U, typename std::allocator_traits<A>::template rebind_alloc<U>>;
  };
  using A::A;
  template <typename U>
  void construct(U* ptr) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(ptr)) U;
  }
  template <typename U, typename... Args>
  void construct(U* ptr, Args&&... args) {
    std::allocator_traits<A>::construct(static_cast<A&>(*this), ptr, std::forward<Args>(args)...);
  }
};

}  // namespace detail

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline int ceil_div_int(int a, int b) {
  return a >= 0 ? (a + b - 1) / b : -((-a) / b);
}

/// Output extent of a convolution along one spatial axis.
inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

/// Output extent of a pooling window along one spatial axis.
inline int pool_out_dim(int in, int k, int stride, bool ceil_mode) {
  int out = ceil_mode ? ceil_div_int(in - k, stride) + 1 : (in - k) / stride + 1;
  // In ceil mode the last window is clamped to the boundary but must still
  // start inside the input.
  if (ceil_mode && out > 1 && (out - 1) * stride >= in) --out;
  return out;
}

template <typename T>
class Tensor {
  using ValueVec = std::vector<T, detail::default_init_allocator<T>>;
  struct Node {
    Shape shape;
    ValueVec value;
    std::vector<T> grad;  // allocated on first use, same length as value
    bool requires_grad = false;
  };

 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t = uninitialized(std::move(shape), requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), T(0));
    return t;
  }

  /// Uninitialized storage; callers must write every element.
  static Tensor uninitialized(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    std::int64_t count = shape_numel(shape);
    if (count < 0) throw std::invalid_argument("tensor shape " + shape_str(shape) + " has negative extent");
    n->shape = std::move(shape);
    n->value.resize(static_cast<std::size_t>(count));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.assign(data.begin(), data.end());
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool v) const { node_->requires_grad = v; }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() const { return node_->value; }
  const T* data() const { return node_->value.data(); }
  T* mutable_data() const { return node_->value.data(); }
  T value_at(std::int64_t i) const { return node_->value[static_cast<std::size_t>(i)]; }

  bool grad_allocated() const { return !node_->grad.empty(); }

  /// Gradient buffer, zero-allocated on first access.
  std::span<T> grad() const {
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
    return node_->grad;
  }
  T* grad_data() const { return grad().data(); }

  void reset_grad() const {
    if (node_->grad.empty())
      node_->grad.assign(node_->value.size(), T(0));
    else
      std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }
  void drop_grad() const {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }

  /// Deep copy of the values (gradient state is not copied).
  Tensor clone() const {
    Tensor t = uninitialized(node_->shape, node_->requires_grad);
    std::copy(node_->value.begin(), node_->value.end(), t.node_->value.begin());
    return t;
  }

  bool same_node(const Tensor& o) const { return node_ == o.node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;
};

// ---------------------------------------------------------------------------
// Activation capture/replay. Gradient-verification code freezes the
// nonsmooth choices (relu sign masks, pooling argmax) recorded at a base
// point and replays them during finite-difference evaluations, so the
// measured function is differentiable at the measurement point while the
// backward path under test stays the production one.

class ActivationReplay {
 public:
  void begin_capture() {
    relu_masks_.clear();
    pool_argmax_.clear();
    relu_idx_ = pool_idx_ = 0;
    capturing_ = true;
    active_ = this;
  }
  void begin_replay() {
    relu_idx_ = pool_idx_ = 0;
    capturing_ = false;
    active_ = this;
  }
  void end() { active_ = nullptr; }

  static ActivationReplay* active() { return active_; }
  bool capturing() const { return capturing_; }

  std::shared_ptr<std::vector<std::uint8_t>> relu_mask(std::size_t expected_size) {
    if (capturing_) throw std::logic_error("relu_mask queried while capturing");
    if (relu_idx_ >= relu_masks_.size()) throw std::logic_error("activation replay: relu sequence exhausted");
    auto m = relu_masks_[relu_idx_++];
    if (m->size() != expected_size) throw std::logic_error("activation replay: relu mask size mismatch");
    return m;
  }
  void push_relu_mask(std::shared_ptr<std::vector<std::uint8_t>> m) {
    relu_masks_.push_back(std::move(m));
    ++relu_idx_;
  }
  std::shared_ptr<std::vector<std::int32_t>> pool_plan(std::size_t expected_size) {
    if (capturing_) throw std::logic_error("pool_plan queried while capturing");
    if (pool_idx_ >= pool_argmax_.size()) throw std::logic_error("activation replay: pool sequence exhausted");
    auto p = pool_argmax_[pool_idx_++];
    if (p->size() != expected_size) throw std::logic_error("activation replay: pool argmax size mismatch");
    return p;
  }
  void push_pool_plan(std::shared_ptr<std::vector<std::int32_t>> p) {
    pool_argmax_.push_back(std::move(p));
    ++pool_idx_;
  }

 private:
  static inline thread_local ActivationReplay* active_ = nullptr;
  std::vector<std::shared_ptr<std::vector<std::uint8_t>>> relu_masks_;
  std::vector<std::shared_ptr<std::vector<std::int32_t>>> pool_argmax_;
  std::size_t relu_idx_ = 0, pool_idx_ = 0;
  bool capturing_ = false;
};

// ---------------------------------------------------------------------------
// Computation tape.

template <typename T>
class Tape {
 public:
  /// Registers an op output and its backward closure. Closures run in exact
  /// reverse execution order and may only touch tensors they captured.
  void record(Tensor<T> out, std::function<void()> back) {
    entries_.push_back(Entry{std::move(out), std::move(back), nullptr});
  }
  void record(Tensor<T> out, std::function<void()> back, const char* tag) {
    entries_.push_back(Entry{std::move(out), std::move(back), tag});
  }

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Backward pass. Intermediate grads are reset each call; leaf grads
  /// (parameters) accumulate, so calling twice doubles them.
  void backward(const Tensor<T>& loss) { run(loss, false); }

  /// Single-shot backward that releases each closure right after it runs,
  /// freeing saved activations as the walk proceeds. Empties the tape.
  void backward_release(const Tensor<T>& loss) {
    run(loss, true);
    entries_.clear();
  }

 private:
  void run(const Tensor<T>& loss, bool release) {
    if (!loss.defined() || loss.numel() != 1)
      throw std::invalid_argument("backward: loss must be a scalar tensor");
    if (!loss.requires_grad())
      throw std::invalid_argument("backward: loss does not require grad (not connected to this tape)");
    const bool prof = std::getenv("HPN_PROF_BACKWARD") != nullptr;
    auto t0 = std::chrono::steady_clock::now();
    // Intermediate grads allocate lazily (zeroed) on first accumulation;
    // only grads left over from a previous pass need an explicit reset.
    for (auto& e : entries_)
      if (e.out.grad_allocated()) e.out.reset_grad();
    if (prof) {
      std::fprintf(stderr, "[tape] reset_grad: %.3f s\n",
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    loss.grad()[0] = T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (prof) t0 = std::chrono::steady_clock::now();
      it->back();
      if (prof) {
        std::fprintf(stderr, "[tape] %-12s %.3f s\n", it->tag ? it->tag : "?",
                     std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      }
      if (release) it->back = nullptr;
    }
  }

  struct Entry {
    Tensor<T> out;
    std::function<void()> back;
    const char* tag;
  };
  std::vector<Entry> entries_;
};

// ---------------------------------------------------------------------------
// Internals shared by the conv/linear kernels.

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatRM<T>>;
template <typename T>
using StrideM = Eigen::Map<MatRM<T>, Eigen::Unaligned,
                           Eigen::Stride<Eigen::Dynamic, 1>>;
template <typename T>
using CStrideM = Eigen::Map<const MatRM<T>, Eigen::Unaligned,
                            Eigen::Stride<Eigen::Dynamic, 1>>;

// Column-matrix budget per chunk (floats); keeps im2col scratch ~32 MB.
inline constexpr std::int64_t kColBudget = std::int64_t(8) << 20;

// Persistent per-thread scratch (grow-only). Conv kernels cycle through
// multi-megabyte column buffers every chunk; reallocating them forces the
// allocator to return pages to the kernel and fault them back in.
template <typename T, int Slot>
std::span<T> scratch_buffer(std::size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return std::span<T>(buf.data(), n);
}

// Unrolls one image (C,H,W) into a column block: row r = (c*kh+ki)*kw+kj,
// column l = oh*WO+ow, written at col[r*ld + col0 + l].
template <typename T>
void im2col(const T* img, int C, int H, int W, int kh, int kw, int stride,
            int pad, int HO, int WO, T* col, std::int64_t ld, std::int64_t col0) {
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const std::int64_t r = (static_cast<std::int64_t>(c) * kh + ki) * kw + kj;
        T* dst_row = col + r * ld + col0;
        const int shift = kj - pad;
        for (int oh = 0; oh < HO; ++oh) {
          const int ih = oh * stride - pad + ki;
          T* dst = dst_row + static_cast<std::int64_t>(oh) * WO;
          if (ih < 0 || ih >= H) {
            std::fill(dst, dst + WO, T(0));
            continue;
          }
          const T* src = img + (static_cast<std::int64_t>(c) * H + ih) * W;
          if (stride == 1) {
            // iw = ow + shift: one contiguous copy plus zero margins.
            const int lo = std::max(0, -shift);
            const int hi = std::min(WO, W - shift);
            if (lo > 0) std::fill(dst, dst + std::min(lo, WO), T(0));
            if (hi > lo) std::memcpy(dst + lo, src + lo + shift,
                                     sizeof(T) * static_cast<std::size_t>(hi - lo));
            if (hi < WO) std::fill(dst + std::max(hi, 0), dst + WO, T(0));
          } else {
            for (int ow = 0; ow < WO; ++ow) {
              const int iw = ow * stride + shift;
              dst[ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
            }
          }
        }
      }
    }
  }
}

// Transpose of im2col: scatters a column block back into an image gradient.
template <typename T>
void col2im_add(const T* col, int C, int H, int W, int kh, int kw, int stride,
                int pad, int HO, int WO, T* img_grad, std::int64_t ld,
                std::int64_t col0) {
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const std::int64_t r = (static_cast<std::int64_t>(c) * kh + ki) * kw + kj;
        const T* src_row = col + r * ld + col0;
        const int shift = kj - pad;
        for (int oh = 0; oh < HO; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          const T* src = src_row + static_cast<std::int64_t>(oh) * WO;
          T* dst = img_grad + (static_cast<std::int64_t>(c) * H + ih) * W;
          if (stride == 1) {
            const int lo = std::max(0, -shift);
            const int hi = std::min(WO, W - shift);
            T* d = dst + shift;
            for (int ow = lo; ow < hi; ++ow) d[ow] += src[ow];
          } else {
            for (int ow = 0; ow < WO; ++ow) {
              const int iw = ow * stride + shift;
              if (iw >= 0 && iw < W) dst[iw] += src[ow];
            }
          }
        }
      }
    }
  }
}

inline int conv_chunk_images(std::int64_t K, std::int64_t L) {
  std::int64_t per_image = K * L;
  if (per_image <= 0) return 1;
  std::int64_t c = kColBudget / per_image;
  return static_cast<int>(std::max<std::int64_t>(1, std::min<std::int64_t>(c, 64)));
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
bool wants_grad(Tape<T>* tape, std::initializer_list<const Tensor<T>*> ins) {
  if (!tape) return false;
  for (const Tensor<T>* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, [N,Cin,H,W] * [Cout,Cin,kh,kw] + [Cout]
//         -> [N,Cout,H',W'] with H' = (H + 2p - kh)/stride + 1.

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride, int pad,
                 Tape<T>* tape = nullptr) {
  if (input.rank() != 4) throw std::invalid_argument("conv2d: input must be [N,C,H,W], got " + shape_str(input.shape()));
  if (weight.rank() != 4) throw std::invalid_argument("conv2d: weight must be [Cout,Cin,kh,kw], got " + shape_str(weight.shape()));
  const int N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int Cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != Cin)
    throw std::invalid_argument("conv2d: input channels (" + std::to_string(Cin) +
                                ") do not match weight channels (" + std::to_string(weight.dim(1)) +
                                "); input " + shape_str(input.shape()) + ", weight " + shape_str(weight.shape()));
  if (bias.rank() != 1 || bias.dim(0) != Cout)
    throw std::invalid_argument("conv2d: bias must be [" + std::to_string(Cout) + "], got " + shape_str(bias.shape()));
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (pad < 0) throw std::invalid_argument("conv2d: pad must be >= 0");
  if (H + 2 * pad < kh || W + 2 * pad < kw)
    throw std::invalid_argument("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                " larger than padded input " + shape_str(input.shape()) + " with pad " + std::to_string(pad));

  const int HO = conv_out_dim(H, kh, stride, pad);
  const int WO = conv_out_dim(W, kw, stride, pad);
  const std::int64_t L = static_cast<std::int64_t>(HO) * WO;
  const std::int64_t K = static_cast<std::int64_t>(Cin) * kh * kw;

  Tensor<T> out = Tensor<T>::uninitialized({N, Cout, HO, WO},
                                            detail::wants_grad(tape, {&input, &weight, &bias}));

  const int chunk = detail::conv_chunk_images(K, L);
  const std::size_t nchunks = static_cast<std::size_t>((N + chunk - 1) / std::max(chunk, 1));
  const T* in_p = input.data();
  const T* w_p = weight.data();
  const T* b_p = bias.data();
  T* out_p = out.mutable_data();

  parallel_for_chunks(nchunks, [&](std::size_t ci) {
    const int n0 = static_cast<int>(ci) * chunk;
    const int n1 = std::min(N, n0 + chunk);
    const int m = n1 - n0;
    const std::int64_t mL = static_cast<std::int64_t>(m) * L;
    auto col = detail::scratch_buffer<T, 0>(static_cast<std::size_t>(K * mL));
    auto prod = detail::scratch_buffer<T, 1>(static_cast<std::size_t>(Cout) * mL);
    for (int n = n0; n < n1; ++n)
      detail::im2col(in_p + static_cast<std::int64_t>(n) * Cin * H * W, Cin, H, W,
                     kh, kw, stride, pad, HO, WO, col.data(), mL,
                     static_cast<std::int64_t>(n - n0) * L);
    detail::MapM<T> prod_m(prod.data(), Cout, mL);
    prod_m.noalias() = detail::CMapM<T>(w_p, Cout, K) * detail::CMapM<T>(col.data(), K, mL);
    for (int n = n0; n < n1; ++n) {
      for (int co = 0; co < Cout; ++co) {
        const T* src = prod.data() + static_cast<std::int64_t>(co) * mL +
                       static_cast<std::int64_t>(n - n0) * L;
        T* dst = out_p + (static_cast<std::int64_t>(n) * Cout + co) * L;
        const T b = b_p[co];
        for (std::int64_t l = 0; l < L; ++l) dst[l] = src[l] + b;
      }
    }
  });

  if (out.requires_grad()) {
    tape->record(out, [input, weight, bias, out, stride, pad]() {
      const int N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
      const int Cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
      const int HO = out.dim(2), WO = out.dim(3);
      const std::int64_t L = static_cast<std::int64_t>(HO) * WO;
      const std::int64_t K = static_cast<std::int64_t>(Cin) * kh * kw;
      const bool need_dw = weight.requires_grad();
      const bool need_db = bias.requires_grad();
      const bool need_dx = input.requires_grad();
      const T* gout = out.grad_data();
      const T* in_p = input.data();
      const T* w_p = weight.data();

      const int chunk = detail::conv_chunk_images(K, L);
      const std::size_t nchunks = static_cast<std::size_t>((N + chunk - 1) / std::max(chunk, 1));
      std::vector<std::vector<T>> dw_parts(need_dw ? nchunks : 0);
      std::vector<std::vector<T>> db_parts(need_db ? nchunks : 0);
      T* gin = need_dx ? input.grad_data() : nullptr;

      parallel_for_chunks(nchunks, [&](std::size_t ci) {
        const int n0 = static_cast<int>(ci) * chunk;
        const int n1 = std::min(N, n0 + chunk);
        const int m = n1 - n0;
        const std::int64_t mL = static_cast<std::int64_t>(m) * L;
        // Gather this chunk's output grads as [Cout x mL].
        auto gtmp = detail::scratch_buffer<T, 2>(static_cast<std::size_t>(Cout) * mL);
        for (int n = n0; n < n1; ++n)
          for (int co = 0; co < Cout; ++co)
            std::memcpy(gtmp.data() + static_cast<std::int64_t>(co) * mL +
                            static_cast<std::int64_t>(n - n0) * L,
                        gout + (static_cast<std::int64_t>(n) * Cout + co) * L,
                        sizeof(T) * static_cast<std::size_t>(L));
        detail::CMapM<T> g_m(gtmp.data(), Cout, mL);

        if (need_db) {
          auto& db = db_parts[ci];
          db.assign(static_cast<std::size_t>(Cout), T(0));
          for (int co = 0; co < Cout; ++co) {
            T s = 0;
            const T* row = gtmp.data() + static_cast<std::int64_t>(co) * mL;
            for (std::int64_t l = 0; l < mL; ++l) s += row[l];
            db[static_cast<std::size_t>(co)] = s;
          }
        }
        if (need_dw || need_dx) {
          if (need_dw) {
            auto col = detail::scratch_buffer<T, 0>(static_cast<std::size_t>(K * mL));
            for (int n = n0; n < n1; ++n)
              detail::im2col(in_p + static_cast<std::int64_t>(n) * Cin * H * W, Cin, H, W,
                             kh, kw, stride, pad, HO, WO, col.data(), mL,
                             static_cast<std::int64_t>(n - n0) * L);
            auto& dw = dw_parts[ci];
            dw.assign(static_cast<std::size_t>(Cout * K), T(0));
            detail::MapM<T>(dw.data(), Cout, K).noalias() =
                g_m * detail::CMapM<T>(col.data(), K, mL).transpose();
          }
          if (need_dx) {
            auto dcol = detail::scratch_buffer<T, 3>(static_cast<std::size_t>(K * mL));
            detail::MapM<T>(dcol.data(), K, mL).noalias() =
                detail::CMapM<T>(w_p, Cout, K).transpose() * g_m;
            for (int n = n0; n < n1; ++n)
              detail::col2im_add(dcol.data(), Cin, H, W, kh, kw, stride, pad, HO, WO,
                                 gin + static_cast<std::int64_t>(n) * Cin * H * W, mL,
                                 static_cast<std::int64_t>(n - n0) * L);
          }
        }
      });

      // Partial sums are combined in chunk order: identical result for any
      // worker count.
      if (need_dw) {
        T* gw = weight.grad_data();
        for (auto& part : dw_parts)
          for (std::size_t i = 0; i < part.size(); ++i) gw[i] += part[i];
      }
      if (need_db) {
        T* gb = bias.grad_data();
        for (auto& part : db_parts)
          for (std::size_t i = 0; i < part.size(); ++i) gb[i] += part[i];
      }
    }, "conv2d");
  }
  return out;
}

// ---------------------------------------------------------------------------
// maxpool2d. In ceil mode the output extent uses ceil((in-k)/stride)+1 and
// the trailing window is clamped at the boundary (this is what maps 64->32
// with a 3x3/stride-2 pool). Gradient goes to each window's argmax; ties
// take the first element in scan order.

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, int k, int stride, bool ceil_mode,
                    Tape<T>* tape = nullptr) {
  if (input.rank() != 4) throw std::invalid_argument("maxpool2d: input must be [N,C,H,W], got " + shape_str(input.shape()));
  if (k < 1 || stride < 1) throw std::invalid_argument("maxpool2d: k and stride must be >= 1");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (!ceil_mode && (k > H || k > W))
    throw std::invalid_argument("maxpool2d: window " + std::to_string(k) + " exceeds input " +
                                shape_str(input.shape()) + " without ceil_mode");
  const int HO = pool_out_dim(H, k, stride, ceil_mode);
  const int WO = pool_out_dim(W, k, stride, ceil_mode);
  if (HO < 1 || WO < 1) throw std::invalid_argument("maxpool2d: empty output for input " + shape_str(input.shape()));

  Tensor<T> out = Tensor<T>::uninitialized({N, C, HO, WO}, detail::wants_grad(tape, {&input}));
  const std::int64_t planes = static_cast<std::int64_t>(N) * C;
  const std::int64_t L = static_cast<std::int64_t>(HO) * WO;

  // Flat in-plane argmax per output element; reused by backward and by the
  // activation replay machinery.
  auto argmax = std::make_shared<std::vector<std::int32_t>>(static_cast<std::size_t>(planes * L));

  ActivationReplay* replay = ActivationReplay::active();
  std::shared_ptr<std::vector<std::int32_t>> plan;
  if (replay && !replay->capturing()) plan = replay->pool_plan(argmax->size());

  const T* in_p = input.data();
  T* out_p = out.mutable_data();
  std::int32_t* am_p = argmax->data();

  parallel_for_chunks(static_cast<std::size_t>(planes), [&](std::size_t pi) {
    const T* plane = in_p + static_cast<std::int64_t>(pi) * H * W;
    T* oplane = out_p + static_cast<std::int64_t>(pi) * L;
    std::int32_t* aplane = am_p + static_cast<std::int64_t>(pi) * L;
    if (plan) {
      const std::int32_t* src = plan->data() + static_cast<std::int64_t>(pi) * L;
      for (std::int64_t l = 0; l < L; ++l) {
        aplane[l] = src[l];
        oplane[l] = plane[src[l]];
      }
      return;
    }
    for (int oh = 0; oh < HO; ++oh) {
      const int h0 = oh * stride - 0;
      const int h1 = std::min(h0 + k, H);
      for (int ow = 0; ow < WO; ++ow) {
        const int w0 = ow * stride;
        const int w1 = std::min(w0 + k, W);
        T best = plane[static_cast<std::int64_t>(h0) * W + w0];
        std::int32_t best_i = static_cast<std::int32_t>(h0 * W + w0);
        for (int ih = h0; ih < h1; ++ih)
          for (int iw = w0; iw < w1; ++iw) {
            const T v = plane[static_cast<std::int64_t>(ih) * W + iw];
            if (v > best) {
              best = v;
              best_i = static_cast<std::int32_t>(ih * W + iw);
            }
          }
        oplane[static_cast<std::int64_t>(oh) * WO + ow] = best;
        aplane[static_cast<std::int64_t>(oh) * WO + ow] = best_i;
      }
    }
  });

  if (plan) {
    argmax = plan;
  } else if (replay && replay->capturing()) {
    replay->push_pool_plan(argmax);
  }

  if (out.requires_grad()) {
    tape->record(out, [input, out, argmax, L]() {
      const std::int64_t planes = static_cast<std::int64_t>(input.dim(0)) * input.dim(1);
      const std::int64_t plane_sz = static_cast<std::int64_t>(input.dim(2)) * input.dim(3);
      const T* gout = out.grad_data();
      T* gin = input.grad_data();
      const std::int32_t* am = argmax->data();
      parallel_for_chunks(static_cast<std::size_t>(planes), [&](std::size_t pi) {
        const T* go = gout + static_cast<std::int64_t>(pi) * L;
        T* gi = gin + static_cast<std::int64_t>(pi) * plane_sz;
        const std::int32_t* ap = am + static_cast<std::int64_t>(pi) * L;
        for (std::int64_t l = 0; l < L; ++l) gi[ap[l]] += go[l];
      });
    }, "maxpool");
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear: [N,D] * [K,D]^T + [K] -> [N,K].

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, Tape<T>* tape = nullptr) {
  if (input.rank() != 2 || weight.rank() != 2)
    throw std::invalid_argument("linear: input and weight must be rank 2, got " +
                                shape_str(input.shape()) + " and " + shape_str(weight.shape()));
  const int N = input.dim(0), D = input.dim(1), K = weight.dim(0);
  if (weight.dim(1) != D)
    throw std::invalid_argument("linear: input width " + std::to_string(D) +
                                " does not match weight width " + std::to_string(weight.dim(1)));
  if (bias.rank() != 1 || bias.dim(0) != K)
    throw std::invalid_argument("linear: bias must be [" + std::to_string(K) + "], got " + shape_str(bias.shape()));

  Tensor<T> out = Tensor<T>::uninitialized({N, K}, detail::wants_grad(tape, {&input, &weight, &bias}));
  detail::MapM<T> out_m(out.mutable_data(), N, K);
  out_m.noalias() = detail::CMapM<T>(input.data(), N, D) *
                    detail::CMapM<T>(weight.data(), K, D).transpose();
  out_m.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data(), K);

  if (out.requires_grad()) {
    tape->record(out, [input, weight, bias, out]() {
      const int N = input.dim(0), D = input.dim(1), K = weight.dim(0);
      detail::CMapM<T> g(out.grad_data(), N, K);
      if (input.requires_grad())
        detail::MapM<T>(input.grad_data(), N, D).noalias() +=
            g * detail::CMapM<T>(weight.data(), K, D);
      if (weight.requires_grad())
        detail::MapM<T>(weight.grad_data(), K, D).noalias() +=
            g.transpose() * detail::CMapM<T>(input.data(), N, D);
      if (bias.requires_grad()) {
        T* gb = bias.grad_data();
        for (int n = 0; n < N; ++n) {
          const T* row = out.grad_data() + static_cast<std::int64_t>(n) * K;
          for (int k2 = 0; k2 < K; ++k2) gb[k2] += row[k2];
        }
      }
    }, "linear");
  }
  return out;
}

// ---------------------------------------------------------------------------
// relu. Backward passes gradient where x > 0 and zero where x <= 0.

template <typename T>
Tensor<T> relu(const Tensor<T>& input, Tape<T>* tape = nullptr) {
  Tensor<T> out = Tensor<T>::uninitialized(input.shape(), detail::wants_grad(tape, {&input}));
  const std::size_t n = static_cast<std::size_t>(input.numel());
  const T* in_p = input.data();
  T* out_p = out.mutable_data();

  ActivationReplay* replay = ActivationReplay::active();
  std::shared_ptr<std::vector<std::uint8_t>> mask;
  if (replay) {
    if (replay->capturing()) {
      mask = std::make_shared<std::vector<std::uint8_t>>(n);
      for (std::size_t i = 0; i < n; ++i) (*mask)[i] = in_p[i] > T(0) ? 1 : 0;
      replay->push_relu_mask(mask);
    } else {
      mask = replay->relu_mask(n);
    }
    for (std::size_t i = 0; i < n; ++i) out_p[i] = (*mask)[i] ? in_p[i] : T(0);
  } else {
    for (std::size_t i = 0; i < n; ++i) out_p[i] = in_p[i] > T(0) ? in_p[i] : T(0);
  }

  if (out.requires_grad()) {
    tape->record(out, [input, out, mask, n]() {
      const T* go = out.grad_data();
      T* gi = input.grad_data();
      if (mask) {
        for (std::size_t i = 0; i < n; ++i)
          if ((*mask)[i]) gi[i] += go[i];
      } else {
        const T* x = input.data();
        for (std::size_t i = 0; i < n; ++i)
          if (x[i] > T(0)) gi[i] += go[i];
      }
    }, "relu");
  }
  return out;
}

// ---------------------------------------------------------------------------
// unit_normalize: each row of [N,D] divided by max(||row||_2, eps).

template <typename T>
Tensor<T> unit_normalize(const Tensor<T>& input, T eps, Tape<T>* tape = nullptr) {
  if (input.rank() != 2)
    throw std::invalid_argument("unit_normalize: input must be [N,D], got " + shape_str(input.shape()));
  const int N = input.dim(0), D = input.dim(1);
  Tensor<T> out = Tensor<T>::uninitialized({N, D}, detail::wants_grad(tape, {&input}));
  auto norms = std::make_shared<std::vector<T>>(static_cast<std::size_t>(N));
  const T* in_p = input.data();
  T* out_p = out.mutable_data();
  for (int r = 0; r < N; ++r) {
    const T* x = in_p + static_cast<std::int64_t>(r) * D;
    T s = 0;
    for (int j = 0; j < D; ++j) s += x[j] * x[j];
    const T nrm = std::sqrt(s);
    (*norms)[static_cast<std::size_t>(r)] = nrm;
    const T inv = T(1) / std::max(nrm, eps);
    T* y = out_p + static_cast<std::int64_t>(r) * D;
    for (int j = 0; j < D; ++j) y[j] = x[j] * inv;
  }

  if (out.requires_grad()) {
    tape->record(out, [input, out, norms, eps]() {
      const int N = input.dim(0), D = input.dim(1);
      const T* go = out.grad_data();
      const T* y = out.data();
      T* gi = input.grad_data();
      for (int r = 0; r < N; ++r) {
        const T nrm = (*norms)[static_cast<std::size_t>(r)];
        const T* g = go + static_cast<std::int64_t>(r) * D;
        T* d = gi + static_cast<std::int64_t>(r) * D;
        if (nrm > eps) {
          const T* yr = y + static_cast<std::int64_t>(r) * D;
          T dot = 0;
          for (int j = 0; j < D; ++j) dot += g[j] * yr[j];
          const T inv = T(1) / nrm;
          for (int j = 0; j < D; ++j) d[j] += (g[j] - dot * yr[j]) * inv;
        } else {
          const T inv = T(1) / eps;
          for (int j = 0; j < D; ++j) d[j] += g[j] * inv;
        }
      }
    }, "unit_norm");
  }
  return out;
}

// ---------------------------------------------------------------------------
// concat along the feature axis: [N,D1] ++ [N,D2] -> [N,D1+D2].

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("concat: inputs must be rank 2, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.dim(0) != b.dim(0))
    throw std::invalid_argument("concat: row counts differ, " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  const int N = a.dim(0), D1 = a.dim(1), D2 = b.dim(1);
  Tensor<T> out = Tensor<T>::uninitialized({N, D1 + D2}, detail::wants_grad(tape, {&a, &b}));
  T* o = out.mutable_data();
  const T* pa = a.data();
  const T* pb = b.data();
  for (int r = 0; r < N; ++r) {
    std::memcpy(o + static_cast<std::int64_t>(r) * (D1 + D2), pa + static_cast<std::int64_t>(r) * D1,
                sizeof(T) * static_cast<std::size_t>(D1));
    std::memcpy(o + static_cast<std::int64_t>(r) * (D1 + D2) + D1, pb + static_cast<std::int64_t>(r) * D2,
                sizeof(T) * static_cast<std::size_t>(D2));
  }
  if (out.requires_grad()) {
    tape->record(out, [a, b, out]() {
      const int N = a.dim(0), D1 = a.dim(1), D2 = b.dim(1);
      const T* go = out.grad_data();
      if (a.requires_grad()) {
        T* ga = a.grad_data();
        for (int r = 0; r < N; ++r)
          for (int j = 0; j < D1; ++j)
            ga[static_cast<std::int64_t>(r) * D1 + j] += go[static_cast<std::int64_t>(r) * (D1 + D2) + j];
      }
      if (b.requires_grad()) {
        T* gb = b.grad_data();
        for (int r = 0; r < N; ++r)
          for (int j = 0; j < D2; ++j)
            gb[static_cast<std::int64_t>(r) * D2 + j] += go[static_cast<std::int64_t>(r) * (D1 + D2) + D1 + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Glue ops.

template <typename T>
Tensor<T> reshape(const Tensor<T>& t, Shape shape, Tape<T>* tape = nullptr) {
  if (shape_numel(shape) != t.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(t.shape()) + " as " + shape_str(shape));
  Tensor<T> out = Tensor<T>::uninitialized(std::move(shape), detail::wants_grad(tape, {&t}));
  std::copy(t.values().begin(), t.values().end(), out.mutable_values().begin());
  if (out.requires_grad()) {
    tape->record(out, [t, out]() {
      const T* go = out.grad_data();
      T* gi = t.grad_data();
      const std::size_t n = static_cast<std::size_t>(t.numel());
      for (std::size_t i = 0; i < n; ++i) gi[i] += go[i];
    }, "reshape");
  }
  return out;
}

/// Row gather: out[p] = t[rows[p]]. Backward scatter-adds, so a source row
/// referenced by several output rows accumulates all their gradients.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& t, std::vector<std::int32_t> rows,
                      Tape<T>* tape = nullptr) {
  if (t.rank() != 2) throw std::invalid_argument("gather_rows: input must be [N,D], got " + shape_str(t.shape()));
  const int N = t.dim(0), D = t.dim(1);
  for (std::int32_t r : rows)
    if (r < 0 || r >= N)
      throw std::invalid_argument("gather_rows: row index " + std::to_string(r) +
                                  " out of range for " + shape_str(t.shape()));
  const int P = static_cast<int>(rows.size());
  Tensor<T> out = Tensor<T>::uninitialized({P, D}, detail::wants_grad(tape, {&t}));
  T* o = out.mutable_data();
  const T* src = t.data();
  auto idx = std::make_shared<std::vector<std::int32_t>>(std::move(rows));
  for (int p = 0; p < P; ++p)
    std::memcpy(o + static_cast<std::int64_t>(p) * D,
                src + static_cast<std::int64_t>((*idx)[static_cast<std::size_t>(p)]) * D,
                sizeof(T) * static_cast<std::size_t>(D));
  if (out.requires_grad()) {
    tape->record(out, [t, out, idx]() {
      const int D = t.dim(1);
      const int P = out.dim(0);
      const T* go = out.grad_data();
      T* gi = t.grad_data();
      for (int p = 0; p < P; ++p) {
        T* dst = gi + static_cast<std::int64_t>((*idx)[static_cast<std::size_t>(p)]) * D;
        const T* g = go + static_cast<std::int64_t>(p) * D;
        for (int j = 0; j < D; ++j) dst[j] += g[j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  detail::check_same_shape(a, b, "add");
  Tensor<T> out = Tensor<T>::uninitialized(a.shape(), detail::wants_grad(tape, {&a, &b}));
  const std::size_t n = static_cast<std::size_t>(a.numel());
  const T* pa = a.data();
  const T* pb = b.data();
  T* o = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) o[i] = pa[i] + pb[i];
  if (out.requires_grad()) {
    tape->record(out, [a, b, out, n]() {
      const T* go = out.grad_data();
      if (a.requires_grad()) {
        T* g = a.grad_data();
        for (std::size_t i = 0; i < n; ++i) g[i] += go[i];
      }
      if (b.requires_grad()) {
        T* g = b.grad_data();
        for (std::size_t i = 0; i < n; ++i) g[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  detail::check_same_shape(a, b, "sub");
  Tensor<T> out = Tensor<T>::uninitialized(a.shape(), detail::wants_grad(tape, {&a, &b}));
  const std::size_t n = static_cast<std::size_t>(a.numel());
  const T* pa = a.data();
  const T* pb = b.data();
  T* o = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) o[i] = pa[i] - pb[i];
  if (out.requires_grad()) {
    tape->record(out, [a, b, out, n]() {
      const T* go = out.grad_data();
      if (a.requires_grad()) {
        T* g = a.grad_data();
        for (std::size_t i = 0; i < n; ++i) g[i] += go[i];
      }
      if (b.requires_grad()) {
        T* g = b.grad_data();
        for (std::size_t i = 0; i < n; ++i) g[i] -= go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul_elem(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  detail::check_same_shape(a, b, "mul_elem");
  Tensor<T> out = Tensor<T>::uninitialized(a.shape(), detail::wants_grad(tape, {&a, &b}));
  const std::size_t n = static_cast<std::size_t>(a.numel());
  const T* pa = a.data();
  const T* pb = b.data();
  T* o = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) o[i] = pa[i] * pb[i];
  if (out.requires_grad()) {
    tape->record(out, [a, b, out, n]() {
      const T* go = out.grad_data();
      if (a.requires_grad()) {
        T* g = a.grad_data();
        const T* pb = b.data();
        for (std::size_t i = 0; i < n; ++i) g[i] += go[i] * pb[i];
      }
      if (b.requires_grad()) {
        T* g = b.grad_data();
        const T* pa = a.data();
        for (std::size_t i = 0; i < n; ++i) g[i] += go[i] * pa[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& t, T c, Tape<T>* tape = nullptr) {
  Tensor<T> out = Tensor<T>::uninitialized(t.shape(), detail::wants_grad(tape, {&t}));
  const std::size_t n = static_cast<std::size_t>(t.numel());
  const T* p = t.data();
  T* o = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) o[i] = p[i] * c;
  if (out.requires_grad()) {
    tape->record(out, [t, out, c, n]() {
      const T* go = out.grad_data();
      T* g = t.grad_data();
      for (std::size_t i = 0; i < n; ++i) g[i] += go[i] * c;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& t, Tape<T>* tape = nullptr) {
  T s = 0;
  for (T v : t.values()) s += v;
  Tensor<T> out = Tensor<T>::from_data({1}, {s}, detail::wants_grad(tape, {&t}));
  if (out.requires_grad()) {
    tape->record(out, [t, out]() {
      const T g = out.grad_data()[0];
      T* gi = t.grad_data();
      const std::size_t n = static_cast<std::size_t>(t.numel());
      for (std::size_t i = 0; i < n; ++i) gi[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& t, Tape<T>* tape = nullptr) {
  if (t.numel() == 0) throw std::invalid_argument("mean_all: empty tensor");
  T s = 0;
  for (T v : t.values()) s += v;
  const T inv = T(1) / static_cast<T>(t.numel());
  Tensor<T> out = Tensor<T>::from_data({1}, {s * inv}, detail::wants_grad(tape, {&t}));
  if (out.requires_grad()) {
    tape->record(out, [t, out, inv]() {
      const T g = out.grad_data()[0] * inv;
      T* gi = t.grad_data();
      const std::size_t n = static_cast<std::size_t>(t.numel());
      for (std::size_t i = 0; i < n; ++i) gi[i] += g;
    });
  }
  return out;
}

/// Per-row L2 distance between [N,D] tensors: d_i = sqrt(sum_j (a-b)^2 + eps_sq).
/// eps_sq keeps the square root differentiable when rows coincide.
template <typename T>
Tensor<T> row_l2_distance(const Tensor<T>& a, const Tensor<T>& b, T eps_sq,
                          Tape<T>* tape = nullptr) {
  detail::check_same_shape(a, b, "row_l2_distance");
  if (a.rank() != 2) throw std::invalid_argument("row_l2_distance: inputs must be [N,D], got " + shape_str(a.shape()));
  const int N = a.dim(0), D = a.dim(1);
  Tensor<T> out = Tensor<T>::uninitialized({N}, detail::wants_grad(tape, {&a, &b}));
  const T* pa = a.data();
  const T* pb = b.data();
  T* o = out.mutable_data();
  for (int r = 0; r < N; ++r) {
    const T* x = pa + static_cast<std::int64_t>(r) * D;
    const T* y = pb + static_cast<std::int64_t>(r) * D;
    T s = 0;
    for (int j = 0; j < D; ++j) {
      const T d = x[j] - y[j];
      s += d * d;
    }
    o[r] = std::sqrt(s + eps_sq);
  }
  if (out.requires_grad()) {
    tape->record(out, [a, b, out]() {
      const int N = a.dim(0), D = a.dim(1);
      const T* go = out.grad_data();
      const T* dv = out.data();
      const T* pa = a.data();
      const T* pb = b.data();
      T* ga = a.requires_grad() ? a.grad_data() : nullptr;
      T* gb = b.requires_grad() ? b.grad_data() : nullptr;
      for (int r = 0; r < N; ++r) {
        const T coeff = go[r] / dv[r];
        const T* x = pa + static_cast<std::int64_t>(r) * D;
        const T* y = pb + static_cast<std::int64_t>(r) * D;
        for (int j = 0; j < D; ++j) {
          const T g = coeff * (x[j] - y[j]);
          if (ga) ga[static_cast<std::int64_t>(r) * D + j] += g;
          if (gb) gb[static_cast<std::int64_t>(r) * D + j] -= g;
        }
      }
    });
  }
  return out;
}

template <typename T>
bool tensor_all_finite(const Tensor<T>& t) {
  return all_finite(t.values());
}

}  // namespace hpn
