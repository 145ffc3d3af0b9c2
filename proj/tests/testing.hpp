#pragma once

// Shared test helpers: random tensors and the central finite-difference
// gradient checker used as the independent oracle for every autodiff path.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "hpn/tensor.hpp"
#include "hpn/util.hpp"

namespace hpn_test {

template <typename T>
hpn::Tensor<T> random_tensor(hpn::Shape shape, hpn::RngEngine& rng, double lo, double hi,
                             bool requires_grad = false) {
  std::vector<T> data(static_cast<std::size_t>(hpn::shape_numel(shape)));
  for (T& v : data) v = static_cast<T>(hpn::uniform_range(rng, lo, hi));
  return hpn::Tensor<T>::from_data(std::move(shape), std::move(data), requires_grad);
}

// Random values bounded away from zero (for relu-adjacent inputs).
template <typename T>
hpn::Tensor<T> random_signed_tensor(hpn::Shape shape, hpn::RngEngine& rng, double min_abs,
                                    double max_abs, bool requires_grad = false) {
  std::vector<T> data(static_cast<std::size_t>(hpn::shape_numel(shape)));
  for (T& v : data) {
    const double mag = hpn::uniform_range(rng, min_abs, max_abs);
    v = static_cast<T>(hpn::uniform_real(rng) < 0.5 ? -mag : mag);
  }
  return hpn::Tensor<T>::from_data(std::move(shape), std::move(data), requires_grad);
}

inline double rel_err(double a, double b) {
  const double denom = std::max(std::abs(a), std::abs(b));
  if (denom < 1e-8) return 0.0;
  return std::abs(a - b) / denom;
}

/// Exhaustive coordinate-wise central finite differences against the tape
/// gradient. `forward` must rebuild the scalar loss from the checked
/// tensors' current values; with `use_replay` the relu/pool choices made at
/// the base point are frozen during the difference evaluations.
template <typename T, typename Fwd>
double max_grad_rel_error(Fwd&& forward, std::span<const hpn::Tensor<T>> check, double h,
                          bool use_replay = false) {
  hpn::ActivationReplay plan;
  if (use_replay) plan.begin_capture();
  hpn::Tape<T> tape;
  hpn::Tensor<T> loss = forward(&tape);
  if (use_replay) plan.end();
  for (const auto& t : check) t.reset_grad();
  tape.backward(loss);

  std::vector<std::vector<T>> analytic;
  for (const auto& t : check)
    analytic.emplace_back(t.grad().begin(), t.grad().end());

  auto eval = [&]() {
    if (use_replay) plan.begin_replay();
    hpn::Tensor<T> l = forward(nullptr);
    if (use_replay) plan.end();
    return static_cast<double>(l.value_at(0));
  };

  double worst = 0.0;
  for (std::size_t ti = 0; ti < check.size(); ++ti) {
    const auto& t = check[ti];
    auto vals = t.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const T orig = vals[i];
      // Five-point central stencil: O(h^4) truncation.
      vals[i] = orig + static_cast<T>(2 * h);
      const double p2 = eval();
      vals[i] = orig + static_cast<T>(h);
      const double p1 = eval();
      vals[i] = orig - static_cast<T>(h);
      const double m1 = eval();
      vals[i] = orig - static_cast<T>(2 * h);
      const double m2 = eval();
      vals[i] = orig;
      const double fd = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
      worst = std::max(worst, rel_err(fd, static_cast<double>(analytic[ti][i])));
    }
  }
  return worst;
}

/// Directional central difference along a random unit direction confined to
/// `target`, compared against the tape gradient's projection. Replay keeps
/// the evaluation smooth at the base point.
template <typename T, typename Fwd>
double directional_grad_rel_error(Fwd&& forward, const hpn::Tensor<T>& target,
                                  hpn::RngEngine& rng, double h) {
  hpn::ActivationReplay plan;
  plan.begin_capture();
  hpn::Tape<T> tape;
  hpn::Tensor<T> loss = forward(&tape);
  plan.end();
  target.reset_grad();
  tape.backward(loss);

  const std::size_t n = static_cast<std::size_t>(target.numel());
  std::vector<double> dir(n);
  double norm = 0;
  for (double& v : dir) {
    v = hpn::uniform_range(rng, -1.0, 1.0);
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (double& v : dir) v /= norm;

  double analytic = 0;
  {
    auto g = target.grad();
    for (std::size_t i = 0; i < n; ++i) analytic += static_cast<double>(g[i]) * dir[i];
  }

  std::vector<T> orig(target.values().begin(), target.values().end());
  auto vals = target.mutable_values();
  auto eval_at = [&](double t) {
    for (std::size_t i = 0; i < n; ++i) vals[i] = static_cast<T>(static_cast<double>(orig[i]) + t * dir[i]);
    plan.begin_replay();
    hpn::Tensor<T> l = forward(nullptr);
    plan.end();
    return static_cast<double>(l.value_at(0));
  };
  const double fd = (-eval_at(2 * h) + 8.0 * eval_at(h) - 8.0 * eval_at(-h) + eval_at(-2 * h)) / (12.0 * h);
  for (std::size_t i = 0; i < n; ++i) vals[i] = orig[i];
  return rel_err(fd, analytic);
}

}  // namespace hpn_test
