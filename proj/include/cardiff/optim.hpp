#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "cardiff/param_store.hpp"
#include "cardiff/rng.hpp"

namespace cardiff {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over every entry of the store; gradients are zeroed
/// afterwards. Throws non_finite before touching any parameter if a gradient
/// is NaN/Inf.
template <class T>
void adam_step(ParamStore<T>& store, const AdamConfig& cfg) {
  for (const auto& [name, e] : store.entries())
    require(e.grad.all_finite(), Errc::non_finite, "non-finite gradient in " + name);
  for (auto& [name, e] : store.entries()) {
    ++e.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(e.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(e.step));
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = e.grad[i];
      const double m = cfg.beta1 * double(e.m[i]) + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * double(e.v[i]) + (1.0 - cfg.beta2) * g * g;
      e.m[i] = T(m);
      e.v[i] = T(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      e.value[i] = T(double(e.value[i]) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
    e.grad.fill(T(0));
  }
}

/// DP-SGD aggregation: each example's full gradient vector is scaled by
/// min(1, C / ||g||), the clipped vectors are summed, N(0, sigma^2 C^2) noise
/// is added per coordinate and the result is divided by the batch size.
/// clip_norm may be +inf (no clipping); noise is then skipped only if sigma == 0.
template <class T>
std::vector<T> dp_sanitize(std::span<const std::vector<T>> per_example, double clip_norm, double noise_mult, Rng& rng) {
  require(!per_example.empty(), Errc::empty_batch, "dp_sanitize needs at least one example");
  require(clip_norm > 0 && noise_mult >= 0, Errc::invalid_argument, "dp_sanitize: C > 0 and sigma >= 0 required");
  const std::size_t n = per_example.front().size();
  std::vector<double> acc(n, 0.0);
  for (const auto& g : per_example) {
    require(g.size() == n, Errc::shape_mismatch, "dp_sanitize: gradient length mismatch");
    double sq = 0;
    for (T v : g) sq += double(v) * double(v);
    const double norm = std::sqrt(sq);
    const double factor = (std::isinf(clip_norm) || norm <= clip_norm) ? 1.0 : clip_norm / norm;
    for (std::size_t i = 0; i < n; ++i) acc[i] += factor * double(g[i]);
  }
  if (noise_mult > 0) {
    require(std::isfinite(clip_norm), Errc::invalid_argument, "dp_sanitize: noise needs a finite clip norm");
    const double sd = noise_mult * clip_norm;
    for (auto& v : acc) v += rng.normal() * sd;
  }
  std::vector<T> out(n);
  const double inv = 1.0 / double(per_example.size());
  for (std::size_t i = 0; i < n; ++i) out[i] = T(acc[i] * inv);
  return out;
}

}  // namespace cardiff
