#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "cardiff/ops.hpp"
#include "cardiff/rng.hpp"
#include "cardiff/tensor.hpp"

namespace cardiff::diff {

/// Variance schedule with arrays indexed 0..T; index 0 is the clean state
/// (beta 0, alpha_bar 1).
struct NoiseSchedule {
  int T = 0;
  double beta_1 = 0;
  double beta_T = 0;
  std::string kind = "linear";
  std::vector<double> beta, alpha, alpha_bar;

  void check_step(int t, int lo = 1) const {
    require(t >= lo && t <= T, Errc::step_range,
            "step " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " + std::to_string(T) + "]");
  }
  double sigma(int t) const { return std::sqrt(beta[std::size_t(t)]); }
  double abar(int t) const { return alpha_bar[std::size_t(t)]; }

  nlohmann::json to_json() const { return {{"kind", kind}, {"T", T}, {"beta_1", beta_1}, {"beta_T", beta_T}}; }
  friend bool operator==(const NoiseSchedule& a, const NoiseSchedule& b) {
    return a.T == b.T && a.beta_1 == b.beta_1 && a.beta_T == b.beta_T && a.kind == b.kind;
  }
};

inline NoiseSchedule linear_schedule(int T = 1000, double beta_1 = 1e-4, double beta_T = 0.02) {
  require(T >= 2, Errc::invalid_endpoint, "schedule needs T >= 2");
  require(beta_1 > 0 && beta_1 < beta_T && beta_T < 1, Errc::invalid_endpoint,
          "schedule endpoints must satisfy 0 < beta_1 < beta_T < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta_1 = beta_1;
  s.beta_T = beta_T;
  s.beta.assign(std::size_t(T) + 1, 0.0);
  s.alpha.assign(std::size_t(T) + 1, 1.0);
  s.alpha_bar.assign(std::size_t(T) + 1, 1.0);
  for (int t = 1; t <= T; ++t) {
    const auto i = std::size_t(t);
    s.beta[i] = beta_1 + double(t - 1) / double(T - 1) * (beta_T - beta_1);
    s.alpha[i] = 1.0 - s.beta[i];
    s.alpha_bar[i] = s.alpha_bar[i - 1] * s.alpha[i];
  }
  return s;
}

inline NoiseSchedule schedule_from_json(const nlohmann::json& j) {
  require(j.value("kind", std::string()) == "linear", Errc::incompatible_checkpoint, "unsupported schedule kind");
  return linear_schedule(j.at("T").get<int>(), j.at("beta_1").get<double>(), j.at("beta_T").get<double>());
}

template <class T>
Tensor<T> randn_like(const Tensor<T>& like, Rng& rng) {
  Tensor<T> e(like.shape());
  for (auto& v : e.values()) v = T(rng.normal());
  return e;
}

template <class T>
Tensor<T> randn(Shape shape, Rng& rng) {
  Tensor<T> e(std::move(shape));
  for (auto& v : e.values()) v = T(rng.normal());
  return e;
}

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
template <class T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& s) {
  s.check_step(t);
  require(x0.shape() == eps.shape(), Errc::shape_mismatch, "q_sample: noise shape");
  const double a = std::sqrt(s.abar(t)), b = std::sqrt(1.0 - s.abar(t));
  Tensor<T> out(x0.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = T(a * double(x0[i]) + b * double(eps[i]));
  return out;
}

/// q_sample where x0 holds steps.size() equal row groups, group k at steps[k].
template <class T>
Tensor<T> q_sample_batch(const Tensor<T>& x0, const std::vector<int>& steps, const Tensor<T>& eps,
                         const NoiseSchedule& s) {
  require(x0.shape() == eps.shape(), Errc::shape_mismatch, "q_sample: noise shape");
  require(!steps.empty() && x0.size() % steps.size() == 0, Errc::shape_mismatch, "q_sample: batch grouping");
  const std::size_t per = x0.size() / steps.size();
  Tensor<T> out(x0.shape());
  for (std::size_t k = 0; k < steps.size(); ++k) {
    s.check_step(steps[k]);
    const double a = std::sqrt(s.abar(steps[k])), b = std::sqrt(1.0 - s.abar(steps[k]));
    for (std::size_t i = k * per; i < (k + 1) * per; ++i) out[i] = T(a * double(x0[i]) + b * double(eps[i]));
  }
  return out;
}

/// One forward kernel step: sqrt(alpha_t) x_{t-1} + sqrt(beta_t) eps.
template <class T>
Tensor<T> q_step(const Tensor<T>& x_prev, int t, const Tensor<T>& eps, const NoiseSchedule& s) {
  s.check_step(t);
  const double a = std::sqrt(s.alpha[std::size_t(t)]), b = std::sqrt(s.beta[std::size_t(t)]);
  Tensor<T> out(x_prev.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(a * double(x_prev[i]) + b * double(eps[i]));
  return out;
}

/// (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).
template <class T>
Tensor<T> predict_x0(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t, const NoiseSchedule& s) {
  s.check_step(t);
  require(x_t.shape() == eps_hat.shape(), Errc::shape_mismatch, "predict_x0: shapes");
  const double a = std::sqrt(s.abar(t)), b = std::sqrt(1.0 - s.abar(t));
  Tensor<T> out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T((double(x_t[i]) - b * double(eps_hat[i])) / a);
  return out;
}

/// Differentiable predict_x0 over equal row groups of a batch; the gradient
/// flows into eps_hat only.
template <class T>
nn::Var predict_x0(nn::Graph<T>& g, const Tensor<T>& x_t, nn::Var eps_hat, const std::vector<int>& steps,
                   const NoiseSchedule& s) {
  const auto& E = g.value(eps_hat);
  require(x_t.shape() == E.shape() && !steps.empty() && E.rows() % steps.size() == 0, Errc::shape_mismatch,
          "predict_x0: shapes");
  Tensor<T> coef = Tensor<T>::zeros(steps.size(), E.cols());
  Tensor<T> base(x_t.shape());
  const std::size_t per = x_t.size() / steps.size();
  for (std::size_t k = 0; k < steps.size(); ++k) {
    s.check_step(steps[k]);
    const double a = std::sqrt(s.abar(steps[k])), b = std::sqrt(1.0 - s.abar(steps[k]));
    for (std::size_t c = 0; c < E.cols(); ++c) coef(k, c) = T(-b / a);
    for (std::size_t i = k * per; i < (k + 1) * per; ++i) base[i] = T(double(x_t[i]) / a);
  }
  return nn::add(g, nn::mul_grouped(g, eps_hat, g.constant(std::move(coef))), g.constant(std::move(base)));
}

/// Ancestral step: (x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t) + sigma_t z, z = 0 at t = 1.
template <class T>
Tensor<T> ddpm_step(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t, const NoiseSchedule& s, Rng& rng) {
  s.check_step(t);
  require(x_t.shape() == eps_hat.shape(), Errc::shape_mismatch, "ddpm_step: shapes");
  const auto i = std::size_t(t);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha[i]);
  const double c = s.beta[i] / std::sqrt(1.0 - s.alpha_bar[i]);
  const double sigma = s.sigma(t);
  Tensor<T> out(x_t.shape());
  for (std::size_t k = 0; k < out.size(); ++k) {
    double v = inv_sqrt_alpha * (double(x_t[k]) - c * double(eps_hat[k]));
    if (t > 1) v += sigma * rng.normal();
    out[k] = T(v);
  }
  return out;
}

/// Deterministic (eta = 0) jump from t to t_prev < t through the predicted x0.
/// With clip > 0 the predicted x0 is clamped to [-clip, clip] and the noise
/// estimate is re-derived from it.
template <class T>
Tensor<T> strided_deterministic_step(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t, int t_prev,
                                     const NoiseSchedule& s, double clip = 0.0) {
  s.check_step(t);
  require(t_prev >= 0 && t_prev < t, Errc::ordering,
          "strided step needs 0 <= t_prev < t (got " + std::to_string(t_prev) + ", " + std::to_string(t) + ")");
  const double a = std::sqrt(s.abar(t)), b = std::sqrt(1.0 - s.abar(t));
  const double ap = std::sqrt(s.abar(t_prev)), bp = std::sqrt(1.0 - s.abar(t_prev));
  Tensor<T> out(x_t.shape());
  for (std::size_t k = 0; k < out.size(); ++k) {
    double x0 = (double(x_t[k]) - b * double(eps_hat[k])) / a, e = double(eps_hat[k]);
    if (clip > 0.0 && std::abs(x0) > clip) {
      x0 = std::clamp(x0, -clip, clip);
      e = (double(x_t[k]) - a * x0) / b;
    }
    out[k] = T(ap * x0 + bp * e);
  }
  return out;
}

/// Visited states T, T - k, T - 2k, ..., then 0; the last hop may be shorter
/// than k. The network is evaluated once per hop (size() - 1 times).
inline std::vector<int> stride_schedule(int T, int interval) {
  require(interval >= 1 && interval <= T, Errc::invalid_interval,
          "interval " + std::to_string(interval) + " must lie in [1, " + std::to_string(T) + "]");
  std::vector<int> steps;
  for (int t = T; t > 0; t -= interval) steps.push_back(t);
  steps.push_back(0);
  return steps;
}

template <class T>
struct NoiseAugmented {
  Tensor<T> z_hat;
  int t_hat = 0;
};

/// Training-time corruption of a clean latent at a uniform step in 1..T.
template <class T>
NoiseAugmented<T> noise_augment(const Tensor<T>& z0, const NoiseSchedule& s, Rng& rng) {
  const int t = int(rng.uniform_int(1, s.T));
  return {q_sample(z0, t, randn_like(z0, rng), s), t};
}

/// Sampling-time conditioning: the clean latent and step 0.
template <class T>
NoiseAugmented<T> no_augment(const Tensor<T>& z0) {
  return {z0, 0};
}

}  // namespace cardiff::diff
