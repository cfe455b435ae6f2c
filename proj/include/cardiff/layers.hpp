#pragma once

#include <cmath>
#include <string>

#include "cardiff/ops.hpp"

// Parameterised building blocks shared by the codec and both denoisers.
// Parameters are looked up by name in a ParamStore; the matching init_*
// functions create them.

namespace cardiff::nn {

template <class T>
Var linear(Graph<T>& g, const ParamStore<T>& s, const std::string& name, Var x) {
  Var b = s.contains(name + ".b") ? g.param(s, name + ".b") : Var{};
  return affine(g, x, g.param(s, name + ".w"), b);
}

// -- multi-head attention ----------------------------------------------------

template <class T>
void init_mha(ParamStore<T>& s, const std::string& name, std::size_t q_dim, std::size_t kv_dim, std::size_t model_dim,
              std::size_t out_dim, Rng& rng, bool zero_out = false) {
  init_linear(s, name + ".q", q_dim, model_dim, rng);
  init_linear(s, name + ".k", kv_dim, model_dim, rng);
  init_linear(s, name + ".v", kv_dim, model_dim, rng);
  init_linear(s, name + ".o", model_dim, out_dim, rng, zero_out ? 0.0 : 1.0);
}

/// Projects queries from q_in and keys/values from kv_in, attends per head
/// and applies the output projection. Self-attention passes the same Var twice.
template <class T>
Var multihead_attention(Graph<T>& g, const ParamStore<T>& s, const std::string& name, Var q_in, Var kv_in,
                        AttentionSpec spec) {
  Var q = linear(g, s, name + ".q", q_in);
  Var k = linear(g, s, name + ".k", kv_in);
  Var v = linear(g, s, name + ".v", kv_in);
  return linear(g, s, name + ".o", attention(g, q, k, v, std::move(spec)));
}

// -- feed-forward ------------------------------------------------------------

template <class T>
void init_mlp(ParamStore<T>& s, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
  init_linear(s, name + ".fc1", in, hidden, rng);
  init_linear(s, name + ".fc2", hidden, out, rng);
}

template <class T>
Var mlp_gelu(Graph<T>& g, const ParamStore<T>& s, const std::string& name, Var x) {
  return linear(g, s, name + ".fc2", gelu(g, linear(g, s, name + ".fc1", x)));
}

template <class T>
Var mlp_silu(Graph<T>& g, const ParamStore<T>& s, const std::string& name, Var x) {
  return linear(g, s, name + ".fc2", silu(g, linear(g, s, name + ".fc1", x)));
}

// -- timestep embedding -------------------------------------------------------

/// Interleaved [sin(t w_0), cos(t w_0), sin(t w_1), ...] with w_i = 10000^(-2i/dim).
template <class T>
Tensor<T> timestep_embedding(double t, std::size_t dim, double t_max = 1000.0) {
  require(dim % 2 == 0 && dim > 0, Errc::odd_dimension, "timestep embedding dimension must be even");
  require(t >= 0 && t <= t_max, Errc::step_range, "timestep " + std::to_string(t) + " outside [0, T]");
  Tensor<T> e = Tensor<T>::zeros(1, dim);
  for (std::size_t i = 0; i < dim / 2; ++i) {
    const double w = std::pow(10000.0, -2.0 * double(i) / double(dim));
    e[2 * i] = T(std::sin(t * w));
    e[2 * i + 1] = T(std::cos(t * w));
  }
  return e;
}

/// Stacked embeddings for a batch of steps, one row each.
template <class T>
Tensor<T> timestep_embeddings(const std::vector<int>& steps, std::size_t dim, double t_max = 1000.0) {
  Tensor<T> out = Tensor<T>::zeros(steps.size(), dim);
  for (std::size_t r = 0; r < steps.size(); ++r) {
    auto e = timestep_embedding<T>(double(steps[r]), dim, t_max);
    std::copy_n(e.data(), dim, out.data() + r * dim);
  }
  return out;
}

}  // namespace cardiff::nn
