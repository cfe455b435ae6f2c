#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "cardiff/autograd.hpp"
#include "cardiff/rng.hpp"

namespace cardiff {

struct GradCheckReport {
  double max_rel_err = 0;
  std::size_t checked = 0;
  std::string worst;  ///< coordinate with the largest error
};

/// Block under test: builds a forward pass from parameters and input leaves.
using GradBlock = std::function<nn::Var(nn::Graph<double>&, const ParamStore<double>&, const std::vector<nn::Var>&)>;

/// Compares the analytic gradient of <r, block(...)> (r a fixed random
/// projection of the output) with central differences. Relative error is
/// |a - n| / max(|a|, |n|, 1e-3). When parameters and inputs hold more than
/// max_coords values a seeded subsample of max_coords coordinates is checked.
inline GradCheckReport finite_diff_check(const GradBlock& block, ParamStore<double> params,
                                         std::vector<Tensor<double>> inputs, double h = 1e-5,
                                         std::size_t max_coords = 400, std::uint64_t seed = 1) {
  Tensor<double> proj;
  auto evaluate = [&](bool with_grad, std::vector<Tensor<double>>* input_grads, ParamStore<double>* param_grads) {
    nn::Graph<double> g(with_grad);
    std::vector<nn::Var> in;
    for (const auto& t : inputs) in.push_back(g.input(t, true));
    nn::Var out = block(g, params, in);
    if (proj.empty()) {
      Rng rng(seed ^ 0x5eedULL);
      proj = Tensor<double>(g.value(out).shape());
      for (auto& v : proj.values()) v = rng.uniform(-1.0, 1.0);
    }
    double f = 0;
    for (std::size_t i = 0; i < proj.size(); ++i) f += proj[i] * g.value(out)[i];
    if (with_grad) {
      g.backward(out, proj);
      for (std::size_t k = 0; k < in.size(); ++k)
        (*input_grads)[k] = g.has_grad(in[k]) ? g.grad(in[k]) : Tensor<double>(inputs[k].shape());
      param_grads->zero_grad();
      g.accumulate_param_grads(*param_grads);
    }
    return f;
  };

  std::vector<Tensor<double>> in_grads(inputs.size());
  ParamStore<double> pgrads = params;
  evaluate(true, &in_grads, &pgrads);

  struct Coord {
    int input;  // -1 for parameters
    std::string name;
    std::size_t idx;
  };
  std::vector<Coord> coords;
  for (const auto& [name, e] : params.entries())
    for (std::size_t i = 0; i < e.value.size(); ++i) coords.push_back({-1, name, i});
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (std::size_t i = 0; i < inputs[k].size(); ++i) coords.push_back({int(k), "input" + std::to_string(k), i});
  if (coords.size() > max_coords) {
    Rng rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng.engine());
    coords.resize(max_coords);
  }

  GradCheckReport rep;
  for (const auto& c : coords) {
    double* slot = c.input < 0 ? &params.at(c.name).value[c.idx] : &inputs[std::size_t(c.input)][c.idx];
    const double analytic = c.input < 0 ? pgrads.at(c.name).grad[c.idx] : in_grads[std::size_t(c.input)][c.idx];
    const double orig = *slot;
    *slot = orig + h;
    const double fp = evaluate(false, nullptr, nullptr);
    *slot = orig - h;
    const double fm = evaluate(false, nullptr, nullptr);
    *slot = orig;
    const double numeric = (fp - fm) / (2 * h);
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst = c.name + "[" + std::to_string(c.idx) + "]";
    }
    ++rep.checked;
  }
  return rep;
}

}  // namespace cardiff
