#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cardiff/geonet.hpp"

// Distribution similarity (JSD family, natural log), trajectory statistics,
// Hausdorff uniqueness and a first-order Markov utility proxy.

namespace cardiff::eval {

using geo::BBox;
using geo::Point;
using geo::Polyline;

/// Bins of a histogram: a regular nx x ny grid over a bbox, or 1-D edges.
struct BinSpec {
  enum class Kind { grid, edges };
  Kind kind = Kind::edges;
  std::size_t nx = 0, ny = 0;
  BBox bbox;
  std::vector<double> edges;

  std::size_t bins() const { return kind == Kind::grid ? nx * ny : (edges.empty() ? 0 : edges.size() - 1); }
  friend bool operator==(const BinSpec&, const BinSpec&) = default;
};

struct Histogram {
  BinSpec spec;
  std::vector<double> counts;

  double total() const {
    double s = 0;
    for (double c : counts) s += c;
    return s;
  }
  std::vector<double> probabilities() const {
    const double t = total();
    require(t > 0, Errc::empty_set, "histogram has no mass");
    std::vector<double> p(counts.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = counts[i] / t;
    return p;
  }
};

namespace detail {

inline double kl_to_mid(double a, double b) {
  // a * ln(a / m) with m = (a + b) / 2 and 0 ln 0 = 0
  return a > 0 ? a * std::log(a / (0.5 * (a + b))) : 0.0;
}

template <class C>
void require_nonempty(const C& c, const char* what) {
  require(!c.empty(), Errc::empty_set, std::string(what) + ": empty input set");
}

inline void require_points(const std::vector<Polyline>& v, const char* what) {
  require_nonempty(v, what);
  for (const auto& t : v) require(!t.empty(), Errc::empty_set, std::string(what) + ": trajectory without points");
}

}  // namespace detail

/// Jensen-Shannon divergence in nats of two probability vectors.
inline double jsd(const std::vector<double>& p, const std::vector<double>& q) {
  require(p.size() == q.size(), Errc::bin_mismatch,
          "jsd: " + std::to_string(p.size()) + " vs " + std::to_string(q.size()) + " bins");
  detail::require_nonempty(p, "jsd");
  double a = 0, b = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    require(p[i] >= 0 && q[i] >= 0, Errc::out_of_range, "jsd: negative probability");
    a += detail::kl_to_mid(p[i], q[i]);
    b += detail::kl_to_mid(q[i], p[i]);
  }
  // summing the two halves in a fixed order keeps jsd(p,q) == jsd(q,p)
  const double lo = std::min(a, b), hi = std::max(a, b);
  return std::clamp(0.5 * lo + 0.5 * hi, 0.0, std::log(2.0));
}

inline double jsd(const Histogram& p, const Histogram& q) {
  require(p.spec == q.spec, Errc::bin_mismatch, "jsd: histograms use different bins");
  return jsd(p.probabilities(), q.probabilities());
}

// ---------------------------------------------------------------------------
// Spatial and OD histograms

/// Cell of p in an nx x ny grid over b; points outside clamp to edge cells.
inline std::size_t grid_cell(Point p, const BBox& b, std::size_t nx, std::size_t ny) {
  auto idx = [](double v, double lo, double w, std::size_t n) {
    const double f = std::floor((v - lo) / w * double(n));
    return std::size_t(std::clamp(f, 0.0, double(n - 1)));
  };
  return idx(p.y, b.min_y, b.height(), ny) * nx + idx(p.x, b.min_x, b.width(), nx);
}

inline BinSpec grid_spec(const BBox& b, std::size_t nx, std::size_t ny) {
  require(nx >= 1 && ny >= 1, Errc::invalid_argument, "grid needs at least one cell");
  require(b.width() > 0 && b.height() > 0, Errc::degenerate_bbox, "grid over a degenerate bbox");
  BinSpec s;
  s.kind = BinSpec::Kind::grid;
  s.nx = nx;
  s.ny = ny;
  s.bbox = b;
  return s;
}

/// Every GPS point of every trajectory binned on an n x n grid.
inline Histogram spatial_histogram(const std::vector<Polyline>& trajs, const BBox& b, std::size_t n = 30) {
  detail::require_points(trajs, "spatial_histogram");
  Histogram h{grid_spec(b, n, n), std::vector<double>(n * n, 0.0)};
  for (const auto& t : trajs)
    for (const auto& p : t) h.counts[grid_cell(p, b, n, n)] += 1;
  return h;
}

inline double jsd_sd(const std::vector<Polyline>& real, const std::vector<Polyline>& gen, const BBox& b,
                     std::size_t n = 30) {
  return jsd(spatial_histogram(real, b, n), spatial_histogram(gen, b, n));
}

/// Joint (origin cell, destination cell) histogram: (n*n)^2 bins.
inline Histogram od_histogram(const std::vector<Polyline>& trajs, const BBox& b, std::size_t n = 10) {
  detail::require_points(trajs, "od_histogram");
  BinSpec s = grid_spec(b, n * n, n * n);
  Histogram h{s, std::vector<double>(n * n * n * n, 0.0)};
  for (const auto& t : trajs) h.counts[grid_cell(t.front(), b, n, n) * n * n + grid_cell(t.back(), b, n, n)] += 1;
  return h;
}

inline double jsd_trip(const std::vector<Polyline>& real, const std::vector<Polyline>& gen, const BBox& b,
                       std::size_t n = 10) {
  return jsd(od_histogram(real, b, n), od_histogram(gen, b, n));
}

// ---------------------------------------------------------------------------
// 1-D histograms

/// Equal-width bins over [lo, hi]; values equal to hi fall in the last bin.
/// A degenerate range (lo == hi) yields a single bin.
inline Histogram equal_width_histogram(const std::vector<double>& values, double lo, double hi, std::size_t bins) {
  detail::require_nonempty(values, "histogram");
  require(bins >= 1 && hi >= lo && std::isfinite(lo) && std::isfinite(hi), Errc::invalid_argument,
          "histogram needs bins >= 1 and a finite range");
  if (hi == lo) bins = 1;
  BinSpec s;
  s.edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) s.edges[i] = lo + (hi - lo) * double(i) / double(bins);
  s.edges.back() = hi;
  Histogram h{s, std::vector<double>(bins, 0.0)};
  for (double v : values) {
    require(v >= lo && v <= hi, Errc::out_of_range, "histogram value outside its range");
    std::size_t k = hi == lo ? 0 : std::size_t(std::floor((v - lo) / (hi - lo) * double(bins)));
    h.counts[std::min(k, bins - 1)] += 1;
  }
  return h;
}

inline std::pair<double, double> pooled_range(const std::vector<double>& a, const std::vector<double>& b) {
  detail::require_nonempty(a, "pooled_range");
  detail::require_nonempty(b, "pooled_range");
  const auto [a0, a1] = std::minmax_element(a.begin(), a.end());
  const auto [b0, b1] = std::minmax_element(b.begin(), b.end());
  return {std::min(*a0, *b0), std::max(*a1, *b1)};
}

/// JSD of two value samples binned on shared equal-width bins over the pooled range.
inline double jsd_values(const std::vector<double>& real, const std::vector<double>& gen, std::size_t bins = 50) {
  const auto [lo, hi] = pooled_range(real, gen);
  return jsd(equal_width_histogram(real, lo, hi, bins), equal_width_histogram(gen, lo, hi, bins));
}

inline std::vector<double> trip_lengths(const std::vector<Polyline>& trajs) {
  detail::require_points(trajs, "trip_lengths");
  std::vector<double> out;
  out.reserve(trajs.size());
  for (const auto& t : trajs) out.push_back(geo::polyline_length(t));
  return out;
}

inline double jsd_ld(const std::vector<Polyline>& real, const std::vector<Polyline>& gen, std::size_t bins = 50) {
  return jsd_values(trip_lengths(real), trip_lengths(gen), bins);
}

/// Consecutive point-to-point distances pooled over all trajectories.
inline std::vector<double> stepwise_distances(const std::vector<Polyline>& trajs) {
  detail::require_nonempty(trajs, "stepwise_distances");
  std::vector<double> out;
  for (const auto& t : trajs) {
    require(t.size() >= 2, Errc::invalid_argument, "stepwise distances need at least two points");
    for (std::size_t i = 1; i < t.size(); ++i) out.push_back(geo::distance(t[i - 1], t[i]));
  }
  return out;
}

/// Stepwise distances on `bins` equal-width bins over [0, max_m] (max_m <= 0:
/// the largest observed distance).
inline Histogram stepwise_distance_hist(const std::vector<Polyline>& trajs, std::size_t bins = 50, double max_m = 0) {
  const auto d = stepwise_distances(trajs);
  const double hi = max_m > 0 ? max_m : *std::max_element(d.begin(), d.end());
  return equal_width_histogram(d, 0.0, hi, bins);
}

inline Histogram trip_length_hist(const std::vector<Polyline>& trajs, std::size_t bins = 50, double max_m = 0) {
  const auto l = trip_lengths(trajs);
  const double hi = max_m > 0 ? max_m : *std::max_element(l.begin(), l.end());
  return equal_width_histogram(l, 0.0, hi, bins);
}

/// CSV "bin_lo,bin_hi,count,probability" of a 1-D histogram.
inline std::string histogram_csv(const Histogram& h) {
  require(h.spec.kind == BinSpec::Kind::edges, Errc::invalid_argument, "histogram_csv expects 1-D bins");
  const double t = h.total();
  std::ostringstream os;
  os.precision(12);
  os << "bin_lo,bin_hi,count,probability\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i)
    os << h.spec.edges[i] << ',' << h.spec.edges[i + 1] << ',' << h.counts[i] << ',' << (t > 0 ? h.counts[i] / t : 0.0)
       << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Hausdorff and uniqueness

namespace detail {

inline double d2(const Point& a, const Point& b) {
  const double dx = a.x - b.x, dy = a.y - b.y;
  return dx * dx + dy * dy;
}

/// Squared directed distance max_a min_b; stops early once it exceeds bound2.
inline double directed2(const Polyline& a, const Polyline& b, double bound2) {
  double worst = 0;
  for (const auto& p : a) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : b) {
      best = std::min(best, d2(p, q));
      if (best <= worst) break;  // cannot raise the max
    }
    worst = std::max(worst, best);
    if (worst > bound2) return worst;
  }
  return worst;
}

inline double hausdorff2(const Polyline& a, const Polyline& b, double bound2) {
  const double ab = directed2(a, b, bound2);
  if (ab > bound2) return ab;
  return std::max(ab, directed2(b, a, bound2));
}

}  // namespace detail

/// Symmetric Hausdorff distance between two point sets (meters).
inline double hausdorff(const Polyline& a, const Polyline& b) {
  require(!a.empty() && !b.empty(), Errc::empty_set, "hausdorff: empty point set");
  return std::sqrt(detail::hausdorff2(a, b, std::numeric_limits<double>::infinity()));
}

struct UniquenessResult {
  std::vector<double> min_distance;  ///< per generated trajectory, input order
  std::vector<double> sorted;
  double min = 0;
  double median = 0;

  /// Empirical CDF "distance_m,cdf".
  std::string cdf_csv() const {
    std::ostringstream os;
    os.precision(12);
    os << "distance_m,cdf\n";
    for (std::size_t i = 0; i < sorted.size(); ++i) os << sorted[i] << ',' << double(i + 1) / double(sorted.size()) << '\n';
    return os.str();
  }
  nlohmann::json summary() const {
    return {{"count", sorted.size()}, {"min", min}, {"median", median}, {"max", sorted.back()}};
  }
};

inline double median_of_sorted(const std::vector<double>& s) {
  detail::require_nonempty(s, "median");
  const std::size_t n = s.size();
  return n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
}

/// Minimum Hausdorff distance from each generated trajectory to the real set
/// (exact; candidates that cannot beat the running minimum are abandoned).
inline UniquenessResult uniqueness_test(const std::vector<Polyline>& gen, const std::vector<Polyline>& real) {
  detail::require_points(gen, "uniqueness_test");
  detail::require_points(real, "uniqueness_test");
  UniquenessResult r;
  r.min_distance.reserve(gen.size());
  for (const auto& g : gen) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& t : real) {
      const double h = detail::hausdorff2(g, t, best);
      if (h < best) best = h;
      if (best == 0) break;
    }
    r.min_distance.push_back(std::sqrt(best));
  }
  r.sorted = r.min_distance;
  std::sort(r.sorted.begin(), r.sorted.end());
  r.min = r.sorted.front();
  r.median = median_of_sorted(r.sorted);
  return r;
}

// ---------------------------------------------------------------------------
// Markov utility

struct MarkovResult {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? double(correct) / double(total) : 0.0; }
};

/// First-order next-segment predictor fitted on `train` (argmax transition
/// count, ties to the smaller id; unseen contexts predict the most frequent
/// training segment) and scored on every transition of `test`.
inline MarkovResult markov_utility(const std::vector<std::vector<int>>& train,
                                   const std::vector<std::vector<int>>& test) {
  detail::require_nonempty(train, "markov_utility");
  detail::require_nonempty(test, "markov_utility");
  std::map<int, std::map<int, std::size_t>> trans;
  std::map<int, std::size_t> freq;
  for (const auto& s : train) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      ++freq[s[i]];
      if (i + 1 < s.size()) ++trans[s[i]][s[i + 1]];
    }
  }
  require(!freq.empty(), Errc::empty_set, "markov_utility: training trajectories have no segments");
  auto argmax = [](const std::map<int, std::size_t>& m) {
    int best = m.begin()->first;
    std::size_t n = 0;
    for (const auto& [k, c] : m)  // ascending keys: strict > keeps the smaller id on ties
      if (c > n) best = k, n = c;
    return best;
  };
  const int fallback = argmax(freq);
  std::map<int, int> pred;
  for (const auto& [a, m] : trans) pred[a] = argmax(m);
  MarkovResult r;
  for (const auto& s : test)
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      const auto it = pred.find(s[i]);
      r.correct += (it == pred.end() ? fallback : it->second) == s[i + 1];
      ++r.total;
    }
  require(r.total > 0, Errc::empty_set, "markov_utility: test trajectories have no transitions");
  return r;
}

// ---------------------------------------------------------------------------
// Report

struct EvalOptions {
  std::size_t sd_grid = 30;
  std::size_t od_grid = 10;
  std::size_t ld_bins = 50;
  std::size_t hist_bins = 50;

  nlohmann::json to_json() const {
    return {{"sd_grid", sd_grid}, {"od_grid", od_grid}, {"ld_bins", ld_bins}, {"hist_bins", hist_bins}};
  }
};

struct EvalReport {
  double jsd_sd = 0, jsd_ld = 0, jsd_trip = 0;
  Histogram step_real, step_gen, length_real, length_gen;  ///< shared bins per pair
  std::size_t n_real = 0, n_gen = 0;
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json to_json() const {
    auto hist = [](const Histogram& h) { return nlohmann::json{{"edges", h.spec.edges}, {"counts", h.counts}}; };
    return {{"jsd_sd", jsd_sd},
            {"jsd_ld", jsd_ld},
            {"jsd_trip", jsd_trip},
            {"log_base", "e"},
            {"n_real", n_real},
            {"n_gen", n_gen},
            {"stepwise_distance", {{"real", hist(step_real)}, {"gen", hist(step_gen)}}},
            {"trip_length", {{"real", hist(length_real)}, {"gen", hist(length_gen)}}},
            {"config", config}};
  }
};

inline EvalReport evaluate(const std::vector<Polyline>& real, const std::vector<Polyline>& gen, const BBox& b,
                           const EvalOptions& opt = {}) {
  EvalReport r;
  r.jsd_sd = jsd_sd(real, gen, b, opt.sd_grid);
  r.jsd_ld = jsd_ld(real, gen, opt.ld_bins);
  r.jsd_trip = jsd_trip(real, gen, b, opt.od_grid);
  const auto sr = stepwise_distances(real), sg = stepwise_distances(gen);
  const double smax = pooled_range(sr, sg).second;
  r.step_real = equal_width_histogram(sr, 0.0, smax, opt.hist_bins);
  r.step_gen = equal_width_histogram(sg, 0.0, smax, opt.hist_bins);
  const auto lr = trip_lengths(real), lg = trip_lengths(gen);
  const double lmax = pooled_range(lr, lg).second;
  r.length_real = equal_width_histogram(lr, 0.0, lmax, opt.hist_bins);
  r.length_gen = equal_width_histogram(lg, 0.0, lmax, opt.hist_bins);
  r.n_real = real.size();
  r.n_gen = gen.size();
  r.config = opt.to_json();
  return r;
}

}  // namespace cardiff::eval
