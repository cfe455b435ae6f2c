#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cardiff/geonet.hpp"

namespace cardiff::data {

using geo::BBox;
using geo::Point;
using geo::Polyline;

// Token vocabulary: three specials followed by one token per segment.
inline constexpr int PAD = 0;
inline constexpr int BOS = 1;
inline constexpr int EOS = 2;
inline constexpr int TOKEN_OFFSET = 3;

inline std::size_t vocab_size(std::size_t num_segments) { return num_segments + TOKEN_OFFSET; }

/// BOS, segments, EOS, then PAD up to max_len.
inline std::vector<int> to_tokens(const std::vector<int>& segments, std::size_t max_len) {
  require(segments.size() + 2 <= max_len, Errc::overlength,
          "trajectory of " + std::to_string(segments.size()) + " segments exceeds " + std::to_string(max_len) +
              " tokens");
  std::vector<int> t(max_len, PAD);
  t[0] = BOS;
  for (std::size_t i = 0; i < segments.size(); ++i) t[i + 1] = segments[i] + TOKEN_OFFSET;
  t[segments.size() + 1] = EOS;
  return t;
}

/// Segment ids between BOS and the first EOS/PAD; other specials are dropped.
inline std::vector<int> from_tokens(const std::vector<int>& tokens) {
  std::vector<int> s;
  for (std::size_t i = (!tokens.empty() && tokens[0] == BOS) ? 1 : 0; i < tokens.size(); ++i) {
    if (tokens[i] == EOS || tokens[i] == PAD) break;
    if (tokens[i] >= TOKEN_OFFSET) s.push_back(tokens[i] - TOKEN_OFFSET);
  }
  return s;
}

inline bool adjacency_valid(const geo::RoadNetwork& net, const std::vector<int>& segs) {
  if (segs.empty()) return false;
  for (int s : segs)
    if (s < 0 || std::size_t(s) >= net.size()) return false;
  for (std::size_t i = 1; i < segs.size(); ++i)
    if (!net.adjacent(segs[i - 1], segs[i])) return false;
  return true;
}

// -- origin/destination sampling ---------------------------------------------

struct Hotspot {
  Point center;
  double weight = 1;
  double radius = 100;  ///< Gaussian std in meters; +inf means uniform over the bbox
};

/// Four hotspots at fixed relative positions of the bbox with unequal weights.
inline std::vector<Hotspot> default_hotspots(const BBox& b) {
  auto at = [&](double fx, double fy) { return Point{b.min_x + fx * b.width(), b.min_y + fy * b.height()}; };
  const double r = 0.12 * b.diagonal();
  return {{at(0.25, 0.30), 0.4, r}, {at(0.75, 0.70), 0.3, r}, {at(0.70, 0.20), 0.2, r}, {at(0.20, 0.80), 0.1, r}};
}

/// Segment whose center is nearest to p; exact ties are broken uniformly.
inline int nearest_segment(const geo::RoadNetwork& net, Point p, Rng& rng) {
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> ties;
  for (const auto& s : net.segments()) {
    const double d = (s.center.x - p.x) * (s.center.x - p.x) + (s.center.y - p.y) * (s.center.y - p.y);
    if (d < best) {
      best = d;
      ties.assign(1, s.id);
    } else if (d == best) {
      ties.push_back(s.id);
    }
  }
  require(!ties.empty(), Errc::invalid_argument, "network has no segments");
  return ties.size() == 1 ? ties[0] : ties[std::size_t(rng.uniform_int(0, long(ties.size()) - 1))];
}

namespace detail {

inline Point draw_location(const BBox& b, const std::vector<Hotspot>& hs, double total, Rng& rng) {
  const double u = rng.uniform() * total;
  std::size_t k = 0;
  double acc = 0;
  for (std::size_t i = 0; i < hs.size(); ++i) {
    if (hs[i].weight <= 0) continue;
    k = i;
    acc += hs[i].weight;
    if (u < acc) break;
  }
  const Hotspot& h = hs[k];
  if (std::isinf(h.radius)) return {rng.uniform(b.min_x, b.max_x), rng.uniform(b.min_y, b.max_y)};
  for (;;) {
    const Point p{h.center.x + h.radius * rng.normal(), h.center.y + h.radius * rng.normal()};
    if (p.x >= b.min_x && p.x <= b.max_x && p.y >= b.min_y && p.y <= b.max_y) return p;
  }
}

}  // namespace detail

/// Origin and destination segments from the hotspot mixture; the
/// destination is redrawn until it differs from the origin.
inline std::pair<int, int> sample_od(const geo::RoadNetwork& net, const std::vector<Hotspot>& hotspots, Rng& rng) {
  double total = 0;
  for (const auto& h : hotspots) {
    require(h.weight >= 0 && std::isfinite(h.weight), Errc::degenerate_mixture, "hotspot weights must be >= 0");
    require(h.radius >= 0, Errc::degenerate_mixture, "hotspot radius must be >= 0");
    total += h.weight;
  }
  require(total > 0, Errc::degenerate_mixture, "hotspot weights sum to zero");
  require(net.size() >= 2, Errc::invalid_argument, "need at least two segments");
  const BBox& b = net.bbox();
  const int origin = nearest_segment(net, detail::draw_location(b, hotspots, total, rng), rng);
  for (int attempt = 0; attempt < 64; ++attempt) {
    const int dest = nearest_segment(net, detail::draw_location(b, hotspots, total, rng), rng);
    if (dest != origin) return {origin, dest};
  }
  // Mixture concentrated on one segment: fall back to the closest other one.
  const Point c = net.segment(origin).center;
  int best = -1;
  double bd = std::numeric_limits<double>::infinity();
  for (const auto& s : net.segments()) {
    const double d = geo::distance(s.center, c);
    if (s.id != origin && d < bd) {
      bd = d;
      best = s.id;
    }
  }
  return {origin, best};
}

// -- trip simulation ---------------------------------------------------------

struct TripParams {
  double detour_prob = 0.3;
  double gps_noise_m = 5.0;
  double speed_mps = 10.0;
};

struct Trip {
  std::vector<int> segments;
  Polyline raw;        ///< meters, jittered
  double depart_s = 0;  ///< seconds since midnight
  double duration_s = 0;
};

inline double path_length(const geo::RoadNetwork& net, const std::vector<int>& segs) {
  double s = 0;
  for (int id : segs) s += net.segment(id).length;
  return s;
}

/// Concatenated segment polylines; shared junction points appear once.
inline Polyline concat_polylines(const geo::RoadNetwork& net, const std::vector<int>& segs) {
  Polyline out;
  for (int id : segs) {
    const auto& p = net.segment(id).polyline;
    out.insert(out.end(), (out.empty() || !(out.back() == p.front())) ? p.begin() : p.begin() + 1, p.end());
  }
  return out;
}

/// Peak-hour mixture: N(8h, 1h) and N(18h, 1.5h) with equal weight, wrapped to a day.
inline double sample_departure(Rng& rng) {
  const double h = rng.uniform() < 0.5 ? rng.normal(8.0, 1.0) : rng.normal(18.0, 1.5);
  double s = std::fmod(h * 3600.0, 86400.0);
  if (s < 0) s += 86400.0;
  return s >= 86400.0 ? 0.0 : s;
}

inline Trip simulate_trip(const geo::RoadNetwork& net, std::pair<int, int> od, const TripParams& p, Rng& rng) {
  auto sp = geo::shortest_path(net, od.first, od.second);
  require(sp.has_value(), Errc::unreachable,
          "segment " + std::to_string(od.second) + " unreachable from " + std::to_string(od.first));
  Trip trip;
  trip.segments = std::move(*sp);
  if (od.first != od.second && net.size() > 2 && rng.uniform() < p.detour_prob) {
    int via;
    do via = int(rng.uniform_int(0, long(net.size()) - 1));
    while (via == od.first || via == od.second);
    auto a = geo::shortest_path(net, od.first, via);
    auto b = geo::shortest_path(net, via, od.second);
    if (a && b) {
      trip.segments = std::move(*a);
      trip.segments.insert(trip.segments.end(), b->begin() + 1, b->end());
    }
  }
  trip.raw = concat_polylines(net, trip.segments);
  if (p.gps_noise_m > 0)
    for (auto& q : trip.raw) {
      q.x += rng.normal() * p.gps_noise_m;
      q.y += rng.normal() * p.gps_noise_m;
    }
  trip.duration_s = path_length(net, trip.segments) / p.speed_mps * std::exp(0.1 * rng.normal());
  trip.depart_s = sample_departure(rng);
  return trip;
}

/// N points at equal arc-length spacing; the endpoints are copied exactly.
inline Polyline resample_polyline(const Polyline& raw, std::size_t n) {
  require(n >= 2, Errc::invalid_argument, "resample needs N >= 2");
  require(raw.size() >= 2, Errc::degenerate_polyline, "polyline needs >= 2 points");
  std::vector<double> cum(raw.size(), 0.0);
  for (std::size_t i = 1; i < raw.size(); ++i) cum[i] = cum[i - 1] + geo::distance(raw[i - 1], raw[i]);
  const double total = cum.back();
  require(total > 0 && std::isfinite(total), Errc::degenerate_polyline, "polyline has zero length");
  Polyline out(n);
  out.front() = raw.front();
  out.back() = raw.back();
  std::size_t k = 1;
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double s = total * double(i) / double(n - 1);
    while (k + 1 < raw.size() && cum[k] < s) ++k;
    const double seg = cum[k] - cum[k - 1];
    const double u = seg > 0 ? (s - cum[k - 1]) / seg : 0.0;
    out[i] = {raw[k - 1].x + u * (raw[k].x - raw[k - 1].x), raw[k - 1].y + u * (raw[k].y - raw[k - 1].y)};
  }
  return out;
}

// -- normalisation -----------------------------------------------------------

inline void check_bbox(const BBox& b) {
  require(b.width() > 0 && b.height() > 0 && std::isfinite(b.width()) && std::isfinite(b.height()),
          Errc::degenerate_bbox, "bbox must have positive finite extent");
}

inline Point normalize_point(Point p, const BBox& b) {
  return {2.0 * (p.x - b.min_x) / b.width() - 1.0, 2.0 * (p.y - b.min_y) / b.height() - 1.0};
}

inline Point denormalize_point(Point p, const BBox& b) {
  return {b.min_x + (p.x + 1.0) * 0.5 * b.width(), b.min_y + (p.y + 1.0) * 0.5 * b.height()};
}

inline Polyline normalize_coords(const Polyline& pts, const BBox& b) {
  check_bbox(b);
  Polyline out(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) out[i] = normalize_point(pts[i], b);
  return out;
}

inline Polyline denormalize_coords(const Polyline& pts, const BBox& b) {
  check_bbox(b);
  Polyline out(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) out[i] = denormalize_point(pts[i], b);
  return out;
}

// -- conditions --------------------------------------------------------------

struct Condition {
  double depart = 0;  ///< fraction of the day in [0, 1)
  Point origin;       ///< normalized
  Point dest;         ///< normalized
  double len = 0;     ///< trip arc length / bbox diagonal, in [0, 1]
  double dur = 0;     ///< duration / cap, in (0, 1]

  std::array<double, 7> features() const { return {depart, origin.x, origin.y, dest.x, dest.y, len, dur}; }
  friend bool operator==(const Condition&, const Condition&) = default;
};

inline constexpr double kDefaultDurationCap = 7200.0;

inline Condition make_condition(double depart_s, double duration_s, double arc_length_m, Point origin_norm,
                                Point dest_norm, const BBox& bbox, double duration_cap_s = kDefaultDurationCap) {
  for (double v : {depart_s, duration_s, arc_length_m, origin_norm.x, origin_norm.y, dest_norm.x, dest_norm.y})
    require(std::isfinite(v), Errc::out_of_range, "condition field is not finite");
  check_bbox(bbox);
  Condition c;
  c.depart = std::fmod(depart_s / 86400.0, 1.0);
  if (c.depart < 0) c.depart += 1.0;
  if (c.depart >= 1.0) c.depart = 0.0;
  auto clamp1 = [](double v) { return std::clamp(v, -1.0, 1.0); };
  c.origin = {clamp1(origin_norm.x), clamp1(origin_norm.y)};
  c.dest = {clamp1(dest_norm.x), clamp1(dest_norm.y)};
  c.len = std::clamp(arc_length_m / bbox.diagonal(), 0.0, 1.0);
  c.dur = std::clamp(duration_s / duration_cap_s, std::numeric_limits<double>::min(), 1.0);
  return c;
}

// -- dataset -----------------------------------------------------------------

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw Error(Errc::parse, "unknown split '" + s + "'");
}

struct TrajectoryRecord {
  std::vector<int> seg;  ///< raw segment ids
  Polyline gps;          ///< N normalized points
  Condition cond;
  Split split = Split::train;
  friend bool operator==(const TrajectoryRecord&, const TrajectoryRecord&) = default;
};

struct DatasetParams {
  std::vector<Hotspot> hotspots;  ///< empty: default_hotspots(bbox)
  TripParams trip;
  std::size_t max_segments = 46;  ///< L_max minus BOS/EOS
  double duration_cap_s = kDefaultDurationCap;
};

struct Dataset {
  std::string network_file;
  std::size_t N = 64;
  BBox bbox;
  double length_cap_m = 0;  ///< trip_length normaliser (bbox diagonal)
  double duration_cap_s = kDefaultDurationCap;
  std::vector<TrajectoryRecord> records;

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].split == s) out.push_back(i);
    return out;
  }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// One simulated record drawn from its own generator.
inline TrajectoryRecord simulate_record(const geo::RoadNetwork& net, const DatasetParams& p,
                                        const std::vector<Hotspot>& hs, std::size_t N, double duration_cap_s,
                                        Rng& rng) {
  for (;;) {
    const auto od = sample_od(net, hs, rng);
    Trip trip = simulate_trip(net, od, p.trip, rng);
    if (trip.segments.size() > p.max_segments) continue;
    Polyline gps_m = resample_polyline(trip.raw, N);
    TrajectoryRecord r;
    r.seg = std::move(trip.segments);
    r.gps = normalize_coords(gps_m, net.bbox());
    for (auto& q : r.gps) q = {std::clamp(q.x, -1.0, 1.0), std::clamp(q.y, -1.0, 1.0)};
    r.cond = make_condition(trip.depart_s, trip.duration_s, geo::polyline_length(trip.raw), r.gps.front(),
                            r.gps.back(), net.bbox(), duration_cap_s);
    return r;
  }
}

/// Seeded 80/10/10 assignment of record indices to splits.
inline std::vector<Split> assign_splits(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng = Rng::substream(seed, 0xFFFFFFFFull);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  const std::size_t n_train = std::size_t(std::llround(0.8 * double(n)));
  const std::size_t n_val = std::min(n - n_train, std::size_t(std::llround(0.1 * double(n))));
  std::vector<Split> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[perm[i]] = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
  return out;
}

inline Dataset build_dataset(const geo::RoadNetwork& net, std::size_t n_trips, const DatasetParams& params,
                             std::size_t N, std::uint64_t seed, std::string network_file = "") {
  require(n_trips >= 1, Errc::invalid_argument, "n_trips must be >= 1");
  require(N >= 2, Errc::invalid_argument, "N must be >= 2");
  check_bbox(net.bbox());
  const auto hs = params.hotspots.empty() ? default_hotspots(net.bbox()) : params.hotspots;
  Dataset ds;
  ds.network_file = std::move(network_file);
  ds.N = N;
  ds.bbox = net.bbox();
  ds.length_cap_m = net.bbox().diagonal();
  ds.duration_cap_s = params.duration_cap_s;
  ds.records.reserve(n_trips);
  for (std::size_t i = 0; i < n_trips; ++i) {
    Rng rng = Rng::substream(seed, i);
    ds.records.push_back(simulate_record(net, params, hs, N, params.duration_cap_s, rng));
  }
  const auto splits = assign_splits(n_trips, seed);
  for (std::size_t i = 0; i < n_trips; ++i) ds.records[i].split = splits[i];
  return ds;
}

// -- NDJSON serialisation ----------------------------------------------------

inline nlohmann::json point_json(Point p) { return nlohmann::json::array({p.x, p.y}); }

inline nlohmann::json condition_json(const Condition& c) {
  return {{"depart", c.depart}, {"origin", point_json(c.origin)}, {"dest", point_json(c.dest)},
          {"len", c.len},       {"dur", c.dur}};
}

namespace detail {

inline double num(const nlohmann::json& j, const char* key, const std::string& where) {
  require(j.contains(key) && j[key].is_number(), Errc::parse, where + ": field " + key + " missing or not a number");
  return j[key].get<double>();
}

inline Point point(const nlohmann::json& j, const std::string& where) {
  require(j.is_array() && j.size() == 2 && j[0].is_number() && j[1].is_number(), Errc::parse,
          where + ": expected [x, y]");
  return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace detail

inline Condition condition_from_json(const nlohmann::json& j, const std::string& where) {
  require(j.is_object(), Errc::parse, where + ": cond must be an object");
  Condition c;
  c.depart = detail::num(j, "depart", where);
  require(j.contains("origin") && j.contains("dest"), Errc::parse, where + ": origin/dest missing");
  c.origin = detail::point(j["origin"], where + ".origin");
  c.dest = detail::point(j["dest"], where + ".dest");
  c.len = detail::num(j, "len", where);
  c.dur = detail::num(j, "dur", where);
  return c;
}

inline std::string dataset_to_ndjson(const Dataset& ds) {
  nlohmann::json header;
  header["version"] = 1;
  header["network_file"] = ds.network_file;
  header["N"] = ds.N;
  header["bbox"] = {ds.bbox.min_x, ds.bbox.min_y, ds.bbox.max_x, ds.bbox.max_y};
  header["length_cap_m"] = ds.length_cap_m;
  header["duration_cap_s"] = ds.duration_cap_s;
  header["splits"] = {{"train", ds.indices(Split::train).size()},
                      {"val", ds.indices(Split::val).size()},
                      {"test", ds.indices(Split::test).size()}};
  std::string out = header.dump() + "\n";
  for (const auto& r : ds.records) {
    nlohmann::json j;
    j["seg"] = r.seg;
    auto gps = nlohmann::json::array();
    for (const auto& p : r.gps) gps.push_back(point_json(p));
    j["gps"] = std::move(gps);
    j["cond"] = condition_json(r.cond);
    j["split"] = split_name(r.split);
    out += j.dump() + "\n";
  }
  return out;
}

inline Dataset dataset_from_ndjson(const std::string& text, const std::string& what = "dataset") {
  require(!text.empty(), Errc::parse, what + ": empty input");
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  Dataset ds;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = what + ": line " + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(Errc::parse, where + ": " + e.what());
    }
    if (!have_header) {
      require(j.is_object() && j.contains("version") && j["version"].is_number_integer(), Errc::parse,
              where + ": header needs an integer version");
      require(j["version"].get<int>() == 1, Errc::schema_version,
              where + ": unsupported version " + std::to_string(j["version"].get<int>()));
      require(j.contains("N") && j["N"].is_number_unsigned(), Errc::parse, where + ": field N missing");
      require(j.contains("bbox") && j["bbox"].is_array() && j["bbox"].size() == 4, Errc::parse,
              where + ": field bbox missing");
      ds.network_file = j.value("network_file", std::string());
      ds.N = j["N"].get<std::size_t>();
      ds.bbox = {j["bbox"][0].get<double>(), j["bbox"][1].get<double>(), j["bbox"][2].get<double>(),
                 j["bbox"][3].get<double>()};
      ds.length_cap_m = detail::num(j, "length_cap_m", where);
      ds.duration_cap_s = detail::num(j, "duration_cap_s", where);
      have_header = true;
      continue;
    }
    require(j.is_object() && j.contains("seg") && j["seg"].is_array(), Errc::parse, where + ": field seg missing");
    TrajectoryRecord r;
    for (const auto& s : j["seg"]) {
      require(s.is_number_integer() && s.get<long>() >= 0, Errc::parse, where + ": seg entries must be ids");
      r.seg.push_back(s.get<int>());
    }
    require(!r.seg.empty(), Errc::parse, where + ": empty seg");
    require(j.contains("gps") && j["gps"].is_array() && j["gps"].size() == ds.N, Errc::parse,
            where + ": field gps must hold N points");
    for (std::size_t k = 0; k < ds.N; ++k) {
      const Point p = detail::point(j["gps"][k], where + ".gps[" + std::to_string(k) + "]");
      require(std::abs(p.x) <= 1 && std::abs(p.y) <= 1, Errc::parse, where + ": gps outside [-1, 1]");
      r.gps.push_back(p);
    }
    require(j.contains("cond"), Errc::parse, where + ": field cond missing");
    r.cond = condition_from_json(j["cond"], where + ".cond");
    require(j.contains("split") && j["split"].is_string(), Errc::parse, where + ": field split missing");
    r.split = parse_split(j["split"].get<std::string>());
    ds.records.push_back(std::move(r));
  }
  require(have_header, Errc::parse, what + ": missing header line");
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) { geo::write_text_file(path, dataset_to_ndjson(ds)); }

inline Dataset load_dataset(const std::string& path) { return dataset_from_ndjson(geo::read_text_file(path), path); }

/// Metric-space GPS of a record.
inline Polyline gps_meters(const TrajectoryRecord& r, const BBox& b) { return denormalize_coords(r.gps, b); }

}  // namespace cardiff::data
