#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <queue>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cardiff/errors.hpp"
#include "cardiff/rng.hpp"

namespace cardiff::geo {

struct Point {
  double x = 0;
  double y = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

inline double distance(const Point& a, const Point& b) { return std::hypot(a.x - b.x, a.y - b.y); }

struct BBox {
  double min_x = 0, min_y = 0, max_x = 0, max_y = 0;
  double width() const { return max_x - min_x; }
  double height() const { return max_y - min_y; }
  double diagonal() const { return std::hypot(width(), height()); }
  friend bool operator==(const BBox&, const BBox&) = default;
};

using Polyline = std::vector<Point>;

inline double polyline_length(const Polyline& p) {
  double s = 0;
  for (std::size_t i = 1; i < p.size(); ++i) s += distance(p[i - 1], p[i]);
  return s;
}

/// Point at arc length s along p (clamped to the ends).
inline Point point_at_arclength(const Polyline& p, double s) {
  if (s <= 0) return p.front();
  double acc = 0;
  for (std::size_t i = 1; i < p.size(); ++i) {
    const double seg = distance(p[i - 1], p[i]);
    if (seg > 0 && acc + seg >= s) {
      const double u = (s - acc) / seg;
      return {p[i - 1].x + u * (p[i].x - p[i - 1].x), p[i - 1].y + u * (p[i].y - p[i - 1].y)};
    }
    acc += seg;
  }
  return p.back();
}

struct Segment {
  int id = 0;
  Polyline polyline;
  double length = 0;
  Point center;
  friend bool operator==(const Segment&, const Segment&) = default;
};

struct Edge {
  int from = 0;
  int to = 0;
  friend bool operator==(const Edge&, const Edge&) = default;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

/// Dense |V| x |V| 0/1 matrix of permitted transitions.
class AdjacencyMatrix {
 public:
  explicit AdjacencyMatrix(std::size_t n = 0) : n_(n), data_(n * n, 0) {}
  std::size_t size() const { return n_; }
  std::uint8_t operator()(std::size_t a, std::size_t b) const { return data_[a * n_ + b]; }
  void set(std::size_t a, std::size_t b) { data_[a * n_ + b] = 1; }
  std::size_t row_sum(std::size_t a) const {
    std::size_t s = 0;
    for (std::size_t b = 0; b < n_; ++b) s += data_[a * n_ + b];
    return s;
  }

 private:
  std::size_t n_;
  std::vector<std::uint8_t> data_;
};

/// Directed graph whose vertices are road segments.
class RoadNetwork {
 public:
  RoadNetwork() = default;
  RoadNetwork(std::vector<Segment> segments, std::vector<Edge> edges, BBox bbox)
      : segments_(std::move(segments)), edges_(std::move(edges)), bbox_(bbox) {
    validate();
    succ_.assign(segments_.size(), {});
    for (const auto& e : edges_) succ_[std::size_t(e.from)].push_back(e.to);
    for (auto& s : succ_) std::sort(s.begin(), s.end());
  }

  const std::vector<Segment>& segments() const { return segments_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const BBox& bbox() const { return bbox_; }
  std::size_t size() const { return segments_.size(); }
  const Segment& segment(int id) const {
    check_id(id);
    return segments_[std::size_t(id)];
  }
  /// Sorted successor ids of segment `id`.
  const std::vector<int>& successors(int id) const {
    check_id(id);
    return succ_[std::size_t(id)];
  }
  const std::vector<std::vector<int>>& successor_lists() const { return succ_; }

  bool adjacent(int a, int b) const {
    const auto& s = successors(a);
    return std::binary_search(s.begin(), s.end(), b);
  }

  void check_id(int id) const {
    require(id >= 0 && std::size_t(id) < segments_.size(), Errc::unknown_segment,
            "segment id " + std::to_string(id) + " not in network of " + std::to_string(segments_.size()));
  }

  friend bool operator==(const RoadNetwork& a, const RoadNetwork& b) {
    return a.segments_ == b.segments_ && a.edges_ == b.edges_ && a.bbox_ == b.bbox_;
  }

 private:
  void validate() const {
    for (std::size_t i = 0; i < segments_.size(); ++i) {
      const auto& s = segments_[i];
      require(s.id == int(i), Errc::parse, "segment ids must be dense 0..|V|-1 (found " + std::to_string(s.id) + ")");
      require(s.polyline.size() >= 2, Errc::parse, "segment " + std::to_string(i) + " polyline needs >= 2 points");
      const double arc = polyline_length(s.polyline);
      require(s.length > 0 && std::abs(s.length - arc) <= 1e-6 * arc, Errc::parse,
              "segment " + std::to_string(i) + " length disagrees with polyline");
    }
    for (std::size_t i = 0; i < edges_.size(); ++i) {
      const auto& e = edges_[i];
      const bool ok = e.from >= 0 && e.to >= 0 && std::size_t(e.from) < segments_.size() &&
                      std::size_t(e.to) < segments_.size();
      require(ok, Errc::parse,
              "edges[" + std::to_string(i) + "] = [" + std::to_string(e.from) + "," + std::to_string(e.to) +
                  "] references an unknown segment");
    }
  }

  std::vector<Segment> segments_;
  std::vector<Edge> edges_;
  BBox bbox_;
  std::vector<std::vector<int>> succ_;
};

inline Segment make_segment(int id, Polyline poly) {
  Segment s;
  s.id = id;
  s.length = polyline_length(poly);
  s.center = point_at_arclength(poly, 0.5 * s.length);
  s.polyline = std::move(poly);
  return s;
}

/// Grid of rows x cols intersections with one directed segment per direction
/// per block edge. Each block edge carries an interior vertex at a seeded
/// fraction of its length; U-turns onto the reverse segment are not edges.
inline RoadNetwork generate_grid_network(int rows, int cols, double spacing, std::uint64_t seed) {
  require(rows >= 2 && cols >= 2, Errc::invalid_dimension, "grid needs rows >= 2 and cols >= 2");
  require(spacing > 0 && std::isfinite(spacing), Errc::invalid_dimension, "grid spacing must be positive");
  Rng rng(seed);
  auto node_pt = [&](int r, int c) { return Point{c * spacing, r * spacing}; };
  auto node_id = [&](int r, int c) { return r * cols + c; };

  std::vector<Segment> segs;
  std::vector<int> start_node, end_node, reverse_of;
  auto add_pair = [&](int r0, int c0, int r1, int c1) {
    const Point a = node_pt(r0, c0), b = node_pt(r1, c1);
    const double u = rng.uniform(0.35, 0.65);
    const Point mid{a.x + u * (b.x - a.x), a.y + u * (b.y - a.y)};
    const int id = int(segs.size());
    segs.push_back(make_segment(id, {a, mid, b}));
    segs.push_back(make_segment(id + 1, {b, mid, a}));
    start_node.insert(start_node.end(), {node_id(r0, c0), node_id(r1, c1)});
    end_node.insert(end_node.end(), {node_id(r1, c1), node_id(r0, c0)});
    reverse_of.insert(reverse_of.end(), {id + 1, id});
  };
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c + 1 < cols; ++c) add_pair(r, c, r, c + 1);
  for (int c = 0; c < cols; ++c)
    for (int r = 0; r + 1 < rows; ++r) add_pair(r, c, r + 1, c);

  std::vector<std::vector<int>> starting_at(std::size_t(rows * cols));
  for (std::size_t i = 0; i < segs.size(); ++i) starting_at[std::size_t(start_node[i])].push_back(int(i));
  std::vector<Edge> edges;
  for (std::size_t a = 0; a < segs.size(); ++a)
    for (int b : starting_at[std::size_t(end_node[a])])
      if (b != reverse_of[a]) edges.push_back({int(a), b});
  std::sort(edges.begin(), edges.end());

  const double m = 0.25 * spacing;
  BBox bbox{-m, -m, (cols - 1) * spacing + m, (rows - 1) * spacing + m};
  return RoadNetwork(std::move(segs), std::move(edges), bbox);
}

inline AdjacencyMatrix adjacency_matrix(const RoadNetwork& net) {
  AdjacencyMatrix a(net.size());
  for (const auto& e : net.edges()) a.set(std::size_t(e.from), std::size_t(e.to));
  return a;
}

/// Minimum-length segment path from `from` to `to` (both included; length
/// counts every segment after the first). Among equal-length paths the
/// lexicographically smallest id sequence is returned. nullopt = unreachable.
inline std::optional<std::vector<int>> shortest_path(const RoadNetwork& net, int from, int to) {
  net.check_id(from);
  net.check_id(to);
  if (from == to) return std::vector<int>{from};
  const std::size_t n = net.size();
  std::vector<std::vector<int>> pred(n);
  for (const auto& e : net.edges()) pred[std::size_t(e.to)].push_back(e.from);

  // Distance to `to` over reversed edges.
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(n, inf);
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  dist[std::size_t(to)] = 0;
  pq.push({0.0, to});
  while (!pq.empty()) {
    auto [d, v] = pq.top();
    pq.pop();
    if (d > dist[std::size_t(v)]) continue;
    const double w = net.segment(v).length;
    for (int u : pred[std::size_t(v)]) {
      const double nd = d + w;
      if (nd < dist[std::size_t(u)]) {
        dist[std::size_t(u)] = nd;
        pq.push({nd, u});
      }
    }
  }
  if (!std::isfinite(dist[std::size_t(from)])) return std::nullopt;

  std::vector<int> path{from};
  int cur = from;
  while (cur != to) {
    const double target = dist[std::size_t(cur)];
    const double tol = 1e-9 * std::max(1.0, target);
    int next = -1;
    for (int v : net.successors(cur)) {
      if (std::abs(net.segment(v).length + dist[std::size_t(v)] - target) <= tol) {
        next = v;
        break;
      }
    }
    require(next >= 0, Errc::unreachable, "shortest path reconstruction failed");
    path.push_back(next);
    cur = next;
    require(path.size() <= n, Errc::unreachable, "shortest path reconstruction cycled");
  }
  return path;
}

// -- serialisation --------------------------------------------------------

inline nlohmann::json network_to_json(const RoadNetwork& net) {
  nlohmann::json j;
  j["version"] = 1;
  const auto& b = net.bbox();
  j["bbox"] = {b.min_x, b.min_y, b.max_x, b.max_y};
  auto segs = nlohmann::json::array();
  for (const auto& s : net.segments()) {
    auto poly = nlohmann::json::array();
    for (const auto& p : s.polyline) poly.push_back({p.x, p.y});
    segs.push_back({{"id", s.id}, {"polyline", std::move(poly)}, {"length", s.length}});
  }
  j["segments"] = std::move(segs);
  auto edges = nlohmann::json::array();
  for (const auto& e : net.edges()) edges.push_back({e.from, e.to});
  j["edges"] = std::move(edges);
  return j;
}

namespace detail {

inline std::size_t line_of(const std::string& text, std::size_t byte) {
  return std::size_t(std::count(text.begin(), text.begin() + std::ptrdiff_t(std::min(byte, text.size())), '\n')) + 1;
}

inline double num(const nlohmann::json& v, const std::string& where) {
  require(v.is_number(), Errc::parse, "field " + where + ": expected a number");
  return v.get<double>();
}

}  // namespace detail

inline nlohmann::json parse_json_text(const std::string& text, const std::string& what) {
  require(!text.empty(), Errc::parse, what + ": empty input");
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(Errc::parse, what + ": line " + std::to_string(detail::line_of(text, e.byte)) + ": " + e.what());
  }
}

inline RoadNetwork network_from_json(const nlohmann::json& j) {
  require(j.is_object(), Errc::parse, "network: top level must be an object");
  require(j.contains("version") && j["version"].is_number_integer(), Errc::parse, "network: field version missing");
  require(j["version"].get<int>() == 1, Errc::schema_version,
          "network: unsupported version " + std::to_string(j["version"].get<int>()));
  for (const char* k : {"bbox", "segments", "edges"})
    require(j.contains(k) && j[k].is_array(), Errc::parse, std::string("network: field ") + k + " missing");
  const auto& jb = j["bbox"];
  require(jb.size() == 4, Errc::parse, "network: field bbox needs 4 numbers");
  BBox bbox{detail::num(jb[0], "bbox[0]"), detail::num(jb[1], "bbox[1]"), detail::num(jb[2], "bbox[2]"),
            detail::num(jb[3], "bbox[3]")};
  std::vector<Segment> segs;
  for (std::size_t i = 0; i < j["segments"].size(); ++i) {
    const auto& js = j["segments"][i];
    const std::string where = "segments[" + std::to_string(i) + "]";
    require(js.is_object() && js.contains("id") && js.contains("polyline") && js.contains("length"), Errc::parse,
            "field " + where + ": needs id, polyline, length");
    require(js["id"].is_number_integer(), Errc::parse, "field " + where + ".id: expected an integer");
    require(js["polyline"].is_array(), Errc::parse, "field " + where + ".polyline: expected an array");
    Polyline poly;
    for (std::size_t k = 0; k < js["polyline"].size(); ++k) {
      const auto& p = js["polyline"][k];
      const std::string pw = where + ".polyline[" + std::to_string(k) + "]";
      require(p.is_array() && p.size() == 2, Errc::parse, "field " + pw + ": expected [x, y]");
      poly.push_back({detail::num(p[0], pw), detail::num(p[1], pw)});
    }
    Segment s;
    s.id = js["id"].get<int>();
    require(poly.size() >= 2, Errc::parse, "field " + where + ".polyline: needs >= 2 points");
    s.length = detail::num(js["length"], where + ".length");
    s.center = point_at_arclength(poly, 0.5 * polyline_length(poly));
    s.polyline = std::move(poly);
    segs.push_back(std::move(s));
  }
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < j["edges"].size(); ++i) {
    const auto& je = j["edges"][i];
    const std::string where = "edges[" + std::to_string(i) + "]";
    require(je.is_array() && je.size() == 2 && je[0].is_number_integer() && je[1].is_number_integer(), Errc::parse,
            "field " + where + ": expected [from, to]");
    edges.push_back({je[0].get<int>(), je[1].get<int>()});
  }
  return RoadNetwork(std::move(segs), std::move(edges), bbox);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), Errc::io, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(bool(out), Errc::io, "cannot write " + path);
  out << text;
  require(bool(out), Errc::io, "write failed for " + path);
}

inline void save_network(const RoadNetwork& net, const std::string& path) {
  write_text_file(path, network_to_json(net).dump() + "\n");
}

inline RoadNetwork load_network(const std::string& path) {
  return network_from_json(parse_json_text(read_text_file(path), path));
}

}  // namespace cardiff::geo
