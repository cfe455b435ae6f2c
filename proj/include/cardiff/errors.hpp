#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cardiff {

enum class Errc {
  invalid_dimension,
  invalid_argument,
  unknown_segment,
  parse,
  schema_version,
  io,
  degenerate_mixture,
  unreachable,
  degenerate_polyline,
  degenerate_bbox,
  out_of_range,
  shape_mismatch,
  odd_dimension,
  non_finite,
  empty_batch,
  overlength,
  degenerate_dimension,
  step_range,
  ordering,
  invalid_endpoint,
  missing_codec,
  incompatible_checkpoint,
  invalid_interval,
  version_mismatch,
  corruption,
  missing_group,
  bin_mismatch,
  empty_set,
};

inline std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::invalid_dimension: return "invalid-dimension";
    case Errc::invalid_argument: return "invalid-argument";
    case Errc::unknown_segment: return "unknown-segment";
    case Errc::parse: return "parse";
    case Errc::schema_version: return "schema-version";
    case Errc::io: return "io";
    case Errc::degenerate_mixture: return "degenerate-mixture";
    case Errc::unreachable: return "unreachable";
    case Errc::degenerate_polyline: return "degenerate-polyline";
    case Errc::degenerate_bbox: return "degenerate-bbox";
    case Errc::out_of_range: return "out-of-range";
    case Errc::shape_mismatch: return "shape-mismatch";
    case Errc::odd_dimension: return "odd-dimension";
    case Errc::non_finite: return "non-finite";
    case Errc::empty_batch: return "empty-batch";
    case Errc::overlength: return "overlength";
    case Errc::degenerate_dimension: return "degenerate-dimension";
    case Errc::step_range: return "step-range";
    case Errc::ordering: return "ordering";
    case Errc::invalid_endpoint: return "invalid-endpoint";
    case Errc::missing_codec: return "missing-codec";
    case Errc::incompatible_checkpoint: return "incompatible-checkpoint";
    case Errc::invalid_interval: return "invalid-interval";
    case Errc::version_mismatch: return "version-mismatch";
    case Errc::corruption: return "corruption";
    case Errc::missing_group: return "missing-group";
    case Errc::bin_mismatch: return "bin-mismatch";
    case Errc::empty_set: return "empty-set";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

}  // namespace cardiff
