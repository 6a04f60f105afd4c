#pragma once

#include <cstdint>
#include <vector>

#include "faultnav/fixedpoint.hpp"

namespace faultnav {

/// Guarded [lower, upper] interval of one buffer.
struct ValueBounds {
  double lower = 0.0;
  double upper = 0.0;
};

struct LayerRange {
  ValueBounds params;
  ValueBounds outputs;
};

/// Per-layer value ranges of a fault-free agent, already widened by the
/// detection margin. Tabular agents use a single entry whose `params` covers
/// the whole table.
struct RangeProfile {
  FixedFormat format;
  ValueBounds input{0.0, 0.0};
  std::vector<LayerRange> layers;
};

/// True iff the sign-and-integer part of the value (fraction bits cleared)
/// falls outside the bounds. The lower bound is compared at the same integer
/// granularity so in-range values never flag.
bool check_anomaly(const FixedValue& value, const ValueBounds& bounds);
bool check_anomaly_raw(std::uint32_t raw, const FixedFormat& fmt, const ValueBounds& bounds);

/// The same test in the raw domain, for hot loops: flagged iff the
/// sign-extended raw falls outside [lo, hi].
struct RawWindow {
  std::int64_t lo = 0;
  std::int64_t hi = 0;
  int width = 32;

  bool flags(std::uint32_t raw) const {
    const int shift = 32 - width;
    const std::int64_t v = static_cast<std::int32_t>(raw << shift) >> shift;
    return v < lo || v > hi;
  }
};
RawWindow raw_window(const ValueBounds& bounds, const FixedFormat& fmt);

}  // namespace faultnav
