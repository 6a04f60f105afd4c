#include "faultnav/range_profile.hpp"

#include <algorithm>
#include <cmath>

namespace faultnav {

bool check_anomaly_raw(std::uint32_t raw, const FixedFormat& fmt, const ValueBounds& bounds) {
  const double whole = static_cast<double>(integer_part(raw, fmt));
  return whole < std::floor(bounds.lower) || whole > bounds.upper;
}

bool check_anomaly(const FixedValue& value, const ValueBounds& bounds) {
  return check_anomaly_raw(value.raw, value.format, bounds);
}

RawWindow raw_window(const ValueBounds& bounds, const FixedFormat& fmt) {
  const std::int64_t one = std::int64_t{1} << fmt.fraction_bits();
  const auto clamp = [&fmt](double v) {
    return std::clamp(v, static_cast<double>(fmt.raw_min()), static_cast<double>(fmt.raw_max()));
  };
  RawWindow w;
  w.width = fmt.width();
  // integer_part >= floor(lower) and integer_part <= floor(upper).
  w.lo = static_cast<std::int64_t>(clamp(std::floor(bounds.lower))) * one;
  w.hi = (static_cast<std::int64_t>(clamp(std::floor(bounds.upper))) + 1) * one - 1;
  return w;
}

}  // namespace faultnav
