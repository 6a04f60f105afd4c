#include "faultnav/fixedpoint.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <charconv>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace faultnav {

FixedFormat::FixedFormat(int integer_bits, int fraction_bits)
    : integer_bits_(integer_bits), fraction_bits_(fraction_bits) {
  if (integer_bits < 0 || fraction_bits < 0) {
    throw std::invalid_argument("fixed-point field widths must be non-negative");
  }
  const int w = width();
  if (w < 2 || w > 32) {
    throw std::invalid_argument("fixed-point width must be in [2, 32], got " + std::to_string(w));
  }
}

FixedFormat FixedFormat::parse(std::string_view text) {
  std::string compact;
  for (char c : text) {
    if (!std::isspace(static_cast<unsigned char>(c))) compact.push_back(c);
  }
  auto fail = [&]() -> FixedFormat {
    throw std::invalid_argument("malformed fixed-point format '" + std::string(text) +
                                "', expected Q(s,i,f)");
  };
  if (compact.size() < 8 || (compact[0] != 'Q' && compact[0] != 'q') || compact[1] != '(' ||
      compact.back() != ')') {
    return fail();
  }
  std::string_view body(compact);
  body = body.substr(2, body.size() - 3);
  int fields[3] = {0, 0, 0};
  for (int k = 0; k < 3; ++k) {
    auto comma = body.find(',');
    std::string_view tok = body.substr(0, comma);
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), fields[k]);
    if (ec != std::errc{} || ptr != tok.data() + tok.size()) return fail();
    if (k < 2) {
      if (comma == std::string_view::npos) return fail();
      body = body.substr(comma + 1);
    } else if (comma != std::string_view::npos) {
      return fail();
    }
  }
  if (fields[0] != kSignBits) {
    throw std::invalid_argument("fixed-point sign field must be 1 in '" + std::string(text) + "'");
  }
  return FixedFormat(fields[1], fields[2]);
}

std::string FixedFormat::to_string() const {
  return "Q(1," + std::to_string(integer_bits_) + "," + std::to_string(fraction_bits_) + ")";
}

double FixedFormat::min_value() const {
  return std::ldexp(static_cast<double>(raw_min()), -fraction_bits_);
}
double FixedFormat::max_value() const {
  return std::ldexp(static_cast<double>(raw_max()), -fraction_bits_);
}

std::int64_t sign_extend(std::uint32_t raw, int width) {
  const std::uint64_t mask = (width == 32) ? 0xFFFFFFFFull : ((1ull << width) - 1ull);
  std::uint64_t v = raw & mask;
  const std::uint64_t sign = 1ull << (width - 1);
  return static_cast<std::int64_t>((v ^ sign)) - static_cast<std::int64_t>(sign);
}

std::int64_t FixedValue::signed_raw() const { return sign_extend(raw, format.width()); }
double FixedValue::value() const { return dequantize_raw(raw, format); }

std::uint32_t quantize_raw(double x, const FixedFormat& fmt) {
  if (std::isnan(x)) return 0;
  const double scaled = x * fmt.scale();
  const double lo = static_cast<double>(fmt.raw_min());
  const double hi = static_cast<double>(fmt.raw_max());
  // nearbyint honours the default FE_TONEAREST mode: ties go to even.
  const double r = std::clamp(std::nearbyint(scaled), lo, hi);
  return static_cast<std::uint32_t>(static_cast<std::int64_t>(r)) & fmt.mask();
}

double dequantize_raw(std::uint32_t raw, const FixedFormat& fmt) {
  return static_cast<double>(sign_extend(raw, fmt.width())) * fmt.lsb();
}

FixedValue quantize(double x, const FixedFormat& fmt) { return {quantize_raw(x, fmt), fmt}; }

double dequantize(const FixedValue& v) { return dequantize_raw(v.raw, v.format); }

namespace {
void check_pos(const FixedFormat& fmt, int pos) {
  if (pos < 0 || pos >= fmt.width()) {
    throw std::out_of_range("bit position " + std::to_string(pos) + " outside " +
                            fmt.to_string());
  }
}
}  // namespace

FixedValue flip_bit(const FixedValue& v, int pos) {
  check_pos(v.format, pos);
  return {(v.raw ^ (1u << pos)) & v.format.mask(), v.format};
}

FixedValue stuck_bit(const FixedValue& v, int pos, int level) {
  check_pos(v.format, pos);
  if (level != 0 && level != 1) throw std::invalid_argument("stuck level must be 0 or 1");
  const std::uint32_t bit = 1u << pos;
  const std::uint32_t raw = level ? (v.raw | bit) : (v.raw & ~bit);
  return {raw & v.format.mask(), v.format};
}

std::int64_t integer_part(std::uint32_t raw, const FixedFormat& fmt) {
  // Arithmetic shift of the sign-extended pattern drops the fraction bits.
  return sign_extend(raw, fmt.width()) >> fmt.fraction_bits();
}

FixedTensor::FixedTensor(std::vector<std::size_t> shape, FixedFormat format)
    : shape_(std::move(shape)), format_(format) {
  const auto n = std::accumulate(shape_.begin(), shape_.end(), std::size_t{1},
                                 std::multiplies<>());
  data_.assign(n, 0u);
}

FixedTensor::FixedTensor(std::vector<std::size_t> shape, std::vector<std::uint32_t> data,
                         FixedFormat format)
    : shape_(std::move(shape)), data_(std::move(data)), format_(format) {
  const auto n = std::accumulate(shape_.begin(), shape_.end(), std::size_t{1},
                                 std::multiplies<>());
  if (n != data_.size()) {
    throw std::invalid_argument("tensor data length does not match shape");
  }
  for (auto& r : data_) r &= format_.mask();
}

void FixedTensor::set(std::size_t i, const FixedValue& v) {
  if (!(v.format == format_)) throw std::invalid_argument("format mismatch in FixedTensor::set");
  data_.at(i) = v.raw & format_.mask();
}

double BitCounts::ratio() const {
  if (ones == 0) return std::numeric_limits<double>::infinity();
  return static_cast<double>(zeros) / static_cast<double>(ones);
}

BitCounts bit_histogram(const std::vector<std::uint32_t>& raws, const FixedFormat& fmt) {
  BitCounts c;
  const auto width = static_cast<std::uint64_t>(fmt.width());
  for (auto r : raws) c.ones += static_cast<std::uint64_t>(std::popcount(r & fmt.mask()));
  c.zeros = width * raws.size() - c.ones;
  return c;
}

BitCounts bit_histogram(const FixedTensor& t) { return bit_histogram(t.data(), t.format()); }

}  // namespace faultnav
