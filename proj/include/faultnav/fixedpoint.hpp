#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace faultnav {

/// Two's-complement fixed-point layout Q(sign, integer, fraction).
///
/// The sign field is always one bit. Widths from 2 to 32 bits are accepted;
/// the shipped experiments use 8- and 16-bit layouts.
class FixedFormat {
 public:
  static constexpr int kSignBits = 1;

  /// Default 8-bit layout used for Grid World buffers: Q(1,3,4).
  constexpr FixedFormat() = default;
  FixedFormat(int integer_bits, int fraction_bits);

  /// Parses "Q(s,i,f)", e.g. "Q(1,4,11)". Whitespace is ignored.
  static FixedFormat parse(std::string_view text);

  std::string to_string() const;

  constexpr int integer_bits() const { return integer_bits_; }
  constexpr int fraction_bits() const { return fraction_bits_; }
  constexpr int width() const { return kSignBits + integer_bits_ + fraction_bits_; }

  constexpr std::uint32_t mask() const {
    return width() == 32 ? 0xFFFFFFFFu : ((1u << width()) - 1u);
  }
  constexpr std::int64_t raw_min() const { return -(std::int64_t{1} << (width() - 1)); }
  constexpr std::int64_t raw_max() const { return (std::int64_t{1} << (width() - 1)) - 1; }

  /// Weight of the least significant bit, 2^-fraction_bits.
  double lsb() const { return 1.0 / scale(); }
  /// 2^fraction_bits, exact in double.
  double scale() const { return static_cast<double>(std::uint64_t{1} << fraction_bits_); }
  double min_value() const;
  double max_value() const;

  friend constexpr bool operator==(const FixedFormat&, const FixedFormat&) = default;

 private:
  int integer_bits_ = 3;
  int fraction_bits_ = 4;
};

/// A single width-bit pattern interpreted under a format.
struct FixedValue {
  std::uint32_t raw = 0;
  FixedFormat format;

  /// Sign-extended raw integer.
  std::int64_t signed_raw() const;
  double value() const;

  friend bool operator==(const FixedValue&, const FixedValue&) = default;
};

/// Round-to-nearest-even of x * 2^f, saturated to the format range. NaN maps to 0.
FixedValue quantize(double x, const FixedFormat& fmt);
double dequantize(const FixedValue& v);

/// Raw-level helpers shared by the buffer code paths.
std::uint32_t quantize_raw(double x, const FixedFormat& fmt);
double dequantize_raw(std::uint32_t raw, const FixedFormat& fmt);
std::int64_t sign_extend(std::uint32_t raw, int width);

/// Throws std::out_of_range when pos is not a valid bit index of the format.
FixedValue flip_bit(const FixedValue& v, int pos);
FixedValue stuck_bit(const FixedValue& v, int pos, int level);

/// Value formed by the sign and integer bits only (fraction bits cleared).
/// Equivalent to floor(value) for two's complement.
std::int64_t integer_part(std::uint32_t raw, const FixedFormat& fmt);

/// Dense tensor of raw bit patterns sharing one format.
class FixedTensor {
 public:
  FixedTensor() = default;
  FixedTensor(std::vector<std::size_t> shape, FixedFormat format);
  FixedTensor(std::vector<std::size_t> shape, std::vector<std::uint32_t> data, FixedFormat format);

  const std::vector<std::size_t>& shape() const { return shape_; }
  const FixedFormat& format() const { return format_; }
  std::size_t numel() const { return data_.size(); }

  FixedValue at(std::size_t i) const { return {data_.at(i), format_}; }
  void set(std::size_t i, const FixedValue& v);

  std::uint32_t raw(std::size_t i) const { return data_[i]; }
  void set_raw(std::size_t i, std::uint32_t raw) { data_[i] = raw & format_.mask(); }

  const std::vector<std::uint32_t>& data() const { return data_; }

 private:
  std::vector<std::size_t> shape_;
  std::vector<std::uint32_t> data_;
  FixedFormat format_;
};

struct BitCounts {
  std::uint64_t zeros = 0;
  std::uint64_t ones = 0;
  double ratio() const;  // zeros / ones; +inf when there are no ones
};

BitCounts bit_histogram(const FixedTensor& t);
BitCounts bit_histogram(const std::vector<std::uint32_t>& raws, const FixedFormat& fmt);

}  // namespace faultnav
