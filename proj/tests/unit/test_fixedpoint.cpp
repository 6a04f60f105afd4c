#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>

#include "faultnav/fixedpoint.hpp"
#include "faultnav/rng.hpp"

using namespace faultnav;

TEST_SUITE("fixedpoint") {

TEST_CASE("quantize examples") {
  const FixedFormat q4_11(4, 11);
  CHECK(quantize(0.5, q4_11).raw == 1024);
  CHECK(quantize(0.0, FixedFormat(7, 8)).raw == 0);
  const FixedValue sat = quantize(100.0, q4_11);
  CHECK(sat.raw == 32767);
  CHECK(sat.value() == doctest::Approx(16.0 - 1.0 / 2048));
  CHECK(quantize(-100.0, q4_11).raw == 0x8000);
  CHECK(quantize(std::numeric_limits<double>::quiet_NaN(), q4_11).raw == 0);
}

TEST_CASE("round to nearest even") {
  const FixedFormat f(3, 4);
  // 1/32 is half an LSB: ties go to the even raw.
  CHECK(quantize(1.0 / 32, f).raw == 0);
  CHECK(quantize(3.0 / 32, f).raw == 2);
  CHECK(quantize(-1.0 / 32, f).raw == 0);
  CHECK(quantize(-3.0 / 32, f).signed_raw() == -2);
}

TEST_CASE("dequantize examples") {
  CHECK(dequantize({1024, FixedFormat(4, 11)}) == 0.5);
  CHECK(dequantize({0x8000, FixedFormat(4, 11)}) == -16.0);
  CHECK(dequantize({0x80, FixedFormat(3, 4)}) == -8.0);
}

TEST_CASE("format parsing and range") {
  const FixedFormat f = FixedFormat::parse(" Q( 1, 7 ,8 )");
  CHECK(f.integer_bits() == 7);
  CHECK(f.fraction_bits() == 8);
  CHECK(f.width() == 16);
  CHECK(f.to_string() == "Q(1,7,8)");
  CHECK_THROWS(FixedFormat::parse("Q(2,3,4)"));
  CHECK_THROWS(FixedFormat::parse("Q(1,3)"));
  CHECK_THROWS(FixedFormat(20, 20));
  CHECK_THROWS(FixedFormat(0, 0));
  for (const auto& fmt : {FixedFormat(3, 4), FixedFormat(1, 6), FixedFormat(4, 11), FixedFormat(7, 8),
                          FixedFormat(10, 5), FixedFormat(10, 21)}) {
    CHECK(dequantize_raw(static_cast<std::uint32_t>(fmt.raw_min()) & fmt.mask(), fmt) ==
          -std::ldexp(1.0, fmt.integer_bits()));
    CHECK(dequantize_raw(static_cast<std::uint32_t>(fmt.raw_max()), fmt) ==
          std::ldexp(1.0, fmt.integer_bits()) - fmt.lsb());
    CHECK(fmt.min_value() == -std::ldexp(1.0, fmt.integer_bits()));
  }
}

TEST_CASE("flip_bit examples") {
  const FixedFormat f(4, 11);
  const FixedValue flipped = flip_bit({0x0000, f}, 15);
  CHECK(flipped.raw == 0x8000);
  CHECK(flipped.value() == -16.0);
  CHECK(flip_bit({0x0001, f}, 0).raw == 0x0000);
  CHECK_THROWS_AS(flip_bit({0, f}, 16), std::out_of_range);
  CHECK_THROWS_AS(flip_bit({0, f}, -1), std::out_of_range);
}

TEST_CASE("stuck_bit examples") {
  const FixedFormat f(4, 11);
  CHECK(stuck_bit({0xFFFF, f}, 3, 0).raw == 0xFFF7);
  CHECK(stuck_bit({0x0000, f}, 3, 0).raw == 0x0000);
  const FixedValue v = stuck_bit({0x0000, f}, 14, 1);
  CHECK(v.raw == 0x4000);
  CHECK(v.value() == 8.0);
  CHECK_THROWS_AS(stuck_bit({0, f}, 16, 1), std::out_of_range);
  CHECK_THROWS(stuck_bit({0, f}, 2, 2));
}

TEST_CASE("bit histogram examples") {
  const FixedFormat f(3, 4);
  const FixedTensor one({1}, {0x0F}, f);
  const BitCounts c = bit_histogram(one);
  CHECK(c.zeros == 4);
  CHECK(c.ones == 4);
  const FixedTensor zeros({10}, f);
  const BitCounts z = bit_histogram(zeros);
  CHECK(z.zeros == 80);
  CHECK(z.ones == 0);
  CHECK(std::isinf(z.ratio()));
}

TEST_CASE("tensor shape checks") {
  CHECK_THROWS(FixedTensor({2, 3}, {1, 2, 3}, FixedFormat()));
  FixedTensor t({2, 3}, FixedFormat());
  CHECK(t.numel() == 6);
  CHECK_THROWS(t.set(0, {0, FixedFormat(4, 11)}));
}

TEST_CASE("property: round trip within half an LSB") {
  Rng rng(11);
  for (const auto& fmt : {FixedFormat(3, 4), FixedFormat(1, 6), FixedFormat(4, 11), FixedFormat(7, 8),
                          FixedFormat(10, 5)}) {
    for (int i = 0; i < 20000; ++i) {
      const double x = uniform_real(rng, fmt.min_value(), fmt.max_value());
      const double err = std::fabs(dequantize(quantize(x, fmt)) - x);
      REQUIRE(err <= fmt.lsb() / 2);
    }
  }
}

TEST_CASE("property: quantize is monotone and saturates") {
  Rng rng(12);
  const FixedFormat fmt(3, 4);
  double prev_x = -20.0;
  std::int64_t prev = quantize(prev_x, fmt).signed_raw();
  for (int i = 0; i < 20000; ++i) {
    const double x = prev_x + uniform_real(rng, 0.0, 0.01);
    const std::int64_t r = quantize(x, fmt).signed_raw();
    REQUIRE(r >= prev);
    prev = r;
    prev_x = x;
  }
  CHECK(prev == fmt.raw_max());
}

TEST_CASE("property: flip involution, stuck idempotence, commuting") {
  Rng rng(13);
  const FixedFormat fmt(4, 11);
  for (int i = 0; i < 5000; ++i) {
    const FixedValue v{static_cast<std::uint32_t>(uniform_index(rng, 1u << 16)), fmt};
    const int p = static_cast<int>(uniform_index(rng, 16));
    int q = static_cast<int>(uniform_index(rng, 16));
    if (q == p) q = (q + 1) % 16;
    const int level = static_cast<int>(uniform_index(rng, 2));
    REQUIRE(flip_bit(flip_bit(v, p), p) == v);
    const FixedValue s = stuck_bit(v, p, level);
    REQUIRE(stuck_bit(s, p, level) == s);
    REQUIRE(((s.raw >> p) & 1u) == static_cast<std::uint32_t>(level));
    REQUIRE((s.raw & ~(1u << p)) == (v.raw & ~(1u << p)));
    REQUIRE(flip_bit(stuck_bit(v, p, level), q) == stuck_bit(flip_bit(v, q), p, level));
  }
}

TEST_CASE("integer part is floor") {
  const FixedFormat fmt(4, 11);
  CHECK(integer_part(quantize(3.7, fmt).raw, fmt) == 3);
  CHECK(integer_part(quantize(-0.25, fmt).raw, fmt) == -1);
  CHECK(integer_part(quantize(-16.0, fmt).raw, fmt) == -16);
}

}  // TEST_SUITE
