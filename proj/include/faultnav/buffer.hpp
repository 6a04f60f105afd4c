#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "faultnav/fixedpoint.hpp"

namespace faultnav {

/// A fault-site memory: a FixedTensor of raw patterns plus a dequantized
/// mirror used by the arithmetic. Every write quantizes; every stuck-at
/// bit is re-forced on write.
///
/// Trainable buffers may carry a sub-LSB remainder per element so repeated
/// small updates accumulate instead of rounding away. The remainder is
/// bounded by half an LSB and never stores anything a bit flip could have
/// changed.
class QuantBuffer {
 public:
  QuantBuffer() = default;
  QuantBuffer(std::vector<std::size_t> shape, FixedFormat format, bool carry_residual = false);

  std::size_t size() const { return values_.size(); }
  const FixedFormat& format() const { return tensor_.format(); }
  const FixedTensor& tensor() const { return tensor_; }

  double read(std::size_t i) const { return values_[i]; }
  std::span<const double> values() const { return values_; }
  std::uint32_t raw(std::size_t i) const { return tensor_.raw(i); }

  void write(std::size_t i, double x);
  void write_raw(std::size_t i, std::uint32_t raw);
  /// Adds delta to the element (plus any carried remainder) and re-quantizes.
  void accumulate(std::size_t i, double delta);
  /// Replaces all raws, e.g. when loading a checkpoint. Size must match.
  void load_raw(std::span<const std::uint32_t> raws);
  void fill(double x);

  /// Memory-scoped flip; stuck bits still win.
  void flip(std::size_t i, int bit);

  void set_stuck(std::size_t i, int bit, int level);
  void clear_stuck();
  bool has_stuck() const { return !set_mask_.empty(); }
  /// True when every stuck bit currently holds its level.
  bool stuck_bits_hold() const;

  /// Flips queued for the next commit_pending(), used for faults that land on
  /// a buffer right after a layer writes it.
  void arm_flip(std::size_t i, std::uint32_t xor_mask) { pending_.emplace_back(i, xor_mask); }
  void commit_pending();
  bool has_pending() const { return !pending_.empty(); }

  bool carries_residual() const { return carry_residual_; }

  /// Bumped on every mutation.
  std::uint64_t version() const { return version_; }

 private:
  void store(std::size_t i, std::uint32_t raw);

  FixedTensor tensor_;
  std::vector<double> values_;
  std::vector<double> residual_;
  std::vector<std::uint32_t> set_mask_;
  std::vector<std::uint32_t> clear_mask_;
  std::vector<std::pair<std::size_t, std::uint32_t>> pending_;
  bool carry_residual_ = false;
  std::uint64_t version_ = 0;
};

}  // namespace faultnav
