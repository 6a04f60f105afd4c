#include "faultnav/buffer.hpp"

#include <algorithm>
#include <stdexcept>

namespace faultnav {

QuantBuffer::QuantBuffer(std::vector<std::size_t> shape, FixedFormat format, bool carry_residual)
    : tensor_(std::move(shape), format), carry_residual_(carry_residual) {
  values_.assign(tensor_.numel(), 0.0);
  if (carry_residual_) residual_.assign(tensor_.numel(), 0.0);
}

void QuantBuffer::store(std::size_t i, std::uint32_t raw) {
  if (!set_mask_.empty()) raw = (raw | set_mask_[i]) & ~clear_mask_[i];
  tensor_.set_raw(i, raw);
  values_[i] = dequantize_raw(tensor_.raw(i), tensor_.format());
  ++version_;
}

void QuantBuffer::write(std::size_t i, double x) {
  store(i, quantize_raw(x, tensor_.format()));
  if (carry_residual_) residual_[i] = 0.0;
}

void QuantBuffer::write_raw(std::size_t i, std::uint32_t raw) {
  store(i, raw);
  if (carry_residual_) residual_[i] = 0.0;
}

void QuantBuffer::accumulate(std::size_t i, double delta) {
  const auto& fmt = tensor_.format();
  if (!carry_residual_) {
    store(i, quantize_raw(values_[i] + delta, fmt));
    return;
  }
  const double target = values_[i] + residual_[i] + delta;
  const std::uint32_t raw = quantize_raw(target, fmt);
  const double half = 0.5 * fmt.lsb();
  residual_[i] = std::clamp(target - dequantize_raw(raw, fmt), -half, half);
  store(i, raw);
}

void QuantBuffer::load_raw(std::span<const std::uint32_t> raws) {
  if (raws.size() != size()) throw std::invalid_argument("load_raw size mismatch");
  for (std::size_t i = 0; i < raws.size(); ++i) store(i, raws[i]);
  if (carry_residual_) std::fill(residual_.begin(), residual_.end(), 0.0);
}

void QuantBuffer::fill(double x) {
  for (std::size_t i = 0; i < size(); ++i) write(i, x);
}

void QuantBuffer::flip(std::size_t i, int bit) {
  if (bit < 0 || bit >= format().width()) throw std::out_of_range("flip bit outside format");
  store(i, tensor_.raw(i) ^ (1u << bit));
}

void QuantBuffer::set_stuck(std::size_t i, int bit, int level) {
  if (i >= size()) throw std::out_of_range("stuck site element outside buffer");
  if (bit < 0 || bit >= format().width()) throw std::out_of_range("stuck bit outside format");
  if (set_mask_.empty()) {
    set_mask_.assign(size(), 0u);
    clear_mask_.assign(size(), 0u);
  }
  const std::uint32_t b = 1u << bit;
  if (level) {
    set_mask_[i] |= b;
    clear_mask_[i] &= ~b;
  } else {
    clear_mask_[i] |= b;
    set_mask_[i] &= ~b;
  }
  store(i, tensor_.raw(i));
}

void QuantBuffer::clear_stuck() {
  set_mask_.clear();
  clear_mask_.clear();
}

bool QuantBuffer::stuck_bits_hold() const {
  for (std::size_t i = 0; i < set_mask_.size(); ++i) {
    const auto r = tensor_.raw(i);
    if ((r & set_mask_[i]) != set_mask_[i] || (r & clear_mask_[i]) != 0) return false;
  }
  return true;
}

void QuantBuffer::commit_pending() {
  for (auto [i, mask] : pending_) store(i, tensor_.raw(i) ^ mask);
  pending_.clear();
}

}  // namespace faultnav
