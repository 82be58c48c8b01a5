#pragma once

#include <cstdint>

namespace fila {

// Deterministic counter-style random stream (splitmix64). The entire stream
// position is the single 64-bit state word, so it serializes trivially and
// resuming from a saved state continues the exact sequence.
class RngStream {
 public:
  RngStream() : state_(0) {}
  explicit RngStream(std::uint64_t seed) : state_(seed) {}

  // Derives an independent stream from a master seed and a stream tag.
  static RngStream derive(std::uint64_t seed, std::uint64_t stream_tag);

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  // Uniform integer in [0, n), n > 0.
  std::uint64_t uniform_index(std::uint64_t n);
  // Box-Muller, consumes exactly two uniforms per call (no cached spare).
  float normal(float mean, float stddev);
  // Resamples until the draw lands in [lo, hi].
  float truncated_normal(float stddev, float lo, float hi);

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

}  // namespace fila
