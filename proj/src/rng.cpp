#include "fila/rng.hpp"

#include <cmath>

namespace fila {

namespace {
std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}
}  // namespace

RngStream RngStream::derive(std::uint64_t seed, std::uint64_t stream_tag) {
  return RngStream(mix64(seed + 0x9E3779B97F4A7C15ULL * (stream_tag + 1)));
}

std::uint64_t RngStream::next_u64() {
  state_ += 0x9E3779B97F4A7C15ULL;
  return mix64(state_);
}

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t RngStream::uniform_index(std::uint64_t n) {
  return next_u64() % n;
}

float RngStream::normal(float mean, float stddev) {
  double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double value = r * std::cos(2.0 * 3.14159265358979323846 * u2);
  return mean + stddev * static_cast<float>(value);
}

float RngStream::truncated_normal(float stddev, float lo, float hi) {
  for (;;) {
    float v = normal(0.0f, stddev);
    if (v >= lo && v <= hi) return v;
  }
}

}  // namespace fila
