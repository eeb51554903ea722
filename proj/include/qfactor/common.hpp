#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace qfactor {

/// Base exception for all recoverable library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// SplitMix64 finalizer. Used to derive independent per-task seeds from a
/// base seed so that parallel work is reproducible regardless of scheduling.
constexpr std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Number of worker threads used by parallel_for (defaults to hardware
/// concurrency; 1 disables threading).
std::size_t max_threads();
void set_max_threads(std::size_t n);

/// Runs body(i) for i in [0, n). Each index is visited exactly once; callers
/// write results to per-index slots so the outcome does not depend on thread
/// scheduling. Nested calls run serially inside the enclosing worker.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace qfactor
