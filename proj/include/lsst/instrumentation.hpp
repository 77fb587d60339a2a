#pragma once

#include <array>
#include <cstdint>

namespace lsst {

// What a matmul is being used for, for per-category flop accounting.
enum class FlopCategory : std::uint8_t {
  kOther = 0,
  kScore,       // forward Q*K^T and A_w*V
  kProjection,  // forward linear layers, including the output head
  kBackward,    // every matmul in a backward pass
};
inline constexpr std::size_t kFlopCategoryCount = 4;

// Work measured on one worker while it runs. Matmul kernels add 2*m*k*n to
// the active category; attention adds the score elements it materializes.
struct WorkCounters {
  std::array<std::uint64_t, kFlopCategoryCount> flops{};
  // Score elements held by the attention layer currently in flight.
  std::uint64_t score_elements_live = 0;
  // Largest per-layer score footprint seen so far.
  std::uint64_t score_elements_peak = 0;

  std::uint64_t flops_in(FlopCategory c) const { return flops[static_cast<std::size_t>(c)]; }
  std::uint64_t total_flops() const;
  void merge_max(const WorkCounters& other);
};

// Installs counters for the current thread for the scope's lifetime.
class CounterScope {
 public:
  explicit CounterScope(WorkCounters& counters);
  ~CounterScope();
  CounterScope(const CounterScope&) = delete;
  CounterScope& operator=(const CounterScope&) = delete;

 private:
  WorkCounters* previous_;
};

// Tags matmuls issued on this thread within the scope.
class CategoryScope {
 public:
  explicit CategoryScope(FlopCategory category);
  ~CategoryScope();
  CategoryScope(const CategoryScope&) = delete;
  CategoryScope& operator=(const CategoryScope&) = delete;

 private:
  FlopCategory previous_;
};

void count_flops(std::uint64_t flops);
void note_score_elements(std::uint64_t elements);
// Closes the current attention layer: peak = max(peak, live), live = 0.
void end_attention_layer();

}  // namespace lsst
