#include "quanos/rng.hpp"

#include <numeric>

#include "quanos/error.hpp"

namespace quanos::rng {

std::uint64_t below(Engine& eng, std::uint64_t n) {
  if (n == 0) throw ArgumentError("rng::below needs a positive bound");
  // Rejection on the top of the range keeps every residue equally likely.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = eng();
  } while (x >= limit);
  return x % n;
}

std::vector<std::size_t> sample_indices(std::size_t population, std::size_t count, Engine& eng) {
  if (count > population) {
    throw ArgumentError("cannot draw " + std::to_string(count) + " items without replacement from " +
                        std::to_string(population));
  }
  std::vector<std::size_t> idx(population);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  // Partial Fisher-Yates: the first `count` slots are the sample.
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(below(eng, population - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  return idx;
}

}  // namespace quanos::rng
