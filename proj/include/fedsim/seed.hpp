#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedsim {

using Rng = std::mt19937_64;

// Role tags for independent random streams inside one trial.
enum class SeedRole : std::uint64_t {
  kData = 1,
  kTest = 2,
  kSplit = 3,
  kKShot = 4,
  kInit = 5,
  kDeploy = 6,
  kReport = 7,
  kLocal = 8,
  kCentral = 9,
  kNet = 10,
  kArrival = 11,
};

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Folds every part into the base seed. Distinct part lists give unrelated
// streams, so draws for (round, client) never depend on evaluation order.
constexpr std::uint64_t derive_seed(std::uint64_t base,
                                    std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = splitmix64(base);
  for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p + 0x632BE59BD9B4E019ULL));
  return h;
}

constexpr std::uint64_t derive_seed(std::uint64_t base, SeedRole role,
                                    std::uint64_t a = 0, std::uint64_t b = 0) {
  return derive_seed(base, {static_cast<std::uint64_t>(role), a, b});
}

}  // namespace fedsim
