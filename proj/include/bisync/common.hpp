#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bisync {

// All recoverable failures surface as bisync::Error; the message is the
// user-facing diagnostic.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

struct LanguagePair {
  std::string first = "srcish";
  std::string second = "tgtish";

  bool contains(std::string_view lang) const { return lang == first || lang == second; }
  const std::string& other(std::string_view lang) const {
    if (lang == first) return second;
    if (lang == second) return first;
    throw Error("unknown language '" + std::string(lang) + "'");
  }
};

// Whitespace tokenization used everywhere words are counted or diffed.
std::vector<std::string> split_words(std::string_view text);
std::string join_words(const std::vector<std::string>& words, std::size_t begin = 0,
                       std::size_t end = static_cast<std::size_t>(-1));
std::string trim(std::string_view text);


using Rng = std::mt19937_64;

// Derives an independent stream seed for item `index` of a job seeded by
// `seed`, so results do not depend on how items are split across workers.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Uniform integer in [lo, hi], both inclusive.
inline std::size_t uniform_int(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

inline bool bernoulli(Rng& rng, double p) { return uniform01(rng) < p; }

std::size_t sample_weighted(Rng& rng, const std::vector<double>& weights);

}  // namespace bisync
