#pragma once

// Reference rounding used by the numerics tests and the acceptance suite.
// Deliberately arithmetic (frexp / nearbyint / ldexp) rather than bit
// twiddling so that it shares no code path with round_to_format.

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <vector>

namespace oracle {

// splitmix64 stream; must match tests/oracles/rounding_digests.py.
class SampleStream {
 public:
  explicit SampleStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Random double with unbiased exponent in [lo, hi]; one in eight samples is
  // an exact tie for a target with `mant_bits` fraction bits.
  double sample(int lo, int hi, int mant_bits) {
    const std::uint64_t a = next(), b = next();
    const std::uint64_t sign = a >> 63;
    const std::int64_t e = lo + static_cast<std::int64_t>((a & 0xFFFF) % static_cast<std::uint64_t>(hi - lo + 1));
    std::uint64_t mant = b >> 12;
    if (((a >> 16) & 7) == 0) {
      const int drop = 52 - mant_bits;
      mant = (mant & ~((std::uint64_t{1} << drop) - 1)) | (std::uint64_t{1} << (drop - 1));
    }
    const std::uint64_t bits = (sign << 63) | (static_cast<std::uint64_t>(e + 1023) << 52) | mant;
    double x;
    std::memcpy(&x, &bits, sizeof x);
    return x;
  }

 private:
  std::uint64_t state_;
};

inline std::uint64_t fnv_doubles(const std::vector<double>& values) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (double v : values) {
    unsigned char bytes[8];
    std::memcpy(bytes, &v, 8);
    for (unsigned char c : bytes) h = (h ^ c) * 0x100000001B3ull;
  }
  return h;
}

// Nearest-even rounding to a binary format with `exp_bits` exponent and
// `man_bits` fraction bits, including subnormals and overflow to inf.
inline double reference_round(double x, int exp_bits, int man_bits) {
  if (!std::isfinite(x) || x == 0.0) return x;
  const int emax = (1 << (exp_bits - 1)) - 1;
  const int emin = 1 - emax;
  int e2 = 0;
  std::frexp(std::fabs(x), &e2);  // |x| = f * 2^e2, f in [0.5, 1)
  const int quantum = std::max(e2 - 1, emin) - man_bits;
  const int saved = std::fegetround();
  std::fesetround(FE_TONEAREST);
  const double scaled = std::nearbyint(std::ldexp(std::fabs(x), -quantum));
  std::fesetround(saved);
  double r = std::ldexp(scaled, quantum);
  const double largest = std::ldexp(2.0 - std::ldexp(1.0, -man_bits), emax);
  if (r > largest) r = std::numeric_limits<double>::infinity();
  return std::copysign(r, x);
}

// Packs a value already representable in the format into sign|exponent|
// fraction bits and decodes it again. Returns false if the value does not
// survive the round trip, i.e. it is not representable.
inline bool packs_exactly(double r, int exp_bits, int man_bits) {
  if (std::isnan(r)) return true;
  const int bias = (1 << (exp_bits - 1)) - 1;
  const std::uint64_t sign = std::signbit(r) ? 1 : 0;
  std::uint64_t exp_field = 0, frac = 0;
  const double a = std::fabs(r);
  if (std::isinf(a)) {
    exp_field = (std::uint64_t{1} << exp_bits) - 1;
  } else if (a != 0.0) {
    int e2 = 0;
    std::frexp(a, &e2);
    const int e = e2 - 1;
    if (e < 1 - bias) {
      const double f = std::ldexp(a, bias - 1 + man_bits);
      if (f != std::floor(f)) return false;
      frac = static_cast<std::uint64_t>(f);
    } else {
      exp_field = static_cast<std::uint64_t>(e + bias);
      const double f = std::ldexp(a, man_bits - e) - std::ldexp(1.0, man_bits);
      if (f != std::floor(f)) return false;
      frac = static_cast<std::uint64_t>(f);
    }
  }
  const std::uint64_t packed = (sign << (exp_bits + man_bits)) | (exp_field << man_bits) | frac;
  // decode
  const std::uint64_t ef = (packed >> man_bits) & ((std::uint64_t{1} << exp_bits) - 1);
  const std::uint64_t fr = packed & ((std::uint64_t{1} << man_bits) - 1);
  double v;
  if (ef == (std::uint64_t{1} << exp_bits) - 1) {
    v = std::numeric_limits<double>::infinity();
  } else if (ef == 0) {
    v = std::ldexp(static_cast<double>(fr), 1 - bias - man_bits);
  } else {
    v = std::ldexp(1.0 + std::ldexp(static_cast<double>(fr), -man_bits), static_cast<int>(ef) - bias);
  }
  if ((packed >> (exp_bits + man_bits)) & 1) v = -v;
  return v == r && std::signbit(v) == std::signbit(r);
}

struct RoundingCase {
  const char* name;
  std::uint64_t seed;
  int lo, hi;
  int exp_bits, man_bits;
  std::uint64_t digest;  // frozen from numpy / MPFR, see tests/oracles
};

inline constexpr RoundingCase kRoundingCases[] = {
    {"fp16", 16, -27, 17, 5, 10, 0x8679D13A2A13BFBEull},
    {"tf32", 19, -152, 129, 8, 10, 0xFED002B6714C6B02ull},
    {"fp32", 32, -152, 129, 8, 23, 0xA9972E04C2B412E4ull},
};

inline constexpr int kRoundingSamples = 100000;

}  // namespace oracle
