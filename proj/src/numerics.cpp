#include "adaprec/numerics.hpp"

#include <bit>
#include <cmath>
#include <limits>
#include <string>

#include "adaprec/errors.hpp"

namespace adaprec {

namespace {

constexpr std::array<FormatInfo, 4> kInfo = {{
    {"fp16", 5, 10, 2},
    {"tf32", 8, 10, 4},
    {"fp32", 8, 23, 4},
    {"fp64", 11, 52, 8},
}};

// Nearest-even rounding of a normal or zero double to a binary format with
// `exp_bits` exponent bits and `man_bits` stored mantissa bits. Works on the
// 53-bit significand directly so that no intermediate rounding occurs.
double round_generic(double x, int exp_bits, int man_bits) {
  const auto bits = std::bit_cast<std::uint64_t>(x);
  const auto exp_field = static_cast<int>((bits >> 52) & 0x7ff);
  if (exp_field == 0x7ff) return x;
  // Double subnormals lie far below the smallest subnormal of every
  // narrower format.
  if (exp_field == 0) return std::copysign(0.0, x);

  const int emax = (1 << (exp_bits - 1)) - 1;
  const int emin = 1 - emax;
  const int e = exp_field - 1023;
  const std::uint64_t sig = (std::uint64_t{1} << 52) | (bits & ((std::uint64_t{1} << 52) - 1));

  const int quantum_exp = (e < emin ? emin : e) - man_bits;
  const int shift = quantum_exp - (e - 52);
  if (shift >= 64) return std::copysign(0.0, x);

  std::uint64_t kept = sig >> shift;
  const std::uint64_t rem = sig & ((std::uint64_t{1} << shift) - 1);
  const std::uint64_t half = std::uint64_t{1} << (shift - 1);
  if (rem > half || (rem == half && (kept & 1U))) ++kept;

  double mag = std::ldexp(static_cast<double>(kept), quantum_exp);
  const double limit = std::ldexp(2.0 - std::ldexp(1.0, -man_bits), emax);
  if (mag > limit) mag = std::numeric_limits<double>::infinity();
  return std::signbit(x) ? -mag : mag;
}

}  // namespace

const FormatInfo& info(Format fmt) { return kInfo[static_cast<std::size_t>(fmt)]; }

std::string_view to_string(Format fmt) { return info(fmt).name; }

std::optional<Format> parse_format(std::string_view name) {
  for (Format f : kAllFormats) {
    if (info(f).name == name) return f;
  }
  return std::nullopt;
}

Format format_from_string(std::string_view name) {
  if (auto f = parse_format(name)) return *f;
  throw ConfigError("unknown precision format '" + std::string(name) + "'");
}

double max_finite(Format fmt) {
  const auto& fi = info(fmt);
  const int emax = (1 << (fi.exponent_bits - 1)) - 1;
  return std::ldexp(2.0 - std::ldexp(1.0, -fi.mantissa_bits), emax);
}

double round_to_format(double x, Format fmt) {
  switch (fmt) {
    case Format::fp64:
      return x;
    case Format::fp32:
      return static_cast<double>(static_cast<float>(x));
    case Format::tf32:
      return round_generic(x, 8, 10);
    case Format::fp16:
      return round_generic(x, 5, 10);
  }
  return x;
}

void round_in_place(std::span<double> values, Format fmt) {
  if (fmt == Format::fp64) return;
  for (double& v : values) v = round_to_format(v, fmt);
}

std::uint64_t element_count(std::span<const std::int64_t> shape) {
  std::uint64_t n = 1;
  for (std::int64_t extent : shape) {
    if (extent < 1) throw ShapeError("tensor extents must be positive, got " + std::to_string(extent));
    const auto e = static_cast<std::uint64_t>(extent);
    if (n > std::numeric_limits<std::uint64_t>::max() / e) {
      throw OverflowError("element count overflows 64 bits");
    }
    n *= e;
  }
  return n;
}

std::uint64_t bytes_of(std::span<const std::int64_t> shape, Format fmt) {
  const std::uint64_t n = element_count(shape);
  const auto width = static_cast<std::uint64_t>(info(fmt).storage_bytes);
  if (n > std::numeric_limits<std::uint64_t>::max() / width) {
    throw OverflowError("byte count overflows 64 bits");
  }
  return n * width;
}

}  // namespace adaprec
