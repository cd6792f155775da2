#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace adaprec {

// Candidate floating-point formats, declared narrowest first so that the
// enumerator order is the precision order used by every search pass.
enum class Format : std::uint8_t { fp16 = 0, tf32 = 1, fp32 = 2, fp64 = 3 };

inline constexpr std::array<Format, 4> kAllFormats = {Format::fp16, Format::tf32, Format::fp32,
                                                      Format::fp64};

struct FormatInfo {
  std::string_view name;
  int exponent_bits;
  int mantissa_bits;
  int storage_bytes;
};

const FormatInfo& info(Format fmt);

std::string_view to_string(Format fmt);
std::optional<Format> parse_format(std::string_view name);
// Throws ConfigError on unknown names.
Format format_from_string(std::string_view name);

// Largest finite magnitude representable in `fmt`.
double max_finite(Format fmt);

// Rounds a double-width value to the nearest value representable in `fmt`
// (ties to even), with gradual underflow and overflow to +-inf.
// NaN and infinities pass through unchanged.
double round_to_format(double x, Format fmt);

void round_in_place(std::span<double> values, Format fmt);

// Number of bytes occupied by a dense tensor of `shape` stored in `fmt`.
// Throws OverflowError instead of wrapping.
std::uint64_t bytes_of(std::span<const std::int64_t> shape, Format fmt);

// Product of extents, with the same overflow guarantee.
std::uint64_t element_count(std::span<const std::int64_t> shape);

}  // namespace adaprec
