#pragma once

#include <bit>
#include <cstdint>

namespace leanq {

// IEEE 754 binary16 conversions (round to nearest, ties to even). Grid
// metadata is stored at this precision.

inline float half_to_float(std::uint16_t h) noexcept {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1fu;
  std::uint32_t mant = h & 0x3ffu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // subnormal: renormalize
      exp = 127 - 15 + 1;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3ffu;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

inline std::uint16_t float_to_half(float f) noexcept {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
  const std::uint32_t abs = x & 0x7fffffffu;
  if (abs >= 0x7f800000u) {  // inf or nan
    return sign | 0x7c00u | (abs > 0x7f800000u ? 0x200u : 0u);
  }
  if (abs >= 0x477ff000u) return sign | 0x7c00u;  // rounds past 65504
  if (abs < 0x33000001u) return sign;              // below half the min subnormal
  const int exp = static_cast<int>(abs >> 23) - 127;
  std::uint32_t mant = (abs & 0x7fffffu) | 0x800000u;
  int shift;
  std::uint32_t base;
  if (exp < -14) {
    shift = -exp - 14 + 13;
    base = 0;
  } else {
    shift = 13;
    base = static_cast<std::uint32_t>(exp + 15) << 10;
    mant &= 0x7fffffu;
  }
  const std::uint32_t halfway = 1u << (shift - 1);
  const std::uint32_t rem = mant & ((1u << shift) - 1);
  std::uint32_t q = mant >> shift;
  if (rem > halfway || (rem == halfway && (q & 1u))) ++q;
  // Carry out of the mantissa bumps the exponent, which is the right result.
  return static_cast<std::uint16_t>(sign | (base + q));
}

inline double round_to_half(double v) noexcept {
  return half_to_float(float_to_half(static_cast<float>(v)));
}

}  // namespace leanq
