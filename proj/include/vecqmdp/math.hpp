#pragma once

// Branch-free elementary functions used inside the lockstep kernels.
//
// The batched kernels and the scalar reference path call exactly these
// functions, so a vectorized loop and a scalar loop produce bit-identical
// results (IEEE add/mul/div/sqrt only, no libm calls, no FMA contraction).
// Accuracy is a few ulp over the ranges the planner uses.

#include <cmath>
#include <numbers>

#define VECQMDP_INLINE inline __attribute__((always_inline))

namespace vecqmdp::fmath {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;
inline constexpr double kHalfPi = 0.5 * std::numbers::pi;

/// Wraps an angle into (-pi, pi]. Exact for inputs already in range.
VECQMDP_INLINE double wrap_angle(double a) {
  const double k = std::ceil((a - kPi) / kTwoPi);
  return a - k * kTwoPi;
}

namespace detail {

// Cody-Waite split of pi/2.
inline constexpr double kPio2Hi = 1.57079632673412561417e+00;
inline constexpr double kPio2Lo = 6.07710050650619224932e-11;

// Taylor coefficients 1/n! with alternating signs.
VECQMDP_INLINE double sin_poly(double r) {
  const double z = r * r;
  double p = -1.0 / 355687428096000.0;         // -1/17!
  p = p * z + 1.0 / 1307674368000.0;           // 1/15!
  p = p * z - 1.0 / 6227020800.0;              // -1/13!
  p = p * z + 1.0 / 39916800.0;                // 1/11!
  p = p * z - 1.0 / 362880.0;                  // -1/9!
  p = p * z + 1.0 / 5040.0;                    // 1/7!
  p = p * z - 1.0 / 120.0;                     // -1/5!
  p = p * z + 1.0 / 6.0;                       // 1/3!
  return r - r * z * p;
}

VECQMDP_INLINE double cos_poly(double r) {
  const double z = r * r;
  double p = 1.0 / 6402373705728000.0;         // 1/18!
  p = p * z - 1.0 / 20922789888000.0;          // -1/16!
  p = p * z + 1.0 / 87178291200.0;             // 1/14!
  p = p * z - 1.0 / 479001600.0;               // -1/12!
  p = p * z + 1.0 / 3628800.0;                 // 1/10!
  p = p * z - 1.0 / 40320.0;                   // -1/8!
  p = p * z + 1.0 / 720.0;                     // 1/6!
  p = p * z - 1.0 / 24.0;                      // -1/4!
  p = p * z + 0.5;                             // 1/2!
  return 1.0 - z * p;
}

}  // namespace detail

/// sin and cos of `a` in one pass. Intended for |a| below ~1e5.
VECQMDP_INLINE void sin_cos(double a, double& s, double& c) {
  const double k = std::floor(a * (2.0 / kPi) + 0.5);
  const double r = (a - k * detail::kPio2Hi) - k * detail::kPio2Lo;
  const double sr = detail::sin_poly(r);
  const double cr = detail::cos_poly(r);
  // Quadrant kept in floating point so the loop vectorizes without int64 lanes.
  const double q = k - 4.0 * std::floor(k * 0.25);
  const bool odd = q == 1.0 || q == 3.0;
  const double s_abs = odd ? cr : sr;
  const double c_abs = odd ? sr : cr;
  s = q >= 2.0 ? -s_abs : s_abs;
  c = (q == 1.0 || q == 2.0) ? -c_abs : c_abs;
}

VECQMDP_INLINE double tan(double a) {
  double s, c;
  sin_cos(a, s, c);
  return s / c;
}

/// Arctangent with two range reductions (1/x above 1, pi/6 shift above
/// tan(pi/12)) followed by a degree-31 odd Taylor polynomial.
VECQMDP_INLINE double atan(double x) {
  constexpr double kSqrt3 = 1.7320508075688772935;
  constexpr double kTanPi12 = 0.26794919243112270647;
  const double ax = std::fabs(x);
  const bool invert = ax > 1.0;
  const double a = invert ? 1.0 / ax : ax;
  const bool shift = a > kTanPi12;
  const double y = shift ? (a * kSqrt3 - 1.0) / (a + kSqrt3) : a;
  const double z = y * y;
  double p = 1.0 / 31.0;
  p = -p * z + 1.0 / 29.0;
  p = -p * z + 1.0 / 27.0;
  p = -p * z + 1.0 / 25.0;
  p = -p * z + 1.0 / 23.0;
  p = -p * z + 1.0 / 21.0;
  p = -p * z + 1.0 / 19.0;
  p = -p * z + 1.0 / 17.0;
  p = -p * z + 1.0 / 15.0;
  p = -p * z + 1.0 / 13.0;
  p = -p * z + 1.0 / 11.0;
  p = -p * z + 1.0 / 9.0;
  p = -p * z + 1.0 / 7.0;
  p = -p * z + 1.0 / 5.0;
  p = -p * z + 1.0 / 3.0;
  p = -p * z + 1.0;
  double r = y * p + (shift ? kPi / 6.0 : 0.0);
  r = invert ? kHalfPi - r : r;
  return x < 0.0 ? -r : r;
}

}  // namespace vecqmdp::fmath
