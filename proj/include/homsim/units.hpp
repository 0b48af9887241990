#pragma once

// Unit conventions, error types and the value-with-uncertainty pair shared
// by every module. Times are ns, rates ns^-1, frequencies GHz unless a name
// says otherwise.

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace homsim {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;
inline constexpr double kBoltzmannMevPerK = 0.0861733;

// A rate r appearing as exp(-r t) is quoted in "r/2pi" MHz.
constexpr double rate_to_mhz(double rate_per_ns) { return rate_per_ns * 1000.0 / kTwoPi; }
constexpr double mhz_to_rate(double mhz) { return mhz * kTwoPi / 1000.0; }

// Bad input, violated precondition, malformed file or config.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A well-posed computation that could not produce a number.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ValidationError(what);
}

// Plain value of a double or of an automatic-differentiation scalar.
template <class S>
double value_of(const S& s) {
  if constexpr (std::is_arithmetic_v<S>) {
    return static_cast<double>(s);
  } else {
    return s.value();
  }
}

struct Measurement {
  double value = 0.0;
  double sigma = 0.0;
};

}  // namespace homsim
