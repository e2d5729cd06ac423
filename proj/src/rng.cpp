#include "e2ebt/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace e2ebt {

double Rng::normal(double mean, double stddev) {
  // Box-Muller, one draw per call.
  const double u1 = uniform_open();
  const double u2 = uniform();
  return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string Rng::state() const {
  std::ostringstream out;
  out << engine_;
  return out.str();
}

void Rng::restore(const std::string& state) {
  std::istringstream in(state);
  in >> engine_;
  if (!in) throw std::invalid_argument("malformed rng state");
}

}  // namespace e2ebt
