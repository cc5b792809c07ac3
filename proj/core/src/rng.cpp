#include "miclab/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "miclab/errors.hpp"

namespace miclab {

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  is >> engine_;
  if (is.fail()) throw IOError("corrupt RNG state");
}

}  // namespace miclab
