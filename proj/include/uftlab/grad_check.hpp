// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "uftlab/autograd.hpp"

namespace uftlab {

/// A scalar expression of one input, built afresh on whatever tape it is given.
using TensorFunction = std::function<Var(Var)>;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
}

/// Max over coordinates of the relative gap between the tape gradient and a
/// central difference with step `epsilon`.
inline double grad_check(const TensorFunction& f, const Tensor& point, double epsilon = 1e-5) {
  if (!(epsilon > 0.0)) throw UsageError("grad_check: epsilon must be positive");

  Tape tape;
  const Var x = ag::leaf(tape, point, true);
  const Var y = f(x);
  if (y.value().size() != 1) throw NonScalarLossError();
  const Tensor analytic = tape.backward(y.id()).at(x.id());

  auto evaluate = [&](const Tensor& at) {
    Tape probe(false);
    return f(ag::leaf(probe, at)).item();
  };

  double worst = 0.0;
  Tensor shifted = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double original = point[i];
    shifted[i] = original + epsilon;
    const double up = evaluate(shifted);
    shifted[i] = original - epsilon;
    const double down = evaluate(shifted);
    shifted[i] = original;
    const double numeric = (up - down) / (2.0 * epsilon);
    worst = std::max(worst, relative_error(analytic[i], numeric));
  }
  return worst;
}

}  // namespace uftlab
