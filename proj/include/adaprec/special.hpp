#pragma once

namespace adaprec {

// Logarithmic derivative of the gamma function. Returns NaN at the poles
// (zero and negative integers) instead of throwing, because reduced-precision
// runs can legitimately land on them.
double digamma(double x);

}  // namespace adaprec
