#pragma once

#include <cstddef>
#include <vector>

#include "tsrm/autodiff.hpp"

namespace tsrm::ops {

// Elementwise arithmetic. `b` may have the same shape as `a`, a single
// element, or a shape equal to a trailing suffix of a's shape (broadcast over
// the leading axes).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
// Throws NumericError on an exact zero denominator.
Var div(const Var& a, const Var& b);
Var add(const Var& a, real b);
Var mul(const Var& a, real b);

Var abs(const Var& a);
Var square(const Var& a);

// Matrix product over the last two axes. `a` is [..., m, k]; `b` is either a
// shared [k, n] matrix or carries the same leading axes as `a`. The transpose
// flags apply to the last two axes of the respective operand.
Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);
// x[..., in] · w[in, out] (+ bias[out]).
Var linear(const Var& x, const Var& w);
Var linear(const Var& x, const Var& w, const Var& bias);

Var sum(const Var& a);
Var mean(const Var& a);
// Reduces `axis` away; a rank-1 input reduces to shape [1].
Var sum(const Var& a, std::size_t axis);
Var mean(const Var& a, std::size_t axis);

Var concat(const std::vector<Var>& parts, std::size_t axis);
std::vector<Var> split(const Var& a, const std::vector<std::size_t>& sizes, std::size_t axis);

Var reshape(const Var& a, Shape shape);
Var permute(const Var& a, const std::vector<std::size_t>& perm);
// Value copy without gradient connection.
Var detach(const Var& a);

}  // namespace tsrm::ops

namespace tsrm {

inline Var operator+(const Var& a, const Var& b) { return ops::add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return ops::sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return ops::mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return ops::div(a, b); }
inline Var operator+(const Var& a, real b) { return ops::add(a, b); }
inline Var operator*(const Var& a, real b) { return ops::mul(a, b); }

// Sum with Neumaier compensation; used by every full reduction.
real compensated_sum(std::span<const real> values);

}  // namespace tsrm
