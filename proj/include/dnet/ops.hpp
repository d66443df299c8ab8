#pragma once

#include <vector>

#include "dnet/tensor.hpp"

namespace dnet {

// Elementwise arithmetic. Binary forms accept equal shapes, or one operand
// with a single element that broadcasts.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// Forward raises on an exact-zero denominator; backward divides by b + 1e-12.
Tensor div(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
Tensor rsub(double a, const Tensor& b);  // a - b
Tensor neg(const Tensor& a);

/// Forward raises on non-positive input; backward divides by x + 1e-12.
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
/// max(a, floor). Gradient passes only where a > floor strictly.
Tensor clamp_min(const Tensor& a, double floor);

enum class ReduceKind { Sum, Mean, Max };

/// Reduces over the listed axes; an empty list reduces everything to shape
/// [1]. Reduced axes are removed from the result shape.
Tensor reduce(ReduceKind kind, const Tensor& a, std::vector<std::size_t> axes = {});
inline Tensor sum(const Tensor& a, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceKind::Sum, a, std::move(axes));
}
inline Tensor mean(const Tensor& a, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceKind::Mean, a, std::move(axes));
}
inline Tensor max(const Tensor& a, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceKind::Max, a, std::move(axes));
}

Tensor reshape(const Tensor& a, Shape shape);
/// Concatenates along `axis`; all other extents must agree.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

}  // namespace dnet
