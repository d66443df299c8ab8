#include "dnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dnet {

namespace {

constexpr double kBackwardEps = 1e-12;

using detail::Node;

enum class Bcast { Same, ScalarA, ScalarB };

Bcast broadcast_mode(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::Same;
  if (b.numel() == 1) return Bcast::ScalarB;
  if (a.numel() == 1) return Bcast::ScalarA;
  throw TensorError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                    shape_to_string(b.shape()));
}

// Accumulates an elementwise gradient into an input that may be a broadcast
// scalar.
void accumulate(Node& in, const std::vector<double>& contrib) {
  if (!in.requires_grad) return;
  auto& g = in.ensure_grad();
  if (g.size() == contrib.size()) {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += contrib[i];
  } else {
    double total = 0.0;
    for (double c : contrib) total += c;
    g[0] += total;
  }
}

template <class Fwd, class DA, class DB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  const Bcast mode = broadcast_mode(a, b, name);
  const Shape shape = mode == Bcast::ScalarA ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  auto av = a.data();
  auto bv = b.data();
  auto ai = [mode](std::size_t i) { return mode == Bcast::ScalarA ? 0 : i; };
  auto bi = [mode](std::size_t i) { return mode == Bcast::ScalarB ? 0 : i; };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[ai(i)], bv[bi(i)]);

  auto an = a.node();
  auto bn = b.node();
  return detail::make_result(name, shape, std::move(out), {a, b},
                             [an, bn, n, ai, bi, da, db](const Node& o) {
                               std::vector<double> ga(n), gb(n);
                               for (std::size_t i = 0; i < n; ++i) {
                                 const double x = an->data[ai(i)], y = bn->data[bi(i)];
                                 ga[i] = o.grad[i] * da(x, y);
                                 gb[i] = o.grad[i] * db(x, y);
                               }
                               accumulate(*an, ga);
                               accumulate(*bn, gb);
                             });
}

template <class Fwd, class D>
Tensor unary(const char* name, const Tensor& a, Fwd fwd, D deriv) {
  auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  auto an = a.node();
  return detail::make_result(name, a.shape(), std::move(out), {a}, [an, deriv](const Node& o) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * deriv(an->data[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double y : b.data())
    if (y == 0.0) throw TensorError("div: division by exact zero");
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / (y + kBackwardEps); },
      [](double x, double y) {
        const double d = y + kBackwardEps;
        return -x / (d * d);
      });
}

Tensor add(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
Tensor mul(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
Tensor rsub(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
Tensor neg(const Tensor& a) { return mul(a, -1.0); }

Tensor log(const Tensor& a) {
  for (double x : a.data())
    if (!(x > 0.0)) throw TensorError("log: argument must be positive");
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / (x + kBackwardEps); });
}

Tensor square(const Tensor& a) {
  return unary(
      "square", a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Tensor clamp_min(const Tensor& a, double floor) {
  return unary(
      "clamp_min", a, [floor](double x) { return x > floor ? x : floor; },
      [floor](double x) { return x > floor ? 1.0 : 0.0; });
}

Tensor reduce(ReduceKind kind, const Tensor& a, std::vector<std::size_t> axes) {
  const Shape& in_shape = a.shape();
  const std::size_t rank = in_shape.size();
  if (axes.empty())
    for (std::size_t i = 0; i < rank; ++i) axes.push_back(i);
  std::vector<bool> reduced(rank, false);
  for (auto ax : axes) {
    if (ax >= rank) throw TensorError("reduce: axis " + std::to_string(ax) + " out of range");
    if (reduced[ax]) throw TensorError("reduce: duplicate axis");
    reduced[ax] = true;
  }

  Shape out_shape;
  for (std::size_t i = 0; i < rank; ++i)
    if (!reduced[i]) out_shape.push_back(in_shape[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  const std::size_t out_n = shape_numel(out_shape);
  const std::size_t in_n = a.numel();
  const std::size_t group = in_n / out_n;

  // Output index for every input element, walking the input in row-major order.
  std::vector<std::size_t> target(in_n);
  {
    std::vector<std::size_t> idx(rank, 0);
    std::vector<std::size_t> out_stride(rank, 0);
    std::size_t s = 1;
    for (std::size_t i = rank; i-- > 0;) {
      if (!reduced[i]) {
        out_stride[i] = s;
        s *= in_shape[i];
      }
    }
    for (std::size_t flat = 0; flat < in_n; ++flat) {
      std::size_t t = 0;
      for (std::size_t i = 0; i < rank; ++i) t += idx[i] * out_stride[i];
      target[flat] = t;
      for (std::size_t i = rank; i-- > 0;) {
        if (++idx[i] < in_shape[i]) break;
        idx[i] = 0;
      }
    }
  }

  auto av = a.data();
  std::vector<double> out(out_n, kind == ReduceKind::Max ? -std::numeric_limits<double>::infinity() : 0.0);
  std::vector<std::size_t> argmax;
  if (kind == ReduceKind::Max) {
    argmax.assign(out_n, in_n);
    for (std::size_t i = 0; i < in_n; ++i) {
      const std::size_t t = target[i];
      if (argmax[t] == in_n || av[i] > out[t]) {
        out[t] = av[i];
        argmax[t] = i;
      }
    }
  } else {
    for (std::size_t i = 0; i < in_n; ++i) out[target[i]] += av[i];
    if (kind == ReduceKind::Mean)
      for (auto& v : out) v /= static_cast<double>(group);
  }

  auto an = a.node();
  const char* name = kind == ReduceKind::Sum ? "sum" : kind == ReduceKind::Mean ? "mean" : "max";
  return detail::make_result(
      name, out_shape, std::move(out), {a},
      [an, kind, group, target = std::move(target), argmax = std::move(argmax)](const Node& o) {
        if (!an->requires_grad) return;
        auto& g = an->ensure_grad();
        if (kind == ReduceKind::Max) {
          for (std::size_t t = 0; t < argmax.size(); ++t) g[argmax[t]] += o.grad[t];
        } else {
          const double scale = kind == ReduceKind::Mean ? 1.0 / static_cast<double>(group) : 1.0;
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[target[i]] * scale;
        }
      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw TensorError("reshape: " + shape_to_string(a.shape()) + " to " + shape_to_string(shape));
  auto an = a.node();
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {a}, [an](const Node& o) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw TensorError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw TensorError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw TensorError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first[i]) throw TensorError("concat: extent mismatch");
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];

  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t row = p.dim(axis) * inner;
    auto pv = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + o * row, row, out.begin() + o * out_row + offset);
    offset += row;
  }

  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result("concat", out_shape, std::move(out), parts,
                             [nodes, offsets, outer, inner, axis, out_row](const Node& o) {
                               for (std::size_t k = 0; k < nodes.size(); ++k) {
                                 auto& n = *nodes[k];
                                 if (!n.requires_grad) continue;
                                 auto& g = n.ensure_grad();
                                 const std::size_t row = n.shape[axis] * inner;
                                 for (std::size_t r = 0; r < outer; ++r)
                                   for (std::size_t i = 0; i < row; ++i)
                                     g[r * row + i] += o.grad[r * out_row + offsets[k] + i];
                               }
                             });
}

}  // namespace dnet
