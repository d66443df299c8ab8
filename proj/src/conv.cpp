// Dilated same-padded convolution via patch-matrix lowering.
//
// Each output-row chunk gathers a [C*k*k, rows*W] column matrix (taps spaced
// by the dilation, zero outside the image) and multiplies it by the
// [O, C*k*k] weight matrix. Backward recomputes the chunk's columns instead of
// keeping them, so memory stays bounded by one chunk.

#include <Eigen/Core>
#include <algorithm>
#include <memory>

#include "dnet/nn_ops.hpp"

namespace dnet {

namespace {

constexpr std::size_t kChunkBudget = 1 << 18;  // doubles per column buffer

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstView = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using View = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

ConstView view(const double* p, std::size_t rows, std::size_t cols, std::size_t ld) {
  return ConstView(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols), Eigen::OuterStride<>(ld));
}
View view(double* p, std::size_t rows, std::size_t cols, std::size_t ld) {
  return View(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols), Eigen::OuterStride<>(ld));
}

struct Geometry {
  std::size_t channels, height, width, out_channels, kernel, dilation, pad;
  std::size_t taps() const { return channels * kernel * kernel; }
  std::size_t plane() const { return height * width; }
  std::size_t rows_per_chunk() const {
    return std::max<std::size_t>(1, kChunkBudget / std::max<std::size_t>(1, taps() * width));
  }
};

void gather_columns(const Geometry& g, const double* in, std::size_t row0, std::size_t rows, double* cols) {
  const std::size_t n = rows * g.width;
  const long pad = static_cast<long>(g.pad);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double* plane = in + c * g.plane();
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        double* dst = cols + ((c * g.kernel + ky) * g.kernel + kx) * n;
        const long dy = static_cast<long>(ky * g.dilation) - pad;
        const long dx = static_cast<long>(kx * g.dilation) - pad;
        for (std::size_t r = 0; r < rows; ++r) {
          const long iy = static_cast<long>(row0 + r) + dy;
          double* out_row = dst + r * g.width;
          if (iy < 0 || iy >= static_cast<long>(g.height)) {
            std::fill_n(out_row, g.width, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * g.width;
          for (std::size_t x = 0; x < g.width; ++x) {
            const long ix = static_cast<long>(x) + dx;
            out_row[x] = (ix >= 0 && ix < static_cast<long>(g.width)) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void scatter_columns(const Geometry& g, const double* cols, std::size_t row0, std::size_t rows, double* in_grad) {
  const std::size_t n = rows * g.width;
  const long pad = static_cast<long>(g.pad);
  for (std::size_t c = 0; c < g.channels; ++c) {
    double* plane = in_grad + c * g.plane();
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double* src = cols + ((c * g.kernel + ky) * g.kernel + kx) * n;
        const long dy = static_cast<long>(ky * g.dilation) - pad;
        const long dx = static_cast<long>(kx * g.dilation) - pad;
        for (std::size_t r = 0; r < rows; ++r) {
          const long iy = static_cast<long>(row0 + r) + dy;
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          double* dst = plane + static_cast<std::size_t>(iy) * g.width;
          const double* src_row = src + r * g.width;
          const std::size_t x_begin = static_cast<std::size_t>(std::max<long>(0, -dx));
          const std::size_t x_end =
              static_cast<std::size_t>(std::clamp<long>(static_cast<long>(g.width) - dx, 0, static_cast<long>(g.width)));
          for (std::size_t x = x_begin; x < x_end; ++x) dst[static_cast<long>(x) + dx] += src_row[x];
        }
      }
    }
  }
}

void conv_forward(const Geometry& g, const double* in, const double* w, const double* b, double* out) {
  const std::size_t hw = g.plane();
  for (std::size_t o = 0; o < g.out_channels; ++o) std::fill_n(out + o * hw, hw, b[o]);
  const std::size_t m = g.out_channels, k = g.taps();
  const auto weights = view(w, m, k, k);
  if (g.kernel == 1) {
    view(out, m, hw, hw).noalias() += weights * view(in, k, hw, hw);
    return;
  }
  const std::size_t step = g.rows_per_chunk();
  // Every entry is written by gather_columns before use.
  auto cols = std::make_unique_for_overwrite<double[]>(g.taps() * std::min(step, g.height) * g.width);
  for (std::size_t row0 = 0; row0 < g.height; row0 += step) {
    const std::size_t rows = std::min(step, g.height - row0);
    const std::size_t n = rows * g.width;
    gather_columns(g, in, row0, rows, cols.get());
    view(out + row0 * g.width, m, n, hw).noalias() += weights * view(cols.get(), k, n, n);
  }
}

void conv_backward(const Geometry& g, const double* in, const double* w, const double* out_grad, double* in_grad,
                   double* w_grad, double* b_grad) {
  const std::size_t hw = g.plane();
  if (b_grad) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      double s = 0.0;
      const double* row = out_grad + o * hw;
      for (std::size_t i = 0; i < hw; ++i) s += row[i];
      b_grad[o] += s;
    }
  }
  const std::size_t m = g.out_channels, k = g.taps();
  const auto weights = view(w, m, k, k);
  if (g.kernel == 1) {
    if (w_grad) view(w_grad, m, k, k).noalias() += view(out_grad, m, hw, hw) * view(in, k, hw, hw).transpose();
    if (in_grad) view(in_grad, k, hw, hw).noalias() += weights.transpose() * view(out_grad, m, hw, hw);
    return;
  }
  const std::size_t step = g.rows_per_chunk();
  const std::size_t max_cols = g.taps() * std::min(step, g.height) * g.width;
  auto cols = std::make_unique_for_overwrite<double[]>(w_grad ? max_cols : 0);
  auto col_grad = std::make_unique_for_overwrite<double[]>(in_grad ? max_cols : 0);
  for (std::size_t row0 = 0; row0 < g.height; row0 += step) {
    const std::size_t rows = std::min(step, g.height - row0);
    const std::size_t n = rows * g.width;
    const auto dout = view(out_grad + row0 * g.width, m, n, hw);
    if (w_grad) {
      gather_columns(g, in, row0, rows, cols.get());
      view(w_grad, m, k, k).noalias() += dout * view(cols.get(), k, n, n).transpose();
    }
    if (in_grad) {
      view(col_grad.get(), k, n, n).noalias() = weights.transpose() * dout;
      scatter_columns(g, col_grad.get(), row0, rows, in_grad);
    }
  }
}

}  // namespace

void Conv2dSpec::validate() const {
  if (in_channels == 0 || out_channels == 0) throw TensorError("conv2d: channel counts must be positive");
  if (kernel != 3 && kernel != 1) throw TensorError("conv2d: kernel must be 3x3 (or 1x1 for score layers)");
  if (dilation < 1) throw TensorError("conv2d: dilation must be >= 1");
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, const Conv2dSpec& spec) {
  spec.validate();
  if (input.rank() != 3) throw TensorError("conv2d: input must be [C,H,W], got " + shape_to_string(input.shape()));
  const Shape want_w{spec.out_channels, spec.in_channels, spec.kernel, spec.kernel};
  if (weight.shape() != want_w)
    throw TensorError("conv2d: weight shape " + shape_to_string(weight.shape()) + ", expected " +
                      shape_to_string(want_w));
  if (bias.shape() != Shape{spec.out_channels}) throw TensorError("conv2d: bias must be [O]");
  if (input.dim(0) != spec.in_channels)
    throw TensorError("conv2d: input has " + std::to_string(input.dim(0)) + " channels, expected " +
                      std::to_string(spec.in_channels));

  const Geometry g{spec.in_channels, input.dim(1), input.dim(2), spec.out_channels,
                   spec.kernel,      spec.dilation, spec.padding()};
  std::vector<double> out(spec.out_channels * g.plane());
  conv_forward(g, input.data().data(), weight.data().data(), bias.data().data(), out.data());

  auto xn = input.node(), wn = weight.node(), bn = bias.node();
  return detail::make_result("conv2d", {spec.out_channels, g.height, g.width}, std::move(out), {input, weight, bias},
                             [xn, wn, bn, g](const detail::Node& o) {
                               double* in_grad = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
                               double* w_grad = wn->requires_grad ? wn->ensure_grad().data() : nullptr;
                               double* b_grad = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
                               conv_backward(g, xn->data.data(), wn->data.data(), o.grad.data(), in_grad, w_grad,
                                             b_grad);
                             });
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t dilation) {
  if (weight.rank() != 4) throw TensorError("conv2d: weight must be [O,C,k,k]");
  Conv2dSpec spec{weight.dim(1), weight.dim(0), weight.dim(2), dilation};
  if (weight.dim(3) != weight.dim(2)) throw TensorError("conv2d: kernel must be square");
  return conv2d(input, weight, bias, spec);
}

}  // namespace dnet
