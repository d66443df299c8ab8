#include "dnet/nn_ops.hpp"

#include <algorithm>
#include <cmath>

#include "dnet/ops.hpp"

namespace dnet {

using detail::Node;

void ActivationSpec::validate() const {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw TensorError("leaky_relu: alpha must lie in [0, 1)");
}

Tensor leaky_relu(const Tensor& input, double alpha) {
  ActivationSpec{alpha}.validate();
  auto xv = input.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : alpha * xv[i];
  auto xn = input.node();
  return detail::make_result("leaky_relu", input.shape(), std::move(out), {input}, [xn, alpha](const Node& o) {
    if (!xn->requires_grad) return;
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += xn->data[i] > 0.0 ? o.grad[i] : alpha * o.grad[i];
  });
}

Tensor max_pool2(const Tensor& input) {
  if (input.rank() != 3) throw TensorError("max_pool2: input must be [C,H,W]");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (h % 2 != 0 || w % 2 != 0)
    throw TensorError("max_pool2: spatial dims must be even, got " + shape_to_string(input.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  auto xv = input.data();
  std::vector<double> out(c * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const std::size_t base = (ch * h + 2 * y) * w + 2 * x;
        const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
        std::size_t best = cand[0];
        for (int k = 1; k < 4; ++k)
          if (xv[cand[k]] > xv[best]) best = cand[k];
        const std::size_t oi = (ch * oh + y) * ow + x;
        out[oi] = xv[best];
        argmax[oi] = best;
      }
    }
  }
  auto xn = input.node();
  return detail::make_result("max_pool2", {c, oh, ow}, std::move(out), {input},
                             [xn, argmax = std::move(argmax)](const Node& o) {
                               if (!xn->requires_grad) return;
                               auto& g = xn->ensure_grad();
                               for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += o.grad[i];
                             });
}

bool is_supported_upsample_factor(std::size_t factor) {
  return factor == 2 || factor == 4 || factor == 8 || factor == 16 || factor == 32;
}

namespace {

// For each output coordinate along one axis: the two contributing input
// positions (edge-clamped) and their kernel taps.
struct AxisTaps {
  std::vector<std::size_t> in0, in1, k0, k1;
};

AxisTaps axis_taps(std::size_t in_extent, std::size_t factor) {
  AxisTaps t;
  const std::size_t out_extent = in_extent * factor;
  const long pad = static_cast<long>(factor / 2);
  const long last = static_cast<long>(in_extent) - 1;
  for (std::size_t o = 0; o < out_extent; ++o) {
    const long q = static_cast<long>(o) + pad;
    const long i1 = q / static_cast<long>(factor);
    const long k1 = q % static_cast<long>(factor);
    t.in1.push_back(static_cast<std::size_t>(std::clamp(i1, 0L, last)));
    t.k1.push_back(static_cast<std::size_t>(k1));
    t.in0.push_back(static_cast<std::size_t>(std::clamp(i1 - 1, 0L, last)));
    t.k0.push_back(static_cast<std::size_t>(k1 + static_cast<long>(factor)));
  }
  return t;
}

}  // namespace

Tensor upsample(const Tensor& input, const Tensor& weight, std::size_t factor) {
  if (!is_supported_upsample_factor(factor))
    throw TensorError("upsample: unsupported factor " + std::to_string(factor));
  if (input.rank() != 3) throw TensorError("upsample: input must be [C,h,w]");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t ks = 2 * factor;
  if (weight.shape() != Shape{c, c, ks, ks})
    throw TensorError("upsample: weight shape " + shape_to_string(weight.shape()) + ", expected " +
                      shape_to_string({c, c, ks, ks}));
  const std::size_t oh = h * factor, ow = w * factor;
  auto ty = std::make_shared<AxisTaps>(axis_taps(h, factor));
  auto tx = std::make_shared<AxisTaps>(axis_taps(w, factor));

  auto xv = input.data();
  auto wv = weight.data();
  std::vector<double> out(c * oh * ow, 0.0);
  for (std::size_t o = 0; o < c; ++o) {
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double* kern = wv.data() + (o * c + ci) * ks * ks;
      const double* plane = xv.data() + ci * h * w;
      double* dst = out.data() + o * oh * ow;
      for (std::size_t y = 0; y < oh; ++y) {
        const std::size_t iy[2] = {ty->in0[y], ty->in1[y]};
        const std::size_t ky[2] = {ty->k0[y], ty->k1[y]};
        for (std::size_t x = 0; x < ow; ++x) {
          const std::size_t ix[2] = {tx->in0[x], tx->in1[x]};
          const std::size_t kx[2] = {tx->k0[x], tx->k1[x]};
          double s = 0.0;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) s += kern[ky[a] * ks + kx[b]] * plane[iy[a] * w + ix[b]];
          dst[y * ow + x] += s;
        }
      }
    }
  }

  auto xn = input.node(), wn = weight.node();
  return detail::make_result(
      "upsample", {c, oh, ow}, std::move(out), {input, weight}, [xn, wn, ty, tx, c, h, w, ks, oh, ow](const Node& o) {
        double* xg = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
        double* wg = wn->requires_grad ? wn->ensure_grad().data() : nullptr;
        for (std::size_t oc = 0; oc < c; ++oc) {
          for (std::size_t ci = 0; ci < c; ++ci) {
            const std::size_t kbase = (oc * c + ci) * ks * ks;
            const double* kern = wn->data.data() + kbase;
            const double* plane = xn->data.data() + ci * h * w;
            const double* g = o.grad.data() + oc * oh * ow;
            for (std::size_t y = 0; y < oh; ++y) {
              const double* grow = g + y * ow;
              for (int a = 0; a < 2; ++a) {
                const std::size_t iy = a == 0 ? ty->in0[y] : ty->in1[y];
                const std::size_t ky = a == 0 ? ty->k0[y] : ty->k1[y];
                const double* prow = plane + iy * w;
                const double* krow = kern + ky * ks;
                if (wg) {
                  double* wrow = wg + kbase + ky * ks;
                  for (std::size_t x = 0; x < ow; ++x) {
                    wrow[tx->k0[x]] += grow[x] * prow[tx->in0[x]];
                    wrow[tx->k1[x]] += grow[x] * prow[tx->in1[x]];
                  }
                }
                if (xg) {
                  double* xrow = xg + ci * h * w + iy * w;
                  for (std::size_t x = 0; x < ow; ++x) {
                    xrow[tx->in0[x]] += grow[x] * krow[tx->k0[x]];
                    xrow[tx->in1[x]] += grow[x] * krow[tx->k1[x]];
                  }
                }
              }
            }
          }
        }
      });
}

Tensor bilinear_upsample_weights(std::size_t channels, std::size_t factor, bool requires_grad) {
  if (!is_supported_upsample_factor(factor))
    throw TensorError("upsample: unsupported factor " + std::to_string(factor));
  const std::size_t ks = 2 * factor;
  const double center = static_cast<double>(factor) - 0.5;
  std::vector<double> profile(ks);
  for (std::size_t k = 0; k < ks; ++k)
    profile[k] = 1.0 - std::abs(static_cast<double>(k) - center) / static_cast<double>(factor);
  std::vector<double> values(channels * channels * ks * ks, 0.0);
  for (std::size_t ch = 0; ch < channels; ++ch) {
    double* kern = values.data() + (ch * channels + ch) * ks * ks;
    for (std::size_t y = 0; y < ks; ++y)
      for (std::size_t x = 0; x < ks; ++x) kern[y * ks + x] = profile[y] * profile[x];
  }
  return Tensor::from({channels, channels, ks, ks}, std::move(values), requires_grad);
}

namespace {

std::pair<std::size_t, std::size_t> channel_layout(const Tensor& t, const char* op) {
  if (t.rank() < 2) throw TensorError(std::string(op) + ": input must be [K, ...]");
  const std::size_t k = t.dim(0);
  if (k < 2) throw TensorError(std::string(op) + ": need at least two channels");
  return {k, t.numel() / k};
}

}  // namespace

Tensor softmax_channels(const Tensor& logits) {
  const auto [k, s] = channel_layout(logits, "softmax_channels");
  auto xv = logits.data();
  std::vector<double> out(xv.size());
  for (std::size_t p = 0; p < s; ++p) {
    double m = xv[p];
    for (std::size_t c = 1; c < k; ++c) m = std::max(m, xv[c * s + p]);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += (out[c * s + p] = std::exp(xv[c * s + p] - m));
    for (std::size_t c = 0; c < k; ++c) out[c * s + p] /= z;
  }
  auto xn = logits.node();
  const std::size_t kk = k, ss = s;
  return detail::make_result("softmax_channels", logits.shape(), std::move(out), {logits},
                             [xn, kk, ss](const Node& o) {
                               if (!xn->requires_grad) return;
                               auto& g = xn->ensure_grad();
                               const auto& y = o.data;
                               for (std::size_t p = 0; p < ss; ++p) {
                                 double dot = 0.0;
                                 for (std::size_t c = 0; c < kk; ++c) dot += o.grad[c * ss + p] * y[c * ss + p];
                                 for (std::size_t c = 0; c < kk; ++c)
                                   g[c * ss + p] += y[c * ss + p] * (o.grad[c * ss + p] - dot);
                               }
                             });
}

Tensor log_softmax_channels(const Tensor& logits) {
  const auto [k, s] = channel_layout(logits, "log_softmax_channels");
  auto xv = logits.data();
  std::vector<double> out(xv.size());
  for (std::size_t p = 0; p < s; ++p) {
    double m = xv[p];
    for (std::size_t c = 1; c < k; ++c) m = std::max(m, xv[c * s + p]);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(xv[c * s + p] - m);
    const double lz = m + std::log(z);
    for (std::size_t c = 0; c < k; ++c) out[c * s + p] = xv[c * s + p] - lz;
  }
  auto xn = logits.node();
  const std::size_t kk = k, ss = s;
  return detail::make_result("log_softmax_channels", logits.shape(), std::move(out), {logits},
                             [xn, kk, ss](const Node& o) {
                               if (!xn->requires_grad) return;
                               auto& g = xn->ensure_grad();
                               for (std::size_t p = 0; p < ss; ++p) {
                                 double total = 0.0;
                                 for (std::size_t c = 0; c < kk; ++c) total += o.grad[c * ss + p];
                                 for (std::size_t c = 0; c < kk; ++c)
                                   g[c * ss + p] += o.grad[c * ss + p] - std::exp(o.data[c * ss + p]) * total;
                               }
                             });
}

Tensor sum_fusion(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw TensorError("sum_fusion: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                      shape_to_string(b.shape()));
  return add(a, b);
}

}  // namespace dnet
