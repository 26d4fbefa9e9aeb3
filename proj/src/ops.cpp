#include "ddunet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ddunet/detail/conv_kernel.hpp"

namespace ddunet {
namespace {

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op, const char* what) {
  if (!t.defined() || t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + (t.defined() ? shape_str(t.shape()) : std::string("<undefined>")));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

std::size_t inner_size(const Shape& s, std::size_t from_axis) {
  std::size_t n = 1;
  for (std::size_t i = from_axis; i < s.size(); ++i) n *= s[i];
  return n;
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv2dOptions& opt) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  if (opt.stride == 0 || opt.dilation == 0 || opt.groups == 0) {
    throw ConfigError("conv2d: stride, dilation and groups must be positive");
  }
  const std::size_t batch = input.dim(0);
  detail::ConvGeometry g;
  g.in_channels = input.dim(1);
  g.height = input.dim(2);
  g.width = input.dim(3);
  g.out_channels = weight.dim(0);
  g.kernel_h = weight.dim(2);
  g.kernel_w = weight.dim(3);
  g.stride = opt.stride;
  g.padding = opt.padding;
  g.dilation = opt.dilation;
  g.groups = opt.groups;
  if (g.in_channels % g.groups != 0 || g.out_channels % g.groups != 0) {
    throw ConfigError("conv2d: groups=" + std::to_string(g.groups) + " must divide Cin=" +
                      std::to_string(g.in_channels) + " and Cout=" + std::to_string(g.out_channels));
  }
  if (weight.dim(1) != g.in_per_group()) {
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " expects " +
                     std::to_string(weight.dim(1)) + " input channels per group, input " +
                     shape_str(input.shape()) + " provides " + std::to_string(g.in_per_group()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.out_channels)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match Cout=" +
                     std::to_string(g.out_channels));
  }
  const long span_h = static_cast<long>(g.dilation * (g.kernel_h - 1) + 1);
  const long span_w = static_cast<long>(g.dilation * (g.kernel_w - 1) + 1);
  const long padded_h = static_cast<long>(g.height + 2 * g.padding);
  const long padded_w = static_cast<long>(g.width + 2 * g.padding);
  if (padded_h < span_h || padded_w < span_w) {
    throw ShapeError("conv2d: kernel extent exceeds padded input " + shape_str(input.shape()));
  }
  g.out_height = static_cast<std::size_t>((padded_h - span_h) / static_cast<long>(g.stride) + 1);
  g.out_width = static_cast<std::size_t>((padded_w - span_w) / static_cast<long>(g.stride) + 1);

  Tensor<T> out({batch, g.out_channels, g.out_height, g.out_width});
  const T* in = input.data().data();
  const T* w = weight.data().data();
  const T* bptr = bias.defined() ? bias.data().data() : nullptr;
  T* o = out.mutable_data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    detail::conv_forward_sample(g, in + b * g.input_size(), w, bptr, o + b * g.output_size());
  }

  if (needs_grad<T>({&input, &weight, &bias})) {
    Tape<T>::current().record(out, [input, weight, bias, g, batch](std::span<const T> go) mutable {
      if (input.requires_grad()) {
        T* gi = input.ensure_grad().data();
        for (std::size_t b = 0; b < batch; ++b) {
          detail::conv_backward_input_sample(g, go.data() + b * g.output_size(), weight.data().data(),
                                             gi + b * g.input_size());
        }
      }
      if (weight.requires_grad()) {
        T* gw = weight.ensure_grad().data();
        for (std::size_t b = 0; b < batch; ++b) {
          detail::conv_backward_weight_sample(g, go.data() + b * g.output_size(),
                                              input.data().data() + b * g.input_size(), gw);
        }
      }
      if (bias.defined() && bias.requires_grad()) {
        T* gb = bias.ensure_grad().data();
        for (std::size_t b = 0; b < batch; ++b) {
          detail::conv_backward_bias_sample(g, go.data() + b * g.output_size(), gb);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> elementwise_activation(const Tensor<T>& input, Activation kind) {
  Tensor<T> out(input.shape());
  auto x = input.data();
  auto y = out.mutable_data();
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  } else {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = stable_sigmoid(x[i]);
  }
  if (needs_grad<T>({&input})) {
    // The tape owns `out`, so the captured view stays valid for backward.
    Tape<T>::current().record(out, [input, kind, y = out.data()](std::span<const T> go) mutable {
      auto& gi = input.ensure_grad();
      auto x = input.data();
      if (kind == Activation::relu) {
        for (std::size_t i = 0; i < gi.size(); ++i) {
          if (x[i] > T(0)) gi[i] += go[i];
        }
      } else {
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * y[i] * (T(1) - y[i]);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& input) {
  require_rank(input, 2, "softmax", "input");
  const std::size_t rows = input.dim(0), k = input.dim(1);
  if (k == 0) throw ShapeError("softmax: K must be at least 1");
  Tensor<T> out(input.shape());
  auto x = input.data();
  auto y = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * k;
    T* yr = y.data() + r * k;
    const T mx = *std::max_element(xr, xr + k);
    T total = T(0);
    for (std::size_t j = 0; j < k; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      total += yr[j];
    }
    for (std::size_t j = 0; j < k; ++j) yr[j] /= total;
  }
  if (needs_grad<T>({&input})) {
    Tape<T>::current().record(out, [input, rows, k, y = out.data()](std::span<const T> go) mutable {
      auto& gi = input.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = T(0);
        for (std::size_t j = 0; j < k; ++j) dot += go[r * k + j] * y[r * k + j];
        for (std::size_t j = 0; j < k; ++j) gi[r * k + j] += y[r * k + j] * (go[r * k + j] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(input, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  const std::size_t batch = input.dim(0), cin = input.dim(1), cout = weight.dim(0);
  if (weight.dim(1) != cin) {
    throw ShapeError("linear: input " + shape_str(input.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match Cout=" +
                     std::to_string(cout));
  }
  Tensor<T> out({batch, cout});
  auto x = input.data();
  auto w = weight.data();
  auto y = out.mutable_data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < cout; ++o) {
      T acc = bias.defined() ? bias.data()[o] : T(0);
      for (std::size_t i = 0; i < cin; ++i) acc += x[b * cin + i] * w[o * cin + i];
      y[b * cout + o] = acc;
    }
  }
  if (needs_grad<T>({&input, &weight, &bias})) {
    Tape<T>::current().record(out, [input, weight, bias, batch, cin, cout](std::span<const T> go) mutable {
      auto x = input.data();
      auto w = weight.data();
      if (input.requires_grad()) {
        auto& gi = input.ensure_grad();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t i = 0; i < cin; ++i) gi[b * cin + i] += go[b * cout + o] * w[o * cin + i];
      }
      if (weight.requires_grad()) {
        auto& gw = weight.ensure_grad();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t i = 0; i < cin; ++i) gw[o * cin + i] += go[b * cout + o] * x[b * cin + i];
      }
      if (bias.defined() && bias.requires_grad()) {
        auto& gb = bias.ensure_grad();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t o = 0; o < cout; ++o) gb[o] += go[b * cout + o];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> adaptive_avg_pool_to_1(const Tensor<T>& input) {
  require_rank(input, 4, "adaptive_avg_pool_to_1", "input");
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t area = input.dim(2) * input.dim(3);
  if (area == 0) throw ShapeError("adaptive_avg_pool_to_1: empty spatial extent");
  Tensor<T> out({input.dim(0), input.dim(1), 1, 1});
  auto x = input.data();
  auto y = out.mutable_data();
  for (std::size_t p = 0; p < planes; ++p) {
    T acc = T(0);
    for (std::size_t i = 0; i < area; ++i) acc += x[p * area + i];
    y[p] = acc / static_cast<T>(area);
  }
  if (needs_grad<T>({&input})) {
    Tape<T>::current().record(out, [input, planes, area](std::span<const T> go) mutable {
      auto& gi = input.ensure_grad();
      const T inv = T(1) / static_cast<T>(area);
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < area; ++i) gi[p * area + i] += go[p] * inv;
    });
  }
  return out;
}

namespace {

// Source taps for one output coordinate of a 2x half-pixel upsample.
struct Tap {
  std::size_t lo, hi;
  double frac;
};

Tap upsample_tap(std::size_t dst, std::size_t src_extent) {
  double s = (static_cast<double>(dst) + 0.5) / 2.0 - 0.5;
  if (s < 0.0) s = 0.0;
  std::size_t lo = static_cast<std::size_t>(s);
  if (lo > src_extent - 1) lo = src_extent - 1;
  const std::size_t hi = std::min(lo + 1, src_extent - 1);
  return {lo, hi, s - static_cast<double>(lo)};
}

}  // namespace

template <typename T>
Tensor<T> bilinear_upsample_2x(const Tensor<T>& input) {
  require_rank(input, 4, "bilinear_upsample_2x", "input");
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t h = input.dim(2), w = input.dim(3);
  if (h == 0 || w == 0) throw ShapeError("bilinear_upsample_2x: empty spatial extent");
  const std::size_t oh = 2 * h, ow = 2 * w;
  std::vector<Tap> rows(oh), cols(ow);
  for (std::size_t y = 0; y < oh; ++y) rows[y] = upsample_tap(y, h);
  for (std::size_t x = 0; x < ow; ++x) cols[x] = upsample_tap(x, w);

  Tensor<T> out({input.dim(0), input.dim(1), oh, ow});
  auto src = input.data();
  auto dst = out.mutable_data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* s = src.data() + p * h * w;
    T* d = dst.data() + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      const Tap& r = rows[y];
      const T fy = static_cast<T>(r.frac);
      for (std::size_t x = 0; x < ow; ++x) {
        const Tap& c = cols[x];
        const T fx = static_cast<T>(c.frac);
        const T top = s[r.lo * w + c.lo] * (T(1) - fx) + s[r.lo * w + c.hi] * fx;
        const T bot = s[r.hi * w + c.lo] * (T(1) - fx) + s[r.hi * w + c.hi] * fx;
        d[y * ow + x] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  if (needs_grad<T>({&input})) {
    Tape<T>::current().record(out, [input, planes, h, w, rows, cols](std::span<const T> go) mutable {
      auto& gi = input.ensure_grad();
      const std::size_t oh = 2 * h, ow = 2 * w;
      for (std::size_t p = 0; p < planes; ++p) {
        T* g = gi.data() + p * h * w;
        const T* d = go.data() + p * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          const Tap& r = rows[y];
          const T fy = static_cast<T>(r.frac);
          for (std::size_t x = 0; x < ow; ++x) {
            const Tap& c = cols[x];
            const T fx = static_cast<T>(c.frac);
            const T v = d[y * ow + x];
            g[r.lo * w + c.lo] += v * (T(1) - fy) * (T(1) - fx);
            g[r.lo * w + c.hi] += v * (T(1) - fy) * fx;
            g[r.hi * w + c.lo] += v * fy * (T(1) - fx);
            g[r.hi * w + c.hi] += v * fy * fx;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.defined() || !b.defined() || a.rank() < 2 || a.rank() != b.rank()) {
    throw ShapeError("concat_channels: operands must share a rank >= 2");
  }
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != 1 && a.dim(i) != b.dim(i)) {
      throw ShapeError("concat_channels: " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                       " differ on axis " + std::to_string(i));
    }
  }
  const std::size_t outer = a.dim(0);
  const std::size_t na = inner_size(a.shape(), 1), nb = inner_size(b.shape(), 1);
  Shape shape = a.shape();
  shape[1] = a.dim(1) + b.dim(1);
  Tensor<T> out(shape);
  auto y = out.mutable_data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.data().data() + o * na, na, y.data() + o * (na + nb));
    std::copy_n(b.data().data() + o * nb, nb, y.data() + o * (na + nb) + na);
  }
  if (needs_grad<T>({&a, &b})) {
    Tape<T>::current().record(out, [a, b, outer, na, nb](std::span<const T> go) mutable {
      if (a.requires_grad()) {
        auto& ga = a.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < na; ++i) ga[o * na + i] += go[o * (na + nb) + i];
      }
      if (b.requires_grad()) {
        auto& gb = b.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < nb; ++i) gb[o * nb + i] += go[o * (na + nb) + na + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, std::size_t begin, std::size_t end) {
  if (!input.defined() || input.rank() < 2) throw ShapeError("slice_channels: input rank must be >= 2");
  if (begin > end || end > input.dim(1)) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + std::to_string(input.dim(1)) + " channels");
  }
  const std::size_t outer = input.dim(0);
  const std::size_t spatial = inner_size(input.shape(), 2);
  const std::size_t full = input.dim(1) * spatial;
  const std::size_t part = (end - begin) * spatial;
  const std::size_t offset = begin * spatial;
  Shape shape = input.shape();
  shape[1] = end - begin;
  Tensor<T> out(shape);
  auto y = out.mutable_data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(input.data().data() + o * full + offset, part, y.data() + o * part);
  }
  if (needs_grad<T>({&input})) {
    Tape<T>::current().record(out, [input, outer, full, part, offset](std::span<const T> go) mutable {
      auto& gi = input.ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < part; ++i) gi[o * full + offset + i] += go[o * part + i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, Shape shape) {
  if (shape_numel(shape) != input.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(input.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(input.data().begin(), input.data().end()));
  if (needs_grad<T>({&input})) {
    Tape<T>::current().record(out, [input](std::span<const T> go) mutable {
      auto& gi = input.ensure_grad();
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] + b.data()[i];
  if (needs_grad<T>({&a, &b})) {
    Tape<T>::current().record(out, [a, b](std::span<const T> go) mutable {
      if (a.requires_grad()) {
        auto& g = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      }
      if (b.requires_grad()) {
        auto& g = b.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] * b.data()[i];
  if (needs_grad<T>({&a, &b})) {
    Tape<T>::current().record(out, [a, b](std::span<const T> go) mutable {
      if (a.requires_grad()) {
        auto& g = a.ensure_grad();
        auto bv = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto& g = b.ensure_grad();
        auto av = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * av[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T factor) {
  Tensor<T> out(input.shape());
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = input.data()[i] * factor;
  if (needs_grad<T>({&input})) {
    Tape<T>::current().record(out, [input, factor](std::span<const T> go) mutable {
      auto& g = input.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input) {
  T acc = T(0);
  for (T v : input.data()) acc += v;
  Tensor<T> out({1}, acc);
  if (needs_grad<T>({&input})) {
    Tape<T>::current().record(out, [input](std::span<const T> go) mutable {
      auto& g = input.ensure_grad();
      for (auto& v : g) v += go[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> gated_sum(std::span<const Tensor<T>> branches, const Tensor<T>& weights) {
  require_rank(weights, 2, "gated_sum", "weights");
  const std::size_t count = branches.size();
  if (count == 0 || weights.dim(1) != count) {
    throw ShapeError("gated_sum: weights " + shape_str(weights.shape()) + " do not match " +
                     std::to_string(count) + " branches");
  }
  const Shape& shape = branches[0].shape();
  for (const auto& br : branches) require_same_shape(br, branches[0], "gated_sum");
  const std::size_t batch = shape[0];
  if (weights.dim(0) != batch) {
    throw ShapeError("gated_sum: weights batch " + std::to_string(weights.dim(0)) + " vs branch batch " +
                     std::to_string(batch));
  }
  const std::size_t per_sample = inner_size(shape, 1);
  Tensor<T> out(shape);
  auto y = out.mutable_data();
  auto w = weights.data();
  for (std::size_t r = 0; r < count; ++r) {
    auto x = branches[r].data();
    for (std::size_t b = 0; b < batch; ++b) {
      const T wr = w[b * count + r];
      for (std::size_t i = 0; i < per_sample; ++i) y[b * per_sample + i] += wr * x[b * per_sample + i];
    }
  }
  bool any = needs_grad<T>({&weights}) || needs_grad<T>(branches);
  if (any) {
    std::vector<Tensor<T>> held(branches.begin(), branches.end());
    Tape<T>::current().record(out, [held, weights, batch, count, per_sample](std::span<const T> go) mutable {
      auto w = weights.data();
      for (std::size_t r = 0; r < count; ++r) {
        if (!held[r].requires_grad()) continue;
        auto& g = held[r].ensure_grad();
        for (std::size_t b = 0; b < batch; ++b) {
          const T wr = w[b * count + r];
          for (std::size_t i = 0; i < per_sample; ++i) g[b * per_sample + i] += wr * go[b * per_sample + i];
        }
      }
      if (weights.requires_grad()) {
        auto& gw = weights.ensure_grad();
        for (std::size_t r = 0; r < count; ++r) {
          auto x = held[r].data();
          for (std::size_t b = 0; b < batch; ++b) {
            T acc = T(0);
            for (std::size_t i = 0; i < per_sample; ++i) acc += go[b * per_sample + i] * x[b * per_sample + i];
            gw[b * count + r] += acc;
          }
        }
      }
    });
  }
  return out;
}

#define DDUNET_INSTANTIATE(T)                                                                   \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,              \
                            const Conv2dOptions&);                                              \
  template Tensor<T> elementwise_activation(const Tensor<T>&, Activation);                     \
  template Tensor<T> softmax(const Tensor<T>&);                                                \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> adaptive_avg_pool_to_1(const Tensor<T>&);                                 \
  template Tensor<T> bilinear_upsample_2x(const Tensor<T>&);                                   \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> slice_channels(const Tensor<T>&, std::size_t, std::size_t);               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> gated_sum(std::span<const Tensor<T>>, const Tensor<T>&);

DDUNET_INSTANTIATE(float)
DDUNET_INSTANTIATE(double)
#undef DDUNET_INSTANTIATE

}  // namespace ddunet
