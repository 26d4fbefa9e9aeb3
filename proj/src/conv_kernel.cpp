#include "ddunet/detail/conv_kernel.hpp"

#include <algorithm>

namespace ddunet::detail {
namespace {

// Output columns x whose source column x*stride - padding + offset lies in [0, width).
struct ColumnRange {
  std::size_t begin = 0, end = 0;
};

ColumnRange valid_columns(const ConvGeometry& g, std::size_t tap) {
  const long offset = static_cast<long>(tap * g.dilation) - static_cast<long>(g.padding);
  const long stride = static_cast<long>(g.stride);
  const long width = static_cast<long>(g.width);
  long lo = 0;
  if (offset < 0) lo = (-offset + stride - 1) / stride;
  long hi = width - offset <= 0 ? 0 : (width - offset - 1) / stride + 1;
  hi = std::min<long>(hi, static_cast<long>(g.out_width));
  if (hi < lo) hi = lo;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Calls fn(out_row, in_row) for every output row whose source row is inside the input.
template <typename Fn>
void for_rows(const ConvGeometry& g, std::size_t tap, Fn&& fn) {
  const long offset = static_cast<long>(tap * g.dilation) - static_cast<long>(g.padding);
  for (std::size_t y = 0; y < g.out_height; ++y) {
    const long iy = static_cast<long>(y * g.stride) + offset;
    if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
    fn(y, static_cast<std::size_t>(iy));
  }
}

}  // namespace

template <typename T>
void conv_forward_sample(const ConvGeometry& g, const T* in, const T* weight, const T* bias, T* out) {
  const std::size_t plane_out = g.out_height * g.out_width;
  const std::size_t plane_in = g.height * g.width;
  const std::size_t cin_g = g.in_per_group();
  const std::size_t cout_g = g.out_per_group();
  for (std::size_t co = 0; co < g.out_channels; ++co) {
    T* o = out + co * plane_out;
    std::fill(o, o + plane_out, bias ? bias[co] : T(0));
    const std::size_t group = co / cout_g;
    for (std::size_t cl = 0; cl < cin_g; ++cl) {
      const T* src = in + (group * cin_g + cl) * plane_in;
      const T* w = weight + (co * cin_g + cl) * g.kernel_h * g.kernel_w;
      for (std::size_t u = 0; u < g.kernel_h; ++u) {
        for (std::size_t v = 0; v < g.kernel_w; ++v) {
          const T wv = w[u * g.kernel_w + v];
          const ColumnRange cols = valid_columns(g, v);
          const long col_off = static_cast<long>(v * g.dilation) - static_cast<long>(g.padding);
          for_rows(g, u, [&](std::size_t y, std::size_t iy) {
            T* orow = o + y * g.out_width;
            const T* irow = src + iy * g.width;
            for (std::size_t x = cols.begin; x < cols.end; ++x) {
              orow[x] += wv * irow[static_cast<long>(x * g.stride) + col_off];
            }
          });
        }
      }
    }
  }
}

template <typename T>
void conv_backward_input_sample(const ConvGeometry& g, const T* grad_out, const T* weight, T* grad_in) {
  const std::size_t plane_out = g.out_height * g.out_width;
  const std::size_t plane_in = g.height * g.width;
  const std::size_t cin_g = g.in_per_group();
  const std::size_t cout_g = g.out_per_group();
  for (std::size_t co = 0; co < g.out_channels; ++co) {
    const T* go = grad_out + co * plane_out;
    const std::size_t group = co / cout_g;
    for (std::size_t cl = 0; cl < cin_g; ++cl) {
      T* dst = grad_in + (group * cin_g + cl) * plane_in;
      const T* w = weight + (co * cin_g + cl) * g.kernel_h * g.kernel_w;
      for (std::size_t u = 0; u < g.kernel_h; ++u) {
        for (std::size_t v = 0; v < g.kernel_w; ++v) {
          const T wv = w[u * g.kernel_w + v];
          const ColumnRange cols = valid_columns(g, v);
          const long col_off = static_cast<long>(v * g.dilation) - static_cast<long>(g.padding);
          for_rows(g, u, [&](std::size_t y, std::size_t iy) {
            const T* grow = go + y * g.out_width;
            T* drow = dst + iy * g.width;
            for (std::size_t x = cols.begin; x < cols.end; ++x) {
              drow[static_cast<long>(x * g.stride) + col_off] += wv * grow[x];
            }
          });
        }
      }
    }
  }
}

template <typename T>
void conv_backward_weight_sample(const ConvGeometry& g, const T* grad_out, const T* in, T* grad_weight) {
  const std::size_t plane_out = g.out_height * g.out_width;
  const std::size_t plane_in = g.height * g.width;
  const std::size_t cin_g = g.in_per_group();
  const std::size_t cout_g = g.out_per_group();
  for (std::size_t co = 0; co < g.out_channels; ++co) {
    const T* go = grad_out + co * plane_out;
    const std::size_t group = co / cout_g;
    for (std::size_t cl = 0; cl < cin_g; ++cl) {
      const T* src = in + (group * cin_g + cl) * plane_in;
      T* gw = grad_weight + (co * cin_g + cl) * g.kernel_h * g.kernel_w;
      for (std::size_t u = 0; u < g.kernel_h; ++u) {
        for (std::size_t v = 0; v < g.kernel_w; ++v) {
          const ColumnRange cols = valid_columns(g, v);
          const long col_off = static_cast<long>(v * g.dilation) - static_cast<long>(g.padding);
          T acc = T(0);
          for_rows(g, u, [&](std::size_t y, std::size_t iy) {
            const T* grow = go + y * g.out_width;
            const T* irow = src + iy * g.width;
            for (std::size_t x = cols.begin; x < cols.end; ++x) {
              acc += grow[x] * irow[static_cast<long>(x * g.stride) + col_off];
            }
          });
          gw[u * g.kernel_w + v] += acc;
        }
      }
    }
  }
}

template <typename T>
void conv_backward_bias_sample(const ConvGeometry& g, const T* grad_out, T* grad_bias) {
  const std::size_t plane_out = g.out_height * g.out_width;
  for (std::size_t co = 0; co < g.out_channels; ++co) {
    T acc = T(0);
    const T* go = grad_out + co * plane_out;
    for (std::size_t i = 0; i < plane_out; ++i) acc += go[i];
    grad_bias[co] += acc;
  }
}

#define DDUNET_INSTANTIATE(T)                                                                   \
  template void conv_forward_sample<T>(const ConvGeometry&, const T*, const T*, const T*, T*); \
  template void conv_backward_input_sample<T>(const ConvGeometry&, const T*, const T*, T*);    \
  template void conv_backward_weight_sample<T>(const ConvGeometry&, const T*, const T*, T*);   \
  template void conv_backward_bias_sample<T>(const ConvGeometry&, const T*, T*);

DDUNET_INSTANTIATE(float)
DDUNET_INSTANTIATE(double)
#undef DDUNET_INSTANTIATE

}  // namespace ddunet::detail
