#include "fedgcn/layers.hpp"

#include <Eigen/Dense>

namespace fedgcn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::softmax_xent_head: return "softmax_xent_head";
  }
  return "?";
}

std::size_t LayerSpec::param_count() const {
  switch (kind) {
    case LayerKind::dense: return out_features * in_features + out_features;
    case LayerKind::conv2d: return out_channels * (in_channels * kernel * kernel + 1);
    default: return 0;
  }
}

void LayerSpec::validate() const {
  switch (kind) {
    case LayerKind::dense:
      if (in_features == 0 || out_features == 0) {
        throw ConfigError("dense layer needs in/out features > 0");
      }
      break;
    case LayerKind::conv2d:
      if (in_channels == 0 || out_channels == 0) {
        throw ConfigError("conv2d layer needs in/out channels > 0");
      }
      if (kernel < 1 || kernel % 2 == 0) {
        throw ConfigError("conv2d kernel must be odd and >= 1");
      }
      if (stride < 1) throw ConfigError("conv2d stride must be >= 1");
      break;
    case LayerKind::avgpool:
      if (kernel < 1 || stride < 1) {
        throw ConfigError("avgpool needs kernel and stride >= 1");
      }
      break;
    default:
      break;
  }
}

std::vector<std::size_t> layer_output_shape(const LayerSpec& spec,
                                            const std::vector<std::size_t>& in) {
  switch (spec.kind) {
    case LayerKind::dense:
      if (in.size() != 1 || in[0] != spec.in_features) {
        throw ShapeError(std::string("dense expects (") + std::to_string(spec.in_features) +
                         ") features, got " + shape_string(in));
      }
      return {spec.out_features};
    case LayerKind::conv2d: {
      if (in.size() != 3 || in[0] != spec.in_channels) {
        throw ShapeError("conv2d expects (channels, h, w) input with channels " +
                         std::to_string(spec.in_channels) + ", got " + shape_string(in));
      }
      const std::size_t pad = (spec.kernel - 1) / 2;
      const std::size_t h = (in[1] + 2 * pad - spec.kernel) / spec.stride + 1;
      const std::size_t w = (in[2] + 2 * pad - spec.kernel) / spec.stride + 1;
      return {spec.out_channels, h, w};
    }
    case LayerKind::relu:
      return in;
    case LayerKind::avgpool: {
      if (in.size() != 3) {
        throw ShapeError("avgpool expects (channels, h, w) input, got " + shape_string(in));
      }
      if (in[1] < spec.kernel || in[2] < spec.kernel) {
        throw ShapeError("avgpool window larger than input " + shape_string(in));
      }
      const std::size_t h = (in[1] - spec.kernel) / spec.stride + 1;
      const std::size_t w = (in[2] - spec.kernel) / spec.stride + 1;
      return {in[0], h, w};
    }
    case LayerKind::flatten:
      return {Tensor::size_of(in)};
    case LayerKind::softmax_xent_head:
      if (in.size() != 1) {
        throw ShapeError("classification head expects flat logits, got " + shape_string(in));
      }
      return in;
  }
  throw ConfigError("unknown layer kind");
}

namespace detail {

Tensor dense_forward(const LayerSpec& spec, const double* params, const Tensor& x) {
  const std::size_t batch = x.dim(0);
  const std::size_t in = spec.in_features;
  const std::size_t out = spec.out_features;
  Tensor y = Tensor::zeros({batch, out});
  MapConstMat X(x.data.data(), batch, in);
  MapConstMat W(params, out, in);
  MapMat Y(y.data.data(), batch, out);
  Y.noalias() = X * W.transpose();
  const double* bias = params + out * in;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out; ++o) y.data[b * out + o] += bias[o];
  }
  return y;
}

namespace {

void im2col(const double* img, std::size_t channels, std::size_t h, std::size_t w,
            std::size_t kernel, std::size_t stride, std::size_t out_h, std::size_t out_w,
            double* col) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((kernel - 1) / 2);
  // col is (channels*kernel*kernel) x (out_h*out_w), row-major.
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx, ++row) {
        double* dst = col + row * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
          for (std::size_t ox = 0; ox < out_w; ++ox, ++dst) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix < 0 ||
                ix >= static_cast<std::ptrdiff_t>(w)) {
              *dst = 0.0;
            } else {
              *dst = img[(c * h + static_cast<std::size_t>(iy)) * w +
                         static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, std::size_t channels, std::size_t h, std::size_t w,
                std::size_t kernel, std::size_t stride, std::size_t out_h, std::size_t out_w,
                double* img) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((kernel - 1) / 2);
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx, ++row) {
        const double* src = col + row * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            src += out_w;
            continue;
          }
          for (std::size_t ox = 0; ox < out_w; ++ox, ++src) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            img[(c * h + static_cast<std::size_t>(iy)) * w +
                static_cast<std::size_t>(ix)] += *src;
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d_forward(const LayerSpec& spec, const double* params, const Tensor& x,
                      ConvScratch* scratch) {
  const std::size_t batch = x.dim(0);
  const std::size_t in_ch = spec.in_channels;
  const std::size_t h = x.dim(2);
  const std::size_t w = x.dim(3);
  const auto out_shape = layer_output_shape(spec, {in_ch, h, w});
  const std::size_t out_h = out_shape[1];
  const std::size_t out_w = out_shape[2];
  const std::size_t patch = in_ch * spec.kernel * spec.kernel;
  const std::size_t pos = out_h * out_w;

  ConvScratch local;
  ConvScratch& sc = scratch ? *scratch : local;
  sc.patch_rows = patch;
  sc.positions = pos;
  sc.col.resize(batch * patch * pos);

  Tensor y = Tensor::zeros({batch, spec.out_channels, out_h, out_w});
  MapConstMat W(params, spec.out_channels, patch);
  const double* bias = params + spec.out_channels * patch;
  for (std::size_t b = 0; b < batch; ++b) {
    double* col = sc.col.data() + b * patch * pos;
    im2col(x.data.data() + b * in_ch * h * w, in_ch, h, w, spec.kernel, spec.stride, out_h,
           out_w, col);
    MapConstMat C(col, patch, pos);
    MapMat Y(y.data.data() + b * spec.out_channels * pos, spec.out_channels, pos);
    Y.noalias() = W * C;
    for (std::size_t oc = 0; oc < spec.out_channels; ++oc) Y.row(oc).array() += bias[oc];
  }
  return y;
}

Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.data) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor avgpool_forward(const LayerSpec& spec, const Tensor& x) {
  const std::size_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t k = spec.kernel, s = spec.stride;
  const std::size_t oh = (h - k) / s + 1, ow = (w - k) / s + 1;
  Tensor y = Tensor::zeros({batch, ch, oh, ow});
  const double inv = 1.0 / static_cast<double>(k * k);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < ch; ++c) {
      const double* src = x.data.data() + (b * ch + c) * h * w;
      double* dst = y.data.data() + (b * ch + c) * oh * ow;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = 0.0;
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              acc += src[(oy * s + ky) * w + (ox * s + kx)];
            }
          }
          dst[oy * ow + ox] = acc * inv;
        }
      }
    }
  }
  return y;
}

Tensor flatten_forward(const Tensor& x) {
  Tensor y = x;
  y.shape = {x.dim(0), x.numel() / x.dim(0)};
  return y;
}

void dense_backward(const LayerSpec& spec, const double* params, const Tensor& x,
                    const Tensor& grad_out, double* param_grad, Tensor* grad_in) {
  const std::size_t batch = x.dim(0);
  const std::size_t in = spec.in_features;
  const std::size_t out = spec.out_features;
  MapConstMat X(x.data.data(), batch, in);
  MapConstMat G(grad_out.data.data(), batch, out);
  MapMat dW(param_grad, out, in);
  dW.noalias() += G.transpose() * X;
  double* db = param_grad + out * in;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out; ++o) db[o] += grad_out.data[b * out + o];
  }
  if (grad_in) {
    MapConstMat W(params, out, in);
    MapMat dX(grad_in->data.data(), batch, in);
    dX.noalias() += G * W;
  }
}

void conv2d_backward(const LayerSpec& spec, const double* params, const ConvScratch& scratch,
                     const Tensor& grad_out, double* param_grad, Tensor* grad_in) {
  const std::size_t batch = grad_out.dim(0);
  const std::size_t patch = scratch.patch_rows;
  const std::size_t pos = scratch.positions;
  MapMat dW(param_grad, spec.out_channels, patch);
  double* db = param_grad + spec.out_channels * patch;
  std::vector<double> dcol;
  if (grad_in) dcol.resize(patch * pos);
  for (std::size_t b = 0; b < batch; ++b) {
    MapConstMat G(grad_out.data.data() + b * spec.out_channels * pos, spec.out_channels, pos);
    MapConstMat C(scratch.col.data() + b * patch * pos, patch, pos);
    dW.noalias() += G * C.transpose();
    for (std::size_t oc = 0; oc < spec.out_channels; ++oc) db[oc] += G.row(oc).sum();
    if (grad_in) {
      MapConstMat W(params, spec.out_channels, patch);
      MapMat DC(dcol.data(), patch, pos);
      DC.noalias() = W.transpose() * G;
      const std::size_t h = grad_in->dim(2), w = grad_in->dim(3);
      const std::size_t oh = grad_out.dim(2), ow = grad_out.dim(3);
      col2im_add(dcol.data(), spec.in_channels, h, w, spec.kernel, spec.stride, oh, ow,
                 grad_in->data.data() + b * spec.in_channels * h * w);
    }
  }
}

Tensor relu_backward(const Tensor& x, const Tensor& grad_out) {
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    if (x.data[i] < 0.0) g.data[i] = 0.0;
  }
  return g;
}

Tensor avgpool_backward(const LayerSpec& spec, const Tensor& x, const Tensor& grad_out) {
  const std::size_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t k = spec.kernel, s = spec.stride;
  const std::size_t oh = grad_out.dim(2), ow = grad_out.dim(3);
  Tensor g = Tensor::zeros(x.shape);
  const double inv = 1.0 / static_cast<double>(k * k);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < ch; ++c) {
      const double* src = grad_out.data.data() + (b * ch + c) * oh * ow;
      double* dst = g.data.data() + (b * ch + c) * h * w;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const double v = src[oy * ow + ox] * inv;
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              dst[(oy * s + ky) * w + (ox * s + kx)] += v;
            }
          }
        }
      }
    }
  }
  return g;
}

Tensor flatten_backward(const Tensor& x, const Tensor& grad_out) {
  Tensor g = grad_out;
  g.shape = x.shape;
  return g;
}

}  // namespace detail

Tensor layer_apply(const LayerSpec& spec, const double* params, const Tensor& x) {
  switch (spec.kind) {
    case LayerKind::dense: return detail::dense_forward(spec, params, x);
    case LayerKind::conv2d: return detail::conv2d_forward(spec, params, x, nullptr);
    default:
      throw ConfigError(std::string("layer_apply supports parameterized layers, got ") +
                        layer_kind_name(spec.kind));
  }
}

}  // namespace fedgcn
