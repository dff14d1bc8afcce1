#pragma once

#include <cstddef>
#include <vector>

#include "fedgcn/tensor.hpp"

namespace fedgcn {

enum class LayerKind { dense, conv2d, relu, avgpool, flatten, softmax_xent_head };

/// Description of one layer. Only dense and conv2d carry parameters.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;

  static LayerSpec Dense(std::size_t in, std::size_t out) {
    LayerSpec s;
    s.kind = LayerKind::dense;
    s.in_features = in;
    s.out_features = out;
    return s;
  }
  static LayerSpec Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t k,
                          std::size_t stride = 1) {
    LayerSpec s;
    s.kind = LayerKind::conv2d;
    s.in_channels = in_ch;
    s.out_channels = out_ch;
    s.kernel = k;
    s.stride = stride;
    return s;
  }
  static LayerSpec Relu() {
    LayerSpec s;
    s.kind = LayerKind::relu;
    return s;
  }
  static LayerSpec AvgPool(std::size_t k, std::size_t stride) {
    LayerSpec s;
    s.kind = LayerKind::avgpool;
    s.kernel = k;
    s.stride = stride;
    return s;
  }
  static LayerSpec Flatten() {
    LayerSpec s;
    s.kind = LayerKind::flatten;
    return s;
  }
  static LayerSpec SoftmaxXentHead() {
    LayerSpec s;
    s.kind = LayerKind::softmax_xent_head;
    return s;
  }

  bool parameterized() const {
    return kind == LayerKind::dense || kind == LayerKind::conv2d;
  }

  /// Number of parameters (weights + biases) this layer owns.
  std::size_t param_count() const;

  /// Throws ConfigError when dims are inconsistent with the kind
  /// (dense needs in/out > 0, conv2d an odd kernel >= 1, ...).
  void validate() const;
};

const char* layer_kind_name(LayerKind k);

/// Output shape (batch axis excluded) of a layer applied to `in`.
/// Throws ShapeError when the layer cannot consume `in`.
std::vector<std::size_t> layer_output_shape(const LayerSpec& spec,
                                            const std::vector<std::size_t>& in);

/// Stateless forward of a parameterized layer on a batch. `params` points at
/// the layer's weight block (weights first, then biases).
Tensor layer_apply(const LayerSpec& spec, const double* params, const Tensor& x);

namespace detail {

/// Conv scratch: per-sample im2col patches, kept for the backward pass.
struct ConvScratch {
  std::size_t patch_rows = 0;  // in_channels * kernel^2
  std::size_t positions = 0;   // out_h * out_w
  std::vector<double> col;     // batch blocks of (patch_rows x positions)
};

Tensor dense_forward(const LayerSpec& spec, const double* params, const Tensor& x);
Tensor conv2d_forward(const LayerSpec& spec, const double* params, const Tensor& x,
                      ConvScratch* scratch);
Tensor relu_forward(const Tensor& x);
Tensor avgpool_forward(const LayerSpec& spec, const Tensor& x);
Tensor flatten_forward(const Tensor& x);

/// Accumulates parameter gradients into `param_grad` and input gradients
/// into `grad_in` (both pre-sized, += semantics). `grad_out` must already
/// carry any per-sample scaling.
void dense_backward(const LayerSpec& spec, const double* params, const Tensor& x,
                    const Tensor& grad_out, double* param_grad, Tensor* grad_in);
void conv2d_backward(const LayerSpec& spec, const double* params, const ConvScratch& scratch,
                     const Tensor& grad_out, double* param_grad, Tensor* grad_in);
Tensor relu_backward(const Tensor& x, const Tensor& grad_out);
Tensor avgpool_backward(const LayerSpec& spec, const Tensor& x, const Tensor& grad_out);
Tensor flatten_backward(const Tensor& x, const Tensor& grad_out);

}  // namespace detail
}  // namespace fedgcn
