#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "fedgcn/common.hpp"

namespace fedgcn {

/// Dense row-major tensor of doubles. Axis 0 is the batch axis wherever a
/// batch is involved; images are stored as (batch, channels, height, width).
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d);

  static Tensor zeros(std::vector<std::size_t> s);

  std::size_t numel() const { return data.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t rank() const { return shape.size(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  /// Flat size implied by a shape vector.
  static std::size_t size_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto v : s) n *= v;
    return n;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

std::string shape_string(const std::vector<std::size_t>& s);

/// Throws NumericError if any element is NaN or infinite.
void check_finite(const Tensor& t, const std::string& context);

/// One contiguous slice of a ParamVector.
struct ParamSegment {
  std::size_t offset = 0;
  std::size_t length = 0;
  bool operator==(const ParamSegment&) const = default;
};

/// Flat parameter storage with a per-layer offset/length map. This is the
/// unit of every client <-> server exchange; two vectors with equal layout
/// support elementwise algebra.
struct ParamVector {
  std::vector<double> values;
  std::vector<ParamSegment> layout;

  std::size_t size() const { return values.size(); }
  bool same_layout(const ParamVector& o) const { return layout == o.layout; }

  double* segment(std::size_t i) { return values.data() + layout[i].offset; }
  const double* segment(std::size_t i) const { return values.data() + layout[i].offset; }
  std::size_t segment_length(std::size_t i) const { return layout[i].length; }

  /// this += a * other. Throws LayoutError on layout mismatch.
  void axpy(double a, const ParamVector& other);
  /// this *= a.
  void scale(double a);

  static ParamVector zeros_like(const ParamVector& p) {
    ParamVector out;
    out.layout = p.layout;
    out.values.assign(p.values.size(), 0.0);
    return out;
  }

  /// Validates contiguity, non-overlap and exact coverage of values.
  void validate() const;
};

/// Same storage discipline as the ParamVector it differentiates.
using Gradient = ParamVector;

}  // namespace fedgcn
