#include "fedgcn/tensor.hpp"

#include <cmath>
#include <sstream>

namespace fedgcn {

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (size_of(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_string(shape));
  }
}

Tensor Tensor::zeros(std::vector<std::size_t> s) {
  const std::size_t n = size_of(s);
  return Tensor(std::move(s), std::vector<double>(n, 0.0));
}

std::string shape_string(const std::vector<std::size_t>& s) {
  std::ostringstream out;
  out << "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out << ", ";
    out << s[i];
  }
  out << ")";
  return out.str();
}

void check_finite(const Tensor& t, const std::string& context) {
  for (double v : t.data) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value in " + context);
    }
  }
}

void ParamVector::axpy(double a, const ParamVector& other) {
  if (!same_layout(other)) {
    throw LayoutError("parameter layouts differ in axpy");
  }
  for (std::size_t i = 0; i < values.size(); ++i) values[i] += a * other.values[i];
}

void ParamVector::scale(double a) {
  for (auto& v : values) v *= a;
}

void ParamVector::validate() const {
  std::size_t expect = 0;
  for (const auto& seg : layout) {
    if (seg.offset != expect) {
      throw LayoutError("layout segments are not contiguous");
    }
    expect += seg.length;
  }
  if (expect != values.size()) {
    throw LayoutError("layout does not cover values exactly");
  }
}

}  // namespace fedgcn
