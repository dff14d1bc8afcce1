#include <cmath>
#include <cstring>
#include <sstream>

#include "doctest.h"
#include "fedgcn/model.hpp"
#include "fedgcn/serialize.hpp"
#include "test_util.hpp"

using namespace fedgcn;

namespace {

LayeredModel dense_head_model(std::size_t in, std::size_t out) {
  return LayeredModel({in}, {LayerSpec::Dense(in, out), LayerSpec::SoftmaxXentHead()});
}

}  // namespace

TEST_CASE("zero-weight dense maps any input to zero logits") {
  const auto model = dense_head_model(2, 3);
  const ParamVector params = model.zero_params();
  const Tensor x({2, 2}, {0.3, -1.2, 5.0, 2.0});
  const Tensor logits = forward(model, params, x);
  for (double v : logits.data) CHECK(v == 0.0);
}

TEST_CASE("identity 1x1 conv reproduces its input") {
  LayeredModel model({1, 3, 3}, {LayerSpec::Conv2d(1, 1, 1), LayerSpec::Flatten(),
                                 LayerSpec::Dense(9, 2), LayerSpec::SoftmaxXentHead()});
  ParamVector params = model.zero_params();
  params.segment(0)[0] = 1.0;  // kernel [1], bias 0
  Tensor x = Tensor::zeros({1, 1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) x.data[i] = 0.1 * static_cast<double>(i) - 0.4;
  ActivationCache cache;
  forward(model, params, x, &cache);
  CHECK(cache.acts[1].data == x.data);
}

TEST_CASE("dense hand case: identity weights plus bias") {
  const auto model = dense_head_model(2, 2);
  ParamVector params = model.zero_params();
  double* p = params.segment(0);
  p[0] = 1.0; p[1] = 0.0;  // weight row 0
  p[2] = 0.0; p[3] = 1.0;  // weight row 1
  p[4] = 1.0; p[5] = 1.0;  // bias
  const Tensor logits = forward(model, params, Tensor({1, 2}, {2.0, 3.0}));
  CHECK(logits.data[0] == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(logits.data[1] == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("uniform logits give loss ln(C)") {
  for (std::size_t classes : {2, 3, 7}) {
    const Tensor logits = Tensor::zeros({1, classes});
    const std::vector<int> labels = {0};
    CHECK(cross_entropy(logits, labels) ==
          doctest::Approx(std::log(static_cast<double>(classes))).epsilon(1e-12));
  }
}

TEST_CASE("saturated correct prediction: zero loss, zero head gradient") {
  const auto model = dense_head_model(1, 2);
  ParamVector params = model.zero_params();
  params.segment(0)[2] = 0.0;     // bias class 0
  params.segment(0)[3] = -800.0;  // bias class 1: probability underflows to exact 0
  ActivationCache cache;
  forward(model, params, Tensor({1, 1}, {0.0}), &cache);
  const std::vector<int> labels = {0};
  const auto back = backward(model, params, cache, labels);
  CHECK(back.loss == 0.0);
  for (double g : back.grad.values) CHECK(g == 0.0);
}

TEST_CASE("gradient matches central finite differences on a 2-layer net") {
  Rng rng(1234);
  testutil::GradCheckCase c;
  c.model = LayeredModel({4}, {LayerSpec::Dense(4, 5), LayerSpec::Relu(),
                               LayerSpec::Dense(5, 3), LayerSpec::SoftmaxXentHead()});
  c.params = c.model.init_params(rng);
  c.x = Tensor::zeros({3, 4});
  for (auto& v : c.x.data) v = rng.uniform(-1.0, 1.0);
  c.labels = {0, 2, 1};
  CHECK(testutil::max_grad_error(c) < 1e-4);
}

TEST_CASE("gradient property: random small models vs finite differences") {
  Rng rng(20240601);
  for (int i = 0; i < 12; ++i) {
    auto c = testutil::random_case(rng, /*allow_specialized=*/true);
    CAPTURE(c.name);
    CHECK(testutil::max_grad_error(c) < 1e-4);
  }
}

TEST_CASE("sgd_step leaves params unchanged for zero gradient") {
  const auto model = dense_head_model(3, 2);
  Rng rng(5);
  const ParamVector params = model.init_params(rng);
  const Gradient zero = ParamVector::zeros_like(params);
  const ParamVector stepped = sgd_step(params, zero, 0.1);
  CHECK(std::memcmp(stepped.values.data(), params.values.data(),
                    params.size() * sizeof(double)) == 0);
}

TEST_CASE("sgd_step hand case") {
  ParamVector p;
  p.layout = {{0, 2}};
  p.values = {1.0, 1.0};
  Gradient g = p;
  g.values = {2.0, -2.0};
  const ParamVector out = sgd_step(p, g, 0.5);
  CHECK(out.values[0] == 0.0);
  CHECK(out.values[1] == 2.0);
}

TEST_CASE("two sgd steps with fixed gradients equal one summed step") {
  Rng rng(99);
  ParamVector p;
  p.layout = {{0, 6}};
  p.values.assign(6, 0.0);
  for (auto& v : p.values) v = rng.uniform(-1.0, 1.0);
  Gradient g1 = ParamVector::zeros_like(p), g2 = ParamVector::zeros_like(p);
  for (auto& v : g1.values) v = rng.uniform(-1.0, 1.0);
  for (auto& v : g2.values) v = rng.uniform(-1.0, 1.0);
  const double lr = 0.07;
  const ParamVector two = sgd_step(sgd_step(p, g1, lr), g2, lr);
  Gradient sum = g1;
  sum.axpy(1.0, g2);
  const ParamVector one = sgd_step(p, sum, lr);
  for (std::size_t i = 0; i < p.size(); ++i) {
    CHECK(two.values[i] == doctest::Approx(one.values[i]).epsilon(1e-12));
  }
}

TEST_CASE("sgd_step rejects mismatched layouts and negative lr") {
  ParamVector p;
  p.layout = {{0, 2}};
  p.values = {1.0, 2.0};
  Gradient g;
  g.layout = {{0, 1}, {1, 1}};
  g.values = {1.0, 1.0};
  CHECK_THROWS_AS(sgd_step(p, g, 0.1), LayoutError);
  const Gradient ok = p;
  CHECK_THROWS_AS(sgd_step(p, ok, -0.1), ConfigError);
}

TEST_CASE("determinism: same seed gives bitwise-identical params after ops") {
  auto run = [] {
    Rng rng(77);
    auto model = LayeredModel({3, 6, 6},
                              {LayerSpec::Conv2d(3, 4, 3), LayerSpec::Relu(),
                               LayerSpec::AvgPool(2, 2), LayerSpec::Flatten(),
                               LayerSpec::Dense(4 * 3 * 3, 4), LayerSpec::SoftmaxXentHead()});
    ParamVector params = model.init_params(rng);
    Tensor x = Tensor::zeros({2, 3, 6, 6});
    for (auto& v : x.data) v = rng.uniform(0.0, 1.0);
    const std::vector<int> labels = {1, 3};
    for (int step = 0; step < 3; ++step) {
      ActivationCache cache;
      forward(model, params, x, &cache);
      const auto back = backward(model, params, cache, labels);
      sgd_step_inplace(params, back.grad, 0.05);
    }
    return params;
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.values.data(), b.values.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("cross-entropy is never negative") {
  Rng rng(31337);
  for (int i = 0; i < 200; ++i) {
    const std::size_t classes = 2 + rng.uniform_int(6);
    Tensor logits = Tensor::zeros({1, classes});
    for (auto& v : logits.data) v = rng.uniform(-30.0, 30.0);
    const std::vector<int> labels = {static_cast<int>(rng.uniform_int(classes))};
    CHECK(cross_entropy(logits, labels) >= 0.0);
  }
}

TEST_CASE("param vector algebra matches a scalar-loop oracle") {
  Rng rng(4242);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.uniform_int(40);
    ParamVector a, b;
    a.layout = b.layout = {{0, n}};
    a.values.resize(n);
    b.values.resize(n);
    for (auto& v : a.values) v = rng.uniform(-3.0, 3.0);
    for (auto& v : b.values) v = rng.uniform(-3.0, 3.0);
    const double s = rng.uniform(-2.0, 2.0);
    std::vector<double> expect(n);
    for (std::size_t i = 0; i < n; ++i) expect[i] = a.values[i] + s * b.values[i];
    ParamVector got = a;
    got.axpy(s, b);
    for (std::size_t i = 0; i < n; ++i) CHECK(got.values[i] == expect[i]);
    const double t = rng.uniform(-2.0, 2.0);
    std::vector<double> scaled(n);
    for (std::size_t i = 0; i < n; ++i) scaled[i] = t * a.values[i];
    ParamVector sa = a;
    sa.scale(t);
    for (std::size_t i = 0; i < n; ++i) CHECK(sa.values[i] == scaled[i]);
  }
}

TEST_CASE("layout validation catches gaps and bad coverage") {
  ParamVector ok;
  ok.layout = {{0, 2}, {2, 0}, {2, 3}};
  ok.values.assign(5, 0.0);
  CHECK_NOTHROW(ok.validate());
  ParamVector gap = ok;
  gap.layout = {{0, 2}, {3, 2}};
  CHECK_THROWS_AS(gap.validate(), LayoutError);
  ParamVector short_cover = ok;
  short_cover.layout = {{0, 2}};
  CHECK_THROWS_AS(short_cover.validate(), LayoutError);
}

TEST_CASE("forward rejects wrong input shapes and non-finite inputs") {
  const auto model = dense_head_model(3, 2);
  Rng rng(8);
  const ParamVector params = model.init_params(rng);
  CHECK_THROWS_AS(forward(model, params, Tensor({1, 2}, {1.0, 2.0})), ShapeError);
  const Tensor bad({1, 3}, {1.0, std::numeric_limits<double>::quiet_NaN(), 0.0});
  CHECK_THROWS_AS(forward(model, params, bad), NumericError);
}

TEST_CASE("backward rejects out-of-range labels") {
  const auto model = dense_head_model(2, 3);
  Rng rng(9);
  const ParamVector params = model.init_params(rng);
  ActivationCache cache;
  forward(model, params, Tensor({1, 2}, {0.5, -0.5}), &cache);
  const std::vector<int> high = {3};
  CHECK_THROWS_AS(backward(model, params, cache, high), LabelError);
  const std::vector<int> negative = {-1};
  CHECK_THROWS_AS(backward(model, params, cache, negative), LabelError);
}

TEST_CASE("layer spec validation") {
  CHECK_THROWS_AS(LayerSpec::Dense(0, 3).validate(), ConfigError);
  CHECK_THROWS_AS(LayerSpec::Conv2d(1, 4, 2).validate(), ConfigError);  // even kernel
  CHECK_NOTHROW(LayerSpec::Conv2d(1, 4, 3).validate());
  CHECK_THROWS_AS(LayerSpec::AvgPool(0, 1).validate(), ConfigError);
}

TEST_CASE("param vector serialization round-trips") {
  Rng rng(55);
  const auto model = dense_head_model(4, 3);
  const ParamVector params = model.init_params(rng);
  std::stringstream buf;
  serialize_params(params, buf);
  const ParamVector back = deserialize_params(buf);
  CHECK(back.layout == params.layout);
  CHECK(back.values == params.values);
}

TEST_CASE("param vector serialization golden bytes") {
  ParamVector p;
  p.layout = {{0, 1}, {1, 2}};
  p.values = {1.0, 0.0, -2.0};
  std::stringstream buf;
  serialize_params(p, buf);
  const std::string bytes = buf.str();
  // segment count, two offset/length pairs, three doubles
  REQUIRE(bytes.size() == 8 + 2 * 16 + 3 * 8);
  auto u64_at = [&](std::size_t off) {
    std::uint64_t v;
    std::memcpy(&v, bytes.data() + off, 8);
    return v;
  };
  CHECK(u64_at(0) == 2);   // layout table length
  CHECK(u64_at(8) == 0);   // segment 0 offset
  CHECK(u64_at(16) == 1);  // segment 0 length
  CHECK(u64_at(24) == 1);  // segment 1 offset
  CHECK(u64_at(32) == 2);  // segment 1 length
  double d = 0.0;
  std::memcpy(&d, bytes.data() + 40, 8);
  CHECK(d == 1.0);
  std::memcpy(&d, bytes.data() + 56, 8);
  CHECK(d == -2.0);
}
