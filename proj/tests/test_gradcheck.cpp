#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "opn/gradcheck.hpp"
#include "opn/pooling.hpp"
#include "test_util.hpp"

using namespace opn;

TEST_CASE("oracle agrees with analytic derivatives of sum x^2 and sum exp x") {
  Tensor4 x = test::tensor_of({1, 1, 1, 2}, {1, 2});
  Tensor4 g = numeric_grad(
      [](const Tensor4& t) {
        double s = 0;
        for (double v : t.values()) s += v * v;
        return s;
      },
      x, 1e-5);
  CHECK(std::fabs(g.values()[0] - 2.0) <= 1e-8);
  CHECK(std::fabs(g.values()[1] - 4.0) <= 1e-8);

  Rng rng(3);
  Tensor4 xr = test::random_tensor(rng, {1, 2, 3, 3});
  Tensor4 ge = numeric_grad(
      [](const Tensor4& t) {
        double s = 0;
        for (double v : t.values()) s += std::exp(v);
        return s;
      },
      xr, 1e-5);
  for (std::size_t i = 0; i < xr.size(); ++i) {
    CHECK(std::fabs(ge.values()[i] - std::exp(xr.values()[i])) <= 1e-7);
  }

  Tensor4 gc = numeric_grad([](const Tensor4&) { return 4.5; }, xr, 1e-5);
  for (double v : gc.values()) CHECK(v == 0.0);
}

TEST_CASE("parameter-vector oracle") {
  std::vector<double> params{0.5, -1.5, 2.0};
  auto g = numeric_grad_params(
      [&] {
        return params[0] * params[0] + 3.0 * params[1] + params[2] * params[1];
      },
      params, 1e-5);
  CHECK(std::fabs(g[0] - 1.0) <= 1e-8);               // 2 p0
  CHECK(std::fabs(g[1] - (3.0 + params[2])) <= 1e-8);  // 3 + p2
  CHECK(std::fabs(g[2] - params[1]) <= 1e-8);          // p1
  CHECK(params == std::vector<double>{0.5, -1.5, 2.0});  // restored
}

TEST_CASE("non-finite function values are rejected") {
  Tensor4 x = test::tensor_of({1, 1, 1, 1}, {0.0});
  CHECK_THROWS_AS(numeric_grad([](const Tensor4& t) { return 1.0 / t.values()[0]; }, x, 1e-5),
                  NumericError);
}

TEST_CASE("relative error definition") {
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(0.0, 0.0) == 0.0);
  CHECK(relative_error(2.0, 1.0) == doctest::Approx(0.5));
  CHECK(relative_error(0.0, 1e-12) == doctest::Approx(1e-4));  // 1e-12 / 1e-8
}

TEST_CASE("every layer kind passes randomized checks") {
  for (CheckKind kind : all_check_kinds()) {
    CAPTURE(to_string(kind));
    GradReport r = check_layer(kind, 8, 1e-5, 1e-4, 12345);
    CHECK(r.passed);
    CHECK(r.max_rel_error <= 1e-4);
  }
}

TEST_CASE("layer kind names round-trip; unknown rejected") {
  for (CheckKind kind : all_check_kinds()) {
    CHECK(parse_check_kind(to_string(kind)) == kind);
  }
  CHECK_THROWS_AS(parse_check_kind("batchnorm"), ConfigError);
}

TEST_CASE("a sign-flipped backward is flagged") {
  const PoolSpec spec{2, 2, 2};
  Rng rng(7);
  Tensor4 x = test::random_tensor(rng, {1, 1, 4, 4});
  RankWeights w = init_rank_weights(1, 4);
  OpnForwardResult fwd = opn_forward(x, spec, w);
  Tensor4 dy({1, 1, 2, 2}, 1.0);
  Tensor4 dx = opn_backward(dy, x, fwd.perms, w).dx;

  Tensor4 numeric = numeric_grad(
      [&](const Tensor4& xin) {
        const Tensor4 y = opn_forward(xin, spec, w).y;
        double s = 0;
        for (double v : y.values()) s += v;
        return s;
      },
      x, 1e-5);

  double sane = 0.0, corrupted = 0.0;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    sane = std::max(sane, relative_error(dx.values()[i], numeric.values()[i]));
    corrupted = std::max(corrupted, relative_error(-dx.values()[i], numeric.values()[i]));
  }
  CHECK(sane <= 1e-4);
  CHECK(corrupted > 1e-4);
}

TEST_CASE("check reports carry the failing location") {
  GradReport r = check_layer(CheckKind::kOpn, 3, 1e-5, 1e-4, 99);
  CHECK(r.passed);
  CHECK(r.layer == "opn");
  CHECK(r.trials == 3);
  CHECK(!r.worst_location.empty());
}
