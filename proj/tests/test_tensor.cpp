#include <catch2/catch_amalgamated.hpp>

#include "flowcast/normal.hpp"
#include "flowcast/tensor.hpp"

using namespace flowcast;

TEST_CASE("tensor shape and storage") {
  Tensor t = Tensor::zeros({2, 3});
  REQUIRE(t.numel() == 6);
  REQUIRE(t.rows() == 2);
  REQUIRE(t.cols() == 3);
  t(1, 2) = 5.0;
  REQUIRE(t[5] == 5.0);

  REQUIRE_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), UsageError);
}

TEST_CASE("tensor constructors") {
  Tensor f = Tensor::full({3}, 2.5);
  for (std::size_t i = 0; i < 3; ++i) REQUIRE(f[i] == 2.5);
  Tensor s = Tensor::scalar(-1.0);
  REQUIRE(s.numel() == 1);
  Tensor m = Tensor::matrix(2, 2, {1, 2, 3, 4});
  REQUIRE(m(1, 0) == 3.0);
}

TEST_CASE("finiteness check") {
  Tensor t = Tensor::ones({2});
  REQUIRE(t.all_finite());
  t[1] = std::numeric_limits<double>::infinity();
  REQUIRE_FALSE(t.all_finite());
}

TEST_CASE("standard normal logpdf matches closed form") {
  // -log(2 pi)/2 per coordinate at the origin
  REQUIRE(standard_normal_logpdf(Tensor::row({0.0})) ==
          Catch::Approx(-0.9189385332046727).epsilon(1e-14));
  REQUIRE(standard_normal_logpdf(Tensor::row({0.0, 0.0})) ==
          Catch::Approx(-1.8378770664093453).epsilon(1e-14));
  REQUIRE(standard_normal_logpdf(Tensor::row({1.0})) ==
          Catch::Approx(-1.4189385332046727).epsilon(1e-14));
}
