#include "crna/tensor.hpp"

#include "doctest.h"

using namespace crna;

TEST_CASE("tensor shape and value count must agree") {
  CHECK_NOTHROW(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  CHECK_THROWS_AS(Tensor({2, 3}, {1, 2, 3}), ShapeError);
  Tensor t({2, 2});
  CHECK(t.numel() == 4);
  CHECK(t.all_finite());
}

TEST_CASE("sgd_step arithmetic") {
  Tensor p({1}, {1.0});
  Tensor g({1}, {2.0});
  sgd_step(p, g, 0.1);
  CHECK(p[0] == doctest::Approx(0.8));
}

TEST_CASE("sgd_step with zero gradient leaves params unchanged") {
  Tensor p({3}, {1.0, -2.0, 0.5});
  Tensor g({3});
  sgd_step(p, g, 0.5);
  CHECK(p[0] == 1.0);
  CHECK(p[1] == -2.0);
  CHECK(p[2] == 0.5);
}

TEST_CASE("sgd_step rejects bad inputs") {
  Tensor p({2}, {1.0, 1.0});
  Tensor g({3});
  CHECK_THROWS_AS(sgd_step(p, g, 0.1), ShapeError);
  Tensor g2({2});
  CHECK_THROWS_AS(sgd_step(p, g2, 0.0), ConfigError);
}
