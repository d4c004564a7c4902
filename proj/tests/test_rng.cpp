#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sfdd/rng.hpp"

using sfdd::RngStream;

TEST_CASE("streams are deterministic and label-separated") {
  RngStream a(7, "worker", 3);
  RngStream b(7, "worker", 3);
  RngStream c(7, "worker", 4);
  for (int i = 0; i < 64; ++i) REQUIRE(a.next_u64() == b.next_u64());
  bool differs = false;
  RngStream a2(7, "worker", 3);
  for (int i = 0; i < 64; ++i) differs |= (a2.next_u64() != c.next_u64());
  REQUIRE(differs);
}

TEST_CASE("fork does not advance the parent") {
  RngStream a(11, "root");
  RngStream b(11, "root");
  (void)a.fork("child", 1);
  for (int i = 0; i < 16; ++i) REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("uniform01 range and mean") {
  RngStream r(5, "u");
  double acc = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform01();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    acc += u;
  }
  REQUIRE(std::abs(acc / n - 0.5) < 0.01);
}

TEST_CASE("normal moments") {
  RngStream r(7, "n");
  const int n = 100000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  const double m = s / n;
  const double sd = std::sqrt(s2 / n - m * m);
  REQUIRE(std::abs(m) < 0.02);
  REQUIRE(std::abs(sd - 1.0) < 0.02);
}

TEST_CASE("uniform_int bounds and coverage") {
  RngStream r(9, "i");
  bool seen[10] = {};
  for (int i = 0; i < 1000; ++i) {
    const auto v = r.uniform_int(10);
    REQUIRE(v < 10);
    seen[v] = true;
  }
  for (bool s : seen) REQUIRE(s);
}
