#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "minitown/actions.hpp"

using namespace minitown;

TEST_CASE("bin tables match the declared action sets") {
  const auto& sp = action_space();
  const std::array<double, 7> steering{-0.5, -0.25, -0.1, 0.0, 0.1, 0.25, 0.5};
  for (int j = 0; j < 7; ++j)
    CHECK(sp.steering_bins()[j] == Catch::Approx(steering[j]).margin(1e-12));
  for (int i = 0; i < 21; ++i)
    CHECK(sp.longitudinal_bins()[i] == Catch::Approx(-1.0 + 0.1 * i).margin(1e-12));
  CHECK(sp.longitudinal_bins().front() == -1.0);
  CHECK(sp.longitudinal_bins().back() == 1.0);
}

TEST_CASE("decode examples") {
  const auto& sp = action_space();
  auto a0 = sp.decode_action(0);
  CHECK(a0[0] == Catch::Approx(-1.0));
  CHECK(a0[1] == Catch::Approx(-0.5));

  auto a73 = sp.decode_action(73);
  CHECK(a73[0] == Catch::Approx(0.0).margin(1e-12));
  CHECK(a73[1] == Catch::Approx(0.0).margin(1e-12));

  auto a146 = sp.decode_action(146);
  CHECK(a146[0] == Catch::Approx(1.0));
  CHECK(a146[1] == Catch::Approx(0.5));
}

TEST_CASE("encode examples and round trip") {
  const auto& sp = action_space();
  CHECK(sp.encode_action(10, 3) == 73);
  CHECK(sp.encode_action(0, 0) == 0);
  CHECK(sp.encode_action(20, 6) == 146);

  std::set<std::pair<double, double>> seen;
  for (int a = 0; a < ActionSpaceSpec::kNumActions; ++a) {
    const int i = a / 7;
    const int j = a % 7;
    CHECK(sp.encode_action(i, j) == a);
    const auto [u_long, u_steer] = sp.decode_action(a);
    CHECK(u_long == sp.longitudinal_bins()[i]);
    CHECK(u_steer == sp.steering_bins()[j]);
    seen.insert({u_long, u_steer});
  }
  CHECK(seen.size() == 147);
}

TEST_CASE("exactly one neutral action") {
  const auto& sp = action_space();
  int neutral = 0;
  for (int a = 0; a < 147; ++a) {
    const auto [u_long, u_steer] = sp.decode_action(a);
    if (u_long == 0.0 && u_steer == 0.0) ++neutral;
  }
  CHECK(neutral == 1);
}

TEST_CASE("control mapping") {
  auto c = ActionSpaceSpec::to_control(0.7, 0.1);
  CHECK(c.throttle == Catch::Approx(0.7));
  CHECK(c.brake == 0.0);
  CHECK(c.steer == Catch::Approx(0.1));

  c = ActionSpaceSpec::to_control(-0.3, 0.0);
  CHECK(c.throttle == 0.0);
  CHECK(c.brake == Catch::Approx(0.3));

  c = ActionSpaceSpec::to_control(0.0, 0.0);
  CHECK(c.throttle == 0.0);
  CHECK(c.brake == 0.0);
  CHECK(c.steer == 0.0);

  const auto& sp = action_space();
  for (int a = 0; a < 147; ++a) {
    const auto ctrl = sp.control_for(a);
    CHECK(ctrl.throttle * ctrl.brake == 0.0);
  }
}

TEST_CASE("out-of-range indices are contract violations") {
  const auto& sp = action_space();
  CHECK_THROWS_AS(sp.decode_action(-1), ContractViolation);
  CHECK_THROWS_AS(sp.decode_action(147), ContractViolation);
  CHECK_THROWS_AS(sp.encode_action(21, 0), ContractViolation);
  CHECK_THROWS_AS(sp.encode_action(0, 7), ContractViolation);
}
