#pragma once

// The 147-way discrete action space: Cartesian product of 7 steering bins and
// 21 longitudinal-command bins, plus the control mapping.

#include <array>
#include <cmath>

#include "minitown/common.hpp"

namespace minitown {

struct Control {
  double throttle = 0.0;  // [0, 1]
  double brake = 0.0;     // [0, 1]
  double steer = 0.0;     // [-0.5, 0.5]
};

class ActionSpaceSpec {
 public:
  static constexpr int kSteeringBins = 7;
  static constexpr int kLongitudinalBins = 21;
  static constexpr int kNumActions = kSteeringBins * kLongitudinalBins;

  ActionSpaceSpec() {
    steering_ = {-0.5, -0.25, -0.1, 0.0, 0.1, 0.25, 0.5};
    // Built programmatically to avoid float drift in a hand-typed table.
    for (int i = 0; i < kLongitudinalBins; ++i) {
      longitudinal_[i] = -1.0 + 2.0 * i / (kLongitudinalBins - 1);
    }
  }

  const std::array<double, kSteeringBins>& steering_bins() const { return steering_; }
  const std::array<double, kLongitudinalBins>& longitudinal_bins() const {
    return longitudinal_;
  }

  // a -> (u_long, u_steer) via i = floor(a/|S|), j = a mod |S|.
  std::array<double, 2> decode_action(int a) const {
    MT_REQUIRE(a >= 0 && a < kNumActions, "action index out of range");
    const int i = a / kSteeringBins;
    const int j = a % kSteeringBins;
    return {longitudinal_[i], steering_[j]};
  }

  int encode_action(int i, int j) const {
    MT_REQUIRE(i >= 0 && i < kLongitudinalBins, "longitudinal bin out of range");
    MT_REQUIRE(j >= 0 && j < kSteeringBins, "steering bin out of range");
    return i * kSteeringBins + j;
  }

  // Positive longitudinal command -> throttle, negative -> brake magnitude.
  static Control to_control(double u_long, double u_steer) {
    Control c;
    c.throttle = std::max(u_long, 0.0);
    c.brake = std::max(-u_long, 0.0);
    c.steer = u_steer;
    return c;
  }

  Control control_for(int a) const {
    const auto [u_long, u_steer] = decode_action(a);
    return to_control(u_long, u_steer);
  }

 private:
  std::array<double, kSteeringBins> steering_;
  std::array<double, kLongitudinalBins> longitudinal_;
};

inline const ActionSpaceSpec& action_space() {
  static const ActionSpaceSpec spec;
  return spec;
}

}  // namespace minitown
