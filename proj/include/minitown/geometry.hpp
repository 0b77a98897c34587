#pragma once

// Polyline route representation and the geometric quantities feeding reward
// and termination: arclength progress, signed lateral offset, reference
// tangent, heading error and lane-frame velocity decomposition.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "minitown/common.hpp"

namespace minitown {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double dot(const Vec2& o) const { return x * o.x + y * o.y; }
  double cross(const Vec2& o) const { return x * o.y - y * o.x; }
  double norm() const { return std::hypot(x, y); }
  double norm2() const { return x * x + y * y; }
};

struct Pose2 {
  Vec2 position;
  double heading = 0.0;  // radians
};

struct Route {
  std::vector<Vec2> waypoints;
  std::vector<double> cumulative_arclength;  // per waypoint, starts at 0
  double lane_half_width = 1.75;
  Pose2 start_pose;
  Pose2 goal_pose;

  double total_length() const { return cumulative_arclength.back(); }

  void validate() const {
    MT_REQUIRE(waypoints.size() >= 2, "route needs >= 2 waypoints");
    MT_REQUIRE(cumulative_arclength.size() == waypoints.size(),
               "arclength table size mismatch");
    MT_REQUIRE(cumulative_arclength.front() == 0.0, "arclength must start at 0");
    MT_REQUIRE(lane_half_width > 0.0, "lane_half_width must be positive");
    for (size_t i = 1; i < waypoints.size(); ++i) {
      MT_REQUIRE((waypoints[i] - waypoints[i - 1]).norm2() > 0.0,
                 "consecutive waypoints must be distinct");
      MT_REQUIRE(cumulative_arclength[i] > cumulative_arclength[i - 1],
                 "arclength must be strictly increasing");
    }
  }
};

// Builds the cumulative arclength table from waypoints.
inline Route make_route(std::vector<Vec2> waypoints, double lane_half_width,
                        Pose2 start_pose, Pose2 goal_pose) {
  Route r;
  r.waypoints = std::move(waypoints);
  r.lane_half_width = lane_half_width;
  r.start_pose = start_pose;
  r.goal_pose = goal_pose;
  r.cumulative_arclength.resize(r.waypoints.size());
  r.cumulative_arclength[0] = 0.0;
  for (size_t i = 1; i < r.waypoints.size(); ++i) {
    r.cumulative_arclength[i] =
        r.cumulative_arclength[i - 1] + (r.waypoints[i] - r.waypoints[i - 1]).norm();
  }
  r.validate();
  return r;
}

struct RouteProjection {
  double rho = 0.0;             // arclength progress, meters
  double d_lat = 0.0;           // signed lateral offset, positive = left of tangent
  double tangent_heading = 0.0; // radians
  double dist_to_goal = 0.0;    // meters, euclidean to goal position
};

// Nearest-segment projection. Clamped at segment endpoints; exact-distance
// ties (shared polyline corners) resolve toward the larger rho so progress
// cannot oscillate at corners. d_lat carries the full point-to-projection
// distance with the left-of-tangent sign, also for clamped projections.
inline RouteProjection project_to_route(const Vec2& pos, const Route& route) {
  const auto& wp = route.waypoints;
  double best_d2 = std::numeric_limits<double>::infinity();
  Vec2 best_point{};
  Vec2 best_tangent{1.0, 0.0};
  double best_rho = 0.0;

  for (size_t i = 0; i + 1 < wp.size(); ++i) {
    const Vec2 a = wp[i];
    const Vec2 b = wp[i + 1];
    const Vec2 ab = b - a;
    const double len2 = ab.norm2();
    double t = (pos - a).dot(ab) / len2;
    Vec2 proj;
    double rho;
    if (t <= 0.0) {
      proj = a;
      rho = route.cumulative_arclength[i];
    } else if (t >= 1.0) {
      proj = b;
      rho = route.cumulative_arclength[i + 1];
    } else {
      proj = a + ab * t;
      rho = route.cumulative_arclength[i] + t * std::sqrt(len2);
    }
    const double d2 = (pos - proj).norm2();
    if (d2 < best_d2 || (d2 == best_d2 && rho > best_rho)) {
      best_d2 = d2;
      best_point = proj;
      best_tangent = ab;
      best_rho = rho;
    }
  }

  RouteProjection out;
  out.rho = best_rho;
  const double tn = best_tangent.norm();
  const Vec2 tangent{best_tangent.x / tn, best_tangent.y / tn};
  const Vec2 offset = pos - best_point;
  const double side = tangent.cross(offset);
  const double dist = offset.norm();
  out.d_lat = side > 0.0 ? dist : (side < 0.0 ? -dist : 0.0);
  out.tangent_heading = std::atan2(tangent.y, tangent.x);
  out.dist_to_goal = (pos - route.goal_pose.position).norm();
  return out;
}

// Clipped progress increment, bounded to +-0.5 m per step.
inline double progress_delta(double rho_t, double rho_prev) {
  return clip(rho_t - rho_prev, -0.5, 0.5);
}

// Normalized heading error: |wrapped difference| / pi, in [0, 1].
inline double heading_error(double vehicle_heading, double tangent_heading) {
  return std::abs(wrap_to_pi(vehicle_heading - tangent_heading)) / kPi;
}

// Velocity in the reference-lane frame: tangential and left-normal components.
inline std::array<double, 2> lane_frame_velocity(const Vec2& velocity,
                                                 double tangent_heading) {
  const Vec2 tangent{std::cos(tangent_heading), std::sin(tangent_heading)};
  const Vec2 left_normal{-tangent.y, tangent.x};
  return {velocity.dot(tangent), velocity.dot(left_normal)};
}

}  // namespace minitown
