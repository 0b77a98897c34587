#pragma once

// Ego-centric top-down rasterizer. Pixel values are composed as 8-bit color
// and exposed as floats in [0,1] (exact multiples of 1/255), which keeps
// observations losslessly quantizable for replay storage.

#include <cstdint>
#include <vector>

#include "minitown/geometry.hpp"
#include "minitown/town.hpp"

namespace minitown {

struct RenderParams {
  int image_size = 64;
  double view_span = 28.0;      // meters across the image width
  double forward_anchor = 0.7;  // vehicle row as a fraction of height (from top)
};

struct Rgb {
  uint8_t r, g, b;
};

namespace colors {
inline constexpr Rgb kGround{40, 46, 40};
inline constexpr Rgb kRoad{92, 92, 98};
inline constexpr Rgb kBoundary{228, 228, 228};
inline constexpr Rgb kCenterline{208, 178, 64};
inline constexpr Rgb kGoal{64, 200, 84};
inline constexpr Rgb kObstacle{202, 62, 52};
inline constexpr Rgb kVehicle{235, 242, 250};
}  // namespace colors

// H x W x 3, row-major, channel-last.
inline std::vector<float> render_observation(const Pose2& vehicle, const TownSpec& town,
                                             const Route& route,
                                             const RenderParams& params = {}) {
  const int n = params.image_size;
  const double mpp = params.view_span / n;
  const Vec2 fwd{std::cos(vehicle.heading), std::sin(vehicle.heading)};
  const Vec2 right{fwd.y, -fwd.x};
  const double cx = 0.5 * n;
  const double cy = params.forward_anchor * n;

  // Only obstacles that can touch the view need distance checks per pixel.
  const double view_radius = params.view_span;
  std::vector<const Obstacle*> near_obstacles;
  for (const auto& o : town.obstacles) {
    if ((o.center - vehicle.position).norm() < view_radius + o.radius)
      near_obstacles.push_back(&o);
  }
  const bool goal_near = (route.goal_pose.position - vehicle.position).norm() < view_radius + 2.0;

  std::vector<uint8_t> img(static_cast<size_t>(n) * n * 3);
  for (int py = 0; py < n; ++py) {
    for (int px = 0; px < n; ++px) {
      const double x_right = (px + 0.5 - cx) * mpp;
      const double y_fwd = (cy - (py + 0.5)) * mpp;
      const Vec2 world = vehicle.position + fwd * y_fwd + right * x_right;

      Rgb c = colors::kGround;
      const auto proj = project_to_route(world, route);
      const double d = std::abs(proj.d_lat);
      const double hw = route.lane_half_width;
      if (d <= hw) {
        c = colors::kRoad;
        if (d > hw - 0.22) {
          c = colors::kBoundary;
        } else if (d < 0.09 && std::fmod(proj.rho, 3.0) < 1.6) {
          c = colors::kCenterline;
        }
      }
      if (goal_near && (world - route.goal_pose.position).norm() <= 2.0) c = colors::kGoal;
      for (const Obstacle* o : near_obstacles) {
        if ((world - o->center).norm() <= o->radius) {
          c = colors::kObstacle;
          break;
        }
      }
      const size_t idx = (static_cast<size_t>(py) * n + px) * 3;
      img[idx + 0] = c.r;
      img[idx + 1] = c.g;
      img[idx + 2] = c.b;
    }
  }

  // Fixed ego marker: a small symmetric arrow at the anchor pixel.
  const int mx = static_cast<int>(cx);
  const int my = static_cast<int>(cy);
  auto put = [&](int x, int y) {
    if (x >= 0 && x < n && y >= 0 && y < n) {
      const size_t idx = (static_cast<size_t>(y) * n + x) * 3;
      img[idx + 0] = colors::kVehicle.r;
      img[idx + 1] = colors::kVehicle.g;
      img[idx + 2] = colors::kVehicle.b;
    }
  };
  // 2x3 block centered on the mirror axis (columns mx-1 and mx swap under a
  // horizontal flip), so a symmetric scene stays symmetric with the marker.
  for (int dy = -1; dy <= 1; ++dy) {
    put(mx - 1, my + dy);
    put(mx, my + dy);
  }

  std::vector<float> out(img.size());
  for (size_t i = 0; i < img.size(); ++i) out[i] = img[i] / 255.0f;
  return out;
}

}  // namespace minitown
