#pragma once

// Procedural towns: a town is a set of fixed routes (one lane corridor each)
// plus shoulder obstacles, generated deterministically from a seed and a
// structural preset. Presets with different turn-angle and segment-length
// ranges define the "source" and "held-out" structural distributions.

#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "minitown/common.hpp"
#include "minitown/geometry.hpp"

namespace minitown {

struct Obstacle {
  Vec2 center;
  double radius = 0.5;
};

struct TownSpec {
  std::string town_id;
  uint64_t generator_seed = 0;
  double lane_half_width = 1.75;
  std::vector<Route> routes;
  std::vector<Obstacle> obstacles;
};

struct GeneratorParams {
  std::string preset_name;
  int route_count = 8;
  int segments_min = 4;
  int segments_max = 7;
  double segment_len_min = 12.0;
  double segment_len_max = 28.0;
  double turn_abs_min = 0.0;   // radians, per-corner |turn|
  double turn_abs_max = 0.40;
  double lane_half_width = 1.75;
  double subdivide_step = 2.5;
  double goal_overrun = 10.0;  // polyline continues this far past the goal
  int obstacles_per_route = 2;
  double obstacle_radius_min = 0.4;
  double obstacle_radius_max = 0.8;
  double obstacle_gap_min = 0.2;
  double obstacle_gap_max = 1.0;
  double route_cell_spacing = 150.0;  // keeps route corridors disjoint
  int max_regen_retries = 40;

  void validate() const {
    MT_CONFIG_REQUIRE(route_count >= 1, "route_count must be >= 1");
    MT_CONFIG_REQUIRE(segments_min >= 1 && segments_max >= segments_min,
                      "bad segment count range");
    MT_CONFIG_REQUIRE(segment_len_min > 0 && segment_len_max >= segment_len_min,
                      "bad segment length range");
    MT_CONFIG_REQUIRE(turn_abs_min >= 0 && turn_abs_max >= turn_abs_min,
                      "bad turn range");
    MT_CONFIG_REQUIRE(lane_half_width > 0, "lane_half_width must be positive");
  }
};

// Structural presets. Source towns use gentle, longer segments; held-out
// towns use shorter blocks and sharper corners, so the two distributions
// differ in layout statistics, not in physics or reward.
inline std::optional<GeneratorParams> generator_preset(const std::string& name) {
  GeneratorParams p;
  p.preset_name = name;
  if (name == "src-A") {
    p.turn_abs_min = 0.0;
    p.turn_abs_max = 0.35;
    p.segment_len_min = 14.0;
    p.segment_len_max = 30.0;
  } else if (name == "src-B") {
    p.turn_abs_min = 0.05;
    p.turn_abs_max = 0.45;
    p.segment_len_min = 12.0;
    p.segment_len_max = 26.0;
  } else if (name == "heldout-A") {
    p.turn_abs_min = 0.25;
    p.turn_abs_max = 0.75;
    p.segment_len_min = 9.0;
    p.segment_len_max = 18.0;
  } else if (name == "heldout-B") {
    p.turn_abs_min = 0.35;
    p.turn_abs_max = 0.9;
    p.segment_len_min = 8.0;
    p.segment_len_max = 15.0;
  } else {
    return std::nullopt;
  }
  return p;
}

// Grouped presets used by `gen-towns`: one name, several towns.
inline std::vector<std::string> preset_group(const std::string& name) {
  if (name == "src") return {"src-A", "src-B"};
  if (name == "heldout") return {"heldout-A", "heldout-B"};
  if (generator_preset(name)) return {name};
  return {};
}

namespace detail {

inline double segment_distance(const Vec2& a0, const Vec2& a1, const Vec2& b0,
                               const Vec2& b1) {
  auto point_seg = [](const Vec2& p, const Vec2& s0, const Vec2& s1) {
    const Vec2 d = s1 - s0;
    const double len2 = d.norm2();
    const double t = len2 > 0 ? clip((p - s0).dot(d) / len2, 0.0, 1.0) : 0.0;
    return (p - (s0 + d * t)).norm();
  };
  double dist = std::min(std::min(point_seg(a0, b0, b1), point_seg(a1, b0, b1)),
                         std::min(point_seg(b0, a0, a1), point_seg(b1, a0, a1)));
  // Proper crossings have distance 0; endpoint checks miss them. Strict
  // straddling with a small margin so collinear segments (subdivided straight
  // runs) are not misread as crossings under FMA rounding noise.
  const auto orient = [](const Vec2& p, const Vec2& q, const Vec2& r) {
    return (q - p).cross(r - p);
  };
  constexpr double eps = 1e-9;
  const double o1 = orient(a0, a1, b0), o2 = orient(a0, a1, b1);
  const double o3 = orient(b0, b1, a0), o4 = orient(b0, b1, a1);
  const bool ab_straddles = (o1 > eps && o2 < -eps) || (o1 < -eps && o2 > eps);
  const bool cd_straddles = (o3 > eps && o4 < -eps) || (o3 < -eps && o4 > eps);
  if (ab_straddles && cd_straddles) dist = 0.0;
  return dist;
}

// A corridor is self-intersecting when two stretches that are far apart in
// arclength come closer than the lane plus the off-road band; that would make
// nearest-segment projection and the 1.8/2.2 m thresholds ambiguous.
inline bool corridor_self_intersects(const Route& route, double clearance) {
  const auto& wp = route.waypoints;
  const auto& cum = route.cumulative_arclength;
  constexpr double kArcWindow = 12.0;
  for (size_t i = 0; i + 1 < wp.size(); ++i) {
    for (size_t j = i + 1; j + 1 < wp.size(); ++j) {
      if (cum[j] - cum[i + 1] < kArcWindow) continue;
      if (segment_distance(wp[i], wp[i + 1], wp[j], wp[j + 1]) < clearance)
        return true;
    }
  }
  return false;
}

inline Route generate_route(Rng& rng, const GeneratorParams& p, const Vec2& origin) {
  const int n_segments =
      p.segments_min + static_cast<int>(rng.index(p.segments_max - p.segments_min + 1));
  double heading = rng.uniform(0.0, 2.0 * kPi);
  Vec2 pos = origin;
  std::vector<Vec2> wps{pos};
  double prev_turn = 0.0;
  for (int s = 0; s < n_segments; ++s) {
    const double len = rng.uniform(p.segment_len_min, p.segment_len_max);
    const int steps = std::max(1, static_cast<int>(std::ceil(len / p.subdivide_step)));
    const double step_len = len / steps;
    for (int k = 0; k < steps; ++k) {
      pos = pos + Vec2{std::cos(heading), std::sin(heading)} * step_len;
      wps.push_back(pos);
    }
    if (s + 1 < n_segments) {
      double turn = rng.uniform(p.turn_abs_min, p.turn_abs_max);
      double sign = rng.uniform() < 0.5 ? 1.0 : -1.0;
      // Avoid hairpins: consecutive same-sign corners summing past ~70 deg
      // flip to the other side.
      if (sign * prev_turn > 0.0 && std::abs(prev_turn) + turn > 1.2) sign = -sign;
      prev_turn = sign * turn;
      heading += prev_turn;
    }
  }
  // Overrun past the goal so past-goal overshoot is observable in rho.
  const int overrun_steps =
      std::max(1, static_cast<int>(std::ceil(p.goal_overrun / p.subdivide_step)));
  const double overrun_portion = p.goal_overrun / overrun_steps;
  const Pose2 goal{pos, heading};
  for (int k = 0; k < overrun_steps; ++k) {
    pos = pos + Vec2{std::cos(heading), std::sin(heading)} * overrun_portion;
    wps.push_back(pos);
  }
  const Vec2 first_dir = wps[1] - wps[0];
  const Pose2 start{wps[0], std::atan2(first_dir.y, first_dir.x)};
  return make_route(std::move(wps), p.lane_half_width, start, goal);
}

}  // namespace detail

// Deterministic town generation. Routes whose corridors self-intersect are
// regenerated from a perturbed sub-seed a bounded number of times.
inline TownSpec generate_town(uint64_t generator_seed, const GeneratorParams& params) {
  params.validate();
  TownSpec town;
  town.generator_seed = generator_seed;
  town.lane_half_width = params.lane_half_width;
  town.town_id = params.preset_name + "-" + std::to_string(generator_seed);

  // Distant stretches must stay out of each other's event band (lane width
  // plus the 2.2 m off-road threshold) so nearest-segment projection is
  // unambiguous wherever the thresholds matter.
  const double clearance = 2.0 * params.lane_half_width + 2.6;
  const int grid_cols = 4;
  for (int r = 0; r < params.route_count; ++r) {
    const Vec2 origin{params.route_cell_spacing * (r % grid_cols),
                      params.route_cell_spacing * (r / grid_cols)};
    bool placed = false;
    for (int attempt = 0; attempt <= params.max_regen_retries; ++attempt) {
      Rng rng = Rng::derive(generator_seed,
                            fnv1a64(params.preset_name) ^
                                splitmix64(0x1000u + r) ^ splitmix64(attempt));
      Route route = detail::generate_route(rng, params, origin);
      if (!detail::corridor_self_intersects(route, clearance)) {
        town.routes.push_back(std::move(route));
        placed = true;
        break;
      }
    }
    MT_REQUIRE(placed, "route generation exhausted retries (self-intersecting corridor)");
  }

  Rng obs_rng = Rng::derive(generator_seed, fnv1a64(params.preset_name) ^ 0xabcdu);
  for (int r = 0; r < params.route_count; ++r) {
    const Route& route = town.routes[r];
    for (int o = 0; o < params.obstacles_per_route; ++o) {
      for (int attempt = 0; attempt < 20; ++attempt) {
        const double s = obs_rng.uniform(8.0, std::max(9.0, route.total_length() - 8.0));
        const double radius =
            obs_rng.uniform(params.obstacle_radius_min, params.obstacle_radius_max);
        const double gap = obs_rng.uniform(params.obstacle_gap_min, params.obstacle_gap_max);
        const double side = obs_rng.uniform() < 0.5 ? 1.0 : -1.0;
        // Point and left-normal at arclength s.
        size_t seg = 1;
        while (seg + 1 < route.cumulative_arclength.size() &&
               route.cumulative_arclength[seg] < s)
          ++seg;
        const Vec2 a = route.waypoints[seg - 1];
        const Vec2 b = route.waypoints[seg];
        const double seg_len = (b - a).norm();
        const double t = (s - route.cumulative_arclength[seg - 1]) / seg_len;
        const Vec2 point = a + (b - a) * t;
        const Vec2 tangent = (b - a) * (1.0 / seg_len);
        const Vec2 normal{-tangent.y, tangent.x};
        Obstacle obstacle{point + normal * (side * (params.lane_half_width + radius + gap)),
                          radius};
        bool clear = true;
        for (const Route& other : town.routes) {
          const auto proj = project_to_route(obstacle.center, other);
          if (std::abs(proj.d_lat) < params.lane_half_width + obstacle.radius + 0.05) {
            clear = false;
            break;
          }
        }
        if (clear) {
          town.obstacles.push_back(obstacle);
          break;
        }
      }
    }
  }
  return town;
}

// ---------------------------------------------------------------------------
// Plain-text serialization (format "minitown-town v1" / "minitown-route v1").

namespace detail {
inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace detail

inline void write_route(std::ostream& os, const Route& r) {
  using detail::fmt_double;
  os << "lane_half_width " << fmt_double(r.lane_half_width) << "\n";
  os << "start " << fmt_double(r.start_pose.position.x) << " "
     << fmt_double(r.start_pose.position.y) << " " << fmt_double(r.start_pose.heading)
     << "\n";
  os << "goal " << fmt_double(r.goal_pose.position.x) << " "
     << fmt_double(r.goal_pose.position.y) << " " << fmt_double(r.goal_pose.heading)
     << "\n";
  os << "waypoints " << r.waypoints.size() << "\n";
  for (const auto& w : r.waypoints)
    os << fmt_double(w.x) << " " << fmt_double(w.y) << "\n";
}

inline Route read_route(std::istream& is) {
  std::string key;
  double half_width;
  Pose2 start, goal;
  size_t n = 0;
  is >> key >> half_width;
  MT_REQUIRE(key == "lane_half_width", "route record: expected lane_half_width");
  is >> key >> start.position.x >> start.position.y >> start.heading;
  MT_REQUIRE(key == "start", "route record: expected start");
  is >> key >> goal.position.x >> goal.position.y >> goal.heading;
  MT_REQUIRE(key == "goal", "route record: expected goal");
  is >> key >> n;
  MT_REQUIRE(key == "waypoints" && n >= 2, "route record: expected waypoints");
  std::vector<Vec2> wps(n);
  for (auto& w : wps) is >> w.x >> w.y;
  MT_REQUIRE(!is.fail(), "route record: truncated waypoint list");
  return make_route(std::move(wps), half_width, start, goal);
}

inline void save_town(const TownSpec& town, const std::string& path) {
  std::ofstream os(path);
  MT_REQUIRE(os.good(), "cannot open town file for writing: " + path);
  os << "minitown-town v1\n";
  os << "id " << town.town_id << "\n";
  os << "seed " << town.generator_seed << "\n";
  os << "routes " << town.routes.size() << "\n";
  for (const auto& r : town.routes) write_route(os, r);
  os << "obstacles " << town.obstacles.size() << "\n";
  for (const auto& o : town.obstacles)
    os << detail::fmt_double(o.center.x) << " " << detail::fmt_double(o.center.y) << " "
       << detail::fmt_double(o.radius) << "\n";
}

inline TownSpec load_town(const std::string& path) {
  std::ifstream is(path);
  MT_REQUIRE(is.good(), "cannot open town file: " + path);
  std::string magic, version, key;
  is >> magic >> version;
  MT_REQUIRE(magic == "minitown-town" && version == "v1",
             "unsupported town file format: " + path);
  TownSpec town;
  size_t n_routes = 0, n_obstacles = 0;
  is >> key >> town.town_id;
  MT_REQUIRE(key == "id", "town file: expected id");
  is >> key >> town.generator_seed;
  MT_REQUIRE(key == "seed", "town file: expected seed");
  is >> key >> n_routes;
  MT_REQUIRE(key == "routes", "town file: expected routes");
  for (size_t i = 0; i < n_routes; ++i) town.routes.push_back(read_route(is));
  MT_REQUIRE(!town.routes.empty(), "town file: no routes");
  town.lane_half_width = town.routes.front().lane_half_width;
  is >> key >> n_obstacles;
  MT_REQUIRE(key == "obstacles", "town file: expected obstacles");
  for (size_t i = 0; i < n_obstacles; ++i) {
    Obstacle o;
    is >> o.center.x >> o.center.y >> o.radius;
    town.obstacles.push_back(o);
  }
  MT_REQUIRE(!is.fail(), "town file: truncated");
  return town;
}

}  // namespace minitown
