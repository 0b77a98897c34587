#pragma once

// The closed-loop environment: kinematic vehicle, edge-triggered event
// detection, the shaped task reward, the termination state machine and
// observation rendering, at a fixed 20 Hz control step.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "minitown/actions.hpp"
#include "minitown/geometry.hpp"
#include "minitown/render.hpp"
#include "minitown/town.hpp"

namespace minitown {

struct VehicleParams {
  double wheelbase = 2.9;    // m
  double steer_gain = 1.0;   // rad of wheel angle per unit steer
  double a_max = 4.0;        // m/s^2
  double b_max = 8.0;        // m/s^2
  double c_drag = 0.1;       // 1/s
  double v_max = 30.0;       // m/s
  double collision_radius = 1.0;
};

struct VehicleState {
  Vec2 position;
  double heading = 0.0;  // radians
  double speed = 0.0;    // m/s, non-negative
  double wheelbase = 2.9;

  Vec2 velocity() const { return Vec2{std::cos(heading), std::sin(heading)} * speed; }
  Pose2 pose() const { return {position, heading}; }
};

// Kinematic bicycle step. Speed is integrated first and the position advances
// at the updated heading.
inline VehicleState step_vehicle(const VehicleState& state, double throttle,
                                 double brake, double steer, double dt,
                                 const VehicleParams& p = {}) {
  VehicleState next = state;
  next.speed = clip(
      state.speed + (p.a_max * throttle - p.b_max * brake - p.c_drag * state.speed) * dt,
      0.0, p.v_max);
  const double wheel_angle = p.steer_gain * steer;
  next.heading = state.heading + (next.speed / state.wheelbase) * std::tan(wheel_angle) * dt;
  next.position =
      state.position + Vec2{std::cos(next.heading), std::sin(next.heading)} * (next.speed * dt);
  return next;
}

enum class SlowState { none, slow, stuck_timeout };

struct RewardInputs {
  double delta_rho = 0.0;
  double d_lat = 0.0;  // magnitude
  bool wrong_lane = false;
  bool off_road = false;
  double e_head = 0.0;  // normalized, [0,1]
  double v_par = 0.0;
  double v_perp = 0.0;
  int n_inv = 0;
  int n_col = 0;
  bool at_goal = false;
  SlowState slow_state = SlowState::none;
};

// The per-step task reward. Coefficients are fixed; the slow term is
// 0 / -2 / -50 by slow_state.
inline double compute_reward(const RewardInputs& in) {
  const double r_slow = in.slow_state == SlowState::none ? 0.0
                        : in.slow_state == SlowState::slow ? -2.0
                                                           : -50.0;
  const double d = std::min(in.d_lat, 1.5);
  const double e = std::min(in.e_head, 0.5);
  double r = 50.0 * in.delta_rho;
  r -= 10.0 * d * d;
  r -= 20.0 * (in.wrong_lane ? 1.0 : 0.0);
  r -= 50.0 * e * e;
  r -= std::abs(in.v_par - 5.0) + 2.0 * std::abs(in.v_perp) +
       2.0 * (in.v_par < -0.5 ? 1.0 : 0.0);
  r += r_slow;
  r -= 20.0 * (in.off_road ? 1.0 : 0.0);
  r -= 5.0 * in.n_inv;
  r -= 500.0 * in.n_col;
  r += 200.0 * (in.at_goal ? 1.0 : 0.0);
  r -= 0.05;
  return r;
}

struct EventFlags {
  int b_col = 0;      // new-collision step event (0/1)
  int b_lane = 0;     // new lane-invasion step event (0/1)
  int n_col = 0;      // number of newly contacted obstacles this step
  bool wrong_lane = false;
  bool off_road = false;
};

// Edge-triggered event detection. Lane invasions fire on inside->outside
// crossings of the lane boundary and re-arm when back inside; collisions fire
// on first disc overlap per obstacle and re-arm after separation.
class EventDetector {
 public:
  EventDetector() = default;
  EventDetector(const TownSpec& town, const Route& route, const VehicleState& state,
                const VehicleParams& vp, double wrong_lane_thresh, double offroad_thresh)
      : wrong_lane_thresh_(wrong_lane_thresh), offroad_thresh_(offroad_thresh) {
    const auto proj = project_to_route(state.position, route);
    outside_lane_ = std::abs(proj.d_lat) > route.lane_half_width;
    in_contact_.assign(town.obstacles.size(), false);
    for (size_t i = 0; i < town.obstacles.size(); ++i)
      in_contact_[i] = overlaps(town.obstacles[i], state, vp);
  }

  EventFlags detect(const RouteProjection& proj, const VehicleState& state,
                    const TownSpec& town, const Route& route, const VehicleParams& vp) {
    EventFlags out;
    const double d = std::abs(proj.d_lat);
    out.off_road = d > std::max(route.lane_half_width, offroad_thresh_);
    out.wrong_lane = d > wrong_lane_thresh_ && !out.off_road;

    const bool outside = d > route.lane_half_width;
    if (outside && !outside_lane_) out.b_lane = 1;
    outside_lane_ = outside;

    for (size_t i = 0; i < town.obstacles.size(); ++i) {
      const bool contact = overlaps(town.obstacles[i], state, vp);
      if (contact && !in_contact_[i]) ++out.n_col;
      in_contact_[i] = contact;
    }
    out.b_col = out.n_col > 0 ? 1 : 0;
    return out;
  }

 private:
  static bool overlaps(const Obstacle& o, const VehicleState& s, const VehicleParams& vp) {
    return (o.center - s.position).norm() <= o.radius + vp.collision_radius;
  }

  double wrong_lane_thresh_ = 1.8;
  double offroad_thresh_ = 2.2;
  bool outside_lane_ = false;
  std::vector<bool> in_contact_;
};

enum class TerminationStatus {
  running,
  success,
  collision,
  offroad,
  wrong_lane,
  stuck,
  past_goal,
  timeout,
};

inline const char* to_string(TerminationStatus s) {
  switch (s) {
    case TerminationStatus::running: return "running";
    case TerminationStatus::success: return "success";
    case TerminationStatus::collision: return "collision";
    case TerminationStatus::offroad: return "offroad";
    case TerminationStatus::wrong_lane: return "wrong_lane";
    case TerminationStatus::stuck: return "stuck";
    case TerminationStatus::past_goal: return "past_goal";
    case TerminationStatus::timeout: return "timeout";
  }
  return "?";
}

struct TerminationParams {
  double goal_radius = 2.0;
  double overshoot_margin = 5.0;
  int grace_steps = 20;       // lane-based causes are suppressed in this window
  int offroad_steps = 20;     // 1.0 s at 20 Hz
  int wrong_lane_steps = 60;  // 3.0 s
  int stuck_steps = 200;      // 10 s
  int timeout_steps = 2000;
  double slow_speed = 1.0 / 3.6;  // 1 km/h in m/s
};

// Consecutive-condition counters plus the grace window. Lane-based counters
// only accumulate once the grace window has passed, so the minimal triggering
// sequences are exactly offroad_steps / wrong_lane_steps after it.
class TerminationTracker {
 public:
  explicit TerminationTracker(TerminationParams params = {}, double goal_arclength = 0.0)
      : params_(params), goal_arclength_(goal_arclength) {}

  // Called once per env step, after events for that step are known.
  // step_index is 1-based (first env step = 1).
  TerminationStatus update(int step_index, const RouteProjection& proj,
                           const EventFlags& events, double speed) {
    if (speed < params_.slow_speed) {
      ++slow_run_;
    } else {
      slow_run_ = 0;
    }
    if (step_index > params_.grace_steps) {
      offroad_run_ = events.off_road ? offroad_run_ + 1 : 0;
      wrong_lane_run_ = events.wrong_lane ? wrong_lane_run_ + 1 : 0;
    }

    // Precedence when several causes fire on the same step.
    if (proj.dist_to_goal < params_.goal_radius) return TerminationStatus::success;
    if (events.n_col > 0) return TerminationStatus::collision;
    if (offroad_run_ >= params_.offroad_steps) return TerminationStatus::offroad;
    if (wrong_lane_run_ >= params_.wrong_lane_steps) return TerminationStatus::wrong_lane;
    if (slow_run_ >= params_.stuck_steps) return TerminationStatus::stuck;
    if (proj.rho > goal_arclength_ + params_.overshoot_margin)
      return TerminationStatus::past_goal;
    if (step_index >= params_.timeout_steps) return TerminationStatus::timeout;
    return TerminationStatus::running;
  }

  // Slow-state for the reward on this step; valid after update().
  SlowState slow_state() const {
    if (slow_run_ == 0) return SlowState::none;
    return slow_run_ >= params_.stuck_steps ? SlowState::stuck_timeout : SlowState::slow;
  }

  int slow_run() const { return slow_run_; }

 private:
  TerminationParams params_;
  double goal_arclength_ = 0.0;
  int offroad_run_ = 0;
  int wrong_lane_run_ = 0;
  int slow_run_ = 0;
};

struct Observation {
  std::vector<float> image;  // H x W x 3 in [0,1]
  int image_size = 64;
  int b_col = 0;
  int b_lane = 0;
};

struct EnvParams {
  double dt = 0.05;  // fixed 20 Hz control step
  RenderParams render;
  VehicleParams vehicle;
  TerminationParams termination;
  double wrong_lane_thresh = 1.8;
  double offroad_thresh = 2.2;
};

struct StepInfo {
  RewardInputs reward_inputs;
  RouteProjection projection;
  EventFlags events;
  VehicleState vehicle;
};

struct StepResult {
  Observation observation;
  double reward = 0.0;
  TerminationStatus status = TerminationStatus::running;
  StepInfo info;
};

// One instance drives one episode at a time; instances are independent.
class MiniTownEnv {
 public:
  MiniTownEnv(TownSpec town, EnvParams params = {})
      : town_(std::move(town)), params_(params) {
    MT_REQUIRE(!town_.routes.empty(), "town has no routes");
  }

  const TownSpec& town() const { return town_; }
  const EnvParams& params() const { return params_; }
  int route_index() const { return route_index_; }
  const VehicleState& vehicle() const { return vehicle_; }
  int steps_taken() const { return step_index_; }
  bool episode_active() const { return active_; }

  Observation reset(int route_index) {
    MT_REQUIRE(route_index >= 0 && route_index < static_cast<int>(town_.routes.size()),
               "route index out of range");
    route_index_ = route_index;
    const Route& route = town_.routes[route_index_];
    vehicle_ = VehicleState{route.start_pose.position, route.start_pose.heading, 0.0,
                            params_.vehicle.wheelbase};
    goal_arclength_ = project_to_route(route.goal_pose.position, route).rho;
    tracker_ = TerminationTracker(params_.termination, goal_arclength_);
    detector_ = EventDetector(town_, route, vehicle_, params_.vehicle,
                              params_.wrong_lane_thresh, params_.offroad_thresh);
    prev_proj_ = project_to_route(vehicle_.position, route);
    step_index_ = 0;
    active_ = true;
    return make_observation(0, 0);
  }

  StepResult step(int action_index) {
    MT_REQUIRE(active_, "env_step called on a terminated episode");
    const Route& route = town_.routes[route_index_];
    const Control control = action_space().control_for(action_index);
    vehicle_ = step_vehicle(vehicle_, control.throttle, control.brake, control.steer,
                            params_.dt, params_.vehicle);
    ++step_index_;

    const RouteProjection proj = project_to_route(vehicle_.position, route);
    const EventFlags events =
        detector_.detect(proj, vehicle_, town_, route, params_.vehicle);
    const TerminationStatus status =
        tracker_.update(step_index_, proj, events, vehicle_.speed);

    RewardInputs in;
    in.delta_rho = progress_delta(proj.rho, prev_proj_.rho);
    in.d_lat = std::abs(proj.d_lat);
    in.wrong_lane = events.wrong_lane;
    in.off_road = events.off_road;
    in.e_head = heading_error(vehicle_.heading, proj.tangent_heading);
    const auto [v_par, v_perp] = lane_frame_velocity(vehicle_.velocity(), proj.tangent_heading);
    in.v_par = v_par;
    in.v_perp = v_perp;
    in.n_inv = events.b_lane;
    in.n_col = events.n_col;
    in.at_goal = proj.dist_to_goal < params_.termination.goal_radius;
    in.slow_state = tracker_.slow_state();

    StepResult out;
    out.reward = compute_reward(in);
    out.status = status;
    out.observation = make_observation(events.b_col, events.b_lane);
    out.info = StepInfo{in, proj, events, vehicle_};
    prev_proj_ = proj;
    if (status != TerminationStatus::running) active_ = false;
    return out;
  }

 private:
  Observation make_observation(int b_col, int b_lane) const {
    Observation obs;
    obs.image_size = params_.render.image_size;
    obs.image = render_observation(vehicle_.pose(), town_, town_.routes[route_index_],
                                   params_.render);
    obs.b_col = b_col;
    obs.b_lane = b_lane;
    return obs;
  }

  TownSpec town_;
  EnvParams params_;
  int route_index_ = 0;
  VehicleState vehicle_;
  RouteProjection prev_proj_;
  EventDetector detector_;
  TerminationTracker tracker_;
  double goal_arclength_ = 0.0;
  int step_index_ = 0;
  bool active_ = false;
};

}  // namespace minitown
