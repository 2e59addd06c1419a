#pragma once

#include <array>
#include <cstddef>
#include <deque>
#include <string>
#include <utility>

#include "tdmpc/rng.hpp"
#include "tdmpc/tensor.hpp"
#include "tdmpc/told.hpp"

namespace tdmpc {

enum class EnvName { pendulum_swingup, point_reacher, pendulum_swingup_sparse };

const char* to_string(EnvName name);
EnvName env_name_from_string(const std::string& s);

/// Where the world origin lands on the canvas (fractions of R) and how many
/// canvas widths one world unit spans.
struct RenderView {
  double center_x = 0.5;
  double center_y = 0.5;
  double scale = 0.4;
};

struct EnvSpec {
  EnvName name = EnvName::pendulum_swingup;
  ObsMode obs_mode = ObsMode::state;
  std::size_t resolution = 64;
  std::size_t frame_stack = 3;
  std::size_t action_repeat = 0;  // 0: 2 in image mode, 1 in state mode
  std::size_t episode_length = 200;  // agent steps
  double damping = 0.05;
  RenderView view;

  std::size_t repeat() const {
    return action_repeat > 0 ? action_repeat : (obs_mode == ObsMode::image ? 2 : 1);
  }
  std::size_t action_dim() const;
  std::size_t state_dim() const;
  Shape obs_shape() const;
  /// Throws ConfigError for inconsistent settings; horizon is the planner's H.
  void validate(std::size_t horizon = 1) const;
};

EnvSpec make_env_spec(EnvName name, ObsMode mode, std::size_t resolution = 64);

struct EnvState {
  double theta = 0.0;  // 0 is upright
  double theta_dot = 0.0;
  std::array<double, 2> agent{};
  std::array<double, 2> goal{};
  std::array<double, 2> velocity{};
  std::size_t step_count = 0;
  std::deque<Tensor> frames;  // image mode: oldest first
};

struct StepResult {
  EnvState state;
  Tensor obs;
  double reward = 0.0;
  bool done = false;
};

inline constexpr double kPendulumDt = 0.05;
inline constexpr double kMaxSpeed = 8.0;
inline constexpr double kGravity = 10.0;
inline constexpr double kTorque = 2.0;

/// Wraps an angle into (-pi, pi].
double wrap_angle(double a);

std::pair<EnvState, Tensor> reset(const EnvSpec& spec, Rng& rng);

/// One agent step: action_repeat physics steps, reward averaged over them.
StepResult step(const EnvState& state, const Tensor& action, const EnvSpec& spec);

/// A single physics step without observation or frame bookkeeping; returns the reward.
double physics_step(EnvState& s, const Tensor& action, const EnvSpec& spec);

double pendulum_energy(const EnvState& s);

Tensor state_observation(const EnvState& s, const EnvSpec& spec);
/// One grayscale [R, R] frame of the current state.
Tensor render_frame(const EnvState& s, const EnvSpec& spec);
/// The stacked [k, R, R] observation held in the state.
Tensor render_observation(const EnvState& s, const EnvSpec& spec);

/// Canvas coordinates (x right, y down, pixel units) of a world point.
std::array<double, 2> to_canvas(double wx, double wy, const EnvSpec& spec);

/// Translates every [R, R] plane of a [..., R, R] image by (dx, dy) pixels,
/// replicating edges.
Tensor shift_image(const Tensor& img, int dx, int dy);
/// shift_image with dx, dy drawn uniformly from {-max_shift..max_shift}.
Tensor shift_augment(const Tensor& img, Rng& rng, int max_shift = 4);

/// Stateful wrapper used by the trainer.
class Environment {
 public:
  explicit Environment(EnvSpec spec) : spec_(std::move(spec)) { spec_.validate(); }
  const EnvSpec& spec() const { return spec_; }
  Tensor reset(Rng& rng);
  StepResult step(const Tensor& action);
  const EnvState& state() const { return state_; }
  void set_state(EnvState s) { state_ = std::move(s); }

 private:
  EnvSpec spec_;
  EnvState state_;
};

}  // namespace tdmpc
