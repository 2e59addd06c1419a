#include "tdmpc/env.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "tdmpc/config.hpp"

namespace tdmpc {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kReacherAccel = 4.0;
constexpr double kReacherDrag = 1.0;
constexpr double kReacherMaxSpeed = 2.0;

bool is_pendulum(EnvName n) { return n != EnvName::point_reacher; }

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0.0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

// Coverage of a pixel centre at distance d from a shape edge of half-width w.
double coverage(double d, double w) { return std::clamp(w + 0.5 - d, 0.0, 1.0); }

}  // namespace

const char* to_string(EnvName name) {
  switch (name) {
    case EnvName::pendulum_swingup: return "pendulum_swingup";
    case EnvName::point_reacher: return "point_reacher";
    case EnvName::pendulum_swingup_sparse: return "pendulum_swingup_sparse";
  }
  return "?";
}

EnvName env_name_from_string(const std::string& s) {
  for (EnvName n : {EnvName::pendulum_swingup, EnvName::point_reacher,
                    EnvName::pendulum_swingup_sparse})
    if (s == to_string(n)) return n;
  throw ConfigError("env", "unknown environment '" + s + "'");
}

std::size_t EnvSpec::action_dim() const { return is_pendulum(name) ? 1 : 2; }
std::size_t EnvSpec::state_dim() const { return is_pendulum(name) ? 3 : 6; }

Shape EnvSpec::obs_shape() const {
  if (obs_mode == ObsMode::image) return {frame_stack, resolution, resolution};
  return {state_dim()};
}

void EnvSpec::validate(std::size_t horizon) const {
  if (episode_length < horizon + 1)
    throw ConfigError("episode_length", "must be at least horizon + 1");
  if (damping < 0.0) throw ConfigError("damping", "must be >= 0");
  if (obs_mode == ObsMode::image) {
    if (resolution < 16) throw ConfigError("resolution", "must be >= 16 in image mode");
    if (frame_stack < 1) throw ConfigError("frame_stack", "must be >= 1");
  }
}

EnvSpec make_env_spec(EnvName name, ObsMode mode, std::size_t resolution) {
  EnvSpec s;
  s.name = name;
  s.obs_mode = mode;
  s.resolution = resolution;
  if (name == EnvName::point_reacher) s.view.scale = 0.45;
  return s;
}

double wrap_angle(double a) {
  double r = std::fmod(a + kPi, 2.0 * kPi);
  if (r <= 0.0) r += 2.0 * kPi;
  return r - kPi;
}

double pendulum_energy(const EnvState& s) {
  return 0.5 * s.theta_dot * s.theta_dot + kGravity * std::cos(s.theta);
}

double physics_step(EnvState& s, const Tensor& action, const EnvSpec& spec) {
  if (action.numel() != spec.action_dim())
    throw ShapeError("action must have " + std::to_string(spec.action_dim()) + " entries, got " +
                     shape_str(action.shape));
  for (double v : action.data)
    if (std::isnan(v)) throw std::domain_error("NaN action");
  const double dt = kPendulumDt;
  if (is_pendulum(spec.name)) {
    const double a = std::clamp(action.data[0], -1.0, 1.0);
    const double acc = kGravity * std::sin(s.theta) + (kTorque * a - spec.damping * s.theta_dot);
    s.theta_dot = std::clamp(s.theta_dot + dt * acc, -kMaxSpeed, kMaxSpeed);
    s.theta = wrap_angle(s.theta + dt * s.theta_dot);
    const double ang = s.theta;
    if (spec.name == EnvName::pendulum_swingup_sparse) return std::abs(ang) < 0.15 ? 1.0 : 0.0;
    return -(ang * ang + 0.1 * s.theta_dot * s.theta_dot + 0.001 * a * a);
  }
  for (int i = 0; i < 2; ++i) {
    const double a = std::clamp(action.data[i], -1.0, 1.0);
    double v = s.velocity[i] + dt * (kReacherAccel * a - kReacherDrag * s.velocity[i]);
    v = std::clamp(v, -kReacherMaxSpeed, kReacherMaxSpeed);
    double p = s.agent[i] + dt * v;
    if (p > 1.0 || p < -1.0) {
      p = std::clamp(p, -1.0, 1.0);
      v = 0.0;
    }
    s.velocity[i] = v;
    s.agent[i] = p;
  }
  const double dx = s.agent[0] - s.goal[0], dy = s.agent[1] - s.goal[1];
  return -std::sqrt(dx * dx + dy * dy);
}

Tensor state_observation(const EnvState& s, const EnvSpec& spec) {
  if (is_pendulum(spec.name))
    return Tensor({3}, {std::cos(s.theta), std::sin(s.theta), s.theta_dot / kMaxSpeed});
  return Tensor({6}, {s.agent[0], s.agent[1], s.goal[0], s.goal[1], s.velocity[0], s.velocity[1]});
}

std::array<double, 2> to_canvas(double wx, double wy, const EnvSpec& spec) {
  const double R = static_cast<double>(spec.resolution);
  return {spec.view.center_x * R + wx * spec.view.scale * R,
          spec.view.center_y * R - wy * spec.view.scale * R};
}

Tensor render_frame(const EnvState& s, const EnvSpec& spec) {
  const std::size_t R = spec.resolution;
  const double Rd = static_cast<double>(R);
  Tensor img({R, R}, 0.0);
  if (is_pendulum(spec.name)) {
    const auto pivot = to_canvas(0.0, 0.0, spec);
    const auto tip = to_canvas(std::sin(s.theta), std::cos(s.theta), spec);
    const double half = 0.75;
    for (std::size_t y = 0; y < R; ++y)
      for (std::size_t x = 0; x < R; ++x) {
        const double d = segment_distance(x + 0.5, y + 0.5, pivot[0], pivot[1], tip[0], tip[1]);
        img.data[y * R + x] = coverage(d, half);
      }
    return img;
  }
  const double radius = std::max(1.0, Rd / 16.0);
  const auto goal = to_canvas(s.goal[0], s.goal[1], spec);
  const auto agent = to_canvas(s.agent[0], s.agent[1], spec);
  for (std::size_t y = 0; y < R; ++y)
    for (std::size_t x = 0; x < R; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double dg = std::hypot(px - goal[0], py - goal[1]);
      const double da = std::hypot(px - agent[0], py - agent[1]);
      img.data[y * R + x] = std::max(0.5 * coverage(dg, radius), coverage(da, radius));
    }
  return img;
}

Tensor render_observation(const EnvState& s, const EnvSpec& spec) {
  const std::size_t R = spec.resolution, k = spec.frame_stack;
  Tensor out({k, R, R});
  const Tensor current = s.frames.empty() ? render_frame(s, spec) : Tensor();
  for (std::size_t i = 0; i < k; ++i) {
    const Tensor* f = &current;
    if (!s.frames.empty()) {
      // pad with the oldest frame when fewer than k are held
      const std::size_t have = s.frames.size();
      const std::size_t idx = i + have >= k ? i + have - k : 0;
      f = &s.frames[idx];
    }
    std::copy(f->data.begin(), f->data.end(), out.data.begin() + i * R * R);
  }
  return out;
}

namespace {

Tensor observe(EnvState& s, const EnvSpec& spec) {
  if (spec.obs_mode == ObsMode::state) return state_observation(s, spec);
  s.frames.push_back(render_frame(s, spec));
  while (s.frames.size() > spec.frame_stack) s.frames.pop_front();
  return render_observation(s, spec);
}

}  // namespace

std::pair<EnvState, Tensor> reset(const EnvSpec& spec, Rng& rng) {
  EnvState s;
  if (is_pendulum(spec.name)) {
    s.theta = rng.uniform(-kPi, kPi);
    s.theta_dot = rng.uniform(-1.0, 1.0);
  } else {
    s.goal = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
  }
  Tensor obs = observe(s, spec);
  return {std::move(s), std::move(obs)};
}

StepResult step(const EnvState& state, const Tensor& action, const EnvSpec& spec) {
  StepResult r{state, Tensor(), 0.0, false};
  const std::size_t repeat = spec.repeat();
  for (std::size_t i = 0; i < repeat; ++i) r.reward += physics_step(r.state, action, spec);
  r.reward /= static_cast<double>(repeat);
  r.state.step_count += 1;
  r.done = r.state.step_count >= spec.episode_length;
  r.obs = observe(r.state, spec);
  return r;
}

Tensor shift_image(const Tensor& img, int dx, int dy) {
  if (img.rank() < 2) throw ShapeError("shift_image needs [..., H, W], got " + shape_str(img.shape));
  const std::size_t H = img.dim(img.rank() - 2), W = img.dim(img.rank() - 1);
  const std::size_t planes = img.numel() / (H * W);
  Tensor out(img.shape);
  const int h = static_cast<int>(H), w = static_cast<int>(W);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = img.data.data() + p * H * W;
    double* dst = out.data.data() + p * H * W;
    for (int y = 0; y < h; ++y) {
      const int sy = std::clamp(y - dy, 0, h - 1);
      for (int x = 0; x < w; ++x) dst[y * w + x] = src[sy * w + std::clamp(x - dx, 0, w - 1)];
    }
  }
  return out;
}

Tensor shift_augment(const Tensor& img, Rng& rng, int max_shift) {
  const int dx = static_cast<int>(rng.uniform_int(-max_shift, max_shift));
  const int dy = static_cast<int>(rng.uniform_int(-max_shift, max_shift));
  return shift_image(img, dx, dy);
}

Tensor Environment::reset(Rng& rng) {
  auto [s, obs] = tdmpc::reset(spec_, rng);
  state_ = std::move(s);
  return obs;
}

StepResult Environment::step(const Tensor& action) {
  StepResult r = tdmpc::step(state_, action, spec_);
  state_ = r.state;
  return r;
}

}  // namespace tdmpc
