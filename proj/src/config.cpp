#include "tdmpc/config.hpp"

#include <cmath>

namespace tdmpc {

namespace {

void require(bool ok, const char* key, const std::string& why) {
  if (!ok) throw ConfigError(key, why);
}

}  // namespace

void HyperParams::validate() const {
  require(gamma >= 0.0 && gamma < 1.0, "gamma", "must lie in [0,1)");
  require(lambda > 0.0 && lambda <= 1.0, "lambda", "must lie in (0,1]");
  require(zeta >= 0.0 && zeta < 1.0, "zeta", "must lie in [0,1)");
  require(tau > 0.0 && std::isfinite(tau), "tau", "must be positive");
  require(epsilon.start >= 0.0, "eps_start", "must be nonnegative");
  require(epsilon.end >= 0.0, "eps_end", "must be nonnegative");
  require(epsilon.decay_steps >= 0, "eps_decay_steps", "must be nonnegative");
  require(c1 >= 0.0, "c1", "must be nonnegative");
  require(c2 >= 0.0, "c2", "must be nonnegative");
  require(c3 >= 0.0, "c3", "must be nonnegative");
  require(c4 >= 0.0, "c4", "must be nonnegative");
  require(horizon >= 1, "horizon", "must be at least 1");
  require(iterations >= 1, "iterations", "must be at least 1");
  require(num_samples >= 1, "num_samples", "must be at least 1");
  require(num_elites >= 1, "num_elites", "must be at least 1");
  require(num_elites <= num_samples + num_policy, "num_elites",
          "cannot exceed num_samples + num_policy");
  require(sigma_init >= 0.0, "sigma_init", "must be nonnegative");
  require(lr > 0.0, "lr", "must be positive");
  require(grad_clip > 0.0, "grad_clip", "must be positive");
  require(latent_dim >= 1, "latent_dim", "must be at least 1");
  require(hidden_dim >= 1, "hidden_dim", "must be at least 1");
  require(batch_size >= 1, "batch_size", "must be at least 1");
  require(per_alpha >= 0.0, "per_alpha", "must be nonnegative");
  require(per_beta >= 0.0, "per_beta", "must be nonnegative");
  require(per_eps > 0.0, "per_eps", "must be positive");
  require(buffer_capacity >= 1, "buffer_capacity", "must be at least 1");
}

const char* to_string(WeightMode mode) {
  return mode == WeightMode::exponential ? "exponential" : "literal_linear";
}

WeightMode weight_mode_from_string(const std::string& s) {
  if (s == "exponential") return WeightMode::exponential;
  if (s == "literal_linear") return WeightMode::literal_linear;
  throw ConfigError("weight_mode", "unknown value '" + s + "'");
}

}  // namespace tdmpc
