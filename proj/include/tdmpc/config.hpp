#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace tdmpc {

/// Thrown for any out-of-range or inconsistent configuration value.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& key, const std::string& why)
      : std::invalid_argument(key + ": " + why), key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

enum class WeightMode { exponential, literal_linear };

struct EpsilonSchedule {
  double start = 0.5;
  double end = 0.05;
  std::int64_t decay_steps = 15000;
};

/// Scalar knobs for losses, planning, replay and optimisation.
struct HyperParams {
  double gamma = 0.99;
  double lambda = 0.5;
  double zeta = 0.01;
  double tau = 0.5;
  EpsilonSchedule epsilon;
  double c1 = 0.5;  // reward
  double c2 = 0.1;  // value
  double c3 = 2.0;  // consistency
  double c4 = 0.25; // reconstruction
  std::size_t horizon = 5;
  std::size_t iterations = 6;
  std::size_t num_samples = 512;
  std::size_t num_policy = 24;
  std::size_t num_elites = 64;
  double sigma_init = 0.5;
  bool standardize_returns = true;
  WeightMode weight_mode = WeightMode::exponential;
  bool scale_by_horizon = false;
  double lr = 1e-3;
  double grad_clip = 10.0;
  std::size_t latent_dim = 50;
  std::size_t hidden_dim = 256;
  bool double_q = true;
  std::size_t batch_size = 128;
  double per_alpha = 0.6;
  double per_beta = 0.4;
  double per_eps = 1e-6;
  std::size_t buffer_capacity = 100000;

  /// Throws ConfigError naming the first offending field.
  void validate() const;
};

const char* to_string(WeightMode mode);
WeightMode weight_mode_from_string(const std::string& s);

}  // namespace tdmpc
