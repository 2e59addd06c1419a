#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tdmpc/config.hpp"
#include "tdmpc/env.hpp"
#include "tdmpc/told.hpp"

namespace tdmpc {

struct RunConfig {
  EnvSpec env;
  HyperParams hp;
  std::size_t total_env_steps = 30000;
  std::size_t seed_steps = 1000;
  std::size_t eval_interval = 2000;  // 0 disables periodic evaluation
  std::size_t eval_episodes = 10;
  std::size_t updates_per_env_step = 1;
  std::size_t checkpoint_interval = 0;  // 0: only the final checkpoint
  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";
  std::array<std::size_t, 3> image_channels{64, 32, 16};
  /// Random pixel shifts on encoder inputs in image mode.
  bool augment = true;
  /// When false the wall_seconds column is written as 0, so metrics files
  /// are byte-comparable across runs.
  bool wall_clock = true;
  /// Planner worker threads; 0 picks TDMPC_SRL_THREADS or the hardware count.
  std::size_t threads = 0;

  /// Throws ConfigError naming the offending key.
  void validate() const;
};

ModelConfig model_config(const RunConfig& cfg);

/// Every config key, in the order they are written.
const std::vector<std::string>& config_keys();

/// Set one key from its text value. Throws ConfigError for unknown keys or bad values.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& cfg, const std::string& key);

/// Apply `key = value` lines (with `#` comments) on top of cfg; does not validate.
void apply_config_text(RunConfig& cfg, const std::string& text);
RunConfig parse_config_text(const std::string& text);
/// Full effective configuration, one `key=value` per line.
std::string config_to_text(const RunConfig& cfg);

RunConfig load_config_file(const std::string& path);

}  // namespace tdmpc
