#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tdmpc/checkpoint.hpp"
#include "tdmpc/env.hpp"
#include "tdmpc/objectives.hpp"
#include "tdmpc/planner.hpp"
#include "tdmpc/replay.hpp"
#include "tdmpc/run_config.hpp"

namespace tdmpc {

/// Raised after too many consecutive non-finite losses; a checkpoint has been written.
class Diverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kMaxBadUpdates = 10;

struct EvalResult {
  double mean = 0.0;
  double std = 0.0;  // population
  std::vector<double> returns;
};

EvalResult summarize_returns(std::vector<double> returns);

/// Runs `episodes` episodes through run_episode(index) and summarises them.
EvalResult evaluate_episodes(const std::function<double(std::size_t)>& run_episode,
                             std::size_t episodes);

/// Planner-in-the-loop episodes with the epsilon floor at its final value
/// and greedy action choice.
EvalResult evaluate(const ToldModel& model, const ToldParams& theta, const EnvSpec& env,
                    const HyperParams& hp, std::size_t episodes, std::uint64_t seed,
                    std::size_t threads = 1);

/// Uniform random actions, for the baseline.
EvalResult evaluate_random(const EnvSpec& env, std::size_t episodes, std::uint64_t seed);

struct LossLog {
  double reward = 0.0;
  double value = 0.0;
  double consistency = 0.0;
  double reconstruction = 0.0;
  double total = 0.0;
  double policy = 0.0;
};

struct MetricsRow {
  std::int64_t env_step = 0;
  std::optional<double> episode_return;
  std::optional<LossLog> losses;
  std::optional<double> eval_mean;
  std::optional<double> eval_std;
  double wall_seconds = 0.0;
};

const char* metrics_header();
std::string format_metrics_row(const MetricsRow& row);
/// Parses a metrics.csv written by the trainer.
std::vector<MetricsRow> read_metrics(const std::string& path);

/// Collects the lambda-weighted per-component sums of one update.
LossLog loss_log(const LossBreakdown& b, const HyperParams& hp);

/// Seeds of the namespaced random streams of a run.
struct RunStreams {
  std::uint64_t init, env, explore, planner, replay, augment, eval;
  explicit RunStreams(std::uint64_t seed);
};

/// Randomly shift every sample (and step) of the encoder inputs.
void augment_batch(TrainBatch& batch, Rng& rng, int max_shift = 4);

class Trainer {
 public:
  /// `init` replaces the freshly initialised parameters (target copies it).
  explicit Trainer(RunConfig cfg, const ToldParams* init = nullptr);

  /// Continue a run from out_dir/resume.bin written by save().
  static Trainer resume(RunConfig cfg);

  /// Train until total_env_steps, writing metrics, config.resolved and checkpoints.
  void run();
  /// Train until env_step reaches `target` (<= total_env_steps).
  void run_until(std::size_t target);

  /// Writes checkpoint.bin and resume.bin under out_dir.
  void save() const;

  const RunConfig& config() const { return cfg_; }
  const ToldModel& model() const { return model_; }
  const ToldParams& params() const { return theta_; }
  const TargetParams& target() const { return target_; }
  const ToldOptimizer& optimizer() const { return opt_; }
  std::size_t env_step() const { return env_step_; }
  std::size_t updates() const { return updates_; }
  std::size_t skipped_updates() const { return skipped_; }
  const std::vector<MetricsRow>& rows() const { return rows_; }
  /// Per-update loss components in order.
  const std::vector<LossLog>& update_log() const { return update_log_; }
  const ReplayBuffer& buffer() const { return buffer_; }

  /// Optional hook run after every gradient update.
  std::function<void(const Trainer&, const LossResult&)> on_update;

 private:
  void open_outputs();
  void begin_episode();
  void env_step_once();
  void update_once();
  void emit(MetricsRow row);
  double elapsed() const;

  RunConfig cfg_;
  RunStreams streams_;
  ToldModel model_;
  ToldParams theta_;
  TargetParams target_;
  ToldOptimizer opt_;
  Environment env_;
  ReplayBuffer buffer_;
  std::size_t threads_;

  Tensor obs_;
  std::optional<Tensor> warm_;
  std::size_t env_step_ = 0;
  std::size_t updates_ = 0;
  std::size_t skipped_ = 0;
  std::size_t bad_streak_ = 0;
  std::size_t episode_ = 0;
  double episode_return_ = 0.0;
  LossLog loss_sum_;
  std::size_t loss_count_ = 0;
  std::vector<MetricsRow> rows_;
  std::vector<LossLog> update_log_;
  bool outputs_open_ = false;
  std::uint64_t metrics_bytes_ = 0;
  double elapsed_before_ = 0.0;
  std::chrono::steady_clock::time_point started_;
};

/// Reward-free world-model pretraining: random actions, updates of the
/// encoder, dynamics and decoder on c3 * consistency + c4 * reconstruction.
/// `steps` environment steps are collected; one update follows each step
/// once a full slice is stored. Throws ConfigError when c4 is 0.
ToldParams pretrain_world_model(const RunConfig& cfg, std::size_t steps);

}  // namespace tdmpc
