#pragma once

#include <optional>
#include <vector>

#include "tdmpc/config.hpp"
#include "tdmpc/rng.hpp"
#include "tdmpc/told.hpp"

namespace tdmpc {

/// Batched latent-space model the planner rolls trajectories through.
/// All tensors are [N, *]: z is [N, d], a is [N, m], rewards/values [N, 1].
class LatentModel {
 public:
  virtual ~LatentModel() = default;
  virtual std::size_t latent_dim() const = 0;
  virtual std::size_t action_dim() const = 0;
  virtual Tensor next(const Tensor& z, const Tensor& a) const = 0;
  virtual Tensor reward(const Tensor& z, const Tensor& a) const = 0;
  virtual Tensor value(const Tensor& z, const Tensor& a) const = 0;
  virtual Tensor act(const Tensor& z) const = 0;
};

/// Read-only view of a TOLD model and parameter snapshot.
class ToldLatentModel final : public LatentModel {
 public:
  ToldLatentModel(const ToldModel& model, const ToldParams& params)
      : model_(model), params_(params) {}
  std::size_t latent_dim() const override { return model_.latent_dim(); }
  std::size_t action_dim() const override { return model_.action_dim(); }
  Tensor next(const Tensor& z, const Tensor& a) const override {
    return model_.dynamics(params_, z, a);
  }
  Tensor reward(const Tensor& z, const Tensor& a) const override {
    return model_.reward(params_, z, a);
  }
  Tensor value(const Tensor& z, const Tensor& a) const override {
    return model_.q_value(params_, z, a);
  }
  Tensor act(const Tensor& z) const override { return model_.policy_act(params_, z); }

 private:
  const ToldModel& model_;
  const ToldParams& params_;
};

/// Per-timestep Gaussian over an H x m action sequence.
struct PlanDistribution {
  Tensor mu;
  Tensor sigma;
};

enum class CandidateSource { gaussian, policy };

struct CandidateTrajectory {
  Tensor actions;  // [H, m], within [-1, 1]
  double return_g = 0.0;
  CandidateSource source = CandidateSource::gaussian;
};

/// sum_{t<H} gamma^t R(z_t, a_t) + gamma^H Q(z_H, pi(z_H)) for one sequence.
double evaluate_return(const LatentModel& model, const Tensor& z0, const Tensor& actions,
                       double gamma);

/// Same estimate for many sequences, evaluated in fixed-size chunks that may
/// run on worker threads; the result does not depend on the thread count.
std::vector<double> evaluate_returns(const LatentModel& model, const Tensor& z0,
                                     const std::vector<Tensor>& actions, double gamma,
                                     std::size_t threads = 1);

/// Worker threads for candidate evaluation: TDMPC_SRL_THREADS when set,
/// otherwise the available hardware parallelism.
std::size_t planner_threads();

struct SampleOptions {
  std::size_t n_gauss = 512;
  std::size_t n_policy = 24;
  double gamma = 0.99;
  /// Std of the action noise added to all but the first policy rollout.
  double policy_noise = 0.0;
  std::size_t threads = 1;
};

/// Draws n_gauss clamped sequences from N(mu, sigma^2) (one counter-derived
/// stream per candidate) plus n_policy policy rollouts, and scores them all.
std::vector<CandidateTrajectory> sample_candidates(const PlanDistribution& dist,
                                                   const LatentModel& model, const Tensor& z0,
                                                   const SampleOptions& opt, Rng& rng);

std::vector<CandidateTrajectory> policy_candidates(const LatentModel& model, const Tensor& z0,
                                                   std::size_t horizon, std::size_t count,
                                                   double noise, double gamma,
                                                   std::uint64_t noise_seed);

/// The k best candidates, highest return first. Throws if k is 0 or exceeds
/// the candidate count.
std::vector<CandidateTrajectory> select_elites(std::vector<CandidateTrajectory> candidates,
                                               std::size_t k);

struct RefitOptions {
  double tau = 0.5;
  double eps_floor = 0.05;
  bool standardize = true;
  WeightMode mode = WeightMode::exponential;
};

/// Normalised elite weights (sum to 1).
std::vector<double> elite_weights(const std::vector<double>& returns, const RefitOptions& opt);

PlanDistribution refit_distribution(const std::vector<CandidateTrajectory>& elites,
                                    const RefitOptions& opt);

/// Linear decay from start to end over decay_steps, then constant.
double epsilon_at(std::int64_t step, const EpsilonSchedule& schedule);

struct PlanResult {
  Tensor action;  // [m]
  Tensor mean;    // final mu, for the next call's warm start
  std::vector<double> best_return;       // per iteration, over that iteration's candidates
  std::vector<double> elite_mean_return; // per iteration
  std::vector<double> candidate_mean_return;
};

enum class ActMode {
  sample,  // draw the acting trajectory from the final return-weighted elites
  greedy   // best final candidate, used for evaluation
};

/// Iterated sample / score / refit over J rounds starting from the shifted
/// warm-start mean (or zeros) and sigma_init.
PlanResult plan(const LatentModel& model, const Tensor& z, const std::optional<Tensor>& warm_mu,
                const HyperParams& hp, Rng& rng, std::int64_t step, ActMode mode = ActMode::sample,
                std::size_t threads = 1);

}  // namespace tdmpc
