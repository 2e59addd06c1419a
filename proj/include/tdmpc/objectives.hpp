#pragma once

#include <functional>
#include <stdexcept>
#include <vector>

#include "tdmpc/config.hpp"
#include "tdmpc/told.hpp"

namespace tdmpc {

/// A contiguous window (s_t, a_t, r_t, ..., s_{t+H}) from one episode.
struct TrajectorySlice {
  std::vector<Tensor> observations;  // H + 1, un-augmented
  std::vector<Tensor> actions;       // H
  std::vector<double> rewards;       // H
  std::vector<bool> dones;           // H

  std::size_t horizon() const { return actions.size(); }
  /// Throws ShapeError when the lengths are inconsistent or a reward is not finite.
  void check() const;
};

/// Slices stacked along a batch axis, ready for the losses.
struct TrainBatch {
  std::vector<Tensor> obs;         // H + 1 of [B, *obs]; encoder inputs (may be augmented)
  std::vector<Tensor> obs_target;  // H + 1 of [B, *obs]; reconstruction targets
  std::vector<Tensor> actions;     // H of [B, m]
  std::vector<Tensor> rewards;     // H of [B, 1]
  std::vector<double> weights;     // importance weights, length B

  std::size_t batch() const { return weights.size(); }
  std::size_t horizon() const { return actions.size(); }
};

/// Collate slices; all importance weights are 1 unless given.
TrainBatch make_batch(const std::vector<TrajectorySlice>& slices,
                      std::vector<double> weights = {});

struct StepLoss {
  double reward = 0.0;
  double value = 0.0;
  double consistency = 0.0;
  double reconstruction = 0.0;
};

struct LossBreakdown {
  double total = 0.0;
  std::vector<StepLoss> per_step;
  double policy_loss = 0.0;
  /// Per-sample value-error magnitude, used as the replay priority signal.
  std::vector<double> priorities;
};

/// Raised when a loss evaluates to NaN or infinity.
class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

double squared_error(const Tensor& prediction, const Tensor& target);

double reward_loss(double r_hat, double r);

/// Sum over value heads of (Q_k(z, a) - (r + gamma * min_k Q⁻_k(z', pi(z'))))^2
/// with z' = h⁻(s_next). Single sample.
double value_loss(const ToldModel& model, const ToldParams& theta, const TargetParams& theta_minus,
                  const Tensor& z, const Tensor& a, double r, const Tensor& s_next, double gamma);

/// ||d(z, a) - h⁻(s_next)||^2 for a single sample.
double consistency_loss(const ToldModel& model, const ToldParams& theta,
                        const TargetParams& theta_minus, const Tensor& z, const Tensor& a,
                        const Tensor& s_next);

/// ||h^-1(z) - s||^2 against the un-augmented observation (eval mode decoder).
double reconstruction_loss(const ToldModel& model, const ToldParams& theta, const Tensor& z,
                           const Tensor& s_original);

/// c1 l_r + c2 l_v + c3 l_c + c4 l_rec.
double single_step_loss(const StepLoss& step, const HyperParams& hp);

/// Weight of step i in the unrolled sum: lambda^i, optionally divided by H.
double step_weight(std::size_t i, const HyperParams& hp);

struct TotalLossOptions {
  /// Evaluate the decoder at all. Off gives the reconstruction-free path.
  bool reconstruction = true;
};

struct LossResult {
  LossBreakdown breakdown;
  ToldParams grads;  // same layout as theta; policy block stays zero
  std::vector<Tensor> latents;  // z_0 .. z_H from the unroll
};

/// Unroll z_0 = h(s_0), z_{i+1} = d(z_i, a_i) and accumulate the lambda-weighted
/// per-step losses, averaged over the batch with importance weights. Gradients
/// are back-propagated through the whole unroll; every target term is
/// gradient-stopped. `theta` is non-const only because the decoder's batch-norm
/// running statistics advance in train mode.
LossResult total_loss(const ToldModel& model, ToldParams& theta, const TargetParams& theta_minus,
                      const TrainBatch& batch, const HyperParams& hp,
                      const TotalLossOptions& opt = {});

/// Q(z, a) for a batch together with dQ/da (gradient of sum of outputs).
using ActionCritic = std::function<Tensor(const Tensor& z, const Tensor& a, Tensor& dq_da)>;

/// min over the live value heads, differentiated through the minimising head.
ActionCritic told_critic(const ToldModel& model, const ToldParams& theta);

struct PolicyLossResult {
  double loss = 0.0;
  nn::ParamSet grads;  // policy parameters only
};

/// -sum_i lambda^i mean_b Q(z_i, pi(z_i)); latents are treated as constants and
/// only the policy parameters receive gradient.
PolicyLossResult policy_loss(const nn::Network& policy, const nn::ParamSet& policy_params,
                             const ActionCritic& critic, const std::vector<Tensor>& latents,
                             const HyperParams& hp);

PolicyLossResult policy_loss(const ToldModel& model, const ToldParams& theta,
                             const std::vector<Tensor>& latents, const HyperParams& hp);

}  // namespace tdmpc
