#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "tdmpc/nn.hpp"
#include "tdmpc/rng.hpp"
#include "tdmpc/tensor.hpp"

namespace tdmpc {

enum class ObsMode { state, image };

const char* to_string(ObsMode mode);
ObsMode obs_mode_from_string(const std::string& s);

struct ModelConfig {
  ObsMode obs_mode = ObsMode::state;
  /// [n] in state mode, [channels, R, R] in image mode.
  Shape obs_shape{3};
  std::size_t action_dim = 1;
  std::size_t latent_dim = 50;
  std::size_t hidden_dim = 256;
  bool double_q = true;
  /// Image mode: output channels of the three upsampling layers before the
  /// final one (which outputs obs channels), mirrored by the encoder.
  std::array<std::size_t, 3> image_channels{64, 32, 16};
  double batch_norm_momentum = 0.1;
};

/// Live TOLD parameters: one ParamSet per head.
struct ToldParams {
  nn::ParamSet encoder;
  nn::ParamSet dynamics;
  nn::ParamSet reward;
  std::vector<nn::ParamSet> q;  // one or two value heads
  nn::ParamSet policy;
  nn::ParamSet decoder;

  /// Visit heads as ("encoder", set), ("q0", set), ... in a fixed order.
  void for_each_head(const std::function<void(const std::string&, nn::ParamSet&)>& fn);
  void for_each_head(
      const std::function<void(const std::string&, const nn::ParamSet&)>& fn) const;
};

/// The slow-moving copy used for bootstrapped targets.
struct TargetParams {
  ToldParams params;
};

/// Architecture of the six heads plus batched evaluation helpers.
/// Every head accepts either a single sample (per-sample shape) or a batch
/// with a leading axis; the result follows the same convention.
class ToldModel {
 public:
  explicit ToldModel(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  std::size_t latent_dim() const { return cfg_.latent_dim; }
  std::size_t action_dim() const { return cfg_.action_dim; }
  std::size_t q_heads() const { return cfg_.double_q ? 2 : 1; }

  const nn::Network& encoder() const { return encoder_; }
  const nn::Network& dynamics_net() const { return dynamics_; }
  const nn::Network& reward_net() const { return reward_; }
  const nn::Network& q_net() const { return q_; }
  const nn::Network& policy_net() const { return policy_; }
  const nn::Network& decoder() const { return decoder_; }

  ToldParams init(Rng& rng) const;
  /// Every weight and bias zero (batch-norm scale included).
  ToldParams zeros() const;
  void validate(const ToldParams& p) const;

  Tensor encode(const ToldParams& p, const Tensor& obs) const;
  Tensor dynamics(const ToldParams& p, const Tensor& z, const Tensor& a) const;
  Tensor reward(const ToldParams& p, const Tensor& z, const Tensor& a) const;
  /// min over the value heads.
  Tensor q_value(const ToldParams& p, const Tensor& z, const Tensor& a) const;
  Tensor q_head(const ToldParams& p, std::size_t head, const Tensor& z, const Tensor& a) const;
  Tensor policy_act(const ToldParams& p, const Tensor& z) const;
  Tensor reconstruct(const ToldParams& p, const Tensor& z) const;

 private:
  ModelConfig cfg_;
  nn::Network encoder_, dynamics_, reward_, q_, policy_, decoder_;
};

TargetParams make_target(const ToldParams& theta);

/// theta_minus <- (1 - zeta) * theta_minus + zeta * theta, elementwise.
/// Batch-norm running statistics are copied from theta.
void target_update(const ToldParams& theta, TargetParams& theta_minus, double zeta);

/// Throws ShapeError when two parameter sets differ in layout.
void require_same_layout(const ToldParams& a, const ToldParams& b);

}  // namespace tdmpc
