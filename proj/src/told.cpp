#include "tdmpc/told.hpp"

#include <stdexcept>

namespace tdmpc {

using nn::Activation;
using nn::LayerSpec;
using nn::Network;

const char* to_string(ObsMode mode) { return mode == ObsMode::state ? "state" : "image"; }

ObsMode obs_mode_from_string(const std::string& s) {
  if (s == "state") return ObsMode::state;
  if (s == "image") return ObsMode::image;
  throw std::invalid_argument("unknown observation mode '" + s + "'");
}

void ToldParams::for_each_head(
    const std::function<void(const std::string&, nn::ParamSet&)>& fn) {
  fn("encoder", encoder);
  fn("dynamics", dynamics);
  fn("reward", reward);
  for (std::size_t i = 0; i < q.size(); ++i) fn("q" + std::to_string(i), q[i]);
  fn("policy", policy);
  fn("decoder", decoder);
}

void ToldParams::for_each_head(
    const std::function<void(const std::string&, const nn::ParamSet&)>& fn) const {
  fn("encoder", encoder);
  fn("dynamics", dynamics);
  fn("reward", reward);
  for (std::size_t i = 0; i < q.size(); ++i) fn("q" + std::to_string(i), q[i]);
  fn("policy", policy);
  fn("decoder", decoder);
}

namespace {

Network mlp(std::size_t in, std::size_t hidden, std::size_t out, Activation last,
            const std::string& prefix) {
  return Network({in}, {LayerSpec::dense(prefix + "1", in, hidden, Activation::elu),
                        LayerSpec::dense(prefix + "2", hidden, hidden, Activation::elu),
                        LayerSpec::dense(prefix + "3", hidden, out, last)});
}

struct Batched {
  Tensor tensor;
  bool single;
};

// Adds a leading batch axis when `t` carries only the per-sample shape.
Batched as_batch(const Tensor& t, const Shape& sample, const char* what) {
  if (t.shape == sample) {
    Shape s{1};
    s.insert(s.end(), sample.begin(), sample.end());
    return {t.reshaped(s), true};
  }
  if (t.rank() == sample.size() + 1 &&
      std::equal(sample.begin(), sample.end(), t.shape.begin() + 1))
    return {t, false};
  throw ShapeError(std::string(what) + ": expected " + shape_str(sample) + " or [B," +
                   shape_str(sample).substr(1) + ", got " + shape_str(t.shape));
}

Tensor unbatch(Tensor t, bool single) {
  if (!single) return t;
  Shape s(t.shape.begin() + 1, t.shape.end());
  return t.reshaped(s);
}

}  // namespace

ToldModel::ToldModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  const std::size_t d = cfg_.latent_dim, h = cfg_.hidden_dim, m = cfg_.action_dim;
  if (d == 0 || h == 0 || m == 0) throw std::invalid_argument("model dims must be positive");
  nn::BatchNormOptions bn;
  bn.momentum = cfg_.batch_norm_momentum;

  if (cfg_.obs_mode == ObsMode::state) {
    if (cfg_.obs_shape.size() != 1) throw ShapeError("state observations must be [n]");
    const std::size_t n = cfg_.obs_shape[0];
    encoder_ = Network({n}, {LayerSpec::dense("enc1", n, h, Activation::elu),
                             LayerSpec::dense("enc2", h, d)});
    decoder_ = Network({d}, {LayerSpec::dense("dec1", d, h, Activation::elu),
                             LayerSpec::dense("dec2", h, n)});
  } else {
    if (cfg_.obs_shape.size() != 3 || cfg_.obs_shape[1] != cfg_.obs_shape[2])
      throw ShapeError("image observations must be [channels, R, R]");
    const std::size_t ch = cfg_.obs_shape[0], res = cfg_.obs_shape[1];
    if (res < 16 || res % 16 != 0)
      throw ShapeError("image resolution must be a multiple of 16, got " + std::to_string(res));
    const std::size_t base = res / 16;
    const auto [c1, c2, c3] = cfg_.image_channels;
    // Encoder mirrors the decoder: four stride-2 convolutions halve R each time.
    encoder_ = Network(cfg_.obs_shape,
                       {LayerSpec::conv2d("conv1", ch, c3, 4, 2, 1, Activation::relu),
                        LayerSpec::conv2d("conv2", c3, c2, 4, 2, 1, Activation::relu),
                        LayerSpec::conv2d("conv3", c2, c1, 4, 2, 1, Activation::relu),
                        LayerSpec::conv2d("conv4", c1, c1, 4, 2, 1, Activation::relu),
                        LayerSpec::dense("proj", c1 * base * base, d)});
    decoder_ = Network(
        {d},
        {LayerSpec::dense("lin", d, c1 * base * base, Activation::relu),
         LayerSpec::conv_transpose2d("deconv1", c1, c1, 4, 2, 1).spatial(base, base),
         LayerSpec::batch_norm("bn1", c1, Activation::relu),
         LayerSpec::conv_transpose2d("deconv2", c1, c2, 4, 2, 1),
         LayerSpec::batch_norm("bn2", c2, Activation::relu),
         LayerSpec::conv_transpose2d("deconv3", c2, c3, 4, 2, 1),
         LayerSpec::batch_norm("bn3", c3, Activation::relu),
         LayerSpec::conv_transpose2d("deconv4", c3, ch, 4, 2, 1, Activation::sigmoid)},
        bn);
  }
  dynamics_ = mlp(d + m, h, d, Activation::identity, "dyn");
  reward_ = mlp(d + m, h, 1, Activation::identity, "rew");
  q_ = mlp(d + m, h, 1, Activation::identity, "q");
  policy_ = mlp(d, h, m, Activation::tanh, "pi");
}

ToldParams ToldModel::init(Rng& rng) const {
  ToldParams p;
  p.encoder = encoder_.init(rng);
  p.dynamics = dynamics_.init(rng);
  p.reward = reward_.init(rng);
  for (std::size_t i = 0; i < q_heads(); ++i) p.q.push_back(q_.init(rng));
  p.policy = policy_.init(rng);
  p.decoder = decoder_.init(rng);
  return p;
}

ToldParams ToldModel::zeros() const {
  ToldParams p;
  p.encoder = encoder_.zeros();
  p.dynamics = dynamics_.zeros();
  p.reward = reward_.zeros();
  for (std::size_t i = 0; i < q_heads(); ++i) p.q.push_back(q_.zeros());
  p.policy = policy_.zeros();
  p.decoder = decoder_.zeros();
  return p;
}

void ToldModel::validate(const ToldParams& p) const {
  encoder_.validate(p.encoder);
  dynamics_.validate(p.dynamics);
  reward_.validate(p.reward);
  if (p.q.size() != q_heads())
    throw ShapeError("expected " + std::to_string(q_heads()) + " value heads, got " +
                     std::to_string(p.q.size()));
  for (const auto& q : p.q) q_.validate(q);
  policy_.validate(p.policy);
  decoder_.validate(p.decoder);
}

Tensor ToldModel::encode(const ToldParams& p, const Tensor& obs) const {
  auto b = as_batch(obs, encoder_.input_shape(), "encode");
  return unbatch(encoder_.infer(p.encoder, b.tensor), b.single);
}

Tensor ToldModel::dynamics(const ToldParams& p, const Tensor& z, const Tensor& a) const {
  auto bz = as_batch(z, {cfg_.latent_dim}, "dynamics latent");
  auto ba = as_batch(a, {cfg_.action_dim}, "dynamics action");
  return unbatch(dynamics_.infer(p.dynamics, concat_features(bz.tensor, ba.tensor)), bz.single);
}

Tensor ToldModel::reward(const ToldParams& p, const Tensor& z, const Tensor& a) const {
  auto bz = as_batch(z, {cfg_.latent_dim}, "reward latent");
  auto ba = as_batch(a, {cfg_.action_dim}, "reward action");
  return unbatch(reward_.infer(p.reward, concat_features(bz.tensor, ba.tensor)), bz.single);
}

Tensor ToldModel::q_head(const ToldParams& p, std::size_t head, const Tensor& z,
                         const Tensor& a) const {
  auto bz = as_batch(z, {cfg_.latent_dim}, "q latent");
  auto ba = as_batch(a, {cfg_.action_dim}, "q action");
  return unbatch(q_.infer(p.q.at(head), concat_features(bz.tensor, ba.tensor)), bz.single);
}

Tensor ToldModel::q_value(const ToldParams& p, const Tensor& z, const Tensor& a) const {
  auto bz = as_batch(z, {cfg_.latent_dim}, "q latent");
  auto ba = as_batch(a, {cfg_.action_dim}, "q action");
  const Tensor za = concat_features(bz.tensor, ba.tensor);
  Tensor out = q_.infer(p.q.at(0), za);
  for (std::size_t h = 1; h < p.q.size(); ++h) {
    const Tensor other = q_.infer(p.q[h], za);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::min(out[i], other[i]);
  }
  return unbatch(std::move(out), bz.single);
}

Tensor ToldModel::policy_act(const ToldParams& p, const Tensor& z) const {
  auto bz = as_batch(z, {cfg_.latent_dim}, "policy latent");
  return unbatch(policy_.infer(p.policy, bz.tensor), bz.single);
}

Tensor ToldModel::reconstruct(const ToldParams& p, const Tensor& z) const {
  auto bz = as_batch(z, {cfg_.latent_dim}, "reconstruct latent");
  return unbatch(decoder_.infer(p.decoder, bz.tensor), bz.single);
}

TargetParams make_target(const ToldParams& theta) { return TargetParams{theta}; }

void require_same_layout(const ToldParams& a, const ToldParams& b) {
  std::vector<const nn::ParamSet*> la, lb;
  a.for_each_head([&](const std::string&, const nn::ParamSet& s) { la.push_back(&s); });
  b.for_each_head([&](const std::string&, const nn::ParamSet& s) { lb.push_back(&s); });
  if (la.size() != lb.size()) throw ShapeError("parameter sets have different head counts");
  for (std::size_t i = 0; i < la.size(); ++i)
    if (!nn::same_layout(*la[i], *lb[i])) throw ShapeError("parameter layouts differ");
}

void target_update(const ToldParams& theta, TargetParams& theta_minus, double zeta) {
  if (!(zeta >= 0.0 && zeta < 1.0))
    throw std::invalid_argument("target update coefficient must lie in [0,1), got " +
                                std::to_string(zeta));
  require_same_layout(theta, theta_minus.params);
  std::vector<const nn::ParamSet*> live;
  theta.for_each_head([&](const std::string&, const nn::ParamSet& s) { live.push_back(&s); });
  std::size_t head = 0;
  theta_minus.params.for_each_head([&](const std::string&, nn::ParamSet& target) {
    const nn::ParamSet& src = *live[head++];
    for (auto& [name, lp] : target) {
      const auto& sp = src.at(name);
      for (std::size_t i = 0; i < lp.weights.numel(); ++i)
        lp.weights[i] = (1.0 - zeta) * lp.weights[i] + zeta * sp.weights[i];
      for (std::size_t i = 0; i < lp.biases.numel(); ++i)
        lp.biases[i] = (1.0 - zeta) * lp.biases[i] + zeta * sp.biases[i];
      if (lp.running_mean) {
        lp.running_mean = sp.running_mean;
        lp.running_var = sp.running_var;
      }
    }
  });
}

}  // namespace tdmpc
