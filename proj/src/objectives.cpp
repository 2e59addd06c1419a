#include "tdmpc/objectives.hpp"

#include <cmath>
#include <sstream>

namespace tdmpc {

namespace {

void add_into(Tensor& acc, const Tensor& t) {
  require_shape(t, acc.shape, "gradient accumulation");
  for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += t[i];
}

ToldParams zero_grads(const ToldParams& theta) {
  ToldParams g;
  g.encoder = nn::zeros_like(theta.encoder);
  g.dynamics = nn::zeros_like(theta.dynamics);
  g.reward = nn::zeros_like(theta.reward);
  for (const auto& q : theta.q) g.q.push_back(nn::zeros_like(q));
  g.policy = nn::zeros_like(theta.policy);
  g.decoder = nn::zeros_like(theta.decoder);
  return g;
}

Tensor concat_rows(const std::vector<Tensor>& parts, std::size_t begin, std::size_t end) {
  Tensor out;
  out.shape = parts[begin].shape;
  out.shape[0] = 0;
  for (std::size_t i = begin; i < end; ++i) {
    out.shape[0] += parts[i].dim(0);
    out.data.insert(out.data.end(), parts[i].data.begin(), parts[i].data.end());
  }
  return out;
}

}  // namespace

void TrajectorySlice::check() const {
  const std::size_t h = actions.size();
  if (h == 0) throw ShapeError("trajectory slice has no actions");
  if (observations.size() != h + 1 || rewards.size() != h || dones.size() != h)
    throw ShapeError("trajectory slice lengths inconsistent: " +
                     std::to_string(observations.size()) + " observations, " +
                     std::to_string(h) + " actions, " + std::to_string(rewards.size()) +
                     " rewards");
  for (double r : rewards)
    if (!std::isfinite(r)) throw ShapeError("trajectory slice holds a non-finite reward");
}

TrainBatch make_batch(const std::vector<TrajectorySlice>& slices, std::vector<double> weights) {
  if (slices.empty()) throw ShapeError("make_batch: no slices");
  const std::size_t h = slices[0].horizon();
  if (weights.empty()) weights.assign(slices.size(), 1.0);
  if (weights.size() != slices.size()) throw ShapeError("make_batch: weight count mismatch");
  TrainBatch b;
  std::vector<Tensor> col(slices.size());
  for (std::size_t t = 0; t <= h; ++t) {
    for (std::size_t k = 0; k < slices.size(); ++k) {
      slices[k].check();
      if (slices[k].horizon() != h) throw ShapeError("make_batch: mixed horizons");
      col[k] = slices[k].observations[t];
    }
    b.obs.push_back(stack(col));
  }
  b.obs_target = b.obs;
  for (std::size_t t = 0; t < h; ++t) {
    for (std::size_t k = 0; k < slices.size(); ++k) col[k] = slices[k].actions[t];
    b.actions.push_back(stack(col));
    Tensor r({slices.size(), 1});
    for (std::size_t k = 0; k < slices.size(); ++k) r[k] = slices[k].rewards[t];
    b.rewards.push_back(std::move(r));
  }
  b.weights = std::move(weights);
  return b;
}

double squared_error(const Tensor& prediction, const Tensor& target) {
  if (prediction.numel() != target.numel())
    throw ShapeError("squared_error: " + shape_str(prediction.shape) + " vs " +
                     shape_str(target.shape));
  double s = 0.0;
  for (std::size_t i = 0; i < prediction.numel(); ++i) {
    const double d = prediction[i] - target[i];
    s += d * d;
  }
  return s;
}

double reward_loss(double r_hat, double r) { return (r_hat - r) * (r_hat - r); }

double value_loss(const ToldModel& model, const ToldParams& theta, const TargetParams& theta_minus,
                  const Tensor& z, const Tensor& a, double r, const Tensor& s_next, double gamma) {
  const Tensor z_next = model.encode(theta_minus.params, s_next);
  const Tensor a_next = model.policy_act(theta, z_next);
  const double target = r + gamma * model.q_value(theta_minus.params, z_next, a_next)[0];
  double loss = 0.0;
  for (std::size_t k = 0; k < model.q_heads(); ++k) {
    const double q = model.q_head(theta, k, z, a)[0];
    loss += (q - target) * (q - target);
  }
  return loss;
}

double consistency_loss(const ToldModel& model, const ToldParams& theta,
                        const TargetParams& theta_minus, const Tensor& z, const Tensor& a,
                        const Tensor& s_next) {
  return squared_error(model.dynamics(theta, z, a), model.encode(theta_minus.params, s_next));
}

double reconstruction_loss(const ToldModel& model, const ToldParams& theta, const Tensor& z,
                           const Tensor& s_original) {
  return squared_error(model.reconstruct(theta, z), s_original);
}

double single_step_loss(const StepLoss& s, const HyperParams& hp) {
  return hp.c1 * s.reward + hp.c2 * s.value + hp.c3 * s.consistency + hp.c4 * s.reconstruction;
}

double step_weight(std::size_t i, const HyperParams& hp) {
  double w = std::pow(hp.lambda, static_cast<double>(i));
  if (hp.scale_by_horizon) w /= static_cast<double>(hp.horizon);
  return w;
}

LossResult total_loss(const ToldModel& model, ToldParams& theta, const TargetParams& theta_minus,
                      const TrainBatch& batch, const HyperParams& hp,
                      const TotalLossOptions& opt) {
  const std::size_t H = batch.horizon(), B = batch.batch();
  const std::size_t d = model.latent_dim(), heads = model.q_heads();
  if (H == 0 || B == 0) throw ShapeError("total_loss: empty batch");
  if (batch.obs.size() != H + 1 || batch.obs_target.size() != H + 1 ||
      batch.rewards.size() != H)
    throw ShapeError("total_loss: batch lengths inconsistent with horizon " + std::to_string(H));
  for (std::size_t i = 0; i < H; ++i) require_shape(batch.rewards[i], {B, 1}, "rewards");

  const auto& enc_net = model.encoder();
  const auto& dyn_net = model.dynamics_net();
  const auto& rew_net = model.reward_net();
  const auto& q_net = model.q_net();
  const auto& pi_net = model.policy_net();
  const auto& dec_net = model.decoder();
  const bool recon = opt.reconstruction;

  // Gradient-stopped targets for every step at once.
  const Tensor z_target = enc_net.infer(theta_minus.params.encoder, concat_rows(batch.obs, 1, H + 1));
  const Tensor za_next = concat_features(z_target, pi_net.infer(theta.policy, z_target));
  Tensor q_target = q_net.infer(theta_minus.params.q.at(0), za_next);
  for (std::size_t k = 1; k < heads; ++k) {
    const Tensor other = q_net.infer(theta_minus.params.q.at(k), za_next);
    for (std::size_t j = 0; j < q_target.numel(); ++j) q_target[j] = std::min(q_target[j], other[j]);
  }

  // Forward unroll.
  std::vector<Tensor> z(H + 1);
  auto enc = enc_net.forward(theta.encoder, batch.obs[0]);
  z[0] = enc.output;
  std::vector<nn::Tape> dyn_t(H), rew_t(H), dec_t(recon ? H : 0);
  std::vector<std::vector<nn::Tape>> q_t(H);
  std::vector<Tensor> r_hat(H), recon_out(recon ? H : 0);
  std::vector<std::vector<Tensor>> q_out(H);
  for (std::size_t i = 0; i < H; ++i) {
    const Tensor za = concat_features(z[i], batch.actions[i]);
    auto dyn = dyn_net.forward(theta.dynamics, za);
    z[i + 1] = std::move(dyn.output);
    dyn_t[i] = std::move(dyn.tape);
    auto rew = rew_net.forward(theta.reward, za);
    r_hat[i] = std::move(rew.output);
    rew_t[i] = std::move(rew.tape);
    for (std::size_t k = 0; k < heads; ++k) {
      auto q = q_net.forward(theta.q[k], za);
      q_out[i].push_back(std::move(q.output));
      q_t[i].push_back(std::move(q.tape));
    }
    if (recon) {
      auto dec = dec_net.forward(theta.decoder, z[i], nn::Mode::train);
      recon_out[i] = std::move(dec.output);
      dec_t[i] = std::move(dec.tape);
    }
  }

  // Losses and their output gradients.
  LossResult res;
  res.grads = zero_grads(theta);
  auto& br = res.breakdown;
  br.per_step.assign(H, {});
  br.priorities.assign(B, 0.0);
  std::vector<Tensor> dz(H + 1, Tensor({B, d}));
  std::vector<Tensor> d_rew(H, Tensor({B, 1}));
  std::vector<std::vector<Tensor>> d_q(H, std::vector<Tensor>(heads, Tensor({B, 1})));
  std::vector<Tensor> d_rec;
  const std::size_t obs_size = shape_numel(enc_net.input_shape());
  for (std::size_t i = 0; i < H; ++i) {
    const double rho = step_weight(i, hp);
    StepLoss& sl = br.per_step[i];
    if (recon) {
      d_rec.emplace_back(recon_out[i].shape);
      require_shape(batch.obs_target[i], recon_out[i].shape, "reconstruction target");
    }
    for (std::size_t b = 0; b < B; ++b) {
      const double s = batch.weights[b] / static_cast<double>(B);
      const double r = batch.rewards[i][b];
      const double y = r + hp.gamma * q_target[i * B + b];

      const double er = r_hat[i][b] - r;
      sl.reward += s * er * er;
      d_rew[i][b] = hp.c1 * rho * s * 2.0 * er;

      double lv = 0.0, abs_err = 0.0;
      for (std::size_t k = 0; k < heads; ++k) {
        const double eq = q_out[i][k][b] - y;
        lv += eq * eq;
        abs_err += std::abs(eq);
        d_q[i][k][b] = hp.c2 * rho * s * 2.0 * eq;
      }
      sl.value += s * lv;
      br.priorities[b] += rho * abs_err;

      double lc = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double ec = z[i + 1][b * d + j] - z_target[(i * B + b) * d + j];
        lc += ec * ec;
        dz[i + 1][b * d + j] += hp.c3 * rho * s * 2.0 * ec;
      }
      sl.consistency += s * lc;

      if (recon) {
        double lrec = 0.0;
        for (std::size_t j = 0; j < obs_size; ++j) {
          const std::size_t k = b * obs_size + j;
          const double e = recon_out[i][k] - batch.obs_target[i][k];
          lrec += e * e;
          d_rec[i][k] = hp.c4 * rho * s * 2.0 * e;
        }
        sl.reconstruction += s * lrec;
      }
    }
    br.total += rho * single_step_loss(sl, hp);
  }
  if (!std::isfinite(br.total)) {
    std::ostringstream os;
    os << "non-finite loss:";
    for (std::size_t i = 0; i < H; ++i)
      os << " step" << i << "(r=" << br.per_step[i].reward << " v=" << br.per_step[i].value
         << " c=" << br.per_step[i].consistency << " rec=" << br.per_step[i].reconstruction
         << ")";
    throw NonFiniteLoss(os.str());
  }

  // Back-propagation through time.
  for (std::size_t i = H; i-- > 0;) {
    Tensor dza = dyn_net.backward(dyn_t[i], dz[i + 1], &res.grads.dynamics);
    if (hp.c1 != 0.0) add_into(dza, rew_net.backward(rew_t[i], d_rew[i], &res.grads.reward));
    if (hp.c2 != 0.0)
      for (std::size_t k = 0; k < heads; ++k)
        add_into(dza, q_net.backward(q_t[i][k], d_q[i][k], &res.grads.q[k]));
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < d; ++j)
        dz[i][b * d + j] += dza[b * dza.dim(1) + j];
    if (recon && hp.c4 != 0.0)
      add_into(dz[i], dec_net.backward(dec_t[i], d_rec[i], &res.grads.decoder));
  }
  enc_net.backward(enc.tape, dz[0], &res.grads.encoder, false);
  res.latents = std::move(z);
  return res;
}

ActionCritic told_critic(const ToldModel& model, const ToldParams& theta) {
  return [&model, &theta](const Tensor& z, const Tensor& a, Tensor& dq_da) {
    const auto& q_net = model.q_net();
    const std::size_t B = z.dim(0), d = z.dim(1), m = a.dim(1);
    const Tensor za = concat_features(z, a);
    std::vector<nn::ForwardResult> fwd;
    for (const auto& qp : theta.q) fwd.push_back(q_net.forward(qp, za));
    Tensor q = fwd[0].output;
    std::vector<std::size_t> argmin(B, 0);
    for (std::size_t k = 1; k < fwd.size(); ++k)
      for (std::size_t b = 0; b < B; ++b)
        if (fwd[k].output[b] < q[b]) {
          q[b] = fwd[k].output[b];
          argmin[b] = k;
        }
    dq_da = Tensor({B, m});
    for (std::size_t k = 0; k < fwd.size(); ++k) {
      Tensor g({B, 1});
      bool any = false;
      for (std::size_t b = 0; b < B; ++b)
        if (argmin[b] == k) {
          g[b] = 1.0;
          any = true;
        }
      if (!any) continue;
      const Tensor dza = q_net.backward(fwd[k].tape, g, nullptr);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < m; ++j) dq_da[b * m + j] += dza[b * (d + m) + d + j];
    }
    return q;
  };
}

PolicyLossResult policy_loss(const nn::Network& policy, const nn::ParamSet& policy_params,
                             const ActionCritic& critic, const std::vector<Tensor>& latents,
                             const HyperParams& hp) {
  PolicyLossResult res;
  res.grads = nn::zeros_like(policy_params);
  for (std::size_t i = 0; i < latents.size(); ++i) {
    const double rho = step_weight(i, hp);
    const Tensor& z = latents[i];
    const double B = static_cast<double>(z.dim(0));
    auto fwd = policy.forward(policy_params, z);
    Tensor dq_da;
    const Tensor q = critic(z, fwd.output, dq_da);
    res.loss -= rho * sum(q) / B;
    for (double& g : dq_da.data) g *= -rho / B;
    policy.backward(fwd.tape, dq_da, &res.grads, false);
  }
  if (!std::isfinite(res.loss)) throw NonFiniteLoss("non-finite policy loss");
  return res;
}

PolicyLossResult policy_loss(const ToldModel& model, const ToldParams& theta,
                             const std::vector<Tensor>& latents, const HyperParams& hp) {
  return policy_loss(model.policy_net(), theta.policy, told_critic(model, theta), latents, hp);
}

}  // namespace tdmpc
