#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "tdmpc/told.hpp"

using namespace tdmpc;
using nn::Activation;

namespace {

ModelConfig small_state_config() {
  ModelConfig c;
  c.obs_shape = {3};
  c.action_dim = 2;
  c.latent_dim = 4;
  c.hidden_dim = 6;
  return c;
}

ModelConfig small_image_config() {
  ModelConfig c;
  c.obs_mode = ObsMode::image;
  c.obs_shape = {2, 16, 16};
  c.action_dim = 1;
  c.latent_dim = 5;
  c.hidden_dim = 8;
  c.image_channels = {4, 3, 2};
  return c;
}

std::vector<double> vec(const Tensor& t) { return t.data; }

}  // namespace

TEST_CASE("zero-initialized heads output zeros") {
  ToldModel m(small_state_config());
  const ToldParams p = m.zeros();
  Rng rng(1);
  const Tensor s = oracle::random_tensor({3}, rng);
  const Tensor a = oracle::random_tensor({2}, rng);
  const Tensor z = m.encode(p, s);
  CHECK(z.shape == Shape{4});
  CHECK(vec(z) == std::vector<double>(4, 0.0));
  CHECK(vec(m.dynamics(p, z, a)) == std::vector<double>(4, 0.0));
  CHECK(m.reward(p, z, a)[0] == 0.0);
  CHECK(m.q_value(p, z, a)[0] == 0.0);
  CHECK(vec(m.policy_act(p, z)) == std::vector<double>(2, 0.0));
  CHECK(vec(m.reconstruct(p, z)) == std::vector<double>(3, 0.0));
}

TEST_CASE("heads are deterministic") {
  ToldModel m(small_state_config());
  Rng rng(2);
  const ToldParams p = m.init(rng);
  const Tensor s = oracle::random_tensor({7, 3}, rng);
  const Tensor a = oracle::random_tensor({7, 2}, rng);
  CHECK(vec(m.encode(p, s)) == vec(m.encode(p, s)));
  const Tensor z = m.encode(p, s);
  CHECK(vec(m.dynamics(p, z, a)) == vec(m.dynamics(p, z, a)));
  CHECK(vec(m.reward(p, z, a)) == vec(m.reward(p, z, a)));
  CHECK(vec(m.q_value(p, z, a)) == vec(m.q_value(p, z, a)));
  CHECK(vec(m.policy_act(p, z)) == vec(m.policy_act(p, z)));
  CHECK(vec(m.reconstruct(p, z)) == vec(m.reconstruct(p, z)));
}

TEST_CASE("heads match a hand-rolled dense oracle") {
  ToldModel m(small_state_config());
  Rng rng(3);
  ToldParams p = m.init(rng);
  // nonzero biases so they participate
  p.for_each_head([&](const std::string&, nn::ParamSet& ps) {
    for (auto& [n, lp] : ps)
      for (double& b : lp.biases.data) b = rng.uniform(-0.5, 0.5);
  });
  const Tensor s = oracle::random_tensor({3}, rng);
  const Tensor a = oracle::random_tensor({2}, rng);
  const auto E = Activation::elu, I = Activation::identity;

  const auto z = oracle::mlp(p.encoder, {"enc1", "enc2"}, {E, I}, s.data);
  const Tensor zt = m.encode(p, s);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(zt[i] == doctest::Approx(z[i]).epsilon(1e-12));

  std::vector<double> za = z;
  za.insert(za.end(), a.data.begin(), a.data.end());
  const auto next = oracle::mlp(p.dynamics, {"dyn1", "dyn2", "dyn3"}, {E, E, I}, za);
  const Tensor nt = m.dynamics(p, zt, a);
  for (std::size_t i = 0; i < next.size(); ++i) CHECK(nt[i] == doctest::Approx(next[i]).epsilon(1e-12));

  const auto r = oracle::mlp(p.reward, {"rew1", "rew2", "rew3"}, {E, E, I}, za);
  CHECK(m.reward(p, zt, a)[0] == doctest::Approx(r[0]).epsilon(1e-12));

  const auto q0 = oracle::mlp(p.q[0], {"q1", "q2", "q3"}, {E, E, I}, za);
  const auto q1 = oracle::mlp(p.q[1], {"q1", "q2", "q3"}, {E, E, I}, za);
  const double q = m.q_value(p, zt, a)[0];
  CHECK(q == doctest::Approx(std::min(q0[0], q1[0])).epsilon(1e-12));
  CHECK(q <= m.q_head(p, 0, zt, a)[0]);
  CHECK(q <= m.q_head(p, 1, zt, a)[0]);

  const auto pi = oracle::mlp(p.policy, {"pi1", "pi2", "pi3"}, {E, E, Activation::tanh}, z);
  const Tensor pt = m.policy_act(p, zt);
  for (std::size_t i = 0; i < pi.size(); ++i) CHECK(pt[i] == doctest::Approx(pi[i]).epsilon(1e-12));

  const auto rec = oracle::mlp(p.decoder, {"dec1", "dec2"}, {E, I}, z);
  const Tensor rt = m.reconstruct(p, zt);
  for (std::size_t i = 0; i < rec.size(); ++i) CHECK(rt[i] == doctest::Approx(rec[i]).epsilon(1e-12));
}

TEST_CASE("single value head mode") {
  ModelConfig c = small_state_config();
  c.double_q = false;
  ToldModel m(c);
  Rng rng(4);
  const ToldParams p = m.init(rng);
  CHECK(p.q.size() == 1);
  const Tensor z = oracle::random_tensor({4}, rng), a = oracle::random_tensor({2}, rng);
  CHECK(m.q_value(p, z, a)[0] == m.q_head(p, 0, z, a)[0]);
}

TEST_CASE("policy output stays within the action box") {
  ModelConfig c = small_state_config();
  ToldModel m(c);
  Rng rng(5);
  ToldParams p = m.init(rng);
  for (auto& [n, lp] : p.policy)
    for (double& w : lp.weights.data) w *= 20.0;  // push tanh into saturation
  const Tensor z = oracle::random_tensor({10000, 4}, rng, -10.0, 10.0);
  const Tensor a = m.policy_act(p, z);
  for (double v : a.data) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("shape closure under latent unrolling") {
  ToldModel m(small_state_config());
  Rng rng(6);
  const ToldParams p = m.init(rng);
  Tensor z = m.encode(p, oracle::random_tensor({5, 3}, rng));
  for (int h = 0; h < 8; ++h) {
    const Tensor a = m.policy_act(p, z);
    CHECK(m.reward(p, z, a).shape == Shape{5, 1});
    CHECK(m.q_value(p, z, a).shape == Shape{5, 1});
    CHECK(m.reconstruct(p, z).shape == Shape{5, 3});
    z = m.dynamics(p, z, a);
    CHECK(z.shape == Shape{5, 4});
  }
  CHECK_THROWS_AS(m.encode(p, Tensor({4})), ShapeError);
  CHECK_THROWS_AS(m.dynamics(p, Tensor({4}), Tensor({3})), ShapeError);
}

TEST_CASE("image decoder range and direct-summation oracle") {
  ToldModel m(small_image_config());
  CHECK(m.decoder().output_shape() == Shape{2, 16, 16});
  CHECK(m.encoder().output_shape() == Shape{5});
  Rng rng(7);
  ToldParams p = m.init(rng);
  for (auto& [name, lp] : p.decoder) {
    for (double& b : lp.biases.data) b = rng.uniform(-0.3, 0.3);
    if (lp.running_mean) {
      for (double& v : lp.running_mean->data) v = rng.uniform(-0.2, 0.2);
      for (double& v : lp.running_var->data) v = rng.uniform(0.5, 1.5);
      for (double& v : lp.weights.data) v = rng.uniform(0.5, 1.5);
    }
  }
  const Tensor z = oracle::random_tensor({5}, rng, -3, 3);
  const Tensor out = m.reconstruct(p, z);
  for (double v : out.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  // linear -> relu -> (deconv -> bn -> relu) x3 -> deconv -> sigmoid, by hand
  auto bn_relu = [&](std::vector<double> x, const nn::LayerParams& bn, std::size_t c,
                     std::size_t plane) {
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t i = 0; i < plane; ++i) {
        double& v = x[k * plane + i];
        v = bn.weights[k] * (v - (*bn.running_mean)[k]) / std::sqrt((*bn.running_var)[k] + 1e-8) +
            bn.biases[k];
        v = std::max(v, 0.0);
      }
    return x;
  };
  std::vector<double> x = oracle::mlp(p.decoder, {"lin"}, {Activation::relu}, z.data);
  const auto& d = p.decoder;
  x = oracle::conv_transpose(x, 4, 1, 1, d.at("deconv1").weights.data, d.at("deconv1").biases.data, 4, 4, 2, 1);
  x = bn_relu(x, d.at("bn1"), 4, 4);
  x = oracle::conv_transpose(x, 4, 2, 2, d.at("deconv2").weights.data, d.at("deconv2").biases.data, 3, 4, 2, 1);
  x = bn_relu(x, d.at("bn2"), 3, 16);
  x = oracle::conv_transpose(x, 3, 4, 4, d.at("deconv3").weights.data, d.at("deconv3").biases.data, 2, 4, 2, 1);
  x = bn_relu(x, d.at("bn3"), 2, 64);
  x = oracle::conv_transpose(x, 2, 8, 8, d.at("deconv4").weights.data, d.at("deconv4").biases.data, 2, 4, 2, 1);
  REQUIRE(x.size() == out.numel());
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(out[i] == doctest::Approx(1.0 / (1.0 + std::exp(-x[i]))).epsilon(1e-12));
}

TEST_CASE("target update follows the moving-average rule") {
  ModelConfig c = small_state_config();
  ToldModel m(c);
  Rng rng(8);
  const ToldParams theta = m.init(rng);

  SUBCASE("zeta 0 is a no-op") {
    TargetParams t{m.init(rng)};
    const TargetParams before = t;
    target_update(theta, t, 0.0);
    CHECK(t.params.encoder.at("enc1").weights.data == before.params.encoder.at("enc1").weights.data);
  }
  SUBCASE("scalar substitution and 100-fold closed form") {
    ToldParams one = m.zeros(), zero = m.zeros();
    for (double& w : one.reward.at("rew3").biases.data) w = 1.0;
    TargetParams t{zero};
    target_update(one, t, 0.25);
    CHECK(t.params.reward.at("rew3").biases[0] == 0.25);
    TargetParams u{zero};
    for (int k = 0; k < 100; ++k) target_update(one, u, 0.01);
    CHECK(std::abs(u.params.reward.at("rew3").biases[0] - (1.0 - std::pow(0.99, 100))) < 1e-12);
    CHECK(u.params.reward.at("rew3").biases[0] == doctest::Approx(0.63397).epsilon(1e-5));
  }
  SUBCASE("contraction toward theta") {
    TargetParams t{m.init(rng)};
    for (int k = 0; k < 5; ++k) {
      const TargetParams prev = t;
      target_update(theta, t, 0.3);
      const auto& a = prev.params.dynamics.at("dyn2").weights.data;
      const auto& b = t.params.dynamics.at("dyn2").weights.data;
      const auto& th = theta.dynamics.at("dyn2").weights.data;
      for (std::size_t i = 0; i < a.size(); ++i)
        CHECK(std::abs(b[i] - th[i]) <= 0.7 * std::abs(a[i] - th[i]) + 1e-15);
    }
  }
  SUBCASE("invalid zeta") {
    TargetParams t{theta};
    CHECK_THROWS_AS(target_update(theta, t, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(target_update(theta, t, -0.1), std::invalid_argument);
  }
}

TEST_CASE("target update copies batch-norm statistics") {
  ToldModel m(small_image_config());
  Rng rng(9);
  ToldParams theta = m.init(rng);
  TargetParams t = make_target(theta);
  for (double& v : theta.decoder.at("bn1").running_mean->data) v = 0.7;
  for (double& v : theta.decoder.at("bn1").weights.data) v = 3.0;
  target_update(theta, t, 0.5);
  CHECK(t.params.decoder.at("bn1").running_mean->data == theta.decoder.at("bn1").running_mean->data);
  CHECK(t.params.decoder.at("bn1").weights[0] == doctest::Approx(2.0));
}
