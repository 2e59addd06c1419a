#include <doctest.h>

#include <cmath>

#include "loss_oracle.hpp"
#include "tdmpc/planner.hpp"

using namespace tdmpc;
using namespace oracle;

namespace {

// Heads returning constants; the latent never changes.
struct ConstModel : LatentModel {
  double r = 1.0, q = 2.0;
  std::size_t m = 1;
  std::size_t latent_dim() const override { return 1; }
  std::size_t action_dim() const override { return m; }
  Tensor next(const Tensor& z, const Tensor&) const override { return z; }
  Tensor reward(const Tensor& z, const Tensor&) const override { return Tensor({z.dim(0), 1}, r); }
  Tensor value(const Tensor& z, const Tensor&) const override { return Tensor({z.dim(0), 1}, q); }
  Tensor act(const Tensor& z) const override { return Tensor({z.dim(0), m}, 0.0); }
};

// Latent is the time index; reward at t is -|a - target_t|^2, no terminal value.
struct QuadModel : LatentModel {
  Tensor target;
  explicit QuadModel(Tensor t) : target(std::move(t)) {}
  std::size_t latent_dim() const override { return 1; }
  std::size_t action_dim() const override { return target.dim(1); }
  Tensor next(const Tensor& z, const Tensor&) const override {
    Tensor out = z;
    for (double& v : out.data) v += 1.0;
    return out;
  }
  Tensor reward(const Tensor& z, const Tensor& a) const override {
    const std::size_t m = action_dim();
    Tensor r({z.dim(0), 1}, 0.0);
    for (std::size_t i = 0; i < z.dim(0); ++i) {
      const std::size_t t = static_cast<std::size_t>(z.data[i]);
      for (std::size_t j = 0; j < m; ++j) {
        const double d = a.data[i * m + j] - target.data[t * m + j];
        r.data[i] -= d * d;
      }
    }
    return r;
  }
  Tensor value(const Tensor& z, const Tensor&) const override { return Tensor({z.dim(0), 1}, 0.0); }
  Tensor act(const Tensor& z) const override { return Tensor({z.dim(0), action_dim()}, 0.0); }
};

HyperParams quad_hp(std::size_t H) {
  HyperParams hp;
  hp.horizon = H;
  hp.num_policy = 0;
  hp.gamma = 1.0 - 1e-12;
  hp.epsilon.decay_steps = 1000;
  return hp;
}

Tensor zero_latent() { return Tensor({1}, 0.0); }

}  // namespace

TEST_CASE("return estimate adds discounted terminal value") {
  ConstModel m;
  CHECK(evaluate_return(m, zero_latent(), Tensor({1, 1}, 0.3), 0.9) == doctest::Approx(2.8));
  CHECK(evaluate_return(m, zero_latent(), Tensor({1, 1}, 0.3), 0.0) == doctest::Approx(1.0));
  CHECK(evaluate_return(m, zero_latent(), Tensor({3, 1}, 0.3), 0.0) == doctest::Approx(1.0));
  m.r = 0.0;
  m.q = 0.0;
  CHECK(evaluate_return(m, zero_latent(), Tensor({4, 1}, 0.3), 0.99) == 0.0);
  m.r = 1.0;
  m.q = 0.0;
  CHECK(evaluate_return(m, zero_latent(), Tensor({3, 1}, 0.0), 0.5) == doctest::Approx(1.75));
}

TEST_CASE("return estimate through a model matches a step-by-step rollout") {
  ToldModel model(tiny_state_model());
  Rng rng(5);
  ToldParams p = random_params(model, rng);
  ToldLatentModel lm(model, p);
  const double gamma = 0.8;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor z = random_tensor({3}, rng);
    Tensor acts = random_tensor({4, 2}, rng);
    double g = 0.0, disc = 1.0;
    Tensor zt = z;
    for (std::size_t t = 0; t < 4; ++t) {
      Tensor a({2}, {acts.data[t * 2], acts.data[t * 2 + 1]});
      g += disc * model.reward(p, zt, a).data[0];
      zt = model.dynamics(p, zt, a);
      disc *= gamma;
    }
    g += disc * model.q_value(p, zt, model.policy_act(p, zt)).data[0];
    CHECK(evaluate_return(lm, z, acts, gamma) == doctest::Approx(g).epsilon(1e-12));
  }
}

TEST_CASE("batched returns do not depend on thread count") {
  ToldModel model(tiny_state_model());
  Rng rng(6);
  ToldParams p = random_params(model, rng);
  ToldLatentModel lm(model, p);
  std::vector<Tensor> seqs;
  for (int i = 0; i < 300; ++i) seqs.push_back(random_tensor({3, 2}, rng));
  const Tensor z = random_tensor({3}, rng);
  const auto a = evaluate_returns(lm, z, seqs, 0.9, 1);
  const auto b = evaluate_returns(lm, z, seqs, 0.9, 4);
  CHECK(a == b);
}

TEST_CASE("non-finite return is an error") {
  ConstModel m;
  m.q = std::nan("");
  CHECK_THROWS_AS(evaluate_return(m, zero_latent(), Tensor({1, 1}, 0.0), 0.9), std::domain_error);
}

TEST_CASE("candidate sampling") {
  ConstModel m;
  m.m = 2;
  PlanDistribution d{Tensor({3, 2}, {0.2, -0.4, 1.7, 0.0, -3.0, 0.9}), Tensor({3, 2}, 0.0)};
  Rng rng(1);
  SampleOptions so;
  so.n_gauss = 16;
  so.n_policy = 1;
  auto c = sample_candidates(d, m, zero_latent(), so, rng);
  REQUIRE(c.size() == 17);
  for (const auto& k : c) {
    if (k.source == CandidateSource::policy) {
      CHECK(k.actions.data == std::vector<double>(6, 0.0));
    } else {
      CHECK(k.actions.data == std::vector<double>{0.2, -0.4, 1.0, 0.0, -1.0, 0.9});
    }
  }
  d.sigma = Tensor({3, 2}, 0.7);
  Rng r1(9), r2(9);
  auto a = sample_candidates(d, m, zero_latent(), so, r1);
  auto b = sample_candidates(d, m, zero_latent(), so, r2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].actions.data == b[i].actions.data);
    for (double v : a[i].actions.data) CHECK(std::abs(v) <= 1.0);
  }
  so.n_gauss = 0;
  CHECK_THROWS(sample_candidates(d, m, zero_latent(), so, r1));
}

TEST_CASE("policy candidate equals the policy rollout") {
  ToldModel model(tiny_state_model());
  Rng rng(8);
  ToldParams p = random_params(model, rng);
  ToldLatentModel lm(model, p);
  Tensor z = random_tensor({3}, rng);
  auto c = policy_candidates(lm, z, 3, 1, 0.5, 0.9, 42);
  REQUIRE(c.size() == 1);
  Tensor zt = z;
  for (std::size_t t = 0; t < 3; ++t) {
    Tensor a = model.policy_act(p, zt);
    CHECK(c[0].actions.data[t * 2] == doctest::Approx(a.data[0]).epsilon(1e-14));
    CHECK(c[0].actions.data[t * 2 + 1] == doctest::Approx(a.data[1]).epsilon(1e-14));
    zt = model.dynamics(p, zt, a);
  }
  CHECK(c[0].return_g == doctest::Approx(evaluate_return(lm, z, c[0].actions, 0.9)));
}

TEST_CASE("refit examples") {
  RefitOptions opt;
  opt.eps_floor = 0.05;
  std::vector<CandidateTrajectory> one{{Tensor({2, 1}, {0.3, -0.6}), 1.0}};
  auto d = refit_distribution(one, opt);
  CHECK(d.mu.data == std::vector<double>{0.3, -0.6});
  CHECK(d.sigma.data == std::vector<double>{0.05, 0.05});

  std::vector<CandidateTrajectory> same(5, {Tensor({2, 1}, {0.1, 0.2}), 0.0});
  for (std::size_t i = 0; i < same.size(); ++i) same[i].return_g = -double(i);
  d = refit_distribution(same, opt);
  CHECK(d.mu.data[0] == doctest::Approx(0.1));
  CHECK(d.mu.data[1] == doctest::Approx(0.2));
  CHECK(d.sigma.data == std::vector<double>{0.05, 0.05});

  opt.standardize = false;
  opt.tau = 0.5;
  std::vector<CandidateTrajectory> two{{Tensor({1, 1}, 1.0), 0.0},
                                       {Tensor({1, 1}, 0.0), -std::log(2.0) / 0.5}};
  d = refit_distribution(two, opt);
  CHECK(d.mu.data[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  // weighted std of {1, 0} with weights {2/3, 1/3}
  CHECK(d.sigma.data[0] == doctest::Approx(std::sqrt(2.0 / 9.0)).epsilon(1e-12));

  opt.mode = WeightMode::literal_linear;
  d = refit_distribution(two, opt);
  CHECK(d.mu.data[0] == doctest::Approx(1.0));
}

TEST_CASE("weights are invariant to shifting every return") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> g(10);
    for (double& v : g) v = rng.normal(0.0, 3.0);
    std::vector<double> h = g;
    const double shift = rng.uniform(-100.0, 100.0);
    for (double& v : h) v += shift;
    for (auto mode : {WeightMode::exponential, WeightMode::literal_linear}) {
      for (bool st : {true, false}) {
        RefitOptions o{0.5, 0.05, st, mode};
        auto a = elite_weights(g, o), b = elite_weights(h, o);
        double sum = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
          CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));
          CHECK(a[i] >= 0.0);
          sum += a[i];
        }
        CHECK(sum == doctest::Approx(1.0));
      }
    }
  }
}

TEST_CASE("sigma floor holds after every refit") {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const double floor = rng.uniform(0.0, 0.5);
    std::vector<CandidateTrajectory> e;
    const std::size_t k = 1 + rng.uniform_int(0, 9);
    for (std::size_t i = 0; i < k; ++i)
      e.push_back({random_tensor({3, 2}, rng) , -double(i)});
    auto d = refit_distribution(e, {0.5, floor, true, WeightMode::exponential});
    for (double s : d.sigma.data) CHECK(s >= floor);
  }
}

TEST_CASE("elite selection") {
  std::vector<CandidateTrajectory> c;
  for (double g : {0.5, 2.0, -1.0, 1.0}) c.push_back({Tensor({1, 1}, g), g});
  auto e = select_elites(c, 2);
  CHECK(e[0].return_g == 2.0);
  CHECK(e[1].return_g == 1.0);
  CHECK_THROWS(select_elites(c, 5));
  CHECK_THROWS(select_elites(c, 0));
}

TEST_CASE("exploration schedule") {
  EpsilonSchedule s{0.5, 0.05, 1000};
  CHECK(epsilon_at(0, s) == 0.5);
  CHECK(epsilon_at(500, s) == doctest::Approx(0.275));
  CHECK(epsilon_at(1000, s) == 0.05);
  CHECK(epsilon_at(50000, s) == 0.05);
  CHECK_THROWS(epsilon_at(-1, s));
}

TEST_CASE("single sample with zero spread returns the shifted warm mean") {
  ConstModel m;
  HyperParams hp;
  hp.horizon = 2;
  hp.iterations = 1;
  hp.num_samples = 1;
  hp.num_policy = 0;
  hp.num_elites = 1;
  hp.sigma_init = 0.0;
  Rng rng(0);
  auto r = plan(m, zero_latent(), Tensor({2, 1}, {0.9, 0.3}), hp, rng, 0);
  CHECK(r.action.data[0] == 0.3);
  r = plan(m, zero_latent(), Tensor({2, 1}, {0.9, 4.0}), hp, rng, 0);
  CHECK(r.action.data[0] == 1.0);
  r = plan(m, zero_latent(), std::nullopt, hp, rng, 0);
  CHECK(r.action.data[0] == 0.0);
}

TEST_CASE("planning is deterministic and clamped") {
  ToldModel model(tiny_state_model());
  Rng init(11);
  ToldParams p = random_params(model, init);
  ToldLatentModel lm(model, p);
  HyperParams hp;
  hp.horizon = 3;
  hp.num_samples = 100;
  hp.num_policy = 5;
  hp.num_elites = 10;
  hp.sigma_init = 2.0;
  const Tensor z = random_tensor({3}, init);
  Rng a(21), b(21);
  auto ra = plan(lm, z, std::nullopt, hp, a, 10);
  auto rb = plan(lm, z, std::nullopt, hp, b, 10, ActMode::sample, 4);
  CHECK(ra.action.data == rb.action.data);
  CHECK(ra.mean.data == rb.mean.data);
  for (double v : ra.action.data) CHECK(std::abs(v) <= 1.0);
  for (std::size_t j = 0; j < hp.iterations; ++j)
    CHECK(ra.elite_mean_return[j] >= ra.candidate_mean_return[j]);
}

TEST_CASE("planner finds the optimum of a one-step quadratic") {
  QuadModel m(Tensor({1, 1}, 0.4));
  HyperParams hp = quad_hp(1);
  int hits = 0, greedy_hits = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    auto r = plan(m, zero_latent(), std::nullopt, hp, rng, hp.epsilon.decay_steps);
    if (std::abs(r.action.data[0] - 0.4) < 0.05) ++hits;
    Rng rng2(seed);
    auto g = plan(m, zero_latent(), std::nullopt, hp, rng2, 0, ActMode::greedy);
    if (std::abs(g.action.data[0] - 0.4) < 0.05) ++greedy_hits;
  }
  CHECK(hits >= 95);
  CHECK(greedy_hits >= 95);
}

TEST_CASE("best candidate return improves across iterations") {
  int monotone = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng trng(1000 + seed);
    Tensor target({5, 4});
    for (double& v : target.data) v = trng.uniform(-0.8, 0.8);
    QuadModel m(target);
    HyperParams hp = quad_hp(5);
    hp.epsilon = {0.5, 0.01, 1};
    Rng rng(seed);
    auto r = plan(m, zero_latent(), std::nullopt, hp, rng, 1);
    bool ok = true;
    for (std::size_t j = 1; j < r.best_return.size(); ++j)
      ok = ok && r.best_return[j] >= r.best_return[j - 1];
    monotone += ok;
    for (std::size_t j = 0; j < r.best_return.size(); ++j)
      CHECK(r.elite_mean_return[j] >= r.candidate_mean_return[j]);
  }
  CHECK(monotone >= 95);
}

TEST_CASE("literal weights stay non-negative without standardisation") {
  RefitOptions opt;
  opt.tau = 1.3;
  opt.eps_floor = 0.2;
  opt.standardize = false;
  opt.mode = WeightMode::literal_linear;
  const auto w = elite_weights({3.0, -7.0}, opt);
  CHECK(w[0] == 1.0);
  CHECK(w[1] == 0.0);
  const std::vector<CandidateTrajectory> e{{Tensor({1, 1}, 0.5), 3.0, CandidateSource::gaussian},
                                           {Tensor({1, 1}, -0.2), -7.0, CandidateSource::gaussian}};
  const PlanDistribution d = refit_distribution(e, opt);
  CHECK(d.mu.data[0] == 0.5);
  CHECK(d.sigma.data[0] == 0.2);
}
