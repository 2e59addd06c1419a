#include "tdmpc/planner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>

namespace tdmpc {

namespace {

constexpr std::size_t kChunk = 64;

void check_actions(const Tensor& actions, std::size_t m) {
  if (actions.rank() != 2 || actions.dim(1) != m || actions.dim(0) == 0)
    throw ShapeError("action sequence must be [H," + std::to_string(m) + "], got " +
                     shape_str(actions.shape));
}

Tensor broadcast_rows(const Tensor& z0, std::size_t n) {
  const std::size_t d = z0.numel();
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i)
    std::copy(z0.data.begin(), z0.data.end(), out.data.begin() + i * d);
  return out;
}

// Returns for sequences [first, first + n), all sharing horizon H.
void evaluate_chunk(const LatentModel& model, const Tensor& z0,
                    const std::vector<Tensor>& actions, std::size_t first, std::size_t n,
                    double gamma, double* out) {
  const std::size_t m = model.action_dim();
  const std::size_t H = actions[first].dim(0);
  Tensor z = broadcast_rows(z0, n);
  std::vector<double> g(n, 0.0);
  double discount = 1.0;
  Tensor a({n, m});
  for (std::size_t t = 0; t < H; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor& seq = actions[first + i];
      std::copy_n(seq.data.begin() + t * m, m, a.data.begin() + i * m);
    }
    const Tensor r = model.reward(z, a);
    for (std::size_t i = 0; i < n; ++i) g[i] += discount * r.data[i];
    z = model.next(z, a);
    discount *= gamma;
  }
  const Tensor aH = model.act(z);
  const Tensor q = model.value(z, aH);
  for (std::size_t i = 0; i < n; ++i) {
    g[i] += discount * q.data[i];
    if (!std::isfinite(g[i]))
      throw std::domain_error("non-finite return estimate for candidate " +
                              std::to_string(first + i));
    out[i] = g[i];
  }
}

Tensor clamp_unit(Tensor t) {
  for (double& v : t.data) v = std::clamp(v, -1.0, 1.0);
  return t;
}

}  // namespace

double evaluate_return(const LatentModel& model, const Tensor& z0, const Tensor& actions,
                       double gamma) {
  const std::vector<Tensor> one{actions};
  return evaluate_returns(model, z0, one, gamma, 1).front();
}

std::vector<double> evaluate_returns(const LatentModel& model, const Tensor& z0,
                                     const std::vector<Tensor>& actions, double gamma,
                                     std::size_t threads) {
  const std::size_t m = model.action_dim();
  if (z0.numel() != model.latent_dim())
    throw ShapeError("latent state must have " + std::to_string(model.latent_dim()) +
                     " entries, got " + shape_str(z0.shape));
  std::vector<double> out(actions.size(), 0.0);
  if (actions.empty()) return out;
  const std::size_t H = actions.front().dim(0);
  for (const Tensor& a : actions) {
    check_actions(a, m);
    if (a.dim(0) != H) throw ShapeError("candidate horizons differ");
  }
  const std::size_t chunks = (actions.size() + kChunk - 1) / kChunk;
  auto run = [&](std::size_t c) {
    const std::size_t first = c * kChunk;
    const std::size_t n = std::min(kChunk, actions.size() - first);
    evaluate_chunk(model, z0, actions, first, n, gamma, out.data() + first);
  };
  threads = std::clamp<std::size_t>(threads, 1, chunks);
  if (threads == 1) {
    for (std::size_t c = 0; c < chunks; ++c) run(c);
    return out;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t c = w; c < chunks; c += threads) run(c);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

std::size_t planner_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("TDMPC_SRL_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) n = static_cast<std::size_t>(v);
  }
  return n;
}

std::vector<CandidateTrajectory> policy_candidates(const LatentModel& model, const Tensor& z0,
                                                   std::size_t horizon, std::size_t count,
                                                   double noise, double gamma,
                                                   std::uint64_t noise_seed) {
  std::vector<CandidateTrajectory> out;
  if (count == 0) return out;
  const std::size_t m = model.action_dim();
  Tensor z = broadcast_rows(z0, count);
  std::vector<Tensor> seqs(count, Tensor({horizon, m}));
  for (std::size_t t = 0; t < horizon; ++t) {
    Tensor a = model.act(z);
    for (std::size_t i = 0; i < count; ++i) {
      CounterRng r(derive_seed(noise_seed, t, i));
      for (std::size_t j = 0; j < m; ++j) {
        double& v = a.data[i * m + j];
        // the first rollout stays noise-free so the plain policy is always a candidate
        if (i > 0 && noise > 0.0) v += noise * r.normal();
        v = std::clamp(v, -1.0, 1.0);
        seqs[i].data[t * m + j] = v;
      }
    }
    z = model.next(z, a);
  }
  const std::vector<double> g = evaluate_returns(model, z0, seqs, gamma, 1);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back({std::move(seqs[i]), g[i], CandidateSource::policy});
  return out;
}

std::vector<CandidateTrajectory> sample_candidates(const PlanDistribution& dist,
                                                   const LatentModel& model, const Tensor& z0,
                                                   const SampleOptions& opt, Rng& rng) {
  if (opt.n_gauss == 0) throw std::invalid_argument("sample_candidates: n_gauss must be >= 1");
  if (dist.mu.shape != dist.sigma.shape) throw ShapeError("mu and sigma shapes differ");
  const std::size_t m = model.action_dim();
  check_actions(dist.mu, m);
  const std::size_t H = dist.mu.dim(0);
  const std::uint64_t base = rng.next_u64();
  std::vector<Tensor> seqs(opt.n_gauss, Tensor({H, m}));
  for (std::size_t c = 0; c < opt.n_gauss; ++c) {
    CounterRng r(derive_seed(base, c));
    Tensor& s = seqs[c];
    for (std::size_t k = 0; k < s.numel(); ++k)
      s.data[k] = std::clamp(dist.mu.data[k] + dist.sigma.data[k] * r.normal(), -1.0, 1.0);
  }
  const std::vector<double> g = evaluate_returns(model, z0, seqs, opt.gamma, opt.threads);
  std::vector<CandidateTrajectory> out =
      policy_candidates(model, z0, H, opt.n_policy, opt.policy_noise, opt.gamma,
                        derive_seed(base, 0xfeed));
  out.reserve(out.size() + opt.n_gauss);
  for (std::size_t c = 0; c < opt.n_gauss; ++c)
    out.push_back({std::move(seqs[c]), g[c], CandidateSource::gaussian});
  return out;
}

std::vector<CandidateTrajectory> select_elites(std::vector<CandidateTrajectory> candidates,
                                               std::size_t k) {
  if (k == 0) throw std::invalid_argument("select_elites: k must be >= 1");
  if (k > candidates.size())
    throw std::invalid_argument("select_elites: k=" + std::to_string(k) + " exceeds " +
                                std::to_string(candidates.size()) + " candidates");
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const CandidateTrajectory& a, const CandidateTrajectory& b) {
                     return a.return_g > b.return_g;
                   });
  candidates.resize(k);
  return candidates;
}

std::vector<double> elite_weights(const std::vector<double>& returns, const RefitOptions& opt) {
  const std::size_t k = returns.size();
  if (k == 0) throw std::invalid_argument("elite_weights: no elites");
  std::vector<double> g = returns;
  if (opt.standardize && k > 1) {
    double mean = 0.0;
    for (double v : g) mean += v;
    mean /= static_cast<double>(k);
    double var = 0.0;
    for (double v : g) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(k));
    if (sd > 0.0)
      for (double& v : g) v = (v - mean) / sd;
    else
      for (double& v : g) v = 0.0;
  }
  const double best = *std::max_element(g.begin(), g.end());
  std::vector<double> w(k);
  if (opt.mode == WeightMode::exponential) {
    for (std::size_t i = 0; i < k; ++i) w[i] = std::exp(opt.tau * (g[i] - best));
  } else {
    // tau * (G - G*) is <= 0; shift so the worst elite sits at zero. Written
    // as tau * (G - G_worst) so rounding cannot make a weight negative.
    const double worst = *std::min_element(g.begin(), g.end());
    for (std::size_t i = 0; i < k; ++i) w[i] = opt.tau * (g[i] - worst);
  }
  double total = 0.0;
  for (double v : w) total += v;
  if (!(total > 0.0) || !std::isfinite(total)) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(k));
    return w;
  }
  for (double& v : w) v /= total;
  return w;
}

PlanDistribution refit_distribution(const std::vector<CandidateTrajectory>& elites,
                                    const RefitOptions& opt) {
  if (elites.empty()) throw std::invalid_argument("refit_distribution: no elites");
  std::vector<double> g;
  g.reserve(elites.size());
  for (const auto& e : elites) g.push_back(e.return_g);
  const std::vector<double> w = elite_weights(g, opt);
  const Shape shape = elites.front().actions.shape;
  PlanDistribution d{Tensor(shape, 0.0), Tensor(shape, 0.0)};
  for (std::size_t i = 0; i < elites.size(); ++i) {
    if (elites[i].actions.shape != shape) throw ShapeError("elite action shapes differ");
    for (std::size_t k = 0; k < d.mu.numel(); ++k) d.mu.data[k] += w[i] * elites[i].actions.data[k];
  }
  for (std::size_t i = 0; i < elites.size(); ++i)
    for (std::size_t k = 0; k < d.mu.numel(); ++k) {
      const double dev = elites[i].actions.data[k] - d.mu.data[k];
      d.sigma.data[k] += w[i] * dev * dev;
    }
  for (double& s : d.sigma.data) s = std::max(std::sqrt(s), opt.eps_floor);
  return d;
}

double epsilon_at(std::int64_t step, const EpsilonSchedule& s) {
  if (step < 0) throw std::invalid_argument("epsilon_at: negative step");
  if (s.decay_steps <= 0 || step >= s.decay_steps) return s.end;
  const double f = static_cast<double>(step) / static_cast<double>(s.decay_steps);
  return s.start + f * (s.end - s.start);
}

PlanResult plan(const LatentModel& model, const Tensor& z, const std::optional<Tensor>& warm_mu,
                const HyperParams& hp, Rng& rng, std::int64_t step, ActMode mode,
                std::size_t threads) {
  const std::size_t H = hp.horizon;
  const std::size_t m = model.action_dim();
  PlanDistribution dist{Tensor({H, m}, 0.0), Tensor({H, m}, hp.sigma_init)};
  if (warm_mu) {
    require_shape(*warm_mu, {H, m}, "warm_mu");
    for (std::size_t t = 0; t < H; ++t) {
      const std::size_t src = std::min(t + 1, H - 1);
      std::copy_n(warm_mu->data.begin() + src * m, m, dist.mu.data.begin() + t * m);
    }
  }
  const double eps = epsilon_at(step, hp.epsilon);
  const RefitOptions refit{hp.tau, eps, hp.standardize_returns, hp.weight_mode};
  const std::uint64_t base = rng.next_u64();

  // policy rollouts do not depend on the Gaussian, so they are scored once
  const std::vector<CandidateTrajectory> from_policy =
      policy_candidates(model, z, H, hp.num_policy, eps, hp.gamma, derive_seed(base, 1));
  SampleOptions so{hp.num_samples, 0, hp.gamma, 0.0, threads};

  PlanResult res;
  std::vector<CandidateTrajectory> elites;
  for (std::size_t j = 0; j < hp.iterations; ++j) {
    Rng round(derive_seed(base, 2, j));
    std::vector<CandidateTrajectory> cands = sample_candidates(dist, model, z, so, round);
    cands.insert(cands.end(), from_policy.begin(), from_policy.end());
    double mean_all = 0.0, best = cands.front().return_g;
    for (const auto& c : cands) {
      mean_all += c.return_g;
      best = std::max(best, c.return_g);
    }
    elites = select_elites(std::move(cands), std::min(hp.num_elites, hp.num_samples + hp.num_policy));
    double mean_elite = 0.0;
    for (const auto& e : elites) mean_elite += e.return_g;
    res.best_return.push_back(best);
    res.candidate_mean_return.push_back(mean_all / static_cast<double>(hp.num_samples + hp.num_policy));
    res.elite_mean_return.push_back(mean_elite / static_cast<double>(elites.size()));
    dist = refit_distribution(elites, refit);
  }

  std::size_t pick = 0;
  if (!elites.empty() && mode == ActMode::sample) {
    std::vector<double> g;
    for (const auto& e : elites) g.push_back(e.return_g);
    const std::vector<double> w = elite_weights(g, refit);
    Rng pick_rng(derive_seed(base, 3));
    double u = pick_rng.uniform(), acc = 0.0;
    pick = w.size() - 1;
    for (std::size_t i = 0; i < w.size(); ++i) {
      acc += w[i];
      if (u < acc) {
        pick = i;
        break;
      }
    }
  }
  res.action = Tensor({m}, 0.0);
  const Tensor& src = elites.empty() ? dist.mu : elites[pick].actions;
  std::copy_n(src.data.begin(), m, res.action.data.begin());
  res.action = clamp_unit(std::move(res.action));
  res.mean = dist.mu;
  return res;
}

}  // namespace tdmpc
