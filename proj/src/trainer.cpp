#include "tdmpc/trainer.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace tdmpc {

namespace fs = std::filesystem;

namespace {

constexpr char kResumeMagic[8] = {'T', 'D', 'M', 'P', 'C', 'R', 'S', 'M'};
constexpr std::uint32_t kResumeVersion = 1;

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

Tensor random_action(std::size_t m, Rng& rng) {
  Tensor a({m});
  for (double& v : a.data) v = rng.uniform(-1.0, 1.0);
  return a;
}

std::vector<nn::ParamSet*> model_grads(ToldParams& g) {
  std::vector<nn::ParamSet*> out{&g.encoder, &g.dynamics, &g.reward};
  for (auto& q : g.q) out.push_back(&q);
  out.push_back(&g.decoder);
  return out;
}

// Adam step on the named heads only.
void step_heads(ToldParams& theta, ToldParams& grads, ToldOptimizer& opt, double lr,
                const std::function<bool(const std::string&)>& include) {
  std::map<std::string, nn::ParamSet*> g;
  grads.for_each_head([&](const std::string& head, nn::ParamSet& s) { g[head] = &s; });
  theta.for_each_head([&](const std::string& head, nn::ParamSet& s) {
    if (include(head)) nn::optimizer_step(s, *g.at(head), opt.at(head), lr);
  });
}

}  // namespace

EvalResult summarize_returns(std::vector<double> returns) {
  EvalResult r;
  r.returns = std::move(returns);
  if (r.returns.empty()) return r;
  double sum = 0.0;
  for (double v : r.returns) sum += v;
  r.mean = sum / static_cast<double>(r.returns.size());
  double var = 0.0;
  for (double v : r.returns) var += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(var / static_cast<double>(r.returns.size()));
  return r;
}

EvalResult evaluate_episodes(const std::function<double(std::size_t)>& run_episode,
                             std::size_t episodes) {
  std::vector<double> returns;
  for (std::size_t e = 0; e < episodes; ++e) returns.push_back(run_episode(e));
  return summarize_returns(std::move(returns));
}

EvalResult evaluate(const ToldModel& model, const ToldParams& theta, const EnvSpec& env,
                    const HyperParams& hp, std::size_t episodes, std::uint64_t seed,
                    std::size_t threads) {
  const ToldLatentModel lm(model, theta);
  // exploration floor at its final value
  const std::int64_t step = std::max<std::int64_t>(hp.epsilon.decay_steps, 0);
  return evaluate_episodes(
      [&](std::size_t e) {
        Environment sim(env);
        Rng reset_rng(derive_seed(seed, e));
        Tensor obs = sim.reset(reset_rng);
        std::optional<Tensor> warm;
        double ret = 0.0;
        for (std::size_t t = 0;; ++t) {
          Rng rng(derive_seed(seed, e, t + 1));
          PlanResult p = plan(lm, model.encode(theta, obs), warm, hp, rng, step, ActMode::greedy,
                              threads);
          warm = std::move(p.mean);
          StepResult r = sim.step(p.action);
          ret += r.reward;
          if (r.done) break;
          obs = std::move(r.obs);
        }
        return ret;
      },
      episodes);
}

EvalResult evaluate_random(const EnvSpec& env, std::size_t episodes, std::uint64_t seed) {
  return evaluate_episodes(
      [&](std::size_t e) {
        Environment sim(env);
        Rng reset_rng(derive_seed(seed, e));
        sim.reset(reset_rng);
        Rng rng(derive_seed(seed, e, 1));
        double ret = 0.0;
        for (;;) {
          StepResult r = sim.step(random_action(env.action_dim(), rng));
          ret += r.reward;
          if (r.done) return ret;
        }
      },
      episodes);
}

const char* metrics_header() {
  return "env_step,episode_return,loss_reward,loss_value,loss_consistency,loss_reconstruction,"
         "loss_total,loss_policy,eval_mean,eval_std,wall_seconds";
}

std::string format_metrics_row(const MetricsRow& row) {
  auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  std::string s = std::to_string(row.env_step) + "," + opt(row.episode_return) + ",";
  if (row.losses) {
    const LossLog& l = *row.losses;
    for (double v : {l.reward, l.value, l.consistency, l.reconstruction, l.total, l.policy})
      s += fmt(v) + ",";
  } else {
    s += ",,,,,,";
  }
  s += opt(row.eval_mean) + "," + opt(row.eval_std) + "," + fmt(row.wall_seconds);
  return s;
}

std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::string line;
  if (!std::getline(f, line) || line != metrics_header())
    throw std::runtime_error(path + " does not start with the metrics header");
  std::vector<MetricsRow> rows;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    if (cells.size() != 11)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 11 fields");
    auto num = [&](const std::string& cell) -> std::optional<double> {
      if (cell.empty()) return std::nullopt;
      double v = 0.0;
      auto r = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (r.ec != std::errc() || r.ptr != cell.data() + cell.size())
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
      return v;
    };
    MetricsRow r;
    r.env_step = static_cast<std::int64_t>(num(cells[0]).value_or(0.0));
    r.episode_return = num(cells[1]);
    if (!cells[2].empty())
      r.losses = LossLog{*num(cells[2]), *num(cells[3]), *num(cells[4]),
                         *num(cells[5]), *num(cells[6]), *num(cells[7])};
    r.eval_mean = num(cells[8]);
    r.eval_std = num(cells[9]);
    r.wall_seconds = num(cells[10]).value_or(0.0);
    rows.push_back(r);
  }
  return rows;
}

LossLog loss_log(const LossBreakdown& b, const HyperParams& hp) {
  LossLog l;
  for (std::size_t i = 0; i < b.per_step.size(); ++i) {
    const double w = step_weight(i, hp);
    l.reward += w * b.per_step[i].reward;
    l.value += w * b.per_step[i].value;
    l.consistency += w * b.per_step[i].consistency;
    l.reconstruction += w * b.per_step[i].reconstruction;
  }
  l.total = b.total;
  l.policy = b.policy_loss;
  return l;
}

RunStreams::RunStreams(std::uint64_t seed)
    : init(derive_seed(seed, hash_name("init"))),
      env(derive_seed(seed, hash_name("env"))),
      explore(derive_seed(seed, hash_name("explore"))),
      planner(derive_seed(seed, hash_name("planner"))),
      replay(derive_seed(seed, hash_name("replay"))),
      augment(derive_seed(seed, hash_name("augment"))),
      eval(derive_seed(seed, hash_name("eval"))) {}

void augment_batch(TrainBatch& batch, Rng& rng, int max_shift) {
  for (Tensor& obs : batch.obs) {
    const std::size_t B = obs.dim(0), per = obs.numel() / B;
    Shape one(obs.shape.begin() + 1, obs.shape.end());
    for (std::size_t b = 0; b < B; ++b) {
      Tensor x(one, std::vector<double>(obs.data.begin() + b * per, obs.data.begin() + (b + 1) * per));
      Tensor y = shift_augment(x, rng, max_shift);
      std::copy(y.data.begin(), y.data.end(), obs.data.begin() + b * per);
    }
  }
}

Trainer::Trainer(RunConfig cfg, const ToldParams* init)
    : cfg_((cfg.validate(), std::move(cfg))),
      streams_(cfg_.seed),
      model_(model_config(cfg_)),
      theta_([&] {
        if (init) {
          model_.validate(*init);
          return *init;
        }
        Rng rng(streams_.init);
        return model_.init(rng);
      }()),
      target_(make_target(theta_)),
      opt_(make_told_optimizer(theta_)),
      env_(cfg_.env),
      buffer_(cfg_.env.obs_shape(), cfg_.env.action_dim(),
              ReplayOptions{cfg_.hp.buffer_capacity, cfg_.hp.horizon, cfg_.hp.per_alpha,
                            cfg_.hp.per_beta, cfg_.hp.per_eps,
                            cfg_.env.obs_mode == ObsMode::image}),
      threads_(cfg_.threads ? cfg_.threads : planner_threads()),
      started_(std::chrono::steady_clock::now()) {
  begin_episode();
}

void Trainer::begin_episode() {
  Rng rng(derive_seed(streams_.env, episode_));
  obs_ = env_.reset(rng);
  warm_.reset();
  episode_return_ = 0.0;
  loss_sum_ = {};
  loss_count_ = 0;
}

double Trainer::elapsed() const {
  if (!cfg_.wall_clock) return 0.0;
  const std::chrono::duration<double> d = std::chrono::steady_clock::now() - started_;
  return elapsed_before_ + d.count();
}

void Trainer::open_outputs() {
  if (outputs_open_) return;
  fs::create_directories(cfg_.out_dir);
  const std::string metrics = (fs::path(cfg_.out_dir) / "metrics.csv").string();
  if (env_step_ == 0 && rows_.empty()) {
    std::ofstream f(metrics, std::ios::trunc);
    f << metrics_header() << "\n";
    metrics_bytes_ = std::string(metrics_header()).size() + 1;
  } else {
    // drop rows written after the snapshot we resumed from
    fs::resize_file(metrics, metrics_bytes_);
  }
  std::ofstream(fs::path(cfg_.out_dir) / "config.resolved", std::ios::trunc) << config_to_text(cfg_);
  outputs_open_ = true;
}

void Trainer::emit(MetricsRow row) {
  row.wall_seconds = elapsed();
  const std::string line = format_metrics_row(row) + "\n";
  std::ofstream f(fs::path(cfg_.out_dir) / "metrics.csv", std::ios::app);
  f << line;
  f.flush();
  if (!f) throw std::runtime_error("cannot append to metrics.csv in " + cfg_.out_dir);
  metrics_bytes_ += line.size();
  rows_.push_back(row);
}

void Trainer::run() { run_until(cfg_.total_env_steps); }

void Trainer::run_until(std::size_t target) {
  target = std::min(target, cfg_.total_env_steps);
  open_outputs();
  while (env_step_ < target) env_step_once();
  if (env_step_ == cfg_.total_env_steps) save();
}

void Trainer::env_step_once() {
  const HyperParams& hp = cfg_.hp;
  Tensor action;
  if (env_step_ < cfg_.seed_steps) {
    Rng rng(derive_seed(streams_.explore, env_step_));
    action = random_action(cfg_.env.action_dim(), rng);
  } else {
    Rng rng(derive_seed(streams_.planner, env_step_));
    const ToldLatentModel lm(model_, theta_);
    PlanResult p = plan(lm, model_.encode(theta_, obs_), warm_, hp, rng,
                        static_cast<std::int64_t>(env_step_), ActMode::sample, threads_);
    action = std::move(p.action);
    warm_ = std::move(p.mean);
  }
  StepResult r = env_.step(action);
  Transition tr{obs_, action, r.reward, r.done, std::nullopt};
  if (r.done) tr.next_s = r.obs;
  buffer_.push(tr);
  episode_return_ += r.reward;
  ++env_step_;
  if (env_step_ > cfg_.seed_steps)
    for (std::size_t u = 0; u < cfg_.updates_per_env_step; ++u) update_once();

  MetricsRow row;
  row.env_step = static_cast<std::int64_t>(env_step_);
  bool any = false;
  if (r.done) {
    row.episode_return = episode_return_;
    if (loss_count_ > 0) {
      const double n = static_cast<double>(loss_count_);
      row.losses = LossLog{loss_sum_.reward / n,         loss_sum_.value / n,
                           loss_sum_.consistency / n,    loss_sum_.reconstruction / n,
                           loss_sum_.total / n,          loss_sum_.policy / n};
    }
    any = true;
    ++episode_;
    begin_episode();
  } else {
    obs_ = std::move(r.obs);
  }
  if (cfg_.eval_interval > 0 && env_step_ % cfg_.eval_interval == 0) {
    const EvalResult ev = evaluate(model_, theta_, cfg_.env, hp, cfg_.eval_episodes,
                                   derive_seed(streams_.eval, env_step_), threads_);
    row.eval_mean = ev.mean;
    row.eval_std = ev.std;
    any = true;
  }
  if (any) emit(row);
  if (cfg_.checkpoint_interval > 0 && env_step_ % cfg_.checkpoint_interval == 0 &&
      env_step_ < cfg_.total_env_steps)
    save();
}

void Trainer::update_once() {
  const HyperParams& hp = cfg_.hp;
  Rng rng(derive_seed(streams_.replay, updates_));
  SampledSlices s = buffer_.sample_slices(hp.batch_size, hp.horizon, rng);
  TrainBatch batch = make_batch(s.slices, s.weights);
  if (cfg_.env.obs_mode == ObsMode::image && cfg_.augment) {
    Rng aug(derive_seed(streams_.augment, updates_));
    augment_batch(batch, aug);
  }
  ++updates_;
  LossResult res;
  PolicyLossResult pl;
  try {
    res = total_loss(model_, theta_, target_, batch, hp, {hp.c4 > 0.0});
    nn::clip_grad_norm(model_grads(res.grads), hp.grad_clip);
    step_heads(theta_, res.grads, opt_, hp.lr, [&](const std::string& head) {
      return head != "policy" && (head != "decoder" || hp.c4 > 0.0);
    });
    pl = policy_loss(model_, theta_, res.latents, hp);
    if (!std::isfinite(pl.loss)) throw NonFiniteLoss("policy loss is not finite");
    nn::clip_grad_norm({&pl.grads}, hp.grad_clip);
    nn::optimizer_step(theta_.policy, pl.grads, opt_.at("policy"), hp.lr);
  } catch (const NonFiniteLoss& e) {
    ++skipped_;
    if (++bad_streak_ >= kMaxBadUpdates) {
      save();
      throw Diverged(std::string("training diverged after ") + std::to_string(bad_streak_) +
                     " consecutive non-finite losses at env step " + std::to_string(env_step_) +
                     ": " + e.what());
    }
    return;
  }
  bad_streak_ = 0;
  target_update(theta_, target_, hp.zeta);
  buffer_.update_priorities(s.indices, res.breakdown.priorities);
  res.breakdown.policy_loss = pl.loss;
  const LossLog l = loss_log(res.breakdown, hp);
  loss_sum_.reward += l.reward;
  loss_sum_.value += l.value;
  loss_sum_.consistency += l.consistency;
  loss_sum_.reconstruction += l.reconstruction;
  loss_sum_.total += l.total;
  loss_sum_.policy += l.policy;
  ++loss_count_;
  update_log_.push_back(l);
  if (on_update) on_update(*this, res);
}

void Trainer::save() const {
  fs::create_directories(cfg_.out_dir);
  const fs::path dir(cfg_.out_dir);
  save_checkpoint((dir / "checkpoint.bin").string(),
                  Checkpoint{theta_, target_, opt_, static_cast<std::int64_t>(env_step_)});

  std::ostringstream os(std::ios::binary);
  io::write_bytes(os, kResumeMagic, sizeof(kResumeMagic));
  io::write_u32(os, kResumeVersion);
  io::write_tensors(os, pack_checkpoint({theta_, target_, opt_,
                                         static_cast<std::int64_t>(env_step_)}));
  for (std::uint64_t v : {std::uint64_t{env_step_}, std::uint64_t{updates_},
                          std::uint64_t{skipped_}, std::uint64_t{bad_streak_},
                          std::uint64_t{episode_}, std::uint64_t{loss_count_}, metrics_bytes_})
    io::write_u64(os, v);
  for (double v : {episode_return_, loss_sum_.reward, loss_sum_.value, loss_sum_.consistency,
                   loss_sum_.reconstruction, loss_sum_.total, loss_sum_.policy, elapsed()})
    io::write_f64(os, v);
  const EnvState& es = env_.state();
  for (double v : {es.theta, es.theta_dot, es.agent[0], es.agent[1], es.goal[0], es.goal[1],
                   es.velocity[0], es.velocity[1]})
    io::write_f64(os, v);
  io::write_u64(os, es.step_count);
  NamedTensors extra;
  extra.emplace_back("obs", obs_);
  if (warm_) extra.emplace_back("warm", *warm_);
  for (std::size_t i = 0; i < es.frames.size(); ++i)
    extra.emplace_back("frame" + std::to_string(i), es.frames[i]);
  io::write_tensors(os, extra);
  io::write_u64(os, update_log_.size());
  for (const LossLog& l : update_log_)
    for (double v : {l.reward, l.value, l.consistency, l.reconstruction, l.total, l.policy})
      io::write_f64(os, v);
  buffer_.save(os);
  io::write_file_atomic((dir / "resume.bin").string(), os.str());
}

Trainer Trainer::resume(RunConfig cfg) {
  const fs::path dir(cfg.out_dir);
  const std::string bytes = io::read_file((dir / "resume.bin").string());
  Trainer t(std::move(cfg));
  std::istringstream is(bytes, std::ios::binary);
  char magic[sizeof(kResumeMagic)];
  io::read_bytes(is, magic, sizeof(magic));
  if (std::string(magic, sizeof(magic)) != std::string(kResumeMagic, sizeof(kResumeMagic)))
    throw CheckpointError("not a resume file (bad magic)");
  if (io::read_u32(is) != kResumeVersion) throw CheckpointError("unsupported resume version");
  Checkpoint c = unpack_checkpoint(io::read_tensors(is), t.theta_);
  t.theta_ = std::move(c.theta);
  t.target_ = std::move(c.target);
  t.opt_ = std::move(c.optimizer);
  t.env_step_ = io::read_u64(is);
  t.updates_ = io::read_u64(is);
  t.skipped_ = io::read_u64(is);
  t.bad_streak_ = io::read_u64(is);
  t.episode_ = io::read_u64(is);
  t.loss_count_ = io::read_u64(is);
  t.metrics_bytes_ = io::read_u64(is);
  t.episode_return_ = io::read_f64(is);
  t.loss_sum_.reward = io::read_f64(is);
  t.loss_sum_.value = io::read_f64(is);
  t.loss_sum_.consistency = io::read_f64(is);
  t.loss_sum_.reconstruction = io::read_f64(is);
  t.loss_sum_.total = io::read_f64(is);
  t.loss_sum_.policy = io::read_f64(is);
  t.elapsed_before_ = io::read_f64(is);
  EnvState es;
  es.theta = io::read_f64(is);
  es.theta_dot = io::read_f64(is);
  es.agent = {io::read_f64(is), io::read_f64(is)};
  es.goal = {io::read_f64(is), io::read_f64(is)};
  es.velocity = {io::read_f64(is), io::read_f64(is)};
  es.step_count = io::read_u64(is);
  for (auto& [name, tensor] : io::read_tensors(is)) {
    if (name == "obs")
      t.obs_ = std::move(tensor);
    else if (name == "warm")
      t.warm_ = std::move(tensor);
    else
      es.frames.push_back(std::move(tensor));
  }
  const std::uint64_t n_log = io::read_u64(is);
  t.update_log_.resize(n_log);
  for (LossLog& l : t.update_log_)
    for (double* v : {&l.reward, &l.value, &l.consistency, &l.reconstruction, &l.total, &l.policy})
      *v = io::read_f64(is);
  t.buffer_.load(is);
  t.env_.set_state(std::move(es));
  const std::string metrics = (dir / "metrics.csv").string();
  if (fs::exists(metrics) && fs::file_size(metrics) >= t.metrics_bytes_) {
    fs::resize_file(metrics, t.metrics_bytes_);
    t.rows_ = read_metrics(metrics);
  } else {
    throw CheckpointError("metrics.csv in " + dir.string() + " is missing or shorter than the snapshot");
  }
  t.started_ = std::chrono::steady_clock::now();
  return t;
}

ToldParams pretrain_world_model(const RunConfig& cfg_in, std::size_t steps) {
  cfg_in.validate();
  if (!(cfg_in.hp.c4 > 0.0)) throw ConfigError("c4", "pretraining needs a positive c4");
  RunConfig cfg = cfg_in;
  HyperParams hp = cfg.hp;
  hp.c1 = 0.0;
  hp.c2 = 0.0;
  const RunStreams streams(cfg.seed);
  ToldModel model(model_config(cfg));
  Rng init(streams.init);
  ToldParams theta = model.init(init);
  if (steps == 0) return theta;
  TargetParams target = make_target(theta);
  ToldOptimizer opt = make_told_optimizer(theta);
  Environment env(cfg.env);
  ReplayBuffer buffer(cfg.env.obs_shape(), cfg.env.action_dim(),
                      ReplayOptions{hp.buffer_capacity, hp.horizon, hp.per_alpha, hp.per_beta,
                                    hp.per_eps, cfg.env.obs_mode == ObsMode::image});
  const std::uint64_t pre = derive_seed(cfg.seed, hash_name("pretrain"));
  std::size_t episode = 0, updates = 0;
  Rng reset_rng(derive_seed(pre, 0, episode));
  Tensor obs = env.reset(reset_rng);
  for (std::size_t t = 0; t < steps; ++t) {
    Rng arng(derive_seed(pre, 1, t));
    const Tensor a = random_action(cfg.env.action_dim(), arng);
    StepResult r = env.step(a);
    Transition tr{obs, a, r.reward, r.done, std::nullopt};
    if (r.done) tr.next_s = r.obs;
    buffer.push(tr);
    if (r.done) {
      Rng rr(derive_seed(pre, 0, ++episode));
      obs = env.reset(rr);
    } else {
      obs = std::move(r.obs);
    }
    if (buffer.eligible() == 0) continue;
    Rng srng(derive_seed(pre, 2, updates));
    SampledSlices s = buffer.sample_slices(hp.batch_size, hp.horizon, srng);
    TrainBatch batch = make_batch(s.slices, s.weights);
    if (cfg.env.obs_mode == ObsMode::image && cfg.augment) {
      Rng aug(derive_seed(pre, 3, updates));
      augment_batch(batch, aug);
    }
    ++updates;
    LossResult res;
    try {
      res = total_loss(model, theta, target, batch, hp, {true});
    } catch (const NonFiniteLoss&) {
      continue;
    }
    nn::clip_grad_norm({&res.grads.encoder, &res.grads.dynamics, &res.grads.decoder},
                       hp.grad_clip);
    step_heads(theta, res.grads, opt, hp.lr, [](const std::string& head) {
      return head == "encoder" || head == "dynamics" || head == "decoder";
    });
    target_update(theta, target, hp.zeta);
    buffer.update_priorities(s.indices, res.breakdown.priorities);
  }
  return theta;
}

}  // namespace tdmpc
