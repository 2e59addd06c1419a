#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "tdmpc/trainer.hpp"
#include "trainer_fixture.hpp"

using namespace tdmpc;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

bool bitwise_equal(const ToldParams& a, const ToldParams& b) {
  NamedTensors x, y;
  pack(x, "", a);
  pack(y, "", b);
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i].first != y[i].first || x[i].second.shape != y[i].second.shape) return false;
    if (std::memcmp(x[i].second.data.data(), y[i].second.data.data(),
                    x[i].second.numel() * sizeof(double)) != 0)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("return summaries") {
  auto r = evaluate_episodes([](std::size_t e) { return double(e + 1); }, 3);
  CHECK(r.mean == doctest::Approx(2.0));
  CHECK(r.std == doctest::Approx(std::sqrt(2.0 / 3.0)));
  CHECK(r.std == doctest::Approx(0.8165).epsilon(1e-4));
  r = evaluate_episodes([](std::size_t) { return 0.0; }, 4);
  CHECK(r.mean == 0.0);
  CHECK(r.std == 0.0);
  r = evaluate_episodes([](std::size_t) { return -17.5; }, 1);
  CHECK(r.std == 0.0);
}

TEST_CASE("metrics rows round-trip through the CSV") {
  const fs::path p = fs::temp_directory_path() / "tdmpc_metrics_rt.csv";
  MetricsRow a;
  a.env_step = 200;
  a.episode_return = -1234.5678901234;
  a.losses = LossLog{0.1, 0.2, 0.3, 0.4, 1.0, -5.0};
  a.wall_seconds = 1.5;
  MetricsRow b;
  b.env_step = 400;
  b.eval_mean = -150.25;
  b.eval_std = 3.0;
  {
    std::ofstream f(p);
    f << metrics_header() << "\n" << format_metrics_row(a) << "\n" << format_metrics_row(b) << "\n";
  }
  auto rows = read_metrics(p.string());
  REQUIRE(rows.size() == 2);
  CHECK(*rows[0].episode_return == *a.episode_return);
  CHECK(rows[0].losses->reconstruction == 0.4);
  CHECK_FALSE(rows[0].eval_mean);
  CHECK_FALSE(rows[1].episode_return);
  CHECK_FALSE(rows[1].losses);
  CHECK(*rows[1].eval_std == 3.0);
  CHECK(format_metrics_row(b) == "400,,,,,,,,-150.25,3,0");
}

TEST_CASE("checkpoints round-trip bitwise") {
  for (RunConfig cfg : {tiny_run("ckpt_s"), tiny_image_run("ckpt_i")}) {
    ToldModel model(model_config(cfg));
    Rng rng(3);
    Checkpoint c{model.init(rng), {}, {}, 1234};
    c.target = make_target(c.theta);
    c.optimizer = make_told_optimizer(c.theta);
    c.optimizer.at("encoder").step = 17;
    c.optimizer.at("encoder").m.begin()->second.weights.data[0] = -0.0;
    c.optimizer.at("dynamics").v.begin()->second.biases.data[0] = 1e-300;
    const std::string path = (fs::path(cfg.out_dir) / "c.bin").string();
    save_checkpoint(path, c);
    Rng other(4);
    Checkpoint d = load_checkpoint(path, model.init(other));
    CHECK(bitwise_equal(c.theta, d.theta));
    CHECK(bitwise_equal(c.target.params, d.target.params));
    CHECK(d.env_step == 1234);
    CHECK(d.optimizer.at("encoder").step == 17);
    CHECK(encode_checkpoint(pack_checkpoint(c)) == encode_checkpoint(pack_checkpoint(d)));
  }
}

TEST_CASE("corrupted checkpoints are rejected") {
  RunConfig cfg = tiny_run("ckpt_bad");
  ToldModel model(model_config(cfg));
  Rng rng(3);
  ToldParams p = model.init(rng);
  const std::string good = encode_checkpoint(pack_checkpoint({p, make_target(p), make_told_optimizer(p), 5}));
  CHECK(good.substr(0, 8) == "TDMPCSRL");
  std::string bad = good;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
  bad = good;
  bad[8] = 2;
  CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(good.substr(0, good.size() - 3)), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(good + "x"), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(good.substr(0, 10)), CheckpointError);
  // wrong architecture
  RunConfig big = cfg;
  big.hp.hidden_dim = 17;
  ToldModel other(model_config(big));
  CHECK_THROWS_AS(unpack_checkpoint(decode_checkpoint(good), other.init(rng)), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt.bin", p), CheckpointError);
}

TEST_CASE("seed-only run performs no updates") {
  RunConfig cfg = tiny_run("seed_only");
  cfg.total_env_steps = cfg.seed_steps = 100;
  cfg.eval_interval = 1000;
  Trainer t(cfg);
  t.run();
  CHECK(t.updates() == 0);
  REQUIRE(t.rows().size() == 2);
  for (const auto& r : t.rows()) {
    CHECK(r.episode_return);
    CHECK_FALSE(r.losses);
    CHECK_FALSE(r.eval_mean);
  }
  CHECK(fs::exists(fs::path(cfg.out_dir) / "checkpoint.bin"));
  CHECK(fs::exists(fs::path(cfg.out_dir) / "config.resolved"));
}

TEST_CASE("update accounting and metrics ordering") {
  RunConfig cfg = tiny_run("accounting");
  cfg.updates_per_env_step = 2;
  Trainer t(cfg);
  t.run();
  CHECK(t.updates() == (cfg.total_env_steps - cfg.seed_steps) * 2);
  CHECK(t.skipped_updates() == 0);
  auto rows = read_metrics((fs::path(cfg.out_dir) / "metrics.csv").string());
  REQUIRE(rows.size() == 3);  // episodes end at 50, 100 (with evaluation), 150
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].env_step > rows[i - 1].env_step);
  CHECK(rows[1].env_step == 100);
  CHECK(rows[1].eval_mean);
  CHECK(rows[1].episode_return);
  CHECK(rows[2].losses);
  CHECK(rows[2].losses->reconstruction > 0.0);
}

TEST_CASE("identical runs write identical files") {
  RunConfig a = tiny_run("det_a"), b = tiny_run("det_b");
  Trainer(a).run();
  Trainer(b).run();
  CHECK(slurp(fs::path(a.out_dir) / "metrics.csv") == slurp(fs::path(b.out_dir) / "metrics.csv"));
  CHECK(slurp(fs::path(a.out_dir) / "checkpoint.bin") ==
        slurp(fs::path(b.out_dir) / "checkpoint.bin"));
  RunConfig c = tiny_run("det_c");
  c.seed = 8;
  Trainer(c).run();
  CHECK(slurp(fs::path(a.out_dir) / "metrics.csv") != slurp(fs::path(c.out_dir) / "metrics.csv"));
}

TEST_CASE("resumed runs match uninterrupted runs") {
  RunConfig a = tiny_run("resume_a"), b = tiny_run("resume_b");
  Trainer(a).run();
  {
    Trainer t(b);
    t.run_until(75);
    t.save();
    // rows written after the snapshot are discarded on resume
    t.run_until(120);
  }
  Trainer r = Trainer::resume(b);
  CHECK(r.env_step() == 75);
  r.run();
  CHECK(slurp(fs::path(a.out_dir) / "metrics.csv") == slurp(fs::path(b.out_dir) / "metrics.csv"));
  CHECK(slurp(fs::path(a.out_dir) / "checkpoint.bin") ==
        slurp(fs::path(b.out_dir) / "checkpoint.bin"));
  CHECK(slurp(fs::path(a.out_dir) / "resume.bin") == slurp(fs::path(b.out_dir) / "resume.bin"));
}

TEST_CASE("resume for zero steps preserves the state") {
  RunConfig a = tiny_run("resume0");
  Trainer t(a);
  t.run_until(100);
  t.save();
  Trainer r = Trainer::resume(a);
  CHECK(bitwise_equal(r.params(), t.params()));
  CHECK(bitwise_equal(r.target().params, t.target().params));
  const auto ea = evaluate(t.model(), t.params(), a.env, a.hp, 2, 99);
  const auto eb = evaluate(r.model(), r.params(), a.env, a.hp, 2, 99);
  CHECK(ea.returns == eb.returns);
  CHECK(r.rows().size() == t.rows().size());
}

TEST_CASE("image-mode training keeps decoder outputs in range") {
  RunConfig cfg = tiny_image_run("image");
  Trainer t(cfg);
  std::size_t checked = 0;
  t.on_update = [&](const Trainer& tr, const LossResult& res) {
    const Tensor rec = tr.model().reconstruct(tr.params(), res.latents[0]);
    for (double v : rec.data) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
    ++checked;
  };
  t.run();
  CHECK(checked == cfg.total_env_steps - cfg.seed_steps);
  for (const LossLog& l : t.update_log()) CHECK(l.reconstruction > 0.0);
}

TEST_CASE("non-finite losses abort after ten in a row") {
  RunConfig cfg = tiny_run("diverge");
  ToldModel model(model_config(cfg));
  Rng rng(1);
  ToldParams p = model.init(rng);
  p.decoder.begin()->second.weights.data[0] = std::nan("");
  Trainer t(cfg, &p);
  CHECK_THROWS_AS(t.run(), Diverged);
  CHECK(t.skipped_updates() == kMaxBadUpdates);
  CHECK(t.env_step() == cfg.seed_steps + kMaxBadUpdates);
  CHECK(fs::exists(fs::path(cfg.out_dir) / "checkpoint.bin"));
}

TEST_CASE("pretraining") {
  RunConfig cfg = tiny_run("pretrain");
  cfg.hp.c4 = 0.0;
  CHECK_THROWS_AS(pretrain_world_model(cfg, 10), ConfigError);
  cfg.hp.c4 = 1.0;
  ToldModel model(model_config(cfg));
  Rng init(RunStreams(cfg.seed).init);
  const ToldParams fresh = model.init(init);
  CHECK(bitwise_equal(pretrain_world_model(cfg, 0), fresh));

  const ToldParams trained = pretrain_world_model(cfg, 600);
  CHECK(bitwise_equal(ToldParams{{}, {}, trained.reward, trained.q, trained.policy, {}},
                      ToldParams{{}, {}, fresh.reward, fresh.q, fresh.policy, {}}));
  CHECK_FALSE(bitwise_equal(trained, fresh));

  // reconstruction error on held-out random states
  Rng held(1234);
  double before = 0.0, after = 0.0;
  for (int i = 0; i < 200; ++i) {
    EnvState s;
    s.theta = held.uniform(-3.14159, 3.14159);
    s.theta_dot = held.uniform(-3.0, 3.0);
    const Tensor o = state_observation(s, cfg.env);
    auto err = [&](const ToldParams& p) {
      const Tensor r = model.reconstruct(p, model.encode(p, o));
      double e = 0.0;
      for (std::size_t k = 0; k < 3; ++k) e += (r.data[k] - o.data[k]) * (r.data[k] - o.data[k]);
      return e;
    };
    before += err(fresh);
    after += err(trained);
  }
  MESSAGE("held-out reconstruction error: " << before / 200 << " -> " << after / 200);
  CHECK(after < before);

  // usable as initialisation
  RunConfig run = tiny_run("pretrain_init");
  run.hp.c4 = 1.0;
  Trainer t(run, &trained);
  CHECK(bitwise_equal(t.params(), trained));
  CHECK(bitwise_equal(t.target().params, trained));
}
