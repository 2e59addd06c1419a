#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "tdmpc/plot.hpp"
#include "tdmpc/trainer.hpp"

namespace fs = std::filesystem;

namespace tdmpc::cli {
namespace {

std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

/// Flags shared by train and pretrain. Unset flags leave the file value alone.
struct ConfigFlags {
  std::string config;
  std::optional<std::string> env, obs_mode, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::optional<double> c4;
  std::vector<std::string> overrides;

  void add(CLI::App* app) {
    app->add_option("--config", config, "key=value config file");
    app->add_option("--env", env, "pendulum_swingup or reacher_easy");
    app->add_option("--obs-mode", obs_mode, "state or image");
    app->add_option("--seed", seed);
    app->add_option("--steps", steps, "total environment steps");
    app->add_option("--c4", c4, "reconstruction loss coefficient");
    app->add_option("--out", out, "output directory");
    app->add_option("overrides", overrides, "extra key=value settings");
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config.empty()) {
      std::ifstream f(config);
      if (!f) throw ConfigError("config", "cannot read " + config);
      std::stringstream ss;
      ss << f.rdbuf();
      apply_config_text(cfg, ss.str());
    }
    if (env) set_config_value(cfg, "env", *env);
    if (obs_mode) set_config_value(cfg, "obs_mode", *obs_mode);
    if (seed) cfg.seed = *seed;
    if (steps) cfg.total_env_steps = *steps;
    if (c4) set_config_value(cfg, "c4", num(*c4));
    if (out) cfg.out_dir = *out;
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError(kv, "expected key=value");
      set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
  }
};

ToldParams layout_for(const RunConfig& cfg) {
  Rng rng(0);
  return ToldModel(model_config(cfg)).init(rng);
}

int cmd_train(const ConfigFlags& flags, const std::string& init_checkpoint, bool resume,
              std::ostream& out) {
  const RunConfig cfg = flags.resolve();
  if (resume) {
    Trainer t = Trainer::resume(cfg);
    t.run();
    out << "resumed at step " << t.env_step() << ", wrote " << cfg.out_dir << "\n";
    return kExitOk;
  }
  std::optional<Checkpoint> init;
  if (!init_checkpoint.empty()) init = load_checkpoint(init_checkpoint, layout_for(cfg));
  Trainer t(cfg, init ? &init->theta : nullptr);
  t.run();
  out << "trained " << t.env_step() << " steps (" << t.updates() << " updates), wrote "
      << cfg.out_dir << "\n";
  return kExitOk;
}

int cmd_pretrain(const ConfigFlags& flags, std::size_t steps, std::ostream& out) {
  const RunConfig cfg = flags.resolve();
  const ToldParams theta = pretrain_world_model(cfg, steps);
  fs::create_directories(cfg.out_dir);
  const std::string path = (fs::path(cfg.out_dir) / "checkpoint.bin").string();
  save_checkpoint(path, Checkpoint{theta, make_target(theta), make_told_optimizer(theta), 0});
  std::ofstream(fs::path(cfg.out_dir) / "config.resolved", std::ios::trunc) << config_to_text(cfg);
  out << "pretrained " << steps << " steps, wrote " << path << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, std::string config, std::optional<std::size_t> episodes,
             std::uint64_t seed, bool baseline, std::ostream& out) {
  if (config.empty()) config = (fs::path(checkpoint).parent_path() / "config.resolved").string();
  if (!fs::exists(config)) throw ConfigError("config", "no config at " + config);
  const RunConfig cfg = load_config_file(config);
  const std::size_t n = episodes.value_or(cfg.eval_episodes);
  if (n == 0) throw ConfigError("episodes", "must be >= 1");
  EvalResult r;
  if (baseline) {
    r = evaluate_random(cfg.env, n, seed);
  } else {
    const Checkpoint ck = load_checkpoint(checkpoint, layout_for(cfg));
    const ToldModel model(model_config(cfg));
    r = evaluate(model, ck.theta, cfg.env, cfg.hp, n, seed,
                 cfg.threads ? cfg.threads : planner_threads());
  }
  out << "eval_mean=" << num(r.mean) << " eval_std=" << num(r.std) << "\n";
  return kExitOk;
}

int cmd_plot(const std::vector<std::string>& runs, const std::string& metric,
             const std::string& svg_path, std::ostream& out, std::ostream& err) {
  std::vector<Series> series;
  for (const auto& r : runs) {
    fs::path p(r);
    if (fs::is_directory(p)) p /= "metrics.csv";
    if (!fs::exists(p)) throw ConfigError("runs", "no metrics.csv at " + p.string());
    series.push_back(extract_series(read_metrics(p.string()), metric));
    if (series.back().steps.empty())
      throw ConfigError("metric", p.string() + " has no values for " + metric);
  }
  const AveragedSeries avg = average_series(series);
  if (avg.resampled)
    err << "warning: runs have different env_step grids; resampled to the coarsest grid ("
        << avg.steps.size() << " points)\n";
  fs::path svg(svg_path);
  if (svg.has_parent_path()) fs::create_directories(svg.parent_path());
  io::write_file_atomic(svg.string(), render_svg(avg, metric));
  fs::path summary = svg;
  summary.replace_extension(".summary.csv");
  io::write_file_atomic(summary.string(), summary_csv(avg));
  out << "wrote " << svg.string() << " and " << summary.string() << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"TD-MPC with a reconstruction head: train, evaluate, pretrain, plot"};
  app.require_subcommand(1);

  ConfigFlags train_flags;
  std::string init_checkpoint;
  bool resume = false;
  auto* train = app.add_subcommand("train", "train an agent");
  train_flags.add(train);
  train->add_option("--init-checkpoint", init_checkpoint, "start from pretrained parameters");
  train->add_flag("--resume", resume, "continue from <out>/resume.bin");

  ConfigFlags pre_flags;
  std::size_t pretrain_steps = 0;
  auto* pretrain = app.add_subcommand("pretrain", "reward-free world-model pretraining");
  pre_flags.add(pretrain);
  pretrain->add_option("--pretrain-steps", pretrain_steps)->required();

  std::string checkpoint, eval_config;
  std::optional<std::size_t> episodes;
  std::uint64_t eval_seed = 1;
  bool baseline = false;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--episodes", episodes);
  ev->add_option("--seed", eval_seed);
  ev->add_option("--config", eval_config, "defaults to config.resolved next to the checkpoint");
  ev->add_flag("--baseline", baseline, "uniform random actions instead of the planner");

  std::vector<std::string> runs;
  std::string metric = "eval_mean", svg = "plot.svg";
  auto* plot = app.add_subcommand("plot", "seed-averaged curves from metrics.csv files");
  plot->add_option("--runs", runs, "run directories or metrics.csv files")->required();
  plot->add_option("--metric", metric)->check(CLI::IsMember(metric_names()));
  plot->add_option("--out", svg);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (*train) return cmd_train(train_flags, init_checkpoint, resume, out);
    if (*pretrain) return cmd_pretrain(pre_flags, pretrain_steps, out);
    if (*ev) return cmd_eval(checkpoint, eval_config, episodes, eval_seed, baseline, out);
    return cmd_plot(runs, metric, svg, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const Diverged& e) {
    err << "diverged: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::domain_error& e) {
    err << "diverged: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace tdmpc::cli
