#include "tdmpc/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace tdmpc {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError(key, "expected a number, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError(key, "expected a nonnegative integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

template <typename T>
Field size_field(T RunConfig::*outer, std::size_t T::*member) {
  return {[=](const RunConfig& c) { return std::to_string(c.*outer.*member); },
          [=](RunConfig& c, const std::string& k, const std::string& v) {
            c.*outer.*member = to_u64(k, v);
          }};
}

template <typename T>
Field double_field(T RunConfig::*outer, double T::*member) {
  return {[=](const RunConfig& c) { return fmt(c.*outer.*member); },
          [=](RunConfig& c, const std::string& k, const std::string& v) {
            c.*outer.*member = to_double(k, v);
          }};
}

template <typename T>
Field bool_field(T RunConfig::*outer, bool T::*member) {
  return {[=](const RunConfig& c) { return std::string(c.*outer.*member ? "true" : "false"); },
          [=](RunConfig& c, const std::string& k, const std::string& v) {
            c.*outer.*member = to_bool(k, v);
          }};
}

Field run_size(std::size_t RunConfig::*m) {
  return {[=](const RunConfig& c) { return std::to_string(c.*m); },
          [=](RunConfig& c, const std::string& k, const std::string& v) { c.*m = to_u64(k, v); }};
}

Field run_bool(bool RunConfig::*m) {
  return {[=](const RunConfig& c) { return std::string(c.*m ? "true" : "false"); },
          [=](RunConfig& c, const std::string& k, const std::string& v) { c.*m = to_bool(k, v); }};
}

using Table = std::vector<std::pair<std::string, Field>>;

const Table& table() {
  static const Table t = [] {
    Table f;
    auto hp = &RunConfig::hp;
    auto env = &RunConfig::env;
    f.push_back({"env",
                 {[](const RunConfig& c) { return std::string(to_string(c.env.name)); },
                  [](RunConfig& c, const std::string&, const std::string& v) {
                    c.env.name = env_name_from_string(v);
                  }}});
    f.push_back({"obs_mode",
                 {[](const RunConfig& c) { return std::string(to_string(c.env.obs_mode)); },
                  [](RunConfig& c, const std::string& k, const std::string& v) {
                    try {
                      c.env.obs_mode = obs_mode_from_string(v);
                    } catch (const std::exception&) {
                      throw ConfigError(k, "expected state or image, got '" + v + "'");
                    }
                  }}});
    f.push_back({"resolution", size_field(env, &EnvSpec::resolution)});
    f.push_back({"frame_stack", size_field(env, &EnvSpec::frame_stack)});
    f.push_back({"action_repeat", size_field(env, &EnvSpec::action_repeat)});
    f.push_back({"episode_length", size_field(env, &EnvSpec::episode_length)});
    f.push_back({"damping", double_field(env, &EnvSpec::damping)});
    f.push_back({"steps", run_size(&RunConfig::total_env_steps)});
    f.push_back({"seed_steps", run_size(&RunConfig::seed_steps)});
    f.push_back({"eval_interval", run_size(&RunConfig::eval_interval)});
    f.push_back({"eval_episodes", run_size(&RunConfig::eval_episodes)});
    f.push_back({"updates_per_env_step", run_size(&RunConfig::updates_per_env_step)});
    f.push_back({"checkpoint_interval", run_size(&RunConfig::checkpoint_interval)});
    f.push_back({"seed",
                 {[](const RunConfig& c) { return std::to_string(c.seed); },
                  [](RunConfig& c, const std::string& k, const std::string& v) {
                    c.seed = to_u64(k, v);
                  }}});
    f.push_back({"out",
                 {[](const RunConfig& c) { return c.out_dir; },
                  [](RunConfig& c, const std::string& k, const std::string& v) {
                    if (v.empty()) throw ConfigError(k, "must not be empty");
                    c.out_dir = v;
                  }}});
    f.push_back({"image_channels",
                 {[](const RunConfig& c) {
                    return std::to_string(c.image_channels[0]) + "," +
                           std::to_string(c.image_channels[1]) + "," +
                           std::to_string(c.image_channels[2]);
                  },
                  [](RunConfig& c, const std::string& k, const std::string& v) {
                    std::array<std::size_t, 3> ch{};
                    std::stringstream ss(v);
                    std::string part;
                    std::size_t i = 0;
                    while (std::getline(ss, part, ',')) {
                      if (i >= 3) throw ConfigError(k, "expected three comma-separated counts");
                      ch[i++] = to_u64(k, trim(part));
                    }
                    if (i != 3) throw ConfigError(k, "expected three comma-separated counts");
                    c.image_channels = ch;
                  }}});
    f.push_back({"augment", run_bool(&RunConfig::augment)});
    f.push_back({"wall_clock", run_bool(&RunConfig::wall_clock)});
    f.push_back({"threads", run_size(&RunConfig::threads)});
    f.push_back({"gamma", double_field(hp, &HyperParams::gamma)});
    f.push_back({"lambda", double_field(hp, &HyperParams::lambda)});
    f.push_back({"zeta", double_field(hp, &HyperParams::zeta)});
    f.push_back({"tau", double_field(hp, &HyperParams::tau)});
    f.push_back({"eps_start",
                 {[](const RunConfig& c) { return fmt(c.hp.epsilon.start); },
                  [](RunConfig& c, const std::string& k, const std::string& v) {
                    c.hp.epsilon.start = to_double(k, v);
                  }}});
    f.push_back({"eps_end",
                 {[](const RunConfig& c) { return fmt(c.hp.epsilon.end); },
                  [](RunConfig& c, const std::string& k, const std::string& v) {
                    c.hp.epsilon.end = to_double(k, v);
                  }}});
    f.push_back({"eps_decay_steps",
                 {[](const RunConfig& c) { return std::to_string(c.hp.epsilon.decay_steps); },
                  [](RunConfig& c, const std::string& k, const std::string& v) {
                    c.hp.epsilon.decay_steps = static_cast<std::int64_t>(to_u64(k, v));
                  }}});
    f.push_back({"c1", double_field(hp, &HyperParams::c1)});
    f.push_back({"c2", double_field(hp, &HyperParams::c2)});
    f.push_back({"c3", double_field(hp, &HyperParams::c3)});
    f.push_back({"c4", double_field(hp, &HyperParams::c4)});
    f.push_back({"horizon", size_field(hp, &HyperParams::horizon)});
    f.push_back({"iterations", size_field(hp, &HyperParams::iterations)});
    f.push_back({"num_samples", size_field(hp, &HyperParams::num_samples)});
    f.push_back({"num_policy", size_field(hp, &HyperParams::num_policy)});
    f.push_back({"num_elites", size_field(hp, &HyperParams::num_elites)});
    f.push_back({"sigma_init", double_field(hp, &HyperParams::sigma_init)});
    f.push_back({"standardize_returns", bool_field(hp, &HyperParams::standardize_returns)});
    f.push_back({"weight_mode",
                 {[](const RunConfig& c) { return std::string(to_string(c.hp.weight_mode)); },
                  [](RunConfig& c, const std::string&, const std::string& v) {
                    c.hp.weight_mode = weight_mode_from_string(v);
                  }}});
    f.push_back({"scale_by_horizon", bool_field(hp, &HyperParams::scale_by_horizon)});
    f.push_back({"lr", double_field(hp, &HyperParams::lr)});
    f.push_back({"grad_clip", double_field(hp, &HyperParams::grad_clip)});
    f.push_back({"latent_dim", size_field(hp, &HyperParams::latent_dim)});
    f.push_back({"hidden_dim", size_field(hp, &HyperParams::hidden_dim)});
    f.push_back({"double_q", bool_field(hp, &HyperParams::double_q)});
    f.push_back({"batch_size", size_field(hp, &HyperParams::batch_size)});
    f.push_back({"per_alpha", double_field(hp, &HyperParams::per_alpha)});
    f.push_back({"per_beta", double_field(hp, &HyperParams::per_beta)});
    f.push_back({"per_eps", double_field(hp, &HyperParams::per_eps)});
    f.push_back({"buffer_capacity", size_field(hp, &HyperParams::buffer_capacity)});
    return f;
  }();
  return t;
}

const Field& field(const std::string& key) {
  for (const auto& [k, f] : table())
    if (k == key) return f;
  throw ConfigError(key, "unknown config key");
}

void require(bool ok, const char* key, const std::string& why) {
  if (!ok) throw ConfigError(key, why);
}

}  // namespace

void RunConfig::validate() const {
  hp.validate();
  env.validate(hp.horizon);
  require(total_env_steps >= seed_steps, "steps",
          "must be at least seed_steps (" + std::to_string(seed_steps) + ")");
  require(seed_steps >= hp.batch_size * (hp.horizon + 1), "seed_steps",
          "must be at least batch_size * (horizon + 1)");
  require(eval_episodes >= 1, "eval_episodes", "must be at least 1");
  require(updates_per_env_step >= 1, "updates_per_env_step", "must be at least 1");
  require(hp.buffer_capacity >= hp.horizon + 1, "buffer_capacity", "must exceed horizon");
  if (env.obs_mode == ObsMode::image) {
    require(env.resolution % 16 == 0, "resolution", "must be a multiple of 16 in image mode");
    for (std::size_t c : image_channels) require(c >= 1, "image_channels", "must be positive");
  }
}

ModelConfig model_config(const RunConfig& cfg) {
  ModelConfig m;
  m.obs_mode = cfg.env.obs_mode;
  m.obs_shape = cfg.env.obs_shape();
  m.action_dim = cfg.env.action_dim();
  m.latent_dim = cfg.hp.latent_dim;
  m.hidden_dim = cfg.hp.hidden_dim;
  m.double_q = cfg.hp.double_q;
  m.image_channels = cfg.image_channels;
  return m;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, f] : table()) k.push_back(name);
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  field(key).set(cfg, key, trim(value));
}

std::string get_config_value(const RunConfig& cfg, const std::string& key) {
  return field(key).get(cfg);
}

void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(line, "line " + std::to_string(lineno) + " is not key=value");
    const std::string key = trim(line.substr(0, eq));
    set_config_value(cfg, key, line.substr(eq + 1));
  }
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  apply_config_text(cfg, text);
  cfg.validate();
  return cfg;
}

std::string config_to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, f] : table()) out += key + "=" + f.get(cfg) + "\n";
  return out;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config", "cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace tdmpc
