#pragma once
// Small run configurations shared by the trainer and CLI tests.

#include <filesystem>
#include <string>

#include "tdmpc/run_config.hpp"

inline tdmpc::RunConfig tiny_run(const std::string& name) {
  tdmpc::RunConfig c;
  c.env = tdmpc::make_env_spec(tdmpc::EnvName::pendulum_swingup, tdmpc::ObsMode::state);
  c.env.episode_length = 50;
  c.hp.hidden_dim = 16;
  c.hp.latent_dim = 8;
  c.hp.batch_size = 8;
  c.hp.horizon = 3;
  c.hp.num_samples = 32;
  c.hp.num_policy = 4;
  c.hp.num_elites = 8;
  c.hp.iterations = 2;
  c.hp.buffer_capacity = 1000;
  c.hp.epsilon.decay_steps = 100;
  c.total_env_steps = 150;
  c.seed_steps = 32;
  c.eval_interval = 100;
  c.eval_episodes = 1;
  c.seed = 7;
  c.threads = 1;
  c.wall_clock = false;
  const auto dir = std::filesystem::temp_directory_path() / ("tdmpc_test_" + name);
  std::filesystem::remove_all(dir);
  c.out_dir = dir.string();
  return c;
}

inline tdmpc::RunConfig tiny_image_run(const std::string& name) {
  tdmpc::RunConfig c = tiny_run(name);
  c.env = tdmpc::make_env_spec(tdmpc::EnvName::pendulum_swingup, tdmpc::ObsMode::image, 16);
  c.env.episode_length = 20;
  c.image_channels = {4, 4, 4};
  c.total_env_steps = 60;
  c.eval_interval = 0;
  return c;
}
