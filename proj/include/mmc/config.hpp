#pragma once

#include <cstdint>
#include <string>

#include "mmc/model.hpp"
#include "mmc/tasks.hpp"

namespace mmc {

// Everything a run needs, exposed as a flat key = value file. CLI flags
// override file keys.
struct RunConfig {
  DatasetKind dataset = DatasetKind::Moons;
  HeadKind head = HeadKind::ProtoMahalanobis;
  std::int64_t rank = 0;
  std::int64_t feature_dim = 16;
  std::int64_t block_hidden = 64;
  int extractor_depth = 3;
  std::int64_t encoder_dim = 32;
  std::int64_t encoder_heads = 4;
  int encoder_blocks = 2;
  int train_episodes = 2000;
  int val_episodes = 50;
  int eval_episodes = 200;
  double lr = 1e-3;
  double adam_beta2 = 0.99;
  double grad_clip = 1.0;    // global gradient-norm clip; 0 disables   // training-loop choice; the optimizer's own default stays 0.999
  bool cosine_lr = true;      // cosine decay of lr over the training episodes
  std::uint64_t seed = 0;
  int mc_samples = 100;      // M
  double sigma_floor = 1e-3; // epsilon
  int t_max = 1000;
  double spectral_c = 3.0;
  double factor_gain = 0.1;
  int query_per_class = 100;
  int ood_per_episode = 100;
  double box_expand = 3.0;
  int plot_resolution = 150;
  int experiment_seeds = 5;
  std::string out_dir = "out";

  std::string to_text() const;
  static RunConfig from_text(const std::string& text);
  void save(const std::string& path) const;
  static RunConfig load(const std::string& path);

  // throws std::invalid_argument when a field is out of range
  void validate() const;

  TaskConfig task_config() const;
  ModelConfig model_config() const;
};

// Full-precision double formatting that round-trips exactly.
std::string format_double(double v);

}  // namespace mmc
