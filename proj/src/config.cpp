#include "mmc/config.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace mmc {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << "# mmc run configuration\n";
  os << "dataset = " << dataset_name(dataset) << "\n";
  os << "head = " << head_name(head) << "\n";
  os << "rank = " << rank << "\n";
  os << "feature_dim = " << feature_dim << "\n";
  os << "block_hidden = " << block_hidden << "\n";
  os << "extractor_depth = " << extractor_depth << "\n";
  os << "encoder_dim = " << encoder_dim << "\n";
  os << "encoder_heads = " << encoder_heads << "\n";
  os << "encoder_blocks = " << encoder_blocks << "\n";
  os << "train_episodes = " << train_episodes << "\n";
  os << "val_episodes = " << val_episodes << "\n";
  os << "eval_episodes = " << eval_episodes << "\n";
  os << "lr = " << format_double(lr) << "\n";
  os << "adam_beta2 = " << format_double(adam_beta2) << "\n";
  os << "grad_clip = " << format_double(grad_clip) << "\n";
  os << "cosine_lr = " << (cosine_lr ? 1 : 0) << "\n";
  os << "seed = " << seed << "\n";
  os << "mc_samples = " << mc_samples << "\n";
  os << "sigma_floor = " << format_double(sigma_floor) << "\n";
  os << "t_max = " << t_max << "\n";
  os << "spectral_c = " << format_double(spectral_c) << "\n";
  os << "factor_gain = " << format_double(factor_gain) << "\n";
  os << "query_per_class = " << query_per_class << "\n";
  os << "ood_per_episode = " << ood_per_episode << "\n";
  os << "box_expand = " << format_double(box_expand) << "\n";
  os << "plot_resolution = " << plot_resolution << "\n";
  os << "experiment_seeds = " << experiment_seeds << "\n";
  os << "out_dir = " << out_dir << "\n";
  return os.str();
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "dataset") {
      auto k = dataset_from_name(value);
      if (!k) throw std::invalid_argument("config: unknown dataset '" + value + "'");
      cfg.dataset = *k;
    } else if (key == "head") {
      auto k = head_from_name(value);
      if (!k) throw std::invalid_argument("config: unknown head '" + value + "'");
      cfg.head = *k;
    } else if (key == "rank") {
      cfg.rank = std::stoll(value);
    } else if (key == "feature_dim") {
      cfg.feature_dim = std::stoll(value);
    } else if (key == "block_hidden") {
      cfg.block_hidden = std::stoll(value);
    } else if (key == "extractor_depth") {
      cfg.extractor_depth = std::stoi(value);
    } else if (key == "encoder_dim") {
      cfg.encoder_dim = std::stoll(value);
    } else if (key == "encoder_heads") {
      cfg.encoder_heads = std::stoll(value);
    } else if (key == "encoder_blocks") {
      cfg.encoder_blocks = std::stoi(value);
    } else if (key == "train_episodes") {
      cfg.train_episodes = std::stoi(value);
    } else if (key == "val_episodes") {
      cfg.val_episodes = std::stoi(value);
    } else if (key == "eval_episodes") {
      cfg.eval_episodes = std::stoi(value);
    } else if (key == "lr") {
      cfg.lr = std::stod(value);
    } else if (key == "adam_beta2") {
      cfg.adam_beta2 = std::stod(value);
    } else if (key == "grad_clip") {
      cfg.grad_clip = std::stod(value);
    } else if (key == "cosine_lr") {
      cfg.cosine_lr = std::stoi(value) != 0;
    } else if (key == "seed") {
      cfg.seed = std::stoull(value);
    } else if (key == "mc_samples") {
      cfg.mc_samples = std::stoi(value);
    } else if (key == "sigma_floor") {
      cfg.sigma_floor = std::stod(value);
    } else if (key == "t_max") {
      cfg.t_max = std::stoi(value);
    } else if (key == "spectral_c") {
      cfg.spectral_c = std::stod(value);
    } else if (key == "factor_gain") {
      cfg.factor_gain = std::stod(value);
    } else if (key == "query_per_class") {
      cfg.query_per_class = std::stoi(value);
    } else if (key == "ood_per_episode") {
      cfg.ood_per_episode = std::stoi(value);
    } else if (key == "box_expand") {
      cfg.box_expand = std::stod(value);
    } else if (key == "plot_resolution") {
      cfg.plot_resolution = std::stoi(value);
    } else if (key == "experiment_seeds") {
      cfg.experiment_seeds = std::stoi(value);
    } else if (key == "out_dir") {
      cfg.out_dir = value;
    } else {
      throw std::invalid_argument("config: unknown key '" + key + "'");
    }
  }
  return cfg;
}

void RunConfig::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("config: cannot write " + path);
  out << to_text();
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

void RunConfig::validate() const {
  if (rank < 0) throw std::invalid_argument("config: rank must be >= 0");
  if (feature_dim < 1) throw std::invalid_argument("config: feature_dim must be >= 1");
  if (spectral_c <= 0) throw std::invalid_argument("config: spectral_c must be > 0");
  if (mc_samples < 1) throw std::invalid_argument("config: mc_samples must be >= 1");
  if (t_max < 1) throw std::invalid_argument("config: t_max must be >= 1");
  if (sigma_floor <= 0) throw std::invalid_argument("config: sigma_floor must be > 0");
  if (train_episodes < 0 || val_episodes < 0 || eval_episodes < 0) {
    throw std::invalid_argument("config: episode counts must be >= 0");
  }
  if (encoder_dim % encoder_heads != 0) {
    throw std::invalid_argument("config: encoder_dim must be divisible by encoder_heads");
  }
}

TaskConfig RunConfig::task_config() const {
  TaskConfig tc = TaskConfig::defaults_for(dataset);
  tc.query_per_class = query_per_class;
  return tc;
}

ModelConfig RunConfig::model_config() const {
  ModelConfig mc;
  mc.head = head;
  mc.input_dim = 2;
  mc.feature_dim = feature_dim;
  mc.block_hidden = block_hidden;
  mc.rank = rank;
  mc.extractor_depth = extractor_depth;
  mc.encoder_dim = encoder_dim;
  mc.encoder_heads = encoder_heads;
  mc.encoder_blocks = encoder_blocks;
  mc.spectral_c = spectral_c;
  mc.factor_gain = factor_gain;
  mc.sigma_floor = sigma_floor;
  return mc;
}

}  // namespace mmc
