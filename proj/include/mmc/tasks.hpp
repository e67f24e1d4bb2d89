#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mmc/rng.hpp"

namespace mmc {

enum class DatasetKind { Moons, Circles, Gaussians };

const char* dataset_name(DatasetKind k);
std::optional<DatasetKind> dataset_from_name(const std::string& name);

struct LabeledPoint {
  std::array<double, 2> x;
  std::int64_t label;
};

// One sampled episode. Support rows are class-major (K consecutive rows per
// class); both splits are normalized by the support-derived statistics.
struct Task {
  std::vector<LabeledPoint> support;
  std::vector<LabeledPoint> query;
  int ways = 2;
  int shots = 5;
  std::array<double, 2> norm_mean{0.0, 0.0};
  std::array<double, 2> norm_var{1.0, 1.0};
};

struct TaskConfig {
  DatasetKind dataset = DatasetKind::Moons;
  int ways = 2;
  int shots = 5;
  int query_per_class = 100;  // cap on query points kept per class
  int pool_per_class = 200;   // points generated per class before biasing
  double noise_max = 0.25;    // per-task noise std ~ U(0, noise_max]
  double circle_scale_min = 0.0;  // exclusive lower edge of the scale interval
  double circle_scale_max = 0.8;
  double gaussian_mean_box = 3.0;  // class means ~ U(-box, box)^2
  double gaussian_min_sep = 1.0;   // min pairwise distance between means
  bool normalize = true;
  // pool the per-dim variances into one scale; preserves aspect ratio
  bool scalar_norm = false;

  static TaskConfig defaults_for(DatasetKind kind);
};

Task sample_task(const TaskConfig& cfg, Rng& rng);
Task sample_moons(const TaskConfig& cfg, Rng& rng);
Task sample_circles(const TaskConfig& cfg, Rng& rng);
Task sample_gaussians(const TaskConfig& cfg, Rng& rng);

// Support biasing: picks an axis and a median side per class; the support
// is drawn from that half only and the query keeps the rest.
struct BiasedSplit {
  std::vector<std::size_t> support_idx;
  std::vector<std::size_t> query_idx;
  int axis = 0;
  bool high_side = false;
};
BiasedSplit bias_support(const std::vector<std::array<double, 2>>& points, int shots,
                         int query_cap, Rng& rng);

// Axis-aligned box, expanded about its center.
struct Box {
  std::array<double, 2> lo{0.0, 0.0};
  std::array<double, 2> hi{1.0, 1.0};
  Box expanded(double factor) const;
};

Box support_box(const Task& task);

// Uniform grid over the box, corners included; resolution points per axis.
std::vector<std::array<double, 2>> ood_query_grid(const Box& box, int resolution);
// Uniform random samples over the box.
std::vector<std::array<double, 2>> ood_query_noise(const Box& box, int count, Rng& rng);

// CSV dump: columns x0, x1, label, split.
std::string task_to_csv(const Task& task);
Task task_from_csv(const std::string& csv);

}  // namespace mmc
