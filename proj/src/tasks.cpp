#include "mmc/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mmc {

const char* dataset_name(DatasetKind k) {
  switch (k) {
    case DatasetKind::Moons: return "moons";
    case DatasetKind::Circles: return "circles";
    case DatasetKind::Gaussians: return "gaussians";
  }
  return "?";
}

std::optional<DatasetKind> dataset_from_name(const std::string& name) {
  for (DatasetKind k : {DatasetKind::Moons, DatasetKind::Circles, DatasetKind::Gaussians}) {
    if (name == dataset_name(k)) return k;
  }
  return std::nullopt;
}

TaskConfig TaskConfig::defaults_for(DatasetKind kind) {
  TaskConfig cfg;
  cfg.dataset = kind;
  if (kind == DatasetKind::Gaussians) {
    cfg.ways = 10;
    cfg.shots = 10;
  } else {
    cfg.ways = 2;
    cfg.shots = 5;
  }
  return cfg;
}

namespace {

using Point = std::array<double, 2>;

// Assembles the final task from per-class pools: bias the support, cap the
// query, optionally swap the class order, and normalize by support stats.
Task assemble(const TaskConfig& cfg, std::vector<std::vector<Point>> pools,
              bool allow_inversion, Rng& rng) {
  const int C = static_cast<int>(pools.size());
  std::vector<int> class_order(static_cast<std::size_t>(C));
  std::iota(class_order.begin(), class_order.end(), 0);
  if (allow_inversion && rng.coin()) {
    std::reverse(class_order.begin(), class_order.end());
  }

  Task task;
  task.ways = C;
  task.shots = cfg.shots;
  std::vector<std::vector<LabeledPoint>> queries(static_cast<std::size_t>(C));
  for (int label = 0; label < C; ++label) {
    const auto& pool = pools[static_cast<std::size_t>(class_order[static_cast<std::size_t>(label)])];
    BiasedSplit split = bias_support(pool, cfg.shots, cfg.query_per_class, rng);
    for (std::size_t idx : split.support_idx) {
      task.support.push_back({pool[idx], label});
    }
    for (std::size_t idx : split.query_idx) {
      queries[static_cast<std::size_t>(label)].push_back({pool[idx], label});
    }
  }
  for (auto& q : queries) {
    task.query.insert(task.query.end(), q.begin(), q.end());
  }

  if (cfg.normalize) {
    std::array<double, 2> mean{0.0, 0.0}, var{0.0, 0.0};
    for (const auto& p : task.support) {
      mean[0] += p.x[0];
      mean[1] += p.x[1];
    }
    const double n = static_cast<double>(task.support.size());
    mean[0] /= n;
    mean[1] /= n;
    for (const auto& p : task.support) {
      var[0] += (p.x[0] - mean[0]) * (p.x[0] - mean[0]);
      var[1] += (p.x[1] - mean[1]) * (p.x[1] - mean[1]);
    }
    var[0] = std::max(var[0] / n, 1e-12);
    var[1] = std::max(var[1] / n, 1e-12);
    if (cfg.scalar_norm) {
      const double pooled = (var[0] + var[1]) / 2.0;
      var[0] = pooled;
      var[1] = pooled;
    }
    const std::array<double, 2> inv_std{1.0 / std::sqrt(var[0]), 1.0 / std::sqrt(var[1])};
    for (auto* split : {&task.support, &task.query}) {
      for (auto& p : *split) {
        p.x[0] = (p.x[0] - mean[0]) * inv_std[0];
        p.x[1] = (p.x[1] - mean[1]) * inv_std[1];
      }
    }
    task.norm_mean = mean;
    task.norm_var = var;
  }
  return task;
}

}  // namespace

BiasedSplit bias_support(const std::vector<Point>& points, int shots, int query_cap,
                         Rng& rng) {
  if (points.empty()) throw std::invalid_argument("bias_support: empty class pool");
  BiasedSplit split;
  split.axis = rng.coin() ? 1 : 0;
  split.high_side = rng.coin();

  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return points[a][static_cast<std::size_t>(split.axis)] <
           points[b][static_cast<std::size_t>(split.axis)];
  });
  const std::size_t half = points.size() / 2;
  std::vector<std::size_t> chosen(
      split.high_side ? std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(half), order.end())
                      : std::vector<std::size_t>(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(half)));
  if (chosen.size() < static_cast<std::size_t>(shots)) {
    // degenerate split; fall back to the other side
    split.high_side = !split.high_side;
    chosen = split.high_side
                 ? std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(half), order.end())
                 : std::vector<std::size_t>(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(half));
    if (chosen.size() < static_cast<std::size_t>(shots)) {
      throw std::invalid_argument("bias_support: class pool smaller than shot count");
    }
  }
  rng.shuffle(chosen);
  split.support_idx.assign(chosen.begin(), chosen.begin() + shots);
  // the rest of the biased subset becomes the query pool, so the whole task
  // stays confined to its half and the full shape is only visible across tasks
  std::vector<std::size_t> rest(chosen.begin() + shots, chosen.end());
  rng.shuffle(rest);
  if (static_cast<int>(rest.size()) > query_cap) rest.resize(static_cast<std::size_t>(query_cap));
  split.query_idx = std::move(rest);
  return split;
}

Task sample_moons(const TaskConfig& cfg, Rng& rng) {
  if (cfg.ways != 2) throw std::invalid_argument("sample_moons: 2-way only");
  const double noise = rng.uniform_pos(cfg.noise_max);
  std::vector<std::vector<Point>> pools(2);
  for (int n = 0; n < cfg.pool_per_class; ++n) {
    const double t = rng.uniform() * M_PI;
    pools[0].push_back({std::cos(t) + noise * rng.normal(), std::sin(t) + noise * rng.normal()});
  }
  for (int n = 0; n < cfg.pool_per_class; ++n) {
    const double t = rng.uniform() * M_PI;
    pools[1].push_back(
        {1.0 - std::cos(t) + noise * rng.normal(), 0.5 - std::sin(t) + noise * rng.normal()});
  }
  return assemble(cfg, std::move(pools), /*allow_inversion=*/true, rng);
}

Task sample_circles(const TaskConfig& cfg, Rng& rng) {
  if (cfg.ways != 2) throw std::invalid_argument("sample_circles: 2-way only");
  const double noise = rng.uniform_pos(cfg.noise_max);
  const double scale =
      cfg.circle_scale_min + rng.uniform_pos(cfg.circle_scale_max - cfg.circle_scale_min);
  std::vector<std::vector<Point>> pools(2);
  for (int n = 0; n < cfg.pool_per_class; ++n) {
    const double t = rng.uniform() * 2.0 * M_PI;
    pools[0].push_back({std::cos(t) + noise * rng.normal(), std::sin(t) + noise * rng.normal()});
  }
  for (int n = 0; n < cfg.pool_per_class; ++n) {
    const double t = rng.uniform() * 2.0 * M_PI;
    pools[1].push_back({scale * std::cos(t) + noise * rng.normal(),
                        scale * std::sin(t) + noise * rng.normal()});
  }
  return assemble(cfg, std::move(pools), /*allow_inversion=*/true, rng);
}

namespace {

// QR of a 2x2 by Gram-Schmidt; returns false when the input is numerically
// rank-deficient.
bool qr_2x2(const std::array<double, 4>& m, std::array<double, 4>* q) {
  const double n0 = std::sqrt(m[0] * m[0] + m[2] * m[2]);
  if (n0 < 1e-12) return false;
  const double q00 = m[0] / n0, q10 = m[2] / n0;
  const double dot = q00 * m[1] + q10 * m[3];
  double r0 = m[1] - dot * q00, r1 = m[3] - dot * q10;
  const double n1 = std::sqrt(r0 * r0 + r1 * r1);
  if (n1 < 1e-12) return false;
  *q = {q00, r0 / n1, q10, r1 / n1};
  return true;
}

}  // namespace

Task sample_gaussians(const TaskConfig& cfg, Rng& rng) {
  const int C = cfg.ways;
  // class means separated by rejection sampling
  std::vector<Point> means;
  while (static_cast<int>(means.size()) < C) {
    Point cand{rng.uniform(-cfg.gaussian_mean_box, cfg.gaussian_mean_box),
               rng.uniform(-cfg.gaussian_mean_box, cfg.gaussian_mean_box)};
    bool ok = true;
    for (const auto& m : means) {
      const double dx = cand[0] - m[0], dy = cand[1] - m[1];
      if (dx * dx + dy * dy < cfg.gaussian_min_sep * cfg.gaussian_min_sep) {
        ok = false;
        break;
      }
    }
    if (ok) means.push_back(cand);
  }

  std::vector<std::vector<Point>> pools(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    std::array<double, 4> q{};
    for (;;) {
      std::array<double, 4> m{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0),
                              rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
      if (qr_2x2(m, &q)) break;
    }
    const double d0 = rng.uniform(), d1 = rng.uniform();
    // Sigma = Q D Q^T; sample via L = Q sqrt(D)
    const double s0 = std::sqrt(d0), s1 = std::sqrt(d1);
    for (int n = 0; n < cfg.pool_per_class; ++n) {
      const double e0 = rng.normal(), e1 = rng.normal();
      pools[static_cast<std::size_t>(c)].push_back(
          {means[static_cast<std::size_t>(c)][0] + q[0] * s0 * e0 + q[1] * s1 * e1,
           means[static_cast<std::size_t>(c)][1] + q[2] * s0 * e0 + q[3] * s1 * e1});
    }
  }
  // class shuffling: a full permutation rather than a 2-way inversion
  std::vector<std::vector<Point>> shuffled(pools.size());
  std::vector<std::size_t> perm(pools.size());
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  for (std::size_t i = 0; i < pools.size(); ++i) shuffled[i] = std::move(pools[perm[i]]);
  return assemble(cfg, std::move(shuffled), /*allow_inversion=*/false, rng);
}

Task sample_task(const TaskConfig& cfg, Rng& rng) {
  switch (cfg.dataset) {
    case DatasetKind::Moons: return sample_moons(cfg, rng);
    case DatasetKind::Circles: return sample_circles(cfg, rng);
    case DatasetKind::Gaussians: return sample_gaussians(cfg, rng);
  }
  throw std::invalid_argument("sample_task: unknown dataset");
}

Box Box::expanded(double factor) const {
  Box out;
  for (int d = 0; d < 2; ++d) {
    const double center = (lo[static_cast<std::size_t>(d)] + hi[static_cast<std::size_t>(d)]) / 2.0;
    const double half = (hi[static_cast<std::size_t>(d)] - lo[static_cast<std::size_t>(d)]) / 2.0;
    out.lo[static_cast<std::size_t>(d)] = center - factor * half;
    out.hi[static_cast<std::size_t>(d)] = center + factor * half;
  }
  return out;
}

Box support_box(const Task& task) {
  Box box;
  box.lo = {HUGE_VAL, HUGE_VAL};
  box.hi = {-HUGE_VAL, -HUGE_VAL};
  for (const auto& p : task.support) {
    for (std::size_t d = 0; d < 2; ++d) {
      box.lo[d] = std::min(box.lo[d], p.x[d]);
      box.hi[d] = std::max(box.hi[d], p.x[d]);
    }
  }
  return box;
}

std::vector<std::array<double, 2>> ood_query_grid(const Box& box, int resolution) {
  if (resolution < 2) throw std::invalid_argument("ood_query_grid: resolution must be >= 2");
  std::vector<Point> out;
  out.reserve(static_cast<std::size_t>(resolution) * static_cast<std::size_t>(resolution));
  for (int i = 0; i < resolution; ++i) {
    const double y = box.lo[1] + (box.hi[1] - box.lo[1]) * i / (resolution - 1);
    for (int j = 0; j < resolution; ++j) {
      const double x = box.lo[0] + (box.hi[0] - box.lo[0]) * j / (resolution - 1);
      out.push_back({x, y});
    }
  }
  return out;
}

std::vector<std::array<double, 2>> ood_query_noise(const Box& box, int count, Rng& rng) {
  std::vector<Point> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back({rng.uniform(box.lo[0], box.hi[0]), rng.uniform(box.lo[1], box.hi[1])});
  }
  return out;
}

std::string task_to_csv(const Task& task) {
  std::ostringstream os;
  os.precision(17);
  os << "x0,x1,label,split\n";
  for (const auto& p : task.support) {
    os << p.x[0] << ',' << p.x[1] << ',' << p.label << ",support\n";
  }
  for (const auto& p : task.query) {
    os << p.x[0] << ',' << p.x[1] << ',' << p.label << ",query\n";
  }
  return os.str();
}

Task task_from_csv(const std::string& csv) {
  std::istringstream is(csv);
  std::string line;
  if (!std::getline(is, line) || line != "x0,x1,label,split") {
    throw std::runtime_error("task_from_csv: bad header");
  }
  Task task;
  std::int64_t max_label = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string x0, x1, label, split;
    std::getline(ls, x0, ',');
    std::getline(ls, x1, ',');
    std::getline(ls, label, ',');
    std::getline(ls, split, ',');
    LabeledPoint p{{std::stod(x0), std::stod(x1)}, std::stoll(label)};
    max_label = std::max(max_label, p.label);
    if (split == "support") {
      task.support.push_back(p);
    } else if (split == "query") {
      task.query.push_back(p);
    } else {
      throw std::runtime_error("task_from_csv: bad split value '" + split + "'");
    }
  }
  task.ways = static_cast<int>(max_label + 1);
  task.shots = task.ways > 0 ? static_cast<int>(task.support.size()) / task.ways : 0;
  return task;
}

}  // namespace mmc
