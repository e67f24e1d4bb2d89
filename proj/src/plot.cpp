#include "mmc/plot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mmc {

namespace {

struct Rgb {
  int r, g, b;
};

// compact viridis-like ramp
Rgb heat_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  static const Rgb stops[] = {{68, 1, 84},    {59, 82, 139},  {33, 145, 140},
                              {94, 201, 98},  {253, 231, 37}};
  const double pos = t * 3.999;
  const int i = static_cast<int>(pos);
  const double f = pos - i;
  auto lerp = [f](int a, int b) { return static_cast<int>(a + (b - a) * f); };
  return {lerp(stops[i].r, stops[i + 1].r), lerp(stops[i].g, stops[i + 1].g),
          lerp(stops[i].b, stops[i + 1].b)};
}

const char* class_color(std::int64_t label) {
  static const char* palette[] = {"#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00",
                                  "#a65628", "#f781bf", "#999999", "#66c2a5", "#ffd92f"};
  return palette[label % 10];
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("plot: cannot write " + path);
  out << content;
}

}  // namespace

std::array<double, 2> ellipse_axes(const Mat& sigma) {
  auto dec = symmetric_eigen(sigma);
  return {std::sqrt(std::max(0.0, dec.values[0])), std::sqrt(std::max(0.0, dec.values[1]))};
}

std::vector<double> plot_entropy_surface(Model& model, const Task& task,
                                         const RunConfig& cfg, const std::string& path) {
  if (cfg.plot_resolution < 2) {
    throw std::invalid_argument("plot: resolution must be >= 2");
  }
  EpisodeBatch batch = to_batch(task);
  Tensor sf = model.features(batch.support, false);
  auto states = model.to_eval(model.class_states(sf, batch.ways, batch.shots));

  const Box box = support_box(task).expanded(cfg.box_expand);
  const int res = cfg.plot_resolution;
  auto grid = ood_query_grid(box, res);
  std::vector<double> gdata;
  gdata.reserve(grid.size() * 2);
  for (const auto& p : grid) {
    gdata.push_back(p[0]);
    gdata.push_back(p[1]);
  }
  Tensor gf = model.features(
      Tensor::from_data({static_cast<std::int64_t>(grid.size()), 2}, std::move(gdata)),
      false);

  const bool mc_head = cfg.head == HeadKind::ProtoMahalanobis;
  Rng rng(derive_seed(cfg.seed, 0x7001));
  const std::int64_t d = cfg.feature_dim;
  std::vector<double> entropy(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    std::span<const double> z(gf.data().data() + static_cast<std::int64_t>(i) * d,
                              static_cast<std::size_t>(d));
    std::vector<double> probs;
    if (mc_head) {
      probs = predict(states, z, model.temperature, cfg.mc_samples, rng, cfg.sigma_floor)
                  .probabilities;
    } else {
      auto logits = eval_logits(states, z);
      for (double& v : logits) v /= model.baseline_tau;
      probs = stable_softmax(logits);
    }
    entropy[i] = predictive_entropy(probs);
  }

  // color scale maxes out at log C (the uniform prediction)
  const double hmax = std::log(static_cast<double>(task.ways));
  const double size = 640.0;
  const double cell = size / res;
  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << size << "' height='" << size
      << "' viewBox='0 0 " << size << ' ' << size << "'>\n";
  for (int i = 0; i < res; ++i) {
    for (int j = 0; j < res; ++j) {
      const double h = entropy[static_cast<std::size_t>(i * res + j)];
      const Rgb c = heat_color(hmax > 0 ? h / hmax : 0.0);
      // grid rows run bottom-to-top; SVG y runs top-to-bottom
      svg << "<rect x='" << j * cell << "' y='" << (res - 1 - i) * cell << "' width='"
          << cell + 0.5 << "' height='" << cell + 0.5 << "' fill='rgb(" << c.r << ',' << c.g
          << ',' << c.b << ")'/>\n";
    }
  }
  auto to_px = [&](const std::array<double, 2>& x) {
    const double px = (x[0] - box.lo[0]) / (box.hi[0] - box.lo[0]) * size;
    const double py = size - (x[1] - box.lo[1]) / (box.hi[1] - box.lo[1]) * size;
    return std::array<double, 2>{px, py};
  };
  for (const auto& p : task.query) {
    auto [px, py] = to_px(p.x);
    svg << "<circle cx='" << px << "' cy='" << py << "' r='2' fill='" << class_color(p.label)
        << "' fill-opacity='0.45'/>\n";
  }
  for (const auto& p : task.support) {
    auto [px, py] = to_px(p.x);
    svg << "<circle cx='" << px << "' cy='" << py << "' r='5' fill='" << class_color(p.label)
        << "' stroke='white' stroke-width='1.5'/>\n";
  }
  svg << "</svg>\n";
  write_file(path, svg.str());
  return entropy;
}

void plot_covariance_ellipses(Model& model, const Task& task, const RunConfig& cfg,
                              const std::string& path) {
  if (!head_uses_covariance(cfg.head)) {
    throw std::invalid_argument("plot: covariance ellipses need a covariance head");
  }
  EpisodeBatch batch = to_batch(task);
  Tensor sf = model.features(batch.support, false);
  auto states = model.class_states(sf, batch.ways, batch.shots);

  const double panel = 220.0;
  const double size_x = panel * task.ways;
  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << size_x << "' height='" << panel
      << "' viewBox='0 0 " << size_x << ' ' << panel << "'>\n";
  for (int c = 0; c < task.ways; ++c) {
    Mat sigma = states.cov[static_cast<std::size_t>(c)].sigma_dense();
    auto axes = ellipse_axes(sigma);
    const double cx = panel * c + panel / 2.0, cy = panel / 2.0;
    const double scale = 0.4 * panel / std::max(1e-12, 2.0 * axes[0]);
    svg << "<rect x='" << panel * c << "' y='0' width='" << panel << "' height='" << panel
        << "' fill='white' stroke='#cccccc'/>\n";
    for (double k : {2.0, 1.0}) {
      svg << "<ellipse cx='" << cx << "' cy='" << cy << "' rx='" << k * axes[0] * scale
          << "' ry='" << k * axes[1] * scale << "' fill='" << class_color(c)
          << "' fill-opacity='" << (k == 1.0 ? 0.45 : 0.2) << "' stroke='" << class_color(c)
          << "'/>\n";
    }
    svg << "<text x='" << panel * c + 8 << "' y='16' font-size='12' font-family='sans-serif'>"
        << "class " << c << "</text>\n";
  }
  svg << "</svg>\n";
  write_file(path, svg.str());
}

void plot_eigen_histogram(const std::vector<SpectrumRow>& spectra, const std::string& path) {
  std::vector<double> values;
  for (const auto& row : spectra) {
    values.insert(values.end(), row.eigenvalues.begin(), row.eigenvalues.end());
  }
  if (values.empty()) throw std::invalid_argument("plot: no eigenvalues to draw");
  const double lo = *std::min_element(values.begin(), values.end());
  const double hi = *std::max_element(values.begin(), values.end());
  const int bins = 30;
  std::vector<int> counts(bins, 0);
  for (double v : values) {
    int b = hi > lo ? static_cast<int>((v - lo) / (hi - lo) * bins) : 0;
    b = std::clamp(b, 0, bins - 1);
    ++counts[static_cast<std::size_t>(b)];
  }
  const int peak = *std::max_element(counts.begin(), counts.end());
  const double w = 640.0, h = 360.0, pad = 30.0;
  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h
      << "' viewBox='0 0 " << w << ' ' << h << "'>\n";
  const double bw = (w - 2 * pad) / bins;
  for (int b = 0; b < bins; ++b) {
    const double bh = peak > 0 ? (h - 2 * pad) * counts[static_cast<std::size_t>(b)] / peak : 0;
    svg << "<rect x='" << pad + b * bw << "' y='" << h - pad - bh << "' width='" << bw - 1
        << "' height='" << bh << "' fill='#377eb8'/>\n";
  }
  svg << "<text x='" << pad << "' y='" << h - 8 << "' font-size='11' font-family='sans-serif'>"
      << format_double(lo) << "</text>\n";
  svg << "<text x='" << w - pad - 60 << "' y='" << h - 8
      << "' font-size='11' font-family='sans-serif'>" << format_double(hi) << "</text>\n";
  svg << "<text x='" << pad << "' y='16' font-size='12' font-family='sans-serif'>"
      << "precision eigenvalues (" << values.size() << ")</text>\n";
  svg << "</svg>\n";
  write_file(path, svg.str());
}

}  // namespace mmc
