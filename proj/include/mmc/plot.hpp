#pragma once

#include <array>
#include <string>
#include <vector>

#include "mmc/config.hpp"
#include "mmc/experiment.hpp"
#include "mmc/model.hpp"
#include "mmc/tasks.hpp"

namespace mmc {

// Ellipse semi-axes for the 1-sigma contour of a covariance: square roots
// of the top-2 eigenvalues (the exact contour when the matrix is 2x2).
std::array<double, 2> ellipse_axes(const Mat& sigma);

// Per-pixel predictive entropy of the MC distribution over the expanded
// support box, with support and query points overlaid. Returns the entropy
// grid (row-major, resolution x resolution) for callers that assert on it.
std::vector<double> plot_entropy_surface(Model& model, const Task& task,
                                         const RunConfig& cfg, const std::string& path);

// 1-sigma and 2-sigma contours of each class covariance, one panel per
// class, drawn in the plane of the top-2 eigenvectors.
void plot_covariance_ellipses(Model& model, const Task& task, const RunConfig& cfg,
                              const std::string& path);

// Histogram of per-class precision-matrix eigenvalues.
void plot_eigen_histogram(const std::vector<SpectrumRow>& spectra, const std::string& path);

}  // namespace mmc
