#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmc/lowrank.hpp"

namespace mmc {

struct BinTable {
  static constexpr int kBins = 15;
  std::vector<double> lower, upper;      // bin edges partitioning [0, 1]
  std::vector<std::int64_t> counts;
  std::vector<double> mean_confidence;   // 0 for empty bins
  std::vector<double> mean_accuracy;
};

struct EceResult {
  double ece = 0.0;
  BinTable bins;
};

// 15 equal-width bins on max-probability confidence; empty bins skipped.
EceResult ece_binned(std::span<const double> confidences, const std::vector<bool>& correct);
double ece(std::span<const double> confidences, const std::vector<bool>& correct);

struct NllAccuracy {
  double nll = 0.0;
  double accuracy = 0.0;
  std::int64_t clamped = 0;  // true-label probabilities clamped at 1e-12
};

// Mean -log p[true]; argmax accuracy with ties toward the lowest index.
NllAccuracy nll_and_accuracy(const std::vector<std::vector<double>>& probabilities,
                             std::span<const std::int64_t> labels);

// log sum exp of the logits (stable); the ID/OOD separation score.
double energy_score(std::span<const double> logits);

struct OodSeparation {
  double auroc = 0.5;
  double aupr = 1.0;
};

// Higher score = more in-distribution; ID examples are the positives.
OodSeparation auroc_aupr(std::span<const double> id_scores,
                         std::span<const double> ood_scores);

struct SpectrumRow {
  std::vector<double> eigenvalues;  // precision matrix, descending
  double spread = 1.0;              // max / min
};

SpectrumRow precision_spectrum(const Mat& precision);

}  // namespace mmc
