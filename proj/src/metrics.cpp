#include "mmc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mmc {

EceResult ece_binned(std::span<const double> confidences, const std::vector<bool>& correct) {
  if (confidences.empty() || confidences.size() != correct.size()) {
    throw std::invalid_argument("ece: empty or mismatched inputs");
  }
  EceResult res;
  auto& b = res.bins;
  b.lower.resize(BinTable::kBins);
  b.upper.resize(BinTable::kBins);
  b.counts.assign(BinTable::kBins, 0);
  std::vector<double> conf_sum(BinTable::kBins, 0.0), acc_sum(BinTable::kBins, 0.0);
  for (int i = 0; i < BinTable::kBins; ++i) {
    b.lower[static_cast<std::size_t>(i)] = static_cast<double>(i) / BinTable::kBins;
    b.upper[static_cast<std::size_t>(i)] = static_cast<double>(i + 1) / BinTable::kBins;
  }
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (c < 0.0 || c > 1.0) {
      throw std::invalid_argument("ece: confidence outside [0, 1]");
    }
    const int bin = std::min(BinTable::kBins - 1,
                             static_cast<int>(std::floor(c * BinTable::kBins)));
    b.counts[static_cast<std::size_t>(bin)] += 1;
    conf_sum[static_cast<std::size_t>(bin)] += c;
    acc_sum[static_cast<std::size_t>(bin)] += correct[i] ? 1.0 : 0.0;
  }
  b.mean_confidence.assign(BinTable::kBins, 0.0);
  b.mean_accuracy.assign(BinTable::kBins, 0.0);
  const double n = static_cast<double>(confidences.size());
  double ece = 0.0;
  for (int i = 0; i < BinTable::kBins; ++i) {
    const auto cnt = b.counts[static_cast<std::size_t>(i)];
    if (cnt == 0) continue;
    const double mc = conf_sum[static_cast<std::size_t>(i)] / static_cast<double>(cnt);
    const double ma = acc_sum[static_cast<std::size_t>(i)] / static_cast<double>(cnt);
    b.mean_confidence[static_cast<std::size_t>(i)] = mc;
    b.mean_accuracy[static_cast<std::size_t>(i)] = ma;
    ece += (static_cast<double>(cnt) / n) * std::abs(ma - mc);
  }
  res.ece = ece;
  return res;
}

double ece(std::span<const double> confidences, const std::vector<bool>& correct) {
  return ece_binned(confidences, correct).ece;
}

NllAccuracy nll_and_accuracy(const std::vector<std::vector<double>>& probabilities,
                             std::span<const std::int64_t> labels) {
  if (probabilities.empty() || probabilities.size() != labels.size()) {
    throw std::invalid_argument("nll_and_accuracy: empty or mismatched inputs");
  }
  NllAccuracy out;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    const auto& row = probabilities[i];
    const auto label = static_cast<std::size_t>(labels[i]);
    double p = row[label];
    if (p < 1e-12) {
      p = 1e-12;
      ++out.clamped;
    }
    out.nll -= std::log(p);
    std::size_t arg = 0;
    for (std::size_t c = 1; c < row.size(); ++c) {
      if (row[c] > row[arg]) arg = c;  // ties stay at the lowest index
    }
    if (arg == label) out.accuracy += 1.0;
  }
  out.nll /= static_cast<double>(probabilities.size());
  out.accuracy /= static_cast<double>(probabilities.size());
  return out;
}

double energy_score(std::span<const double> logits) {
  double m = -HUGE_VAL;
  for (double v : logits) m = std::max(m, v);
  double acc = 0.0;
  for (double v : logits) acc += std::exp(v - m);
  return m + std::log(acc);
}

OodSeparation auroc_aupr(std::span<const double> id_scores,
                         std::span<const double> ood_scores) {
  if (id_scores.empty() || ood_scores.empty()) {
    throw std::invalid_argument("auroc_aupr: both score lists must be nonempty");
  }
  struct Row {
    double score;
    bool id;
  };
  std::vector<Row> rows;
  rows.reserve(id_scores.size() + ood_scores.size());
  for (double s : id_scores) rows.push_back({s, true});
  for (double s : ood_scores) rows.push_back({s, false});
  std::sort(rows.begin(), rows.end(),
            [](const Row& a, const Row& b) { return a.score < b.score; });

  // Mann-Whitney rank statistic with midranks on ties
  const double n_id = static_cast<double>(id_scores.size());
  const double n_ood = static_cast<double>(ood_scores.size());
  double rank_sum_id = 0.0;
  std::size_t i = 0;
  while (i < rows.size()) {
    std::size_t j = i;
    while (j < rows.size() && rows[j].score == rows[i].score) ++j;
    const double mid_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (rows[k].id) rank_sum_id += mid_rank;
    }
    i = j;
  }
  OodSeparation out;
  out.auroc = (rank_sum_id - n_id * (n_id + 1.0) / 2.0) / (n_id * n_ood);

  // AUPR by step integration over descending thresholds; ID positive.
  double tp = 0.0, fp = 0.0, prev_recall = 0.0, aupr = 0.0;
  std::size_t k = rows.size();
  while (k > 0) {
    std::size_t j = k;
    // consume one tie group from the top
    while (j > 0 && rows[j - 1].score == rows[k - 1].score) --j;
    for (std::size_t t = j; t < k; ++t) {
      if (rows[t].id) {
        tp += 1.0;
      } else {
        fp += 1.0;
      }
    }
    const double recall = tp / n_id;
    const double precision = tp / (tp + fp);
    aupr += (recall - prev_recall) * precision;
    prev_recall = recall;
    k = j;
  }
  out.aupr = aupr;
  return out;
}

SpectrumRow precision_spectrum(const Mat& precision) {
  auto dec = symmetric_eigen(precision);
  SpectrumRow row;
  row.eigenvalues = dec.values;
  const double mx = dec.values.front();
  const double mn = dec.values.back();
  row.spread = mn > 0.0 ? mx / mn : HUGE_VAL;
  return row;
}

}  // namespace mmc
