#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mmc/config.hpp"
#include "mmc/metrics.hpp"
#include "mmc/model.hpp"
#include "mmc/tasks.hpp"

namespace mmc {

// Lifts a task to the tensor inputs the model consumes.
struct EpisodeBatch {
  Tensor support;  // {C*K, 2}, class-major
  Tensor query;    // {Nq, 2}
  std::vector<std::int64_t> query_labels;
  int ways = 0;
  int shots = 0;
};
EpisodeBatch to_batch(const Task& task);

struct TrainLogRow {
  int episode = 0;
  double loss = 0.0;
  double accuracy = 0.0;      // deterministic argmax on this episode's queries
  double running_accuracy = 0.0;  // trailing 100-episode mean
};

struct TrainOutcome {
  std::vector<TrainLogRow> log;
  bool aborted = false;        // three consecutive non-finite losses
  int skipped_updates = 0;
  int temperature = 1;         // tuned integer T (covariance-free heads keep 1)
  double baseline_tau = 1.0;   // tuned softmax temperature for baseline heads
  bool temperature_hit_cap = false;
};

// Episodic training per the training algorithm, followed by post-hoc
// temperature tuning on fresh validation episodes.
TrainOutcome train_model(Model& model, const RunConfig& cfg);

struct EvalOutcome {
  double id_accuracy = 0.0;
  double id_nll = 0.0;
  double id_ece = 0.0;
  double ood_ece = 0.0;
  double auroc = 0.5;
  double aupr = 0.0;
  EceResult id_bins;
  EceResult ood_bins;
  double mean_precision_spread = 1.0;  // max/min eigenvalue ratio, covariance heads
  std::vector<SpectrumRow> sample_spectra;
  int episodes = 0;
  int mc_samples = 1;
  std::int64_t clamped_log_probs = 0;
};

// Per-episode inference on held-out tasks, plus uniform OOD noise drawn
// from the expanded support box. OOD points carry uniformly random labels.
EvalOutcome evaluate_model(Model& model, const RunConfig& cfg);

// ---- eigenvalue perturbation (reset-to-one) experiment ---------------------

struct PerturbationResult {
  double predicted_accuracy = 0.0, predicted_nll = 0.0, predicted_ece = 0.0;
  double modified_accuracy = 0.0, modified_nll = 0.0, modified_ece = 0.0;
  double better_accuracy = 0.0, better_nll = 0.0, better_ece = 0.0;  // ties = 0.5
  int variants = 0;
};

PerturbationResult eigen_perturbation_experiment(Model& model, const RunConfig& cfg,
                                                 int episodes);

// Episode metrics under explicitly given precision matrices; used by the
// perturbation experiment and its recompose round-trip check.
struct EpisodeMetrics {
  double accuracy = 0.0, nll = 0.0, ece = 0.0;
};
EpisodeMetrics evaluate_episode_with(const std::vector<EvalState>& states,
                                     const std::vector<std::vector<double>>& query_feats,
                                     const std::vector<std::int64_t>& labels,
                                     int temperature, int samples, double floor,
                                     std::uint64_t noise_seed);

// ---- experiment suite -------------------------------------------------------

struct SuiteRow {
  std::string model;                    // display name
  HeadKind head;
  std::int64_t rank;
  std::vector<EvalOutcome> per_seed;    // one entry per seed
  std::optional<PerturbationResult> perturbation;  // covariance-encoder rows
};

struct SuiteResult {
  std::string suite;
  std::vector<SuiteRow> rows;
};

// Trains and evaluates the model grid over `cfg.experiment_seeds` seeds.
// Parallelism across cells is capped by the MMC_THREADS environment
// variable (defaults to the hardware concurrency).
SuiteResult run_suite(const RunConfig& cfg, bool verbose);

std::string suite_table_csv(const SuiteResult& result);

double predictive_entropy(std::span<const double> probabilities);

}  // namespace mmc
