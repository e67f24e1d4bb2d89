#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmc/lowrank.hpp"
#include "mmc/nets.hpp"
#include "mmc/rng.hpp"
#include "mmc/tensor.hpp"

namespace mmc {

enum class HeadKind {
  ProtoMahalanobis,   // set-encoded diagonal(+low-rank) covariance
  Protonet,           // squared Euclidean logits, no spectral norm
  ProtonetSN,         // squared Euclidean logits, spectral-normalized extractor
  ShrinkagePerClass,  // empirical per-class shrinkage covariance
  ShrinkageShared,    // empirical class-pooled shrinkage covariance
};

const char* head_name(HeadKind k);
std::optional<HeadKind> head_from_name(const std::string& name);
bool head_uses_covariance(HeadKind k);
bool head_uses_spectral_norm(HeadKind k);

struct ModelConfig {
  HeadKind head = HeadKind::ProtoMahalanobis;
  std::int64_t input_dim = 2;
  std::int64_t feature_dim = 16;
  std::int64_t block_hidden = 64;
  std::int64_t rank = 0;
  int extractor_depth = 3;
  std::int64_t encoder_dim = 32;
  std::int64_t encoder_heads = 4;
  int encoder_blocks = 2;
  double spectral_c = 3.0;
  double factor_gain = 0.1;
  double sigma_floor = 1e-3;  // epsilon floor on the logit-noise scale
  double diag_floor = 0.1;    // truncated-sigmoid floor on covariance diagonals
};

// Per-query outcome of the scaled-energy logit-normal inference.
struct LogitNormalPrediction {
  std::vector<double> mu_tilde;       // per-class logit means
  double sigma_tilde = 0.0;           // shared scale, >= floor
  int temperature = 1;
  int samples = 1;
  std::vector<double> probabilities;  // sums to 1
};

// Evaluation-side class summary: plain values, no graph.
struct EvalState {
  std::vector<double> mu;
  Mat precision;   // unused when euclidean
  double logdet = 0.0;
  bool euclidean = false;
};

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  // Extractor forward over a {n, input_dim} batch.
  Tensor features(const Tensor& inputs, bool training);

  struct States {
    std::vector<Tensor> mu;              // per class, {1, d}
    std::vector<LowRankCovariance> cov;  // per class; empty for protonet heads
    bool euclidean = false;
  };

  // Prototypes and covariances from class-major support features
  // ({C*K, d}, K consecutive rows per class). Centering is skipped at K=1.
  States class_states(const Tensor& support_features, int C, int K);

  // Deterministic logits for a query feature batch {n, d}:
  // Mahalanobis heads use -1/2 (z-mu)^T P (z-mu) - 1/2 log|Sigma|,
  // Euclidean heads use -||z - mu||^2.
  Tensor logits(const States& states, const Tensor& query_features);

  // Mean NLL of softmax(E[omega]) over the labeled queries.
  Tensor episode_loss(const States& states, const Tensor& query_features,
                      const std::vector<std::int64_t>& labels);

  std::vector<EvalState> to_eval(const States& states) const;

  NamedParams parameters();
  NamedParams checkpoint_state();  // parameters + buffers + head metadata
  void save(const std::string& path);
  void load(const std::string& path);
  void warmup_spectral(int iters);
  std::vector<const SpectralLinear*> spectral_layers() const;
  SetEncoder* encoder() { return encoder_ ? &*encoder_ : nullptr; }

  // post-hoc scaling state
  int temperature = 1;        // integer T for the energy scale
  double baseline_tau = 1.0;  // softmax temperature for baseline heads

 private:
  ModelConfig cfg_;
  Extractor extractor_;
  std::optional<SetEncoder> encoder_;
  Tensor shrink_log_diag_;   // {d}; softplus gives the meta diagonal
  Tensor shrink_delta_raw_;  // {1}; sigmoid gives the mixing coefficient
};

// ---- evaluation-path inference --------------------------------------------

std::vector<double> eval_logits(const std::vector<EvalState>& states,
                                std::span<const double> z);

// -log sum_c' exp(-mahalanobis^2_c'); log-determinant terms excluded.
double energy_raw(const std::vector<EvalState>& states, std::span<const double> z);

// sigma_tilde = max(floor, energy_raw / T)
double energy_scale(const std::vector<EvalState>& states, std::span<const double> z,
                    int temperature, double floor);

LogitNormalPrediction predict(const std::vector<EvalState>& states,
                              std::span<const double> z, int temperature, int samples,
                              Rng& rng, double floor);

std::vector<double> stable_softmax(std::span<const double> logits);

// ---- temperature handling --------------------------------------------------

struct TuningQuery {
  std::vector<double> mu_tilde;
  double raw_energy = 0.0;
  std::int64_t label = 0;
};

struct TemperatureResult {
  int temperature = 1;
  bool hit_cap = false;
};

// Starts at T = 1 and raises T by 1 until the sampled predictive NLL is no
// worse than the deterministic NLL, or T reaches t_max.
TemperatureResult tune_temperature(const std::vector<TuningQuery>& queries, int samples,
                                   double floor, int t_max, Rng& rng);

// Scalar softmax temperature minimizing NLL(logits / tau), found by
// golden-section search on [0.05, 20] to 1e-4.
double baseline_temperature_scale(const std::vector<std::vector<double>>& logits,
                                  const std::vector<std::int64_t>& labels);

}  // namespace mmc
