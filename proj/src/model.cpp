#include "mmc/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mmc/checkpoint.hpp"

namespace mmc {

const char* head_name(HeadKind k) {
  switch (k) {
    case HeadKind::ProtoMahalanobis: return "mahalanobis";
    case HeadKind::Protonet: return "protonet";
    case HeadKind::ProtonetSN: return "protonet-sn";
    case HeadKind::ShrinkagePerClass: return "shrinkage-class";
    case HeadKind::ShrinkageShared: return "shrinkage-shared";
  }
  return "?";
}

std::optional<HeadKind> head_from_name(const std::string& name) {
  for (HeadKind k : {HeadKind::ProtoMahalanobis, HeadKind::Protonet, HeadKind::ProtonetSN,
                     HeadKind::ShrinkagePerClass, HeadKind::ShrinkageShared}) {
    if (name == head_name(k)) return k;
  }
  return std::nullopt;
}

bool head_uses_covariance(HeadKind k) {
  return k == HeadKind::ProtoMahalanobis || k == HeadKind::ShrinkagePerClass ||
         k == HeadKind::ShrinkageShared;
}

bool head_uses_spectral_norm(HeadKind k) {
  // plain Protonet is the only unnormalized extractor
  return k != HeadKind::Protonet;
}

namespace {

// log(1 + e^x) via logsumexp against zero, stable for large |x|.
Tensor softplus(const Tensor& x) {
  const std::int64_t n = x.size();
  Tensor col = reshape(x, {n, 1});
  return reshape(logsumexp(concat({col, Tensor::zeros({n, 1})}, 1), 1), x.shape());
}

}  // namespace

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  Rng rng(derive_seed(seed, 0xA001));
  ExtractorConfig ex;
  ex.input_dim = cfg.input_dim;
  ex.feature_dim = cfg.feature_dim;
  ex.block_hidden = cfg.block_hidden;
  ex.depth = cfg.extractor_depth;
  ex.spectral_c = cfg.spectral_c;
  ex.spectral = head_uses_spectral_norm(cfg.head);
  extractor_ = Extractor(ex, rng);
  if (cfg.head == HeadKind::ProtoMahalanobis) {
    SetEncoderConfig ec;
    ec.feature_dim = cfg.feature_dim;
    ec.model_dim = cfg.encoder_dim;
    ec.heads = cfg.encoder_heads;
    ec.blocks = cfg.encoder_blocks;
    ec.rank = cfg.rank;
    ec.factor_gain = cfg.factor_gain;
    encoder_.emplace(ec, rng);
  } else if (head_uses_covariance(cfg.head)) {
    // shrinkage heads: meta-learned diagonal and mixing coefficient
    shrink_log_diag_ = Tensor::zeros({cfg.feature_dim}, true);
    shrink_delta_raw_ = Tensor::zeros({1}, true);
  }
}

Tensor Model::features(const Tensor& inputs, bool training) {
  return extractor_.forward(inputs, training);
}

Model::States Model::class_states(const Tensor& support_features, int C, int K) {
  if (C <= 0 || K <= 0 || support_features.dim(0) != static_cast<std::int64_t>(C) * K) {
    throw std::invalid_argument("class_states: expected " + std::to_string(C) + "*" +
                                std::to_string(K) + " support rows, got " +
                                std::to_string(support_features.dim(0)));
  }
  States st;
  st.euclidean = !head_uses_covariance(cfg_.head);
  std::vector<Tensor> class_features(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    class_features[static_cast<std::size_t>(c)] =
        slice(support_features, 0, static_cast<std::int64_t>(c) * K, K);
    st.mu.push_back(mean(class_features[static_cast<std::size_t>(c)], 0, /*keepdims=*/true));
  }
  if (st.euclidean) return st;

  // centered class sets; uncentered in the one-shot case, where centering
  // would collapse every set to the origin
  std::vector<Tensor> centered(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    const auto& zc = class_features[static_cast<std::size_t>(c)];
    centered[static_cast<std::size_t>(c)] =
        K > 1 ? zc - st.mu[static_cast<std::size_t>(c)] : zc;
  }

  if (cfg_.head == HeadKind::ProtoMahalanobis) {
    for (int c = 0; c < C; ++c) {
      auto enc = encoder_->forward(centered[static_cast<std::size_t>(c)]);
      Tensor lam = clamp_min(sigmoid(enc.diag_logits), cfg_.diag_floor);
      st.cov.push_back(build_covariance(lam, enc.factors));
    }
    return st;
  }

  // shrinkage heads: Sigma = delta * diag(softplus(lambda)) + (1-delta) Phi Phi^T
  Tensor delta = sigmoid(shrink_delta_raw_);             // {1}
  Tensor lam = softplus(shrink_log_diag_) * delta;       // {d}
  Tensor fac_scale = exp(0.5 * log(1.0 - delta));        // sqrt(1 - delta), {1}
  auto shrink_cov = [&](const Tensor& centered_set) {
    const std::int64_t n = centered_set.dim(0);
    Tensor phi = transpose(centered_set) * (1.0 / std::sqrt(static_cast<double>(n)));
    return build_covariance(lam, phi * fac_scale);
  };
  if (cfg_.head == HeadKind::ShrinkagePerClass) {
    for (int c = 0; c < C; ++c) {
      st.cov.push_back(shrink_cov(centered[static_cast<std::size_t>(c)]));
    }
  } else {
    LowRankCovariance shared = shrink_cov(concat(centered, 0));
    for (int c = 0; c < C; ++c) st.cov.push_back(shared);
  }
  return st;
}

Tensor Model::logits(const States& states, const Tensor& query_features) {
  const int C = static_cast<int>(states.mu.size());
  std::vector<Tensor> cols;
  cols.reserve(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    Tensor delta = query_features - states.mu[static_cast<std::size_t>(c)];  // {n, d}
    if (states.euclidean) {
      cols.push_back(-sum(delta * delta, 1, /*keepdims=*/true));
    } else {
      const auto& cov = states.cov[static_cast<std::size_t>(c)];
      Tensor m2 = sum(matmul(delta, cov.inverse) * delta, 1, /*keepdims=*/true);
      cols.push_back(-0.5 * m2 - 0.5 * reshape(cov.logdet, {1, 1}));
    }
  }
  return concat(cols, 1);  // {n, C}
}

Tensor Model::episode_loss(const States& states, const Tensor& query_features,
                           const std::vector<std::int64_t>& labels) {
  if (labels.empty() ||
      static_cast<std::int64_t>(labels.size()) != query_features.dim(0)) {
    throw std::invalid_argument("episode_loss: labels do not match query batch");
  }
  Tensor lg = logits(states, query_features);
  Tensor lse = logsumexp(lg, 1, /*keepdims=*/true);
  Tensor picked = gather_cols(lg, labels);
  return mean_all(lse - picked);
}

std::vector<EvalState> Model::to_eval(const States& states) const {
  std::vector<EvalState> out(states.mu.size());
  const std::int64_t d = cfg_.feature_dim;
  for (std::size_t c = 0; c < states.mu.size(); ++c) {
    out[c].mu = states.mu[c].data();
    out[c].euclidean = states.euclidean;
    if (!states.euclidean) {
      out[c].precision = Mat(d, d);
      out[c].precision.a = states.cov[c].inverse.data();
      out[c].logdet = states.cov[c].logdet_value();
    }
  }
  return out;
}

NamedParams Model::parameters() {
  NamedParams params;
  extractor_.collect("extractor", &params, nullptr);
  if (encoder_) encoder_->collect("encoder", &params, nullptr);
  if (shrink_log_diag_.defined()) {
    params.emplace_back("head.log_diag", shrink_log_diag_);
    params.emplace_back("head.delta", shrink_delta_raw_);
  }
  return params;
}

NamedParams Model::checkpoint_state() {
  NamedParams params, buffers;
  extractor_.collect("extractor", &params, &buffers);
  if (encoder_) encoder_->collect("encoder", &params, &buffers);
  if (shrink_log_diag_.defined()) {
    params.emplace_back("head.log_diag", shrink_log_diag_);
    params.emplace_back("head.delta", shrink_delta_raw_);
  }
  params.insert(params.end(), buffers.begin(), buffers.end());
  params.emplace_back("head.kind", Tensor::from_data({1}, {static_cast<double>(
                                       static_cast<int>(cfg_.head))}));
  params.emplace_back("head.temperature",
                      Tensor::from_data({1}, {static_cast<double>(temperature)}));
  params.emplace_back("head.tau", Tensor::from_data({1}, {baseline_tau}));
  return params;
}

void Model::save(const std::string& path) { save_checkpoint(path, checkpoint_state()); }

void Model::load(const std::string& path) {
  NamedParams state = checkpoint_state();
  restore_checkpoint(path, state);
  for (const auto& [name, t] : state) {
    if (name == "head.kind") {
      const int code = static_cast<int>(t.data()[0]);
      if (code != static_cast<int>(cfg_.head)) {
        throw std::runtime_error("checkpoint: head kind mismatch (file has " +
                                 std::to_string(code) + ")");
      }
    } else if (name == "head.temperature") {
      temperature = static_cast<int>(t.data()[0]);
    } else if (name == "head.tau") {
      baseline_tau = t.data()[0];
    }
  }
}

void Model::warmup_spectral(int iters) { extractor_.warmup(iters); }

std::vector<const SpectralLinear*> Model::spectral_layers() const {
  return extractor_.spectral_layers();
}

// ---- evaluation-path inference --------------------------------------------

std::vector<double> stable_softmax(std::span<const double> logits) {
  double m = -HUGE_VAL;
  for (double v : logits) m = std::max(m, v);
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

namespace {

double query_m2(const EvalState& s, std::span<const double> z) {
  std::vector<double> delta(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) delta[i] = z[i] - s.mu[i];
  if (s.euclidean) {
    double acc = 0.0;
    for (double d : delta) acc += d * d;
    return acc;
  }
  return mahalanobis_sq(s.precision, delta);
}

}  // namespace

std::vector<double> eval_logits(const std::vector<EvalState>& states,
                                std::span<const double> z) {
  std::vector<double> out(states.size());
  for (std::size_t c = 0; c < states.size(); ++c) {
    const double m2 = query_m2(states[c], z);
    out[c] = states[c].euclidean ? -m2 : -0.5 * m2 - 0.5 * states[c].logdet;
  }
  return out;
}

double energy_raw(const std::vector<EvalState>& states, std::span<const double> z) {
  // logsumexp of the negated squared distances, then negated
  double m = -HUGE_VAL;
  std::vector<double> neg(states.size());
  for (std::size_t c = 0; c < states.size(); ++c) {
    neg[c] = -query_m2(states[c], z);
    m = std::max(m, neg[c]);
  }
  double acc = 0.0;
  for (double v : neg) acc += std::exp(v - m);
  return -(m + std::log(acc));
}

double energy_scale(const std::vector<EvalState>& states, std::span<const double> z,
                    int temperature, double floor) {
  if (temperature < 1) {
    throw std::invalid_argument("energy_scale: temperature must be >= 1");
  }
  return std::max(floor, energy_raw(states, z) / static_cast<double>(temperature));
}

LogitNormalPrediction predict(const std::vector<EvalState>& states,
                              std::span<const double> z, int temperature, int samples,
                              Rng& rng, double floor) {
  if (samples < 1) throw std::invalid_argument("predict: need at least one sample");
  LogitNormalPrediction p;
  p.mu_tilde = eval_logits(states, z);
  p.sigma_tilde = energy_scale(states, z, temperature, floor);
  p.temperature = temperature;
  p.samples = samples;
  const std::size_t C = states.size();
  p.probabilities.assign(C, 0.0);
  std::vector<double> omega(C);
  for (int m = 0; m < samples; ++m) {
    for (std::size_t c = 0; c < C; ++c) {
      omega[c] = p.mu_tilde[c] + p.sigma_tilde * rng.normal();
    }
    auto soft = stable_softmax(omega);
    for (std::size_t c = 0; c < C; ++c) p.probabilities[c] += soft[c];
  }
  for (double& v : p.probabilities) v /= static_cast<double>(samples);
  return p;
}

// ---- temperature handling --------------------------------------------------

TemperatureResult tune_temperature(const std::vector<TuningQuery>& queries, int samples,
                                   double floor, int t_max, Rng& rng) {
  if (queries.empty()) {
    throw std::invalid_argument("tune_temperature: empty validation set");
  }
  const double clamp = 1e-12;
  double det_nll = 0.0;
  for (const auto& q : queries) {
    auto soft = stable_softmax(q.mu_tilde);
    det_nll -= std::log(std::max(clamp, soft[static_cast<std::size_t>(q.label)]));
  }
  det_nll /= static_cast<double>(queries.size());

  // Common random numbers across T: one bank of standard normals per query,
  // rescaled by sigma(T), keeps the comparison paired and cheap.
  std::vector<std::vector<double>> noise(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    noise[i].resize(static_cast<std::size_t>(samples) * queries[i].mu_tilde.size());
    for (auto& x : noise[i]) x = rng.normal();
  }

  auto sampled_nll = [&](int t) {
    double nll = 0.0;
    std::vector<double> omega;
    std::vector<double> probs;
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const auto& q = queries[i];
      const std::size_t C = q.mu_tilde.size();
      const double sigma = std::max(floor, q.raw_energy / static_cast<double>(t));
      probs.assign(C, 0.0);
      omega.resize(C);
      for (int m = 0; m < samples; ++m) {
        for (std::size_t c = 0; c < C; ++c) {
          omega[c] = q.mu_tilde[c] + sigma * noise[i][static_cast<std::size_t>(m) * C + c];
        }
        auto soft = stable_softmax(omega);
        for (std::size_t c = 0; c < C; ++c) probs[c] += soft[c];
      }
      nll -= std::log(std::max(clamp, probs[static_cast<std::size_t>(q.label)] /
                                          static_cast<double>(samples)));
    }
    return nll / static_cast<double>(queries.size());
  };

  TemperatureResult res;
  int t = 1;
  while (sampled_nll(t) > det_nll && t < t_max) ++t;
  res.temperature = t;
  res.hit_cap = (t == t_max) && (sampled_nll(t) > det_nll);
  return res;
}

double baseline_temperature_scale(const std::vector<std::vector<double>>& logits,
                                  const std::vector<std::int64_t>& labels) {
  if (logits.size() != labels.size()) {
    throw std::invalid_argument("baseline_temperature_scale: size mismatch");
  }
  auto nll_at = [&](double tau) {
    double nll = 0.0;
    std::vector<double> scaled;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      scaled.assign(logits[i].begin(), logits[i].end());
      for (double& v : scaled) v /= tau;
      auto soft = stable_softmax(scaled);
      nll -= std::log(std::max(1e-12, soft[static_cast<std::size_t>(labels[i])]));
    }
    return nll / static_cast<double>(logits.size());
  };
  double lo = 0.05, hi = 20.0;
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = hi - phi * (hi - lo);
  double x2 = lo + phi * (hi - lo);
  double f1 = nll_at(x1), f2 = nll_at(x2);
  while (hi - lo > 1e-4) {
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - phi * (hi - lo);
      f1 = nll_at(x1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + phi * (hi - lo);
      f2 = nll_at(x2);
    }
  }
  return (lo + hi) / 2.0;
}

}  // namespace mmc
