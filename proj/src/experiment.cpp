#include "mmc/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace mmc {

namespace {

// disjoint seed streams per purpose
constexpr std::uint64_t kTrainStream = 0x1000000000ull;
constexpr std::uint64_t kValStream = 0x2000000000ull;
constexpr std::uint64_t kEvalStream = 0x3000000000ull;
constexpr std::uint64_t kEvalMcStream = 0x4000000000ull;
constexpr std::uint64_t kTuneStream = 0x5000000000ull;
constexpr std::uint64_t kPerturbStream = 0x6000000000ull;

std::vector<std::int64_t> argmax_rows(const Tensor& logits) {
  const std::int64_t n = logits.dim(0), c = logits.dim(1);
  std::vector<std::int64_t> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < c; ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

}  // namespace

EpisodeBatch to_batch(const Task& task) {
  EpisodeBatch b;
  b.ways = task.ways;
  b.shots = task.shots;
  std::vector<double> sdata;
  sdata.reserve(task.support.size() * 2);
  for (const auto& p : task.support) {
    sdata.push_back(p.x[0]);
    sdata.push_back(p.x[1]);
  }
  b.support = Tensor::from_data({static_cast<std::int64_t>(task.support.size()), 2},
                                std::move(sdata));
  std::vector<double> qdata;
  qdata.reserve(task.query.size() * 2);
  for (const auto& p : task.query) {
    qdata.push_back(p.x[0]);
    qdata.push_back(p.x[1]);
    b.query_labels.push_back(p.label);
  }
  b.query = Tensor::from_data({static_cast<std::int64_t>(task.query.size()), 2},
                              std::move(qdata));
  return b;
}

TrainOutcome train_model(Model& model, const RunConfig& cfg) {
  cfg.validate();
  const TaskConfig tc = cfg.task_config();
  TrainOutcome out;
  AdamOptions aopt;
  aopt.lr = cfg.lr;
  aopt.beta2 = cfg.adam_beta2;
  Adam adam(
      [&] {
        std::vector<Tensor> ps;
        for (auto& [name, t] : model.parameters()) ps.push_back(t);
        return ps;
      }(),
      aopt);

  int consecutive_bad = 0;
  double running_acc_sum = 0.0;
  std::vector<double> recent_acc;
  for (int ep = 0; ep < cfg.train_episodes; ++ep) {
    Rng rng(derive_seed(cfg.seed, kTrainStream + static_cast<std::uint64_t>(ep)));
    EpisodeBatch batch = to_batch(sample_task(tc, rng));
    const std::int64_t n_support = batch.support.dim(0);
    const std::int64_t n_query = batch.query.dim(0);

    // one training forward pass over support and query together
    Tensor feats = model.features(concat({batch.support, batch.query}, 0), true);
    Tensor sf = slice(feats, 0, 0, n_support);
    Tensor qf = slice(feats, 0, n_support, n_query);

    auto states = model.class_states(sf, batch.ways, batch.shots);
    Tensor lg = model.logits(states, qf);
    Tensor lse = logsumexp(lg, 1, true);
    Tensor picked = gather_cols(lg, batch.query_labels);
    Tensor loss = mean_all(lse - picked);

    TrainLogRow row;
    row.episode = ep;
    row.loss = loss.value();
    auto preds = argmax_rows(lg);
    double correct = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (preds[i] == batch.query_labels[i]) correct += 1.0;
    }
    row.accuracy = correct / static_cast<double>(preds.size());

    if (!std::isfinite(row.loss)) {
      ++consecutive_bad;
      ++out.skipped_updates;
      if (consecutive_bad >= 3) {
        out.aborted = true;
        out.log.push_back(row);
        break;
      }
    } else {
      consecutive_bad = 0;
      adam.zero_grad();
      backward(loss);
      if (cfg.grad_clip > 0.0) {
        double norm_sq = 0.0;
        for (auto& [name, t] : model.parameters()) {
          if (!t.has_grad()) continue;
          for (double g : t.grad()) norm_sq += g * g;
        }
        const double norm = std::sqrt(norm_sq);
        if (norm > cfg.grad_clip) {
          const double scale = cfg.grad_clip / norm;
          for (auto& [name, t] : model.parameters()) {
            if (!t.has_grad()) continue;
            for (double& g : const_cast<std::vector<double>&>(t.grad())) g *= scale;
          }
        }
      }
      if (cfg.cosine_lr) {
        // linear warmup over the first 5%, cosine decay after
        const int warm = std::max(1, cfg.train_episodes / 20);
        const double warm_scale = ep < warm ? static_cast<double>(ep + 1) / warm : 1.0;
        const double progress = static_cast<double>(ep) / std::max(1, cfg.train_episodes);
        adam.set_lr(cfg.lr * warm_scale * 0.5 * (1.0 + std::cos(M_PI * progress)));
      }
      out.skipped_updates += adam.step();
    }

    recent_acc.push_back(row.accuracy);
    running_acc_sum += row.accuracy;
    if (recent_acc.size() > 100) {
      running_acc_sum -= recent_acc[recent_acc.size() - 101];
    }
    row.running_accuracy =
        running_acc_sum / static_cast<double>(std::min<std::size_t>(recent_acc.size(), 100));
    out.log.push_back(row);
  }

  // post-hoc temperature handling on fresh validation episodes; an untrained
  // model keeps T = 1
  if (cfg.val_episodes > 0 && !out.aborted && cfg.train_episodes > 0) {
    if (head_uses_covariance(cfg.head) && cfg.head == HeadKind::ProtoMahalanobis) {
      std::vector<TuningQuery> queries;
      for (int ep = 0; ep < cfg.val_episodes; ++ep) {
        Rng rng(derive_seed(cfg.seed, kValStream + static_cast<std::uint64_t>(ep)));
        EpisodeBatch batch = to_batch(sample_task(tc, rng));
        Tensor sf = model.features(batch.support, false);
        Tensor qf = model.features(batch.query, false);
        auto states = model.to_eval(model.class_states(sf, batch.ways, batch.shots));
        const std::int64_t d = qf.dim(1);
        for (std::int64_t i = 0; i < qf.dim(0); ++i) {
          std::span<const double> z(qf.data().data() + i * d, static_cast<std::size_t>(d));
          TuningQuery q;
          q.mu_tilde = eval_logits(states, z);
          q.raw_energy = energy_raw(states, z);
          q.label = batch.query_labels[static_cast<std::size_t>(i)];
          queries.push_back(std::move(q));
        }
      }
      Rng trng(derive_seed(cfg.seed, kTuneStream));
      auto res = tune_temperature(queries, cfg.mc_samples, cfg.sigma_floor, cfg.t_max, trng);
      model.temperature = res.temperature;
      out.temperature = res.temperature;
      out.temperature_hit_cap = res.hit_cap;
    } else {
      // baselines: scalar softmax temperature fitted on validation logits
      std::vector<std::vector<double>> logit_dump;
      std::vector<std::int64_t> labels;
      for (int ep = 0; ep < cfg.val_episodes; ++ep) {
        Rng rng(derive_seed(cfg.seed, kValStream + static_cast<std::uint64_t>(ep)));
        EpisodeBatch batch = to_batch(sample_task(tc, rng));
        Tensor sf = model.features(batch.support, false);
        Tensor qf = model.features(batch.query, false);
        auto states = model.to_eval(model.class_states(sf, batch.ways, batch.shots));
        const std::int64_t d = qf.dim(1);
        for (std::int64_t i = 0; i < qf.dim(0); ++i) {
          std::span<const double> z(qf.data().data() + i * d, static_cast<std::size_t>(d));
          logit_dump.push_back(eval_logits(states, z));
          labels.push_back(batch.query_labels[static_cast<std::size_t>(i)]);
        }
      }
      model.baseline_tau = baseline_temperature_scale(logit_dump, labels);
      out.baseline_tau = model.baseline_tau;
    }
  }
  return out;
}

double predictive_entropy(std::span<const double> probabilities) {
  double h = 0.0;
  for (double p : probabilities) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

EvalOutcome evaluate_model(Model& model, const RunConfig& cfg) {
  cfg.validate();
  if (cfg.eval_episodes <= 0) {
    throw std::invalid_argument("evaluate_model: eval_episodes must be positive");
  }
  const TaskConfig tc = cfg.task_config();
  const bool mc_head = cfg.head == HeadKind::ProtoMahalanobis;
  const bool cov_head = head_uses_covariance(cfg.head);

  std::vector<std::vector<double>> id_probs, ood_probs;
  std::vector<std::int64_t> id_labels, ood_labels;
  std::vector<double> id_energy, ood_energy;
  std::vector<double> spreads;
  std::vector<SpectrumRow> sample_spectra;

  EvalOutcome out;
  out.episodes = cfg.eval_episodes;
  out.mc_samples = cfg.mc_samples;

  for (int ep = 0; ep < cfg.eval_episodes; ++ep) {
    Rng rng(derive_seed(cfg.seed, kEvalStream + static_cast<std::uint64_t>(ep)));
    Task task = sample_task(tc, rng);
    EpisodeBatch batch = to_batch(task);
    Rng mc_rng(derive_seed(cfg.seed, kEvalMcStream + static_cast<std::uint64_t>(ep)));

    Tensor sf = model.features(batch.support, false);
    auto states = model.to_eval(model.class_states(sf, batch.ways, batch.shots));

    if (cov_head) {
      for (const auto& s : states) {
        auto row = precision_spectrum(s.precision);
        spreads.push_back(row.spread);
        if (sample_spectra.size() < 64) sample_spectra.push_back(row);
        if (cfg.head == HeadKind::ShrinkageShared) break;  // one shared matrix
      }
    }

    auto classify = [&](std::span<const double> z, std::vector<double>* probs,
                        double* energy) {
      std::vector<double> logits = eval_logits(states, z);
      *energy = energy_score(logits);
      if (mc_head) {
        auto pred = predict(states, z, model.temperature, cfg.mc_samples, mc_rng,
                            cfg.sigma_floor);
        *probs = std::move(pred.probabilities);
      } else {
        for (double& v : logits) v /= model.baseline_tau;
        *probs = stable_softmax(logits);
      }
    };

    const std::int64_t d = cfg.feature_dim;
    Tensor qf = model.features(batch.query, false);
    for (std::int64_t i = 0; i < qf.dim(0); ++i) {
      std::span<const double> z(qf.data().data() + i * d, static_cast<std::size_t>(d));
      std::vector<double> probs;
      double energy;
      classify(z, &probs, &energy);
      id_probs.push_back(std::move(probs));
      id_labels.push_back(batch.query_labels[static_cast<std::size_t>(i)]);
      id_energy.push_back(energy);
    }

    // uniform OOD noise over the expanded support box, random labels
    if (cfg.ood_per_episode > 0) {
      Box box = support_box(task).expanded(cfg.box_expand);
      auto noise = ood_query_noise(box, cfg.ood_per_episode, mc_rng);
      std::vector<double> ndata;
      ndata.reserve(noise.size() * 2);
      for (const auto& p : noise) {
        ndata.push_back(p[0]);
        ndata.push_back(p[1]);
      }
      Tensor nf = model.features(
          Tensor::from_data({static_cast<std::int64_t>(noise.size()), 2}, std::move(ndata)),
          false);
      for (std::int64_t i = 0; i < nf.dim(0); ++i) {
        std::span<const double> z(nf.data().data() + i * d, static_cast<std::size_t>(d));
        std::vector<double> probs;
        double energy;
        classify(z, &probs, &energy);
        ood_probs.push_back(std::move(probs));
        ood_labels.push_back(mc_rng.index(batch.ways));
        ood_energy.push_back(energy);
      }
    }
  }

  auto confidences_and_correct = [](const std::vector<std::vector<double>>& probs,
                                    const std::vector<std::int64_t>& labels,
                                    std::vector<double>* conf, std::vector<bool>* corr) {
    conf->resize(probs.size());
    corr->resize(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
      std::size_t arg = 0;
      for (std::size_t c = 1; c < probs[i].size(); ++c) {
        if (probs[i][c] > probs[i][arg]) arg = c;
      }
      (*conf)[i] = probs[i][arg];
      (*corr)[i] = static_cast<std::int64_t>(arg) == labels[i];
    }
  };

  auto id_stats = nll_and_accuracy(id_probs, id_labels);
  out.id_accuracy = id_stats.accuracy;
  out.id_nll = id_stats.nll;
  out.clamped_log_probs = id_stats.clamped;
  std::vector<double> conf;
  std::vector<bool> corr;
  confidences_and_correct(id_probs, id_labels, &conf, &corr);
  out.id_bins = ece_binned(conf, corr);
  out.id_ece = out.id_bins.ece;

  if (!ood_probs.empty()) {
    confidences_and_correct(ood_probs, ood_labels, &conf, &corr);
    out.ood_bins = ece_binned(conf, corr);
    out.ood_ece = out.ood_bins.ece;
    auto sep = auroc_aupr(id_energy, ood_energy);
    out.auroc = sep.auroc;
    out.aupr = sep.aupr;
  }
  if (!spreads.empty()) {
    double acc = 0.0;
    for (double s : spreads) acc += s;
    out.mean_precision_spread = acc / static_cast<double>(spreads.size());
    out.sample_spectra = std::move(sample_spectra);
  }
  return out;
}

EpisodeMetrics evaluate_episode_with(const std::vector<EvalState>& states,
                                     const std::vector<std::vector<double>>& query_feats,
                                     const std::vector<std::int64_t>& labels,
                                     int temperature, int samples, double floor,
                                     std::uint64_t noise_seed) {
  Rng rng(noise_seed);
  std::vector<std::vector<double>> probs;
  probs.reserve(query_feats.size());
  for (const auto& z : query_feats) {
    probs.push_back(predict(states, z, temperature, samples, rng, floor).probabilities);
  }
  auto stats = nll_and_accuracy(probs, labels);
  std::vector<double> conf(probs.size());
  std::vector<bool> corr(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < probs[i].size(); ++c) {
      if (probs[i][c] > probs[i][arg]) arg = c;
    }
    conf[i] = probs[i][arg];
    corr[i] = static_cast<std::int64_t>(arg) == labels[i];
  }
  EpisodeMetrics m;
  m.accuracy = stats.accuracy;
  m.nll = stats.nll;
  m.ece = ece(conf, corr);
  return m;
}

PerturbationResult eigen_perturbation_experiment(Model& model, const RunConfig& cfg,
                                                 int episodes) {
  if (!head_uses_covariance(cfg.head)) {
    throw std::invalid_argument("eigen perturbation: model has no covariance head");
  }
  const TaskConfig tc = cfg.task_config();
  PerturbationResult res;
  double pred_acc = 0.0, pred_nll = 0.0, pred_ece = 0.0;
  double mod_acc = 0.0, mod_nll = 0.0, mod_ece = 0.0;
  double bet_acc = 0.0, bet_nll = 0.0, bet_ece = 0.0;
  int episodes_done = 0;

  for (int ep = 0; ep < episodes; ++ep) {
    Rng rng(derive_seed(cfg.seed, kPerturbStream + static_cast<std::uint64_t>(ep)));
    Task task = sample_task(tc, rng);
    EpisodeBatch batch = to_batch(task);
    Tensor sf = model.features(batch.support, false);
    auto states = model.to_eval(model.class_states(sf, batch.ways, batch.shots));
    Tensor qf = model.features(batch.query, false);
    const std::int64_t d = cfg.feature_dim;
    std::vector<std::vector<double>> feats;
    for (std::int64_t i = 0; i < qf.dim(0); ++i) {
      feats.emplace_back(qf.data().begin() + i * d, qf.data().begin() + (i + 1) * d);
    }
    const std::uint64_t noise_seed =
        derive_seed(cfg.seed, kPerturbStream + 0x800000ull + static_cast<std::uint64_t>(ep));

    EpisodeMetrics base =
        evaluate_episode_with(states, feats, batch.query_labels, model.temperature,
                              cfg.mc_samples, cfg.sigma_floor, noise_seed);
    pred_acc += base.accuracy;
    pred_nll += base.nll;
    pred_ece += base.ece;
    ++episodes_done;

    for (std::size_t c = 0; c < states.size(); ++c) {
      auto dec = symmetric_eigen(states[c].precision);
      const std::size_t n = dec.values.size();
      for (std::size_t reset = 0; reset < n; ++reset) {
        std::vector<double> vals = dec.values;
        vals[reset] = 1.0;
        Mat modified(states[c].precision.rows, states[c].precision.cols);
        double logdet_precision = 0.0;
        for (std::int64_t i = 0; i < modified.rows; ++i) {
          for (std::int64_t j = 0; j < modified.cols; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
              acc += dec.vectors(i, static_cast<std::int64_t>(k)) * vals[k] *
                     dec.vectors(j, static_cast<std::int64_t>(k));
            }
            modified(i, j) = acc;
          }
        }
        for (double v : vals) logdet_precision += std::log(v);

        auto variant_states = states;
        variant_states[c].precision = modified;
        variant_states[c].logdet = -logdet_precision;  // log|Sigma| = -log|P|
        EpisodeMetrics vm =
            evaluate_episode_with(variant_states, feats, batch.query_labels,
                                  model.temperature, cfg.mc_samples, cfg.sigma_floor,
                                  noise_seed);
        mod_acc += vm.accuracy;
        mod_nll += vm.nll;
        mod_ece += vm.ece;
        auto better = [](double pred, double variant, bool higher_is_better) {
          if (pred == variant) return 0.5;
          return (higher_is_better ? pred > variant : pred < variant) ? 1.0 : 0.0;
        };
        bet_acc += better(base.accuracy, vm.accuracy, true);
        bet_nll += better(base.nll, vm.nll, false);
        bet_ece += better(base.ece, vm.ece, false);
        ++res.variants;
      }
    }
  }
  if (episodes_done > 0) {
    res.predicted_accuracy = pred_acc / episodes_done;
    res.predicted_nll = pred_nll / episodes_done;
    res.predicted_ece = pred_ece / episodes_done;
  }
  if (res.variants > 0) {
    res.modified_accuracy = mod_acc / res.variants;
    res.modified_nll = mod_nll / res.variants;
    res.modified_ece = mod_ece / res.variants;
    res.better_accuracy = bet_acc / res.variants;
    res.better_nll = bet_nll / res.variants;
    res.better_ece = bet_ece / res.variants;
  }
  return res;
}

namespace {

struct Cell {
  std::size_t row;
  int seed_index;
};

}  // namespace

SuiteResult run_suite(const RunConfig& base, bool verbose) {
  SuiteResult result;
  result.suite = dataset_name(base.dataset);

  struct RowSpec {
    std::string name;
    HeadKind head;
    std::int64_t rank;
  };
  const std::vector<RowSpec> specs = {
      {"Protonet", HeadKind::Protonet, 0},
      {"Protonet-SN", HeadKind::ProtonetSN, 0},
      {"Shrinkage (per-class)", HeadKind::ShrinkagePerClass, 0},
      {"Shrinkage (shared)", HeadKind::ShrinkageShared, 0},
      {"Mahalanobis (diag)", HeadKind::ProtoMahalanobis, 0},
      {"Mahalanobis (rank-1)", HeadKind::ProtoMahalanobis, 1},
      {"Mahalanobis (rank-2)", HeadKind::ProtoMahalanobis, 2},
      {"Mahalanobis (rank-4)", HeadKind::ProtoMahalanobis, 4},
  };
  result.rows.resize(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    result.rows[i].model = specs[i].name;
    result.rows[i].head = specs[i].head;
    result.rows[i].rank = specs[i].rank;
    result.rows[i].per_seed.resize(static_cast<std::size_t>(base.experiment_seeds));
  }

  std::vector<Cell> cells;
  for (std::size_t r = 0; r < specs.size(); ++r) {
    for (int s = 0; s < base.experiment_seeds; ++s) cells.push_back({r, s});
  }

  int threads = static_cast<int>(std::thread::hardware_concurrency());
  if (const char* env = std::getenv("MMC_THREADS")) {
    threads = std::max(1, std::atoi(env));
  }
  threads = std::max(1, std::min<int>(threads, static_cast<int>(cells.size())));

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      const Cell cell = cells[i];
      const RowSpec& spec = specs[cell.row];
      RunConfig cfg = base;
      cfg.head = spec.head;
      cfg.rank = spec.rank;
      cfg.seed = derive_seed(base.seed, (cell.row << 8) | static_cast<std::uint64_t>(cell.seed_index));
      Model model(cfg.model_config(), cfg.seed);
      TrainOutcome tr = train_model(model, cfg);
      if (tr.aborted && verbose) {
        std::cerr << "[suite] " << spec.name << " seed " << cell.seed_index
                  << ": training aborted on non-finite loss\n";
      }
      result.rows[cell.row].per_seed[static_cast<std::size_t>(cell.seed_index)] =
          evaluate_model(model, cfg);
      if (spec.head == HeadKind::ProtoMahalanobis && cell.seed_index == 0) {
        result.rows[cell.row].perturbation =
            eigen_perturbation_experiment(model, cfg, std::min(20, cfg.eval_episodes));
      }
      if (verbose) {
        const auto& ev = result.rows[cell.row].per_seed[static_cast<std::size_t>(cell.seed_index)];
        std::ostringstream os;
        os << "[suite] " << result.suite << " / " << spec.name << " / seed "
           << cell.seed_index << ": id_acc=" << ev.id_accuracy
           << " id_ece=" << ev.id_ece << " ood_ece=" << ev.ood_ece << "\n";
        std::cerr << os.str();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  return result;
}

namespace {

struct MeanStd {
  double mean = 0.0, sd = 0.0;
};

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd ms;
  if (xs.empty()) return ms;
  for (double x : xs) ms.mean += x;
  ms.mean /= static_cast<double>(xs.size());
  for (double x : xs) ms.sd += (x - ms.mean) * (x - ms.mean);
  ms.sd = xs.size() > 1 ? std::sqrt(ms.sd / static_cast<double>(xs.size() - 1)) : 0.0;
  return ms;
}

std::string cell_text(const std::vector<double>& xs) {
  auto ms = mean_std(xs);
  return format_double(ms.mean) + "±" + format_double(ms.sd);
}

}  // namespace

std::string suite_table_csv(const SuiteResult& result) {
  std::ostringstream os;
  os << "model,id_accuracy,id_nll,id_ece,ood_ece,ood_aupr,ood_auroc\n";
  for (const auto& row : result.rows) {
    std::vector<double> acc, nll, ece_id, ece_ood, aupr, auroc;
    for (const auto& ev : row.per_seed) {
      acc.push_back(ev.id_accuracy);
      nll.push_back(ev.id_nll);
      ece_id.push_back(ev.id_ece);
      ece_ood.push_back(ev.ood_ece);
      aupr.push_back(ev.aupr);
      auroc.push_back(ev.auroc);
    }
    os << row.model << ',' << cell_text(acc) << ',' << cell_text(nll) << ','
       << cell_text(ece_id) << ',' << cell_text(ece_ood) << ',' << cell_text(aupr) << ','
       << cell_text(auroc) << "\n";
  }
  return os.str();
}

}  // namespace mmc
