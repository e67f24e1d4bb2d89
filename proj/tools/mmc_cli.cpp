// Command-line front end: training, evaluation, plotting, the experiment
// suite, and task dumps.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "mmc/checkpoint.hpp"
#include "mmc/config.hpp"
#include "mmc/experiment.hpp"
#include "mmc/model.hpp"
#include "mmc/plot.hpp"
#include "mmc/tasks.hpp"

namespace fs = std::filesystem;
using namespace mmc;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

int classify_error(const std::exception& e) {
  const std::string msg = e.what();
  if (dynamic_cast<const std::invalid_argument*>(&e)) return kExitConfig;
  if (msg.find("invariant breached") != std::string::npos ||
      msg.find("non-finite") != std::string::npos) {
    return kExitNumeric;
  }
  return kExitIo;
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
}

std::string eval_report_csv(const RunConfig& cfg, const EvalOutcome& ev) {
  std::ostringstream os;
  os << "dataset,head,rank,seed,episodes,mc_samples,id_accuracy,id_nll,id_ece,"
        "ood_ece,ood_aupr,ood_auroc,mean_precision_spread,clamped_log_probs\n";
  os << dataset_name(cfg.dataset) << ',' << head_name(cfg.head) << ',' << cfg.rank << ','
     << cfg.seed << ',' << ev.episodes << ',' << ev.mc_samples << ','
     << format_double(ev.id_accuracy) << ',' << format_double(ev.id_nll) << ','
     << format_double(ev.id_ece) << ',' << format_double(ev.ood_ece) << ','
     << format_double(ev.aupr) << ',' << format_double(ev.auroc) << ','
     << format_double(ev.mean_precision_spread) << ',' << ev.clamped_log_probs << "\n";
  return os.str();
}

std::string bins_csv(const BinTable& bins) {
  std::ostringstream os;
  os << "bin_lo,bin_hi,count,mean_confidence,mean_accuracy\n";
  for (std::size_t i = 0; i < bins.lower.size(); ++i) {
    os << format_double(bins.lower[i]) << ',' << format_double(bins.upper[i]) << ','
       << bins.counts[i] << ',' << format_double(bins.mean_confidence[i]) << ','
       << format_double(bins.mean_accuracy[i]) << "\n";
  }
  return os.str();
}

std::string spectra_csv(const std::vector<SpectrumRow>& spectra) {
  std::ostringstream os;
  os << "spread,eigenvalues_descending\n";
  for (const auto& row : spectra) {
    os << format_double(row.spread) << ',';
    for (std::size_t i = 0; i < row.eigenvalues.size(); ++i) {
      if (i) os << ';';
      os << format_double(row.eigenvalues[i]);
    }
    os << "\n";
  }
  return os.str();
}

std::string train_log_csv(const TrainOutcome& tr) {
  std::ostringstream os;
  os << "episode,loss,accuracy,running_accuracy\n";
  for (const auto& row : tr.log) {
    os << row.episode << ',' << format_double(row.loss) << ','
       << format_double(row.accuracy) << ',' << format_double(row.running_accuracy)
       << "\n";
  }
  return os.str();
}

std::string perturbation_csv(const SuiteResult& suite) {
  std::ostringstream os;
  os << "model,variants,predicted_accuracy,modified_accuracy,better_accuracy,"
        "predicted_nll,modified_nll,better_nll,predicted_ece,modified_ece,better_ece\n";
  for (const auto& row : suite.rows) {
    if (!row.perturbation) continue;
    const auto& p = *row.perturbation;
    os << row.model << ',' << p.variants << ',' << format_double(p.predicted_accuracy)
       << ',' << format_double(p.modified_accuracy) << ','
       << format_double(p.better_accuracy) << ',' << format_double(p.predicted_nll) << ','
       << format_double(p.modified_nll) << ',' << format_double(p.better_nll) << ','
       << format_double(p.predicted_ece) << ',' << format_double(p.modified_ece) << ','
       << format_double(p.better_ece) << "\n";
  }
  return os.str();
}

std::string suite_raw_csv(const SuiteResult& suite) {
  std::ostringstream os;
  os << "model,seed_index,id_accuracy,id_nll,id_ece,ood_ece,ood_aupr,ood_auroc,"
        "mean_precision_spread\n";
  for (const auto& row : suite.rows) {
    for (std::size_t s = 0; s < row.per_seed.size(); ++s) {
      const auto& ev = row.per_seed[s];
      os << row.model << ',' << s << ',' << format_double(ev.id_accuracy) << ','
         << format_double(ev.id_nll) << ',' << format_double(ev.id_ece) << ','
         << format_double(ev.ood_ece) << ',' << format_double(ev.aupr) << ','
         << format_double(ev.auroc) << ',' << format_double(ev.mean_precision_spread)
         << "\n";
    }
  }
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Meta-learned Mahalanobis covariances for calibrated few-shot classification"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  RunConfig cfg;
  // flag presence is tracked so CLI flags override file keys (precedence:
  // defaults < --config file < explicit flags)
  std::string dataset_flag, head_flag, out_flag;
  std::int64_t rank_flag = 0;
  int episodes_flag = 0, mc_flag = 0, tmax_flag = 0;
  std::uint64_t seed_flag = 0;

  app.add_option("--config", config_path, "key = value config file");
  auto* opt_seed = app.add_option("--seed", seed_flag, "rng seed");
  auto* opt_dataset = app.add_option("--dataset", dataset_flag, "moons|circles|gaussians");
  auto* opt_head = app.add_option(
      "--head", head_flag,
      "mahalanobis|protonet|protonet-sn|shrinkage-class|shrinkage-shared");
  auto* opt_rank = app.add_option("--rank", rank_flag, "covariance factor columns r");
  auto* opt_episodes = app.add_option("--episodes", episodes_flag, "training episodes");
  auto* opt_out = app.add_option("--out", out_flag, "output directory");
  auto* opt_mc = app.add_option("--mc-samples", mc_flag, "MC samples M for inference");
  auto* opt_tmax = app.add_option("--tmax", tmax_flag, "temperature search cap");

  auto* cmd_train = app.add_subcommand("train", "episodic training + temperature tuning");
  auto* cmd_eval = app.add_subcommand("eval", "calibration/OOD evaluation of a checkpoint");
  std::string ckpt_path;
  cmd_eval->add_option("checkpoint", ckpt_path, "checkpoint file")->required();
  auto* cmd_plot = app.add_subcommand("plot", "entropy surface, ellipses, eigenvalues");
  std::string plot_ckpt;
  cmd_plot->add_option("checkpoint", plot_ckpt, "checkpoint file")->required();
  auto* cmd_experiment = app.add_subcommand("experiment", "full model-grid suite");
  std::string suite_name;
  cmd_experiment->add_option("suite", suite_name, "moons|circles|gaussians")->required();
  auto* cmd_dump = app.add_subcommand("dump-task", "write one sampled task as CSV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (!config_path.empty()) cfg = RunConfig::load(config_path);
    if (*opt_seed) cfg.seed = seed_flag;
    if (*opt_dataset) {
      auto k = dataset_from_name(dataset_flag);
      if (!k) throw std::invalid_argument("unknown dataset '" + dataset_flag + "'");
      cfg.dataset = *k;
    }
    if (*opt_head) {
      auto k = head_from_name(head_flag);
      if (!k) throw std::invalid_argument("unknown head '" + head_flag + "'");
      cfg.head = *k;
    }
    if (*opt_rank) cfg.rank = rank_flag;
    if (*opt_episodes) cfg.train_episodes = episodes_flag;
    if (*opt_out) cfg.out_dir = out_flag;
    if (*opt_mc) cfg.mc_samples = mc_flag;
    if (*opt_tmax) cfg.t_max = tmax_flag;
    cfg.validate();
    fs::create_directories(cfg.out_dir);

    if (*cmd_train) {
      Model model(cfg.model_config(), cfg.seed);
      TrainOutcome tr = train_model(model, cfg);
      write_text(cfg.out_dir + "/train_log.csv", train_log_csv(tr));
      cfg.save(cfg.out_dir + "/config.txt");
      if (tr.aborted) {
        std::cerr << "training aborted: non-finite loss on three consecutive episodes\n";
        return kExitNumeric;
      }
      model.save(cfg.out_dir + "/checkpoint.mmc");
      std::cout << "trained " << tr.log.size() << " episodes";
      if (!tr.log.empty()) {
        std::cout << ", final running accuracy " << tr.log.back().running_accuracy;
      }
      std::cout << "\n";
      if (cfg.head == HeadKind::ProtoMahalanobis) {
        std::cout << "tuned temperature T = " << tr.temperature
                  << (tr.temperature_hit_cap ? " (warning: hit t_max cap)" : "") << "\n";
      } else {
        std::cout << "baseline softmax temperature tau = " << tr.baseline_tau << "\n";
      }
      std::cout << "checkpoint: " << cfg.out_dir << "/checkpoint.mmc\n";
    } else if (*cmd_eval) {
      Model model(cfg.model_config(), cfg.seed);
      model.load(ckpt_path);
      EvalOutcome ev = evaluate_model(model, cfg);
      write_text(cfg.out_dir + "/report.csv", eval_report_csv(cfg, ev));
      write_text(cfg.out_dir + "/bins_id.csv", bins_csv(ev.id_bins.bins));
      write_text(cfg.out_dir + "/bins_ood.csv", bins_csv(ev.ood_bins.bins));
      if (!ev.sample_spectra.empty()) {
        write_text(cfg.out_dir + "/spectra.csv", spectra_csv(ev.sample_spectra));
      }
      std::cout << "# OOD scores are logit energies; AUPR/AUROC treat in-distribution "
                   "as the positive class\n";
      std::cout << "id_accuracy " << ev.id_accuracy << "\nid_nll " << ev.id_nll
                << "\nid_ece " << ev.id_ece << "\nood_ece " << ev.ood_ece << "\nood_aupr "
                << ev.aupr << "\nood_auroc " << ev.auroc << "\nreports: " << cfg.out_dir
                << "/report.csv\n";
    } else if (*cmd_plot) {
      Model model(cfg.model_config(), cfg.seed);
      model.load(plot_ckpt);
      Rng rng(derive_seed(cfg.seed, 0x9001));
      Task task = sample_task(cfg.task_config(), rng);
      plot_entropy_surface(model, task, cfg, cfg.out_dir + "/entropy.svg");
      if (head_uses_covariance(cfg.head)) {
        plot_covariance_ellipses(model, task, cfg, cfg.out_dir + "/ellipses.svg");
        EpisodeBatch batch = to_batch(task);
        Tensor sf = model.features(batch.support, false);
        auto states = model.to_eval(model.class_states(sf, batch.ways, batch.shots));
        std::vector<SpectrumRow> spectra;
        for (const auto& s : states) spectra.push_back(precision_spectrum(s.precision));
        plot_eigen_histogram(spectra, cfg.out_dir + "/eigenvalues.svg");
      }
      std::cout << "plots written to " << cfg.out_dir << "\n";
    } else if (*cmd_experiment) {
      auto kind = dataset_from_name(suite_name);
      if (!kind) {
        throw std::invalid_argument("unknown suite '" + suite_name +
                                    "'; available: moons, circles, gaussians");
      }
      cfg.dataset = *kind;
      SuiteResult suite = run_suite(cfg, /*verbose=*/true);
      write_text(cfg.out_dir + "/" + suite.suite + "_table.csv", suite_table_csv(suite));
      write_text(cfg.out_dir + "/" + suite.suite + "_raw.csv", suite_raw_csv(suite));
      write_text(cfg.out_dir + "/" + suite.suite + "_perturbation.csv",
                 perturbation_csv(suite));
      std::cout << suite_table_csv(suite);
      std::cout << "tables written to " << cfg.out_dir << "\n";
    } else if (*cmd_dump) {
      Rng rng(derive_seed(cfg.seed, 0x9002));
      Task task = sample_task(cfg.task_config(), rng);
      write_text(cfg.out_dir + "/task.csv", task_to_csv(task));
      std::cout << "task written to " << cfg.out_dir << "/task.csv\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return classify_error(e);
  }
  return kExitOk;
}
