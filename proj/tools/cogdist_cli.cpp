// cogdist — command-line front end. Exit codes: 0 ok, 1 runtime failure,
// 2 bad configuration / usage / missing upstream artifact.
#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "cogdist/error.hpp"
#include "cogdist/experiment.hpp"

namespace fs = std::filesystem;
using namespace cogdist;
using experiment::ExperimentConfig;

namespace {

void write_file(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << s;
}

void write_json(const fs::path& p, const nlohmann::json& j) { write_file(p, j.dump(2) + "\n"); }

fs::path manifest_in(const fs::path& run) { return run / "poison_manifest.json"; }

nn::Model load_model(const fs::path& run) {
  const fs::path p = run / "model.bin";
  if (!fs::exists(p)) throw ConfigError("run", "missing upstream artifact " + p.string() + " (run `train` first)");
  return nn::Model::load(p);
}

std::vector<std::string> split_methods(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  for (const auto& m : out) {
    if (std::find(experiment::kMethods.begin(), experiment::kMethods.end(), m) == experiment::kMethods.end()) {
      throw ConfigError("methods", "unknown detector '" + m + "'");
    }
  }
  if (out.empty()) throw ConfigError("methods", "empty list");
  return out;
}

// reference rows are dataset indices; evaluate() wants table positions
std::vector<std::size_t> positions(const ScoreTable& t, const std::vector<std::size_t>& ref) {
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    if (std::binary_search(ref.begin(), ref.end(), t.rows[r].index)) out.push_back(r);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_st("cogdist"));
  spdlog::set_pattern("[%l] %v");

  CLI::App app{"cogdist: cognitive-distillation backdoor detection toolkit"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off")->capture_default_str();

  // run
  std::string cfg_path, out_dir, run_dir;
  auto* run = app.add_subcommand("run", "full pipeline from a JSON config");
  run->add_option("--config", cfg_path, "experiment config (or a previous run.json)")->required();
  run->add_option("--out", out_dir, "output directory")->required();

  // poison
  auto* poison = app.add_subcommand("poison", "build the poisoned training set and write its manifest");
  poison->add_option("--config", cfg_path)->required();
  poison->add_option("--out", out_dir)->required();

  // train
  auto* train = app.add_subcommand("train", "train the reference CNN on a poisoned set");
  train->add_option("--run", run_dir, "directory holding poison_manifest.json")->required();

  // distill
  std::string layer = "logits";
  std::optional<double> alpha, beta;
  std::optional<int> steps;
  auto* distill = app.add_subcommand("distill", "cognitive distillation scores (CD-L / CD-F)");
  distill->add_option("--run", run_dir)->required();
  distill->add_option("--layer", layer, "logits (CD-L) or features (CD-F)")
      ->check(CLI::IsMember({"logits", "features"}))
      ->capture_default_str();
  distill->add_option("--alpha", alpha, "override the L1 weight");
  distill->add_option("--beta", beta, "override the TV weight");
  distill->add_option("--steps", steps, "override the optimization steps");

  // detect
  std::string methods = "cd_l";
  std::optional<double> gamma;
  auto* detect = app.add_subcommand("detect", "threshold scores and evaluate detection");
  detect->add_option("--run", run_dir)->required();
  detect->add_option("--methods", methods, "comma list of cd_l,cd_f,abl,strip,ss,ac")->capture_default_str();
  detect->add_option("--gamma", gamma, "threshold = mean -/+ gamma * sd of the reference clean scores");

  // mitigate
  std::string mit_method = "cd_l";
  std::optional<double> p_b, p_c, mit_lr;
  std::optional<int> mit_epochs;
  std::optional<std::string> ascent_loss;
  auto* mitigate = app.add_subcommand("mitigate", "unlearning + fine-tuning on a score-based partition");
  mitigate->add_option("--run", run_dir)->required();
  mitigate->add_option("--method", mit_method, "score table used for the partition")->capture_default_str();
  mitigate->add_option("--p-b", p_b, "suspect share");
  mitigate->add_option("--p-c", p_c, "trusted share");
  mitigate->add_option("--epochs", mit_epochs);
  mitigate->add_option("--lr", mit_lr);
  mitigate->add_option("--ascent-loss", ascent_loss, "ce | complement");

  // bias
  auto* bias = app.add_subcommand("bias", "attribute-shift bias graph on synthetic attribute data");
  bias->add_option("--config", cfg_path, "bias config (JSON); defaults when omitted");
  bias->add_option("--out", out_dir)->required();

  // report
  std::vector<std::string> runs;
  std::size_t bins = 20;
  auto* report = app.add_subcommand("report", "Table-1 AUROC CSV and score histograms over runs");
  report->add_option("--runs", runs, "run directories")->required();
  report->add_option("--out", out_dir)->required();
  report->add_option("--bins", bins)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::Error& e) {
    app.exit(e);
    return 2;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*run) {
      const auto cfg = ExperimentConfig::load(cfg_path);
      const auto s = experiment::run_experiment(cfg, out_dir);
      std::cout << "clean_accuracy " << s.clean_accuracy << "\nasr " << s.asr << "\n";
      for (const auto& [m, r] : s.reports) std::cout << "auroc_" << m << " " << r.auroc << "\n";
      if (s.mitigation) {
        std::cout << "asr_after_mitigation " << s.mitigation->asr_after << "\n"
                  << "clean_accuracy_after_mitigation " << s.mitigation->clean_accuracy_after << "\n";
      }
    } else if (*poison) {
      const auto cfg = ExperimentConfig::load(cfg_path);
      fs::create_directories(out_dir);
      const auto p = experiment::poison_stage(cfg);
      experiment::write_manifest(manifest_in(out_dir), cfg, p);
      std::cout << "poisoned " << p.poisoned.size() << " of " << p.train.size() << "\n";
    } else if (*train) {
      ExperimentConfig cfg;
      const auto p = experiment::read_manifest(manifest_in(run_dir), &cfg);
      const auto t0 = std::chrono::steady_clock::now();
      auto res = experiment::train_stage(cfg, p.train);
      res.model.save(fs::path(run_dir) / "model.bin");
      experiment::save_history(fs::path(run_dir) / "loss_history.json", res.history);
      const double acc = nn::evaluate_accuracy(res.model, p.test);
      const double asr =
          nn::evaluate_asr(res.model, attacks::triggered_test_set(p.test, cfg.attack), cfg.attack.target_label);
      write_json(fs::path(run_dir) / "train.json",
                 {{"clean_accuracy", acc},
                  {"asr", asr},
                  {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}});
      std::cout << "clean_accuracy " << acc << "\nasr " << asr << "\n";
    } else if (*distill) {
      ExperimentConfig cfg;
      const auto p = experiment::read_manifest(manifest_in(run_dir), &cfg);
      const auto model = load_model(run_dir);
      const bool features = layer == "features";
      auto& cd = features ? cfg.cd_features : cfg.cd_logits;
      if (alpha) cd.alpha = *alpha;
      if (beta) cd.beta = *beta;
      if (steps) cd.steps = *steps;
      cd.validate();
      const std::string method = features ? "cd_f" : "cd_l";
      std::vector<distill::MaskResult> masks;
      const auto t = experiment::method_scores(method, cfg, model, p.train, nullptr, &masks);
      save_scores(fs::path(run_dir) / ("scores_" + method + ".csv"), t);
      experiment::write_roc(fs::path(run_dir) / ("roc_" + method + ".csv"), t);
      experiment::save_masks(fs::path(run_dir) / (features ? "masks_features" : "masks"), p.train, masks,
                             cfg.masks_to_save);
      write_json(fs::path(run_dir) / ("distill_" + method + ".json"), cd.to_json());
      std::cout << method << " scored " << t.size() << " samples\n";
    } else if (*detect) {
      ExperimentConfig cfg;
      const auto p = experiment::read_manifest(manifest_in(run_dir), &cfg);
      const double g = gamma.value_or(cfg.gamma);
      if (!(g >= 0.0)) throw ConfigError("gamma", "must be >= 0");
      std::vector<detect::DetectionReport> reports;
      std::optional<nn::Model> model;
      std::optional<nn::LossHistory> history;
      for (const auto& m : split_methods(methods)) {
        const fs::path f = fs::path(run_dir) / ("scores_" + m + ".csv");
        ScoreTable t;
        if (fs::exists(f)) {
          t = load_scores(f);
        } else if (m == "cd_l" || m == "cd_f") {
          throw ConfigError("methods", "missing upstream artifact " + f.string() + " (run `distill` first)");
        } else {
          // baselines are cheap enough to compute on demand
          if (!model) model = load_model(run_dir);
          if (m == "abl" && !history) history = experiment::load_history(fs::path(run_dir) / "loss_history.json");
          t = experiment::method_scores(m, cfg, *model, p.train, history ? &*history : nullptr);
          save_scores(fs::path(run_dir) / ("scores_" + m + ".csv"), t);
        }
        auto r = detect::evaluate(t, positions(t, p.reference_clean), g);
        r.method = m;
        std::cout << m << " auroc " << r.auroc << " auprc " << r.auprc << " tpr " << r.tpr << " fpr " << r.fpr
                  << "\n";
        reports.push_back(r);
      }
      experiment::write_detection(run_dir, attacks::to_string(cfg.attack.family), reports);
    } else if (*mitigate) {
      ExperimentConfig cfg;
      const auto p = experiment::read_manifest(manifest_in(run_dir), &cfg);
      const auto model = load_model(run_dir);
      const fs::path f = fs::path(run_dir) / ("scores_" + mit_method + ".csv");
      if (!fs::exists(f)) throw ConfigError("method", "missing upstream artifact " + f.string());
      if (p_b) cfg.mitigation.p_b = *p_b;
      if (p_c) cfg.mitigation.p_c = *p_c;
      if (mit_epochs) cfg.mitigation.unlearn.epochs = *mit_epochs;
      if (mit_lr) cfg.mitigation.unlearn.lr = *mit_lr;
      if (ascent_loss) cfg.mitigation.unlearn.ascent_loss = mitigate::ascent_loss_from_string(*ascent_loss);
      cfg.mitigation.method = mit_method;
      cfg.validate();
      cfg.mitigation.unlearn.validate();
      nn::Model after;
      const auto r = experiment::mitigation_stage(cfg, model, p, load_scores(f), &after);
      after.save(fs::path(run_dir) / "model_mitigated.bin");
      auto j = r.to_json();
      j["method"] = mit_method;
      write_json(fs::path(run_dir) / "mitigation.json", j);
      std::cout << j.dump(2) << "\n";
    } else if (*bias) {
      experiment::BiasConfig cfg;
      if (!cfg_path.empty()) {
        std::ifstream in(cfg_path);
        if (!in) throw ConfigError("config", "cannot open " + cfg_path);
        nlohmann::json j;
        try {
          j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
          throw ConfigError("config", e.what());
        }
        cfg = experiment::BiasConfig::from_json(j);
      }
      const auto r = experiment::run_bias(cfg, out_dir);
      std::cout << "edges " << r.graph.edges.size() << "\n";
    } else if (*report) {
      std::vector<fs::path> dirs(runs.begin(), runs.end());
      for (const auto& d : dirs) {
        if (!fs::is_directory(d)) throw ConfigError("runs", "missing upstream artifact: " + d.string());
      }
      fs::create_directories(out_dir);
      write_file(fs::path(out_dir) / "table1.csv", experiment::table1_csv(dirs));
      write_file(fs::path(out_dir) / "histograms.csv", experiment::histogram_csv(dirs, bins));
      std::cout << experiment::table1_csv(dirs);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
