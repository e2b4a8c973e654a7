#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "cogdist/attacks.hpp"
#include "cogdist/bias.hpp"
#include "cogdist/data.hpp"
#include "cogdist/detect.hpp"
#include "cogdist/distill.hpp"
#include "cogdist/mitigate.hpp"
#include "cogdist/model.hpp"
#include "cogdist/score_table.hpp"
#include "cogdist/train.hpp"

// Config-driven orchestration shared by `cogdist run` and the per-stage
// subcommands. The JSON schema is documented in README.md.
namespace cogdist::experiment {

inline constexpr const char* kVersion = "0.1.0";

/// Detector names accepted in configs and on the command line.
inline const std::vector<std::string> kMethods = {"cd_l", "cd_f", "abl", "strip", "ss", "ac"};

struct DatasetConfig {
  std::string kind = "synthetic_shapes";  // synthetic_shapes | idx | cifar10
  // synthetic_shapes
  std::size_t n_per_class = 250;
  std::size_t test_per_class = 100;
  int num_classes = 4;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
  // idx
  std::string train_images, train_labels, test_images, test_labels;
  // cifar10
  std::vector<std::string> train_files;
  std::string test_file;
  /// Keep only the first `limit` training / test records (0 = all).
  std::size_t limit = 0;
  std::size_t test_limit = 0;

  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& j);
};

/// Every random stream of a run. Unset entries derive from the base seed.
struct Seeds {
  std::uint64_t data = 0, test = 0, attack = 0, model = 0, train = 0, cd = 0, strip = 0, ac = 0,
                reference = 0, mitigation = 0;
  nlohmann::json to_json() const;
};

struct MitigationConfig {
  bool enabled = false;
  std::string method = "cd_l";  // score table used for the partition
  double p_b = 0.025;
  double p_c = 0.70;
  mitigate::UnlearnConfig unlearn;
};

struct ExperimentConfig {
  std::string name = "run";
  DatasetConfig dataset;
  double width_multiplier = 1.0;
  nn::TrainConfig train;
  attacks::AttackSpec attack;
  distill::CDConfig cd_logits = distill::CDConfig::for_layer(distill::OutputLayer::logits);
  distill::CDConfig cd_features = distill::CDConfig::for_layer(distill::OutputLayer::features);
  std::vector<std::string> detectors = kMethods;
  double gamma = 1.0;
  /// Share of the clean training samples the defender is assumed to hold (D_s).
  double reference_fraction = 0.01;
  std::size_t strip_overlays = 64;
  std::size_t abl_epochs = 20;
  std::size_t ac_dim = 10;
  std::size_t masks_to_save = 16;
  std::size_t threads = 1;
  MitigationConfig mitigation;
  std::uint64_t seed = 0;
  Seeds seeds;

  /// Parses and validates; schema violations raise ConfigError naming the field.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  void validate() const;
};

// Stages -------------------------------------------------------------------

struct Datasets {
  ImageSet train;  // clean
  ImageSet test;
};
Datasets load_datasets(const ExperimentConfig& cfg);

/// The poisoned training set plus what the defender knows about it.
struct Poisoned {
  ImageSet clean;
  ImageSet train;
  ImageSet test;
  std::vector<std::size_t> poisoned;
  std::vector<std::size_t> reference_clean;  // D_s, indices into train
};
Poisoned poison_stage(const ExperimentConfig& cfg);

/// Manifest = resolved config + attack hash + indices; no pixel data.
void write_manifest(const std::filesystem::path& path, const ExperimentConfig& cfg, const Poisoned& p);
/// Rebuilds the poisoned set from a manifest and checks the recorded hash.
Poisoned read_manifest(const std::filesystem::path& path, ExperimentConfig* cfg_out);

void save_history(const std::filesystem::path& path, const nn::LossHistory& h);
nn::LossHistory load_history(const std::filesystem::path& path);

nn::TrainResult train_stage(const ExperimentConfig& cfg, const ImageSet& train);

/// CD scores; `masks` receives the per-image results when non-null.
ScoreTable cd_scores(const nn::Model& model, const ImageSet& data, const distill::CDConfig& cd,
                     std::uint64_t seed, std::size_t threads, const std::string& method,
                     std::vector<distill::MaskResult>* masks = nullptr);

/// Scores of one named method. `history` is required for abl only.
ScoreTable method_scores(const std::string& method, const ExperimentConfig& cfg, const nn::Model& model,
                         const ImageSet& data, const nn::LossHistory* history,
                         std::vector<distill::MaskResult>* masks = nullptr);

/// Writes masks/<index>.f32 (+ .json, .pgm) for up to `count` samples, half of them backdoor.
void save_masks(const std::filesystem::path& dir, const ImageSet& data,
                const std::vector<distill::MaskResult>& masks, std::size_t count);

mitigate::MitigationReport mitigation_stage(const ExperimentConfig& cfg, const nn::Model& model,
                                            const Poisoned& p, const ScoreTable& scores,
                                            nn::Model* mitigated = nullptr);

struct RunSummary {
  double clean_accuracy = 0.0;
  double asr = 0.0;
  std::map<std::string, detect::DetectionReport> reports;
  std::optional<mitigate::MitigationReport> mitigation;
  std::map<std::string, double> seconds;
};

/// Full pipeline into `out_dir`: model.bin, poison_manifest.json, loss_history.json,
/// scores_<method>.csv, roc_<method>.csv, detection.json, detection.csv, masks/,
/// mitigation.json (when enabled) and run.json.
RunSummary run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

void write_detection(const std::filesystem::path& dir, const std::string& attack,
                     const std::vector<detect::DetectionReport>& reports);
void write_roc(const std::filesystem::path& path, const ScoreTable& table);

// Report --------------------------------------------------------------------

/// Table-1 layout: one row per run (attack), one AUROC column per detector.
std::string table1_csv(const std::vector<std::filesystem::path>& run_dirs);
/// Per-run, per-method score histograms split by ground truth (Fig. 2 data).
std::string histogram_csv(const std::vector<std::filesystem::path>& run_dirs, std::size_t bins = 20);

// Bias ----------------------------------------------------------------------

struct BiasConfig {
  std::size_t n = 2000;
  std::size_t num_attributes = 6;
  std::size_t height = 16;
  std::size_t width = 16;
  std::vector<AttributeLink> links = {{0, 1, 0.9}};
  std::vector<std::size_t> faint;
  std::vector<std::string> names;  // defaults to attr0..attrN-1
  nn::TrainConfig train;
  distill::CDConfig cd = distill::CDConfig::for_layer(distill::OutputLayer::logits);
  double fraction = 0.005;
  double threshold = 0.8;
  std::size_t threads = 1;
  std::uint64_t seed = 0;

  static BiasConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct BiasResult {
  std::vector<bias::AttributeShift> shifts;
  bias::BiasGraph graph;
};

/// Trains one multi-label model (one output per attribute), distills each
/// attribute's output, scores attribute shifts of the low-norm subsets, and
/// writes bias_shifts.csv, bias_graph.json and bias_graph.dot into `out_dir`.
BiasResult run_bias(const BiasConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace cogdist::experiment
