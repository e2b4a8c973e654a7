#include "cogdist/experiment.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <spdlog/spdlog.h>
#include <sstream>

#include "cogdist/baselines.hpp"
#include "cogdist/error.hpp"
#include "cogdist/rng.hpp"

namespace cogdist::experiment {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Typed lookup with a default; type errors become ConfigError on `path.key`.
template <class T>
T field(const json& j, const std::string& key, T def, const std::string& path) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
    if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) {
      throw ConfigError(path + key, "must be non-negative");
    }
  }
  try {
    return v.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(path + key, std::string("wrong type (") + e.what() + ")");
  }
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path.empty() ? "config" : path.substr(0, path.size() - 1), "must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(known.begin(), known.end(), [&](const char* k) { return key == k; }) == known.end()) {
      throw ConfigError(path + key, "unknown key");
    }
  }
}

// Runs a sub-parser, mapping library exceptions to ConfigError on `section`.
template <class F>
auto parse_section(const std::string& section, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const json::exception& e) {
    throw ConfigError(section, e.what());
  } catch (const InvalidArgument& e) {
    throw ConfigError(section, e.what());
  }
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string(), "cannot open file");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string(), std::string("invalid JSON: ") + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

ImageSet take_first(const ImageSet& set, std::size_t limit) {
  if (limit == 0 || limit >= set.size()) return set;
  std::vector<std::size_t> idx(limit);
  for (std::size_t i = 0; i < limit; ++i) idx[i] = i;
  ImageSet out = set.subset(idx);
  out.num_classes = set.num_classes;
  return out;
}

void require_file(const std::string& path, const std::string& field_name) {
  if (path.empty()) throw ConfigError(field_name, "missing");
  if (!fs::exists(path)) throw ConfigError(field_name, "file not found: " + path);
}

// reference indices (dataset rows) -> positions in the table
std::vector<std::size_t> table_positions(const ScoreTable& t, const std::vector<std::size_t>& indices) {
  std::map<std::size_t, std::size_t> pos;
  for (std::size_t r = 0; r < t.rows.size(); ++r) pos[t.rows[r].index] = r;
  std::vector<std::size_t> out;
  for (std::size_t i : indices) {
    if (auto it = pos.find(i); it != pos.end()) out.push_back(it->second);
  }
  return out;
}

std::string attack_label(const attacks::AttackSpec& a) { return attacks::to_string(a.family); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

// Config ---------------------------------------------------------------------

json DatasetConfig::to_json() const {
  json j = {{"kind", kind}, {"limit", limit}, {"test_limit", test_limit}};
  if (kind == "synthetic_shapes") {
    j.update({{"n_per_class", n_per_class}, {"test_per_class", test_per_class}, {"num_classes", num_classes},
              {"height", height}, {"width", width}, {"channels", channels}});
  } else if (kind == "idx") {
    j.update({{"train_images", train_images}, {"train_labels", train_labels},
              {"test_images", test_images}, {"test_labels", test_labels}});
  } else {
    j.update({{"train_files", train_files}, {"test_file", test_file}});
  }
  return j;
}

DatasetConfig DatasetConfig::from_json(const json& j) {
  const std::string p = "dataset.";
  reject_unknown(j, {"kind", "n_per_class", "test_per_class", "num_classes", "height", "width", "channels",
                     "train_images", "train_labels", "test_images", "test_labels", "train_files", "test_file",
                     "limit", "test_limit"},
                 p);
  DatasetConfig d;
  d.kind = field(j, "kind", d.kind, p);
  if (d.kind != "synthetic_shapes" && d.kind != "idx" && d.kind != "cifar10") {
    throw ConfigError("dataset.kind", "expected synthetic_shapes, idx or cifar10, got '" + d.kind + "'");
  }
  d.n_per_class = field(j, "n_per_class", d.n_per_class, p);
  d.test_per_class = field(j, "test_per_class", d.test_per_class, p);
  d.num_classes = field(j, "num_classes", d.num_classes, p);
  d.height = field(j, "height", d.height, p);
  d.width = field(j, "width", d.width, p);
  d.channels = field(j, "channels", d.channels, p);
  d.train_images = field(j, "train_images", d.train_images, p);
  d.train_labels = field(j, "train_labels", d.train_labels, p);
  d.test_images = field(j, "test_images", d.test_images, p);
  d.test_labels = field(j, "test_labels", d.test_labels, p);
  d.train_files = field(j, "train_files", d.train_files, p);
  d.test_file = field(j, "test_file", d.test_file, p);
  d.limit = field(j, "limit", d.limit, p);
  d.test_limit = field(j, "test_limit", d.test_limit, p);
  return d;
}

json Seeds::to_json() const {
  return {{"data", data},   {"test", test},           {"attack", attack}, {"model", model},
          {"train", train}, {"cd", cd},               {"strip", strip},   {"ac", ac},
          {"reference", reference}, {"mitigation", mitigation}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  reject_unknown(j, {"name", "dataset", "model", "train", "attack", "cd", "detectors", "gamma",
                     "reference_fraction", "baselines", "masks_to_save", "threads", "mitigation", "seed", "seeds"},
                 "");
  ExperimentConfig c;
  c.name = field(j, "name", c.name, "");
  c.seed = field(j, "seed", c.seed, "");

  const json seeds = j.value("seeds", json::object());
  reject_unknown(seeds, {"data", "test", "attack", "model", "train", "cd", "strip", "ac", "reference", "mitigation"},
                 "seeds.");
  auto seed_of = [&](const char* key, std::uint64_t stream) {
    return field(seeds, key, derive_seed(c.seed, stream), "seeds.");
  };
  c.seeds.data = seed_of("data", 1);
  c.seeds.test = seed_of("test", 2);
  c.seeds.attack = seed_of("attack", 3);
  c.seeds.model = seed_of("model", 4);
  c.seeds.train = seed_of("train", 5);
  c.seeds.cd = seed_of("cd", 6);
  c.seeds.strip = seed_of("strip", 7);
  c.seeds.ac = seed_of("ac", 8);
  c.seeds.reference = seed_of("reference", 9);
  c.seeds.mitigation = seed_of("mitigation", 10);

  if (j.contains("dataset")) c.dataset = DatasetConfig::from_json(j.at("dataset"));

  if (j.contains("model")) {
    reject_unknown(j.at("model"), {"width_multiplier"}, "model.");
    c.width_multiplier = field(j.at("model"), "width_multiplier", c.width_multiplier, "model.");
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    c.train = parse_section("train", [&] { return nn::TrainConfig::from_json(t); });
    if (!t.contains("seed")) c.train.seed = c.seeds.train;
  } else {
    c.train.seed = c.seeds.train;
  }
  c.seeds.train = c.train.seed;

  if (!j.contains("attack")) throw ConfigError("attack", "missing");
  c.attack = parse_section("attack", [&] { return attacks::AttackSpec::from_json(j.at("attack")); });
  if (!j.at("attack").contains("seed")) c.attack.seed = c.seeds.attack;
  c.seeds.attack = c.attack.seed;

  if (j.contains("cd")) {
    const json& cd = j.at("cd");
    reject_unknown(cd, {"logits", "features"}, "cd.");
    if (cd.contains("logits")) {
      json l = cd.at("logits");
      if (l.value("layer", "logits") != "logits") throw ConfigError("cd.logits.layer", "must be 'logits'");
      l["layer"] = "logits";
      c.cd_logits = parse_section("cd.logits", [&] { return distill::CDConfig::from_json(l); });
    }
    if (cd.contains("features")) {
      json f = cd.at("features");
      if (f.value("layer", "features") != "features") throw ConfigError("cd.features.layer", "must be 'features'");
      f["layer"] = "features";
      c.cd_features = parse_section("cd.features", [&] { return distill::CDConfig::from_json(f); });
    }
  }

  c.detectors = field(j, "detectors", c.detectors, "");
  c.gamma = field(j, "gamma", c.gamma, "");
  c.reference_fraction = field(j, "reference_fraction", c.reference_fraction, "");
  if (j.contains("baselines")) {
    const json& b = j.at("baselines");
    reject_unknown(b, {"strip_overlays", "abl_epochs", "ac_dim"}, "baselines.");
    c.strip_overlays = field(b, "strip_overlays", c.strip_overlays, "baselines.");
    c.abl_epochs = field(b, "abl_epochs", c.abl_epochs, "baselines.");
    c.ac_dim = field(b, "ac_dim", c.ac_dim, "baselines.");
  }
  c.masks_to_save = field(j, "masks_to_save", c.masks_to_save, "");
  c.threads = field(j, "threads", c.threads, "");

  if (j.contains("mitigation")) {
    const json& m = j.at("mitigation");
    reject_unknown(m, {"enabled", "method", "p_b", "p_c", "epochs", "lr", "momentum", "weight_decay",
                       "batch_size", "ascent_ceiling", "ascent_loss", "seed"},
                   "mitigation.");
    c.mitigation.enabled = field(m, "enabled", c.mitigation.enabled, "mitigation.");
    c.mitigation.method = field(m, "method", c.mitigation.method, "mitigation.");
    c.mitigation.p_b = field(m, "p_b", c.mitigation.p_b, "mitigation.");
    c.mitigation.p_c = field(m, "p_c", c.mitigation.p_c, "mitigation.");
    c.mitigation.unlearn = parse_section("mitigation", [&] { return mitigate::UnlearnConfig::from_json(m); });
    if (!m.contains("seed")) c.mitigation.unlearn.seed = c.seeds.mitigation;
  } else {
    c.mitigation.unlearn.seed = c.seeds.mitigation;
  }
  c.seeds.mitigation = c.mitigation.unlearn.seed;

  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  json j = read_json(path);
  // a run.json carries the resolved config under "config"
  if (j.is_object() && j.contains("config") && j.contains("cogdist_version")) j = j.at("config");
  return from_json(j);
}

json ExperimentConfig::to_json() const {
  json mit = mitigation.unlearn.to_json();
  mit.update({{"enabled", mitigation.enabled}, {"method", mitigation.method},
              {"p_b", mitigation.p_b}, {"p_c", mitigation.p_c}});
  return {{"name", name},
          {"dataset", dataset.to_json()},
          {"model", {{"width_multiplier", width_multiplier}}},
          {"train", train.to_json()},
          {"attack", attack.to_json()},
          {"cd", {{"logits", cd_logits.to_json()}, {"features", cd_features.to_json()}}},
          {"detectors", detectors},
          {"gamma", gamma},
          {"reference_fraction", reference_fraction},
          {"baselines", {{"strip_overlays", strip_overlays}, {"abl_epochs", abl_epochs}, {"ac_dim", ac_dim}}},
          {"masks_to_save", masks_to_save},
          {"threads", threads},
          {"mitigation", mit},
          {"seed", seed},
          {"seeds", seeds.to_json()}};
}

void ExperimentConfig::validate() const {
  if (dataset.kind == "synthetic_shapes") {
    if (dataset.num_classes < 2) throw ConfigError("dataset.num_classes", "must be >= 2");
    if (dataset.n_per_class < 1) throw ConfigError("dataset.n_per_class", "must be >= 1");
    if (dataset.test_per_class < 1) throw ConfigError("dataset.test_per_class", "must be >= 1");
    if (dataset.channels < 1) throw ConfigError("dataset.channels", "must be >= 1");
    if (dataset.height < 8 || dataset.width < 8) throw ConfigError("dataset.height", "images must be at least 8x8");
    attack.validate(dataset.num_classes);
  } else if (dataset.kind == "cifar10" && dataset.train_files.empty()) {
    throw ConfigError("dataset.train_files", "missing");
  }
  if (!(width_multiplier > 0.0)) throw ConfigError("model.width_multiplier", "must be > 0");
  std::set<std::string> seen;
  for (const auto& d : detectors) {
    if (std::find(kMethods.begin(), kMethods.end(), d) == kMethods.end()) {
      throw ConfigError("detectors", "unknown detector '" + d + "'");
    }
    if (!seen.insert(d).second) throw ConfigError("detectors", "duplicate detector '" + d + "'");
  }
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("gamma", "must be finite and >= 0");
  if (!(reference_fraction > 0.0 && reference_fraction <= 1.0)) {
    throw ConfigError("reference_fraction", "must be in (0,1]");
  }
  if (strip_overlays < 1) throw ConfigError("baselines.strip_overlays", "must be >= 1");
  if (abl_epochs < 1) throw ConfigError("baselines.abl_epochs", "must be >= 1");
  if (ac_dim < 1) throw ConfigError("baselines.ac_dim", "must be >= 1");
  if (threads < 1) throw ConfigError("threads", "must be >= 1");
  if (std::find(kMethods.begin(), kMethods.end(), mitigation.method) == kMethods.end()) {
    throw ConfigError("mitigation.method", "unknown detector '" + mitigation.method + "'");
  }
  if (!(mitigation.p_b > 0.0 && mitigation.p_c > 0.0 && mitigation.p_b + mitigation.p_c <= 1.0)) {
    throw ConfigError("mitigation.p_b", "need p_b > 0, p_c > 0 and p_b + p_c <= 1");
  }
  cd_logits.validate();
  cd_features.validate();
}

// Stages ---------------------------------------------------------------------

Datasets load_datasets(const ExperimentConfig& cfg) {
  const DatasetConfig& d = cfg.dataset;
  Datasets out;
  if (d.kind == "synthetic_shapes") {
    out.train = make_synthetic_shapes(d.n_per_class, d.num_classes, d.height, d.width, cfg.seeds.data, d.channels);
    out.test = make_synthetic_shapes(d.test_per_class, d.num_classes, d.height, d.width, cfg.seeds.test, d.channels);
  } else if (d.kind == "idx") {
    require_file(d.train_images, "dataset.train_images");
    require_file(d.train_labels, "dataset.train_labels");
    require_file(d.test_images, "dataset.test_images");
    require_file(d.test_labels, "dataset.test_labels");
    out.train = load_idx(d.train_images, d.train_labels);
    out.test = load_idx(d.test_images, d.test_labels);
  } else {
    std::vector<fs::path> files;
    for (const auto& f : d.train_files) {
      require_file(f, "dataset.train_files");
      files.emplace_back(f);
    }
    require_file(d.test_file, "dataset.test_file");
    out.train = load_cifar10_binary(files);
    out.test = load_cifar10_binary(fs::path(d.test_file));
  }
  out.train = take_first(out.train, d.limit);
  out.test = take_first(out.test, d.test_limit);
  const int k = std::max(out.train.num_classes, out.test.num_classes);
  out.train.num_classes = out.test.num_classes = k;
  if (out.train.image_shape() != out.test.image_shape()) {
    throw ConfigError("dataset", "train and test image shapes differ");
  }
  return out;
}

Poisoned poison_stage(const ExperimentConfig& cfg) {
  Datasets ds = load_datasets(cfg);
  cfg.attack.validate(ds.train.num_classes);
  auto pr = attacks::poison_dataset(ds.train, cfg.attack);
  Poisoned p;
  p.clean = std::move(ds.train);
  p.test = std::move(ds.test);
  p.train = std::move(pr.data);
  p.poisoned = std::move(pr.poisoned);

  std::vector<std::size_t> clean_rows;
  for (std::size_t i = 0; i < p.train.size(); ++i) {
    if (!p.train.is_backdoor[i]) clean_rows.push_back(i);
  }
  const auto want = std::max<std::size_t>(
      2, static_cast<std::size_t>(std::floor(cfg.reference_fraction * static_cast<double>(clean_rows.size()))));
  if (clean_rows.size() < want) throw InvalidArgument("too few clean samples for the reference set");
  Rng rng(cfg.seeds.reference);
  for (std::size_t k : rng.sample_without_replacement(clean_rows.size(), want)) {
    p.reference_clean.push_back(clean_rows[k]);
  }
  std::sort(p.reference_clean.begin(), p.reference_clean.end());
  return p;
}

void write_manifest(const fs::path& path, const ExperimentConfig& cfg, const Poisoned& p) {
  json j = {{"format", "cogdist.poison_manifest/1"},
            {"config", cfg.to_json()},
            {"attack", cfg.attack.to_json()},
            {"attack_hash", cfg.attack.hash()},
            {"n_train", p.train.size()},
            {"num_classes", p.train.num_classes},
            {"poisoned", p.poisoned},
            {"reference_clean", p.reference_clean}};
  write_json(path, j);
}

Poisoned read_manifest(const fs::path& path, ExperimentConfig* cfg_out) {
  if (!fs::exists(path)) throw ConfigError("manifest", "missing upstream artifact " + path.string());
  const json j = read_json(path);
  try {
    if (j.at("format") != "cogdist.poison_manifest/1") throw FormatError(path.string() + ": not a poison manifest");
    ExperimentConfig cfg = ExperimentConfig::from_json(j.at("config"));
    if (j.at("attack_hash").get<std::string>() != cfg.attack.hash()) {
      throw FormatError(path.string() + ": attack hash does not match the recorded spec");
    }
    Datasets ds = load_datasets(cfg);
    if (ds.train.size() != j.at("n_train").get<std::size_t>()) {
      throw FormatError(path.string() + ": dataset size changed since poisoning");
    }
    Poisoned p;
    p.poisoned = j.at("poisoned").get<std::vector<std::size_t>>();
    p.reference_clean = j.at("reference_clean").get<std::vector<std::size_t>>();
    p.train = attacks::rematerialize(ds.train, cfg.attack, p.poisoned);
    p.clean = std::move(ds.train);
    p.test = std::move(ds.test);
    if (cfg_out != nullptr) *cfg_out = std::move(cfg);
    return p;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_history(const fs::path& path, const nn::LossHistory& h) {
  write_json(path, {{"epochs", h.epochs}, {"samples", h.samples}, {"losses", h.losses}});
}

nn::LossHistory load_history(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("history", "missing upstream artifact " + path.string());
  const json j = read_json(path);
  try {
    nn::LossHistory h;
    h.epochs = j.at("epochs").get<std::size_t>();
    h.samples = j.at("samples").get<std::size_t>();
    h.losses = j.at("losses").get<std::vector<double>>();
    if (h.losses.size() != h.epochs * h.samples) throw FormatError(path.string() + ": loss matrix size");
    return h;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

nn::TrainResult train_stage(const ExperimentConfig& cfg, const ImageSet& train) {
  auto model = nn::build_reference_cnn(train.image_shape(), train.num_classes, cfg.width_multiplier, cfg.seeds.model);
  return nn::train_classifier(std::move(model), train, cfg.train);
}

ScoreTable cd_scores(const nn::Model& model, const ImageSet& data, const distill::CDConfig& cd, std::uint64_t seed,
                     std::size_t threads, const std::string& method, std::vector<distill::MaskResult>* masks) {
  auto results = distill::distill_mask(model, data.images, cd, seed, threads);
  ScoreTable t;
  t.method = method;
  t.orientation = Orientation::low_is_backdoor;
  std::size_t failed = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (results[i].failed) {
      ++failed;
      continue;
    }
    t.rows.push_back({i, results[i].score, data.is_backdoor[i], data.labels[i]});
  }
  if (failed > 0) spdlog::warn("{}: {} of {} distillations failed and were excluded", method, failed, results.size());
  if (masks != nullptr) *masks = std::move(results);
  return t;
}

ScoreTable method_scores(const std::string& method, const ExperimentConfig& cfg, const nn::Model& model,
                         const ImageSet& data, const nn::LossHistory* history,
                         std::vector<distill::MaskResult>* masks) {
  ScoreTable t;
  if (method == "cd_l") {
    t = cd_scores(model, data, cfg.cd_logits, cfg.seeds.cd, cfg.threads, method, masks);
  } else if (method == "cd_f") {
    t = cd_scores(model, data, cfg.cd_features, derive_seed(cfg.seeds.cd, 1), cfg.threads, method, masks);
  } else if (method == "abl") {
    if (history == nullptr) throw ConfigError("history", "abl needs the training loss history");
    t = baselines::abl_scores(*history, data, cfg.abl_epochs);
  } else if (method == "strip") {
    t = baselines::strip_scores(model, data, data.images, cfg.strip_overlays, cfg.seeds.strip);
  } else if (method == "ss" || method == "ac") {
    const Batch features = nn::forward_features(model, to_batch(data.images));
    t = method == "ss" ? baselines::ss_scores(features, data)
                       : baselines::ac_scores(features, data, cfg.ac_dim, cfg.seeds.ac).table;
  } else {
    throw ConfigError("detectors", "unknown detector '" + method + "'");
  }
  t.method = method;
  return t;
}

void save_masks(const fs::path& dir, const ImageSet& data, const std::vector<distill::MaskResult>& masks,
                std::size_t count) {
  fs::create_directories(dir);
  std::vector<std::size_t> bd, clean;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (masks[i].failed) continue;
    (data.is_backdoor[i] ? bd : clean).push_back(i);
  }
  const std::size_t n_bd = std::min(bd.size(), count / 2 + count % 2);
  const std::size_t n_clean = std::min(clean.size(), count - n_bd);
  std::vector<std::size_t> pick(bd.begin(), bd.begin() + static_cast<long>(n_bd));
  pick.insert(pick.end(), clean.begin(), clean.begin() + static_cast<long>(n_clean));
  for (std::size_t i : pick) {
    const std::string stem = "mask_" + std::to_string(i) + (data.is_backdoor[i] ? "_bd" : "_clean");
    save_mask(dir / (stem + ".f32"), masks[i].mask);
    export_mask_pgm(dir / (stem + ".pgm"), masks[i].mask);
  }
}

mitigate::MitigationReport mitigation_stage(const ExperimentConfig& cfg, const nn::Model& model, const Poisoned& p,
                                            const ScoreTable& scores, nn::Model* mitigated) {
  const auto part = mitigate::partition_by_score(p.train, scores, cfg.mitigation.p_b, cfg.mitigation.p_c);
  const ImageSet triggered = attacks::triggered_test_set(p.test, cfg.attack);
  mitigate::MitigationReport r;
  r.clean_accuracy_before = nn::evaluate_accuracy(model, p.test);
  r.asr_before = nn::evaluate_asr(model, triggered, cfg.attack.target_label);
  nn::Model after = mitigate::unlearn_finetune(model, p.train, part, cfg.mitigation.unlearn);
  r.clean_accuracy_after = nn::evaluate_accuracy(after, p.test);
  r.asr_after = nn::evaluate_asr(after, triggered, cfg.attack.target_label);
  r.quality = mitigate::partition_quality(p.train, part);
  r.suspect_size = part.suspect.size();
  r.trusted_size = part.trusted.size();
  if (mitigated != nullptr) *mitigated = std::move(after);
  return r;
}

void write_detection(const fs::path& dir, const std::string& attack, const std::vector<detect::DetectionReport>& reports) {
  json arr = json::array();
  std::string csv = detect::DetectionReport::csv_header() + "\n";
  for (const auto& r : reports) {
    json j = r.to_json();
    j["attack"] = attack;
    arr.push_back(j);
    csv += r.csv_row(attack) + "\n";
  }
  write_json(dir / "detection.json", arr);
  write_text(dir / "detection.csv", csv);
}

void write_roc(const fs::path& path, const ScoreTable& table) {
  std::ostringstream out;
  out.precision(17);
  out << "fpr,tpr\n";
  for (const auto& [fpr, tpr] : detect::roc_curve(table)) out << fpr << "," << tpr << "\n";
  write_text(path, out.str());
}

RunSummary run_experiment(const ExperimentConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  RunSummary s;
  auto t0 = std::chrono::steady_clock::now();
  const Poisoned p = poison_stage(cfg);
  write_manifest(out_dir / "poison_manifest.json", cfg, p);
  s.seconds["poison"] = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  auto trained = train_stage(cfg, p.train);
  trained.model.save(out_dir / "model.bin");
  save_history(out_dir / "loss_history.json", trained.history);
  s.clean_accuracy = nn::evaluate_accuracy(trained.model, p.test);
  s.asr = nn::evaluate_asr(trained.model, attacks::triggered_test_set(p.test, cfg.attack), cfg.attack.target_label);
  s.seconds["train"] = seconds_since(t0);
  spdlog::info("trained: clean accuracy {:.4f}, ASR {:.4f}", s.clean_accuracy, s.asr);

  std::map<std::string, ScoreTable> tables;
  std::vector<detect::DetectionReport> reports;
  auto score = [&](const std::string& m) -> const ScoreTable& {
    if (auto it = tables.find(m); it != tables.end()) return it->second;
    const auto t1 = std::chrono::steady_clock::now();
    std::vector<distill::MaskResult> masks;
    ScoreTable t = method_scores(m, cfg, trained.model, p.train, &trained.history, &masks);
    save_scores(out_dir / ("scores_" + m + ".csv"), t);
    write_roc(out_dir / ("roc_" + m + ".csv"), t);
    if (m == "cd_l" && cfg.masks_to_save > 0) save_masks(out_dir / "masks", p.train, masks, cfg.masks_to_save);
    s.seconds[m] = seconds_since(t1);
    return tables.emplace(m, std::move(t)).first->second;
  };

  for (const auto& m : cfg.detectors) {
    const ScoreTable& t = score(m);
    auto rep = detect::evaluate(t, table_positions(t, p.reference_clean), cfg.gamma);
    rep.method = m;
    spdlog::info("{}: AUROC {:.4f}", m, rep.auroc);
    reports.push_back(rep);
    s.reports[m] = rep;
  }
  write_detection(out_dir, attack_label(cfg.attack), reports);

  if (cfg.mitigation.enabled) {
    t0 = std::chrono::steady_clock::now();
    nn::Model after;
    s.mitigation = mitigation_stage(cfg, trained.model, p, score(cfg.mitigation.method), &after);
    after.save(out_dir / "model_mitigated.bin");
    json mj = s.mitigation->to_json();
    mj["method"] = cfg.mitigation.method;
    write_json(out_dir / "mitigation.json", mj);
    s.seconds["mitigation"] = seconds_since(t0);
  }

  json results = {{"clean_accuracy", s.clean_accuracy}, {"asr", s.asr}, {"attack", attack_label(cfg.attack)}};
  for (const auto& [m, r] : s.reports) results["auroc"][m] = r.auroc;
  write_json(out_dir / "run.json",
             {{"cogdist_version", kVersion},
              {"versions",
               {{"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                              std::to_string(EIGEN_MINOR_VERSION)},
                {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                      std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                      std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                {"compiler", __VERSION__},
                {"cplusplus", __cplusplus}}},
              {"config", cfg.to_json()},
              {"results", results},
              {"seconds", s.seconds}});
  return s;
}

// Report ---------------------------------------------------------------------

namespace {

struct RunInfo {
  std::string name;
  std::string attack;
  double rate = 0.0;
};

RunInfo run_info(const fs::path& dir) {
  const fs::path rj = dir / "run.json";
  const fs::path mj = dir / "poison_manifest.json";
  json cfg;
  if (fs::exists(rj)) {
    cfg = read_json(rj).at("config");
  } else if (fs::exists(mj)) {
    cfg = read_json(mj).at("config");
  } else {
    throw ConfigError("runs", "missing upstream artifact: no run.json or poison_manifest.json in " + dir.string());
  }
  RunInfo r;
  r.name = dir.filename().string();
  if (r.name.empty()) r.name = dir.parent_path().filename().string();
  r.attack = cfg.at("attack").at("family").get<std::string>();
  r.rate = cfg.at("attack").at("poisoning_rate").get<double>();
  return r;
}

std::string fmt_double(double v) {
  std::ostringstream o;
  o.precision(6);
  o << v;
  return o.str();
}

}  // namespace

std::string table1_csv(const std::vector<fs::path>& run_dirs) {
  std::ostringstream out;
  out << "run,attack,poisoning_rate";
  for (const auto& m : kMethods) out << "," << m;
  out << "\n";
  for (const auto& dir : run_dirs) {
    const RunInfo info = run_info(dir);
    std::map<std::string, double> auroc;
    const fs::path det = dir / "detection.json";
    if (fs::exists(det)) {
      for (const auto& r : read_json(det)) auroc[r.at("method").get<std::string>()] = r.at("auroc").get<double>();
    }
    // score files without a detection entry still yield an AUROC
    for (const auto& m : kMethods) {
      const fs::path f = dir / ("scores_" + m + ".csv");
      if (!auroc.count(m) && fs::exists(f)) auroc[m] = detect::auroc(load_scores(f));
    }
    if (auroc.empty()) throw ConfigError("runs", "missing upstream artifact: no scores in " + dir.string());
    out << info.name << "," << info.attack << "," << fmt_double(info.rate);
    for (const auto& m : kMethods) {
      out << ",";
      if (auto it = auroc.find(m); it != auroc.end()) out << fmt_double(it->second);
    }
    out << "\n";
  }
  return out.str();
}

std::string histogram_csv(const std::vector<fs::path>& run_dirs, std::size_t bins) {
  if (bins < 1) throw InvalidArgument("histogram_csv: bins must be >= 1");
  std::ostringstream out;
  out << "run,attack,method,bin,lo,hi,clean,backdoor\n";
  for (const auto& dir : run_dirs) {
    const RunInfo info = run_info(dir);
    for (const auto& m : kMethods) {
      const fs::path f = dir / ("scores_" + m + ".csv");
      if (!fs::exists(f)) continue;
      const ScoreTable t = load_scores(f);
      if (t.rows.empty()) continue;
      double lo = t.rows[0].score, hi = lo;
      for (const auto& r : t.rows) {
        lo = std::min(lo, r.score);
        hi = std::max(hi, r.score);
      }
      const double width = hi > lo ? (hi - lo) / static_cast<double>(bins) : 1.0;
      std::vector<std::size_t> clean(bins, 0), bd(bins, 0);
      for (const auto& r : t.rows) {
        auto b = static_cast<std::size_t>((r.score - lo) / width);
        b = std::min(b, bins - 1);
        (r.is_backdoor ? bd : clean)[b]++;
      }
      for (std::size_t b = 0; b < bins; ++b) {
        out << info.name << "," << info.attack << "," << m << "," << b << "," << fmt_double(lo + width * b) << ","
            << fmt_double(lo + width * (b + 1)) << "," << clean[b] << "," << bd[b] << "\n";
      }
    }
  }
  return out.str();
}

// Bias -----------------------------------------------------------------------

BiasConfig BiasConfig::from_json(const json& j) {
  reject_unknown(j, {"n", "num_attributes", "height", "width", "links", "faint", "names", "train", "cd", "fraction",
                     "threshold", "threads", "seed"},
                 "");
  BiasConfig c;
  c.n = field(j, "n", c.n, "");
  c.num_attributes = field(j, "num_attributes", c.num_attributes, "");
  c.height = field(j, "height", c.height, "");
  c.width = field(j, "width", c.width, "");
  if (j.contains("links")) {
    c.links.clear();
    for (const auto& l : j.at("links")) {
      reject_unknown(l, {"leader", "follower", "strength"}, "links.");
      AttributeLink link;
      link.leader = field(l, "leader", link.leader, "links.");
      link.follower = field(l, "follower", link.follower, "links.");
      link.strength = field(l, "strength", link.strength, "links.");
      c.links.push_back(link);
    }
  }
  c.faint = field(j, "faint", c.faint, "");
  c.names = field(j, "names", c.names, "");
  c.seed = field(j, "seed", c.seed, "");
  c.train.seed = derive_seed(c.seed, 2);
  if (j.contains("train")) {
    c.train = parse_section("train", [&] { return nn::TrainConfig::from_json(j.at("train")); });
    if (!j.at("train").contains("seed")) c.train.seed = derive_seed(c.seed, 2);
  }
  if (j.contains("cd")) c.cd = parse_section("cd", [&] { return distill::CDConfig::from_json(j.at("cd")); });
  c.fraction = field(j, "fraction", c.fraction, "");
  c.threshold = field(j, "threshold", c.threshold, "");
  c.threads = field(j, "threads", c.threads, "");
  if (c.num_attributes < 2) throw ConfigError("num_attributes", "must be >= 2");
  if (!c.names.empty() && c.names.size() != c.num_attributes) throw ConfigError("names", "need one name per attribute");
  if (!(c.fraction > 0.0 && c.fraction <= 1.0)) throw ConfigError("fraction", "must be in (0,1]");
  if (c.cd.layer != distill::OutputLayer::logits) throw ConfigError("cd.layer", "bias scoring distills the logits");
  for (const auto& l : c.links) {
    if (l.leader >= c.num_attributes || l.follower >= c.num_attributes || l.leader == l.follower) {
      throw ConfigError("links", "leader/follower must be distinct attribute indices");
    }
    if (!(l.strength >= 0.0 && l.strength <= 1.0)) throw ConfigError("links.strength", "must be in [0,1]");
  }
  for (std::size_t f : c.faint) {
    if (f >= c.num_attributes) throw ConfigError("faint", "attribute index out of range");
  }
  return c;
}

json BiasConfig::to_json() const {
  json links_j = json::array();
  for (const auto& l : links) links_j.push_back({{"leader", l.leader}, {"follower", l.follower}, {"strength", l.strength}});
  return {{"n", n},           {"num_attributes", num_attributes}, {"height", height}, {"width", width},
          {"links", links_j}, {"faint", faint},                   {"names", names},   {"train", train.to_json()},
          {"cd", cd.to_json()}, {"fraction", fraction},           {"threshold", threshold},
          {"threads", threads}, {"seed", seed}};
}

BiasResult run_bias(const BiasConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  auto ds = make_synthetic_attributes(cfg.n, cfg.num_attributes, cfg.height, cfg.width, cfg.links, cfg.faint,
                                      derive_seed(cfg.seed, 1));
  if (!cfg.names.empty()) ds.attributes.names = cfg.names;
  auto model = nn::Model(nn::reference_cnn(ds.images.image_shape(), static_cast<int>(cfg.num_attributes)),
                         derive_seed(cfg.seed, 3));
  auto trained = nn::train_multilabel(std::move(model), ds.images, ds.attributes, cfg.train);
  trained.model.save(out_dir / "bias_model.bin");

  BiasResult r;
  std::ostringstream csv;
  csv << "attribute_i,attribute_j,score,skipped\n";
  for (std::size_t i = 0; i < cfg.num_attributes; ++i) {
    distill::CDConfig cd = cfg.cd;
    cd.output_first = i;
    cd.output_count = 1;
    const ScoreTable t = cd_scores(trained.model, ds.images, cd, derive_seed(cfg.seed, 100 + i), cfg.threads,
                                   "cd_l_" + ds.attributes.names[i]);
    const auto subset = bias::select_low_norm_subset(t, cfg.fraction);
    auto shift = bias::attribute_shift(ds.attributes, subset, i);
    for (std::size_t j = 0; j < shift.score.size(); ++j) {
      csv << ds.attributes.names[i] << "," << ds.attributes.names[j] << "," << fmt_double(shift.score[j]) << ","
          << (shift.skipped[j] ? 1 : 0) << "\n";
    }
    r.shifts.push_back(std::move(shift));
  }
  r.graph = bias::top_predictive_attributes(r.shifts, ds.attributes.names, cfg.threshold);
  write_text(out_dir / "bias_shifts.csv", csv.str());
  write_json(out_dir / "bias_graph.json", r.graph.to_json());
  write_text(out_dir / "bias_graph.dot", r.graph.to_dot());
  write_json(out_dir / "bias_run.json", {{"cogdist_version", kVersion}, {"config", cfg.to_json()}});
  return r;
}

}  // namespace cogdist::experiment
