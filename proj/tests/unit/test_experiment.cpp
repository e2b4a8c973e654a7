#include <doctest.h>

#include <fstream>
#include <sstream>

#include "cogdist/experiment.hpp"
#include "helpers.hpp"

#ifndef COGDIST_TEST_DATA
#define COGDIST_TEST_DATA "tests/data"
#endif

using namespace cogdist;
using namespace cogdist::experiment;
using nlohmann::json;

namespace {
json tiny() {
  std::ifstream f(std::string(COGDIST_TEST_DATA) + "/tiny.json");
  return json::parse(f);
}
std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}
std::string field_of(const json& j) {
  try {
    ExperimentConfig::from_json(j);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "";
}
}  // namespace

TEST_CASE("config errors name the field") {
  auto j = tiny();
  j["attack"]["family"] = "trojan";
  CHECK(field_of(j) == "attack.family");
  j = tiny();
  j["attack"].erase("family");
  CHECK(field_of(j) == "attack.family");
  j = tiny();
  j["bogus"] = 1;
  CHECK(field_of(j) == "bogus");
  j = tiny();
  j["detectors"] = {"cd_l", "neural_cleanse"};
  CHECK(field_of(j).rfind("detectors", 0) == 0);
  j = tiny();
  j["gamma"] = "one";
  CHECK(field_of(j) == "gamma");
  j = tiny();
  j["seed"] = -1;
  CHECK(field_of(j) == "seed");
  CHECK(field_of(tiny()).empty());
}

TEST_CASE("config round trip keeps every seed") {
  auto cfg = ExperimentConfig::from_json(tiny());
  CHECK(cfg.seeds.attack == derive_seed(3, 3));
  CHECK(cfg.attack.seed == cfg.seeds.attack);
  auto back = ExperimentConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  // seeds above 2^63 survive the JSON trip
  auto j = tiny();
  j["seed"] = 18446744073709551557ULL;
  auto big = ExperimentConfig::from_json(j);
  CHECK(ExperimentConfig::from_json(big.to_json()).seeds.mitigation == big.seeds.mitigation);
  auto k = tiny();
  k["seeds"] = {{"attack", 99}};
  CHECK(ExperimentConfig::from_json(k).attack.seed == 99);
}

TEST_CASE("manifest reproduces the poisoned set") {
  auto dir = testutil::temp_dir("manifest");
  auto cfg = ExperimentConfig::from_json(tiny());
  auto p = poison_stage(cfg);
  CHECK(p.poisoned.size() == 6);
  CHECK(p.reference_clean.size() >= 2);
  for (auto i : p.reference_clean) CHECK(!p.train.is_backdoor[i]);
  write_manifest(dir / "m.json", cfg, p);
  ExperimentConfig back;
  auto q = read_manifest(dir / "m.json", &back);
  CHECK(q.train.images == p.train.images);
  CHECK(q.poisoned == p.poisoned);
  CHECK(q.reference_clean == p.reference_clean);
  auto j = json::parse(slurp(dir / "m.json"));
  j["attack_hash"] = "0000";
  std::ofstream(dir / "bad.json") << j.dump();
  CHECK_THROWS(read_manifest(dir / "bad.json", nullptr));
}

TEST_CASE("end to end run is complete and deterministic") {
  auto cfg = ExperimentConfig::from_json(tiny());
  auto a = testutil::temp_dir("run_a");
  auto b = testutil::temp_dir("run_b");
  auto sa = run_experiment(cfg, a);
  run_experiment(cfg, b);
  for (const char* f : {"model.bin", "poison_manifest.json", "loss_history.json", "detection.json", "detection.csv",
                        "mitigation.json", "run.json"}) {
    CHECK_MESSAGE(std::filesystem::exists(a / f), f);
  }
  for (const auto& m : kMethods) {
    CHECK(std::filesystem::exists(a / ("scores_" + m + ".csv")));
    CHECK(std::filesystem::exists(a / ("roc_" + m + ".csv")));
    CHECK(slurp(a / ("scores_" + m + ".csv")) == slurp(b / ("scores_" + m + ".csv")));
  }
  CHECK(slurp(a / "model.bin") == slurp(b / "model.bin"));
  std::size_t masks = 0;
  for (const auto& e : std::filesystem::directory_iterator(a / "masks")) masks += e.path().extension() == ".f32";
  CHECK(masks == 4);
  CHECK(sa.reports.size() == 6);
  REQUIRE(sa.mitigation.has_value());
  auto run = json::parse(slurp(a / "run.json"));
  CHECK(run.contains("config"));
  CHECK(run.contains("versions"));
  // a run.json loads as a config
  CHECK(ExperimentConfig::load(a / "run.json").to_json() == cfg.to_json());

  auto table = table1_csv({a, b});
  std::size_t lines = 0;
  for (char ch : table) lines += ch == '\n';
  CHECK(lines == 3);  // header + 2 runs
  CHECK(!histogram_csv({a}).empty());
}
