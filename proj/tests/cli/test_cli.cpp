#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {
const fs::path kWork = fs::temp_directory_path() / "cogdist_cli_test";

struct Result {
  int code;
  std::string out;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

Result cli(const std::string& args) {
  fs::create_directories(kWork);
  const fs::path log = kWork / "out.txt";
  const std::string cmd = std::string(COGDIST_BIN) + " --log-level warn " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

fs::path write_config(const std::string& name, const nlohmann::json& j) {
  fs::create_directories(kWork);
  const fs::path p = kWork / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

nlohmann::json tiny() {
  std::ifstream f(std::string(COGDIST_TEST_DATA) + "/tiny.json");
  return nlohmann::json::parse(f);
}
}  // namespace

TEST_CASE("help and usage errors") {
  CHECK(cli("--help").code == 0);
  CHECK(cli("").code == 2);
  CHECK(cli("run --config").code == 2);
  CHECK(cli("frobnicate").code == 2);
}

TEST_CASE("invalid attack family exits 2 naming the field") {
  auto j = tiny();
  j["attack"]["family"] = "trojan";
  auto r = cli("run --config " + write_config("bad.json", j).string() + " --out " + (kWork / "bad").string());
  CHECK(r.code == 2);
  CHECK(r.out.find("attack.family") != std::string::npos);
}

TEST_CASE("missing config file exits 2") {
  CHECK(cli("run --config /nonexistent/cfg.json --out " + (kWork / "x").string()).code == 2);
}

TEST_CASE("runtime failure exits 1") {
  // a dataset path that parses but cannot be read as IDX
  auto j = tiny();
  std::ofstream(kWork / "junk.idx") << "not an idx file";
  j["dataset"] = {{"kind", "idx"},
                  {"train_images", (kWork / "junk.idx").string()},
                  {"train_labels", (kWork / "junk.idx").string()},
                  {"test_images", (kWork / "junk.idx").string()},
                  {"test_labels", (kWork / "junk.idx").string()}};
  auto r = cli("run --config " + write_config("junk.json", j).string() + " --out " + (kWork / "junk").string());
  CHECK(r.code == 1);
}

TEST_CASE("staged pipeline and report") {
  const auto cfg = write_config("tiny.json", tiny());
  const fs::path a = kWork / "stage_a", b = kWork / "stage_b";
  fs::remove_all(a);
  fs::remove_all(b);
  REQUIRE(cli("poison --config " + cfg.string() + " --out " + a.string()).code == 0);
  CHECK(fs::exists(a / "poison_manifest.json"));
  // detect before distill: missing upstream artifact
  REQUIRE(cli("train --run " + a.string()).code == 0);
  CHECK(cli("detect --run " + a.string() + " --methods cd_l").code == 2);
  REQUIRE(cli("distill --run " + a.string() + " --layer logits --steps 5").code == 0);
  CHECK(cli("detect --run " + a.string() + " --methods cd_l,strip,ss").code == 0);
  CHECK(fs::exists(a / "detection.json"));
  auto m = cli("mitigate --run " + a.string() + " --p-b 0.05 --p-c 0.5 --epochs 1");
  CHECK(m.code == 0);
  CHECK(m.out.find("asr_after") != std::string::npos);

  REQUIRE(cli("run --config " + cfg.string() + " --out " + b.string()).code == 0);
  const fs::path rep = kWork / "report";
  REQUIRE(cli("report --runs " + a.string() + " " + b.string() + " --out " + rep.string()).code == 0);
  const auto table = slurp(rep / "table1.csv");
  std::size_t lines = 0;
  for (char ch : table) lines += ch == '\n';
  CHECK(lines == 3);
  CHECK(fs::exists(rep / "histograms.csv"));
}

TEST_CASE("bias subcommand") {
  nlohmann::json j = {{"n", 200}, {"num_attributes", 3}, {"height", 12}, {"width", 12},
                      {"links", {{{"leader", 0}, {"follower", 1}, {"strength", 1.0}}}},
                      {"fraction", 0.05}, {"train", {{"epochs", 2}}}, {"cd", {{"steps", 5}}}};
  const fs::path out = kWork / "bias";
  CHECK(cli("bias --config " + write_config("bias.json", j).string() + " --out " + out.string()).code == 0);
  for (const char* f : {"bias_shifts.csv", "bias_graph.json", "bias_graph.dot"}) CHECK(fs::exists(out / f));
}
