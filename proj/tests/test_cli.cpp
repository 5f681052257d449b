#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <sys/wait.h>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

#ifdef SSSM_CLI_PATH

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("sssm_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = std::string("\"") + SSSM_CLI_PATH + "\" " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("gen-filters writes the cache layout") {
    const auto out = scratch("gen");
    REQUIRE(run("--out " + out.string() + " gen-filters --L 64 --K 6") == 0);
    CHECK(fs::exists(out / "filters" / "primary_L64_K6" / "meta.json"));
    CHECK(fs::exists(out / "filters" / "primary_L64_K6" / "filters.f64le"));
    CHECK(fs::exists(out / "sigma.csv"));
    const auto run_json = read_json(out / "run.json");
    CHECK(run_json["command"] == "gen-filters");
    CHECK(run_json["exit_code"] == 0);
    fs::remove_all(out);
  }

  TEST_CASE("verify-theorem passes the default battery") {
    const auto out = scratch("theorem");
    REQUIRE(run("--out " + out.string() + " verify-theorem") == 0);
    const auto report = read_json(out / "theorem_report.json");
    CHECK(report["summary"]["trials"] == 150);
    CHECK(report["summary"]["satisfied"] == 150);
    fs::remove_all(out);
  }

  TEST_CASE("sweep-k with least squares") {
    const auto out = scratch("sweep");
    REQUIRE(run("--out " + out.string() + " sweep-k --K 1..30 --fixture " + SSSM_SOURCE_DIR +
                "/fixtures/sec31_system.json") == 0);
    const std::string csv = slurp(out / "k_sweep.csv");
    CHECK(csv.rfind("K,", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 31);
    fs::remove_all(out);
  }

  TEST_CASE("usage errors exit 64") {
    const auto out = scratch("usage");
    CHECK(run("--out " + out.string() + " --config " + (out / "missing.json").string() + " verify-ar") == 64);
    CHECK(run("--out " + out.string() + " no-such-command") == 64);
    CHECK(run("--out " + out.string() + " gen-filters --L 8 --K 9") == 64);
    CHECK(run("--help") == 0);
    fs::remove_all(out);
  }

  TEST_CASE("config file values and CLI precedence") {
    const auto out = scratch("config");
    {
      std::ofstream cfg(out / "cfg.json");
      cfg << R"({"seed": 5, "verify-ar": {"systems": 3, "length": 50}})";
    }
    REQUIRE(run("--out " + (out / "a").string() + " --config " + (out / "cfg.json").string() +
                " verify-ar --length 40") == 0);
    const auto rj = read_json(out / "a" / "run.json");
    CHECK(rj["seed"] == 5);
    CHECK(rj["config"]["systems"] == "3");
    CHECK(rj["config"]["length"] == "40");
    fs::remove_all(out);
  }

  TEST_CASE("repeated runs give identical artifacts") {
    const auto out = scratch("repeat");
    const std::string args = " fit-stu --steps 30 --sequences 4 --length 64 --K 6";
    REQUIRE(run("--out " + (out / "a").string() + " --seed 3" + args) == 0);
    REQUIRE(run("--out " + (out / "b").string() + " --seed 3 --threads 4" + args) == 0);
    for (const char* f : {"report.json", "loss.csv"}) CHECK(slurp(out / "a" / f) == slurp(out / "b" / f));
    for (const auto& e : fs::directory_iterator(out / "a" / "params"))
      CHECK(slurp(e.path()) == slurp(out / "b" / "params" / e.path().filename()));
    fs::remove_all(out);
  }

  TEST_CASE("failed checks exit 2") {
    const auto out = scratch("fail");
    CHECK(run("--out " + out.string() +
              " fit-lru --no-stable-exp --no-gamma-norm --no-ring-init --lr 0.5 --steps 400 --sequences 4") == 2);
    const auto rj = read_json(out / "run.json");
    CHECK(rj["exit_code"] == 2);
    CHECK(rj["checks_passed"] == false);
    fs::remove_all(out);
  }
}

#endif
