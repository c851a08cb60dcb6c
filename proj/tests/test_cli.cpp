#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "bae/cli.hpp"
#include "test_util.hpp"

using namespace bae;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

json last_line(const std::string& s) {
  std::istringstream in(s);
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  return json::parse(last);
}

}  // namespace

TEST_CASE("cli pipeline") {
  test::TempDir dir("cli");
  {
    std::ofstream cfg(dir.file("cfg.txt"));
    cfg << "# tiny\nsteps = 40\nbatch_size = 1\nsequence_length = 64\nd = 16\nh = 16\nk = 8\n"
           "target_active_fraction = 0.25\nalpha_warmup_steps = 8\n";
  }
  const std::string data = "synthetic:mixed?d=16&noise=0.01";

  auto gen = run({"gen-data", "--data", data, "--rows", "100", "--out", dir.file("act.bin")});
  REQUIRE(gen.code == kExitOk);
  CHECK(std::filesystem::exists(dir.file("act.bin")));

  auto tr = run({"train", "--config", dir.file("cfg.txt"), "--data", data, "--out", dir.file("m.bae"), "--quiet",
                 "--seed", "3"});
  REQUIRE(tr.code == kExitOk);
  CHECK(std::filesystem::exists(dir.file("m.bae")));
  const std::string report = slurp(dir.file("m.bae.report.jsonl"));
  CHECK(std::count(report.begin(), report.end(), '\n') == 41);
  CHECK(last_line(report).at("final") == true);

  auto tr2 = run({"train", "--config", dir.file("cfg.txt"), "--data", data, "--out", dir.file("m2.bae"), "--quiet",
                  "--seed", "3"});
  REQUIRE(tr2.code == kExitOk);
  CHECK(slurp(dir.file("m.bae")) == slurp(dir.file("m2.bae")));
  CHECK(slurp(dir.file("m2.bae.report.jsonl")) == report);

  auto tr3 = run({"train", "--config", dir.file("cfg.txt"), "--data", "shards:" + dir.file("act.bin"), "--out",
                  dir.file("m3.bae"), "--prior", "quadratic", "--steps", "5", "--quiet"});
  CHECK(tr3.code == kExitOk);

  auto ev = run({"eval", "--model", dir.file("m.bae"), "--data", data, "--rows", "128", "--baseline", "--config",
                 dir.file("cfg.txt"), "--topk", "4", "--steps", "20", "--quiet"});
  REQUIRE(ev.code == kExitOk);
  const json e = last_line(ev.out);
  CHECK(e.at("nmse").get<double>() >= 0.0);
  CHECK(e.at("table").size() == 2);

  auto an = run({"analyze", "--model", dir.file("m.bae"), "--data", data, "--rows", "64"});
  REQUIRE(an.code == kExitOk);
  CHECK(an.out.find("\"medians\"") != std::string::npos);

  auto sim = run({"similarity", "--a", dir.file("m.bae"), "--b", dir.file("m2.bae")});
  REQUIRE(sim.code == kExitOk);
  const json s = last_line(sim.out);
  CHECK(s.at("sim_frobenius").get<double>() == doctest::Approx(1.0));

  auto vt = run({"verify-theory", "--tau", "0.5", "--d", "16,32", "--mc", "1000"});
  REQUIRE(vt.code == kExitOk);
  CHECK(vt.out.find("\"rows\"") != std::string::npos);

  auto ex = run({"export-viewer", "--model", dir.file("m.bae"), "--data", data, "--out", dir.file("bundle"),
                 "--capacity", "10", "--rows", "64"});
  REQUIRE(ex.code == kExitOk);
  CHECK(std::filesystem::exists(dir.file("bundle/index.json")));
  CHECK(std::filesystem::exists(dir.file("bundle/latents/0007.json")));
  auto ex2 = run({"export-viewer", "--model", dir.file("m.bae"), "--data", data, "--out", dir.file("bundle2"),
                  "--capacity", "10", "--rows", "64"});
  REQUIRE(ex2.code == kExitOk);
  CHECK(slurp(dir.file("bundle/latents/0003.json")) == slurp(dir.file("bundle2/latents/0003.json")));

  SUBCASE("runtime failures exit 2") {
    auto bad = run({"train", "--config", dir.file("cfg.txt"), "--data", "shards:" + dir.file("act.bin"), "--out",
                    dir.file("x.bae"), "--d", "32", "--quiet"});
    CHECK(bad.code == kExitRuntime);
    CHECK_FALSE(bad.err.empty());
    std::ofstream(dir.file("junk.bae")) << "not a checkpoint";
    CHECK(run({"analyze", "--model", dir.file("junk.bae")}).code == kExitRuntime);
  }
}

TEST_CASE("cli usage errors exit 1") {
  auto none = run({});
  CHECK(none.code == kExitUsage);
  auto unknown = run({"verify-theory", "--bogus", "1"});
  CHECK(unknown.code == kExitUsage);
  CHECK(unknown.err.find("--bogus") != std::string::npos);
  CHECK(run({"frobnicate"}).code == kExitUsage);
  CHECK(run({"similarity", "--a", "/nonexistent/a.bae", "--b", "/nonexistent/b.bae"}).code == kExitUsage);
  CHECK(run({"verify-theory", "--tau", "2"}).code == kExitUsage);

  test::TempDir dir("cli_cfg");
  std::ofstream(dir.file("bad.txt")) << "stepz = 3\n";
  auto cfg = run({"train", "--config", dir.file("bad.txt"), "--data", "synthetic:circle", "--out", dir.file("m.bae")});
  CHECK(cfg.code == kExitUsage);
  CHECK(cfg.err.find("stepz") != std::string::npos);

  auto help = run({"--help"});
  CHECK(help.code == kExitOk);
  CHECK(help.out.find("export-viewer") != std::string::npos);
}

TEST_CASE("cli selfcheck") {
  auto sc = run({"selfcheck", "--seed", "2"});
  CHECK(sc.code == kExitOk);
  std::istringstream in(sc.out);
  std::string line;
  int checks = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    if (!j.contains("pass")) continue;
    CHECK(j.at("pass") == true);
    ++checks;
  }
  CHECK(checks == 4);
}
