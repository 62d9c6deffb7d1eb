#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "helpers.hpp"
#include "leakprobe/attacks.hpp"
#include "leakprobe/cli.hpp"
#include "leakprobe/evaluation.hpp"

using namespace leakprobe;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

void write_file(const std::string& path, const std::string& text) {
  std::ofstream(path, std::ios::binary) << text;
}

std::vector<std::string> csv_fields(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  std::string x;
  while (std::getline(ss, x, ',')) f.push_back(x);
  if (!line.empty() && line.back() == ',') f.emplace_back();
  return f;
}

}  // namespace

TEST_CASE("usage errors exit 2, help and version exit 0") {
  CHECK(invoke({}).code == cli::kExitUsage);
  CHECK(invoke({"nonsense"}).code == cli::kExitUsage);
  CHECK(invoke({"synth", "--out", "x.txt"}).code == cli::kExitUsage);  // no --seed
  CHECK(invoke({"--help"}).code == cli::kExitOk);
  Result v = invoke({"--version"});
  CHECK(v.code == cli::kExitOk);
  CHECK(v.out.find(cli::version()) != std::string::npos);
}

TEST_CASE("attack on a target-only trace file gives 8 populated columns") {
  TempDir dir("leakprobe_cli_attack");
  TraceSet set;
  set.records.push_back(testutil::record("a", Label::member, {-0.5, -1.0}, {}));
  set.records.push_back(testutil::record("b", Label::nonmember, {-1.5, -1.0}, {}));
  write_file(dir / "t.jsonl", write_trace_file(set));
  Result r = invoke({"attack", "--traces", dir / "t.jsonl"});
  REQUIRE(r.code == 0);
  ScoreTable t = score_table_from_csv(r.out);
  for (std::size_t i = 0; i < t.rows.size(); ++i) CHECK(t.populated_columns(i) == 8);
}

TEST_CASE("eval on a hand-written trace file matches the pairwise oracle") {
  TempDir dir("leakprobe_cli_eval");
  // LOSS scores: members -0.5, -1.0; nonmembers -1.0, -2.0.
  // Pairs: (-0.5 > both) 2, (-1.0 = -1.0) 0.5, (-1.0 > -2.0) 1 => 3.5 / 4.
  std::string text =
      "{\"format\":\"leakprobe-trace/1\",\"meta\":{}}\n"
      "{\"sample_id\":\"m0\",\"label\":\"member\",\"zlib_len\":10,\"n_tokens\":2,\"traces\":{\"target\":"
      "{\"loss\":0.5,\"tokens\":[{\"lp\":-0.5,\"mu\":-3,\"sigma\":1}]}}}\n"
      "{\"sample_id\":\"m1\",\"label\":\"member\",\"zlib_len\":10,\"n_tokens\":2,\"traces\":{\"target\":"
      "{\"loss\":1.0,\"tokens\":[{\"lp\":-1.0,\"mu\":-3,\"sigma\":1}]}}}\n"
      "{\"sample_id\":\"n0\",\"label\":\"nonmember\",\"zlib_len\":10,\"n_tokens\":2,\"traces\":{\"target\":"
      "{\"loss\":1.0,\"tokens\":[{\"lp\":-1.0,\"mu\":-3,\"sigma\":1}]}}}\n"
      "{\"sample_id\":\"n1\",\"label\":\"nonmember\",\"zlib_len\":10,\"n_tokens\":2,\"traces\":{\"target\":"
      "{\"loss\":2.0,\"tokens\":[{\"lp\":-2.0,\"mu\":-3,\"sigma\":1}]}}}\n";
  write_file(dir / "t.jsonl", text);
  Result r = invoke({"eval", "--traces", dir / "t.jsonl", "--format", "json"});
  REQUIRE(r.code == 0);
  auto j = nlohmann::json::parse(r.out);
  CHECK(j["attacks"][0]["attack"] == "loss");
  CHECK(j["attacks"][0]["auc"].get<double>() == 0.875);
  CHECK(j["utility"]["ppl_ft"].get<double>() == 0.75);
  CHECK(j["utility"]["ppl_val"].get<double>() == 1.5);
  CHECK(j["utility"]["gap"].get<double>() == 0.75);

  CHECK(invoke({"eval", "--traces", dir / "t.jsonl", "--bootstrap", "10"}).code == cli::kExitUsage);
  CHECK(invoke({"eval", "--traces", dir / "t.jsonl", "--bootstrap", "10", "--seed", "1"}).code == 0);
}

TEST_CASE("invalid trace files exit 1 naming the sample") {
  TempDir dir("leakprobe_cli_invalid");
  TraceSet set;
  set.records.push_back(testutil::record("bad_one", Label::member, {-0.5, -1.0}, {}));
  std::string text = write_trace_file(set);
  text.replace(text.find("\"loss\":0.75"), 11, "\"loss\":0.95");
  write_file(dir / "t.jsonl", text);
  Result r = invoke({"attack", "--traces", dir / "t.jsonl"});
  CHECK(r.code == cli::kExitFailure);
  CHECK(r.err.find("bad_one") != std::string::npos);
  CHECK(r.err.find("loss/token mismatch") != std::string::npos);
  CHECK(invoke({"attack", "--traces", dir / "missing.jsonl"}).code == cli::kExitFailure);
}

TEST_CASE("outputs get manifests and replay reproduces them") {
  TempDir dir("leakprobe_cli_manifest");
  Result r = invoke({"--out-dir", dir.path.string(), "synth", "--seed", "5", "--count", "30", "--out", "a.txt",
                  "b.txt", "--split", "10", "20"});
  REQUIRE(r.code == 0);
  std::string a = slurp(dir / "a.txt");
  CHECK(std::count(a.begin(), a.end(), '\n') == 10);
  auto m = nlohmann::json::parse(slurp(dir / "a.txt.manifest.json"));
  CHECK(m["subcommand"] == "synth");
  CHECK(m["seeds"]["seed"] == 5);
  CHECK(m["outputs"].size() == 2);
  CHECK(m["version"] == cli::version());

  fs::remove(dir / "a.txt");
  REQUIRE(invoke({"replay", dir / "a.txt.manifest.json"}).code == 0);
  CHECK(slurp(dir / "a.txt") == a);

  CHECK(invoke({"synth", "--seed", "5", "--count", "30", "--out", dir / "c.txt", "--split", "10"}).code ==
        cli::kExitUsage);
}

TEST_CASE("output directory from the environment") {
  TempDir dir("leakprobe_cli_env");
  setenv(cli::kOutDirEnv, dir.path.string().c_str(), 1);
  Result r = invoke({"synth", "--seed", "1", "--count", "3", "--out", "sub/x.txt"});
  unsetenv(cli::kOutDirEnv);
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir.path / "sub" / "x.txt"));
  CHECK(fs::exists(dir.path / "sub" / "x.txt.manifest.json"));
}

TEST_CASE("sweep epochs gives one row per epoch with falling PPL@ft") {
  Result r = invoke({"sweep", "epochs", "--seed", "20240", "--max", "10"});
  REQUIRE(r.code == 0);
  std::stringstream ss(r.out);
  std::string line;
  std::getline(ss, line);
  auto header = csv_fields(line);
  REQUIRE(header[4] == "ppl_ft");
  std::vector<double> ppl;
  while (std::getline(ss, line)) ppl.push_back(std::stod(csv_fields(line)[4]));
  REQUIRE(ppl.size() == 10);
  for (std::size_t i = 1; i < ppl.size(); ++i) CHECK(ppl[i] < ppl[i - 1]);
}

TEST_CASE("piped composition equals the sweep") {
  TempDir dir("leakprobe_cli_pipe");
  const std::string d = dir.path.string();
  auto seeds = nlohmann::json::parse(invoke({"seeds", "--seed", "77"}).out);
  auto s = [&](const char* k) { return std::to_string(seeds[k].get<std::uint64_t>()); };
  REQUIRE(invoke({"--out-dir", d, "synth", "--seed", s("general_corpus"), "--source", "general", "--count", "2000",
               "--out", "g.txt"}).code == 0);
  REQUIRE(invoke({"--out-dir", d, "synth", "--seed", s("domain_corpus"), "--count", "768", "--out", "m.txt", "n.txt",
               "h.txt", "--split", "256", "256", "256"}).code == 0);
  REQUIRE(invoke({"--out-dir", d, "pretrain", "--seed", s("pretrain"), "--lr", "0.01", "--corpus", dir / "g.txt",
               "--out", "b.json"}).code == 0);
  REQUIRE(invoke({"--out-dir", d, "finetune", "--seed", s("finetune"), "--model", dir / "b.json", "--corpus",
               dir / "m.txt", "--dropout", "0.3", "--out", "f.json"}).code == 0);
  REQUIRE(invoke({"--out-dir", d, "extract", "--seed", s("extract"), "--model", dir / "b.json", "--target",
               dir / "f.json", "--members", dir / "m.txt", "--nonmembers", dir / "n.txt", "--out", "t.jsonl"})
              .code == 0);
  Result piped = invoke({"eval", "--traces", dir / "t.jsonl", "--format", "json"});
  REQUIRE(piped.code == 0);
  REQUIRE(invoke({"--out-dir", d, "sweep", "dropout", "--seed", "77", "--values", "0.3", "--save-reports", "reps"})
              .code == 0);
  auto a = nlohmann::json::parse(piped.out);
  auto b = nlohmann::json::parse(slurp(dir / "reps/report_dropout_0.3_ep3.json"));
  CHECK(a == b);
}
