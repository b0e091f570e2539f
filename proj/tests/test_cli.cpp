#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "msce/rng.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

class Sandbox {
 public:
  Sandbox() : dir_(fs::temp_directory_path() / ("msce_cli_" + std::to_string(::getpid()) + "_" + std::to_string(n_++))) {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  ~Sandbox() { fs::remove_all(dir_); }
  const fs::path& dir() const { return dir_; }
  fs::path operator/(const std::string& name) const { return dir_ / name; }

  Result run(const std::string& args) const {
    const std::string exe = MSCE_CLI_PATH;
    const std::string cmd = "cd '" + dir_.string() + "' && '" + exe + "' " + args + " >stdout.txt 2>stderr.txt";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(dir_ / "stdout.txt");
    r.err = slurp(dir_ / "stderr.txt");
    return r;
  }

  void write(const std::string& name, const std::string& text) const { std::ofstream(dir_ / name) << text; }

 private:
  static inline int n_ = 0;
  fs::path dir_;
};

const char* kSmallConfig = R"({"seed": 7, "synth": {"n_events": 300},
 "margins": {"n_boot": 3, "merge_sparse_bins": true, "folds": 3},
 "mcmc": {"n1": 5, "n2": 60, "n_random_search": 50},
 "diagnose": {"n_sims": 40, "n_boot": 200}, "simulate": {"n_sims": 50}})";

std::vector<fs::path> files_under(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("help lists every subcommand with defaults") {
  Sandbox box;
  const Result top = box.run("--help");
  CHECK(top.code == 0);
  for (const char* sub : {"register", "fit-margins", "transform", "invert", "return-levels", "fit-msce", "simulate",
                          "diagnose", "synth", "pipeline"})
    CHECK(top.out.find(sub) != std::string::npos);

  const Result fit = box.run("fit-msce --help");
  CHECK(fit.code == 0);
  for (const char* flag : {"--n1 INT [250]", "--n2 INT [19750]", "--n-random-search INT [2000]",
                           "--epsilon FLOAT [0.05]", "--thin INT [10]", "--burn-in FLOAT [0.25]", "--n-nod INT [5]",
                           "--u-quantile FLOAT [0.75]", "--rho-unit-km FLOAT [100]"})
    CHECK_MESSAGE(fit.out.find(flag) != std::string::npos, flag);
  const Result diag = box.run("diagnose --help");
  CHECK(diag.out.find("--n-boot INT [500]") != std::string::npos);
  CHECK(diag.out.find("--n-bins INT [25]") != std::string::npos);
  const Result reg = box.run("register --help");
  CHECK(reg.out.find("--max-dist-km FLOAT [50]") != std::string::npos);
  const Result fm = box.run("fit-margins --help");
  CHECK(fm.out.find("--tau FLOAT [0.7]") != std::string::npos);
  for (const char* sub : {"transform", "invert", "return-levels", "simulate", "pipeline", "synth conditioned",
                          "synth physical", "synth tracks"})
    CHECK(box.run(std::string(sub) + " --help").code == 0);
}

TEST_CASE("usage errors exit with the config code") {
  Sandbox box;
  const Result r = box.run("fit-msce --laplace x.csv --out y.json --no-such-flag");
  CHECK(r.code == 3);
  CHECK(r.err.rfind("error[USAGE]", 0) == 0);
  CHECK(box.run("").code == 3);
  CHECK(box.run("fit-msce --laplace x.csv --out y.json --epsilon 2").code == 3);

  box.write("bad.json", R"({"seed": 1, "mcmc": {"n1": 10, "bogus": 3}})");
  const Result cfg = box.run("--config bad.json fit-msce --laplace x.csv --out y.json");
  CHECK(cfg.code == 3);
  CHECK(cfg.err.find("bogus") != std::string::npos);
}

TEST_CASE("malformed CSV row is reported by number") {
  Sandbox box;
  REQUIRE(box.run("--seed 3 synth conditioned --n-events 40 --out c.csv").code == 0);
  CHECK(fs::exists(box / "c.csv.manifest.json"));
  std::ifstream in(box / "c.csv");
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  REQUIRE(lines.size() > 20);
  // Line 0 is the header, so data row 17 is line 17.
  std::string& row17 = lines[17];
  row17 = row17.substr(0, row17.find(',')) + ",abc" + row17.substr(row17.find(',', row17.find(',') + 1));
  std::ofstream outf(box / "bad.csv");
  for (const auto& l : lines) outf << l << "\n";
  outf.close();

  const Result r = box.run("fit-msce --laplace bad.csv --out chain.json --n1 2 --n2 5 --n-random-search 5");
  CHECK(r.code == 2);
  CHECK(r.err.find("row 17") != std::string::npos);
  CHECK(r.err.find('\n') == r.err.size() - 1);  // one line
  CHECK_FALSE(fs::exists(box / "chain.json"));
  CHECK(box.run("fit-msce --laplace missing.csv --out chain.json").code == 2);
}

TEST_CASE("pipeline runs every stage and is reproducible") {
  Sandbox box;
  box.write("c.json", kSmallConfig);
  const Result a = box.run("--config c.json pipeline --workdir run_a");
  REQUIRE_MESSAGE(a.code == 0, a.err);
  const Result b = box.run("--config c.json pipeline --workdir run_b");
  REQUIRE(b.code == 0);

  const auto manifest = nlohmann::json::parse(slurp(box / "run_a" / "manifest.json"));
  REQUIRE(manifest["stages"].size() == 7);
  std::vector<std::string> names;
  for (const auto& s : manifest["stages"]) names.push_back(s["stage"].get<std::string>());
  CHECK(names == std::vector<std::string>{"synth", "register", "fit-margins", "transform", "fit-msce", "simulate",
                                          "diagnose"});
  CHECK(manifest["seed"] == 7);

  const auto fa = files_under(box / "run_a");
  const auto fb = files_under(box / "run_b");
  CHECK(fa == fb);
  for (const auto& f : fa) {
    CHECK_MESSAGE(f.extension() != ".tmp", f.string());
    CHECK_MESSAGE(slurp(box / "run_a" / f) == slurp(box / "run_b" / f), f.string());
  }

  box.write("c8.json", std::string(kSmallConfig).replace(std::string(kSmallConfig).find("7"), 1, "8"));
  REQUIRE(box.run("--config c8.json pipeline --workdir run_c").code == 0);
  CHECK(slurp(box / "run_a" / "chain.json") != slurp(box / "run_c" / "chain.json"));
}

TEST_CASE("flags override the config file") {
  Sandbox box;
  box.write("c.json", R"({"seed": 5, "synth": {"n_events": 25}})");
  REQUIRE(box.run("--config c.json synth conditioned --n-events 12 --out c.csv").code == 0);
  const std::string text = slurp(box / "c.csv");
  CHECK(std::count(text.begin(), text.end(), '\n') == 13);
  const auto m = nlohmann::json::parse(slurp(box / "c.csv.manifest.json"));
  CHECK(m["seed"].get<std::uint64_t>() == msce::derive_seed(5, "synth-conditioned"));
}
