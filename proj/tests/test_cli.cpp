#include "test_util.hpp"
#include "tensornet/cli.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sys/wait.h>

using namespace tensornet;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out, err;
};

CliRun invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "tensornet");
  std::vector<const char *> argv;
  for (const auto &a : args)
    argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> lines_of(const std::string &text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string l; std::getline(is, l);)
    out.push_back(l);
  return out;
}

std::string slurp(const fs::path &p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Three-atom Morse clusters with analytic forces.
std::vector<AtomicSystem> morse_frames(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.1);
  std::vector<AtomicSystem> out;
  for (std::size_t k = 0; k < n; ++k) {
    AtomicSystem s;
    s.atomic_numbers = {1, 6, 1};
    s.positions = {{0, 0, 0}, {1.5, 0, 0}, {1.5, 1.5, 0}};
    for (auto &p : s.positions)
      for (double &x : p)
        x += nd(rng);
    double e = 0;
    std::vector<Vec3<double>> f(3, Vec3<double>{0, 0, 0});
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = i + 1; j < 3; ++j) {
        Vec3<double> d;
        for (int c = 0; c < 3; ++c)
          d[c] = s.positions[j][c] - s.positions[i][c];
        const double r = std::hypot(d[0], d[1], d[2]), x = std::exp(-(r - 1.5));
        e += (1 - x) * (1 - x) - 1;
        const double de = 2 * (1 - x) * x;
        for (int c = 0; c < 3; ++c) {
          f[i][c] += de * d[c] / r;
          f[j][c] -= de * d[c] / r;
        }
      }
    s.energy = e;
    s.forces = f;
    out.push_back(s);
  }
  return out;
}

class CliTest : public ::testing::Test {
protected:
  void SetUp() override {
    const auto *info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir = fs::temp_directory_path() /
          (std::string("tensornet_cli_") + info->name() + "_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    data = (dir / "data.xyz").string();
    write_extxyz(data, morse_frames(12, 3));
    config = (dir / "run.cfg").string();
    std::ofstream(config) << "channels = 8\nn_rbf = 6\nmax_atomic_number = 9\nheads = energy\n"
                             "batch_size = 4\nwarmup_steps = 2\nmax_epochs = 3\nn_val = 2\nseed = 4\n"
                             "lr_init = 1e-3\nstandardize_energy = true\n";
  }
  void TearDown() override { fs::remove_all(dir); }

  // Small checkpoint written directly through the library.
  std::string model_ckpt(HeadSet heads = {true, true, true, true}) {
    RunConfig rc;
    rc.model.channels = 8;
    rc.model.n_rbf = 6;
    rc.model.max_atomic_number = 9;
    rc.model.heads = heads;
    const std::string path = (dir / "model.ckpt").string();
    save_checkpoint(path, make_checkpoint(rc, init_params(rc.model, 2)));
    return path;
  }

  fs::path dir;
  std::string data, config;
};

} // namespace

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(invoke({}).code, 2);
  EXPECT_EQ(invoke({"frobnicate"}).code, 2);
  EXPECT_EQ(invoke({"predict", "--ckpt", model_ckpt(), "--data", data, "--bogus"}).code, 2);
  EXPECT_EQ(invoke({"predict", "--data", data}).code, 2);
  EXPECT_EQ(invoke({"check", "symmetry", "--random-init"}).code, 2);
  EXPECT_EQ(invoke({"check", "gradients"}).code, 2);
  EXPECT_EQ(invoke({"check", "gradients", "--random-init", "--ckpt", model_ckpt()}).code, 2);
  EXPECT_EQ(invoke({"predict", "--ckpt", model_ckpt(), "--data", data, "--heads", "e,q"}).code, 2);
  std::ofstream(config, std::ios::app) << "learning_rate = 1\n";
  const CliRun r = invoke({"train", "--config", config, "--data", data, "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("unknown key 'learning_rate'"), std::string::npos) << r.err;
}

TEST_F(CliTest, HelpExitsZero) { EXPECT_EQ(invoke({"--help"}).code, 0); }

TEST_F(CliTest, RuntimeFailuresExitOne) {
  const std::string bad = (dir / "bad.ckpt").string();
  std::ofstream(bad) << "NOTACKPT";
  CliRun r = invoke({"inspect", "--ckpt", bad});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("bad magic"), std::string::npos);
  const std::string broken = (dir / "broken.xyz").string();
  std::ofstream(broken) << "3\n\nH 0 0 0\nH 1 0 0\n";
  r = invoke({"predict", "--ckpt", model_ckpt(), "--data", broken});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("line 1"), std::string::npos) << r.err;
  r = invoke({"predict", "--ckpt", model_ckpt({false, true, false, false}), "--data", data});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("no energy head"), std::string::npos);
}

TEST_F(CliTest, CheckAppendixPasses) {
  const CliRun r = invoke({"check", "appendix", "--seed", "7"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_TRUE(std::regex_search(r.out, std::regex(R"(RESULT pass max_dev=\S+ transform=appendix head=\S+)")));
}

TEST_F(CliTest, CheckEquivarianceAndGradients) {
  CliRun r = invoke({"check", "equivariance", "--random-init", "--seed", "3", "--trials", "4", "--atoms", "8"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("RESULT pass"), std::string::npos);
  r = invoke({"check", "gradients", "--ckpt", model_ckpt(), "--atoms", "6"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("transform=finite_difference head=forces"), std::string::npos);
  r = invoke({"check", "equivariance", "--random-init", "--group", "SO3", "--trials", "2", "--atoms", "8"});
  EXPECT_EQ(r.code, 1) << r.out;
  EXPECT_NE(r.out.find("RESULT fail"), std::string::npos);
}

TEST_F(CliTest, CheckIsDeterministicGivenSeed) {
  const std::vector<std::string> args{"check", "equivariance", "--random-init", "--seed", "5", "--trials", "2",
                                      "--atoms", "6"};
  EXPECT_EQ(invoke(args).out, invoke(args).out);
}

TEST_F(CliTest, PredictFormat) {
  const std::string out = (dir / "pred.txt").string();
  CliRun r = invoke({"predict", "--ckpt", model_ckpt(), "--data", data, "--heads", "e,f", "--out", out});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto lines = lines_of(slurp(out));
  ASSERT_EQ(lines.size(), 12u * 4);
  const std::regex frame(R"(frame (\d+) energy (\S+))"), force(R"(force (\d) \S+ \S+ \S+)");
  const LoadedModel m = model_from_checkpoint(load_checkpoint(model_ckpt()));
  const auto frames = parse_extxyz(data).systems;
  const auto want = cli::predict_dataset(frames, m.params, m.config.model, cli::parse_predict_heads("e,f"));
  for (std::size_t f = 0; f < 12; ++f) {
    std::smatch mt;
    ASSERT_TRUE(std::regex_match(lines[4 * f], mt, frame)) << lines[4 * f];
    EXPECT_EQ(std::stoul(mt[1]), f);
    EXPECT_EQ(parse_double(mt[2].str(), 0), want[f].energy);
    for (std::size_t i = 0; i < 3; ++i)
      EXPECT_TRUE(std::regex_match(lines[4 * f + 1 + i], force)) << lines[4 * f + 1 + i];
  }
  r = invoke({"predict", "--ckpt", model_ckpt(), "--data", data, "--heads", "e"});
  EXPECT_EQ(lines_of(r.out).size(), 12u);
  r = invoke({"predict", "--ckpt", model_ckpt(), "--data", data, "--heads", "mu,alpha,sigma"});
  const auto all = lines_of(r.out);
  ASSERT_EQ(all.size(), 12u * 6);
  EXPECT_EQ(all[0], "frame 0");
  EXPECT_EQ(all[1].rfind("dipole ", 0), 0u);
  EXPECT_EQ(all[2].rfind("polarizability ", 0), 0u);
  EXPECT_EQ(all[3].rfind("shielding 0 ", 0), 0u);
}

TEST_F(CliTest, InspectPrintsConfigAndManifest) {
  const CliRun r = invoke({"inspect", "--ckpt", model_ckpt()});
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("version 1\n[config]\nchannels = 8\n"), std::string::npos);
  EXPECT_TRUE(std::regex_search(r.out, std::regex(R"(\[arrays\] \d+\n)")));
  EXPECT_TRUE(std::regex_search(r.out, std::regex(R"(\n\S+ f64 \[\d+,\d+\]\n)")));
  const ParamStore p = init_params(model_from_checkpoint(load_checkpoint(model_ckpt())).config.model, 0);
  std::size_t total = 0;
  for (const auto &e : p.entries())
    total += e.values.size();
  EXPECT_NE(r.out.find("total_values " + std::to_string(total)), std::string::npos);
}

TEST_F(CliTest, TrainWritesLoadableCheckpoints) {
  const std::string out = (dir / "run").string();
  const CliRun r = invoke({"train", "--config", config, "--data", data, "--out", out});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto log = lines_of(slurp(fs::path(out) / "metrics.log"));
  EXPECT_EQ(log.size(), 3u);
  EXPECT_NE(r.out.find("done epochs 3 steps 9"), std::string::npos) << r.out;
  const LoadedModel best = model_from_checkpoint(load_checkpoint((fs::path(out) / "best.ckpt").string()));
  EXPECT_EQ(best.config.model.channels, 8u);
  EXPECT_NE(best.config.model.energy_scale, 1.0);
  const TrainState last = training_state_from_checkpoint(load_checkpoint((fs::path(out) / "last.ckpt").string()));
  EXPECT_EQ(last.step, 9u);
  const CliRun p = invoke({"predict", "--ckpt", (fs::path(out) / "best.ckpt").string(), "--data", data});
  EXPECT_EQ(p.code, 0) << p.err;
}

TEST_F(CliTest, TrainIsReproducibleAndResumes) {
  const std::string a = (dir / "a").string(), b = (dir / "b").string();
  ASSERT_EQ(invoke({"train", "--config", config, "--data", data, "--out", a}).code, 0);
  ASSERT_EQ(invoke({"train", "--config", config, "--data", data, "--out", b}).code, 0);
  EXPECT_EQ(slurp(fs::path(a) / "metrics.log"), slurp(fs::path(b) / "metrics.log"));
  EXPECT_EQ(slurp(fs::path(a) / "last.ckpt"), slurp(fs::path(b) / "last.ckpt"));
  // Continue for three more epochs.
  std::string text = slurp(config);
  text = std::regex_replace(text, std::regex("max_epochs = 3"), "max_epochs = 6");
  std::ofstream(config) << text;
  const CliRun r = invoke({"train", "--config", config, "--data", data, "--out", a, "--resume",
                     (fs::path(a) / "last.ckpt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines_of(slurp(fs::path(a) / "metrics.log")).size(), 6u);
}

TEST_F(CliTest, BenchReportsTimings) {
  const CliRun r = invoke({"bench", "--ckpt", model_ckpt(), "--data", data, "--repeat", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(std::regex_search(r.out, std::regex(R"(forward_ms_per_system \S+\nforward_backward_ms_per_system \S+)")));
  EXPECT_EQ(invoke({"bench", "--ckpt", model_ckpt(), "--data", data, "--repeat", "0"}).code, 2);
}

TEST_F(CliTest, ExecutableExitCodes) {
  const std::string exe = TENSORNET_CLI_PATH;
  auto status = [](const std::string &cmd) {
    const int s = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  EXPECT_EQ(status(exe + " check appendix --seed 7"), 0);
  EXPECT_EQ(status(exe + " nonsense"), 2);
  const std::string bad = (dir / "bad.ckpt").string();
  std::ofstream(bad) << "garbage!";
  EXPECT_EQ(status(exe + " inspect --ckpt " + bad), 1);
}
