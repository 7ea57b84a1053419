#include "test_util.hpp"
#include "tensornet/io.hpp"
#include "tensornet/verification.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace tensornet;
namespace fs = std::filesystem;

namespace {

std::string error_of(const std::function<void()> &f) {
  try {
    f();
  } catch (const Error &e) {
    return e.what();
  }
  return "";
}

bool contains(const std::string &s, const std::string &part) { return s.find(part) != std::string::npos; }

fs::path scratch_dir(const std::string &name) {
  const fs::path p = fs::temp_directory_path() / ("tensornet_io_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::uint8_t> file_bytes(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

AtomicSystem labelled_system(std::uint64_t seed, bool with_shielding) {
  AtomicSystem s = random_system(5, seed, {1, 6, 7, 8});
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> nd(0.0, 1.0);
  s.energy = nd(rng) * 1e3;
  s.forces = std::vector<Vec3<double>>(s.size());
  for (auto &f : *s.forces)
    f = {nd(rng), nd(rng) * 1e-7, nd(rng) * 1e12};
  s.dipole = Vec3<double>{nd(rng), nd(rng), nd(rng)};
  Mat3<double> a{};
  for (int i = 0; i < 3; ++i)
    for (int j = i; j < 3; ++j)
      a[3 * i + j] = a[3 * j + i] = nd(rng);
  s.polarizability = a;
  if (with_shielding) {
    s.shieldings = std::vector<Mat3<double>>(s.size());
    for (auto &m : *s.shieldings)
      for (double &x : m)
        x = nd(rng);
  }
  return s;
}

void expect_same_system(const AtomicSystem &a, const AtomicSystem &b) {
  EXPECT_EQ(a.atomic_numbers, b.atomic_numbers);
  EXPECT_EQ(a.positions, b.positions);
  EXPECT_EQ(a.energy, b.energy);
  EXPECT_EQ(a.forces, b.forces);
  EXPECT_EQ(a.dipole, b.dipole);
  EXPECT_EQ(a.polarizability, b.polarizability);
  EXPECT_EQ(a.shieldings, b.shieldings);
}

RunConfig small_run() {
  RunConfig rc;
  rc.model.channels = 8;
  rc.model.n_rbf = 6;
  rc.model.max_atomic_number = 9;
  rc.model.heads = HeadSet{true, true, true, true};
  rc.energy_unit = "eV";
  rc.length_unit = "Angstrom";
  return rc;
}

} // namespace

// Extended XYZ --------------------------------------------------------------

TEST(Extxyz, SingleAtomFrame) {
  const Dataset ds = parse_extxyz_text("1\nenergy=0.0\nH 0 0 0\n");
  ASSERT_EQ(ds.systems.size(), 1u);
  const AtomicSystem &s = ds.systems[0];
  EXPECT_EQ(s.size(), 1u);
  EXPECT_EQ(s.atomic_numbers, std::vector<int>{1});
  EXPECT_EQ(s.energy, 0.0);
  EXPECT_FALSE(s.forces.has_value());
}

TEST(Extxyz, QuotedValuesAndWhitespace) {
  const Dataset ds = parse_extxyz_text("  2 \nProperties=species:S:1:pos:R:3  energy=-1.5 dipole=\"1  2 3\" "
                                       "polarizability=\"1 0 0 0 2 0 0 0 3\"\n\tcl  0 0 0\nNA 1.5\t0 0\n");
  const AtomicSystem &s = ds.systems.at(0);
  EXPECT_EQ(s.atomic_numbers, (std::vector<int>{17, 11}));
  EXPECT_EQ(s.energy, -1.5);
  EXPECT_EQ(s.dipole, (Vec3<double>{1, 2, 3}));
  EXPECT_EQ(s.polarizability, (Mat3<double>{1, 0, 0, 0, 2, 0, 0, 0, 3}));
  EXPECT_EQ(s.positions[1], (Vec3<double>{1.5, 0, 0}));
}

TEST(Extxyz, ElementTableCoversHydrogenToOganesson) {
  EXPECT_EQ(atomic_number_of("H"), 1);
  EXPECT_EQ(atomic_number_of("Kr"), 36);
  EXPECT_EQ(atomic_number_of("Og"), 118);
  EXPECT_FALSE(atomic_number_of("Xx").has_value());
  for (int z = 1; z <= 118; ++z)
    EXPECT_EQ(atomic_number_of(element_name(z)), z);
}

TEST(Extxyz, RoundTripIsExact) {
  for (bool shield : {false, true}) {
    std::vector<AtomicSystem> systems{labelled_system(1, shield), labelled_system(2, shield)};
    systems[1].dipole.reset();
    systems[1].energy.reset();
    std::ostringstream os;
    write_extxyz(os, systems);
    const Dataset ds = parse_extxyz_text(os.str());
    ASSERT_EQ(ds.systems.size(), systems.size());
    for (std::size_t k = 0; k < systems.size(); ++k)
      expect_same_system(ds.systems[k], systems[k]);
  }
}

TEST(Extxyz, RoundTripThroughFile) {
  const fs::path dir = scratch_dir("xyz");
  const std::vector<AtomicSystem> systems{labelled_system(3, false)};
  write_extxyz((dir / "a.xyz").string(), systems);
  const Dataset ds = parse_extxyz((dir / "a.xyz").string());
  expect_same_system(ds.systems.at(0), systems[0]);
  EXPECT_EQ(ds.path, (dir / "a.xyz").string());
  fs::remove_all(dir);
}

TEST(Extxyz, ShortFrameReportsItsLine) {
  const std::string text = "1\nenergy=1\nH 0 0 0\n3\nenergy=2\nH 0 0 0\nH 1 0 0\n";
  try {
    parse_extxyz_text(text);
    FAIL() << "expected an error";
  } catch (const ParseError &e) {
    EXPECT_EQ(e.line(), 4u);
    EXPECT_TRUE(contains(e.what(), "3 atoms")) << e.what();
  }
}

TEST(Extxyz, UnknownSymbol) {
  try {
    parse_extxyz_text("2\n\nH 0 0 0\nQq 1 0 0\n");
    FAIL() << "expected an error";
  } catch (const ParseError &e) {
    EXPECT_EQ(e.line(), 4u);
    EXPECT_TRUE(contains(e.what(), "unknown element symbol 'Qq'")) << e.what();
  }
}

TEST(Extxyz, MalformedFloat) {
  try {
    parse_extxyz_text("1\n\nH 0 0.0.1 0\n");
    FAIL() << "expected an error";
  } catch (const ParseError &e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_TRUE(contains(e.what(), "malformed number")) << e.what();
  }
  EXPECT_TRUE(contains(error_of([] { parse_extxyz_text("1\nenergy=abc\nH 0 0 0\n"); }), "line 2"));
}

TEST(Extxyz, OtherMalformedInput) {
  EXPECT_TRUE(contains(error_of([] { parse_extxyz_text(""); }), "no frames"));
  EXPECT_TRUE(contains(error_of([] { parse_extxyz_text("0\n\n"); }), "positive"));
  EXPECT_TRUE(contains(error_of([] { parse_extxyz_text("2\n\nH 0 0 0 1 1 1\nH 1 0 0\n"); }), "line 4"));
  EXPECT_TRUE(contains(error_of([] { parse_extxyz_text("1\n\nH 0 0\n"); }), "columns"));
  EXPECT_TRUE(contains(error_of([] { parse_extxyz_text("1\ndipole=\"1 2\"\nH 0 0 0\n"); }), "line 2"));
  EXPECT_TRUE(contains(error_of([] { parse_extxyz("/nonexistent/file.xyz"); }), "/nonexistent/file.xyz"));
}

// Checkpoints ---------------------------------------------------------------

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const fs::path dir = scratch_dir("ckpt");
  const RunConfig rc = small_run();
  const Checkpoint c = make_checkpoint(rc, init_params(rc.model, 4));
  save_checkpoint((dir / "a.ckpt").string(), c);
  save_checkpoint((dir / "b.ckpt").string(), load_checkpoint((dir / "a.ckpt").string()));
  const auto a = file_bytes(dir / "a.ckpt");
  EXPECT_GT(a.size(), 100u);
  EXPECT_EQ(a, file_bytes(dir / "b.ckpt"));
  fs::remove_all(dir);
}

TEST(Checkpoint, LayoutIsLittleEndian) {
  Checkpoint c;
  c.config_text = "k";
  c.arrays.push_back(Array::f64("w", {1, 1}, std::vector<double>{1.0}));
  const auto b = encode_checkpoint(c);
  std::vector<std::uint8_t> want{'T', 'N', 'E', 'T', 'C', 'K', 'P', 'T'};
  auto append = [&](std::initializer_list<int> v) { want.insert(want.end(), v.begin(), v.end()); };
  append({1, 0, 0, 0});             // version
  append({1, 0, 0, 0, 'k'});        // config
  append({1, 0, 0, 0});             // array count
  append({1, 0, 'w', 1, 2});        // name, f64, rank
  append({1, 0, 0, 0, 0, 0, 0, 0}); // dims
  append({1, 0, 0, 0, 0, 0, 0, 0});
  append({0, 0, 0, 0, 0, 0, 0xf0, 0x3f});
  EXPECT_EQ(b, want);
}

TEST(Checkpoint, EmptyParameterSet) {
  Checkpoint c;
  const auto b = encode_checkpoint(c);
  EXPECT_EQ(b.size(), 8u + 4 + 4 + 4);
  EXPECT_EQ(std::vector<std::uint8_t>(b.end() - 4, b.end()), (std::vector<std::uint8_t>{0, 0, 0, 0}));
  const Checkpoint d = decode_checkpoint(b);
  EXPECT_TRUE(d.arrays.empty());
  EXPECT_EQ(d.version, checkpoint_version);
}

TEST(Checkpoint, CorruptInputRejected) {
  const RunConfig rc = small_run();
  const auto good = encode_checkpoint(make_checkpoint(rc, init_params(rc.model, 5)));
  auto bad = good;
  bad[3] ^= 0x20;
  EXPECT_TRUE(contains(error_of([&] { decode_checkpoint(bad); }), "bad magic"));
  for (std::size_t cut : {std::size_t{4}, std::size_t{10}, good.size() / 2, good.size() - 1}) {
    const std::vector<std::uint8_t> t(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_TRUE(contains(error_of([&] { decode_checkpoint(t); }), "truncated")) << cut;
  }
  bad = good;
  bad[8] = 2;
  EXPECT_TRUE(contains(error_of([&] { decode_checkpoint(bad); }), "unsupported version 2"));
  bad = good;
  bad.push_back(0);
  EXPECT_TRUE(contains(error_of([&] { decode_checkpoint(bad); }), "trailing bytes"));
  EXPECT_TRUE(contains(error_of([] { load_checkpoint("/nonexistent/x.ckpt"); }), "/nonexistent/x.ckpt"));
}

TEST(Checkpoint, ArrayDtypes) {
  Array f{"f", DType::f32, {2}, {}};
  for (float v : {1.5f, -2.0f}) {
    const auto u = std::bit_cast<std::uint32_t>(v);
    for (int b = 0; b < 4; ++b)
      f.bytes.push_back(static_cast<std::uint8_t>(u >> (8 * b)));
  }
  Array i{"i", DType::i64, {1}, {}};
  const auto u = std::bit_cast<std::uint64_t>(std::int64_t{-3});
  for (int b = 0; b < 8; ++b)
    i.bytes.push_back(static_cast<std::uint8_t>(u >> (8 * b)));
  Checkpoint c;
  c.arrays = {f, i};
  const Checkpoint d = decode_checkpoint(encode_checkpoint(c));
  EXPECT_EQ(d.find("f")->to_f64(), (std::vector<double>{1.5, -2.0}));
  EXPECT_EQ(d.find("i")->to_f64(), (std::vector<double>{-3.0}));
  EXPECT_EQ(d.find("missing"), nullptr);
}

TEST(Checkpoint, PredictionsBitIdenticalAfterRoundTrip) {
  const RunConfig rc = small_run();
  ParamStore params = init_params(rc.model, 6);
  const auto loaded = model_from_checkpoint(decode_checkpoint(encode_checkpoint(make_checkpoint(rc, params))));
  EXPECT_EQ(format_config(loaded.config), format_config(rc));
  AtomicSystem s = random_system(7, 6, {1, 6, 8});
  const SystemPrediction a = predict(s, params, rc.model);
  const SystemPrediction b = predict(s, loaded.params, loaded.config.model);
  EXPECT_EQ(a.energy, b.energy);
  EXPECT_EQ(a.forces, b.forces);
  EXPECT_EQ(a.dipole, b.dipole);
  EXPECT_EQ(a.polarizability, b.polarizability);
  EXPECT_EQ(a.shieldings, b.shieldings);
}

TEST(Checkpoint, MissingOrMisshapenParameter) {
  const RunConfig rc = small_run();
  Checkpoint c = make_checkpoint(rc, init_params(rc.model, 7));
  const std::string name = c.arrays.back().name;
  c.arrays.pop_back();
  EXPECT_TRUE(contains(error_of([&] { model_from_checkpoint(c); }), "missing parameter '" + name + "'"));
  c = make_checkpoint(rc, init_params(rc.model, 7));
  c.arrays[0].dims = {c.arrays[0].count(), 1};
  if (c.arrays[0].dims[0] != 1)
    EXPECT_TRUE(contains(error_of([&] { model_from_checkpoint(c); }), "has shape"));
}

// Configuration text --------------------------------------------------------

TEST(Config, FormatParseRoundTrip) {
  RunConfig rc = small_run();
  rc.model.group = Group::SO3;
  rc.model.cutoff = 5.25;
  rc.model.energy_scale = 0.1;
  rc.model.atom_ref.assign(10, 0.0);
  rc.model.atom_ref[1] = -0.5;
  rc.model.atom_ref[8] = -75.0;
  rc.model.shielding_weights = {{1, 2.0}, {6, 3.0}};
  rc.train.lr_init = 3e-4;
  rc.train.standardize_energy = true;
  rc.train.seed = 17;
  const std::string text = format_config(rc);
  const ParsedConfig pc = parse_config_text(text);
  EXPECT_EQ(format_config(pc.run), text);
  EXPECT_EQ(pc.run.model.group, Group::SO3);
  EXPECT_EQ(pc.run.model.atom_ref, rc.model.atom_ref);
  EXPECT_EQ(pc.run.train.seed, 17u);
}

TEST(Config, CommentsAndDefaults) {
  const ParsedConfig pc = parse_config_text("# model\nchannels = 32   # width\n\nn_layers=3\n");
  EXPECT_EQ(pc.run.model.channels, 32u);
  EXPECT_EQ(pc.run.model.n_layers, 3u);
  EXPECT_EQ(pc.run.model.n_rbf, ModelConfig{}.n_rbf);
}

TEST(Config, UnknownKeyRejected) {
  try {
    parse_config_text("channels = 8\nlearning_rate = 1\n");
    FAIL() << "expected an error";
  } catch (const ParseError &e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_TRUE(contains(e.what(), "unknown key 'learning_rate'"));
  }
  EXPECT_TRUE(contains(error_of([] { parse_config_text("state.step = 3\n"); }), "unknown key"));
  EXPECT_EQ(parse_config_text("state.step = 3\n", true).extra.at("state.step"), "3");
}

TEST(Config, DuplicateKeyRejected) {
  try {
    parse_config_text("channels = 8\n\nchannels = 16\n");
    FAIL() << "expected an error";
  } catch (const ParseError &e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_TRUE(contains(e.what(), "first on line 1"));
  }
}

TEST(Config, MalformedValues) {
  EXPECT_TRUE(contains(error_of([] { parse_config_text("group = O2\n"); }), "O3 or SO3"));
  EXPECT_TRUE(contains(error_of([] { parse_config_text("channels\n"); }), "key = value"));
  EXPECT_TRUE(contains(error_of([] { parse_config_text("cutoff = fast\n"); }), "malformed number"));
  EXPECT_TRUE(contains(error_of([] { parse_config_text("standardize_energy = maybe\n"); }), "line 1"));
  EXPECT_TRUE(
      contains(error_of([] { parse_config_text("max_atomic_number = 9\natom_ref = Cl:1\n"); }), "max_atomic_number"));
}

TEST(Config, TrainingCheckpointRestoresState) {
  const RunConfig rc = small_run();
  TrainState s;
  s.model = rc.model;
  s.params = init_params(rc.model, 8);
  s.best_params = s.params;
  s.opt = OptimState::for_params(s.params);
  s.opt.step = 12;
  s.opt.m[0][0] = 0.25;
  s.opt.v[1][0] = 1e-300;
  s.step = 12;
  s.epoch = 3;
  s.scheduler.plateau_lr = 5e-4;
  s.scheduler.best = 0.125;
  s.scheduler.ema_energy = 0.1 + 0.2;
  s.best_metric = 0.125;
  const auto bytes = encode_checkpoint(make_training_checkpoint(s, rc));
  const TrainState r = training_state_from_checkpoint(decode_checkpoint(bytes));
  EXPECT_EQ(r.step, 12u);
  EXPECT_EQ(r.epoch, 3u);
  EXPECT_EQ(r.opt.step, 12u);
  EXPECT_EQ(r.opt.m, s.opt.m);
  EXPECT_EQ(r.opt.v, s.opt.v);
  EXPECT_EQ(r.scheduler.plateau_lr, 5e-4);
  EXPECT_EQ(r.scheduler.ema_energy, 0.1 + 0.2);
  EXPECT_EQ(encode_checkpoint(make_training_checkpoint(r, rc)), bytes);
}
