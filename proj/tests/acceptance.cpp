// Acceptance checks. One PASS/FAIL line per criterion; nonzero exit if any fails.

#include "tensornet/io.hpp"
#include "tensornet/training.hpp"
#include "tensornet/verification.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unistd.h>

using namespace tensornet;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(3) << v;
  return os.str();
}

Mat3<double> random_mat(std::mt19937_64 &rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Mat3<double> m;
  for (double &x : m)
    x = nd(rng);
  return m;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double d = 0;
  for (std::size_t k = 0; k < a.size(); ++k)
    d = std::max(d, std::abs(a[k] - b[k]));
  return d;
}

ModelConfig o3_config(std::size_t layers, std::size_t channels = 32) {
  ModelConfig cfg;
  cfg.channels = channels;
  cfg.n_rbf = 16;
  cfg.n_layers = layers;
  cfg.max_atomic_number = 9;
  cfg.heads = HeadSet{true, true, true, true};
  return cfg;
}

// 1 -------------------------------------------------------------------------

Outcome algebra_suite() {
  std::mt19937_64 rng(1);
  const std::size_t n = 1000;
  std::vector<Mat3<double>> mats(n);
  for (auto &m : mats)
    m = random_mat(rng);
  const TensorFeature<double> x = TensorFeature<double>::from_channels(mats);
  const IrrepsTriple<double> t = decompose(x);
  const double round_trip = max_abs_diff(recompose(t).data(), x.data());
  double ortho = 0, trace_s = 0;
  for (std::size_t c = 0; c < n; ++c) {
    ortho = std::max({ortho, std::abs(mat3::dot(t.I[c], t.A[c])), std::abs(mat3::dot(t.I[c], t.S[c])),
                      std::abs(mat3::dot(t.A[c], t.S[c]))});
    trace_s = std::max(trace_s, std::abs(mat3::trace(t.S[c])));
  }
  double equiv = 0;
  for (std::uint64_t k = 0; k < 10; ++k) {
    GroupElement<double> g = random_rotation(100 + k);
    if (k % 2)
      g = g.compose(GroupElement<double>::parity());
    const IrrepsTriple<double> lhs = decompose(group_action(x, g));
    const IrrepsTriple<double> rhs = group_action(t, g);
    equiv = std::max({equiv, max_abs_diff(lhs.I.data(), rhs.I.data()), max_abs_diff(lhs.A.data(), rhs.A.data()),
                      max_abs_diff(lhs.S.data(), rhs.S.data())});
  }
  const double worst = std::max({round_trip, ortho, trace_s, equiv});
  return {worst <= 1e-13, "round_trip=" + fmt(round_trip) + " orthogonality=" + fmt(ortho) +
                              " trace_S=" + fmt(trace_s) + " equivariance=" + fmt(equiv)};
}

// 2 -------------------------------------------------------------------------

Outcome appendix_suite() {
  const auto results = appendix_oracle_suite(2, 1000);
  bool ok = true;
  std::string failed;
  for (const auto &r : results)
    if (!r.pass()) {
      ok = false;
      failed += " " + r.name + "=" + fmt(r.value);
    }
  return {ok, oracle_result_line(results) + (failed.empty() ? "" : " failed:" + failed)};
}

// 3 -------------------------------------------------------------------------

Outcome o3_equivariance() {
  bool ok = true;
  std::string detail;
  for (std::size_t layers : {0u, 1u, 2u}) {
    const ModelConfig cfg = o3_config(layers);
    const ParamStore params = init_params(cfg, 30 + layers);
    EquivarianceOptions opt;
    opt.n_trials = 50;
    opt.seed = 3 + layers;
    const SymmetryReport rep = equivariance_report(cfg, params, random_system(20, 40 + layers), opt);
    ok = ok && rep.pass() && rep.rows.size() == 10;
    const HeadDeviation *w = rep.worst();
    detail += "L=" + std::to_string(layers) + ":" + fmt(w ? w->max_rel : 0.0) + "(" + (w ? w->head : "") + ") ";
  }
  return {ok, detail + "max relative deviation, tolerance 1e-09"};
}

// 4 -------------------------------------------------------------------------

Outcome so3_defect() {
  ModelConfig cfg;
  cfg.channels = 64;
  cfg.n_rbf = 16;
  cfg.n_layers = 1;
  cfg.cutoff = 4.5;
  cfg.group = Group::SO3;
  cfg.max_atomic_number = 36;
  cfg.heads = HeadSet{true, false, false, false};
  const AtomicSystem s = chiral_fixture();
  AtomicSystem mirrored = s;
  for (auto &p : mirrored.positions)
    for (double &x : p)
      x = -x;
  std::size_t defects = 0;
  bool rotations_ok = true;
  double min_defect = std::numeric_limits<double>::infinity(), worst_rot = 0;
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    const ParamStore params = init_params(cfg, seed);
    EquivarianceOptions opt;
    opt.n_trials = 10;
    opt.seed = seed;
    opt.parity = false;
    opt.heads = cfg.heads;
    const SymmetryReport rep = equivariance_report(cfg, params, s, opt);
    rotations_ok = rotations_ok && rep.pass();
    worst_rot = std::max(worst_rot, rep.worst()->max_rel);
    const double d = std::abs(energy(mirrored, params, cfg).first - energy(s, params, cfg).first);
    min_defect = std::min(min_defect, d);
    defects += d > 1e-6;
  }
  return {rotations_ok && defects >= 9, "rotation max_rel=" + fmt(worst_rot) + " seeds with |U(-r)-U(r)|>1e-6: " +
                                            std::to_string(defects) + "/10 (min " + fmt(min_defect) + ")"};
}

// 5 -------------------------------------------------------------------------

Outcome force_correctness() {
  ModelConfig cfg = o3_config(2);
  cfg.max_atomic_number = 36;
  cfg.heads = HeadSet{true, false, false, false};
  const ParamStore params = init_params(cfg, 50);
  std::vector<AtomicSystem> systems{chiral_fixture()};
  for (std::size_t n : {2u, 5u, 10u, 20u})
    systems.push_back(random_system(n, 50 + n));
  bool ok = true;
  double rel = 0, net = 0;
  for (const auto &s : systems) {
    const GradientReport rep = gradient_report(cfg, params, s, 1e-4, 1e-5, 1e-8);
    ok = ok && rep.pass();
    rel = std::max(rel, rep.max_rel_err);
    net = std::max(net, rep.net_force);
  }
  return {ok, std::to_string(systems.size()) + " systems, max_rel_err=" + fmt(rel) + " max_net_force=" + fmt(net)};
}

// 6 -------------------------------------------------------------------------

AtomicSystem elongated_cloud(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(0.0, 32.0), uyz(0.0, 3.0);
  std::uniform_int_distribution<int> pick(0, 2);
  const int elements[3] = {1, 6, 8};
  AtomicSystem s;
  while (s.size() < n) {
    const Vec3<double> p{ux(rng), uyz(rng), uyz(rng)};
    bool clear = true;
    for (const auto &q : s.positions)
      clear = clear && std::hypot(p[0] - q[0], p[1] - q[1], p[2] - q[2]) > 1.0;
    if (clear) {
      s.positions.push_back(p);
      s.atomic_numbers.push_back(elements[pick(rng)]);
    }
  }
  return s;
}

Outcome receptive_field() {
  bool exact = true;
  std::size_t perturbed = 0;
  for (std::size_t layers : {0u, 1u, 2u, 3u}) {
    const ModelConfig cfg = o3_config(layers, 16);
    const ParamStore params = init_params(cfg, 60 + layers);
    PredictOptions po;
    po.forces = false;
    po.heads = HeadSet{true, false, false, false};
    for (std::uint64_t trial = 0; trial < 5; ++trial) {
      const AtomicSystem s = elongated_cloud(40, 70 + trial);
      const auto ref = predict(s, params, cfg, po).atomic_energies;
      std::mt19937_64 rng(trial);
      std::normal_distribution<double> nd(0.0, 0.05);
      const double reach = static_cast<double>(layers + 1) * cfg.cutoff;
      for (std::size_t i = 0; i < s.size(); ++i) {
        AtomicSystem moved = s;
        std::size_t count = 0;
        for (std::size_t j = 0; j < s.size(); ++j) {
          const auto &a = s.positions[i], &b = s.positions[j];
          if (std::hypot(a[0] - b[0], a[1] - b[1], a[2] - b[2]) <= reach)
            continue;
          const Vec3<double> q{b[0] + nd(rng), b[1] + nd(rng), b[2] + nd(rng)};
          // Stays beyond the reach after the move.
          if (std::hypot(a[0] - q[0], a[1] - q[1], a[2] - q[2]) > reach) {
            moved.positions[j] = q;
            ++count;
          }
        }
        if (count == 0)
          continue;
        ++perturbed;
        exact = exact && predict(moved, params, cfg, po).atomic_energies[i] == ref[i];
      }
    }
  }

  // Continuity across the cutoff.
  const ModelConfig cfg = o3_config(2, 16);
  const ParamStore params = init_params(cfg, 64);
  const double rc = cfg.cutoff;
  // A probe atom approaches the +x-most atom along +x; every other atom stays
  // beyond the cutoff of the probe.
  AtomicSystem base;
  std::size_t anchor = 0;
  for (std::uint64_t seed = 65;; ++seed) {
    base = random_system(6, seed);
    anchor = 0;
    for (std::size_t k = 1; k < base.size(); ++k)
      if (base.positions[k][0] > base.positions[anchor][0])
        anchor = k;
    const auto &a = base.positions[anchor];
    bool clear = true;
    for (std::size_t k = 0; k < base.size(); ++k)
      if (k != anchor)
        clear = clear && std::hypot(a[0] + rc - base.positions[k][0], a[1] - base.positions[k][1],
                                    a[2] - base.positions[k][2]) > rc + 0.1;
    if (clear)
      break;
  }
  auto u_at = [&](double d) {
    AtomicSystem s = base;
    const auto &a = base.positions[anchor];
    s.atomic_numbers.push_back(8);
    s.positions.push_back({a[0] + d, a[1], a[2]});
    return energy(s, params, cfg).first;
  };
  const double d2 = std::abs(u_at(rc - 1e-2) - u_at(rc + 1e-2));
  const double d3 = std::abs(u_at(rc - 1e-3) - u_at(rc + 1e-3));
  const double k = d2 / 1e-4;
  const double ratio = d3 > 0 ? d2 / d3 : std::numeric_limits<double>::infinity();
  const bool smooth = d2 > 0 && d3 <= k * 1e-6 * 1.25 && ratio >= 50;
  return {exact && perturbed > 0 && smooth, std::to_string(perturbed) + " far-field perturbations " +
                                                (exact ? "exactly zero" : "CHANGED U_i") + "; K=" + fmt(k) +
                                                " dU(1e-2)=" + fmt(d2) + " dU(1e-3)=" + fmt(d3) +
                                                " ratio=" + fmt(ratio)};
}

// 7 -------------------------------------------------------------------------

Outcome permutation_translation() {
  const ModelConfig cfg = o3_config(2);
  const ParamStore params = init_params(cfg, 70);
  const AtomicSystem s = random_system(20, 71);
  PredictOptions po;
  po.forces = false;
  po.heads = HeadSet{true, false, false, false};
  const double u0 = predict(s, params, cfg, po).energy;
  std::mt19937_64 rng(72);
  std::uniform_real_distribution<double> ut(-10.0, 10.0);
  double worst_p = 0, worst_t = 0;
  for (int k = 0; k < 100; ++k) {
    std::vector<std::size_t> perm(s.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    AtomicSystem p;
    for (std::size_t i : perm) {
      p.atomic_numbers.push_back(s.atomic_numbers[i]);
      p.positions.push_back(s.positions[i]);
    }
    worst_p = std::max(worst_p, std::abs(predict(p, params, cfg, po).energy - u0));
    AtomicSystem t = s;
    const Vec3<double> shift{ut(rng), ut(rng), ut(rng)};
    for (auto &q : t.positions)
      for (int c = 0; c < 3; ++c)
        q[c] += shift[c];
    worst_t = std::max(worst_t, std::abs(predict(t, params, cfg, po).energy - u0));
  }
  return {worst_p <= 1e-9 && worst_t <= 1e-9,
          "max |dU| permutation=" + fmt(worst_p) + " translation=" + fmt(worst_t) + " (U=" + fmt(u0) + ")"};
}

// 8 -------------------------------------------------------------------------

std::vector<AtomicSystem> morse_dataset() {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd(0.0, 0.15);
  const Vec3<double> base[5] = {{0, 0, 0}, {1.5, 0, 0}, {0, 1.5, 0}, {0, 0, 1.5}, {1.5, 1.5, 0}};
  std::vector<AtomicSystem> data;
  for (int c = 0; c < 100; ++c) {
    AtomicSystem s;
    s.atomic_numbers = {1, 1, 1, 1, 1};
    for (const auto &b : base)
      s.positions.push_back({b[0] + nd(rng), b[1] + nd(rng), b[2] + nd(rng)});
    double e = 0;
    std::vector<Vec3<double>> f(5, Vec3<double>{0, 0, 0});
    for (int i = 0; i < 5; ++i)
      for (int j = i + 1; j < 5; ++j) {
        Vec3<double> d;
        for (int k = 0; k < 3; ++k)
          d[k] = s.positions[j][k] - s.positions[i][k];
        const double r = std::hypot(d[0], d[1], d[2]), x = std::exp(-(r - 1.5));
        e += (1 - x) * (1 - x) - 1;
        const double de = 2 * (1 - x) * x;
        for (int k = 0; k < 3; ++k) {
          f[i][k] += de * d[k] / r;
          f[j][k] -= de * d[k] / r;
        }
      }
    s.energy = e;
    s.forces = f;
    data.push_back(s);
  }
  return data;
}

Outcome overfit() {
  const std::vector<AtomicSystem> data = morse_dataset();
  std::vector<const AtomicSystem *> all;
  for (const auto &s : data)
    all.push_back(&s);
  ModelConfig m;
  m.channels = 64;
  m.n_layers = 1;
  m.max_atomic_number = 9;
  TrainConfig t;
  t.batch_size = 8;
  t.lr_init = 1e-3;
  t.warmup_steps = 0;
  t.plateau_patience = 5;
  t.ema_weight = 0;
  t.loss_weights.energy = 1;
  t.loss_weights.forces = 1;
  t.max_steps = 2000;
  t.max_epochs = 100000;
  t.early_stop_patience = 100000;
  t.standardize_energy = true;
  TrainState st = initial_state(data, m, t);
  EvalMetrics at10, at2000;
  TrainHooks hooks;
  hooks.on_step = [&](std::uint64_t step, const LossBreakdown &, const ParamStore &p) {
    if (step == 10)
      at10 = evaluate(all, p, st.model, t.loss_weights);
  };
  train_loop(data, st, t, hooks);
  at2000 = evaluate(all, st.params, st.model, t.loss_weights);
  const double re = at10.energy_mae / at2000.energy_mae, rf = at10.force_mae / at2000.force_mae;

  // The trained model survives a checkpoint round trip.
  RunConfig rc;
  rc.model = st.model;
  rc.train = t;
  const LoadedModel lm = model_from_checkpoint(decode_checkpoint(encode_checkpoint(make_checkpoint(rc, st.params))));
  const bool loadable = predict(data[0], lm.params, lm.config.model).energy == predict(data[0], st.params, st.model).energy;

  return {st.step == 2000 && re >= 50 && rf >= 10 && loadable,
          "steps=" + std::to_string(st.step) + " energy MAE " + fmt(at10.energy_mae) + " -> " +
              fmt(at2000.energy_mae) + " (" + fmt(re) + "x) force MAE " + fmt(at10.force_mae) + " -> " +
              fmt(at2000.force_mae) + " (" + fmt(rf) + "x) checkpoint " + (loadable ? "ok" : "MISMATCH")};
}

// 9 -------------------------------------------------------------------------

Outcome serialization() {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / ("tensornet_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  RunConfig rc;
  rc.model = o3_config(2, 16);
  ParamStore params = init_params(rc.model, 90);
  const std::string a = (dir / "a.ckpt").string(), b = (dir / "b.ckpt").string();
  save_checkpoint(a, make_checkpoint(rc, params));
  const Checkpoint loaded = load_checkpoint(a);
  save_checkpoint(b, loaded);
  auto bytes = [](const std::string &p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  };
  const bool identical = bytes(a) == bytes(b);
  const LoadedModel lm = model_from_checkpoint(loaded);
  bool same = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const AtomicSystem s = random_system(8 + seed, 91 + seed);
    const SystemPrediction p = predict(s, params, rc.model), q = predict(s, lm.params, lm.config.model);
    same = same && p.energy == q.energy && p.forces == q.forces && p.dipole == q.dipole &&
           p.polarizability == q.polarizability && p.shieldings == q.shieldings;
  }
  const auto size = fs::file_size(a);
  fs::remove_all(dir);
  return {identical && same, std::to_string(size) + " bytes, save/load/save " +
                                 (identical ? "byte-identical" : "DIFFERS") + ", predictions " +
                                 (same ? "bit-identical" : "DIFFER")};
}

// 10 ------------------------------------------------------------------------

Outcome constants() {
  bool ok = true;
  double worst_beta = 0;
  for (std::size_t d : {8u, 16u, 32u, 50u})
    for (double rc : {4.5, 5.0, 6.0}) {
      const RadialBasis b = RadialBasis::make(d, rc);
      ok = ok && b.mu.front() == std::exp(-rc) && b.mu.back() == 1.0;
      const double beta = std::pow(2.0 / static_cast<double>(d) * (1.0 - std::exp(-rc)), -2.0);
      for (double x : b.beta)
        worst_beta = std::max(worst_beta, std::abs(x - beta) / beta);
    }
  ok = ok && worst_beta <= 4 * std::numeric_limits<double>::epsilon();
  const Vec3<double> v{0.3, -1.7, 2.9};
  const Mat3<double> printed{0, v[2], -v[1], -v[2], 0, v[0], v[1], -v[0], 0};
  const bool layout = mat3::skew_from_vector(v) == printed;
  const auto w = default_shielding_weights();
  const bool weights = w.at(6) == 1.0 / 0.167 && w.at(8) == 1.0 / 0.022 && w.at(1) == 1.0;
  return {ok && layout && weights, "mu endpoints exact, beta rel err " + fmt(worst_beta) + ", skew layout " +
                                       (layout ? "matches" : "DIFFERS") + ", shielding weights " +
                                       (weights ? "C=1/0.167 O=1/0.022 H=1" : "WRONG")};
}

} // namespace

int main() {
  struct Criterion {
    int id;
    const char *name;
    double limit_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "algebra suite", 10, algebra_suite},
      {2, "product identity suite", 30, appendix_suite},
      {3, "O(3) equivariance", 120, o3_equivariance},
      {4, "SO(3) parity defect", 60, so3_defect},
      {5, "force correctness", 60, force_correctness},
      {6, "receptive field and cutoff smoothness", 60, receptive_field},
      {7, "permutation and translation invariance", 60, permutation_translation},
      {8, "overfit fixture", 300, overfit},
      {9, "serialization", 10, serialization},
      {10, "published constants", 10, constants},
  };
  int failures = 0;
  for (const auto &c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception &e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool pass = o.pass && secs < c.limit_s;
    failures += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << o.detail << " ["
              << fmt(secs) << " s, limit " << c.limit_s << " s]" << std::endl;
  }
  std::cout << (failures ? "FAILED " + std::to_string(failures) + " of 10" : std::string("ALL 10 PASSED"))
            << std::endl;
  return failures ? 1 : 0;
}
