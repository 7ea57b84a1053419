#pragma once

// TensorNet forward pass: edge-wise tensor embedding, interaction layers with
// parity-preserving products, and scalar / vector / rank-2 output heads.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tensornet/autodiff.hpp"
#include "tensornet/elements.hpp"
#include "tensornet/geometry.hpp"
#include "tensornet/tensor_ops.hpp"

namespace tensornet {

enum class Group { O3, SO3 };

inline std::string to_string(Group g) { return g == Group::O3 ? "O3" : "SO3"; }

struct HeadSet {
  bool energy = true; // energy and forces
  bool dipole = false;
  bool polarizability = false;
  bool shielding = false;

  bool operator==(const HeadSet &) const = default;
};

inline std::map<int, double> default_shielding_weights() {
  return {{1, 1.0}, {6, 1.0 / 0.167}, {8, 1.0 / 0.022}};
}

struct ModelConfig {
  std::size_t channels = 128;
  std::size_t n_rbf = 32;
  double cutoff = 4.5;
  std::size_t n_layers = 2;
  Group group = Group::O3;
  int max_atomic_number = max_known_element;
  HeadSet heads;
  double energy_scale = 1.0;
  double energy_shift = 0.0;
  // Per-element reference energies indexed by atomic number. When non-empty
  // they replace energy_shift as the per-atom offset.
  std::vector<double> atom_ref;
  std::map<int, double> shielding_weights = default_shielding_weights();

  std::size_t half() const { return std::max<std::size_t>(1, channels / 2); }

  void validate() const {
    if (channels == 0)
      throw Error("ModelConfig: channels must be positive");
    if (n_rbf == 0)
      throw Error("ModelConfig: n_rbf must be positive");
    if (!(cutoff > 0))
      throw Error("ModelConfig: cutoff must be positive");
    if (max_atomic_number < 1)
      throw Error("ModelConfig: max_atomic_number must be >= 1");
    if (!std::isfinite(energy_scale) || !std::isfinite(energy_shift))
      throw Error("ModelConfig: energy scale/shift must be finite");
    if (!atom_ref.empty() && atom_ref.size() != static_cast<std::size_t>(max_atomic_number) + 1)
      throw Error("ModelConfig: atom_ref must have max_atomic_number + 1 entries");
    for (const auto &[z, w] : shielding_weights)
      if (!(w > 0))
        throw Error("ModelConfig: shielding weight for " + element_name(z) + " must be positive");
  }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

namespace detail {

enum class Init { uniform_fan_in, xavier_zero_bias };

inline void add_linear(ParamStore &store, std::mt19937_64 &rng, const std::string &name,
                       std::size_t out, std::size_t in, bool bias, Init init) {
  std::vector<double> w(out * in), b(out, 0.0);
  if (init == Init::uniform_fan_in) {
    const double bound = std::sqrt(1.0 / static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto &v : w)
      v = u(rng);
    if (bias)
      for (auto &v : b)
        v = u(rng);
  } else {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto &v : w)
      v = u(rng);
  }
  store.add(name + ".weight", Shape{out, in}, std::move(w));
  if (bias)
    store.add(name + ".bias", Shape{1, out}, std::move(b));
}

inline void add_layer_norm(ParamStore &store, const std::string &name, std::size_t n) {
  store.add(name + ".gamma", Shape{1, n}, std::vector<double>(n, 1.0));
  store.add(name + ".beta", Shape{1, n}, std::vector<double>(n, 0.0));
}

inline std::string layer_prefix(std::size_t l) { return "interaction." + std::to_string(l); }

} // namespace detail

// Hidden layers: uniform on +-sqrt(1/fan_in) for weights and biases. The last
// two layers of every output MLP: uniform on +-sqrt(6/(fan_in+fan_out)) with
// zero biases. Atomic-number embeddings: standard normal.
inline ParamStore init_params(const ModelConfig &cfg, std::uint64_t seed) {
  using detail::add_layer_norm;
  using detail::add_linear;
  using detail::Init;
  cfg.validate();
  ParamStore store;
  store.rng_seed = seed;
  std::mt19937_64 rng(seed);
  const std::size_t c = cfg.channels, d = cfg.n_rbf, h = cfg.half();
  const auto hidden = Init::uniform_fan_in;
  const auto xavier = Init::xavier_zero_bias;

  {
    const std::size_t rows = static_cast<std::size_t>(cfg.max_atomic_number) + 1;
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> table(rows * c);
    for (auto &v : table)
      v = normal(rng);
    store.add("embedding.z_table", Shape{rows, c}, std::move(table));
  }
  add_linear(store, rng, "embedding.pair", c, 2 * c, true, hidden);
  add_linear(store, rng, "embedding.rbf_I", c, d, true, hidden);
  add_linear(store, rng, "embedding.rbf_A", c, d, true, hidden);
  add_linear(store, rng, "embedding.rbf_S", c, d, true, hidden);
  add_layer_norm(store, "embedding.norm", c);
  add_linear(store, rng, "embedding.mlp.0", 2 * c, c, true, hidden);
  add_linear(store, rng, "embedding.mlp.1", 3 * c, 2 * c, true, hidden);
  for (const char *k : {"I", "A", "S"})
    add_linear(store, rng, std::string("embedding.mix_") + k, c, c, false, hidden);

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = detail::layer_prefix(l);
    add_linear(store, rng, p + ".mlp.0", c, d, true, hidden);
    add_linear(store, rng, p + ".mlp.1", 2 * c, c, true, hidden);
    add_linear(store, rng, p + ".mlp.2", 3 * c, 2 * c, true, hidden);
    for (const char *k : {"I", "A", "S"})
      add_linear(store, rng, p + ".mix_in_" + k, c, c, false, hidden);
    for (const char *k : {"I", "A", "S"})
      add_linear(store, rng, p + ".mix_out_" + k, c, c, false, hidden);
  }

  if (cfg.heads.energy) {
    add_layer_norm(store, "energy.norm", 3 * c);
    add_linear(store, rng, "energy.mlp.0", c, 3 * c, true, hidden);
    add_linear(store, rng, "energy.mlp.1", h, c, true, xavier);
    add_linear(store, rng, "energy.mlp.2", 1, h, true, xavier);
  }
  if (cfg.heads.dipole) {
    add_linear(store, rng, "dipole.chain.0", h, c, false, hidden);
    add_linear(store, rng, "dipole.chain.1", 1, h, false, hidden);
    add_linear(store, rng, "dipole.gate.0", h, c, true, xavier);
    add_linear(store, rng, "dipole.gate.1", 1, h, true, xavier);
  }
  if (cfg.heads.polarizability) {
    for (const char *k : {"I", "S"}) {
      add_linear(store, rng, std::string("polarizability.chain_") + k + ".0", h, c, false, hidden);
      add_linear(store, rng, std::string("polarizability.chain_") + k + ".1", 1, h, false, hidden);
    }
    add_linear(store, rng, "polarizability.gate.0", h, c, true, xavier);
    add_linear(store, rng, "polarizability.gate.1", 2, h, true, xavier);
  }
  if (cfg.heads.shielding) {
    add_linear(store, rng, "shielding.pseudo.0", c, c, false, hidden);
    add_linear(store, rng, "shielding.pseudo.1", c, c, false, hidden);
    for (const char *k : {"I", "Ap", "S"}) {
      add_linear(store, rng, std::string("shielding.chain_") + k + ".0", h, c, false, hidden);
      add_linear(store, rng, std::string("shielding.chain_") + k + ".1", 1, h, false, hidden);
    }
    add_linear(store, rng, "shielding.gate.0", h, c, true, xavier);
    add_linear(store, rng, "shielding.gate.1", 3, h, true, xavier);
  }
  return store;
}

// Places ParamStore arrays on a tape, once per name.
template <class T> class ParamBinder {
public:
  ParamBinder(Tape<T> &tape, const ParamStore &store, bool requires_grad)
      : tape_(tape), store_(store), requires_grad_(requires_grad) {}

  Var<T> operator()(const std::string &name) {
    auto it = cache_.find(name);
    if (it != cache_.end())
      return it->second;
    Var<T> v = tape_.param(store_, name, requires_grad_);
    cache_.emplace(name, v);
    return v;
  }

  LinearRef<T> linear(const std::string &prefix) {
    LinearRef<T> ref{(*this)(prefix + ".weight"), Var<T>{}};
    if (store_.contains(prefix + ".bias"))
      ref.bias = (*this)(prefix + ".bias");
    return ref;
  }

  std::vector<LinearRef<T>> mlp(const std::string &prefix, std::size_t layers) {
    std::vector<LinearRef<T>> out;
    for (std::size_t l = 0; l < layers; ++l)
      out.push_back(linear(prefix + "." + std::to_string(l)));
    return out;
  }

  Tape<T> &tape() { return tape_; }

private:
  Tape<T> &tape_;
  const ParamStore &store_;
  bool requires_grad_;
  std::unordered_map<std::string, Var<T>> cache_;
};

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

// Several systems concatenated into one disconnected graph.
struct Batch {
  std::vector<int> atomic_numbers;
  std::vector<Vec3<double>> positions;
  std::vector<std::size_t> system_of_atom;
  std::vector<std::size_t> atom_offset; // n_systems + 1 entries
  EdgeSet edges;

  std::size_t n_atoms() const noexcept { return atomic_numbers.size(); }
  std::size_t n_systems() const noexcept { return atom_offset.empty() ? 0 : atom_offset.size() - 1; }

  static Batch make(std::span<const AtomicSystem *const> systems, double cutoff) {
    Batch b;
    b.atom_offset.push_back(0);
    for (std::size_t s = 0; s < systems.size(); ++s) {
      const AtomicSystem &sys = *systems[s];
      sys.validate();
      const std::size_t off = b.atomic_numbers.size();
      const EdgeSet e = build_edges(sys, cutoff);
      for (std::size_t k = 0; k < e.size(); ++k) {
        b.edges.src.push_back(e.src[k] + off);
        b.edges.dst.push_back(e.dst[k] + off);
        b.edges.distances.push_back(e.distances[k]);
        b.edges.unit_vectors.push_back(e.unit_vectors[k]);
      }
      b.atomic_numbers.insert(b.atomic_numbers.end(), sys.atomic_numbers.begin(), sys.atomic_numbers.end());
      b.positions.insert(b.positions.end(), sys.positions.begin(), sys.positions.end());
      b.system_of_atom.insert(b.system_of_atom.end(), sys.size(), s);
      b.atom_offset.push_back(b.atomic_numbers.size());
    }
    return b;
  }

  static Batch make(const AtomicSystem &system, double cutoff) {
    const AtomicSystem *p = &system;
    return make(std::span<const AtomicSystem *const>(&p, 1), cutoff);
  }
};

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

template <class T> struct EdgeFeatures {
  Var<T> distances; // E x 1
  Var<T> unit;      // E x 3, from src to dst
  Var<T> rbf;       // E x d
  Var<T> phi;       // E x 1
};

template <class T>
EdgeFeatures<T> edge_features(Var<T> positions, const EdgeSet &edges, const RadialBasis &basis) {
  Var<T> vec = sub(gather_rows(positions, edges.dst), gather_rows(positions, edges.src));
  Var<T> r = row_norms3(vec);
  Var<T> unit = scale_blocks(vec, reciprocal(r), 3);
  return {r, unit, rbf_expand(r, basis), cutoff_fn(r, basis.cutoff)};
}

namespace detail {

// Mixes the irreducible components of a tensor feature; input and output are
// compact coordinates.
template <class T> Var<T> mix_irreps(ParamBinder<T> &p, const std::string &prefix, Var<T> coeffs) {
  return mix_irrep_coeffs(coeffs, p(prefix + "I.weight"), p(prefix + "A.weight"), p(prefix + "S.weight"));
}

template <class T> void require_finite(Var<T> x, const std::string &where) {
  const auto &v = x.value();
  const std::size_t cols = x.cols();
  for (std::size_t k = 0; k < v.size(); ++k)
    if (!finite_value(v[k]))
      throw Error(where + ": non-finite value at atom " + std::to_string(k / cols) + ", channel " +
                  std::to_string((k % cols) / 9));
}

} // namespace detail

// Node tensor embeddings X^(i), N x 9C.
template <class T>
Var<T> embed(const Batch &batch, const EdgeFeatures<T> &ef, ParamBinder<T> &p, const ModelConfig &cfg) {
  Tape<T> &tape = p.tape();
  const std::size_t n = batch.n_atoms(), e = batch.edges.size(), c = cfg.channels;
  std::vector<std::size_t> z(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int zi = batch.atomic_numbers[i];
    if (zi < 1 || zi > cfg.max_atomic_number)
      throw Error("embed: element " + element_name(zi) + " is outside the embedding table (max Z = " +
                  std::to_string(cfg.max_atomic_number) + ")");
    z[i] = static_cast<std::size_t>(zi);
  }
  Var<T> zf = gather_rows(p("embedding.z_table"), z); // N x C
  Var<T> pair_in = concat_cols({gather_rows(zf, batch.edges.src), gather_rows(zf, batch.edges.dst)});
  Var<T> z_ij = linear(pair_in, p("embedding.pair.weight"), p("embedding.pair.bias"));
  Var<T> gate = scale_blocks(z_ij, ef.phi, c); // phi(r_ij) Z^(ij)

  auto rbf_coeff = [&](const char *k) {
    const std::string name = std::string("embedding.rbf_") + k;
    return mul(gate, linear(ef.rbf, p(name + ".weight"), p(name + ".bias")));
  };
  std::vector<T> id(e * 9, T(0));
  for (std::size_t k = 0; k < e; ++k)
    id[9 * k] = id[9 * k + 4] = id[9 * k + 8] = T(1);
  Var<T> i0 = tape.constant(Shape{e, 9}, std::move(id), "identity");
  Var<T> a0 = skew_from_vectors(ef.unit);
  Var<T> s0 = sym_traceless_outer(ef.unit);
  Var<T> x_ij = add(add(channel_outer(rbf_coeff("I"), i0), channel_outer(rbf_coeff("A"), a0)),
                    channel_outer(rbf_coeff("S"), s0));
  Var<T> x = scatter_add_rows(x_ij, batch.edges.src, n);

  Var<T> norms = layer_norm(frobenius_norm_sq(x), p("embedding.norm.gamma"), p("embedding.norm.beta"));
  const auto layers = p.mlp("embedding.mlp", 2);
  Var<T> f = silu(mlp(norms, std::span<const LinearRef<T>>(layers)));
  Var<T> mixed = mix_irrep_coeffs(irrep_coeffs(x), p("embedding.mix_I.weight"), p("embedding.mix_A.weight"),
                                  p("embedding.mix_S.weight"));
  Var<T> out = irrep_expand(scale_irrep_coeffs(mixed, slice_cols(f, 0, c), slice_cols(f, c, c), slice_cols(f, 2 * c, c)));
  detail::require_finite(out, "embed");
  return out;
}

// One interaction and node-update block.
template <class T>
Var<T> interact(Var<T> x, const Batch &batch, const EdgeFeatures<T> &ef, ParamBinder<T> &p,
                const ModelConfig &cfg, std::size_t layer) {
  const std::string pre = detail::layer_prefix(layer);
  const std::size_t n = batch.n_atoms(), c = cfg.channels;

  x = scale_blocks(x, reciprocal(add_scalar(frobenius_norm_sq(x), 1.0)), 9);
  Var<T> yc = detail::mix_irreps(p, pre + ".mix_in_", irrep_coeffs(x));
  Var<T> y = irrep_expand(yc);

  const auto layers = p.mlp(pre + ".mlp", 3);
  Var<T> f = scale_blocks(silu(mlp(ef.rbf, std::span<const LinearRef<T>>(layers))), ef.phi, 3 * c);

  // f^I Y^I_j + f^A Y^A_j + f^S Y^S_j summed over neighbours j.
  Var<T> m_ij = scale_irrep_coeffs(gather_rows(yc, batch.edges.dst), slice_cols(f, 0, c), slice_cols(f, c, c),
                                   slice_cols(f, 2 * c, c));
  Var<T> m = irrep_expand(scatter_add_rows(m_ij, batch.edges.src, n));

  Var<T> prod = cfg.group == Group::O3 ? add(matmul3(y, m), matmul3(m, y)) : scale(matmul3(y, m), 2.0);
  prod = scale_blocks(prod, reciprocal(add_scalar(frobenius_norm_sq(prod), 1.0)), 9);
  y = irrep_expand(detail::mix_irreps(p, pre + ".mix_out_", irrep_coeffs(prod)));
  Var<T> out = add(x, add(y, matmul3(y, y)));
  detail::require_finite(out, "interaction layer " + std::to_string(layer));
  return out;
}

// Per-atom energies scale * U^(i) + shift_i, N x 1.
template <class T>
Var<T> atomic_energy_head(Var<T> x, const Batch &batch, ParamBinder<T> &p, const ModelConfig &cfg) {
  const IrrepVars<T> parts = decompose(x);
  Var<T> feats = concat_cols({frobenius_norm_sq(parts.I), frobenius_norm_sq(parts.A), frobenius_norm_sq(parts.S)});
  feats = layer_norm(feats, p("energy.norm.gamma"), p("energy.norm.beta"));
  const auto layers = p.mlp("energy.mlp", 3);
  Var<T> u = mlp(feats, std::span<const LinearRef<T>>(layers));
  std::vector<T> shift(batch.n_atoms());
  for (std::size_t i = 0; i < shift.size(); ++i)
    shift[i] = T(cfg.atom_ref.empty() ? cfg.energy_shift : cfg.atom_ref[batch.atomic_numbers[i]]);
  Var<T> s = p.tape().constant(Shape{batch.n_atoms(), 1}, std::move(shift), "energy_shift");
  return add(scale(u, cfg.energy_scale), s);
}

namespace detail {
template <class T> Var<T> chain(ParamBinder<T> &p, const std::string &prefix, Var<T> x, std::size_t block) {
  return channel_mix(channel_mix(x, p(prefix + ".0.weight"), block), p(prefix + ".1.weight"), block);
}
template <class T> Var<T> gate_mlp(ParamBinder<T> &p, const std::string &prefix, Var<T> norms) {
  const auto layers = p.mlp(prefix, 2);
  return mlp(norms, std::span<const LinearRef<T>>(layers));
}
} // namespace detail

// 1/2 (A1 A2 - (A1 A2)^T) with A1 = W1 A, A2 = W2 A: parity-even skew channels.
template <class T> Var<T> pseudovector_channels(Var<T> a, ParamBinder<T> &p) {
  Var<T> a1 = channel_mix(a, p("shielding.pseudo.0.weight"), 9);
  Var<T> a2 = channel_mix(a, p("shielding.pseudo.1.weight"), 9);
  return skew_part(matmul3(a1, a2));
}

// Per-atom dipole contributions gate * mu^(i), N x 3.
template <class T> Var<T> atomic_dipole_head(Var<T> x, ParamBinder<T> &p) {
  Var<T> a = skew_part(x);
  Var<T> mu = detail::chain(p, "dipole.chain", vectors_of_skew(a), 3);
  Var<T> gate = detail::gate_mlp(p, "dipole.gate", frobenius_norm_sq(a));
  return scale_blocks(mu, gate, 3);
}

// Per-atom polarizability contributions, N x 9, symmetric by construction.
template <class T> Var<T> atomic_polarizability_head(Var<T> x, ParamBinder<T> &p) {
  Var<T> i = scalar_part(x);
  Var<T> s = sym_traceless_part(x);
  Var<T> alpha_i = detail::chain(p, "polarizability.chain_I", i, 9);
  Var<T> alpha_s = detail::chain(p, "polarizability.chain_S", s, 9);
  Var<T> g = detail::gate_mlp(p, "polarizability.gate", frobenius_norm_sq(add(i, s)));
  return add(scale_blocks(alpha_i, slice_cols(g, 0, 1), 9), scale_blocks(alpha_s, slice_cols(g, 1, 1), 9));
}

// Per-atom shielding tensors w^(i) (sum of gated I, A_p, S predictions), N x 9.
template <class T>
Var<T> shielding_head(Var<T> x, const Batch &batch, ParamBinder<T> &p, const ModelConfig &cfg) {
  std::vector<T> w(batch.n_atoms());
  for (std::size_t k = 0; k < w.size(); ++k) {
    auto it = cfg.shielding_weights.find(batch.atomic_numbers[k]);
    if (it == cfg.shielding_weights.end())
      throw Error("shielding_head: no element weight for " + element_name(batch.atomic_numbers[k]));
    w[k] = T(it->second);
  }
  const IrrepVars<T> parts = decompose(x);
  Var<T> ap = pseudovector_channels(parts.A, p);
  Var<T> s_i = detail::chain(p, "shielding.chain_I", parts.I, 9);
  Var<T> s_a = detail::chain(p, "shielding.chain_Ap", ap, 9);
  Var<T> s_s = detail::chain(p, "shielding.chain_S", parts.S, 9);
  Var<T> g = detail::gate_mlp(p, "shielding.gate", frobenius_norm_sq(add(add(parts.I, ap), parts.S)));
  Var<T> sigma = add(add(scale_blocks(s_i, slice_cols(g, 0, 1), 9), scale_blocks(s_a, slice_cols(g, 1, 1), 9)),
                     scale_blocks(s_s, slice_cols(g, 2, 1), 9));
  Var<T> wv = p.tape().constant(Shape{batch.n_atoms(), 1}, std::move(w), "shielding_weights");
  return scale_blocks(sigma, wv, 9);
}

template <class T> struct ForwardOptions {
  bool params_require_grad = false;
  HeadSet heads;                                // restricted to the config's enabled heads
  const std::vector<T> *positions = nullptr;    // N*3 overrides (e.g. dual-valued)
};

template <class T> struct ForwardResult {
  Var<T> positions;     // N x 3 input
  Var<T> features;      // final X, N x 9C
  Var<T> atomic_energy; // N x 1
  Var<T> energy;        // B x 1
  Var<T> dipole;        // B x 3
  Var<T> polarizability; // B x 9
  Var<T> shielding;     // N x 9
};

template <class T>
ForwardResult<T> run_forward(Tape<T> &tape, const Batch &batch, const ParamStore &params, const ModelConfig &cfg,
                             const ForwardOptions<T> &opt = {}) {
  cfg.validate();
  const std::size_t n = batch.n_atoms();
  std::vector<T> pos(3 * n);
  if (opt.positions) {
    if (opt.positions->size() != 3 * n)
      throw Error("run_forward: position override has wrong size");
    pos = *opt.positions;
  } else {
    for (std::size_t i = 0; i < n; ++i)
      for (int k = 0; k < 3; ++k)
        pos[3 * i + k] = T(batch.positions[i][k]);
  }
  ForwardResult<T> out;
  out.positions = tape.input(Shape{n, 3}, std::move(pos), "positions");
  ParamBinder<T> p(tape, params, opt.params_require_grad);
  const RadialBasis basis = RadialBasis::make(cfg.n_rbf, cfg.cutoff);
  const EdgeFeatures<T> ef = edge_features(out.positions, batch.edges, basis);

  Var<T> x = embed(batch, ef, p, cfg);
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    x = interact(x, batch, ef, p, cfg, l);
  out.features = x;

  const std::size_t b = batch.n_systems();
  if (opt.heads.energy && cfg.heads.energy) {
    out.atomic_energy = atomic_energy_head(x, batch, p, cfg);
    out.energy = scatter_add_rows(out.atomic_energy, batch.system_of_atom, b);
  }
  if (opt.heads.dipole && cfg.heads.dipole)
    out.dipole = scatter_add_rows(atomic_dipole_head(x, p), batch.system_of_atom, b);
  if (opt.heads.polarizability && cfg.heads.polarizability)
    out.polarizability = scatter_add_rows(atomic_polarizability_head(x, p), batch.system_of_atom, b);
  if (opt.heads.shielding && cfg.heads.shielding)
    out.shielding = shielding_head(x, batch, p, cfg);
  return out;
}

// ---------------------------------------------------------------------------
// Double-precision prediction API
// ---------------------------------------------------------------------------

struct SystemPrediction {
  double energy = 0;
  std::vector<double> atomic_energies;
  std::vector<Vec3<double>> forces;
  std::optional<Vec3<double>> dipole;
  std::optional<Mat3<double>> polarizability;
  std::optional<std::vector<Mat3<double>>> shieldings;
};

struct PredictOptions {
  bool forces = true;
  HeadSet heads{true, true, true, true}; // intersected with the config
};

// Evaluates a batch of systems as one disconnected graph. Scalar type T
// selects the arithmetic precision; results are returned in double.
template <class T = double>
std::vector<SystemPrediction> predict(std::span<const AtomicSystem *const> systems, const ParamStore &params,
                                      const ModelConfig &cfg, const PredictOptions &opt = {}) {
  const Batch batch = Batch::make(systems, cfg.cutoff);
  Tape<T> tape;
  ForwardOptions<T> fo;
  fo.heads = opt.heads;
  const ForwardResult<T> r = run_forward(tape, batch, params, cfg, fo);
  std::vector<SystemPrediction> out(batch.n_systems());
  const bool want_energy = opt.heads.energy && cfg.heads.energy;
  if (want_energy && opt.forces)
    tape.backward(sum_all(r.energy));
  const auto grad = want_energy && opt.forces ? tape.gradient(r.positions) : std::vector<T>{};
  for (std::size_t s = 0; s < out.size(); ++s) {
    auto &o = out[s];
    const std::size_t a0 = batch.atom_offset[s], a1 = batch.atom_offset[s + 1];
    if (want_energy) {
      o.energy = primal(r.energy.value()[s]);
      for (std::size_t i = a0; i < a1; ++i)
        o.atomic_energies.push_back(primal(r.atomic_energy.value()[i]));
      if (opt.forces)
        for (std::size_t i = a0; i < a1; ++i)
          o.forces.push_back({-primal(grad[3 * i]), -primal(grad[3 * i + 1]), -primal(grad[3 * i + 2])});
    }
    if (r.dipole.valid()) {
      const auto &v = r.dipole.value();
      o.dipole = Vec3<double>{primal(v[3 * s]), primal(v[3 * s + 1]), primal(v[3 * s + 2])};
    }
    if (r.polarizability.valid()) {
      Mat3<double> m;
      for (int k = 0; k < 9; ++k)
        m[k] = primal(r.polarizability.value()[9 * s + k]);
      o.polarizability = m;
    }
    if (r.shielding.valid()) {
      std::vector<Mat3<double>> sh;
      for (std::size_t i = a0; i < a1; ++i) {
        Mat3<double> m;
        for (int k = 0; k < 9; ++k)
          m[k] = primal(r.shielding.value()[9 * i + k]);
        sh.push_back(m);
      }
      o.shieldings = std::move(sh);
    }
  }
  return out;
}

template <class T = double>
SystemPrediction predict(const AtomicSystem &system, const ParamStore &params, const ModelConfig &cfg,
                         const PredictOptions &opt = {}) {
  const AtomicSystem *p = &system;
  return predict<T>(std::span<const AtomicSystem *const>(&p, 1), params, cfg, opt)[0];
}

// Total energy and per-atom contributions.
inline std::pair<double, std::vector<double>> energy(const AtomicSystem &system, const ParamStore &params,
                                                     const ModelConfig &cfg) {
  PredictOptions opt;
  opt.forces = false;
  opt.heads = HeadSet{true, false, false, false};
  SystemPrediction p = predict(system, params, cfg, opt);
  return {p.energy, std::move(p.atomic_energies)};
}

// -dU/dpositions.
inline std::vector<Vec3<double>> forces(const AtomicSystem &system, const ParamStore &params, const ModelConfig &cfg) {
  PredictOptions opt;
  opt.heads = HeadSet{true, false, false, false};
  return predict(system, params, cfg, opt).forces;
}

// Chemical shift proxy: mean trace of each shielding tensor.
inline std::vector<double> mean_traces(const std::vector<Mat3<double>> &shieldings) {
  std::vector<double> out;
  for (const auto &m : shieldings)
    out.push_back(mat3::trace(m) / 3.0);
  return out;
}

} // namespace tensornet
