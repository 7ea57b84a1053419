#pragma once

// Extended XYZ datasets, key = value configuration text and the TNETCKPT
// checkpoint format.

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "tensornet/elements.hpp"
#include "tensornet/error.hpp"
#include "tensornet/geometry.hpp"
#include "tensornet/model.hpp"
#include "tensornet/training.hpp"

namespace tensornet {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

// ---------------------------------------------------------------------------
// Numbers as text
// ---------------------------------------------------------------------------

// Shortest text that parses back to the same double.
inline std::string to_text(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos)
    return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r'))
      ++i;
    const std::size_t b = i;
    while (i < s.size() && s[i] != ' ' && s[i] != '\t' && s[i] != '\r')
      ++i;
    if (i > b)
      out.push_back(s.substr(b, i - b));
  }
  return out;
}

inline std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t b = 0;
  while (b <= text.size()) {
    const auto e = text.find('\n', b);
    if (e == std::string_view::npos) {
      if (b < text.size())
        lines.push_back(text.substr(b));
      break;
    }
    lines.push_back(text.substr(b, e - b));
    b = e + 1;
  }
  return lines;
}

inline std::string read_file(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

} // namespace detail

inline double parse_double(std::string_view s, std::size_t line) {
  s = detail::trim(s);
  if (!s.empty() && s[0] == '+')
    s.remove_prefix(1);
  double v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ParseError("malformed number '" + std::string(s) + "'", line);
  return v;
}

inline long long parse_int(std::string_view s, std::size_t line) {
  s = detail::trim(s);
  if (!s.empty() && s[0] == '+')
    s.remove_prefix(1);
  long long v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ParseError("malformed integer '" + std::string(s) + "'", line);
  return v;
}

// ---------------------------------------------------------------------------
// Extended XYZ
// ---------------------------------------------------------------------------

struct Dataset {
  std::vector<AtomicSystem> systems;
  std::string energy_unit; // labels only, never converted
  std::string length_unit;
  std::string path;
};

namespace detail {

// key=value pairs of a comment line; values may be double-quoted.
inline std::vector<std::pair<std::string, std::string>> header_pairs(std::string_view s, std::size_t line) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t i = 0;
  auto skip_ws = [&] {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r'))
      ++i;
  };
  while (true) {
    skip_ws();
    if (i >= s.size())
      break;
    const std::size_t kb = i;
    while (i < s.size() && s[i] != '=' && s[i] != ' ' && s[i] != '\t' && s[i] != '\r')
      ++i;
    std::string key(s.substr(kb, i - kb));
    if (i >= s.size() || s[i] != '=') {
      out.emplace_back(std::move(key), std::string()); // bare word
      continue;
    }
    ++i; // '='
    std::string value;
    if (i < s.size() && (s[i] == '"' || s[i] == '\'')) {
      const char q = s[i++];
      const auto e = s.find(q, i);
      if (e == std::string_view::npos)
        throw ParseError("unterminated quote in value of '" + key + "'", line);
      value = std::string(s.substr(i, e - i));
      i = e + 1;
    } else {
      const std::size_t vb = i;
      while (i < s.size() && s[i] != ' ' && s[i] != '\t' && s[i] != '\r')
        ++i;
      value = std::string(s.substr(vb, i - vb));
    }
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

inline std::string lower(std::string s) {
  for (char &c : s)
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

template <std::size_t N> std::array<double, N> parse_floats(std::string_view v, const std::string &key, std::size_t line) {
  const auto tok = split_ws(v);
  if (tok.size() != N)
    throw ParseError("'" + key + "' needs " + std::to_string(N) + " numbers, got " + std::to_string(tok.size()), line);
  std::array<double, N> out{};
  for (std::size_t k = 0; k < N; ++k)
    out[k] = parse_double(tok[k], line);
  return out;
}

} // namespace detail

// Frames: atom count; key=value header (energy, dipole="x y z",
// polarizability="9 values row-major"; other keys are ignored); N body lines
// `symbol x y z [fx fy fz] [9 shielding values]`.
inline Dataset parse_extxyz_text(std::string_view text, std::string path = "<memory>") {
  Dataset ds;
  ds.path = std::move(path);
  const auto lines = detail::split_lines(text);
  std::size_t li = 0;
  while (li < lines.size()) {
    if (detail::trim(lines[li]).empty()) {
      ++li;
      continue;
    }
    const std::size_t count_line = li + 1;
    const long long n = parse_int(lines[li], count_line);
    if (n <= 0)
      throw ParseError("atom count must be positive", count_line);
    if (li + 1 >= lines.size())
      throw ParseError("frame header line missing", count_line + 1);
    AtomicSystem sys;
    const std::size_t header_line = li + 2;
    for (const auto &[key, value] : detail::header_pairs(lines[li + 1], header_line)) {
      const std::string k = detail::lower(key);
      if (k == "energy")
        sys.energy = parse_double(value, header_line);
      else if (k == "dipole")
        sys.dipole = detail::parse_floats<3>(value, key, header_line);
      else if (k == "polarizability")
        sys.polarizability = detail::parse_floats<9>(value, key, header_line);
    }
    li += 2;
    std::size_t columns = 0;
    std::vector<Vec3<double>> forces;
    std::vector<Mat3<double>> shield;
    for (long long a = 0; a < n; ++a, ++li) {
      if (li >= lines.size())
        throw ParseError("frame declares " + std::to_string(n) + " atoms but has only " + std::to_string(a) +
                             " body lines",
                         count_line);
      const std::size_t ln = li + 1;
      const auto tok = detail::split_ws(lines[li]);
      if (tok.size() != 4 && tok.size() != 7 && tok.size() != 13 && tok.size() != 16)
        throw ParseError("expected 4, 7, 13 or 16 columns, got " + std::to_string(tok.size()), ln);
      if (a == 0)
        columns = tok.size();
      else if (tok.size() != columns)
        throw ParseError("column count differs from the frame's first atom", ln);
      std::string sym(tok[0]);
      if (!sym.empty()) {
        sym[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(sym[0])));
        for (std::size_t k = 1; k < sym.size(); ++k)
          sym[k] = static_cast<char>(std::tolower(static_cast<unsigned char>(sym[k])));
      }
      const auto z = atomic_number_of(sym);
      if (!z)
        throw ParseError("unknown element symbol '" + std::string(tok[0]) + "'", ln);
      sys.atomic_numbers.push_back(*z);
      sys.positions.push_back({parse_double(tok[1], ln), parse_double(tok[2], ln), parse_double(tok[3], ln)});
      std::size_t c = 4;
      if (columns == 7 || columns == 16) {
        forces.push_back({parse_double(tok[4], ln), parse_double(tok[5], ln), parse_double(tok[6], ln)});
        c = 7;
      }
      if (columns >= 13) {
        Mat3<double> m;
        for (int k = 0; k < 9; ++k)
          m[k] = parse_double(tok[c + k], ln);
        shield.push_back(m);
      }
    }
    if (columns == 7 || columns == 16)
      sys.forces = std::move(forces);
    if (columns >= 13)
      sys.shieldings = std::move(shield);
    try {
      sys.validate();
    } catch (const Error &e) {
      throw ParseError(e.what(), count_line);
    }
    ds.systems.push_back(std::move(sys));
  }
  if (ds.systems.empty())
    throw ParseError("no frames", 1);
  return ds;
}

inline Dataset parse_extxyz(const std::string &path) { return parse_extxyz_text(detail::read_file(path), path); }

inline void write_extxyz(std::ostream &os, std::span<const AtomicSystem> systems) {
  for (const auto &s : systems) {
    os << s.size() << "\n";
    os << "Properties=species:S:1:pos:R:3";
    if (s.forces)
      os << ":forces:R:3";
    if (s.shieldings)
      os << ":shielding:R:9";
    if (s.energy)
      os << " energy=" << to_text(*s.energy);
    if (s.dipole)
      os << " dipole=\"" << to_text((*s.dipole)[0]) << " " << to_text((*s.dipole)[1]) << " "
         << to_text((*s.dipole)[2]) << "\"";
    if (s.polarizability) {
      os << " polarizability=\"";
      for (int k = 0; k < 9; ++k)
        os << (k ? " " : "") << to_text((*s.polarizability)[k]);
      os << "\"";
    }
    os << "\n";
    for (std::size_t i = 0; i < s.size(); ++i) {
      os << element_name(s.atomic_numbers[i]);
      for (double x : s.positions[i])
        os << " " << to_text(x);
      if (s.forces)
        for (double x : (*s.forces)[i])
          os << " " << to_text(x);
      if (s.shieldings)
        for (double x : (*s.shieldings)[i])
          os << " " << to_text(x);
      os << "\n";
    }
  }
}

inline void write_extxyz(const std::string &path, std::span<const AtomicSystem> systems) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw Error("cannot write '" + path + "'");
  write_extxyz(out, systems);
}

// ---------------------------------------------------------------------------
// Configuration text
// ---------------------------------------------------------------------------

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string energy_unit;
  std::string length_unit;
};

namespace detail {

inline bool parse_bool(std::string_view v, std::size_t line) {
  if (v == "true" || v == "1" || v == "yes")
    return true;
  if (v == "false" || v == "0" || v == "no")
    return false;
  throw ParseError("expected true or false, got '" + std::string(v) + "'", line);
}

inline std::size_t parse_count(std::string_view v, std::size_t line) {
  const long long n = parse_int(v, line);
  if (n < 0)
    throw ParseError("expected a non-negative integer, got '" + std::string(v) + "'", line);
  return static_cast<std::size_t>(n);
}

inline HeadSet parse_heads(std::string_view v, std::size_t line) {
  HeadSet h{false, false, false, false};
  std::string s(v);
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto t = trim(item);
    if (t == "energy")
      h.energy = true;
    else if (t == "dipole")
      h.dipole = true;
    else if (t == "polarizability")
      h.polarizability = true;
    else if (t == "shielding")
      h.shielding = true;
    else if (!t.empty() && t != "none")
      throw ParseError("unknown head '" + std::string(t) + "'", line);
  }
  return h;
}

inline std::string format_heads(const HeadSet &h) {
  std::string s;
  auto add = [&](bool on, const char *name) {
    if (on)
      s += (s.empty() ? "" : ",") + std::string(name);
  };
  add(h.energy, "energy");
  add(h.dipole, "dipole");
  add(h.polarizability, "polarizability");
  add(h.shielding, "shielding");
  return s.empty() ? "none" : s;
}

// "H:1,C:5.98" -> {1: 1, 6: 5.98}
inline std::map<int, double> parse_element_map(std::string_view v, std::size_t line) {
  std::map<int, double> out;
  std::string s(v);
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto t = trim(item);
    if (t.empty() || t == "none")
      continue;
    const auto colon = t.find(':');
    if (colon == std::string_view::npos)
      throw ParseError("expected element:value, got '" + std::string(t) + "'", line);
    const auto z = atomic_number_of(trim(t.substr(0, colon)));
    if (!z)
      throw ParseError("unknown element symbol '" + std::string(trim(t.substr(0, colon))) + "'", line);
    out[*z] = parse_double(t.substr(colon + 1), line);
  }
  return out;
}

inline std::string format_element_map(const std::map<int, double> &m) {
  std::string s;
  for (const auto &[z, v] : m)
    s += (s.empty() ? "" : ",") + element_name(z) + ":" + to_text(v);
  return s.empty() ? "none" : s;
}

} // namespace detail

struct ParsedConfig {
  RunConfig run;
  std::map<std::string, std::string> extra; // "state.*" and "metrics.*" keys
};

// `key = value` lines; '#' starts a comment. Unknown keys are errors unless
// allow_extra accepts the state.* and metrics.* keys written by checkpoints.
inline ParsedConfig parse_config_text(std::string_view text, bool allow_extra = false) {
  ParsedConfig pc;
  RunConfig &rc = pc.run;
  ModelConfig &m = rc.model;
  TrainConfig &t = rc.train;
  std::map<std::string, std::size_t> seen;
  std::optional<std::pair<std::string, std::size_t>> atom_ref;
  const auto lines = detail::split_lines(text);
  for (std::size_t li = 0; li < lines.size(); ++li) {
    const std::size_t ln = li + 1;
    std::string_view l = lines[li];
    if (const auto h = l.find('#'); h != std::string_view::npos)
      l = l.substr(0, h);
    l = detail::trim(l);
    if (l.empty())
      continue;
    const auto eq = l.find('=');
    if (eq == std::string_view::npos)
      throw ParseError("expected 'key = value'", ln);
    const std::string key(detail::trim(l.substr(0, eq)));
    const std::string_view v = detail::trim(l.substr(eq + 1));
    if (key.empty())
      throw ParseError("missing key", ln);
    if (seen.count(key))
      throw ParseError("duplicate key '" + key + "' (first on line " + std::to_string(seen[key]) + ")", ln);
    seen[key] = ln;

    if (key == "channels")
      m.channels = detail::parse_count(v, ln);
    else if (key == "n_rbf")
      m.n_rbf = detail::parse_count(v, ln);
    else if (key == "cutoff")
      m.cutoff = parse_double(v, ln);
    else if (key == "n_layers")
      m.n_layers = detail::parse_count(v, ln);
    else if (key == "group") {
      if (v == "O3")
        m.group = Group::O3;
      else if (v == "SO3")
        m.group = Group::SO3;
      else
        throw ParseError("group must be O3 or SO3, got '" + std::string(v) + "'", ln);
    } else if (key == "max_atomic_number")
      m.max_atomic_number = static_cast<int>(parse_int(v, ln));
    else if (key == "heads")
      m.heads = detail::parse_heads(v, ln);
    else if (key == "energy_scale")
      m.energy_scale = parse_double(v, ln);
    else if (key == "energy_shift")
      m.energy_shift = parse_double(v, ln);
    else if (key == "atom_ref")
      atom_ref = std::make_pair(std::string(v), ln);
    else if (key == "shielding_weights")
      m.shielding_weights = detail::parse_element_map(v, ln);
    else if (key == "batch_size")
      t.batch_size = detail::parse_count(v, ln);
    else if (key == "lr_init")
      t.lr_init = parse_double(v, ln);
    else if (key == "warmup_steps")
      t.warmup_steps = detail::parse_count(v, ln);
    else if (key == "plateau_patience")
      t.plateau_patience = detail::parse_count(v, ln);
    else if (key == "plateau_factor")
      t.plateau_factor = parse_double(v, ln);
    else if (key == "lr_min")
      t.lr_min = parse_double(v, ln);
    else if (key == "weight_energy")
      t.loss_weights.energy = parse_double(v, ln);
    else if (key == "weight_forces")
      t.loss_weights.forces = parse_double(v, ln);
    else if (key == "weight_dipole")
      t.loss_weights.dipole = parse_double(v, ln);
    else if (key == "weight_polarizability")
      t.loss_weights.polarizability = parse_double(v, ln);
    else if (key == "weight_shielding")
      t.loss_weights.shielding = parse_double(v, ln);
    else if (key == "ema_weight")
      t.ema_weight = parse_double(v, ln);
    else if (key == "grad_clip_norm")
      t.grad_clip_norm = parse_double(v, ln);
    else if (key == "max_epochs")
      t.max_epochs = detail::parse_count(v, ln);
    else if (key == "max_steps")
      t.max_steps = detail::parse_count(v, ln);
    else if (key == "early_stop_patience")
      t.early_stop_patience = detail::parse_count(v, ln);
    else if (key == "n_val")
      t.n_val = detail::parse_count(v, ln);
    else if (key == "standardize_energy")
      t.standardize_energy = detail::parse_bool(v, ln);
    else if (key == "seed")
      t.seed = static_cast<std::uint64_t>(parse_int(v, ln));
    else if (key == "energy_unit")
      rc.energy_unit = std::string(v);
    else if (key == "length_unit")
      rc.length_unit = std::string(v);
    else if (allow_extra && (key.rfind("state.", 0) == 0 || key.rfind("metrics.", 0) == 0))
      pc.extra[key] = std::string(v);
    else
      throw ParseError("unknown key '" + key + "'", ln);
  }
  if (atom_ref) {
    const auto refs = detail::parse_element_map(atom_ref->first, atom_ref->second);
    if (refs.empty())
      m.atom_ref.clear();
    else {
      if (m.max_atomic_number < 1)
        throw ParseError("atom_ref needs max_atomic_number >= 1", atom_ref->second);
      m.atom_ref.assign(static_cast<std::size_t>(m.max_atomic_number) + 1, 0.0);
      for (const auto &[z, v] : refs) {
        if (z > m.max_atomic_number)
          throw ParseError("atom_ref element " + element_name(z) + " exceeds max_atomic_number", atom_ref->second);
        m.atom_ref[z] = v;
      }
    }
  }
  return pc;
}

inline RunConfig parse_config_file(const std::string &path) {
  return parse_config_text(detail::read_file(path)).run;
}

// Canonical text: every key, fixed order, shortest round-trip numbers.
inline std::string format_config(const RunConfig &rc, const std::map<std::string, std::string> &extra = {}) {
  const ModelConfig &m = rc.model;
  const TrainConfig &t = rc.train;
  std::ostringstream os;
  auto kv = [&](const char *k, const std::string &v) { os << k << " = " << v << "\n"; };
  kv("channels", std::to_string(m.channels));
  kv("n_rbf", std::to_string(m.n_rbf));
  kv("cutoff", to_text(m.cutoff));
  kv("n_layers", std::to_string(m.n_layers));
  kv("group", to_string(m.group));
  kv("max_atomic_number", std::to_string(m.max_atomic_number));
  kv("heads", detail::format_heads(m.heads));
  kv("energy_scale", to_text(m.energy_scale));
  kv("energy_shift", to_text(m.energy_shift));
  std::map<int, double> refs;
  for (std::size_t z = 1; z < m.atom_ref.size(); ++z)
    if (m.atom_ref[z] != 0.0)
      refs[static_cast<int>(z)] = m.atom_ref[z];
  kv("atom_ref", detail::format_element_map(refs));
  kv("shielding_weights", detail::format_element_map(m.shielding_weights));
  kv("batch_size", std::to_string(t.batch_size));
  kv("lr_init", to_text(t.lr_init));
  kv("warmup_steps", std::to_string(t.warmup_steps));
  kv("plateau_patience", std::to_string(t.plateau_patience));
  kv("plateau_factor", to_text(t.plateau_factor));
  kv("lr_min", to_text(t.lr_min));
  kv("weight_energy", to_text(t.loss_weights.energy));
  kv("weight_forces", to_text(t.loss_weights.forces));
  kv("weight_dipole", to_text(t.loss_weights.dipole));
  kv("weight_polarizability", to_text(t.loss_weights.polarizability));
  kv("weight_shielding", to_text(t.loss_weights.shielding));
  kv("ema_weight", to_text(t.ema_weight));
  kv("grad_clip_norm", to_text(t.grad_clip_norm));
  kv("max_epochs", std::to_string(t.max_epochs));
  kv("max_steps", std::to_string(t.max_steps));
  kv("early_stop_patience", std::to_string(t.early_stop_patience));
  kv("n_val", std::to_string(t.n_val));
  kv("standardize_energy", t.standardize_energy ? "true" : "false");
  kv("seed", std::to_string(t.seed));
  if (!rc.energy_unit.empty())
    kv("energy_unit", rc.energy_unit);
  if (!rc.length_unit.empty())
    kv("length_unit", rc.length_unit);
  for (const auto &[k, v] : extra)
    kv(k.c_str(), v);
  return os.str();
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr char checkpoint_magic[8] = {'T', 'N', 'E', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t checkpoint_version = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1, i64 = 2 };

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

inline std::string to_string(DType d) {
  switch (d) {
  case DType::f32:
    return "f32";
  case DType::f64:
    return "f64";
  case DType::i64:
    return "i64";
  }
  return "?";
}

// Raw little-endian payload plus its type and shape.
struct Array {
  std::string name;
  DType dtype = DType::f64;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> bytes;

  std::uint64_t count() const {
    std::uint64_t n = 1;
    for (auto d : dims)
      n *= d;
    return n;
  }

  static Array f64(std::string name, std::vector<std::uint64_t> dims, std::span<const double> values) {
    Array a{std::move(name), DType::f64, std::move(dims), {}};
    if (a.count() != values.size())
      throw Error("Array '" + a.name + "': value count does not match dims");
    a.bytes.resize(8 * values.size());
    for (std::size_t k = 0; k < values.size(); ++k) {
      const auto u = std::bit_cast<std::uint64_t>(values[k]);
      for (int b = 0; b < 8; ++b)
        a.bytes[8 * k + b] = static_cast<std::uint8_t>(u >> (8 * b));
    }
    return a;
  }

  std::vector<double> to_f64() const {
    const std::size_t n = static_cast<std::size_t>(count());
    std::vector<double> out(n);
    for (std::size_t k = 0; k < n; ++k) {
      if (dtype == DType::f64) {
        std::uint64_t u = 0;
        for (int b = 0; b < 8; ++b)
          u |= static_cast<std::uint64_t>(bytes[8 * k + b]) << (8 * b);
        out[k] = std::bit_cast<double>(u);
      } else if (dtype == DType::f32) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b)
          u |= static_cast<std::uint32_t>(bytes[4 * k + b]) << (8 * b);
        out[k] = std::bit_cast<float>(u);
      } else {
        std::uint64_t u = 0;
        for (int b = 0; b < 8; ++b)
          u |= static_cast<std::uint64_t>(bytes[8 * k + b]) << (8 * b);
        out[k] = static_cast<double>(std::bit_cast<std::int64_t>(u));
      }
    }
    return out;
  }
};

struct Checkpoint {
  std::uint32_t version = checkpoint_version;
  std::string config_text; // canonical RunConfig text plus state.* / metrics.* keys
  std::vector<Array> arrays;

  const Array *find(const std::string &name) const {
    for (const auto &a : arrays)
      if (a.name == name)
        return &a;
    return nullptr;
  }
};

namespace detail {

class Writer {
public:
  void bytes(const void *p, std::size_t n) {
    const auto *b = static_cast<const std::uint8_t *>(p);
    out.insert(out.end(), b, b + n);
  }
  template <class U> void uint(U v) {
    for (std::size_t b = 0; b < sizeof(U); ++b)
      out.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * b)));
  }
  std::vector<std::uint8_t> out;
};

class Reader {
public:
  explicit Reader(std::span<const std::uint8_t> d) : data(d) {}
  void need(std::size_t n, const char *what) {
    if (data.size() - pos < n)
      throw Error(std::string("checkpoint: truncated file (reading ") + what + ")");
  }
  template <class U> U uint(const char *what) {
    need(sizeof(U), what);
    std::uint64_t v = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b)
      v |= static_cast<std::uint64_t>(data[pos + b]) << (8 * b);
    pos += sizeof(U);
    return static_cast<U>(v);
  }
  std::span<const std::uint8_t> take(std::size_t n, const char *what) {
    need(n, what);
    auto s = data.subspan(pos, n);
    pos += n;
    return s;
  }
  std::span<const std::uint8_t> data;
  std::size_t pos = 0;
};

} // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint &c) {
  detail::Writer w;
  w.bytes(checkpoint_magic, 8);
  w.uint<std::uint32_t>(c.version);
  if (c.config_text.size() > UINT32_MAX)
    throw Error("checkpoint: config text too long");
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(c.config_text.size()));
  w.bytes(c.config_text.data(), c.config_text.size());
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(c.arrays.size()));
  for (const auto &a : c.arrays) {
    if (a.name.size() > UINT16_MAX)
      throw Error("checkpoint: array name too long");
    if (a.dims.size() > UINT8_MAX)
      throw Error("checkpoint: array '" + a.name + "' has too many dimensions");
    if (a.bytes.size() != a.count() * dtype_size(a.dtype))
      throw Error("checkpoint: array '" + a.name + "' payload does not match its shape");
    w.uint<std::uint16_t>(static_cast<std::uint16_t>(a.name.size()));
    w.bytes(a.name.data(), a.name.size());
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(a.dtype));
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(a.dims.size()));
    for (auto d : a.dims)
      w.uint<std::uint64_t>(d);
    w.bytes(a.bytes.data(), a.bytes.size());
  }
  return std::move(w.out);
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> data) {
  detail::Reader r(data);
  const auto magic = r.take(8, "magic");
  if (std::memcmp(magic.data(), checkpoint_magic, 8) != 0)
    throw Error("checkpoint: bad magic");
  Checkpoint c;
  c.version = r.uint<std::uint32_t>("version");
  if (c.version != checkpoint_version)
    throw Error("checkpoint: unsupported version " + std::to_string(c.version));
  const auto len = r.uint<std::uint32_t>("config length");
  const auto text = r.take(len, "config text");
  c.config_text.assign(text.begin(), text.end());
  const auto n = r.uint<std::uint32_t>("array count");
  for (std::uint32_t i = 0; i < n; ++i) {
    Array a;
    const auto nl = r.uint<std::uint16_t>("array name length");
    const auto nm = r.take(nl, "array name");
    a.name.assign(nm.begin(), nm.end());
    const auto dt = r.uint<std::uint8_t>("dtype");
    if (dt > 2)
      throw Error("checkpoint: array '" + a.name + "' has unknown dtype " + std::to_string(dt));
    a.dtype = static_cast<DType>(dt);
    const auto rank = r.uint<std::uint8_t>("rank");
    for (int k = 0; k < rank; ++k)
      a.dims.push_back(r.uint<std::uint64_t>("dims"));
    const std::uint64_t count = a.count();
    if (count > (data.size() - r.pos) / dtype_size(a.dtype))
      throw Error("checkpoint: truncated file (array '" + a.name + "')");
    const auto payload = r.take(static_cast<std::size_t>(count * dtype_size(a.dtype)), "array values");
    a.bytes.assign(payload.begin(), payload.end());
    c.arrays.push_back(std::move(a));
  }
  if (r.pos != data.size())
    throw Error("checkpoint: trailing bytes after the last array");
  return c;
}

inline void save_checkpoint(const std::string &path, const Checkpoint &c) {
  const auto bytes = encode_checkpoint(c);
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw Error("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out)
    throw Error("failed writing '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string &path) {
  const std::string s = detail::read_file(path);
  return decode_checkpoint(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t *>(s.data()), s.size()));
}

// ---------------------------------------------------------------------------
// Model and training state <-> checkpoint
// ---------------------------------------------------------------------------

namespace detail {

inline void add_params(Checkpoint &c, const ParamStore &p, const std::string &prefix) {
  for (const auto &e : p.entries())
    c.arrays.push_back(Array::f64(prefix + e.name, {e.shape.rows, e.shape.cols}, e.values));
}

inline ParamStore read_params(const Checkpoint &c, const std::string &prefix) {
  ParamStore p;
  for (const auto &a : c.arrays) {
    if (a.name.rfind(prefix, 0) != 0)
      continue;
    if (prefix.empty() && a.name.find('/') != std::string::npos)
      continue;
    if (a.dims.size() != 2)
      throw Error("checkpoint: parameter '" + a.name + "' must have rank 2");
    p.add(a.name.substr(prefix.size()), Shape{static_cast<std::size_t>(a.dims[0]), static_cast<std::size_t>(a.dims[1])},
          a.to_f64());
  }
  return p;
}

inline std::string state_value(const std::map<std::string, std::string> &extra, const std::string &key) {
  const auto it = extra.find(key);
  if (it == extra.end())
    throw Error("checkpoint: missing '" + key + "'");
  return it->second;
}

} // namespace detail

// Parameters only; enough for predict and check.
inline Checkpoint make_checkpoint(const RunConfig &rc, const ParamStore &params,
                                  const std::map<std::string, std::string> &extra = {}) {
  Checkpoint c;
  auto ex = extra;
  ex["state.param_seed"] = std::to_string(params.rng_seed);
  c.config_text = format_config(rc, ex);
  detail::add_params(c, params, "");
  return c;
}

struct LoadedModel {
  RunConfig config;
  ParamStore params;
  std::map<std::string, std::string> extra;
};

inline LoadedModel model_from_checkpoint(const Checkpoint &c) {
  ParsedConfig pc = parse_config_text(c.config_text, true);
  LoadedModel m{pc.run, detail::read_params(c, ""), pc.extra};
  if (auto it = pc.extra.find("state.param_seed"); it != pc.extra.end())
    m.params.rng_seed = static_cast<std::uint64_t>(parse_int(it->second, 0));
  // Every parameter the architecture needs must be present with its shape.
  const ParamStore ref = init_params(m.config.model, 0);
  for (const auto &e : ref.entries()) {
    if (!m.params.contains(e.name))
      throw Error("checkpoint: missing parameter '" + e.name + "'");
    if (m.params.at(e.name).shape != e.shape)
      throw Error("checkpoint: parameter '" + e.name + "' has shape " + to_string(m.params.at(e.name).shape) +
                  ", expected " + to_string(e.shape));
  }
  return m;
}

// Full training state: current and best parameters, Adam moments and the
// scheduler, so that training resumes exactly.
inline Checkpoint make_training_checkpoint(const TrainState &s, const RunConfig &rc) {
  RunConfig cfg = rc;
  cfg.model = s.model;
  std::map<std::string, std::string> ex;
  ex["state.param_seed"] = std::to_string(s.params.rng_seed);
  ex["state.step"] = std::to_string(s.step);
  ex["state.epoch"] = std::to_string(s.epoch);
  ex["state.adam_step"] = std::to_string(s.opt.step);
  ex["state.plateau_lr"] = to_text(s.scheduler.plateau_lr);
  ex["state.best"] = to_text(s.scheduler.best);
  ex["state.bad_epochs"] = std::to_string(s.scheduler.bad_epochs);
  ex["state.epochs_since_best"] = std::to_string(s.scheduler.epochs_since_best);
  ex["state.ema_energy"] = s.scheduler.ema_energy ? to_text(*s.scheduler.ema_energy) : "none";
  ex["state.best_metric"] = to_text(s.best_metric);
  if (!s.history.empty()) {
    ex["metrics.last_val_loss"] = to_text(s.history.back().val_loss);
    ex["metrics.last_train_loss"] = to_text(s.history.back().train_loss);
  }
  Checkpoint c;
  c.config_text = format_config(cfg, ex);
  detail::add_params(c, s.params, "");
  detail::add_params(c, s.best_params, "best/");
  for (std::size_t p = 0; p < s.params.size(); ++p) {
    const auto &e = s.params.at(p);
    c.arrays.push_back(Array::f64("adam_m/" + e.name, {e.shape.rows, e.shape.cols}, s.opt.m.at(p)));
    c.arrays.push_back(Array::f64("adam_v/" + e.name, {e.shape.rows, e.shape.cols}, s.opt.v.at(p)));
  }
  return c;
}

inline TrainState training_state_from_checkpoint(const Checkpoint &c) {
  const LoadedModel lm = model_from_checkpoint(c);
  const auto &ex = lm.extra;
  auto count = [&](const char *k) {
    return static_cast<std::size_t>(parse_int(detail::state_value(ex, k), 0));
  };
  auto real = [&](const char *k) { return parse_double(detail::state_value(ex, k), 0); };
  TrainState s;
  s.model = lm.config.model;
  s.params = lm.params;
  s.best_params = detail::read_params(c, "best/");
  s.best_params.rng_seed = s.params.rng_seed;
  s.step = count("state.step");
  s.epoch = count("state.epoch");
  s.opt = OptimState::for_params(s.params);
  s.opt.step = count("state.adam_step");
  for (std::size_t p = 0; p < s.params.size(); ++p) {
    const std::string &name = s.params.at(p).name;
    const Array *m = c.find("adam_m/" + name);
    const Array *v = c.find("adam_v/" + name);
    if (!m || !v)
      throw Error("checkpoint: missing optimizer state for '" + name + "'");
    s.opt.m[p] = m->to_f64();
    s.opt.v[p] = v->to_f64();
  }
  s.scheduler.plateau_lr = real("state.plateau_lr");
  s.scheduler.best = real("state.best");
  s.scheduler.bad_epochs = count("state.bad_epochs");
  s.scheduler.epochs_since_best = count("state.epochs_since_best");
  const std::string ema = detail::state_value(ex, "state.ema_energy");
  if (ema != "none")
    s.scheduler.ema_energy = parse_double(ema, 0);
  s.best_metric = real("state.best_metric");
  return s;
}

} // namespace tensornet
