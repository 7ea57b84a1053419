#pragma once

// Cartesian rank-2 tensor algebra: irreducible decomposition into scalar (I),
// skew-symmetric vector (A) and symmetric traceless (S) parts, parity-safe
// products, invariant norms and group actions.
//
// A TensorFeature stores C channels of 3x3 matrices channel-major, each block
// row-major, so that channel mixing is a C x C matrix applied across blocks.

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "tensornet/error.hpp"

namespace tensornet {

template <class T> using Vec3 = std::array<T, 3>;
template <class T> using Mat3 = std::array<T, 9>;

// Double-precision tolerances are scaled by this factor when running in
// single precision.
template <class T>
inline constexpr double precision_scale = std::is_same_v<T, float> ? 1e4 : 1.0;

namespace mat3 {

template <class T> constexpr Mat3<T> zero() { return Mat3<T>{}; }

template <class T> constexpr Mat3<T> identity() {
  Mat3<T> m{};
  m[0] = m[4] = m[8] = T(1);
  return m;
}

template <class T> constexpr T trace(const Mat3<T> &m) {
  return m[0] + m[4] + m[8];
}

template <class T> constexpr Mat3<T> transpose(const Mat3<T> &m) {
  return {m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]};
}

template <class T> constexpr Mat3<T> mul(const Mat3<T> &a, const Mat3<T> &b) {
  Mat3<T> c{};
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) {
      const T aik = a[3 * i + k];
      for (int j = 0; j < 3; ++j)
        c[3 * i + j] += aik * b[3 * k + j];
    }
  return c;
}

template <class T> constexpr Mat3<T> add(const Mat3<T> &a, const Mat3<T> &b) {
  Mat3<T> c;
  for (int i = 0; i < 9; ++i)
    c[i] = a[i] + b[i];
  return c;
}

template <class T> constexpr Mat3<T> sub(const Mat3<T> &a, const Mat3<T> &b) {
  Mat3<T> c;
  for (int i = 0; i < 9; ++i)
    c[i] = a[i] - b[i];
  return c;
}

template <class T> constexpr Mat3<T> scale(const Mat3<T> &a, T s) {
  Mat3<T> c;
  for (int i = 0; i < 9; ++i)
    c[i] = a[i] * s;
  return c;
}

// Frobenius inner product Tr(a^T b).
template <class T> constexpr T dot(const Mat3<T> &a, const Mat3<T> &b) {
  T s{};
  for (int i = 0; i < 9; ++i)
    s += a[i] * b[i];
  return s;
}

template <class T> constexpr T det(const Mat3<T> &m) {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) -
         m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

template <class T> constexpr Vec3<T> apply(const Mat3<T> &m, const Vec3<T> &v) {
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
          m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

// Projections onto the three irreducible sectors. All three are orthogonal
// projections with respect to the Frobenius inner product, hence self-adjoint.
template <class T> constexpr Mat3<T> scalar_part(const Mat3<T> &x) {
  const T t = trace(x) / T(3);
  Mat3<T> m{};
  m[0] = m[4] = m[8] = t;
  return m;
}

template <class T> constexpr Mat3<T> skew_part(const Mat3<T> &x) {
  Mat3<T> m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      m[3 * i + j] = (x[3 * i + j] - x[3 * j + i]) / T(2);
  return m;
}

template <class T> constexpr Mat3<T> sym_traceless_part(const Mat3<T> &x) {
  const T t = trace(x) / T(3);
  Mat3<T> m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      m[3 * i + j] = (x[3 * i + j] + x[3 * j + i]) / T(2);
  m[0] -= t;
  m[4] -= t;
  m[8] -= t;
  return m;
}

// Skew-symmetric encoding of a vector:
//   [[0, vz, -vy], [-vz, 0, vx], [vy, -vx, 0]]
template <class T> constexpr Mat3<T> skew_from_vector(const Vec3<T> &v) {
  return {T(0), v[2], -v[1], -v[2], T(0), v[0], v[1], -v[0], T(0)};
}

// Inverse of skew_from_vector on skew input: (A23, A31, A12). Reads the
// antisymmetrized entries so it is exact on any skew matrix.
template <class T> constexpr Vec3<T> vector_of_skew(const Mat3<T> &a) {
  return {(a[5] - a[7]) / T(2), (a[6] - a[2]) / T(2), (a[1] - a[3]) / T(2)};
}

template <class T> constexpr Mat3<T> sym_traceless_outer(const Vec3<T> &v) {
  Mat3<T> m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      m[3 * i + j] = v[i] * v[j];
  const T t = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) / T(3);
  m[0] -= t;
  m[4] -= t;
  m[8] -= t;
  return m;
}

} // namespace mat3

// C channels of 3x3 matrices.
template <class T> class TensorFeature {
public:
  TensorFeature() = default;
  explicit TensorFeature(std::size_t channels) : channels_(channels), data_(9 * channels) {}
  TensorFeature(std::size_t channels, std::vector<T> data)
      : channels_(channels), data_(std::move(data)) {
    if (data_.size() != 9 * channels_)
      throw Error("TensorFeature: data size " + std::to_string(data_.size()) +
                  " does not match 9 * " + std::to_string(channels_));
  }

  static TensorFeature from_channels(std::span<const Mat3<T>> mats) {
    TensorFeature f(mats.size());
    for (std::size_t c = 0; c < mats.size(); ++c)
      f.set(c, mats[c]);
    return f;
  }

  std::size_t channels() const noexcept { return channels_; }

  Mat3<T> operator[](std::size_t c) const {
    Mat3<T> m;
    for (int k = 0; k < 9; ++k)
      m[k] = data_[9 * c + k];
    return m;
  }

  void set(std::size_t c, const Mat3<T> &m) {
    for (int k = 0; k < 9; ++k)
      data_[9 * c + k] = m[k];
  }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }

  bool is_finite() const {
    for (const T &v : data_)
      if (!std::isfinite(v))
        return false;
    return true;
  }

private:
  std::size_t channels_ = 0;
  std::vector<T> data_;
};

template <class T> struct IrrepsTriple {
  TensorFeature<T> I;
  TensorFeature<T> A;
  TensorFeature<T> S;

  std::size_t channels() const noexcept { return I.channels(); }
};

// Row-major dense weight matrix used for channel mixing.
template <class T> struct Dense {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  static Dense identity(std::size_t n) {
    Dense d{n, n, std::vector<T>(n * n)};
    for (std::size_t i = 0; i < n; ++i)
      d.data[i * n + i] = T(1);
    return d;
  }

  T operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

enum class GroupKind { rotation, improper };

// An element of O(3). Construction validates orthogonality.
template <class T> class GroupElement {
public:
  static GroupElement from_matrix(const Mat3<T> &m) {
    const double tol = 1e-12 * precision_scale<T>;
    const Mat3<T> mmt = mat3::mul(m, mat3::transpose(m));
    const Mat3<T> id = mat3::identity<T>();
    for (int k = 0; k < 9; ++k)
      if (!(std::abs(static_cast<double>(mmt[k] - id[k])) <= tol))
        throw Error("GroupElement: matrix is not orthogonal (|g g^T - Id| = " +
                    std::to_string(std::abs(static_cast<double>(mmt[k] - id[k]))) + ")");
    const double d = static_cast<double>(mat3::det(m));
    if (!(std::abs(std::abs(d) - 1.0) <= tol))
      throw Error("GroupElement: determinant " + std::to_string(d) + " is not +-1");
    return GroupElement(m, d > 0 ? GroupKind::rotation : GroupKind::improper);
  }

  static GroupElement identity() {
    return GroupElement(mat3::identity<T>(), GroupKind::rotation);
  }

  static GroupElement parity() {
    return GroupElement(mat3::scale(mat3::identity<T>(), T(-1)), GroupKind::improper);
  }

  const Mat3<T> &matrix() const noexcept { return m_; }
  GroupKind kind() const noexcept { return kind_; }

  Vec3<T> apply(const Vec3<T> &v) const { return mat3::apply(m_, v); }

  // this * other
  GroupElement compose(const GroupElement &other) const {
    const bool same = kind_ == other.kind_;
    return GroupElement(mat3::mul(m_, other.m_),
                        same ? GroupKind::rotation : GroupKind::improper);
  }

private:
  GroupElement(const Mat3<T> &m, GroupKind k) : m_(m), kind_(k) {}
  Mat3<T> m_;
  GroupKind kind_;
};

namespace detail {
inline void require_same_channels(std::size_t a, std::size_t b, const char *op) {
  if (a != b)
    throw Error(std::string(op) + ": channel mismatch (" + std::to_string(a) +
                " vs " + std::to_string(b) + ")");
}
} // namespace detail

template <class T> IrrepsTriple<T> decompose(const TensorFeature<T> &x) {
  if (!x.is_finite())
    throw Error("decompose: input contains non-finite values");
  const std::size_t n = x.channels();
  IrrepsTriple<T> t{TensorFeature<T>(n), TensorFeature<T>(n), TensorFeature<T>(n)};
  for (std::size_t c = 0; c < n; ++c) {
    const Mat3<T> m = x[c];
    t.I.set(c, mat3::scalar_part(m));
    t.A.set(c, mat3::skew_part(m));
    t.S.set(c, mat3::sym_traceless_part(m));
  }
  return t;
}

template <class T> TensorFeature<T> recompose(const IrrepsTriple<T> &t) {
  detail::require_same_channels(t.I.channels(), t.A.channels(), "recompose");
  detail::require_same_channels(t.I.channels(), t.S.channels(), "recompose");
  TensorFeature<T> x(t.channels());
  auto out = x.data();
  auto i = t.I.data(), a = t.A.data(), s = t.S.data();
  for (std::size_t k = 0; k < out.size(); ++k)
    out[k] = i[k] + a[k] + s[k];
  return x;
}

// Single-channel triple I = f Id, A = skew(v), S = v v^T - |v|^2/3 Id.
template <class T> IrrepsTriple<T> compose_from_vector(const Vec3<T> &v, T f_scalar) {
  IrrepsTriple<T> t{TensorFeature<T>(1), TensorFeature<T>(1), TensorFeature<T>(1)};
  t.I.set(0, mat3::scale(mat3::identity<T>(), f_scalar));
  t.A.set(0, mat3::skew_from_vector(v));
  t.S.set(0, mat3::sym_traceless_outer(v));
  return t;
}

template <class T> Vec3<T> vector_from_skew(const Mat3<T> &a) {
  const double tol = 1e-10 * precision_scale<T>;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const double s = std::abs(static_cast<double>(a[3 * i + j] + a[3 * j + i]));
      if (!(s <= tol))
        throw Error("vector_from_skew: matrix is not skew-symmetric (|A+A^T| = " +
                    std::to_string(s) + ")");
    }
  return {a[5], a[6], a[1]};
}

// Per channel XY + YX.
template <class T>
TensorFeature<T> sym_product(const TensorFeature<T> &x, const TensorFeature<T> &y) {
  detail::require_same_channels(x.channels(), y.channels(), "sym_product");
  TensorFeature<T> out(x.channels());
  for (std::size_t c = 0; c < x.channels(); ++c) {
    const Mat3<T> a = x[c], b = y[c];
    out.set(c, mat3::add(mat3::mul(a, b), mat3::mul(b, a)));
  }
  return out;
}

// Irreducible parts of XY + YX evaluated sector by sector:
//   I = 1/3 Tr(2 IxIy + AxAy + (AxAy)^T + SxSy + (SxSy)^T) Id
//   A = 2 Ix Ay + 2 Ax Iy + (AxSy - (AxSy)^T) + (AySx - (AySx)^T)
//   S = 2 Ix Sy + 2 Sx Iy + sym0(AxAy) + sym0(SxSy)
// where sym0(M) = M + M^T - 2/3 Tr(M) Id. The pseudovector brackets that cancel
// in the symmetrized product are not evaluated.
template <class T>
IrrepsTriple<T> irreps_of_sym_product(const IrrepsTriple<T> &x, const IrrepsTriple<T> &y) {
  detail::require_same_channels(x.channels(), y.channels(), "irreps_of_sym_product");
  detail::require_same_channels(x.I.channels(), x.A.channels(), "irreps_of_sym_product");
  detail::require_same_channels(x.I.channels(), x.S.channels(), "irreps_of_sym_product");
  detail::require_same_channels(y.I.channels(), y.A.channels(), "irreps_of_sym_product");
  detail::require_same_channels(y.I.channels(), y.S.channels(), "irreps_of_sym_product");
  using namespace mat3;
  const std::size_t n = x.channels();
  const Mat3<T> id = identity<T>();
  IrrepsTriple<T> out{TensorFeature<T>(n), TensorFeature<T>(n), TensorFeature<T>(n)};
  for (std::size_t c = 0; c < n; ++c) {
    const Mat3<T> ix = x.I[c], ax = x.A[c], sx = x.S[c];
    const Mat3<T> iy = y.I[c], ay = y.A[c], sy = y.S[c];
    const Mat3<T> ii = mul(ix, iy);
    const Mat3<T> aa = mul(ax, ay);
    const Mat3<T> ss = mul(sx, sy);
    const Mat3<T> as = mul(ax, sy);
    const Mat3<T> asr = mul(ay, sx);

    const T tr = trace(scale(ii, T(2))) + trace(add(aa, transpose(aa))) +
                 trace(add(ss, transpose(ss)));
    out.I.set(c, scale(id, tr / T(3)));

    Mat3<T> a = add(scale(mul(ix, ay), T(2)), scale(mul(ax, iy), T(2)));
    a = add(a, sub(as, transpose(as)));
    a = add(a, sub(asr, transpose(asr)));
    out.A.set(c, a);

    auto sym0 = [&](const Mat3<T> &m) {
      return sub(add(m, transpose(m)), scale(id, T(2) * trace(m) / T(3)));
    };
    Mat3<T> s = add(scale(mul(ix, sy), T(2)), scale(mul(sx, iy), T(2)));
    s = add(s, sym0(aa));
    s = add(s, sym0(ss));
    out.S.set(c, s);
  }
  return out;
}

// Per channel Tr(X^T X), the squared Frobenius norm.
template <class T> std::vector<T> frobenius_norm_sq(const TensorFeature<T> &x) {
  std::vector<T> out(x.channels());
  for (std::size_t c = 0; c < x.channels(); ++c) {
    const Mat3<T> m = x[c];
    out[c] = mat3::dot(m, m);
  }
  return out;
}

namespace detail {
template <class T>
TensorFeature<T> mix_channels(const TensorFeature<T> &x, const Dense<T> &w, const char *name) {
  if (w.cols != x.channels() || w.data.size() != w.rows * w.cols)
    throw Error(std::string("linear_mix: weight ") + name + " has shape " +
                std::to_string(w.rows) + "x" + std::to_string(w.cols) + ", expected ?x" +
                std::to_string(x.channels()));
  TensorFeature<T> out(w.rows);
  auto o = out.data();
  auto in = x.data();
  for (std::size_t i = 0; i < w.rows; ++i)
    for (std::size_t j = 0; j < w.cols; ++j) {
      const T wij = w(i, j);
      for (int k = 0; k < 9; ++k)
        o[9 * i + k] += wij * in[9 * j + k];
    }
  return out;
}
} // namespace detail

// Independent channel mixes of each irreducible component. No bias terms.
template <class T>
IrrepsTriple<T> linear_mix(const IrrepsTriple<T> &t, const Dense<T> &w_i, const Dense<T> &w_a,
                           const Dense<T> &w_s) {
  if (w_i.rows != w_a.rows || w_i.rows != w_s.rows)
    throw Error("linear_mix: weight matrices disagree on output channel count");
  return {detail::mix_channels(t.I, w_i, "W_I"), detail::mix_channels(t.A, w_a, "W_A"),
          detail::mix_channels(t.S, w_s, "W_S")};
}

// Per channel Y + Y^2.
template <class T> TensorFeature<T> matrix_polynomial_update(const TensorFeature<T> &y) {
  if (!y.is_finite())
    throw Error("matrix_polynomial_update: input contains non-finite values");
  TensorFeature<T> out(y.channels());
  for (std::size_t c = 0; c < y.channels(); ++c) {
    const Mat3<T> m = y[c];
    out.set(c, mat3::add(m, mat3::mul(m, m)));
  }
  return out;
}

// Per channel g X g^T.
template <class T>
TensorFeature<T> group_action(const TensorFeature<T> &x, const GroupElement<T> &g) {
  const Mat3<T> &r = g.matrix();
  const Mat3<T> rt = mat3::transpose(r);
  TensorFeature<T> out(x.channels());
  for (std::size_t c = 0; c < x.channels(); ++c)
    out.set(c, mat3::mul(mat3::mul(r, x[c]), rt));
  return out;
}

template <class T>
IrrepsTriple<T> group_action(const IrrepsTriple<T> &t, const GroupElement<T> &g) {
  return {group_action(t.I, g), group_action(t.A, g), group_action(t.S, g)};
}

} // namespace tensornet
