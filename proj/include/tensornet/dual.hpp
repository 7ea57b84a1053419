#pragma once

// Forward-mode dual numbers v + d*eps with eps^2 = 0. Running the reverse-mode
// tape over Dual<double> yields directional derivatives of gradients, which is
// how the force term of the training loss is differentiated with respect to
// parameters.

#include <cmath>
#include <ostream>

namespace tensornet {

template <class T> struct Dual {
  T v{};
  T d{};

  constexpr Dual() = default;
  constexpr Dual(T value) : v(value) {} // NOLINT(google-explicit-constructor)
  constexpr Dual(T value, T tangent) : v(value), d(tangent) {}

  constexpr Dual &operator+=(const Dual &o) {
    v += o.v;
    d += o.d;
    return *this;
  }
  constexpr Dual &operator-=(const Dual &o) {
    v -= o.v;
    d -= o.d;
    return *this;
  }
  constexpr Dual &operator*=(const Dual &o) {
    d = d * o.v + v * o.d;
    v *= o.v;
    return *this;
  }
  constexpr Dual &operator/=(const Dual &o) {
    const T inv = T(1) / o.v;
    d = (d - v * inv * o.d) * inv;
    v *= inv;
    return *this;
  }
};

template <class T> constexpr Dual<T> operator-(const Dual<T> &a) { return {-a.v, -a.d}; }
template <class T> constexpr Dual<T> operator+(Dual<T> a, const Dual<T> &b) { return a += b; }
template <class T> constexpr Dual<T> operator-(Dual<T> a, const Dual<T> &b) { return a -= b; }
template <class T> constexpr Dual<T> operator*(const Dual<T> &a, const Dual<T> &b) {
  return {a.v * b.v, a.d * b.v + a.v * b.d};
}
template <class T> constexpr Dual<T> operator/(Dual<T> a, const Dual<T> &b) { return a /= b; }

template <class T> constexpr bool operator<(const Dual<T> &a, const Dual<T> &b) { return a.v < b.v; }
template <class T> constexpr bool operator>(const Dual<T> &a, const Dual<T> &b) { return a.v > b.v; }
template <class T> constexpr bool operator<=(const Dual<T> &a, const Dual<T> &b) { return a.v <= b.v; }
template <class T> constexpr bool operator>=(const Dual<T> &a, const Dual<T> &b) { return a.v >= b.v; }
template <class T> constexpr bool operator==(const Dual<T> &a, const Dual<T> &b) {
  return a.v == b.v && a.d == b.d;
}

template <class T> Dual<T> exp(const Dual<T> &a) {
  const T e = std::exp(a.v);
  return {e, e * a.d};
}
template <class T> Dual<T> cos(const Dual<T> &a) { return {std::cos(a.v), -std::sin(a.v) * a.d}; }
template <class T> Dual<T> sin(const Dual<T> &a) { return {std::sin(a.v), std::cos(a.v) * a.d}; }
template <class T> Dual<T> sqrt(const Dual<T> &a) {
  const T s = std::sqrt(a.v);
  return {s, a.d / (T(2) * s)};
}
template <class T> Dual<T> abs(const Dual<T> &a) { return a.v < T(0) ? -a : a; }
template <class T> bool isfinite(const Dual<T> &a) {
  return std::isfinite(a.v) && std::isfinite(a.d);
}

template <class T> std::ostream &operator<<(std::ostream &os, const Dual<T> &a) {
  return os << a.v << "+" << a.d << "e";
}

// Primal part of a scalar.
inline double primal(double x) { return x; }
inline double primal(float x) { return x; }
template <class T> double primal(const Dual<T> &x) { return primal(x.v); }

inline bool finite_value(double x) { return std::isfinite(x); }
inline bool finite_value(float x) { return std::isfinite(x); }
template <class T> bool finite_value(const Dual<T> &x) { return isfinite(x); }

} // namespace tensornet
