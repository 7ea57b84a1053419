#pragma once

// Taped counterparts of the tensor algebra. A row of a tensor-valued Var holds
// C channels of 3x3 blocks (9C columns); vector-valued rows hold C blocks of 3.

#include <cmath>
#include <numbers>
#include <vector>

#include "tensornet/autodiff.hpp"
#include "tensornet/geometry.hpp"
#include "tensornet/tensor_algebra.hpp"

namespace tensornet {

namespace detail {

inline std::size_t channels_of(Shape s, const char *op) {
  if (s.cols % 9 != 0)
    throw Error(std::string(op) + ": expected 9C columns, got " + std::to_string(s.cols));
  return s.cols / 9;
}

// Applies a per-block linear map whose adjoint is itself (the irreducible
// projections).
template <class T, class F> Var<T> self_adjoint_blockwise(Var<T> x, F proj, const char *op) {
  channels_of(x.shape(), op);
  const auto &xv = x.value();
  std::vector<T> y(xv.size());
  Mat3<T> m;
  for (std::size_t b = 0; b < xv.size() / 9; ++b) {
    for (int k = 0; k < 9; ++k)
      m[k] = xv[9 * b + k];
    const Mat3<T> p = proj(m);
    for (int k = 0; k < 9; ++k)
      y[9 * b + k] = p[k];
  }
  return x.tape->record(
      x.shape(), std::move(y),
      [x, proj](Tape<T> &t, const std::vector<T> &g) {
        auto &gx = t.grad(x);
        Mat3<T> m;
        for (std::size_t b = 0; b < g.size() / 9; ++b) {
          for (int k = 0; k < 9; ++k)
            m[k] = g[9 * b + k];
          const Mat3<T> p = proj(m);
          for (int k = 0; k < 9; ++k)
            gx[9 * b + k] += p[k];
        }
      },
      op, x);
}

} // namespace detail

template <class T> Var<T> scalar_part(Var<T> x) {
  return detail::self_adjoint_blockwise(x, [](const Mat3<T> &m) { return mat3::scalar_part(m); },
                                        "scalar_part");
}

template <class T> Var<T> skew_part(Var<T> x) {
  return detail::self_adjoint_blockwise(x, [](const Mat3<T> &m) { return mat3::skew_part(m); },
                                        "skew_part");
}

template <class T> Var<T> sym_traceless_part(Var<T> x) {
  return detail::self_adjoint_blockwise(
      x, [](const Mat3<T> &m) { return mat3::sym_traceless_part(m); }, "sym_traceless_part");
}

template <class T> Var<T> transpose3(Var<T> x) {
  return detail::self_adjoint_blockwise(x, [](const Mat3<T> &m) { return mat3::transpose(m); },
                                        "transpose3");
}

template <class T> struct IrrepVars {
  Var<T> I, A, S;
};

template <class T> IrrepVars<T> decompose(Var<T> x) {
  return {scalar_part(x), skew_part(x), sym_traceless_part(x)};
}

template <class T> Var<T> recompose(const IrrepVars<T> &t) { return add(add(t.I, t.A), t.S); }

// Per block trace: r x 9C -> r x C.
template <class T> Var<T> trace3(Var<T> x) {
  const std::size_t c = detail::channels_of(x.shape(), "trace3");
  const auto &xv = x.value();
  std::vector<T> y(x.rows() * c);
  for (std::size_t b = 0; b < y.size(); ++b)
    y[b] = xv[9 * b] + xv[9 * b + 4] + xv[9 * b + 8];
  return x.tape->record(
      Shape{x.rows(), c}, std::move(y),
      [x](Tape<T> &t, const std::vector<T> &g) {
        auto &gx = t.grad(x);
        for (std::size_t b = 0; b < g.size(); ++b) {
          gx[9 * b] += g[b];
          gx[9 * b + 4] += g[b];
          gx[9 * b + 8] += g[b];
        }
      },
      "trace3", x);
}

// Per block Tr(X^T X): r x 9C -> r x C.
template <class T> Var<T> frobenius_norm_sq(Var<T> x) {
  const std::size_t c = detail::channels_of(x.shape(), "frobenius_norm_sq");
  const auto &xv = x.value();
  std::vector<T> y(x.rows() * c);
  for (std::size_t b = 0; b < y.size(); ++b) {
    T s{};
    for (int k = 0; k < 9; ++k)
      s += xv[9 * b + k] * xv[9 * b + k];
    y[b] = s;
  }
  return x.tape->record(
      Shape{x.rows(), c}, std::move(y),
      [x](Tape<T> &t, const std::vector<T> &g) {
        const auto &xv = x.value();
        auto &gx = t.grad(x);
        for (std::size_t b = 0; b < g.size(); ++b) {
          const T two_g = T(2) * g[b];
          for (int k = 0; k < 9; ++k)
            gx[9 * b + k] += two_g * xv[9 * b + k];
        }
      },
      "frobenius_norm_sq", x);
}

// Per block matrix product X Y.
template <class T> Var<T> matmul3(Var<T> x, Var<T> y) {
  detail::channels_of(x.shape(), "matmul3");
  detail::require_shape(y, x.shape(), "matmul3", "rhs");
  const auto &xv = x.value(), &yv = y.value();
  std::vector<T> out(xv.size());
  for (std::size_t b = 0; b < xv.size() / 9; ++b) {
    const T *a = &xv[9 * b];
    const T *c = &yv[9 * b];
    T *o = &out[9 * b];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        o[3 * i + j] = a[3 * i] * c[j] + a[3 * i + 1] * c[3 + j] + a[3 * i + 2] * c[6 + j];
  }
  return x.tape->record(
      x.shape(), std::move(out),
      [x, y](Tape<T> &t, const std::vector<T> &g) {
        const auto &xv = x.value(), &yv = y.value();
        const bool nx = t.requires_grad(x), ny = t.requires_grad(y);
        std::vector<T> *gx = nx ? &t.grad(x) : nullptr;
        std::vector<T> *gy = ny ? &t.grad(y) : nullptr;
        for (std::size_t b = 0; b < g.size() / 9; ++b) {
          const T *a = &xv[9 * b];
          const T *c = &yv[9 * b];
          const T *gb = &g[9 * b];
          // dX = G Y^T, dY = X^T G
          if (gx)
            for (int i = 0; i < 3; ++i)
              for (int k = 0; k < 3; ++k)
                (*gx)[9 * b + 3 * i + k] +=
                    gb[3 * i] * c[3 * k] + gb[3 * i + 1] * c[3 * k + 1] + gb[3 * i + 2] * c[3 * k + 2];
          if (gy)
            for (int k = 0; k < 3; ++k)
              for (int j = 0; j < 3; ++j)
                (*gy)[9 * b + 3 * k + j] +=
                    a[k] * gb[j] + a[3 + k] * gb[3 + j] + a[6 + k] * gb[6 + j];
        }
      },
      "matmul3", x, y);
}

// Mixes channels of blocks of size `block`: x is r x (Cin*block), w is
// Cout x Cin, result r x (Cout*block), y[r, o, k] = sum_i w[o, i] x[r, i, k].
template <class T> Var<T> channel_mix(Var<T> x, Var<T> w, std::size_t block) {
  const std::size_t rows = x.rows(), cin = w.cols(), cout = w.rows();
  if (x.cols() != cin * block)
    throw Error("channel_mix: input is " + to_string(x.shape()) + " but weight is " +
                to_string(w.shape()) + " with block " + std::to_string(block));
  // Channels-major layout turns the per-row products into one matrix product.
  const std::size_t rb = rows * block;
  auto to_channels_major = [rows, block](const std::vector<T> &v, std::size_t c) {
    std::vector<T> out(v.size());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t k = 0; k < block; ++k)
          out[i * rows * block + r * block + k] = v[(r * c + i) * block + k];
    return out;
  };
  auto from_channels_major = [rows, block](const std::vector<T> &v, std::size_t c, std::vector<T> &out) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t k = 0; k < block; ++k)
          out[(r * c + i) * block + k] += v[i * rows * block + r * block + k];
  };
  const std::vector<T> xt = to_channels_major(x.value(), cin);
  std::vector<T> yt(cout * rb);
  detail::gemm_nn(cout, rb, cin, w.value().data(), xt.data(), yt.data());
  std::vector<T> y(rows * cout * block);
  from_channels_major(yt, cout, y);
  return x.tape->record(
      Shape{rows, cout * block}, std::move(y),
      [x, w, rows, cin, cout, block, rb, to_channels_major, from_channels_major](Tape<T> &t, const std::vector<T> &g) {
        const std::vector<T> gt = to_channels_major(g, cout);
        if (t.requires_grad(x)) {
          const std::vector<T> wtr = detail::transposed(w.value(), cout, cin);
          std::vector<T> gxt(cin * rb);
          detail::gemm_nn(cin, rb, cout, wtr.data(), gt.data(), gxt.data());
          from_channels_major(gxt, cin, t.grad(x));
        }
        if (t.requires_grad(w)) {
          // x with rows (r, k) and columns i.
          const auto &xv = x.value();
          std::vector<T> xrk(rb * cin);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < cin; ++i)
              for (std::size_t k = 0; k < block; ++k)
                xrk[(r * block + k) * cin + i] = xv[(r * cin + i) * block + k];
          detail::gemm_nn(cout, cin, rb, gt.data(), xrk.data(), t.grad(w).data());
        }
      },
      "channel_mix", x, w);
}

// Irreducible coordinates of each 3x3 block, laid out per row as
// [I (C) | A (3C) | S (5C)]:
//   I: trace / 3
//   A: (a01, a02, a12) with a_jk = (x_jk - x_kj) / 2
//   S: (s01, s02, s12, x00 - I, x11 - I) with s_jk = (x_jk + x_kj) / 2
// Channel mixing in these coordinates costs 9 instead of 27 multiply-adds per
// channel pair.
template <class T> Var<T> irrep_coeffs(Var<T> x) {
  const std::size_t c = detail::channels_of(x.shape(), "irrep_coeffs"), rows = x.rows();
  const auto &xv = x.value();
  std::vector<T> y(xv.size());
  const T half(0.5), third = T(1) / T(3);
  for (std::size_t r = 0; r < rows; ++r) {
    const T *xr = &xv[r * 9 * c];
    T *ti = &y[r * 9 * c], *ta = ti + c, *ts = ti + 4 * c;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T *b = xr + 9 * ch;
      const T t = (b[0] + b[4] + b[8]) * third;
      ti[ch] = t;
      ta[3 * ch] = (b[1] - b[3]) * half;
      ta[3 * ch + 1] = (b[2] - b[6]) * half;
      ta[3 * ch + 2] = (b[5] - b[7]) * half;
      ts[5 * ch] = (b[1] + b[3]) * half;
      ts[5 * ch + 1] = (b[2] + b[6]) * half;
      ts[5 * ch + 2] = (b[5] + b[7]) * half;
      ts[5 * ch + 3] = b[0] - t;
      ts[5 * ch + 4] = b[4] - t;
    }
  }
  return x.tape->record(
      x.shape(), std::move(y),
      [x, rows, c](Tape<T> &t, const std::vector<T> &g) {
        auto &gx = t.grad(x);
        const T half(0.5), third = T(1) / T(3);
        for (std::size_t r = 0; r < rows; ++r) {
          T *gr = &gx[r * 9 * c];
          const T *gi = &g[r * 9 * c], *ga = gi + c, *gs = gi + 4 * c;
          for (std::size_t ch = 0; ch < c; ++ch) {
            T *b = gr + 9 * ch;
            const T *a = ga + 3 * ch, *s = gs + 5 * ch;
            const T common = (gi[ch] - s[3] - s[4]) * third;
            b[0] += common + s[3];
            b[4] += common + s[4];
            b[8] += common;
            b[1] += (s[0] + a[0]) * half;
            b[3] += (s[0] - a[0]) * half;
            b[2] += (s[1] + a[1]) * half;
            b[6] += (s[1] - a[1]) * half;
            b[5] += (s[2] + a[2]) * half;
            b[7] += (s[2] - a[2]) * half;
          }
        }
      },
      "irrep_coeffs", x);
}

// Inverse of irrep_coeffs.
template <class T> Var<T> irrep_expand(Var<T> y) {
  const std::size_t c = detail::channels_of(y.shape(), "irrep_expand"), rows = y.rows();
  const auto &yv = y.value();
  std::vector<T> x(yv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    T *xr = &x[r * 9 * c];
    const T *ti = &yv[r * 9 * c], *ta = ti + c, *ts = ti + 4 * c;
    for (std::size_t ch = 0; ch < c; ++ch) {
      T *b = xr + 9 * ch;
      const T *a = ta + 3 * ch, *s = ts + 5 * ch;
      b[0] = ti[ch] + s[3];
      b[4] = ti[ch] + s[4];
      b[8] = ti[ch] - s[3] - s[4];
      b[1] = s[0] + a[0];
      b[3] = s[0] - a[0];
      b[2] = s[1] + a[1];
      b[6] = s[1] - a[1];
      b[5] = s[2] + a[2];
      b[7] = s[2] - a[2];
    }
  }
  return y.tape->record(
      y.shape(), std::move(x),
      [y, rows, c](Tape<T> &t, const std::vector<T> &g) {
        auto &gy = t.grad(y);
        for (std::size_t r = 0; r < rows; ++r) {
          const T *gr = &g[r * 9 * c];
          T *gi = &gy[r * 9 * c], *ga = gi + c, *gs = gi + 4 * c;
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T *b = gr + 9 * ch;
            T *a = ga + 3 * ch, *s = gs + 5 * ch;
            gi[ch] += b[0] + b[4] + b[8];
            s[3] += b[0] - b[8];
            s[4] += b[4] - b[8];
            s[0] += b[1] + b[3];
            a[0] += b[1] - b[3];
            s[1] += b[2] + b[6];
            a[1] += b[2] - b[6];
            s[2] += b[5] + b[7];
            a[2] += b[5] - b[7];
          }
        }
      },
      "irrep_expand", y);
}

// Mixes each irreducible component of compact coordinates with its own C'xC
// weight; returns compact coordinates with C' channels.
template <class T> Var<T> mix_irrep_coeffs(Var<T> y, Var<T> w_i, Var<T> w_a, Var<T> w_s) {
  const std::size_t c = detail::channels_of(y.shape(), "mix_irrep_coeffs");
  return concat_cols({channel_mix(slice_cols(y, 0, c), w_i, 1), channel_mix(slice_cols(y, c, 3 * c), w_a, 3),
                      channel_mix(slice_cols(y, 4 * c, 5 * c), w_s, 5)});
}

// Scales the I, A and S coordinates of every channel by f_i, f_a, f_s (r x C each).
template <class T> Var<T> scale_irrep_coeffs(Var<T> y, Var<T> f_i, Var<T> f_a, Var<T> f_s) {
  const std::size_t c = detail::channels_of(y.shape(), "scale_irrep_coeffs");
  return concat_cols({scale_blocks(slice_cols(y, 0, c), f_i, 1), scale_blocks(slice_cols(y, c, 3 * c), f_a, 3),
                      scale_blocks(slice_cols(y, 4 * c, 5 * c), f_s, 5)});
}

// y[r, c, k] = f[r, c] * m[r, k]: broadcasts one 3x3 block per row across C
// channel weights.
template <class T> Var<T> channel_outer(Var<T> f, Var<T> m) {
  const std::size_t rows = f.rows(), c = f.cols();
  detail::require_shape(m, Shape{rows, 9}, "channel_outer", "block");
  const auto &fv = f.value(), &mv = m.value();
  std::vector<T> y(rows * c * 9);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (int k = 0; k < 9; ++k)
        y[(r * c + ch) * 9 + k] = fv[r * c + ch] * mv[r * 9 + k];
  return f.tape->record(
      Shape{rows, 9 * c}, std::move(y),
      [f, m, rows, c](Tape<T> &t, const std::vector<T> &g) {
        const auto &fv = f.value(), &mv = m.value();
        const bool nf = t.requires_grad(f), nm = t.requires_grad(m);
        std::vector<T> *gf = nf ? &t.grad(f) : nullptr;
        std::vector<T> *gm = nm ? &t.grad(m) : nullptr;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t ch = 0; ch < c; ++ch) {
            T s{};
            for (int k = 0; k < 9; ++k) {
              const T gk = g[(r * c + ch) * 9 + k];
              s += gk * mv[r * 9 + k];
              if (gm)
                (*gm)[r * 9 + k] += gk * fv[r * c + ch];
            }
            if (gf)
              (*gf)[r * c + ch] += s;
          }
      },
      "channel_outer", f, m);
}

// Rows of 3-vectors -> skew blocks in the [[0, vz, -vy], [-vz, 0, vx], [vy, -vx, 0]] layout.
template <class T> Var<T> skew_from_vectors(Var<T> v) {
  detail::require_shape(v, Shape{v.rows(), 3}, "skew_from_vectors", "input");
  const auto &vv = v.value();
  std::vector<T> y(v.rows() * 9);
  for (std::size_t r = 0; r < v.rows(); ++r) {
    const Mat3<T> a = mat3::skew_from_vector<T>({vv[3 * r], vv[3 * r + 1], vv[3 * r + 2]});
    for (int k = 0; k < 9; ++k)
      y[9 * r + k] = a[k];
  }
  return v.tape->record(
      Shape{v.rows(), 9}, std::move(y),
      [v](Tape<T> &t, const std::vector<T> &g) {
        auto &gv = t.grad(v);
        for (std::size_t r = 0; r < v.rows(); ++r) {
          const T *gb = &g[9 * r];
          gv[3 * r + 0] += gb[5] - gb[7];
          gv[3 * r + 1] += gb[6] - gb[2];
          gv[3 * r + 2] += gb[1] - gb[3];
        }
      },
      "skew_from_vectors", v);
}

// Rows of 3-vectors -> v v^T - |v|^2/3 Id.
template <class T> Var<T> sym_traceless_outer(Var<T> v) {
  detail::require_shape(v, Shape{v.rows(), 3}, "sym_traceless_outer", "input");
  const auto &vv = v.value();
  std::vector<T> y(v.rows() * 9);
  for (std::size_t r = 0; r < v.rows(); ++r) {
    const Mat3<T> s = mat3::sym_traceless_outer<T>({vv[3 * r], vv[3 * r + 1], vv[3 * r + 2]});
    for (int k = 0; k < 9; ++k)
      y[9 * r + k] = s[k];
  }
  return v.tape->record(
      Shape{v.rows(), 9}, std::move(y),
      [v](Tape<T> &t, const std::vector<T> &g) {
        const auto &vv = v.value();
        auto &gv = t.grad(v);
        for (std::size_t r = 0; r < v.rows(); ++r) {
          const T *gb = &g[9 * r];
          const T tr = gb[0] + gb[4] + gb[8];
          for (int a = 0; a < 3; ++a) {
            // d/dv_a of sum_ij g_ij (v_i v_j - delta_ij |v|^2 / 3)
            T s{};
            for (int j = 0; j < 3; ++j)
              s += (gb[3 * a + j] + gb[3 * j + a]) * vv[3 * r + j];
            gv[3 * r + a] += s - T(2) / T(3) * tr * vv[3 * r + a];
          }
        }
      },
      "sym_traceless_outer", v);
}

// Skew blocks -> C vectors per row (r x 9C -> r x 3C) reading (A23, A31, A12)
// of the antisymmetrized block.
template <class T> Var<T> vectors_of_skew(Var<T> x) {
  const std::size_t c = detail::channels_of(x.shape(), "vectors_of_skew");
  const auto &xv = x.value();
  std::vector<T> y(x.rows() * 3 * c);
  for (std::size_t b = 0; b < x.rows() * c; ++b) {
    Mat3<T> m;
    for (int k = 0; k < 9; ++k)
      m[k] = xv[9 * b + k];
    const Vec3<T> v = mat3::vector_of_skew(m);
    for (int k = 0; k < 3; ++k)
      y[3 * b + k] = v[k];
  }
  return x.tape->record(
      Shape{x.rows(), 3 * c}, std::move(y),
      [x, c](Tape<T> &t, const std::vector<T> &g) {
        auto &gx = t.grad(x);
        for (std::size_t b = 0; b < x.rows() * c; ++b) {
          const T h0 = g[3 * b] / T(2), h1 = g[3 * b + 1] / T(2), h2 = g[3 * b + 2] / T(2);
          gx[9 * b + 5] += h0;
          gx[9 * b + 7] -= h0;
          gx[9 * b + 6] += h1;
          gx[9 * b + 2] -= h1;
          gx[9 * b + 1] += h2;
          gx[9 * b + 3] -= h2;
        }
      },
      "vectors_of_skew", x);
}

// Euclidean norm of each row of an r x 3 input -> r x 1.
template <class T> Var<T> row_norms3(Var<T> v) {
  using std::sqrt;
  detail::require_shape(v, Shape{v.rows(), 3}, "row_norms3", "input");
  const auto &vv = v.value();
  std::vector<T> y(v.rows());
  for (std::size_t r = 0; r < v.rows(); ++r)
    y[r] = sqrt(vv[3 * r] * vv[3 * r] + vv[3 * r + 1] * vv[3 * r + 1] + vv[3 * r + 2] * vv[3 * r + 2]);
  return v.tape->record(
      Shape{v.rows(), 1}, y,
      [v, y](Tape<T> &t, const std::vector<T> &g) {
        const auto &vv = v.value();
        auto &gv = t.grad(v);
        for (std::size_t r = 0; r < v.rows(); ++r) {
          const T s = g[r] / y[r];
          for (int k = 0; k < 3; ++k)
            gv[3 * r + k] += s * vv[3 * r + k];
        }
      },
      "row_norms3", v);
}

// r x 1 distances -> r x d radial basis values.
template <class T> Var<T> rbf_expand(Var<T> r, const RadialBasis &basis) {
  using std::exp;
  detail::require_shape(r, Shape{r.rows(), 1}, "rbf_expand", "distances");
  const std::size_t d = basis.size;
  const auto &rv = r.value();
  std::vector<T> y(r.rows() * d), dy(r.rows() * d);
  for (std::size_t e = 0; e < r.rows(); ++e) {
    const T x = exp(-rv[e]);
    for (std::size_t k = 0; k < d; ++k) {
      const T diff = x - T(basis.mu[k]);
      const T v = exp(-T(basis.beta[k]) * diff * diff);
      y[e * d + k] = v;
      // d/dr = v * (-beta * 2 diff) * (-x)
      dy[e * d + k] = v * T(2 * basis.beta[k]) * diff * x;
    }
  }
  return r.tape->record(
      Shape{r.rows(), d}, std::move(y),
      [r, d, dy = std::move(dy)](Tape<T> &t, const std::vector<T> &g) {
        auto &gr = t.grad(r);
        for (std::size_t e = 0; e < r.rows(); ++e) {
          T s{};
          for (std::size_t k = 0; k < d; ++k)
            s += g[e * d + k] * dy[e * d + k];
          gr[e] += s;
        }
      },
      "rbf_expand", r);
}

// Cosine cutoff envelope on r x 1 distances.
template <class T> Var<T> cutoff_fn(Var<T> r, double cutoff) {
  using std::cos;
  using std::sin;
  detail::require_shape(r, Shape{r.rows(), 1}, "cutoff_fn", "distances");
  const auto &rv = r.value();
  std::vector<T> y(r.rows()), dy(r.rows());
  const double k = std::numbers::pi / cutoff;
  for (std::size_t e = 0; e < r.rows(); ++e) {
    if (rv[e] > T(cutoff)) {
      y[e] = T(0);
      dy[e] = T(0);
    } else {
      y[e] = T(0.5) * (cos(T(k) * rv[e]) + T(1));
      dy[e] = T(-0.5 * k) * sin(T(k) * rv[e]);
    }
  }
  return r.tape->record(
      r.shape(), std::move(y),
      [r, dy = std::move(dy)](Tape<T> &t, const std::vector<T> &g) {
        auto &gr = t.grad(r);
        for (std::size_t e = 0; e < g.size(); ++e)
          gr[e] += g[e] * dy[e];
      },
      "cutoff_fn", r);
}

} // namespace tensornet
