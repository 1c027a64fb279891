#include "cvc/graph.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace cvc {

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<Mat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MapC = Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
MapC<T> as_mat(const Tensor<T>& t) {
  return MapC<T>(t.data.data(), t.rows(), t.cols(),
                 Eigen::OuterStride<>(t.cols()));
}
template <typename T>
MapM<T> as_mat(Tensor<T>& t) {
  return MapM<T>(t.data.data(), t.rows(), t.cols(),
                 Eigen::OuterStride<>(t.cols()));
}

// Column block [c0, c0+w) of a [N, D] tensor, no copy.
template <typename T>
MapC<T> col_block(const Tensor<T>& t, int64_t c0, int64_t w) {
  return MapC<T>(t.data.data() + c0, t.rows(), w,
                 Eigen::OuterStride<>(t.cols()));
}
template <typename T>
MapM<T> col_block(Tensor<T>& t, int64_t c0, int64_t w) {
  return MapM<T>(t.data.data() + c0, t.rows(), w,
                 Eigen::OuterStride<>(t.cols()));
}

inline double sq(double x) { return x * x; }

}  // namespace

template <typename T>
void Graph<T>::accum(Value v, const Tensor<T>& g) {
  if (!needs(v)) return;
  Node& n = node(v);
  if (!n.grad_live) {
    n.grad = Tensor<T>::zeros(n.val.shape);
    n.grad_live = true;
  }
  for (int64_t i = 0; i < g.numel(); ++i) n.grad.data[i] += g.data[i];
}

template <typename T>
void Graph<T>::accum_at(Value v, int64_t offset, const T* g, int64_t n) {
  if (!needs(v)) return;
  Node& nd = node(v);
  if (!nd.grad_live) {
    nd.grad = Tensor<T>::zeros(nd.val.shape);
    nd.grad_live = true;
  }
  for (int64_t i = 0; i < n; ++i) nd.grad.data[offset + i] += g[i];
}

template <typename T>
void Graph<T>::backward(Value root) {
  check_dim(node(root).val.numel() == 1, "backward() root must be scalar");
  Node& r = node(root);
  if (!r.requires_grad) return;
  r.grad = Tensor<T>::full(r.val.shape, T(1));
  r.grad_live = true;
  for (int32_t i = root.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.grad_live && n.back) n.back();
  }
}

// ---- matmul ----

template <typename T>
typename Graph<T>::Value Graph<T>::matmul(Value a, Value b, bool ta, bool tb) {
  const Tensor<T>& A = val(a);
  const Tensor<T>& B = val(b);
  const int64_t ar = ta ? A.cols() : A.rows();
  const int64_t ac = ta ? A.rows() : A.cols();
  const int64_t br = tb ? B.cols() : B.rows();
  const int64_t bc = tb ? B.rows() : B.cols();
  check_dim(ac == br, "matmul inner dims mismatch: " + A.shape_str() + " x " +
                          B.shape_str());
  Tensor<T> out({ar, bc});
  {
    auto Am = as_mat(A);
    auto Bm = as_mat(B);
    auto Cm = as_mat(out);
    if (!ta && !tb)
      Cm.noalias() = Am * Bm;
    else if (ta && !tb)
      Cm.noalias() = Am.transpose() * Bm;
    else if (!ta && tb)
      Cm.noalias() = Am * Bm.transpose();
    else
      Cm.noalias() = Am.transpose() * Bm.transpose();
  }
  Value o = push(std::move(out), false, {a, b}, nullptr);
  if (!needs(o)) return o;
  node(o).back = [this, o, a, b, ta, tb]() {
    const Tensor<T>& G = grad_of(o);
    auto Gm = as_mat(G);
    if (needs(a)) {
      Tensor<T> da(val(a).shape);
      auto Bm = as_mat(val(b));
      auto Dm = as_mat(da);
      // dAe = G * Be^T, then undo the transpose on A.
      if (!ta)
        Dm.noalias() = tb ? (Gm * Bm).eval() : (Gm * Bm.transpose()).eval();
      else
        Dm.noalias() =
            tb ? (Bm.transpose() * Gm.transpose()).eval() : (Bm * Gm.transpose()).eval();
      accum(a, da);
    }
    if (needs(b)) {
      Tensor<T> db(val(b).shape);
      auto Am = as_mat(val(a));
      auto Dm = as_mat(db);
      if (!tb)
        Dm.noalias() = ta ? (Am * Gm).eval() : (Am.transpose() * Gm).eval();
      else
        Dm.noalias() =
            ta ? (Gm.transpose() * Am.transpose()).eval() : (Gm.transpose() * Am).eval();
      accum(b, db);
    }
  };
  return o;
}

// ---- elementwise and broadcast ----

template <typename T>
typename Graph<T>::Value Graph<T>::add(Value a, Value b) {
  check_dim(val(a).same_shape(val(b)), "add shape mismatch");
  Tensor<T> out = val(a);
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += val(b).data[i];
  Value o = push(std::move(out), false, {a, b}, nullptr);
  if (!needs(o)) return o;
  node(o).back = [this, o, a, b]() {
    accum(a, grad_of(o));
    accum(b, grad_of(o));
  };
  return o;
}

template <typename T>
typename Graph<T>::Value Graph<T>::sub(Value a, Value b) {
  check_dim(val(a).same_shape(val(b)), "sub shape mismatch");
  Tensor<T> out = val(a);
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] -= val(b).data[i];
  Value o = push(std::move(out), false, {a, b}, nullptr);
  if (!needs(o)) return o;
  node(o).back = [this, o, a, b]() {
    accum(a, grad_of(o));
    if (needs(b)) {
      Tensor<T> g = grad_of(o);
      for (auto& x : g.data) x = -x;
      accum(b, g);
    }
  };
  return o;
}

template <typename T>
typename Graph<T>::Value Graph<T>::mul(Value a, Value b) {
  check_dim(val(a).same_shape(val(b)), "mul shape mismatch");
  Tensor<T> out = val(a);
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= val(b).data[i];
  Value o = push(std::move(out), false, {a, b}, nullptr);
  if (!needs(o)) return o;
  node(o).back = [this, o, a, b]() {
    const Tensor<T>& G = grad_of(o);
    if (needs(a)) {
      Tensor<T> g = G;
      for (int64_t i = 0; i < g.numel(); ++i) g.data[i] *= val(b).data[i];
      accum(a, g);
    }
    if (needs(b)) {
      Tensor<T> g = G;
      for (int64_t i = 0; i < g.numel(); ++i) g.data[i] *= val(a).data[i];
      accum(b, g);
    }
  };
  return o;
}

template <typename T>
typename Graph<T>::Value Graph<T>::add_rowvec(Value x, Value v) {
  const Tensor<T>& X = val(x);
  const Tensor<T>& V = val(v);
  check_dim(V.numel() == X.cols(), "add_rowvec length mismatch");
  Tensor<T> out = X;
  const int64_t R = X.rows(), C = X.cols();
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < C; ++c) out.data[r * C + c] += V.data[c];
  Value o = push(std::move(out), false, {x, v}, nullptr);
  if (!needs(o)) return o;
  node(o).back = [this, o, x, v, R, C]() {
    const Tensor<T>& G = grad_of(o);
    accum(x, G);
    if (needs(v)) {
      Tensor<T> g(val(v).shape);
      for (int64_t r = 0; r < R; ++r)
        for (int64_t c = 0; c < C; ++c) g.data[c] += G.data[r * C + c];
      accum(v, g);
    }
  };
  return o;
}

template <typename T>
typename Graph<T>::Value Graph<T>::scale(Value x, T s) {
  Tensor<T> out = val(x);
  for (auto& v : out.data) v *= s;
  Value o = push(std::move(out), false, {x}, nullptr);
  if (!needs(o)) return o;
  node(o).back = [this, o, x, s]() {
    Tensor<T> g = grad_of(o);
    for (auto& v : g.data) v *= s;
    accum(x, g);
  };
  return o;
}

template <typename T>
typename Graph<T>::Value Graph<T>::exp(Value x) {
  Tensor<T> out = val(x);
  for (auto& v : out.data) v = std::exp(v);
  Value o = push(std::move(out), false, {x}, nullptr);
  if (!needs(o)) return o;
  node(o).back = [this, o, x]() {
    Tensor<T> g = grad_of(o);
    for (int64_t i = 0; i < g.numel(); ++i) g.data[i] *= val(o).data[i];
    accum(x, g);
  };
  return o;
}

template <typename T>
typename Graph<T>::Value Graph<T>::gelu(Value x) {
  static const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  static const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * T(M_PI));
  Tensor<T> out = val(x);
  for (auto& v : out.data)
    v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  Value o = push(std::move(out), false, {x}, nullptr);
  if (!needs(o)) return o;
  node(o).back = [this, o, x]() {
    Tensor<T> g = grad_of(o);
    for (int64_t i = 0; i < g.numel(); ++i) {
      const T v = val(x).data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      g.data[i] *= cdf + v * pdf;
    }
    accum(x, g);
  };
  return o;
}

template <typename T>
typename Graph<T>::Value Graph<T>::relu(Value x) {
  Tensor<T> out = val(x);
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  Value o = push(std::move(out), false, {x}, nullptr);
  if (!needs(o)) return o;
  node(o).back = [this, o, x]() {
    Tensor<T> g = grad_of(o);
    for (int64_t i = 0; i < g.numel(); ++i)
      if (val(x).data[i] <= T(0)) g.data[i] = T(0);
    accum(x, g);
  };
  return o;
}

// ---- layer norm ----

template <typename T>
typename Graph<T>::Value Graph<T>::layer_norm(Value x, Value gamma, Value beta,
                                              T eps) {
  const Tensor<T>& X = val(x);
  const int64_t R = X.rows(), C = X.cols();
  check_dim(C >= 1, "layer_norm needs at least one feature");
  check_dim(eps > T(0), "layer_norm eps must be > 0");
  check_dim(val(gamma).numel() == C && val(beta).numel() == C,
            "layer_norm affine length mismatch");
  auto xhat = std::make_shared<Tensor<T>>(X.shape);
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(R));
  Tensor<T> out(X.shape);
  const T* gam = val(gamma).data.data();
  const T* bet = val(beta).data.data();
  for (int64_t r = 0; r < R; ++r) {
    const T* row = &X.data[r * C];
    T mean = 0;
    for (int64_t c = 0; c < C; ++c) mean += row[c];
    mean /= T(C);
    T var = 0;
    for (int64_t c = 0; c < C; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= T(C);
    const T istd = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = istd;
    for (int64_t c = 0; c < C; ++c) {
      const T xh = (row[c] - mean) * istd;
      xhat->data[r * C + c] = xh;
      out.data[r * C + c] = gam[c] * xh + bet[c];
    }
  }
  Value o = push(std::move(out), false, {x, gamma, beta}, nullptr);
  if (!needs(o)) return o;
  node(o).back = [this, o, x, gamma, beta, xhat, inv_std, R, C]() {
    const Tensor<T>& G = grad_of(o);
    const T* gam = val(gamma).data.data();
    if (needs(gamma)) {
      Tensor<T> gg(val(gamma).shape);
      for (int64_t r = 0; r < R; ++r)
        for (int64_t c = 0; c < C; ++c)
          gg.data[c] += G.data[r * C + c] * xhat->data[r * C + c];
      accum(gamma, gg);
    }
    if (needs(beta)) {
      Tensor<T> gb(val(beta).shape);
      for (int64_t r = 0; r < R; ++r)
        for (int64_t c = 0; c < C; ++c) gb.data[c] += G.data[r * C + c];
      accum(beta, gb);
    }
    if (needs(x)) {
      Tensor<T> gx(val(x).shape);
      for (int64_t r = 0; r < R; ++r) {
        const T istd = (*inv_std)[r];
        T sum_dxh = 0, sum_dxh_xh = 0;
        for (int64_t c = 0; c < C; ++c) {
          const T dxh = G.data[r * C + c] * gam[c];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xhat->data[r * C + c];
        }
        for (int64_t c = 0; c < C; ++c) {
          const T dxh = G.data[r * C + c] * gam[c];
          const T xh = xhat->data[r * C + c];
          gx.data[r * C + c] =
              istd * (dxh - sum_dxh / T(C) - xh * sum_dxh_xh / T(C));
        }
      }
      accum(x, gx);
    }
  };
  return o;
}

// ---- multi-head attention core ----

template <typename T>
typename Graph<T>::Value Graph<T>::attention(Value q, Value k, Value v,
                                             int heads) {
  const Tensor<T>& Q = val(q);
  const Tensor<T>& K = val(k);
  const Tensor<T>& V = val(v);
  const int64_t D = Q.cols();
  check_dim(heads >= 1 && D % heads == 0, "attention dim not divisible by heads");
  check_dim(K.cols() == D && V.cols() == D, "attention Q/K/V width mismatch");
  check_dim(K.rows() == V.rows(), "attention K/V length mismatch");
  if (K.rows() == 0) throw DimError("attention over empty context");
  const int64_t Nq = Q.rows(), Nk = K.rows(), Dh = D / heads;
  const T att_scale = T(1) / std::sqrt(T(Dh));

  auto probs = std::make_shared<std::vector<Mat<T>>>();
  probs->reserve(heads);
  Tensor<T> out({Nq, D});
  for (int h = 0; h < heads; ++h) {
    auto Qh = col_block(Q, h * Dh, Dh);
    auto Kh = col_block(K, h * Dh, Dh);
    auto Vh = col_block(V, h * Dh, Dh);
    Mat<T> S = (Qh * Kh.transpose()) * att_scale;
    // row-stabilized softmax
    for (int64_t r = 0; r < Nq; ++r) {
      T m = S.row(r).maxCoeff();
      T z = 0;
      for (int64_t c = 0; c < Nk; ++c) {
        S(r, c) = std::exp(S(r, c) - m);
        z += S(r, c);
      }
      S.row(r) /= z;
    }
    col_block(out, h * Dh, Dh).noalias() = S * Vh;
    probs->push_back(std::move(S));
  }
  Value o = push(std::move(out), false, {q, k, v}, nullptr);
  if (!needs(o)) return o;
  node(o).back = [this, o, q, k, v, heads, Dh, att_scale, probs]() {
    const Tensor<T>& G = grad_of(o);
    const int64_t Nq = val(q).rows();
    Tensor<T> gq, gk, gv;
    if (needs(q)) gq = Tensor<T>::zeros(val(q).shape);
    if (needs(k)) gk = Tensor<T>::zeros(val(k).shape);
    if (needs(v)) gv = Tensor<T>::zeros(val(v).shape);
    for (int h = 0; h < heads; ++h) {
      const Mat<T>& A = (*probs)[h];
      auto Gh = col_block(G, h * Dh, Dh);
      auto Vh = col_block(val(v), h * Dh, Dh);
      if (needs(v)) col_block(gv, h * Dh, Dh).noalias() = A.transpose() * Gh;
      if (!needs(q) && !needs(k)) continue;
      Mat<T> dA = Gh * Vh.transpose();
      // softmax pullback: dS = A o (dA - rowsum(dA o A))
      Mat<T> dS = dA;
      for (int64_t r = 0; r < Nq; ++r) {
        T dot = A.row(r).dot(dA.row(r));
        dS.row(r) = A.row(r).cwiseProduct((dA.row(r).array() - dot).matrix());
      }
      dS *= att_scale;
      if (needs(q))
        col_block(gq, h * Dh, Dh).noalias() = dS * col_block(val(k), h * Dh, Dh);
      if (needs(k))
        col_block(gk, h * Dh, Dh).noalias() =
            dS.transpose() * col_block(val(q), h * Dh, Dh);
    }
    if (needs(q)) accum(q, gq);
    if (needs(k)) accum(k, gk);
    if (needs(v)) accum(v, gv);
  };
  return o;
}

// ---- row selection / assembly ----

template <typename T>
typename Graph<T>::Value Graph<T>::select_rows(Value x,
                                               std::vector<int64_t> idx) {
  const Tensor<T>& X = val(x);
  const int64_t C = X.cols();
  Tensor<T> out({static_cast<int64_t>(idx.size()), C});
  for (size_t i = 0; i < idx.size(); ++i) {
    check_dim(idx[i] >= 0 && idx[i] < X.rows(), "select_rows index out of range");
    std::copy_n(&X.data[idx[i] * C], C, &out.data[i * C]);
  }
  Value o = push(std::move(out), false, {x}, nullptr);
  if (!needs(o)) return o;
  auto ix = std::make_shared<std::vector<int64_t>>(std::move(idx));
  node(o).back = [this, o, x, ix, C]() {
    const Tensor<T>& G = grad_of(o);
    for (size_t i = 0; i < ix->size(); ++i)
      accum_at(x, (*ix)[i] * C, &G.data[i * C], C);
  };
  return o;
}

template <typename T>
typename Graph<T>::Value Graph<T>::scatter_rows(Value x,
                                                std::vector<int64_t> keep,
                                                Value fill_row,
                                                int64_t n_rows) {
  const Tensor<T>& X = val(x);
  const Tensor<T>& F = val(fill_row);
  const int64_t C = X.cols();
  check_dim(F.numel() == C, "scatter_rows fill width mismatch");
  check_dim(static_cast<int64_t>(keep.size()) == n_rows,
            "scatter_rows keep length mismatch");
  Tensor<T> out({n_rows, C});
  for (int64_t i = 0; i < n_rows; ++i) {
    if (keep[i] >= 0) {
      check_dim(keep[i] < X.rows(), "scatter_rows source index out of range");
      std::copy_n(&X.data[keep[i] * C], C, &out.data[i * C]);
    } else {
      std::copy_n(F.data.data(), C, &out.data[i * C]);
    }
  }
  Value o = push(std::move(out), false, {x, fill_row}, nullptr);
  if (!needs(o)) return o;
  auto kp = std::make_shared<std::vector<int64_t>>(std::move(keep));
  node(o).back = [this, o, x, fill_row, kp, C, n_rows]() {
    const Tensor<T>& G = grad_of(o);
    Tensor<T> gf(val(fill_row).shape);
    bool any_fill = false;
    for (int64_t i = 0; i < n_rows; ++i) {
      if ((*kp)[i] >= 0) {
        accum_at(x, (*kp)[i] * C, &G.data[i * C], C);
      } else {
        any_fill = true;
        for (int64_t c = 0; c < C; ++c) gf.data[c] += G.data[i * C + c];
      }
    }
    if (any_fill) accum(fill_row, gf);
  };
  return o;
}

template <typename T>
typename Graph<T>::Value Graph<T>::concat_rows(Value a, Value b) {
  const Tensor<T>& A = val(a);
  const Tensor<T>& B = val(b);
  check_dim(A.cols() == B.cols(), "concat_rows width mismatch");
  Tensor<T> out({A.rows() + B.rows(), A.cols()});
  std::copy(A.data.begin(), A.data.end(), out.data.begin());
  std::copy(B.data.begin(), B.data.end(), out.data.begin() + A.data.size());
  Value o = push(std::move(out), false, {a, b}, nullptr);
  if (!needs(o)) return o;
  node(o).back = [this, o, a, b]() {
    const Tensor<T>& G = grad_of(o);
    accum_at(a, 0, G.data.data(), val(a).numel());
    accum_at(b, 0, G.data.data() + val(a).numel(), val(b).numel());
  };
  return o;
}

template <typename T>
typename Graph<T>::Value Graph<T>::slice_rows(Value x, int64_t r0, int64_t r1) {
  const Tensor<T>& X = val(x);
  check_dim(0 <= r0 && r0 <= r1 && r1 <= X.rows(), "slice_rows range invalid");
  const int64_t C = X.cols();
  Tensor<T> out({r1 - r0, C});
  std::copy_n(&X.data[r0 * C], (r1 - r0) * C, out.data.begin());
  Value o = push(std::move(out), false, {x}, nullptr);
  if (!needs(o)) return o;
  node(o).back = [this, o, x, r0, C]() {
    const Tensor<T>& G = grad_of(o);
    accum_at(x, r0 * C, G.data.data(), G.numel());
  };
  return o;
}

template <typename T>
typename Graph<T>::Value Graph<T>::reshape(Value x, std::vector<int64_t> shape) {
  check_dim(Tensor<T>::numel_of(shape) == val(x).numel(),
            "reshape element count mismatch");
  Tensor<T> out(std::move(shape), val(x).data);
  Value o = push(std::move(out), false, {x}, nullptr);
  if (!needs(o)) return o;
  node(o).back = [this, o, x]() { accum_at(x, 0, grad_of(o).data.data(), grad_of(o).numel()); };
  return o;
}

// ---- reductions / losses ----

template <typename T>
typename Graph<T>::Value Graph<T>::sum(Value x) {
  T s = 0;
  for (T v : val(x).data) s += v;
  Value o = push(Tensor<T>::scalar_of(s), false, {x}, nullptr);
  if (!needs(o)) return o;
  node(o).back = [this, o, x]() {
    accum(x, Tensor<T>::full(val(x).shape, grad_of(o).data[0]));
  };
  return o;
}

template <typename T>
typename Graph<T>::Value Graph<T>::sum_sq(Value x) {
  T s = 0;
  for (T v : val(x).data) s += v * v;
  Value o = push(Tensor<T>::scalar_of(s), false, {x}, nullptr);
  if (!needs(o)) return o;
  node(o).back = [this, o, x]() {
    const T g = grad_of(o).data[0];
    Tensor<T> gx = val(x);
    for (auto& v : gx.data) v *= T(2) * g;
    accum(x, gx);
  };
  return o;
}

template <typename T>
typename Graph<T>::Value Graph<T>::l1(Value x) {
  T s = 0;
  for (T v : val(x).data) s += std::abs(v);
  Value o = push(Tensor<T>::scalar_of(s), false, {x}, nullptr);
  if (!needs(o)) return o;
  node(o).back = [this, o, x]() {
    const T g = grad_of(o).data[0];
    Tensor<T> gx = val(x);
    for (auto& v : gx.data) v = v > T(0) ? g : (v < T(0) ? -g : T(0));
    accum(x, gx);
  };
  return o;
}

template <typename T>
typename Graph<T>::Value Graph<T>::mean_sq_err(Value pred,
                                               const Tensor<T>& target) {
  const Tensor<T>& P = val(pred);
  check_dim(P.same_shape(target), "mean_sq_err shape mismatch");
  check_dim(P.numel() > 0, "mean_sq_err over empty tensor");
  T s = 0;
  for (int64_t i = 0; i < P.numel(); ++i) s += sq(P.data[i] - target.data[i]);
  s /= T(P.numel());
  Value o = push(Tensor<T>::scalar_of(s), false, {pred}, nullptr);
  if (!needs(o)) return o;
  auto tgt = std::make_shared<Tensor<T>>(target);
  node(o).back = [this, o, pred, tgt]() {
    const T g = grad_of(o).data[0] * T(2) / T(val(pred).numel());
    Tensor<T> gx(val(pred).shape);
    for (int64_t i = 0; i < gx.numel(); ++i)
      gx.data[i] = g * (val(pred).data[i] - tgt->data[i]);
    accum(pred, gx);
  };
  return o;
}

template <typename T>
typename Graph<T>::Value Graph<T>::masked_mean_sq_err(
    Value pred, const Tensor<T>& target, const std::vector<uint8_t>& row_mask) {
  const Tensor<T>& P = val(pred);
  check_dim(P.same_shape(target), "loss target shape mismatch");
  check_dim(static_cast<int64_t>(row_mask.size()) == P.rows(),
            "loss mask length mismatch");
  int64_t n_masked = 0;
  for (uint8_t m : row_mask) n_masked += m ? 1 : 0;
  if (n_masked == 0) throw DataError("loss undefined: no masked tokens");
  const int64_t C = P.cols();
  const T denom = T(n_masked) * T(C);
  T s = 0;
  for (int64_t r = 0; r < P.rows(); ++r) {
    if (!row_mask[r]) continue;
    for (int64_t c = 0; c < C; ++c) s += sq(P.data[r * C + c] - target.data[r * C + c]);
  }
  s /= denom;
  Value o = push(Tensor<T>::scalar_of(s), false, {pred}, nullptr);
  if (!needs(o)) return o;
  auto tgt = std::make_shared<Tensor<T>>(target);
  auto msk = std::make_shared<std::vector<uint8_t>>(row_mask);
  node(o).back = [this, o, pred, tgt, msk, C, denom]() {
    const T g = grad_of(o).data[0] * T(2) / denom;
    Tensor<T> gx(val(pred).shape);
    for (int64_t r = 0; r < val(pred).rows(); ++r) {
      if (!(*msk)[r]) continue;
      for (int64_t c = 0; c < C; ++c)
        gx.data[r * C + c] = g * (val(pred).data[r * C + c] - tgt->data[r * C + c]);
    }
    accum(pred, gx);
  };
  return o;
}

// ---- SVD-based nearest rotation ----

template <typename T>
typename Graph<T>::Value Graph<T>::nearest_rotation(Value m) {
  const Tensor<T>& M = val(m);
  check_dim(M.rows() == 3 && M.cols() == 3, "nearest_rotation needs a 3x3 input");
  using M3 = Eigen::Matrix<double, 3, 3>;
  M3 Md;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) Md(r, c) = static_cast<double>(M.at(r, c));
  Eigen::JacobiSVD<M3> svd(Md, Eigen::ComputeFullU | Eigen::ComputeFullV);
  M3 U = svd.matrixU();
  M3 Vt = svd.matrixV().transpose();
  Eigen::Vector3d sv = svd.singularValues();
  const double s1 = sv(0), s2 = sv(1), s3 = sv(2);
  if (!(s3 > 1e-9 * std::max(s1, 1e-300)))
    throw NumericError("nearest_rotation: rank-deficient input");
  const double det_uv = (U * Vt).determinant();
  const double sgn = det_uv < 0 ? -1.0 : 1.0;
  if (sgn < 0 && (s2 - s3) <= 1e-9 * s1)
    throw NumericError("nearest_rotation: reflection with tied singular values");
  M3 Dm = Eigen::Vector3d(1.0, 1.0, sgn).asDiagonal();
  M3 R = U * Dm * Vt;
  Tensor<T> out({3, 3});
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out.at(r, c) = static_cast<T>(R(r, c));
  Value o = push(std::move(out), false, {m}, nullptr);
  if (!needs(o)) return o;
  // Pull back through the polar factor: with M = R S (S = R^T M symmetric),
  // a perturbation satisfies dR = R [w]x where
  //   (tr(S) I - S) w = vee(R^T dM - dM^T R).
  // This stays well-conditioned for clustered singular values (where the
  // usual SVD cotangent formula cancels catastrophically); it only
  // degenerates in the reflection-with-tied-singular-values case rejected
  // above.
  auto saved = std::make_shared<std::pair<M3, M3>>(R, R.transpose() * Md);
  node(o).back = [this, o, m, saved]() {
    const M3& R = saved->first;
    const M3 S = 0.5 * (saved->second + saved->second.transpose());
    M3 Rbar;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) Rbar(r, c) = static_cast<double>(grad_of(o).at(r, c));
    const M3 A = R.transpose() * Rbar;
    const M3 skewA = 0.5 * (A - A.transpose());
    const Eigen::Vector3d a(skewA(2, 1), skewA(0, 2), skewA(1, 0));
    const M3 lhs = S.trace() * M3::Identity() - S;
    const Eigen::Vector3d w = 2.0 * lhs.ldlt().solve(a);
    M3 wx;
    wx << 0, -w(2), w(1), w(2), 0, -w(0), -w(1), w(0), 0;
    const M3 Mbar = R * wx;
    Tensor<T> g({3, 3});
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) g.at(r, c) = static_cast<T>(Mbar(r, c));
    accum(m, g);
  };
  return o;
}

// ---- quaternion log map ----

template <typename T>
typename Graph<T>::Value Graph<T>::quat_log(Value q) {
  const Tensor<T>& Q = val(q);
  check_dim(Q.numel() == 4, "quat_log expects [w,x,y,z]");
  double w = Q.data[0], x = Q.data[1], y = Q.data[2], z = Q.data[3];
  const double norm = std::sqrt(w * w + x * x + y * y + z * z);
  if (std::abs(norm - 1.0) > 1e-4)
    throw DataError("quat_log: quaternion not unit-norm");
  double flip = 1.0;
  if (w < 0) {  // canonical hemisphere
    flip = -1.0;
    w = -w, x = -x, y = -y, z = -z;
  }
  const double s = std::sqrt(x * x + y * y + z * z);
  Tensor<T> out({3});
  double f;  // rho = f * (x,y,z)
  bool series = s < 1e-8;
  if (series) {
    f = 2.0 / w;
  } else {
    f = 2.0 * std::atan2(s, w) / s;
  }
  out.data[0] = static_cast<T>(f * x);
  out.data[1] = static_cast<T>(f * y);
  out.data[2] = static_cast<T>(f * z);
  Value o = push(std::move(out), false, {q}, nullptr);
  if (!needs(o)) return o;
  node(o).back = [this, o, q, w, x, y, z, s, f, flip, series]() {
    const Tensor<T>& G = grad_of(o);
    const double g0 = G.data[0], g1 = G.data[1], g2 = G.data[2];
    const double u[3] = {x, y, z};
    const double gv[3] = {g0, g1, g2};
    double dq[4] = {0, 0, 0, 0};
    const double r2 = s * s + w * w;
    if (series) {
      // rho ~= (2/w) * u
      for (int i = 0; i < 3; ++i) dq[1 + i] = f * gv[i];
      dq[0] = -(2.0 / (w * w)) * (u[0] * g0 + u[1] * g1 + u[2] * g2);
    } else {
      // d rho_i / d u_j = f delta_ij + (df/ds) u_i u_j / s
      const double dfds = 2.0 * w / (r2 * s) - f / s;
      const double udotg = u[0] * g0 + u[1] * g1 + u[2] * g2;
      for (int j = 0; j < 3; ++j)
        dq[1 + j] = f * gv[j] + dfds * u[j] * udotg / s;
      // d rho_i / d w = -2 u_i / r2
      dq[0] = -2.0 * udotg / r2;
    }
    Tensor<T> g({4});
    for (int i = 0; i < 4; ++i) g.data[i] = static_cast<T>(flip * dq[i]);
    accum(q, g);
  };
  return o;
}

template class Graph<float>;
template class Graph<double>;

}  // namespace cvc
