#pragma once

#include "cvc/nn.hpp"

namespace cvc {

// Multi-head attention with learned Q/K/V projections (with biases) and an
// output projection: Attention(Q,K,V) = Proj(softmax(q k^T / sqrt(D/h)) v).
template <typename T>
struct AttentionParams {
  LinearParams<T> wq, wk, wv, proj;
  int heads = 1;

  static AttentionParams create(ParamSet<T>& ps, const std::string& prefix,
                                int64_t d, int heads, Init<T>& init) {
    check_dim(heads > 0 && d % heads == 0, "attention: D % heads != 0");
    AttentionParams a;
    a.heads = heads;
    a.wq = LinearParams<T>::create(ps, prefix + ".Wq", d, d, init);
    a.wk = LinearParams<T>::create(ps, prefix + ".Wk", d, d, init);
    a.wv = LinearParams<T>::create(ps, prefix + ".Wv", d, d, init);
    a.proj = LinearParams<T>::create(ps, prefix + ".proj", d, d, init);
    return a;
  }

  typename Graph<T>::Value forward(Graph<T>& g, typename Graph<T>::Value q_src,
                                   typename Graph<T>::Value kv_src) const {
    auto q = wq.forward(g, q_src);
    auto k = wk.forward(g, kv_src);
    auto v = wv.forward(g, kv_src);
    return proj.forward(g, g.attention(q, k, v, heads));
  }

  // Keys and values from distinct (pre-normalized) sources.
  typename Graph<T>::Value forward_kv(Graph<T>& g, typename Graph<T>::Value q_src,
                                      typename Graph<T>::Value k_src,
                                      typename Graph<T>::Value v_src) const {
    auto q = wq.forward(g, q_src);
    auto k = wk.forward(g, k_src);
    auto v = wv.forward(g, v_src);
    return proj.forward(g, g.attention(q, k, v, heads));
  }
};

// Pre-norm transformer block:
//   X'  = X + SelfAttn(LN(X))
//   out = X' + MLP(LN(X'))
template <typename T>
struct EncoderBlockParams {
  LayerNormParams<T> norm1, norm2;
  AttentionParams<T> attn;
  MlpParams<T> mlp;

  static EncoderBlockParams create(ParamSet<T>& ps, const std::string& prefix,
                                   int64_t d, int heads, Init<T>& init) {
    EncoderBlockParams b;
    b.norm1 = LayerNormParams<T>::create(ps, prefix + ".norm1", d, init);
    b.attn = AttentionParams<T>::create(ps, prefix + ".attn", d, heads, init);
    b.norm2 = LayerNormParams<T>::create(ps, prefix + ".norm2", d, init);
    b.mlp = MlpParams<T>::create(ps, prefix + ".mlp", d, init);
    return b;
  }

  typename Graph<T>::Value forward(Graph<T>& g, typename Graph<T>::Value x) const {
    auto xbar = norm1.forward(g, x);
    auto x1 = g.add(x, attn.forward(g, xbar, xbar));
    return g.add(x1, mlp.forward(g, norm2.forward(g, x1)));
  }
};

// Decoder block with self-attention on the first stream and cross-attention
// into the reference stream:
//   X'  = X  + SelfAttn(LN(X))
//   X'' = X' + CrossAttn(LN(X'), LN_y(Y), LN_y(Y))
//   out = X'' + MLP(LN(X''))
// Y passes through unchanged; its norm affine is per block, computed once.
template <typename T>
struct CrossBlockParams {
  LayerNormParams<T> norm1, norm2, norm3, norm_y;
  AttentionParams<T> self_attn, cross_attn;
  MlpParams<T> mlp;

  static CrossBlockParams create(ParamSet<T>& ps, const std::string& prefix,
                                 int64_t d, int heads, Init<T>& init) {
    CrossBlockParams b;
    b.norm1 = LayerNormParams<T>::create(ps, prefix + ".norm1", d, init);
    b.self_attn = AttentionParams<T>::create(ps, prefix + ".self_attn", d, heads, init);
    b.norm2 = LayerNormParams<T>::create(ps, prefix + ".norm2", d, init);
    b.norm_y = LayerNormParams<T>::create(ps, prefix + ".norm_y", d, init);
    b.cross_attn = AttentionParams<T>::create(ps, prefix + ".cross_attn", d, heads, init);
    b.norm3 = LayerNormParams<T>::create(ps, prefix + ".norm3", d, init);
    b.mlp = MlpParams<T>::create(ps, prefix + ".mlp", d, init);
    return b;
  }

  typename Graph<T>::Value forward(Graph<T>& g, typename Graph<T>::Value x,
                                   typename Graph<T>::Value y) const {
    if (g.val(y).rows() == 0) throw DimError("cross block: empty reference stream");
    auto xbar = norm1.forward(g, x);
    auto x1 = g.add(x, self_attn.forward(g, xbar, xbar));
    auto ybar = norm_y.forward(g, y);
    auto x2 = g.add(x1, cross_attn.forward_kv(g, norm2.forward(g, x1), ybar, ybar));
    return g.add(x2, mlp.forward(g, norm3.forward(g, x2)));
  }
};

// Learned per-view embeddings for the concatenated decoder.
template <typename T>
struct ViewEmbeddings {
  Param<T>* v1 = nullptr;
  Param<T>* v2 = nullptr;

  static ViewEmbeddings create(ParamSet<T>& ps, const std::string& prefix,
                               int64_t d, Init<T>& init) {
    ViewEmbeddings v;
    v.v1 = &ps.create(prefix + ".v1", init.trunc_normal({d}));
    v.v2 = &ps.create(prefix + ".v2", init.trunc_normal({d}));
    return v;
  }
};

// Concatenated-sequence decoder: Z = [X+v1, Y+v2] once before the first
// block, then standard transformer blocks over the 2N-token sequence.
// Returns only the first-stream tokens; full_out (optional) receives the
// whole sequence after the last block.
template <typename T>
typename Graph<T>::Value cat_stack_forward(
    Graph<T>& g, typename Graph<T>::Value x, typename Graph<T>::Value y,
    const ViewEmbeddings<T>& v, const std::vector<EncoderBlockParams<T>>& blocks,
    typename Graph<T>::Value* full_out = nullptr) {
  const int64_t nx = g.val(x).rows();
  auto z = g.concat_rows(g.add_rowvec(x, g.param(*v.v1)),
                         g.add_rowvec(y, g.param(*v.v2)));
  for (const auto& b : blocks) z = b.forward(g, z);
  if (full_out) *full_out = z;
  return g.slice_rows(z, 0, nx);
}

}  // namespace cvc
