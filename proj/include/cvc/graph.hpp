#pragma once

#include <functional>

#include "cvc/tensor.hpp"

namespace cvc {

// Reverse-mode tape. Ops append nodes; backward() walks the tape in reverse
// creation order (which is a topological order by construction) and runs each
// node's pullback. Leaves bound to a Param accumulate into Param::grad.
//
// A Graph is single-use: build forward, call backward once, discard. Forward
// evaluation never mutates parameters, so concurrent graphs over the same
// frozen ParamSet are safe.
template <typename T>
class Graph {
 public:
  struct Value {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
  };

  // --- leaves ---

  Value constant(Tensor<T> v) { return push(std::move(v), false, {}, nullptr); }

  Value param(Param<T>& p) {
    Value out = push(p.value, true, {}, nullptr);
    node(out).back = [this, out, &p]() {
      auto& g = grad(out);
      for (int64_t i = 0; i < g.numel(); ++i) p.grad.data[i] += g.data[i];
    };
    return out;
  }

  // Differentiable leaf whose gradient is read back by the caller.
  Value input(Tensor<T> v) { return push(std::move(v), true, {}, nullptr); }

  // --- core ops ---

  // C = op(A) op(B) with optional transposes; A,B treated as 2-d [rows,cols].
  Value matmul(Value a, Value b, bool ta = false, bool tb = false);

  Value add(Value a, Value b);              // same shape
  Value sub(Value a, Value b);              // same shape
  Value mul(Value a, Value b);              // elementwise, same shape
  Value add_rowvec(Value x, Value v);       // x:[N,D] + v:[D] broadcast over rows
  Value scale(Value x, T s);
  Value exp(Value x);
  Value gelu(Value x);
  Value relu(Value x);
  Value layer_norm(Value x, Value gamma, Value beta, T eps);

  // Multi-head attention core: softmax(Q K^T / sqrt(D/h)) V per head, heads
  // concatenated. The output projection is a separate linear.
  Value attention(Value q, Value k, Value v, int heads);

  Value select_rows(Value x, std::vector<int64_t> idx);
  // out[i] = x[slot of i] where keep[i] maps output row -> input row, or
  // fill_row for rows with keep[i] < 0. Used to splat visible tokens back
  // into a full-length sequence around the mask token.
  Value scatter_rows(Value x, std::vector<int64_t> keep, Value fill_row,
                     int64_t n_rows);
  Value concat_rows(Value a, Value b);
  Value slice_rows(Value x, int64_t r0, int64_t r1);
  Value reshape(Value x, std::vector<int64_t> shape);

  Value sum(Value x);                       // scalar
  Value sum_sq(Value x);                    // scalar, sum of squares
  Value l1(Value x);                        // scalar, sum of |x|
  Value mean_sq_err(Value pred, const Tensor<T>& target);  // scalar, mean over all
  // Mean over selected rows of per-element squared error.
  Value masked_mean_sq_err(Value pred, const Tensor<T>& target,
                           const std::vector<uint8_t>& row_mask);

  // Nearest rotation to a 3x3 input in Frobenius norm (SVD projection).
  Value nearest_rotation(Value m);
  // Rotation-vector form of a unit quaternion [w,x,y,z] -> [3]; sign is
  // canonicalized to the w >= 0 hemisphere internally.
  Value quat_log(Value q);

  // --- access ---

  const Tensor<T>& val(Value v) const { return nodes_[v.id].val; }
  const Tensor<T>& grad_of(Value v) const { return nodes_[v.id].grad; }

  void backward(Value root);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    bool requires_grad = false;
    bool grad_live = false;  // grad buffer allocated and seeded
    std::function<void()> back;
  };

  std::vector<Node> nodes_;

  Node& node(Value v) { return nodes_[v.id]; }
  Tensor<T>& grad(Value v) { return nodes_[v.id].grad; }

  bool needs(Value v) const { return nodes_[v.id].requires_grad; }

  // Accumulate g into v's grad buffer if v requires grad.
  void accum(Value v, const Tensor<T>& g);
  void accum_at(Value v, int64_t offset, const T* g, int64_t n);

  Value push(Tensor<T> v, bool req, std::initializer_list<Value> parents,
             std::function<void()> back) {
    Node n;
    n.val = std::move(v);
    n.requires_grad = req;
    for (Value p : parents) n.requires_grad = n.requires_grad || needs(p);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Value{static_cast<int32_t>(nodes_.size() - 1)};
  }
};

using GraphF = Graph<float>;
using GraphD = Graph<double>;

}  // namespace cvc
