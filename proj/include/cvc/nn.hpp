#pragma once

#include <random>

#include "cvc/graph.hpp"
#include "cvc/tensor.hpp"

namespace cvc {

// Deterministic per-consumer random streams derived from one root seed.
// splitmix64 over (root, tag, counter) so adding a consumer never shifts
// another consumer's stream.
uint64_t derive_seed(uint64_t root, const std::string& tag, uint64_t counter);

template <typename T>
struct Init {
  std::mt19937_64 rng;
  explicit Init(uint64_t seed) : rng(seed) {}

  // ViT-style truncated normal: std 0.02, resampled beyond 2 std.
  Tensor<T> trunc_normal(std::vector<int64_t> shape, double std_dev = 0.02) {
    std::normal_distribution<double> dist(0.0, std_dev);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) {
      double x;
      do {
        x = dist(rng);
      } while (std::abs(x) > 2.0 * std_dev);
      v = static_cast<T>(x);
    }
    return t;
  }
  Tensor<T> zeros(std::vector<int64_t> shape) { return Tensor<T>::zeros(std::move(shape)); }
  Tensor<T> ones(std::vector<int64_t> shape) {
    return Tensor<T>::full(std::move(shape), T(1));
  }
};

// y = x W + b
template <typename T>
struct LinearParams {
  Param<T>* W = nullptr;  // [Din, Dout]
  Param<T>* b = nullptr;  // [Dout]

  static LinearParams create(ParamSet<T>& ps, const std::string& prefix,
                             int64_t din, int64_t dout, Init<T>& init) {
    LinearParams lp;
    lp.W = &ps.create(prefix + ".W", init.trunc_normal({din, dout}));
    lp.b = &ps.create(prefix + ".b", init.zeros({dout}));
    return lp;
  }

  typename Graph<T>::Value forward(Graph<T>& g, typename Graph<T>::Value x) const {
    check_dim(g.val(x).cols() == W->value.dim(0),
              "linear: input width " + std::to_string(g.val(x).cols()) +
                  " != " + std::to_string(W->value.dim(0)) + " (" + W->name + ")");
    return g.add_rowvec(g.matmul(x, g.param(*W)), g.param(*b));
  }
};

template <typename T>
struct LayerNormParams {
  Param<T>* gamma = nullptr;
  Param<T>* beta = nullptr;
  T eps = T(1e-6);

  static LayerNormParams create(ParamSet<T>& ps, const std::string& prefix,
                                int64_t d, Init<T>& init) {
    LayerNormParams ln;
    ln.gamma = &ps.create(prefix + ".gamma", init.ones({d}));
    ln.beta = &ps.create(prefix + ".beta", init.zeros({d}));
    return ln;
  }

  typename Graph<T>::Value forward(Graph<T>& g, typename Graph<T>::Value x) const {
    return g.layer_norm(x, g.param(*gamma), g.param(*beta), eps);
  }
};

// Two linear layers with GELU between; hidden width fixed to 4D.
template <typename T>
struct MlpParams {
  LinearParams<T> fc_in;
  LinearParams<T> fc_out;

  static MlpParams create(ParamSet<T>& ps, const std::string& prefix, int64_t d,
                          Init<T>& init) {
    MlpParams m;
    m.fc_in = LinearParams<T>::create(ps, prefix + ".fc_in", d, 4 * d, init);
    m.fc_out = LinearParams<T>::create(ps, prefix + ".fc_out", 4 * d, d, init);
    return m;
  }

  typename Graph<T>::Value forward(Graph<T>& g, typename Graph<T>::Value x) const {
    return fc_out.forward(g, g.gelu(fc_in.forward(g, x)));
  }
};

// Linear warmup from warmup_lr to base_lr, then cosine decay to zero.
double cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps,
                 double base_lr, double warmup_lr = 1e-6);

struct AdamWConfig {
  double base_lr = 1.5e-4;
  double warmup_lr = 1e-6;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  int64_t warmup_steps = 0;
  int64_t total_steps = 1;
};

// Decoupled weight decay, bias-corrected moments. Decay is skipped for 1-d
// parameters (biases, norm affines, mask token, view embeddings).
template <typename T>
class AdamW {
 public:
  AdamW(ParamSet<T>& params, AdamWConfig cfg) : AdamW({&params}, cfg) {}

  AdamW(std::vector<ParamSet<T>*> sets, AdamWConfig cfg) : cfg_(cfg) {
    for (ParamSet<T>* set : sets)
      for (auto& p : *set)
        moments_.push_back({p.get(), Tensor<T>::zeros(p->value.shape),
                            Tensor<T>::zeros(p->value.shape)});
  }

  // Applies one update from the accumulated gradients at learning rate lr.
  void step(double lr) {
    if (lr <= 0) throw ConfigError("adamw: learning rate must be > 0");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& s : moments_) {
      Param<T>& p = *s.param;
      const bool decay = p.value.ndim() >= 2;
      for (int64_t i = 0; i < p.value.numel(); ++i) {
        const double g = static_cast<double>(p.grad.data[i]);
        double m = cfg_.beta1 * static_cast<double>(s.m.data[i]) + (1.0 - cfg_.beta1) * g;
        double v = cfg_.beta2 * static_cast<double>(s.v.data[i]) + (1.0 - cfg_.beta2) * g * g;
        s.m.data[i] = static_cast<T>(m);
        s.v.data[i] = static_cast<T>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        double w = static_cast<double>(p.value.data[i]);
        w -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        if (decay) w -= lr * cfg_.weight_decay * w;
        p.value.data[i] = static_cast<T>(w);
      }
    }
  }

  // Schedule-aware convenience: lr from the cosine schedule at this step.
  double step_scheduled() {
    const double lr =
        cosine_lr(t_, cfg_.total_steps, cfg_.warmup_steps, cfg_.base_lr, cfg_.warmup_lr);
    step(lr);
    return lr;
  }

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  const AdamWConfig& config() const { return cfg_; }

  // Exposed for checkpointing.
  struct Slot {
    Param<T>* param;
    Tensor<T> m;
    Tensor<T> v;
  };
  std::vector<Slot>& slots() { return moments_; }

 private:
  AdamWConfig cfg_;
  int64_t t_ = 0;
  std::vector<Slot> moments_;
};

}  // namespace cvc
