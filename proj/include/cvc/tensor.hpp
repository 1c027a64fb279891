#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace cvc {

// Error taxonomy. The C API and the CLI map these onto status/exit codes,
// so library code must throw the right class.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Shape/dimension violations are programming or input-contract errors.
struct DimError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline void check_dim(bool ok, const std::string& what) {
  if (!ok) throw DimError(what);
}

// Dense row-major n-d array. The single value type for activations,
// parameters and gradients. T is float for training, double for
// gradient-check mode.
template <typename T>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), T(0));
  }
  Tensor(std::vector<int64_t> s, std::vector<T> d)
      : shape(std::move(s)), data(std::move(d)) {
    check_dim(static_cast<int64_t>(data.size()) == numel_of(shape),
              "tensor data size does not match shape");
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t e : s) {
      check_dim(e >= 0, "negative extent");
      n *= e;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t i) const { return shape.at(i); }
  size_t ndim() const { return shape.size(); }

  // Leading dims collapsed: views every tensor as [rows, cols] with cols =
  // trailing extent. Matches the [*, D] convention used throughout.
  int64_t rows() const { return shape.empty() ? 1 : numel() / cols(); }
  int64_t cols() const { return shape.empty() ? 1 : shape.back(); }

  T& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
  const T& at(int64_t r, int64_t c) const {
    return data[static_cast<size_t>(r * cols() + c)];
  }

  T scalar() const {
    check_dim(numel() == 1, "scalar() on non-scalar tensor");
    return data[0];
  }

  static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int64_t> s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar_of(T v) { return Tensor({}, {v}); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
  }
};

template <typename T>
inline void check_finite(const Tensor<T>& t, const std::string& what) {
  if (!t.all_finite()) throw NumericError("non-finite values in " + what);
}

// Named parameter with accumulated gradient.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor<T>::zeros(value.shape);
  }
  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
};

// Owning set of uniquely named parameters with stable addresses.
template <typename T>
class ParamSet {
 public:
  Param<T>& create(const std::string& name, Tensor<T> init) {
    if (by_name_.count(name))
      throw ConfigError("duplicate parameter name: " + name);
    items_.push_back(std::make_unique<Param<T>>(name, std::move(init)));
    by_name_[name] = items_.back().get();
    return *items_.back();
  }
  Param<T>* find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }
  size_t size() const { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  void zero_grad() {
    for (auto& p : items_) p->zero_grad();
  }
  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& p : items_) n += p->value.numel();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Param<T>>> items_;
  std::unordered_map<std::string, Param<T>*> by_name_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace cvc
