#pragma once
// Parameter registry, weight init, small conv modules, and optimizers.

#include <cmath>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "prodet/rng.hpp"
#include "prodet/tape.hpp"
#include "prodet/tensor.hpp"

namespace prodet {

template <class T>
class StoreT {
 public:
  struct Entry {
    ParamT<T> param;
    bool trainable = true;
  };

  ParamT<T>& create(const std::string& name, std::vector<std::size_t> shape,
                    bool trainable = true) {
    if (index_.count(name))
      throw std::invalid_argument("duplicate parameter name: " + name);
    auto e = std::make_unique<Entry>();
    e->param.name = name;
    e->param.value = TensorT<T>(shape);
    e->param.grad = TensorT<T>(shape);
    e->trainable = trainable;
    Entry* raw = e.get();
    index_[name] = entries_.size();
    entries_.push_back(std::move(e));
    return raw->param;
  }

  ParamT<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second]->param;
  }

  std::size_t size() const { return entries_.size(); }
  Entry& entry(std::size_t i) { return *entries_[i]; }
  const Entry& entry(std::size_t i) const { return *entries_[i]; }

  void zero_grad() {
    for (auto& e : entries_) e->param.zero_grad();
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e->param.value.numel();
    return n;
  }

  std::uint64_t total_access_count() const {
    std::uint64_t n = 0;
    for (const auto& e : entries_) n += e->param.access_count;
    return n;
  }

  void reset_access_counts() {
    for (auto& e : entries_) e->param.access_count = 0;
  }

 private:
  std::vector<std::unique_ptr<Entry>> entries_;
  std::map<std::string, std::size_t> index_;
};

using Store = StoreT<float>;

namespace init {

// Fan-in scaled uniform for conv weights [O,C,3,3]:
// U(-gain/sqrt(fan_in), +gain/sqrt(fan_in)) with fan_in = C*9.
template <class T>
void conv_uniform(TensorT<T>& w, Rng& rng, T gain = T(1)) {
  const std::size_t fan_in = w.shape[1] * w.shape[2] * w.shape[3];
  const T bound = gain / std::sqrt(static_cast<T>(fan_in));
  for (auto& v : w.data)
    v = static_cast<T>(rng.uniform(-double(bound), double(bound)));
}

template <class T>
void constant(TensorT<T>& w, T v) {
  w.fill(v);
}

}  // namespace init

// Conv 3x3 (same padding) + batch norm + ReLU.
template <class T>
struct ConvBnReluT {
  ParamT<T>* w = nullptr;
  ParamT<T>* b = nullptr;
  ParamT<T>* gamma = nullptr;
  ParamT<T>* beta = nullptr;
  ParamT<T>* rmean = nullptr;
  ParamT<T>* rvar = nullptr;

  ConvBnReluT() = default;
  ConvBnReluT(StoreT<T>& store, const std::string& prefix, std::size_t in_c,
              std::size_t out_c, Rng& rng) {
    w = &store.create(prefix + ".w", {out_c, in_c, 3, 3});
    init::conv_uniform(w->value, rng);
    b = &store.create(prefix + ".b", {out_c});
    gamma = &store.create(prefix + ".bn.g", {out_c});
    gamma->value.fill(T(1));
    beta = &store.create(prefix + ".bn.b", {out_c});
    rmean = &store.create(prefix + ".bn.rm", {out_c}, false);
    rvar = &store.create(prefix + ".bn.rv", {out_c}, false);
    rvar->value.fill(T(1));
  }

  typename TapeT<T>::Var forward(TapeT<T>& t, typename TapeT<T>::Var x,
                                 bool training) const {
    auto y = t.conv2d(x, t.param(*w), t.param(*b));
    y = t.batchnorm(y, t.param(*gamma), t.param(*beta), rmean->value,
                    rvar->value, training);
    return t.relu(y);
  }
};

// Conv 3x3 (same padding) + instance norm + ReLU. Normalization is per
// sample, so small batches cause no train/eval statistics gap; used by the
// image-to-map nets whose outputs feed other stages.
template <class T>
struct ConvInReluT {
  ParamT<T>* w = nullptr;
  ParamT<T>* b = nullptr;
  ParamT<T>* gamma = nullptr;
  ParamT<T>* beta = nullptr;

  ConvInReluT() = default;
  ConvInReluT(StoreT<T>& store, const std::string& prefix, std::size_t in_c,
              std::size_t out_c, Rng& rng) {
    w = &store.create(prefix + ".w", {out_c, in_c, 3, 3});
    init::conv_uniform(w->value, rng);
    b = &store.create(prefix + ".b", {out_c});
    gamma = &store.create(prefix + ".in.g", {out_c});
    gamma->value.fill(T(1));
    beta = &store.create(prefix + ".in.b", {out_c});
  }

  typename TapeT<T>::Var forward(TapeT<T>& t, typename TapeT<T>::Var x,
                                 bool) const {
    auto y = t.conv2d(x, t.param(*w), t.param(*b));
    y = t.instancenorm(y, t.param(*gamma), t.param(*beta));
    return t.relu(y);
  }
};

// Plain conv 3x3 + bias, no norm or activation (network heads).
template <class T>
struct ConvT {
  ParamT<T>* w = nullptr;
  ParamT<T>* b = nullptr;

  ConvT() = default;
  ConvT(StoreT<T>& store, const std::string& prefix, std::size_t in_c,
        std::size_t out_c, Rng& rng, T weight_gain = T(1), T bias_init = T(0)) {
    w = &store.create(prefix + ".w", {out_c, in_c, 3, 3});
    init::conv_uniform(w->value, rng, weight_gain);
    b = &store.create(prefix + ".b", {out_c});
    b->value.fill(bias_init);
  }

  typename TapeT<T>::Var forward(TapeT<T>& t, typename TapeT<T>::Var x) const {
    return t.conv2d(x, t.param(*w), t.param(*b));
  }
};

// ---- optimizers ----

template <class T>
struct SgdT {
  T lr;
  explicit SgdT(T lr_) : lr(lr_) {}
  void step(StoreT<T>& store) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto& e = store.entry(i);
      if (!e.trainable) continue;
      kernels::Kern<T>::axpy(-lr, e.param.grad.ptr(), e.param.value.ptr(),
                             e.param.value.numel());
    }
  }
};

template <class T>
struct AdamT {
  T lr;
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  explicit AdamT(T lr_) : lr(lr_) {}

  void step(StoreT<T>& store) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto& e = store.entry(i);
      if (!e.trainable) continue;
      ParamT<T>& p = e.param;
      if (p.m.numel() != p.value.numel()) {
        p.m = TensorT<T>(p.value.shape);
        p.v = TensorT<T>(p.value.shape);
        p.adam_t = 0;
      }
      ++p.adam_t;
      const T bc1 = T(1) - std::pow(beta1, static_cast<T>(p.adam_t));
      const T bc2 = T(1) - std::pow(beta2, static_cast<T>(p.adam_t));
      for (std::size_t j = 0; j < p.value.numel(); ++j) {
        const T g = p.grad[j];
        p.m[j] = beta1 * p.m[j] + (T(1) - beta1) * g;
        p.v[j] = beta2 * p.v[j] + (T(1) - beta2) * g * g;
        const T mhat = p.m[j] / bc1;
        const T vhat = p.v[j] / bc2;
        p.value[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

using Sgd = SgdT<float>;
using Adam = AdamT<float>;

// ---- gradient checking ----

struct GradCheckItem {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckItem> items;
  std::vector<std::string> flagged;
  double max_rel_err = 0.0;
  std::string worst;
  bool ok(double) const { return flagged.empty(); }
};

// Central finite differences per parameter scalar, compared against the
// analytic gradients already present in the store. `eval` rebuilds the graph
// and returns the loss for the current parameter values.
template <class T, class EvalFn>
GradCheckReport grad_check(StoreT<T>& store, EvalFn eval, double h,
                           double tolerance) {
  GradCheckReport rep;
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& e = store.entry(i);
    if (!e.trainable) continue;
    GradCheckItem item;
    item.name = e.param.name;
    for (std::size_t j = 0; j < e.param.value.numel(); ++j) {
      const T saved = e.param.value[j];
      e.param.value[j] = saved + static_cast<T>(h);
      const double fp = static_cast<double>(eval());
      e.param.value[j] = saved - static_cast<T>(h);
      const double fm = static_cast<double>(eval());
      e.param.value[j] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double g = static_cast<double>(e.param.grad[j]);
      const double rel = std::abs(g - fd) / std::max(1.0, std::abs(fd));
      item.max_rel_err = std::max(item.max_rel_err, rel);
    }
    if (item.max_rel_err > rep.max_rel_err) {
      rep.max_rel_err = item.max_rel_err;
      rep.worst = item.name;
    }
    if (item.max_rel_err > tolerance) rep.flagged.push_back(item.name);
    rep.items.push_back(std::move(item));
  }
  return rep;
}

}  // namespace prodet
