#pragma once

// Small building blocks shared by the policy, aligner, and RL heads: linear
// layers, sinusoidal embeddings, AdamW with decoupled weight decay, gradient
// clipping, and learning-rate schedules.

#include <cmath>
#include <string>
#include <vector>

#include "chainflow/tensor.hpp"

namespace chainflow {

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int64_t in, int64_t out, ParamStore<T>& store, Rng& rng,
         bool zero_init = false) {
    if (zero_init) {
      w_ = store.add_zeros(name + ".weight", {in, out});
      b_ = store.add_zeros(name + ".bias", {out});
    } else {
      w_ = store.add_xavier(name + ".weight", in, out, rng);
      b_ = store.add_zeros(name + ".bias", {out});
    }
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return add(matmul(x, w_), b_); }
  const Tensor<T>& weight() const { return w_; }
  const Tensor<T>& bias() const { return b_; }

 private:
  Tensor<T> w_;
  Tensor<T> b_;
};

// Classic transformer sinusoidal table for integer or fractional positions.
template <typename T>
Tensor<T> sinusoidal_embedding(const std::vector<double>& positions, int64_t dim) {
  const int64_t n = static_cast<int64_t>(positions.size());
  std::vector<T> data(static_cast<size_t>(n * dim));
  const int64_t half = dim / 2;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t k = 0; k < half; ++k) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(dim));
      const double angle = positions[static_cast<size_t>(i)] * freq;
      data[static_cast<size_t>(i * dim + 2 * k)] = static_cast<T>(std::sin(angle));
      data[static_cast<size_t>(i * dim + 2 * k + 1)] = static_cast<T>(std::cos(angle));
    }
    if (dim % 2) data[static_cast<size_t>(i * dim + dim - 1)] = T(0);
  }
  return Tensor<T>({n, dim}, std::move(data));
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

template <typename T>
class AdamW {
 public:
  AdamW(ParamStore<T>& store, AdamWConfig cfg) : store_(&store), cfg_(cfg) {
    m_.resize(store.size());
    v_.resize(store.size());
    for (size_t i = 0; i < store.size(); ++i) {
      const size_t n = store.params()[i].tensor.data().size();
      m_[i].assign(n, 0.0);
      v_[i].assign(n, 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (size_t pi = 0; pi < store_->size(); ++pi) {
      auto& p = store_->params()[pi].tensor;
      const auto& g = p.grad_or_empty();
      auto& w = p.data();
      if (g.empty()) {
        // decay still applies when a parameter got no gradient this step
        for (auto& x : w) x -= static_cast<T>(lr * cfg_.weight_decay * x);
        continue;
      }
      for (size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m_[pi][i] = cfg_.beta1 * m_[pi][i] + (1.0 - cfg_.beta1) * gi;
        v_[pi][i] = cfg_.beta2 * v_[pi][i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = m_[pi][i] / bc1;
        const double vhat = v_[pi][i] / bc2;
        const double upd = lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                 cfg_.weight_decay * static_cast<double>(w[i]));
        w[i] -= static_cast<T>(upd);
      }
    }
  }

  int64_t steps_taken() const { return t_; }

 private:
  ParamStore<T>* store_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  int64_t t_ = 0;
};

// Global-norm gradient clip; returns the pre-clip norm.
template <typename T>
double clip_grad_norm(ParamStore<T>& store, double max_norm) {
  double sq = 0.0;
  for (const auto& p : store.params())
    for (T g : p.tensor.grad_or_empty()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto& p : store.params()) {
      auto& g = p.tensor.grad();
      for (auto& v : g) v *= scale;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// learning-rate schedules
// ---------------------------------------------------------------------------

// Linear warmup to `peak`, then constant.
inline double warmup_constant_lr(int64_t step, double peak, int64_t warmup_steps) {
  if (warmup_steps > 0 && step < warmup_steps)
    return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  return peak;
}

// Cosine decay from peak to floor over `total` steps (no warmup).
inline double cosine_lr(int64_t step, double peak, double floor_lr, int64_t total) {
  if (total <= 1) return floor_lr;
  const double x = std::min(1.0, static_cast<double>(step) / static_cast<double>(total - 1));
  return floor_lr + 0.5 * (peak - floor_lr) * (1.0 + std::cos(3.14159265358979323846 * x));
}

// Warmup then cosine decay.
inline double warmup_cosine_lr(int64_t step, double peak, double floor_lr, int64_t warmup_steps,
                               int64_t total) {
  if (warmup_steps > 0 && step < warmup_steps)
    return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  return cosine_lr(step - warmup_steps, peak, floor_lr, std::max<int64_t>(1, total - warmup_steps));
}

}  // namespace chainflow
