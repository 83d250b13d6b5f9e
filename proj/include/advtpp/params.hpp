#ifndef ADVTPP_PARAMS_HPP_
#define ADVTPP_PARAMS_HPP_

// Helpers shared by every parameter struct. A parameter struct exposes
//   template <class F> void visit(F&& f);        // f(name, ad::Tensor&)
//   template <class F> void visit(F&& f) const;  // f(name, const ad::Tensor&)
// and everything here (binding to a tape, gradient extraction, Adam,
// checkpoints) is written against that.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "advtpp/autodiff.hpp"

namespace advtpp {

using GradList = std::vector<std::vector<double>>;

// Copy of params whose tensors are tracked leaves on tape.
template <class P>
P bind(const P& params, ad::Tape& tape) {
  P out = params;
  out.visit([&](const std::string&, ad::Tensor& t) { t = tape.leaf(t); });
  return out;
}

// Gradients of a bound copy, in visit order; unreached tensors give zeros.
template <class P>
GradList collect_grads(const P& bound, const ad::Gradients& g) {
  GradList out;
  bound.visit([&](const std::string&, const ad::Tensor& t) {
    const ad::Tensor gt = g.or_zero(t);
    out.emplace_back(gt.values().begin(), gt.values().end());
  });
  return out;
}

template <class P>
GradList zero_grads(const P& params) {
  GradList out;
  params.visit([&](const std::string&, const ad::Tensor& t) {
    out.emplace_back(t.size(), 0.0);
  });
  return out;
}

void accumulate(GradList& into, const GradList& g, double weight = 1.0);
double global_norm(const GradList& g);
bool all_finite(const GradList& g);

template <class P>
std::size_t count_params(const P& params) {
  std::size_t n = 0;
  params.visit([&](const std::string&, const ad::Tensor& t) { n += t.size(); });
  return n;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip; <= 0 disables clipping.
  double clip = 5.0;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // Applies one descent step of grads to params (in visit order).
  template <class P>
  void step(P& params, GradList grads) {
    clip(grads);
    if (m_.empty()) {
      m_ = zero_grads(params);
      v_ = m_;
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::size_t k = 0;
    params.visit([&](const std::string&, ad::Tensor& t) {
      std::vector<double> v(t.values().begin(), t.values().end());
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double g = grads[k][i];
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1 - cfg_.beta1) * g;
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1 - cfg_.beta2) * g * g;
        v[i] -= cfg_.lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + cfg_.eps);
      }
      t = ad::Tensor(t.shape(), std::move(v));
      ++k;
    });
  }

  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  void clip(GradList& grads) const;

  AdamConfig cfg_;
  GradList m_;
  GradList v_;
  std::int64_t t_ = 0;
};

// Gaussian initializer used by the model constructors.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  ad::Tensor normal(ad::Shape shape, double stddev);

 private:
  std::mt19937_64 rng_;
};

// Flat JSON checkpoint: {"version", "kind", "meta": {...}, "params": {name:
// {"shape": [...], "values": [...]}}}.
inline constexpr int kCheckpointVersion = 1;

struct RawCheckpoint {
  std::string kind;
  std::map<std::string, double> meta;
  std::map<std::string, ad::Tensor> tensors;
};

void save_checkpoint(const RawCheckpoint& ckpt,
                     const std::filesystem::path& path);
RawCheckpoint load_checkpoint(const std::filesystem::path& path,
                              const std::string& expected_kind);

template <class P>
RawCheckpoint to_checkpoint(const P& params, std::string kind,
                            std::map<std::string, double> meta) {
  RawCheckpoint c{std::move(kind), std::move(meta), {}};
  params.visit([&](const std::string& name, const ad::Tensor& t) {
    c.tensors.emplace(name, t.detach());
  });
  return c;
}

// Overwrites every tensor of params from ckpt; throws DataError on a missing
// name or a shape mismatch.
void assign_from(const RawCheckpoint& ckpt, const std::string& name,
                 ad::Tensor& target);

template <class P>
void fill_from_checkpoint(P& params, const RawCheckpoint& ckpt) {
  params.visit([&](const std::string& name, ad::Tensor& t) {
    assign_from(ckpt, name, t);
  });
}

}  // namespace advtpp

#endif  // ADVTPP_PARAMS_HPP_
