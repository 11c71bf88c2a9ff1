#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "nfa/autograd.hpp"

namespace nfa {

/// Owns a model's parameters. Addresses are stable for the store's lifetime,
/// which is what Tape::watch relies on.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Tensor init);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  Parameter* find(const std::string& name);

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad();
  std::size_t num_scalars() const;

  /// Copies of every parameter value, in registration order.
  std::vector<Tensor> snapshot() const;
  void restore(const std::vector<Tensor>& values);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

/// Glorot-uniform [fan_in x fan_out] weight.
Tensor glorot_uniform(int fan_in, int fan_out, std::mt19937_64& rng);

struct AdamOptions {
  float lr_base = 5e-3f;
  float weight_decay = 1e-6f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct AdamState {
  AdamOptions options;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;
};

AdamState make_adam_state(const ParameterStore& params, AdamOptions options);

/// One bias-corrected Adam update with decoupled weight decay, applied to
/// every trainable parameter using its accumulated grad.
void adam_step(ParameterStore& params, AdamState& state, float lr_now);

/// Linear warmup from 0 to lr_base over warmup_steps, then cosine decay to 0
/// at total_steps.
double lr_schedule(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
                   double lr_base);

}  // namespace nfa
