#include "nfa/optim.hpp"

#include <cmath>
#include <numbers>

#include "nfa/rng.hpp"

namespace nfa {

Parameter& ParameterStore::add(const std::string& name, Tensor init) {
  if (find(name) != nullptr) throw ValueError("duplicate parameter name " + name);
  params_.push_back(std::make_unique<Parameter>(name, std::move(init)));
  return *params_.back();
}

Parameter* ParameterStore::find(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

Parameter& ParameterStore::get(const std::string& name) {
  Parameter* p = find(name);
  if (p == nullptr) throw ValueError("unknown parameter " + name);
  return *p;
}

const Parameter& ParameterStore::get(const std::string& name) const {
  return const_cast<ParameterStore*>(this)->get(name);
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->grad.fill(0.0f);
}

std::size_t ParameterStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

std::vector<Tensor> ParameterStore::snapshot() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p->value);
  return out;
}

void ParameterStore::restore(const std::vector<Tensor>& values) {
  if (values.size() != params_.size()) throw DimensionError("restore: parameter count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape() != params_[i]->value.shape()) {
      throw DimensionError("restore: shape mismatch for " + params_[i]->name);
    }
    params_[i]->value = values[i];
  }
}

Tensor glorot_uniform(int fan_in, int fan_out, std::mt19937_64& rng) {
  const float bound = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
  Tensor w(Shape{fan_in, fan_out});
  for (float& v : w.values()) v = static_cast<float>(uniform(rng, -bound, bound));
  return w;
}

AdamState make_adam_state(const ParameterStore& params, AdamOptions options) {
  if (!(options.lr_base >= 0.0f)) throw ConfigError("adam: lr_base must be >= 0");
  if (options.weight_decay < 0.0f) throw ConfigError("adam: weight_decay must be >= 0");
  AdamState s{options, {}, {}, 0};
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m.emplace_back(params[i].value.shape(), 0.0f);
    s.v.emplace_back(params[i].value.shape(), 0.0f);
  }
  return s;
}

void adam_step(ParameterStore& params, AdamState& state, float lr_now) {
  if (lr_now < 0.0f) throw ValueError("adam_step: negative learning rate");
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam_step: optimizer state does not match parameter count");
  }
  state.step += 1;
  const AdamOptions& o = state.options;
  const double bc1 = 1.0 - std::pow(double(o.beta1), double(state.step));
  const double bc2 = 1.0 - std::pow(double(o.beta2), double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    if (p.grad.shape() != p.value.shape() || m.shape() != p.value.shape() ||
        v.shape() != p.value.shape()) {
      throw DimensionError("adam_step: shape mismatch for parameter " + p.name);
    }
    if (!p.trainable) continue;
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const float g = p.grad[j];
      m[j] = o.beta1 * m[j] + (1.0f - o.beta1) * g;
      v[j] = o.beta2 * v[j] + (1.0f - o.beta2) * g * g;
      const float mhat = static_cast<float>(m[j] / bc1);
      const float vhat = static_cast<float>(v[j] / bc2);
      p.value[j] -= lr_now * (mhat / (std::sqrt(vhat) + o.eps) + o.weight_decay * p.value[j]);
    }
  }
}

double lr_schedule(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
                   double lr_base) {
  if (warmup_steps < 0 || warmup_steps >= total_steps) {
    throw ConfigError("lr_schedule: warmup_steps (" + std::to_string(warmup_steps) +
                      ") must be in [0, total_steps=" + std::to_string(total_steps) + ")");
  }
  if (step < 0 || step > total_steps) throw ValueError("lr_schedule: step out of range");
  if (step < warmup_steps) return lr_base * double(step) / double(warmup_steps);
  const double progress = double(step - warmup_steps) / double(total_steps - warmup_steps);
  return 0.5 * lr_base * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace nfa
