#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nfa/tensor.hpp"

namespace nfa {

/// A named trainable tensor. `grad` always has the shape of `value`.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  /// Frozen parameters still take part in the forward pass but are skipped
  /// by the optimizer.
  bool trainable = true;

  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape(), 0.0f) {}
};

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

using IndexMap = std::shared_ptr<const std::vector<int>>;

/// Reverse-mode tape. Values live in the tape; records are appended in
/// execution order, so they are topologically sorted by construction.
/// Operations whose inputs are all constants are evaluated eagerly and leave
/// no record.
class Tape {
 public:
  /// Called with the tape and the id of the record's output node.
  using BackwardFn = std::function<void(Tape&, int)>;

  struct Record {
    const char* kind;
    std::vector<int> inputs;
    int output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf that tracks `param`; backward() accumulates into param.grad.
  Var watch(Parameter& param);

  const Tensor& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer for node `id`, zero-allocated on first use.
  Tensor& grad(int id);
  bool has_grad(int id) const { return !nodes_[id].grad.empty(); }

  /// Append a node. A record is emitted only when some input requires grad.
  Var emit(const char* kind, std::initializer_list<Var> inputs, Tensor out, BackwardFn fn);
  Var emit(const char* kind, const std::vector<Var>& inputs, Tensor out, BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and runs every record once, in reverse.
  void backward(Var loss);
  /// Vector-Jacobian product: seeds the gradient of `output` with `seed`.
  void backward(Var output, const Tensor& seed);

  const std::vector<Record>& records() const { return records_; }
  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
  };

  std::vector<Node> nodes_;
  std::vector<Record> records_;
};

// --- differentiable operations -------------------------------------------

/// [m x k] . [k x n], or batched [g x m x k] . [g x k x n].
Var matmul(Var a, Var b);
/// a . b^T with the same batching rules: [g x m x k] . [g x n x k]^T.
Var matmul_bt(Var a, Var b);
/// x[... x in] . w[in x out] + b[out].
Var linear(Var x, Var w, std::optional<Var> b = std::nullopt);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, float s);
/// Multiply every element by the single element of `s`.
Var scale_by(Var a, Var s);

Var gelu(Var x);
Var layer_norm(Var x, Var gain, Var bias, float eps = 1e-5f);
/// Row softmax over the last axis. `additive_mask` entries must be 0 or -inf;
/// rows with no allowed entry produce zeros.
Var softmax_lastdim(Var x, const Tensor* additive_mask = nullptr);

/// out[i] = x[index[i]], or 0 where index[i] < 0.
Var gather(Var x, IndexMap index, Shape out_shape);
Var reshape(Var x, Shape shape);

Var sum(Var x);
Var mean(Var x);
/// [a x b x c] -> [a x c], averaging over the middle axis.
Var mean_axis1(Var x);

/// Bilinear upsampling of the two trailing axes, align_corners = false.
Var bilinear_upsample(Var x, int factor);

/// Mean binary cross-entropy on logits, log-sum-exp stable.
Var bce_with_logits(Var logits, const Tensor& targets);

// Scalar references used by tests and the gradient checker.
float gelu_scalar(float x);

namespace testing {
/// Negate the upstream gradient handed to every record of `kind` during
/// backward. Used by the self-check mutation test; empty string disables.
void set_backward_sign_flip(std::string kind);
const std::string& backward_sign_flip();
}  // namespace testing

}  // namespace nfa
