#include "nfa/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace nfa {

namespace {

std::string& sign_flip_kind() {
  static std::string kind;
  return kind;
}

Eigen::Map<Eigen::ArrayXf> flat(Tensor& t) {
  return Eigen::Map<Eigen::ArrayXf>(t.data(), static_cast<Eigen::Index>(t.size()));
}

Eigen::Map<const Eigen::ArrayXf> flat(const Tensor& t) {
  return Eigen::Map<const Eigen::ArrayXf>(t.data(), static_cast<Eigen::Index>(t.size()));
}

MatrixMap slab(Tensor& t, std::size_t offset, Eigen::Index rows, Eigen::Index cols) {
  return MatrixMap(t.data() + offset, rows, cols);
}

ConstMatrixMap slab(const Tensor& t, std::size_t offset, Eigen::Index rows,
                    Eigen::Index cols) {
  return ConstMatrixMap(t.data() + offset, rows, cols);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

struct BatchDims {
  int g, m, k, n;
};

// Interprets rank-2 operands as a batch of one.
BatchDims batch_dims(const char* op, const Shape& a, const Shape& b, bool b_transposed) {
  if (a.size() != b.size() || (a.size() != 2 && a.size() != 3)) {
    throw DimensionError(std::string(op) + ": expected matching rank-2 or rank-3 operands, got " +
                         shape_str(a) + " and " + shape_str(b));
  }
  const bool batched = a.size() == 3;
  const int g = batched ? a[0] : 1;
  if (batched && b[0] != g) {
    throw DimensionError(std::string(op) + ": batch mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
  const int m = a[a.size() - 2];
  const int k = a.back();
  const int kb = b_transposed ? b.back() : b[b.size() - 2];
  const int n = b_transposed ? b[b.size() - 2] : b.back();
  if (k != kb) {
    throw DimensionError(std::string(op) + ": inner dimensions disagree for " + shape_str(a) +
                         " and " + shape_str(b));
  }
  return {g, m, k, n};
}

Shape batch_shape(const Shape& like, int m, int n) {
  if (like.size() == 3) return {like[0], m, n};
  return {m, n};
}

}  // namespace

namespace testing {
void set_backward_sign_flip(std::string kind) { sign_flip_kind() = std::move(kind); }
const std::string& backward_sign_flip() { return sign_flip_kind(); }
}  // namespace testing

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor(), false, nullptr});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::watch(Parameter& param) {
  nodes_.push_back(Node{param.value, Tensor(), true, &param});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad(int id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) node.grad = Tensor(node.value.shape(), 0.0f);
  return node.grad;
}

Var Tape::emit(const char* kind, std::initializer_list<Var> inputs, Tensor out, BackwardFn fn) {
  return emit(kind, std::vector<Var>(inputs), std::move(out), std::move(fn));
}

Var Tape::emit(const char* kind, const std::vector<Var>& inputs, Tensor out, BackwardFn fn) {
  bool needs_grad = false;
  std::vector<int> ids;
  ids.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (v.tape != this) throw ValueError(std::string(kind) + ": input from a different tape");
    ids.push_back(v.id);
    needs_grad = needs_grad || nodes_[v.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(out), Tensor(), needs_grad, nullptr});
  const int out_id = static_cast<int>(nodes_.size()) - 1;
  if (needs_grad) records_.push_back(Record{kind, std::move(ids), out_id, std::move(fn)});
  return Var{this, out_id};
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ValueError("backward: loss from a different tape");
  if (value(loss.id).size() != 1) {
    throw DimensionError("backward: loss must be scalar, got shape " +
                         shape_str(value(loss.id).shape()));
  }
  backward(loss, Tensor(value(loss.id).shape(), 1.0f));
}

void Tape::backward(Var output, const Tensor& seed) {
  if (output.tape != this) throw ValueError("backward: output from a different tape");
  if (seed.shape() != value(output.id).shape()) {
    throw DimensionError("backward: seed " + shape_str(seed.shape()) + " does not match output " +
                         shape_str(value(output.id).shape()));
  }
  grad(output.id).matrix() += seed.matrix();
  const std::string& flip = testing::backward_sign_flip();
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!has_grad(it->output)) continue;
    const bool flipped = !flip.empty() && flip == it->kind;
    if (flipped) grad(it->output).matrix() *= -1.0f;
    it->backward(*this, it->output);
    if (flipped) grad(it->output).matrix() *= -1.0f;
  }
  for (Node& node : nodes_) {
    if (node.param != nullptr && !node.grad.empty()) {
      node.param->grad.matrix() += node.grad.matrix();
    }
  }
}

// Eigen's blocked GEMM carries a fixed setup cost that dominates for the
// tiny per-group products of sparse attention; small shapes use the
// coefficient-based kernel instead.
template <typename Dst, typename Lhs, typename Rhs>
void gemm_assign(Dst&& dst, const Lhs& lhs, const Rhs& rhs) {
  if (lhs.rows() + lhs.cols() + rhs.cols() < 96) {
    dst = lhs.lazyProduct(rhs);
  } else {
    dst.noalias() = lhs * rhs;
  }
}

template <typename Dst, typename Lhs, typename Rhs>
void gemm_add(Dst&& dst, const Lhs& lhs, const Rhs& rhs) {
  if (lhs.rows() + lhs.cols() + rhs.cols() < 96) {
    dst += lhs.lazyProduct(rhs);
  } else {
    dst.noalias() += lhs * rhs;
  }
}

// --- matmul family ---------------------------------------------------------

Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const BatchDims d = batch_dims("matmul", A.shape(), B.shape(), false);
  Tensor out(batch_shape(A.shape(), d.m, d.n));
  for (int g = 0; g < d.g; ++g) {
    gemm_assign(slab(out, std::size_t(g) * d.m * d.n, d.m, d.n),
                slab(A, std::size_t(g) * d.m * d.k, d.m, d.k),
                slab(B, std::size_t(g) * d.k * d.n, d.k, d.n));
  }
  return a.tape->emit("matmul", {a, b}, std::move(out), [a = a.id, b = b.id, d](Tape& t, int o) {
    const Tensor& dC = t.grad(o);
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    for (int g = 0; g < d.g; ++g) {
      const auto dc = slab(dC, std::size_t(g) * d.m * d.n, d.m, d.n);
      if (t.requires_grad(a)) {
        gemm_add(slab(t.grad(a), std::size_t(g) * d.m * d.k, d.m, d.k),
                 dc, slab(B, std::size_t(g) * d.k * d.n, d.k, d.n).transpose());
      }
      if (t.requires_grad(b)) {
        gemm_add(slab(t.grad(b), std::size_t(g) * d.k * d.n, d.k, d.n),
                 slab(A, std::size_t(g) * d.m * d.k, d.m, d.k).transpose(), dc);
      }
    }
  });
}

Var matmul_bt(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const BatchDims d = batch_dims("matmul_bt", A.shape(), B.shape(), true);
  Tensor out(batch_shape(A.shape(), d.m, d.n));
  for (int g = 0; g < d.g; ++g) {
    gemm_assign(slab(out, std::size_t(g) * d.m * d.n, d.m, d.n),
                slab(A, std::size_t(g) * d.m * d.k, d.m, d.k),
                slab(B, std::size_t(g) * d.n * d.k, d.n, d.k).transpose());
  }
  return a.tape->emit("matmul_bt", {a, b}, std::move(out),
                      [a = a.id, b = b.id, d](Tape& t, int o) {
    const Tensor& dC = t.grad(o);
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    for (int g = 0; g < d.g; ++g) {
      const auto dc = slab(dC, std::size_t(g) * d.m * d.n, d.m, d.n);
      if (t.requires_grad(a)) {
        gemm_add(slab(t.grad(a), std::size_t(g) * d.m * d.k, d.m, d.k),
                 dc, slab(B, std::size_t(g) * d.n * d.k, d.n, d.k));
      }
      if (t.requires_grad(b)) {
        gemm_add(slab(t.grad(b), std::size_t(g) * d.n * d.k, d.n, d.k),
                 dc.transpose(), slab(A, std::size_t(g) * d.m * d.k, d.m, d.k));
      }
    }
  });
}

Var linear(Var x, Var w, std::optional<Var> b) {
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  if (W.rank() != 2 || X.rank() < 1 || X.shape().back() != W.dim(0)) {
    throw DimensionError("linear: input " + shape_str(X.shape()) + " incompatible with weight " +
                         shape_str(W.shape()));
  }
  const int in = W.dim(0);
  const int outw = W.dim(1);
  if (b && (b->value().rank() != 1 || b->value().dim(0) != outw)) {
    throw DimensionError("linear: bias " + shape_str(b->value().shape()) +
                         " does not match weight " + shape_str(W.shape()));
  }
  const Eigen::Index rows = static_cast<Eigen::Index>(X.size() / in);
  Shape out_shape = X.shape();
  out_shape.back() = outw;
  Tensor out(out_shape);
  auto o = slab(out, 0, rows, outw);
  o.noalias() = slab(X, 0, rows, in) * W.matrix();
  if (b) o.rowwise() += slab(b->value(), 0, 1, outw).row(0);

  std::vector<Var> inputs{x, w};
  if (b) inputs.push_back(*b);
  const int bid = b ? b->id : -1;
  return x.tape->emit("linear", inputs, std::move(out),
                      [x = x.id, w = w.id, bid, rows, in, outw](Tape& t, int oid) {
    const auto dy = slab(t.grad(oid), 0, rows, outw);
    if (t.requires_grad(x)) {
      slab(t.grad(x), 0, rows, in).noalias() += dy * t.value(w).matrix().transpose();
    }
    if (t.requires_grad(w)) {
      t.grad(w).matrix().noalias() += slab(t.value(x), 0, rows, in).transpose() * dy;
    }
    if (bid >= 0 && t.requires_grad(bid)) {
      slab(t.grad(bid), 0, 1, outw) += dy.colwise().sum();
    }
  });
}

// --- elementwise -------------------------------------------------------------

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  out.matrix() += b.value().matrix();
  return a.tape->emit("add", {a, b}, std::move(out), [a = a.id, b = b.id](Tape& t, int o) {
    if (t.requires_grad(a)) t.grad(a).matrix() += t.grad(o).matrix();
    if (t.requires_grad(b)) t.grad(b).matrix() += t.grad(o).matrix();
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  out.matrix() -= b.value().matrix();
  return a.tape->emit("sub", {a, b}, std::move(out), [a = a.id, b = b.id](Tape& t, int o) {
    if (t.requires_grad(a)) t.grad(a).matrix() += t.grad(o).matrix();
    if (t.requires_grad(b)) t.grad(b).matrix() -= t.grad(o).matrix();
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  out.matrix().array() *= b.value().matrix().array();
  return a.tape->emit("mul", {a, b}, std::move(out), [a = a.id, b = b.id](Tape& t, int o) {
    const auto dy = t.grad(o).matrix().array();
    if (t.requires_grad(a)) t.grad(a).matrix().array() += dy * t.value(b).matrix().array();
    if (t.requires_grad(b)) t.grad(b).matrix().array() += dy * t.value(a).matrix().array();
  });
}

Var scale(Var a, float s) {
  Tensor out = a.value();
  out.matrix() *= s;
  return a.tape->emit("scale", {a}, std::move(out), [a = a.id, s](Tape& t, int o) {
    t.grad(a).matrix() += s * t.grad(o).matrix();
  });
}

Var scale_by(Var a, Var s) {
  if (s.value().size() != 1) {
    throw DimensionError("scale_by: factor must have one element, got " +
                         shape_str(s.value().shape()));
  }
  const float f = s.value()[0];
  Tensor out = a.value();
  out.matrix() *= f;
  return a.tape->emit("scale_by", {a, s}, std::move(out), [a = a.id, s = s.id](Tape& t, int o) {
    const Tensor& dy = t.grad(o);
    if (t.requires_grad(a)) t.grad(a).matrix() += t.value(s)[0] * dy.matrix();
    if (t.requires_grad(s)) {
      double acc = 0.0;
      const Tensor& x = t.value(a);
      for (std::size_t i = 0; i < x.size(); ++i) acc += double(dy[i]) * x[i];
      t.grad(s)[0] += static_cast<float>(acc);
    }
  });
}

// --- activations and normalization ------------------------------------------

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

float gelu_scalar(float x) {
  return 0.5f * x * (1.0f + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

Var gelu(Var x) {
  const Tensor& X = x.value();
  Tensor out(X.shape());
  const auto v = flat(X);
  flat(out) = 0.5f * v * (1.0f + (kGeluC * (v + kGeluA * v.cube())).tanh());
  return x.tape->emit("gelu", {x}, std::move(out), [x = x.id](Tape& t, int o) {
    const auto v = flat(t.value(x));
    const Eigen::ArrayXf th = (kGeluC * (v + kGeluA * v.cube())).tanh();
    flat(t.grad(x)) += flat(t.grad(o)) *
                       (0.5f * (1.0f + th) +
                        0.5f * v * (1.0f - th.square()) * kGeluC * (1.0f + 3.0f * kGeluA * v.square()));
  });
}

Var layer_norm(Var x, Var gain, Var bias, float eps) {
  const Tensor& X = x.value();
  if (X.rank() < 1 || X.size() == 0) throw DimensionError("layer_norm: empty input");
  const int d = X.shape().back();
  if (d == 0) throw DimensionError("layer_norm: last axis has size 0");
  if (!(eps > 0.0f)) throw ValueError("layer_norm: eps must be positive");
  if (gain.value().size() != std::size_t(d) || bias.value().size() != std::size_t(d)) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.value().shape()) +
                         " do not match feature width " + std::to_string(d));
  }
  const Eigen::Index rows = static_cast<Eigen::Index>(X.size() / d);
  Tensor out(X.shape());
  // Saved per-row statistics: normalized input and inverse std.
  auto xhat = std::make_shared<Tensor>(X.shape());
  auto inv_std = std::make_shared<std::vector<float>>(rows);
  const float* g = gain.value().data();
  const float* bb = bias.value().data();
  for (Eigen::Index r = 0; r < rows; ++r) {
    const float* xr = X.data() + r * d;
    float mu = 0.0f;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= d;
    float var = 0.0f;
    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= d;
    const float is = 1.0f / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    float* hr = xhat->data() + r * d;
    float* yr = out.data() + r * d;
    for (int j = 0; j < d; ++j) {
      hr[j] = (xr[j] - mu) * is;
      yr[j] = g[j] * hr[j] + bb[j];
    }
  }
  return x.tape->emit("layer_norm", {x, gain, bias}, std::move(out),
                      [x = x.id, gn = gain.id, bs = bias.id, xhat, inv_std, rows, d](Tape& t,
                                                                                    int o) {
    const Tensor& dy = t.grad(o);
    const float* g = t.value(gn).data();
    if (t.requires_grad(gn)) {
      float* dg = t.grad(gn).data();
      for (Eigen::Index r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) dg[j] += dy[r * d + j] * (*xhat)[r * d + j];
    }
    if (t.requires_grad(bs)) {
      float* db = t.grad(bs).data();
      for (Eigen::Index r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) db[j] += dy[r * d + j];
    }
    if (t.requires_grad(x)) {
      float* dx = t.grad(x).data();
      for (Eigen::Index r = 0; r < rows; ++r) {
        const float* dyr = dy.data() + r * d;
        const float* hr = xhat->data() + r * d;
        float m1 = 0.0f, m2 = 0.0f;
        for (int j = 0; j < d; ++j) {
          const float dh = dyr[j] * g[j];
          m1 += dh;
          m2 += dh * hr[j];
        }
        m1 /= d;
        m2 /= d;
        const float is = (*inv_std)[r];
        for (int j = 0; j < d; ++j) {
          dx[r * d + j] += is * (dyr[j] * g[j] - m1 - hr[j] * m2);
        }
      }
    }
  });
}

Var softmax_lastdim(Var x, const Tensor* additive_mask) {
  const Tensor& X = x.value();
  if (additive_mask != nullptr && additive_mask->shape() != X.shape()) {
    throw DimensionError("softmax_lastdim: mask " + shape_str(additive_mask->shape()) +
                         " does not match input " + shape_str(X.shape()));
  }
  const int n = X.shape().back();
  const Eigen::Index rows = static_cast<Eigen::Index>(X.size() / n);
  constexpr float kNegInf = -std::numeric_limits<float>::infinity();
  using Row = Eigen::Map<Eigen::ArrayXf>;
  using ConstRow = Eigen::Map<const Eigen::ArrayXf>;
  Tensor out(X.shape());
  for (Eigen::Index r = 0; r < rows; ++r) {
    const ConstRow xr(X.data() + r * n, n);
    Row yr(out.data() + r * n, n);
    if (additive_mask == nullptr) {
      yr = (xr - xr.maxCoeff()).exp();
    } else {
      // Any nonzero mask entry is a disallowed key. Plain loops so the
      // compiler can if-convert them.
      const float* mr = additive_mask->data() + r * n;
      float* y = yr.data();
      for (int j = 0; j < n; ++j) y[j] = mr[j] == 0.0f ? xr[j] : kNegInf;
      const float mx = yr.maxCoeff();
      if (mx == kNegInf) {  // fully masked row
        yr.setZero();
        continue;
      }
      yr = (yr - mx).exp();
      for (int j = 0; j < n; ++j) y[j] = mr[j] == 0.0f ? y[j] : 0.0f;
    }
    yr *= 1.0f / yr.sum();
  }
  return x.tape->emit("softmax", {x}, std::move(out), [x = x.id, n, rows](Tape& t, int o) {
    const Tensor& y = t.value(o);
    const Tensor& dy = t.grad(o);
    Tensor& dx = t.grad(x);
    for (Eigen::Index r = 0; r < rows; ++r) {
      const ConstRow yr(y.data() + r * n, n);
      const ConstRow gr(dy.data() + r * n, n);
      Row(dx.data() + r * n, n) += yr * (gr - (yr * gr).sum());
    }
  });
}

// --- shape plumbing ---------------------------------------------------------

Var gather(Var x, IndexMap index, Shape out_shape) {
  const Tensor& X = x.value();
  if (shape_numel(out_shape) != index->size()) {
    throw DimensionError("gather: index length " + std::to_string(index->size()) +
                         " does not match output shape " + shape_str(out_shape));
  }
  Tensor out(std::move(out_shape));
  const int limit = static_cast<int>(X.size());
  const std::vector<int>& idx = *index;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const int j = idx[i];
    if (j >= limit) throw DimensionError("gather: index out of range");
    out[i] = j >= 0 ? X[j] : 0.0f;
  }
  return x.tape->emit("gather", {x}, std::move(out), [x = x.id, index](Tape& t, int o) {
    const Tensor& dy = t.grad(o);
    Tensor& dx = t.grad(x);
    const std::vector<int>& idx = *index;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= 0) dx[idx[i]] += dy[i];
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape->emit("reshape", {x}, std::move(out), [x = x.id](Tape& t, int o) {
    Tensor& dx = t.grad(x);
    const Tensor& dy = t.grad(o);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
}

// --- reductions ---------------------------------------------------------------

Var sum(Var x) {
  double acc = 0.0;
  for (float v : x.value().values()) acc += v;
  return x.tape->emit("sum", {x}, Tensor::scalar(static_cast<float>(acc)),
                      [x = x.id](Tape& t, int o) {
    t.grad(x).matrix().array() += t.grad(o)[0];
  });
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  double acc = 0.0;
  for (float v : x.value().values()) acc += v;
  return x.tape->emit("mean", {x}, Tensor::scalar(static_cast<float>(acc / double(n))),
                      [x = x.id, n](Tape& t, int o) {
    t.grad(x).matrix().array() += t.grad(o)[0] / static_cast<float>(n);
  });
}

Var mean_axis1(Var x) {
  const Tensor& X = x.value();
  if (X.rank() != 3) throw DimensionError("mean_axis1: expected rank 3, got " + shape_str(X.shape()));
  const int a = X.dim(0), b = X.dim(1), c = X.dim(2);
  Tensor out(Shape{a, c}, 0.0f);
  for (int i = 0; i < a; ++i) {
    for (int j = 0; j < b; ++j)
      for (int k = 0; k < c; ++k) out.at(i, k) += X.at(i, j, k);
    for (int k = 0; k < c; ++k) out.at(i, k) /= static_cast<float>(b);
  }
  return x.tape->emit("mean_axis1", {x}, std::move(out), [x = x.id, a, b, c](Tape& t, int o) {
    const Tensor& dy = t.grad(o);
    Tensor& dx = t.grad(x);
    const float inv = 1.0f / static_cast<float>(b);
    for (int i = 0; i < a; ++i)
      for (int j = 0; j < b; ++j)
        for (int k = 0; k < c; ++k) dx.at(i, j, k) += dy.at(i, k) * inv;
  });
}

// --- resampling -----------------------------------------------------------------

namespace {

struct AxisTaps {
  std::vector<int> lo, hi;
  std::vector<float> w;  // weight of `hi`
};

// align_corners = false source coordinates, clamped at the borders.
AxisTaps axis_taps(int in, int factor) {
  const int out = in * factor;
  AxisTaps taps{std::vector<int>(out), std::vector<int>(out), std::vector<float>(out)};
  for (int o = 0; o < out; ++o) {
    float src = (static_cast<float>(o) + 0.5f) / static_cast<float>(factor) - 0.5f;
    if (src < 0.0f) src = 0.0f;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps.lo[o] = i0;
    taps.hi[o] = i1;
    taps.w[o] = src - static_cast<float>(i0);
  }
  return taps;
}

}  // namespace

Var bilinear_upsample(Var x, int factor) {
  if (factor < 1) throw ValueError("bilinear_upsample: factor must be >= 1, got " +
                                   std::to_string(factor));
  const Tensor& X = x.value();
  if (X.rank() < 2) throw DimensionError("bilinear_upsample: need rank >= 2");
  const int h = X.dim(-2), w = X.dim(-1);
  const int planes = static_cast<int>(X.size() / (std::size_t(h) * w));
  if (factor == 1) {
    return x.tape->emit("upsample", {x}, Tensor(X), [x = x.id](Tape& t, int o) {
      t.grad(x).matrix() += t.grad(o).matrix();
    });
  }
  const int oh = h * factor, ow = w * factor;
  Shape out_shape = X.shape();
  out_shape[out_shape.size() - 2] = oh;
  out_shape[out_shape.size() - 1] = ow;
  auto ty = std::make_shared<AxisTaps>(axis_taps(h, factor));
  auto tx = std::make_shared<AxisTaps>(axis_taps(w, factor));
  Tensor out(out_shape);
  for (int p = 0; p < planes; ++p) {
    const float* src = X.data() + std::size_t(p) * h * w;
    float* dst = out.data() + std::size_t(p) * oh * ow;
    for (int yo = 0; yo < oh; ++yo) {
      const float wy = ty->w[yo];
      const float* r0 = src + ty->lo[yo] * w;
      const float* r1 = src + ty->hi[yo] * w;
      for (int xo = 0; xo < ow; ++xo) {
        const float wx = tx->w[xo];
        const int x0 = tx->lo[xo], x1 = tx->hi[xo];
        const float top = r0[x0] + wx * (r0[x1] - r0[x0]);
        const float bot = r1[x0] + wx * (r1[x1] - r1[x0]);
        dst[yo * ow + xo] = top + wy * (bot - top);
      }
    }
  }
  return x.tape->emit("upsample", {x}, std::move(out),
                      [x = x.id, ty, tx, planes, h, w, oh, ow](Tape& t, int o) {
    const Tensor& dy = t.grad(o);
    Tensor& dx = t.grad(x);
    for (int p = 0; p < planes; ++p) {
      const float* g = dy.data() + std::size_t(p) * oh * ow;
      float* d = dx.data() + std::size_t(p) * h * w;
      for (int yo = 0; yo < oh; ++yo) {
        const float wy = ty->w[yo];
        float* r0 = d + ty->lo[yo] * w;
        float* r1 = d + ty->hi[yo] * w;
        for (int xo = 0; xo < ow; ++xo) {
          const float wx = tx->w[xo];
          const float v = g[yo * ow + xo];
          r0[tx->lo[xo]] += (1.0f - wy) * (1.0f - wx) * v;
          r0[tx->hi[xo]] += (1.0f - wy) * wx * v;
          r1[tx->lo[xo]] += wy * (1.0f - wx) * v;
          r1[tx->hi[xo]] += wy * wx * v;
        }
      }
    }
  });
}

// --- loss -------------------------------------------------------------------------

Var bce_with_logits(Var logits, const Tensor& targets) {
  const Tensor& X = logits.value();
  require_same_shape("bce_with_logits", X, targets);
  for (float y : targets.values()) {
    if (!(y >= 0.0f && y <= 1.0f)) {
      throw ValueError("bce_with_logits: target " + std::to_string(y) + " outside [0,1]");
    }
  }
  const std::size_t n = X.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const float x = X[i];
    acc += std::max(x, 0.0f) - x * targets[i] + std::log1p(std::exp(-std::fabs(x)));
  }
  auto y = std::make_shared<Tensor>(targets);
  return logits.tape->emit("bce", {logits}, Tensor::scalar(static_cast<float>(acc / double(n))),
                           [x = logits.id, y, n](Tape& t, int o) {
    const Tensor& X = t.value(x);
    Tensor& dx = t.grad(x);
    const float scale = t.grad(o)[0] / static_cast<float>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const float s = 1.0f / (1.0f + std::exp(-X[i]));
      dx[i] += scale * (s - (*y)[i]);
    }
  });
}

}  // namespace nfa
