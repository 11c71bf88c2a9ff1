#pragma once

// Reference implementations and checkers shared by the test suite, the
// acceptance binary and `nfa selfcheck`. Nothing here is used on the
// training or inference path.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nfa/attention.hpp"
#include "nfa/autograd.hpp"
#include "nfa/model.hpp"

namespace nfa::verify {

// --- oracles ---------------------------------------------------------------

/// Exhaustive masked attention in double: for each query row, softmax of
/// q.k/sqrt(d) over the allowed keys only, times V. No residual.
std::vector<std::vector<double>> naa_reference(const Tensor& q, const Tensor& k, const Tensor& v,
                                               const Tensor& allow);

/// Sorting-based selection: indices of the k smallest entries of `row`,
/// stable on ties.
std::vector<int> topk_smallest_reference(const std::vector<float>& row, int k);

/// ceil(num * n / den) in integers.
int ceil_ratio(int n, int num, int den);

// --- gradient checks --------------------------------------------------------

struct GradCheckOptions {
  double step = 1e-2;
  double rel_tol = 1e-2;
  double abs_tol = 1e-4;
  /// Entries sampled per input; 0 checks every entry.
  int max_entries = 0;
  std::uint64_t seed = 7;
};

struct GradCheckStats {
  int checked = 0;
  int skipped = 0;  // entries whose top-k selection changed under +-step
  double worst_abs = 0.0;
  double worst_rel = 0.0;
  std::string worst_where;
  bool pass = true;
};

/// One differentiable operation under test. `build` maps tape leaves for
/// `inputs` to the output whose VJP is checked.
struct OpCase {
  std::string name;
  std::vector<Tensor> inputs;
  std::function<Var(Tape&, const std::vector<Var>&)> build;
};

/// Every tape operation, plus the attention composites.
std::vector<OpCase> op_cases(std::uint64_t seed);

/// Central differences of <seed, op(x)> against the tape's VJP with a
/// random seed tensor.
GradCheckStats check_op(const OpCase& op, const GradCheckOptions& options);

/// Whole-model loss gradient on a batch of two 32x32 images with the
/// minimal config. Entries whose noise-guided mask flips between the two
/// finite-difference evaluations are skipped and counted.
GradCheckStats check_model_gradients(const ModelConfig& config, const GradCheckOptions& options);

// --- invariant suites ---------------------------------------------------------

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

std::vector<CheckResult> gradient_suite(std::uint64_t seed);
CheckResult mask_cardinality_suite(std::uint64_t seed);
CheckResult naa_oracle_suite(std::uint64_t seed);
CheckResult diffusion_contraction_suite(std::uint64_t seed);

/// All of the above, in that order.
std::vector<CheckResult> selfcheck(std::uint64_t seed);

}  // namespace nfa::verify
