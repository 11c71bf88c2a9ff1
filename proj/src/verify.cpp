#include "nfa/verify.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>

#include "nfa/rng.hpp"

namespace nfa::verify {

namespace {

Tensor randn(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  Tensor t(std::move(shape));
  for (float& v : t.values()) v = static_cast<float>(sd * normal(rng));
  return t;
}

Tensor rand_uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (float& v : t.values()) v = static_cast<float>(uniform(rng, lo, hi));
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * double(b[i]);
  return s;
}

// Records one analytic/numeric pair into `stats`.
void compare(GradCheckStats& stats, double analytic, double numeric,
             const GradCheckOptions& o, const std::string& where) {
  const double err = std::fabs(analytic - numeric);
  const double rel = err / std::max({std::fabs(analytic), std::fabs(numeric), 1e-30});
  ++stats.checked;
  const bool ok = err <= o.abs_tol || rel <= o.rel_tol;
  if (!ok && stats.pass) {
    std::ostringstream msg;
    msg << where << " analytic " << analytic << " numeric " << numeric;
    stats.worst_where = msg.str();
  }
  if (!ok) stats.pass = false;
  if (err > o.abs_tol) stats.worst_rel = std::max(stats.worst_rel, rel);
  stats.worst_abs = std::max(stats.worst_abs, err);
}

std::vector<std::size_t> pick_entries(std::size_t n, int max_entries, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (max_entries <= 0 || n <= std::size_t(max_entries)) return idx;
  for (std::size_t i = 0; i < std::size_t(max_entries); ++i) {
    const auto j = i + static_cast<std::size_t>(uniform01(rng) * double(n - i));
    std::swap(idx[i], idx[std::min(j, n - 1)]);
  }
  idx.resize(max_entries);
  return idx;
}

IndexMap index_map(std::vector<int> v) {
  return std::make_shared<const std::vector<int>>(std::move(v));
}

}  // namespace

// --- oracles ---------------------------------------------------------------

std::vector<std::vector<double>> naa_reference(const Tensor& q, const Tensor& k, const Tensor& v,
                                               const Tensor& allow) {
  const int n = q.dim(0), d = q.dim(1), dv = v.dim(1);
  std::vector<std::vector<double>> out(n, std::vector<double>(dv, 0.0));
  for (int i = 0; i < n; ++i) {
    std::vector<double> logit(n, 0.0);
    double top = -1e300;
    for (int j = 0; j < n; ++j) {
      if (allow[std::size_t(i) * n + j] == 0.0f) continue;
      for (int c = 0; c < d; ++c) logit[j] += double(q.at(i, c)) * double(k.at(j, c));
      logit[j] /= std::sqrt(double(d));
      top = std::max(top, logit[j]);
    }
    double z = 0.0;
    std::vector<double> w(n, 0.0);
    for (int j = 0; j < n; ++j) {
      if (allow[std::size_t(i) * n + j] == 0.0f) continue;
      w[j] = std::exp(logit[j] - top);
      z += w[j];
    }
    if (z == 0.0) continue;
    for (int j = 0; j < n; ++j)
      for (int c = 0; c < dv; ++c) out[i][c] += w[j] / z * double(v.at(j, c));
  }
  return out;
}

std::vector<int> topk_smallest_reference(const std::vector<float>& row, int k) {
  std::vector<int> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return row[a] < row[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

int ceil_ratio(int n, int num, int den) { return (num * n + den - 1) / den; }

// --- gradient checks --------------------------------------------------------

std::vector<OpCase> op_cases(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, 0x0C45E5));
  std::vector<OpCase> cases;
  auto add_case = [&](std::string name, std::vector<Tensor> inputs,
                      std::function<Var(Tape&, const std::vector<Var>&)> build) {
    cases.push_back(OpCase{std::move(name), std::move(inputs), std::move(build)});
  };
  using V = const std::vector<Var>&;

  add_case("matmul", {randn({3, 4}, rng), randn({4, 5}, rng)},
           [](Tape&, V x) { return matmul(x[0], x[1]); });
  add_case("matmul_batched", {randn({2, 3, 4}, rng), randn({2, 4, 2}, rng)},
           [](Tape&, V x) { return matmul(x[0], x[1]); });
  add_case("matmul_bt", {randn({2, 3, 4}, rng), randn({2, 5, 4}, rng)},
           [](Tape&, V x) { return matmul_bt(x[0], x[1]); });
  add_case("linear", {randn({2, 3, 4}, rng), randn({4, 5}, rng), randn({5}, rng)},
           [](Tape&, V x) { return linear(x[0], x[1], x[2]); });
  add_case("add", {randn({3, 4}, rng), randn({3, 4}, rng)},
           [](Tape&, V x) { return add(x[0], x[1]); });
  add_case("sub", {randn({3, 4}, rng), randn({3, 4}, rng)},
           [](Tape&, V x) { return sub(x[0], x[1]); });
  add_case("mul", {randn({3, 4}, rng), randn({3, 4}, rng)},
           [](Tape&, V x) { return mul(x[0], x[1]); });
  add_case("scale", {randn({3, 4}, rng)}, [](Tape&, V x) { return scale(x[0], -0.7f); });
  add_case("scale_by", {randn({3, 4}, rng), randn({1}, rng)},
           [](Tape&, V x) { return scale_by(x[0], x[1]); });
  add_case("gelu", {randn({4, 6}, rng, 1.5)}, [](Tape&, V x) { return gelu(x[0]); });
  add_case("layer_norm", {randn({4, 6}, rng), randn({6}, rng), randn({6}, rng)},
           [](Tape&, V x) { return layer_norm(x[0], x[1], x[2]); });
  add_case("softmax", {randn({3, 5}, rng)}, [](Tape&, V x) { return softmax_lastdim(x[0]); });
  {
    const float inf = std::numeric_limits<float>::infinity();
    auto mask = std::make_shared<Tensor>(
        Shape{3, 5}, std::vector<float>{0, -inf, 0, 0, -inf,      //
                                        -inf, -inf, -inf, -inf, -inf,  // fully masked row
                                        -inf, 0, -inf, -inf, -inf});
    add_case("softmax_masked", {randn({3, 5}, rng)},
             [mask](Tape&, V x) { return softmax_lastdim(x[0], mask.get()); });
  }
  add_case("gather", {randn({2, 3}, rng)}, [](Tape&, V x) {
    return gather(x[0], index_map({5, -1, 0, 0, 3, 2, -1, 1}), Shape{2, 4});
  });
  add_case("reshape", {randn({2, 6}, rng)},
           [](Tape&, V x) { return reshape(x[0], Shape{3, 4}); });
  add_case("sum", {randn({3, 4}, rng)}, [](Tape&, V x) { return sum(x[0]); });
  add_case("mean", {randn({3, 4}, rng)}, [](Tape&, V x) { return mean(x[0]); });
  add_case("mean_axis1", {randn({2, 3, 4}, rng)}, [](Tape&, V x) { return mean_axis1(x[0]); });
  add_case("upsample", {randn({2, 3, 3}, rng)},
           [](Tape&, V x) { return bilinear_upsample(x[0], 2); });
  add_case("upsample_x4", {randn({1, 2, 3}, rng)},
           [](Tape&, V x) { return bilinear_upsample(x[0], 4); });
  {
    auto targets = std::make_shared<Tensor>(rand_uniform({2, 5}, rng, 0.0, 1.0));
    add_case("bce", {randn({2, 5}, rng, 2.0)},
             [targets](Tape&, V x) { return bce_with_logits(x[0], *targets); });
  }
  add_case("attention_matrix", {randn({4, 3}, rng), randn({4, 3}, rng)},
           [](Tape&, V x) { return attention_matrix(x[0], x[1]); });
  {
    auto mask = std::make_shared<NoiseMask>(
        topk_dissimilar_mask(rand_uniform({5, 5}, rng, 0.0, 1.0), 0.4));
    for (MaskMode mode : {MaskMode::kRenormalized, MaskMode::kPostSoftmax}) {
      add_case(mode == MaskMode::kRenormalized ? "naa_attention" : "naa_attention_post_softmax",
               {randn({5, 4}, rng), randn({5, 4}, rng), randn({5, 4}, rng), randn({5, 4}, rng)},
               [mask, mode](Tape&, V x) { return naa_attention(x[0], x[1], x[2], *mask, x[3], mode); });
    }
  }
  {
    const TokenLayout layout{2, 4, 4, 4};
    add_case("fix_sparse_attention",
             {randn({32, 4}, rng), randn({32, 4}, rng), randn({32, 4}, rng)},
             [layout](Tape&, V x) { return grouped_attention(x[0], x[1], x[2], layout, 2, 2); });
    auto allow = std::make_shared<Tensor>(
        topk_dissimilar_mask(rand_uniform({4, 16, 16}, rng, 0.0, 1.0), 0.25).allow);
    add_case("grouped_attention_masked",
             {randn({32, 4}, rng), randn({32, 4}, rng), randn({32, 4}, rng)},
             [layout, allow](Tape&, V x) {
               return grouped_attention(x[0], x[1], x[2], layout, 2, 1, allow.get());
             });
  }
  return cases;
}

GradCheckStats check_op(const OpCase& op, const GradCheckOptions& o) {
  std::mt19937_64 rng(derive_seed(o.seed, name_hash(op.name)));
  std::vector<Parameter> leaves;
  leaves.reserve(op.inputs.size());
  for (std::size_t i = 0; i < op.inputs.size(); ++i) {
    leaves.emplace_back(op.name + ".in" + std::to_string(i), op.inputs[i]);
  }
  auto run = [&](Tape& tape) {
    std::vector<Var> vars;
    for (Parameter& p : leaves) vars.push_back(tape.watch(p));
    return op.build(tape, vars);
  };

  Tensor seed;
  {
    Tape tape;
    const Var out = run(tape);
    seed = randn(out.shape(), rng);
    tape.backward(out, seed);
  }
  auto objective = [&] {
    Tape tape;
    return dot(seed, run(tape).value());
  };

  GradCheckStats stats;
  for (Parameter& p : leaves) {
    const Tensor analytic = p.grad;
    for (std::size_t j : pick_entries(p.value.size(), o.max_entries, rng)) {
      const float orig = p.value[j];
      const float hi = static_cast<float>(orig + o.step), lo = static_cast<float>(orig - o.step);
      p.value[j] = hi;
      const double fp = objective();
      p.value[j] = lo;
      const double fm = objective();
      p.value[j] = orig;
      compare(stats, analytic[j], (fp - fm) / (double(hi) - double(lo)), o,
              p.name + "[" + std::to_string(j) + "]");
    }
  }
  return stats;
}

GradCheckStats check_model_gradients(const ModelConfig& config, const GradCheckOptions& o) {
  std::mt19937_64 rng(derive_seed(o.seed, 0xE2E));
  NfaVit model(config);
  const int b = 2, h = 32, w = 32;
  const Tensor images = rand_uniform({b, 3, h, w}, rng, 0.0, 1.0);
  const Tensor labels(Shape{b}, {0.0f, 1.0f});
  Tensor masks(Shape{b, h, w});
  for (int y = 6; y < 22; ++y)
    for (int x = 10; x < 26; ++x) masks.at(1, y, x) = 1.0f;

  struct Eval {
    double loss;
    std::vector<Tensor> selection;
  };
  auto evaluate_loss = [&](bool track) {
    Tape tape;
    const ForwardResult r = model.forward(tape, images, track);
    const Var loss = nfa_loss(r.mask_logits, r.cls_logits, labels, masks, config.loss_mode);
    Eval e{loss.value().item(), {}};
    for (const NoiseMask& m : r.masks) e.selection.push_back(m.allow);
    if (track) tape.backward(loss);
    return e;
  };
  auto same_selection = [](const Eval& a, const Eval& b) {
    for (std::size_t s = 0; s < a.selection.size(); ++s) {
      if (a.selection[s].vec() != b.selection[s].vec()) return false;
    }
    return true;
  };

  model.params().zero_grad();
  const Eval base = evaluate_loss(true);
  GradCheckStats stats;
  ParameterStore& ps = model.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Parameter& p = ps[i];
    if (!p.trainable) continue;
    const Tensor analytic = p.grad;
    for (std::size_t j : pick_entries(p.value.size(), o.max_entries, rng)) {
      // Richardson: (4 D(h/2) - D(h)) / 3 cancels the h^2 term of the
      // central difference, which dominates on high-curvature entries.
      const float orig = p.value[j];
      double d[2];
      bool flipped = false;
      for (int k = 0; k < 2 && !flipped; ++k) {
        const double step = k == 0 ? o.step : 0.5 * o.step;
        const float hi = static_cast<float>(orig + step), lo = static_cast<float>(orig - step);
        p.value[j] = hi;
        const Eval fp = evaluate_loss(false);
        p.value[j] = lo;
        const Eval fm = evaluate_loss(false);
        flipped = !same_selection(base, fp) || !same_selection(base, fm);
        d[k] = (fp.loss - fm.loss) / (double(hi) - double(lo));
      }
      p.value[j] = orig;
      if (flipped) {
        ++stats.skipped;
        continue;
      }
      compare(stats, analytic[j], (4.0 * d[1] - d[0]) / 3.0, o,
              p.name + "[" + std::to_string(j) + "]");
    }
  }
  if (stats.checked == 0) {
    stats.pass = false;
    stats.worst_where = "no entry could be checked";
  }
  return stats;
}

// --- invariant suites ---------------------------------------------------------

namespace {

std::string describe(const GradCheckStats& s) {
  std::ostringstream out;
  out << s.checked << " entries";
  if (s.skipped) out << " (" << s.skipped << " skipped at selection changes)";
  out << ", max abs err " << s.worst_abs;
  if (!s.pass) out << "; first failure " << s.worst_where;
  return out.str();
}

}  // namespace

std::vector<CheckResult> gradient_suite(std::uint64_t seed) {
  std::vector<CheckResult> out;
  GradCheckOptions o;
  o.seed = seed;
  for (const OpCase& op : op_cases(seed)) {
    const GradCheckStats s = check_op(op, o);
    out.push_back({"gradcheck:" + op.name, s.pass, describe(s)});
  }
  GradCheckOptions e2e = o;
  e2e.max_entries = 3;
  ModelConfig cfg = tiny_model_config();
  cfg.init_seed = seed;
  const GradCheckStats s = check_model_gradients(cfg, e2e);
  out.push_back({"gradcheck:model_end_to_end", s.pass, describe(s)});
  return out;
}

CheckResult mask_cardinality_suite(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, 0xCA4D));
  const std::vector<std::pair<int, int>> ratios{{1, 10}, {1, 4}, {1, 2}, {3, 4},
                                                {1, 1},  {1, 3}, {2, 7}, {1, 100}};
  int rows = 0;
  for (int n : {1, 2, 3, 5, 7, 16, 30, 64, 100}) {
    for (auto [num, den] : ratios) {
      for (int heads : {1, 3}) {
        Tensor att = rand_uniform({heads, n, n}, rng, 0.0, 1.0);
        // Coarse levels force ties in half of the trials.
        if (uniform01(rng) < 0.5) {
          for (float& v : att.values()) v = std::floor(v * 4.0f) / 4.0f;
        }
        const double ratio = double(num) / den;
        const NoiseMask mask = topk_dissimilar_mask(att, ratio);
        const int want = std::max(1, ceil_ratio(n, num, den));
        if (mask.k != want) {
          return {"mask_cardinality", false,
                  "N=" + std::to_string(n) + " ratio=" + std::to_string(ratio) + ": k=" +
                      std::to_string(mask.k) + ", expected " + std::to_string(want)};
        }
        for (int h = 0; h < heads; ++h)
          for (int i = 0; i < n; ++i) {
            const std::size_t base = (std::size_t(h) * n + i) * n;
            std::vector<float> row(att.data() + base, att.data() + base + n);
            std::vector<int> chosen;
            for (int j = 0; j < n; ++j)
              if (mask.allow[base + j] == 1.0f) chosen.push_back(j);
            if (int(chosen.size()) != want || chosen != topk_smallest_reference(row, want)) {
              return {"mask_cardinality", false,
                      "N=" + std::to_string(n) + " ratio=" + std::to_string(ratio) + " head " +
                          std::to_string(h) + " row " + std::to_string(i) + ": selected " +
                          std::to_string(chosen.size()) + " entries, expected " +
                          std::to_string(want)};
            }
            ++rows;
          }
      }
    }
  }
  if (topk_count(64, 0.25) != 16) return {"mask_cardinality", false, "default ratio: k != 16 at N=64"};
  return {"mask_cardinality", true, std::to_string(rows) + " rows match ceil(ratio*N)"};
}

CheckResult naa_oracle_suite(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, 0x0AA));
  double worst = 0.0, worst_sum = 0.0;
  int trials = 0;
  for (int n = 1; n <= 6; ++n) {
    for (int t = 0; t < 20; ++t) {
      const int d = 1 + static_cast<int>(uniform01(rng) * 4);
      const double ratio = std::max(0.05, uniform01(rng));
      const Tensor q = randn({n, d}, rng), k = randn({n, d}, rng), v = randn({n, d}, rng);
      const NoiseMask mask = topk_dissimilar_mask(rand_uniform({n, n}, rng, 0.0, 1.0), ratio);
      Tape tape;
      const Tensor got = naa_attention(tape.constant(q), tape.constant(k), tape.constant(v), mask).value();
      const auto want = naa_reference(q, k, v, mask.allow);
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) worst = std::max(worst, std::fabs(got.at(i, c) - want[i][c]));

      // With V = I the output rows are the attention weights themselves.
      Tensor eye(Shape{n, n});
      for (int i = 0; i < n; ++i) eye.at(i, i) = 1.0f;
      const Tensor qn = randn({n, n}, rng), kn = randn({n, n}, rng);
      const Tensor weights =
          naa_attention(tape.constant(qn), tape.constant(kn), tape.constant(eye), mask).value();
      for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
          if (mask.allow.at(0, i, j) == 0.0f && weights.at(i, j) != 0.0f) {
            return {"naa_oracle", false, "disallowed key received weight"};
          }
          s += weights.at(i, j);
        }
        worst_sum = std::max(worst_sum, std::fabs(s - 1.0));
      }
      ++trials;
    }
  }
  std::ostringstream msg;
  msg << trials << " instances, max |diff| " << worst << ", max |row sum - 1| " << worst_sum;
  return {"naa_oracle", worst <= 1e-6 && worst_sum <= 1e-6, msg.str()};
}

CheckResult diffusion_contraction_suite(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, 0xD1F));
  constexpr double kFloatSlack = 1e-6;
  int trials = 0;
  for (int t = 0; t < 40; ++t) {
    const int n = 4 + static_cast<int>(uniform01(rng) * 30), d = 1 + static_cast<int>(uniform01(rng) * 8);
    FeatureGrid grid{randn({n, d}, rng), std::vector<bool>(n, false)};
    grid.forged[static_cast<std::size_t>(uniform01(rng) * n)] = true;
    for (int i = 0; i < n; ++i)
      if (uniform01(rng) < 0.3) grid.forged[i] = true;
    std::vector<double> centroid(d, 0.0);
    int m = 0;
    for (int i = 0; i < n; ++i)
      if (grid.forged[i]) {
        ++m;
        for (int c = 0; c < d; ++c) centroid[c] += grid.features.at(i, c);
      }
    for (double& c : centroid) c /= m;
    auto distances = [&](const FeatureGrid& g) {
      std::vector<double> out;
      for (int i = 0; i < n; ++i) {
        if (grid.forged[i]) continue;
        double s = 0.0;
        for (int c = 0; c < d; ++c) s += std::pow(g.features.at(i, c) - centroid[c], 2);
        out.push_back(std::sqrt(s));
      }
      return out;
    };
    const double beta = t == 0 ? 1.0 : std::max(1e-3, uniform01(rng));
    const DiffusionOracleConfig cfg{1.0 - beta, beta};
    std::vector<double> prev = distances(grid);
    for (int layers = 1; layers <= 6; ++layers) {
      const std::vector<double> cur = distances(diffusion_oracle(grid, cfg, layers));
      for (std::size_t i = 0; i < cur.size(); ++i) {
        if (cur[i] > prev[i] + kFloatSlack) {
          return {"diffusion_contraction", false,
                  "distance grew at layer " + std::to_string(layers) + " (beta " +
                      std::to_string(beta) + ")"};
        }
      }
      prev = cur;
    }
    const std::vector<double> one = distances(diffusion_oracle(grid, {0.0, 1.0}, 1));
    for (double v : one) {
      if (v > kFloatSlack) return {"diffusion_contraction", false, "alpha = 0 did not converge in one layer"};
    }
    ++trials;
  }
  return {"diffusion_contraction", true, std::to_string(trials) + " grids contract"};
}

std::vector<CheckResult> selfcheck(std::uint64_t seed) {
  std::vector<CheckResult> out = gradient_suite(seed);
  out.push_back(mask_cardinality_suite(seed));
  out.push_back(naa_oracle_suite(seed));
  out.push_back(diffusion_contraction_suite(seed));
  return out;
}

}  // namespace nfa::verify
