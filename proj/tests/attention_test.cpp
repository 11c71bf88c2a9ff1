#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numeric>
#include <random>

#include "nfa/attention.hpp"
#include "nfa/rng.hpp"
#include "nfa/verify.hpp"

namespace nfa {
namespace {

Tensor random_tensor(Shape s, std::mt19937_64& rng, double sd = 1.0) {
  Tensor t(std::move(s));
  for (float& v : t.values()) v = static_cast<float>(sd * normal(rng));
  return t;
}

int randint(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(uniform01(rng) * (hi - lo + 1));
}

// Dense softmax(x x^T / sqrt(d)) x in double.
Eigen::MatrixXd dense_self_attention(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd logits = x * x.transpose() / std::sqrt(double(x.cols()));
  for (int r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    logits.row(r) = (logits.row(r).array() - m).exp().matrix();
    logits.row(r) /= logits.row(r).sum();
  }
  return logits * x;
}

// --- attention_matrix ------------------------------------------------------------

TEST(AttentionMatrixTest, Examples) {
  const Tensor u = attention_matrix(Tensor({5, 3}, 0.0f), Tensor({5, 3}, 0.0f));
  for (float v : u.values()) EXPECT_FLOAT_EQ(v, 0.2f);
  EXPECT_EQ(attention_matrix(Tensor({1, 4}, 2.0f), Tensor({1, 4}, -1.0f)).vec(), std::vector<float>{1.0f});
}

TEST(AttentionMatrixTest, MatchesScalarOracle) {
  std::mt19937_64 rng(21);
  const Tensor q = random_tensor({4, 2}, rng), k = random_tensor({4, 2}, rng);
  const Tensor a = attention_matrix(q, k);
  for (int i = 0; i < 4; ++i) {
    double l[4], z = 0.0;
    for (int j = 0; j < 4; ++j) {
      l[j] = (double(q.at(i, 0)) * k.at(j, 0) + double(q.at(i, 1)) * k.at(j, 1)) / std::sqrt(2.0);
      z += std::exp(l[j]);
    }
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(a.at(i, j), std::exp(l[j]) / z, 1e-6);
  }
}

TEST(AttentionMatrixTest, WidthMismatchThrows) {
  EXPECT_THROW(attention_matrix(Tensor({3, 2}), Tensor({3, 3})), DimensionError);
}

// --- top-k mask --------------------------------------------------------------------

TEST(TopkCountTest, CeilAndClamp) {
  EXPECT_EQ(topk_count(8, 0.25), 2);
  EXPECT_EQ(topk_count(64, 0.25), 16);
  EXPECT_EQ(topk_count(30, 0.1), 3);
  EXPECT_EQ(topk_count(9, 0.25), 3);
  EXPECT_EQ(topk_count(3, 0.1), 1);
  EXPECT_EQ(topk_count(7, 1.0), 7);
  EXPECT_THROW(topk_count(4, 0.0), ConfigError);
  EXPECT_THROW(topk_count(4, 1.5), ConfigError);
}

TEST(TopkMaskTest, Examples) {
  std::mt19937_64 rng(22);
  const NoiseMask m8 = topk_dissimilar_mask(attention_matrix(random_tensor({8, 4}, rng), random_tensor({8, 4}, rng)), 0.25);
  EXPECT_EQ(m8.k, 2);
  for (int r = 0; r < 8; ++r) {
    float s = 0;
    for (int c = 0; c < 8; ++c) s += m8.allow.at(0, r, c);
    EXPECT_EQ(s, 2.0f);
  }
  const NoiseMask all = topk_dissimilar_mask(random_tensor({5, 5}, rng), 1.0);
  for (float v : all.allow.values()) EXPECT_EQ(v, 1.0f);

  const NoiseMask hand = topk_dissimilar_mask(Tensor({3, 3}, {0.7f, 0.2f, 0.1f, 0.1f, 0.2f, 0.7f, 0.5f, 0.5f, 0.0f}), 1.0 / 3.0);
  EXPECT_EQ(hand.allow.vec(), (std::vector<float>{0, 0, 1, 1, 0, 0, 0, 0, 1}));
}

TEST(TopkMaskTest, TiesGoToLowerIndex) {
  const NoiseMask m = topk_dissimilar_mask(Tensor({4, 4}, 0.25f), 0.5);
  for (int r = 0; r < 4; ++r) {
    EXPECT_EQ(m.allow.at(0, r, 0), 1.0f);
    EXPECT_EQ(m.allow.at(0, r, 1), 1.0f);
    EXPECT_EQ(m.allow.at(0, r, 2), 0.0f);
  }
}

// Random rows (with forced ties) against a sorting oracle.
TEST(TopkMaskTest, CardinalityAndSelectionProperty) {
  std::mt19937_64 rng(23);
  for (int n = 4; n <= 64; ++n) {
    for (double ratio : {0.1, 0.25, 0.5}) {
      const int heads = randint(rng, 1, 3);
      Tensor a({heads, n, n});
      for (float& v : a.values()) v = static_cast<float>(uniform01(rng));
      if (n % 2 == 0)
        for (float& v : a.values()) v = std::round(v * 4.0f) / 4.0f;
      const NoiseMask m = topk_dissimilar_mask(a, ratio);
      const int k = static_cast<int>(std::ceil(ratio * n - 1e-9));
      ASSERT_EQ(m.k, std::max(1, k));
      ASSERT_EQ(m.heads(), heads);
      for (int h = 0; h < heads; ++h)
        for (int r = 0; r < n; ++r) {
          std::vector<float> row(a.data() + (h * n + r) * n, a.data() + (h * n + r + 1) * n);
          std::vector<float> expect(n, 0.0f);
          for (int j : verify::topk_smallest_reference(row, m.k)) expect[j] = 1.0f;
          const std::vector<float> got(m.allow.data() + (h * n + r) * n, m.allow.data() + (h * n + r + 1) * n);
          ASSERT_EQ(got, expect) << "n=" << n << " ratio=" << ratio;
        }
    }
  }
}

TEST(TopkMaskTest, InvariantToPositiveRowScaling) {
  std::mt19937_64 rng(24);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = randint(rng, 2, 20);
    Tensor a({n, n});
    for (float& v : a.values()) v = static_cast<float>(uniform01(rng));
    Tensor b = a;
    for (int r = 0; r < n; ++r) {
      const float c = std::ldexp(1.0f, randint(rng, -6, 6));
      for (int j = 0; j < n; ++j) b.at(r, j) *= c;
    }
    EXPECT_EQ(topk_dissimilar_mask(a, 0.25).allow, topk_dissimilar_mask(b, 0.25).allow);
  }
}

TEST(TopkMaskTest, SelectionLeavesNoTapeRecord) {
  std::mt19937_64 rng(25);
  Parameter pq("q", random_tensor({6, 4}, rng)), pk("k", random_tensor({6, 4}, rng));
  Tape tape;
  const Var a = attention_matrix(tape.watch(pq), tape.watch(pk));
  const std::size_t before = tape.records().size();
  const NoiseMask m = topk_dissimilar_mask(a.value(), 0.25);
  EXPECT_EQ(tape.records().size(), before);
  EXPECT_EQ(m.k, 2);
}

TEST(TopkMaskTest, RejectsNonSquare) {
  EXPECT_THROW(topk_dissimilar_mask(Tensor({3, 4}), 0.25), DimensionError);
}

// --- noise-guided attention ------------------------------------------------------

TEST(NaaTest, AllTrueMaskEqualsUnmaskedBitwise) {
  std::mt19937_64 rng(26);
  const Tensor q = random_tensor({6, 4}, rng), k = random_tensor({6, 4}, rng), v = random_tensor({6, 4}, rng);
  Tape t;
  const NoiseMask all{Tensor({1, 6, 6}, 1.0f), 6};
  const Var masked = naa_attention(t.constant(q), t.constant(k), t.constant(v), all, t.constant(v));
  const Var plain = add(t.constant(v), matmul(attention_matrix(t.constant(q), t.constant(k)), t.constant(v)));
  EXPECT_EQ(masked.value(), plain.value());
}

TEST(NaaTest, SingleAllowedKeyCopiesItsValueRow) {
  std::mt19937_64 rng(27);
  const int n = 5;
  const Tensor q = random_tensor({n, 3}, rng), k = random_tensor({n, 3}, rng), v = random_tensor({n, 3}, rng);
  const Tensor x = random_tensor({n, 3}, rng);
  Tensor allow({1, n, n}, 0.0f);
  std::vector<int> pick(n);
  for (int r = 0; r < n; ++r) allow.at(0, r, pick[r] = randint(rng, 0, n - 1)) = 1.0f;
  Tape t;
  const Tensor out =
      naa_attention(t.constant(q), t.constant(k), t.constant(v), NoiseMask{allow, 1}, t.constant(x)).value();
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < 3; ++c) EXPECT_FLOAT_EQ(out.at(r, c), x.at(r, c) + v.at(pick[r], c));
}

NoiseMask random_mask(int n, int k, std::mt19937_64& rng) {
  Tensor allow({1, n, n}, 0.0f);
  for (int r = 0; r < n; ++r) {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = n - 1; i > 0; --i) std::swap(idx[i], idx[randint(rng, 0, i)]);
    for (int i = 0; i < k; ++i) allow.at(0, r, idx[i]) = 1.0f;
  }
  return NoiseMask{allow, k};
}

TEST(NaaTest, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(28);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = randint(rng, 1, 6), d = randint(rng, 1, 4), k = randint(rng, 1, n);
    const Tensor q = random_tensor({n, d}, rng), kk = random_tensor({n, d}, rng), v = random_tensor({n, d}, rng);
    const NoiseMask m = random_mask(n, k, rng);
    Tape t;
    const Tensor out = naa_attention(t.constant(q), t.constant(kk), t.constant(v), m).value();
    const auto ref = verify::naa_reference(q, kk, v, m.allow);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < d; ++c) EXPECT_NEAR(out.at(r, c), ref[r][c], 1e-6);
  }
}

// Output rows minus the residual are convex combinations of the allowed V rows.
TEST(NaaTest, RowsLieInConvexHullOfAllowedValues) {
  std::mt19937_64 rng(29);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = randint(rng, 2, 6), d = 8, k = randint(rng, 1, n);
    const Tensor q = random_tensor({n, d}, rng), kk = random_tensor({n, d}, rng), v = random_tensor({n, d}, rng);
    const Tensor x = random_tensor({n, d}, rng);
    const NoiseMask m = random_mask(n, k, rng);
    Tape t;
    const Tensor out = naa_attention(t.constant(q), t.constant(kk), t.constant(v), m, t.constant(x)).value();
    for (int r = 0; r < n; ++r) {
      std::vector<int> allowed;
      for (int j = 0; j < n; ++j)
        if (m.allow.at(0, r, j) != 0.0f) allowed.push_back(j);
      Eigen::MatrixXd basis(d, allowed.size());
      Eigen::VectorXd target(d);
      for (int c = 0; c < d; ++c) {
        target(c) = double(out.at(r, c)) - x.at(r, c);
        for (std::size_t a = 0; a < allowed.size(); ++a) basis(c, a) = v.at(allowed[a], c);
      }
      const Eigen::VectorXd w = basis.colPivHouseholderQr().solve(target);
      EXPECT_LE((basis * w - target).norm(), 1e-5);
      EXPECT_NEAR(w.sum(), 1.0, 1e-5);
      EXPECT_GE(w.minCoeff(), -1e-5);
    }
  }
}

TEST(NaaTest, PostSoftmaxModeZeroesWithoutRenormalizing) {
  std::mt19937_64 rng(30);
  const Tensor q = random_tensor({4, 4}, rng), k = random_tensor({4, 4}, rng);
  Tensor eye({4, 4}, 0.0f);
  for (int i = 0; i < 4; ++i) eye.at(i, i) = 1.0f;
  const NoiseMask m = random_mask(4, 2, rng);
  Tape t;
  const Tensor w = naa_attention(t.constant(q), t.constant(k), t.constant(eye), m, std::nullopt, MaskMode::kPostSoftmax).value();
  const Tensor full = attention_matrix(q, k);
  for (int r = 0; r < 4; ++r) {
    double s = 0.0;
    for (int c = 0; c < 4; ++c) {
      EXPECT_NEAR(w.at(r, c), m.allow.at(0, r, c) * full.at(r, c), 1e-7);
      s += w.at(r, c);
    }
    EXPECT_LT(s, 1.0);
  }
}

TEST(NaaTest, MaskShapeMismatchThrows) {
  Tape t;
  const Var x = t.constant(Tensor({4, 2}, 1.0f));
  EXPECT_THROW(naa_attention(x, x, x, NoiseMask{Tensor({1, 3, 3}, 1.0f), 3}), DimensionError);
  EXPECT_THROW(naa_attention(x, x, x, NoiseMask{Tensor({2, 4, 4}, 1.0f), 4}), DimensionError);
}

// --- fix-sparse --------------------------------------------------------------------

Eigen::MatrixXd to_eigen(const Tensor& t) { return t.matrix().cast<double>(); }

// Explicit gather -> dense attention per head -> scatter.
Eigen::MatrixXd fix_sparse_oracle(const Tensor& x, int gh, int gw, int stride, int heads) {
  const Eigen::MatrixXd xd = to_eigen(x);
  const int d = x.dim(1), dh = d / heads;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(x.dim(0), d);
  for (int oy = 0; oy < stride; ++oy)
    for (int ox = 0; ox < stride; ++ox) {
      std::vector<int> members;
      for (int y = oy; y < gh; y += stride)
        for (int xx = ox; xx < gw; xx += stride) members.push_back(y * gw + xx);
      for (int h = 0; h < heads; ++h) {
        Eigen::MatrixXd g(members.size(), dh);
        for (std::size_t i = 0; i < members.size(); ++i) g.row(i) = xd.block(members[i], h * dh, 1, dh);
        const Eigen::MatrixXd a = dense_self_attention(g);
        for (std::size_t i = 0; i < members.size(); ++i) out.block(members[i], h * dh, 1, dh) = a.row(i);
      }
    }
  return out;
}

TEST(FixSparseTest, StrideOneIsFullAttention) {
  std::mt19937_64 rng(31);
  const Tensor x = random_tensor({16, 4}, rng);
  Tape t;
  const Tensor out = fix_sparse_attention(t.constant(x), 4, 4, 1, 1).value();
  EXPECT_LE((to_eigen(out) - dense_self_attention(to_eigen(x))).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(FixSparseTest, MatchesGatherScatterOracle) {
  std::mt19937_64 rng(32);
  struct Case { int gh, gw, stride, heads, d; };
  for (const Case c : {Case{4, 4, 2, 1, 4}, Case{4, 4, 2, 2, 4}, Case{6, 4, 2, 1, 3}, Case{8, 8, 4, 2, 6}, Case{6, 6, 3, 3, 3}}) {
    const Tensor x = random_tensor({c.gh * c.gw, c.d}, rng);
    Tape t;
    const Tensor out = fix_sparse_attention(t.constant(x), c.gh, c.gw, c.stride, c.heads).value();
    EXPECT_LE((to_eigen(out) - fix_sparse_oracle(x, c.gh, c.gw, c.stride, c.heads)).cwiseAbs().maxCoeff(), 1e-6)
        << c.gh << "x" << c.gw << " stride " << c.stride;
  }
}

TEST(FixSparseTest, PermutingOneGroupOnlyMovesThatGroup) {
  std::mt19937_64 rng(33);
  const Tensor x = random_tensor({16, 4}, rng);
  // Group (0, 0) of a 4x4 grid at stride 2 holds tokens 0, 2, 8, 10.
  const int perm[4][2] = {{0, 10}, {2, 8}, {8, 0}, {10, 2}};
  Tensor y = x;
  for (const auto& p : perm)
    for (int c = 0; c < 4; ++c) y.at(p[0], c) = x.at(p[1], c);
  Tape t;
  const Tensor ox = fix_sparse_attention(t.constant(x), 4, 4, 2, 1).value();
  const Tensor oy = fix_sparse_attention(t.constant(y), 4, 4, 2, 1).value();
  for (int tok = 0; tok < 16; ++tok) {
    const bool in_group = tok % 2 == 0 && (tok / 4) % 2 == 0;
    for (int c = 0; c < 4; ++c) {
      if (!in_group) {
        EXPECT_EQ(ox.at(tok, c), oy.at(tok, c));
      }
    }
  }
  for (const auto& p : perm)
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(oy.at(p[0], c), ox.at(p[1], c), 1e-6);
}

TEST(FixSparseTest, IndivisibleGridThrows) {
  Tape t;
  EXPECT_THROW(fix_sparse_attention(t.constant(Tensor({15, 2})), 5, 3, 2, 1), ConfigError);
  EXPECT_THROW(fix_sparse_attention(t.constant(Tensor({16, 3})), 4, 4, 1, 2), ConfigError);
  EXPECT_THROW(fix_sparse_attention(t.constant(Tensor({15, 2})), 4, 4, 1, 1), DimensionError);
}

// --- multi-head projections ---------------------------------------------------------

struct Projections {
  Eigen::MatrixXd w[4];
  Eigen::RowVectorXd b[4];
};

Projections read_projections(ParameterStore& store, const std::string& prefix) {
  Projections p;
  const char* names[4] = {"q_proj", "k_proj", "v_proj", "out_proj"};
  for (int i = 0; i < 4; ++i) {
    p.w[i] = to_eigen(store.get(prefix + "." + names[i] + ".weight").value);
    const Tensor& b = store.get(prefix + "." + names[i] + ".bias").value;
    p.b[i] = Eigen::Map<const Eigen::RowVectorXf>(b.data(), b.size()).cast<double>();
  }
  return p;
}

Eigen::MatrixXd split_run_concat(const Eigen::MatrixXd& x, const Projections& p, int heads) {
  auto lin = [&](int i) { return Eigen::MatrixXd((x * p.w[i]).rowwise() + p.b[i]); };
  const Eigen::MatrixXd q = lin(0), k = lin(1), v = lin(2);
  const int d = static_cast<int>(x.cols()), dh = d / heads;
  Eigen::MatrixXd cat(x.rows(), d);
  for (int h = 0; h < heads; ++h) {
    Eigen::MatrixXd l = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() / std::sqrt(double(dh));
    for (int r = 0; r < l.rows(); ++r) {
      l.row(r) = (l.row(r).array() - l.row(r).maxCoeff()).exp().matrix();
      l.row(r) /= l.row(r).sum();
    }
    cat.middleCols(h * dh, dh) = l * v.middleCols(h * dh, dh);
  }
  return (cat * p.w[3]).rowwise() + p.b[3];
}

TEST(MultiHeadTest, MatchesSplitRunConcatOracle) {
  for (int heads : {1, 2}) {
    std::mt19937_64 rng(34 + heads);
    ParameterStore store;
    AttentionConfig cfg;
    cfg.num_heads = heads;
    MultiHeadAttention mha(store, "mha", 4, cfg, rng);
    for (std::size_t i = 0; i < store.size(); ++i)
      if (store[i].name.ends_with(".bias"))
        for (float& v : store[i].value.values()) v = static_cast<float>(0.1 * normal(rng));
    const Tensor x = random_tensor({4, 4}, rng);
    Tape t;
    const Tensor out = mha.forward(t, t.constant(x), TokenLayout{1, 2, 2, 4}, AttentionKind::kDense).value();
    const Eigen::MatrixXd ref = split_run_concat(to_eigen(x), read_projections(store, "mha"), heads);
    EXPECT_LE((to_eigen(out) - ref).cwiseAbs().maxCoeff(), 1e-6) << heads << " heads";
  }
}

TEST(MultiHeadTest, ZeroInputZeroBiasGivesZero) {
  std::mt19937_64 rng(36);
  ParameterStore store;
  AttentionConfig cfg;
  cfg.num_heads = 2;
  MultiHeadAttention mha(store, "mha", 4, cfg, rng);
  Tape t;
  const Tensor out = mha.forward(t, t.constant(Tensor({8, 4}, 0.0f)), TokenLayout{2, 2, 2, 4}, AttentionKind::kDense).value();
  for (float v : out.values()) EXPECT_EQ(v, 0.0f);
}

TEST(MultiHeadTest, NoiseGuidedNeedsMatchingMask) {
  std::mt19937_64 rng(37);
  ParameterStore store;
  AttentionConfig cfg;
  cfg.num_heads = 2;
  MultiHeadAttention mha(store, "mha", 4, cfg, rng);
  Tape t;
  const Var x = t.constant(Tensor({4, 4}, 0.5f));
  const TokenLayout layout{1, 2, 2, 4};
  EXPECT_THROW(mha.forward(t, x, layout, AttentionKind::kNoiseGuided), ValueError);
  const NoiseMask wrong{Tensor({1, 4, 4}, 1.0f), 4};
  EXPECT_THROW(mha.forward(t, x, layout, AttentionKind::kNoiseGuided, &wrong), DimensionError);
  ParameterStore other;
  EXPECT_THROW(MultiHeadAttention(other, "bad", 6, AttentionConfig{4}, rng), ConfigError);
}

TEST(GroupedAttentionTest, MaskedHeadsMatchPerHeadNaa) {
  std::mt19937_64 rng(38);
  const int n = 4, width = 4, heads = 2, dh = 2;
  const Tensor q = random_tensor({n, width}, rng), k = random_tensor({n, width}, rng), v = random_tensor({n, width}, rng);
  Tensor allow({heads, n, n});
  NoiseMask per_head[2] = {random_mask(n, 2, rng), random_mask(n, 2, rng)};
  for (int h = 0; h < heads; ++h)
    std::copy(per_head[h].allow.data(), per_head[h].allow.data() + n * n, allow.data() + h * n * n);
  Tape t;
  const Tensor out = grouped_attention(t.constant(q), t.constant(k), t.constant(v), TokenLayout{1, 2, 2, width}, heads, 1, &allow).value();
  for (int h = 0; h < heads; ++h) {
    Tensor qh({n, dh}), kh({n, dh}), vh({n, dh});
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < dh; ++c) {
        qh.at(r, c) = q.at(r, h * dh + c);
        kh.at(r, c) = k.at(r, h * dh + c);
        vh.at(r, c) = v.at(r, h * dh + c);
      }
    const auto ref = verify::naa_reference(qh, kh, vh, per_head[h].allow);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < dh; ++c) EXPECT_NEAR(out.at(r, h * dh + c), ref[r][c], 1e-6);
  }
}

// --- diffusion oracle ------------------------------------------------------------

TEST(DiffusionTest, Examples) {
  std::mt19937_64 rng(39);
  const FeatureGrid g{random_tensor({5, 3}, rng), {false, true, false, false, true}};
  EXPECT_EQ(diffusion_oracle(g, {1.0, 0.0}, 7).features, g.features);

  const FeatureGrid one{random_tensor({4, 3}, rng), {false, false, true, false}};
  const Tensor after = diffusion_oracle(one, {0.0, 1.0}, 1).features;
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < 3; ++c) EXPECT_EQ(after.at(i, c), one.features.at(2, c));

  // 1-D toy: distance to the forged centroid halves per layer.
  const FeatureGrid toy{Tensor({4, 1}, {0.0f, 8.0f, 2.0f, -4.0f}), {true, false, true, false}};
  for (int l = 0; l <= 4; ++l) {
    const Tensor f = diffusion_oracle(toy, {0.5, 0.5}, l).features;
    EXPECT_NEAR(f[1] - 1.0, 7.0 * std::pow(0.5, l), 1e-6);
    EXPECT_NEAR(f[3] - 1.0, -5.0 * std::pow(0.5, l), 1e-6);
  }
}

TEST(DiffusionTest, DistanceToCentroidNeverGrows) {
  std::mt19937_64 rng(40);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = randint(rng, 2, 12), d = randint(rng, 1, 5);
    FeatureGrid g{random_tensor({n, d}, rng), std::vector<bool>(n)};
    for (int i = 0; i < n; ++i) g.forged[i] = uniform01(rng) < 0.3;
    g.forged[randint(rng, 0, n - 1)] = true;
    const double beta = 0.05 + 0.95 * uniform01(rng);
    Eigen::RowVectorXd c = Eigen::RowVectorXd::Zero(d);
    int count = 0;
    for (int i = 0; i < n; ++i)
      if (g.forged[i]) c += to_eigen(g.features).row(i), ++count;
    c /= count;
    std::vector<double> prev(n, std::numeric_limits<double>::infinity());
    for (int l = 0; l <= 6; ++l) {
      const Eigen::MatrixXd f = to_eigen(diffusion_oracle(g, {1.0 - beta, beta}, l).features);
      for (int i = 0; i < n; ++i) {
        if (g.forged[i]) continue;
        const double dist = (f.row(i) - c).norm();
        EXPECT_LE(dist, prev[i] + 1e-6);
        prev[i] = dist;
      }
    }
  }
}

TEST(DiffusionTest, BadArgumentsThrow) {
  const FeatureGrid none{Tensor({3, 2}, 1.0f), {false, false, false}};
  EXPECT_THROW(diffusion_oracle(none, {0.5, 0.5}, 1), ValueError);
  const FeatureGrid g{Tensor({3, 2}, 1.0f), {true, false, false}};
  EXPECT_THROW(diffusion_oracle(g, {0.7, 0.7}, 1), ValueError);
  EXPECT_THROW(diffusion_oracle(FeatureGrid{Tensor({3, 2}), {true}}, {0.5, 0.5}, 1), DimensionError);
}

// --- shared suites -------------------------------------------------------------------

TEST(InvariantSuiteTest, AllPass) {
  for (const auto& r : {verify::mask_cardinality_suite(3), verify::naa_oracle_suite(3),
                        verify::diffusion_contraction_suite(3)}) {
    EXPECT_TRUE(r.pass) << r.name << ": " << r.detail;
  }
}

}  // namespace
}  // namespace nfa
