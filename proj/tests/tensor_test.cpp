#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>
#include <sstream>

#include "nfa/rng.hpp"
#include "nfa/tensor.hpp"

namespace nfa {
namespace {

TEST(TensorTest, DataLengthMatchesShape) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Shape s;
    const int rank = 1 + static_cast<int>(uniform01(rng) * 4);
    for (int i = 0; i < rank; ++i) s.push_back(1 + static_cast<int>(uniform01(rng) * 5));
    const Tensor t(s, 1.5f);
    EXPECT_EQ(t.size(), shape_numel(s));
    EXPECT_EQ(t.rank(), rank);
  }
}

TEST(TensorTest, RejectsNonPositiveDims) {
  EXPECT_THROW(Tensor(Shape{2, 0}), DimensionError);
  EXPECT_THROW(Tensor(Shape{-1}), DimensionError);
}

TEST(TensorTest, DataLengthMismatchThrows) {
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
}

TEST(TensorTest, ReshapeKeepsDataAndChecksCount) {
  const Tensor t(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor r = t.reshaped({3, 2});
  EXPECT_EQ(r.vec(), t.vec());
  EXPECT_EQ(r.shape(), (Shape{3, 2}));
  EXPECT_THROW(t.reshaped({4, 2}), DimensionError);
}

TEST(TensorTest, NegativeAxisCountsFromTheBack) {
  const Tensor t(Shape{2, 3, 4});
  EXPECT_EQ(t.dim(-1), 4);
  EXPECT_EQ(t.dim(0), 2);
}

TEST(TensorTest, MatrixViewIsRowMajor) {
  Tensor t(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.matrix()(1, 0), 4.0f);
  t.matrix()(0, 2) = 9.0f;
  EXPECT_EQ(t[2], 9.0f);
}

TEST(TensorTest, AllFiniteDetectsNan) {
  Tensor t(Shape{3}, 0.0f);
  EXPECT_TRUE(t.all_finite());
  t[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
}

TEST(NfatTest, StreamRoundTripIsBitwise) {
  std::mt19937_64 rng(11);
  Tensor t(Shape{3, 1, 5});
  for (float& v : t.values()) v = static_cast<float>(normal(rng));
  t[0] = -0.0f;
  t[1] = 1e-40f;  // subnormal
  std::stringstream buf;
  write_nfat(buf, t);
  const Tensor back = read_nfat(buf);
  ASSERT_EQ(back.shape(), t.shape());
  EXPECT_EQ(std::memcmp(back.data(), t.data(), t.size() * sizeof(float)), 0);
}

TEST(NfatTest, LayoutIsMagicRankDimsPayload) {
  const Tensor t(Shape{2, 1}, {1.0f, -2.0f});
  std::stringstream buf;
  write_nfat(buf, t);
  const std::string bytes = buf.str();
  ASSERT_EQ(bytes.size(), 4u + 1u + 2 * 4u + 2 * 4u);
  EXPECT_EQ(bytes.substr(0, 4), "NFAT");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 2);
  EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 2);  // dim 0, little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[9]), 1);
  float first;
  std::memcpy(&first, bytes.data() + 13, 4);
  EXPECT_EQ(first, 1.0f);
}

TEST(NfatTest, BadMagicAndTruncationThrow) {
  std::stringstream bad("XXXX");
  EXPECT_THROW(read_nfat(bad), IoError);
  const Tensor t(Shape{4}, 1.0f);
  std::stringstream buf;
  write_nfat(buf, t);
  std::string s = buf.str();
  s.resize(s.size() - 3);
  std::stringstream cut(s);
  EXPECT_THROW(read_nfat(cut), IoError);
}

TEST(NfatTest, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "nfa_tensor_test.nfat";
  const Tensor t(Shape{2, 2}, {0.5f, 1.5f, -3.0f, 7.0f});
  save_nfat(path, t);
  EXPECT_EQ(load_nfat(path), t);
  std::filesystem::remove(path);
  EXPECT_THROW(load_nfat(path), IoError);
}

}  // namespace
}  // namespace nfa
