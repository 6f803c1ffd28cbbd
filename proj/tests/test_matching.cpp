#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "oracles.hpp"
#include "test_support.hpp"

using namespace matchrec;

namespace {

Document doc(std::vector<std::vector<std::string>> reviews, OwnerKind kind = OwnerKind::User) {
  Document d{"o", kind, std::move(reviews), {}};
  for (std::size_t i = 0; i < d.reviews.size(); ++i) d.sources.push_back(i);
  return d;
}

EmbeddingTable fixture_table() {
  return load_embeddings(testing_support::data_path("embeddings_fixture.txt"));
}

Document random_doc(std::mt19937_64& rng, std::size_t max_reviews) {
  static const std::vector<std::string> vocab = {"a", "b", "c", "d", "e", "cable", "cheap",
                                                 "love", "oov1", "oov2"};
  std::vector<std::vector<std::string>> reviews(1 + rng() % max_reviews);
  for (auto& r : reviews)
    for (std::size_t k = 0, n = 1 + rng() % 4; k < n; ++k) r.push_back(vocab[rng() % vocab.size()]);
  return doc(reviews);
}

void expect_padding_pure(const MatchingMatrix<double>& M) {
  for (std::size_t p = 0; p < M.rows; ++p)
    for (std::size_t q = 0; q < M.cols; ++q) {
      EXPECT_GE(M.at(p, q), -1.0);
      EXPECT_LE(M.at(p, q), 1.0);
      if (p >= M.valid_rows || q >= M.valid_cols) {
        EXPECT_EQ(M.at(p, q), 0.0);
      }
    }
}

}  // namespace

TEST(MatchingMatrix, SelfSimilarityWithPadding) {
  EmbeddingTable t(2);
  t.insert("a", {1, 0});
  auto M = build_matching_matrix(doc({{"a"}}), doc({{"a"}}), t, 2, 2);
  EXPECT_EQ(M.values, (std::vector<double>{1, 0, 0, 0}));
  EXPECT_EQ(M.valid_rows, 1u);
  EXPECT_EQ(M.valid_cols, 1u);
}

TEST(MatchingMatrix, OrthogonalTokens) {
  EmbeddingTable t(2);
  t.insert("a", {1, 0});
  t.insert("b", {0, 1});
  EXPECT_EQ(build_matching_matrix(doc({{"a"}}), doc({{"b"}}), t, 1, 1).at(0, 0), 0.0);
}

TEST(MatchingMatrix, BothEmptyIsAllZero) {
  EmbeddingTable t(2);
  auto M = build_matching_matrix(doc({}), doc({}), t, 3, 2);
  EXPECT_EQ(M.values, std::vector<double>(6, 0.0));
  EXPECT_EQ(M.valid_rows, 0u);
  EXPECT_EQ(M.valid_cols, 0u);
  EXPECT_THROW(build_matching_matrix(doc({}), doc({}), t, 0, 2), InputError);
}

TEST(MatchingMatrix, MatchesDoubleLoopOracleExactly) {
  auto t = fixture_table();
  auto u = doc({{"a", "b"}}), i = doc({{"b", "a"}, {"b"}});
  auto M = build_matching_matrix(u, i, t, 4, 4);
  auto ref = oracle::cosine_matrix(u.flattened(), i.flattened(), t, 4, 4);
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t q = 0; q < 4; ++q) EXPECT_EQ(M.at(p, q), ref[p][q]) << p << "," << q;
  EXPECT_EQ(M.valid_rows, 2u);
  EXPECT_EQ(M.valid_cols, 3u);
}

TEST(MatchingMatrix, RandomDocumentsMatchOracleIncludingTruncation) {
  auto t = fixture_table();
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    auto u = random_doc(rng, 5), i = random_doc(rng, 5);
    const std::size_t n_max = 1 + rng() % 12, m_max = 1 + rng() % 12;
    auto M = build_matching_matrix(u, i, t, n_max, m_max);
    auto ref = oracle::cosine_matrix(u.flattened(), i.flattened(), t, n_max, m_max);
    for (std::size_t p = 0; p < n_max; ++p)
      for (std::size_t q = 0; q < m_max; ++q) ASSERT_EQ(M.at(p, q), ref[p][q]);
    EXPECT_EQ(M.valid_rows, std::min(u.length(), n_max));
    EXPECT_EQ(M.valid_cols, std::min(i.length(), m_max));
    expect_padding_pure(M);
  }
}

TEST(MatchingMatrix, TransposeDuality) {
  auto t = fixture_table();
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    auto u = random_doc(rng, 4), i = random_doc(rng, 4);
    auto A = build_matching_matrix(u, i, t, 10, 7);
    auto B = build_matching_matrix(i, u, t, 7, 10);
    ASSERT_EQ(A.valid_rows, B.valid_cols);
    ASSERT_EQ(A.valid_cols, B.valid_rows);
    for (std::size_t p = 0; p < A.valid_rows; ++p)
      for (std::size_t q = 0; q < A.valid_cols; ++q) EXPECT_EQ(A.at(p, q), B.at(q, p));
  }
}

TEST(MatchingMatrix, ShufflePermutesRowBlocks) {
  auto t = fixture_table();
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 30; ++trial) {
    auto u = random_doc(rng, 5), i = random_doc(rng, 3);
    auto su = shuffle_document(u, trial);
    auto A = build_matching_matrix(u, i, t, 32, 32);
    auto B = build_matching_matrix(su, i, t, 32, 32);
    // Row offsets of each original review in A.
    std::vector<std::size_t> offset(u.reviews.size() + 1, 0);
    for (std::size_t r = 0; r < u.reviews.size(); ++r) offset[r + 1] = offset[r] + u.reviews[r].size();
    std::size_t row_b = 0;
    for (std::size_t k = 0; k < su.reviews.size(); ++k) {
      const std::size_t src = su.sources[k];
      for (std::size_t j = 0; j < su.reviews[k].size(); ++j, ++row_b)
        for (std::size_t q = 0; q < B.valid_cols; ++q)
          ASSERT_EQ(B.at(row_b, q), A.at(offset[src] + j, q));
    }
    auto va = A.values, vb = B.values;
    std::sort(va.begin(), va.end());
    std::sort(vb.begin(), vb.end());
    EXPECT_EQ(va, vb);
  }
}

TEST(MatchingMatrix, FloatMatrixIsRoundedDouble) {
  auto t = fixture_table();
  auto u = doc({{"cable", "cheap"}}), i = doc({{"love", "a"}});
  auto D = build_matching_matrix<double>(u, i, t, 3, 3);
  auto F = build_matching_matrix<float>(u, i, t, 3, 3);
  for (std::size_t k = 0; k < D.values.size(); ++k)
    EXPECT_EQ(F.values[k], static_cast<float>(D.values[k]));
}
