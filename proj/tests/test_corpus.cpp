#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "test_support.hpp"

using namespace matchrec;

namespace {

std::vector<ReviewRecord> make_records(std::size_t n) {
  std::vector<ReviewRecord> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back({"u" + std::to_string(i % 7), "i" + std::to_string(i % 5),
                   1.0 + static_cast<double>(i % 5), "text " + std::to_string(i),
                   static_cast<std::int64_t>(i)});
  return out;
}

std::multiset<std::string> token_multiset(const Document& d) {
  auto f = d.flattened();
  return {f.begin(), f.end()};
}

}  // namespace

// --- parse_reviews ------------------------------------------------------------

TEST(ParseReviews, DirectFieldMapping) {
  std::istringstream in(R"({"reviewerID":"u1","asin":"i1","overall":5.0,"reviewText":"great strings"})");
  auto r = parse_reviews(in);
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_EQ(r.records[0], (ReviewRecord{"u1", "i1", 5.0, "great strings", 0}));
  EXPECT_TRUE(r.errors.empty());
}

TEST(ParseReviews, EmptyStream) {
  std::istringstream in("");
  auto r = parse_reviews(in);
  EXPECT_TRUE(r.records.empty());
  EXPECT_TRUE(r.errors.empty());
  EXPECT_EQ(r.skipped_empty_text, 0u);
}

TEST(ParseReviews, MalformedLineIsReportedWithLineNumber) {
  std::ifstream in(testing_support::data_path("reviews_malformed.jsonl"));
  auto r = parse_reviews(in);
  ASSERT_EQ(r.records.size(), 2u);
  ASSERT_EQ(r.errors.size(), 1u);
  EXPECT_EQ(r.errors[0].line, 2u);
  EXPECT_EQ(r.records[1].timestamp, 12);
  EXPECT_EQ(r.records[1].review_text, "fine cable");
}

TEST(ParseReviews, RejectsOutOfRangeRatingAndSkipsMissingText) {
  std::istringstream in(
      R"({"reviewerID":"u1","asin":"i1","overall":6,"reviewText":"x"})" "\n"
      R"({"reviewerID":"u1","asin":"i2","overall":0.5,"reviewText":"x"})" "\n"
      R"({"reviewerID":"u1","asin":"i3","overall":3})" "\n"
      R"({"reviewerID":"u1","asin":"i4","overall":3,"reviewText":""})" "\n"
      R"({"reviewerID":"","asin":"i5","overall":3,"reviewText":"x"})" "\n"
      "\n"
      R"({"reviewerID":"u1","asin":"i6","overall":1,"reviewText":"ok","unixReviewTime":99})" "\n");
  auto r = parse_reviews(in);
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_EQ(r.records[0].item_id, "i6");
  EXPECT_EQ(r.records[0].timestamp, 99);
  EXPECT_EQ(r.skipped_empty_text, 2u);
  ASSERT_EQ(r.errors.size(), 3u);
  EXPECT_NE(r.errors[0].reason.find("outside [1,5]"), std::string::npos);
  EXPECT_EQ(r.errors[2].line, 5u);
}

// --- tokenize -------------------------------------------------------------------

TEST(Tokenize, Rules) {
  EXPECT_EQ(tokenize("Great, GREAT strings!"), (std::vector<std::string>{"great", "great", "strings"}));
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_EQ(tokenize("x2  y-3"), (std::vector<std::string>{"x2", "y", "3"}));
  EXPECT_TRUE(tokenize(" ,;!? ").empty());
  EXPECT_EQ(tokenize("Caf\xc3\xa9 ok"), (std::vector<std::string>{"caf\xc3\xa9", "ok"}));
}

TEST(Tokenize, IdempotentOnOwnOutput) {
  std::mt19937_64 rng(1);
  const std::string alphabet = "abcXYZ019 ,.-!?'\t\n\xc3\xa9";
  for (int trial = 0; trial < 500; ++trial) {
    std::string s;
    for (std::size_t k = 0, n = rng() % 40; k < n; ++k) s += alphabet[rng() % alphabet.size()];
    auto tokens = tokenize(s);
    std::string joined;
    for (const auto& t : tokens) {
      EXPECT_FALSE(t.empty());
      joined += (joined.empty() ? "" : " ") + t;
    }
    EXPECT_EQ(tokenize(joined), tokens) << s;
  }
}

// --- split_dataset --------------------------------------------------------------

TEST(SplitDataset, TenRecords) {
  auto s = split_dataset(make_records(10), {}, 7);
  EXPECT_EQ(s.train.size(), 8u);
  EXPECT_EQ(s.validation.size(), 1u);
  EXPECT_EQ(s.test.size(), 1u);
}

TEST(SplitDataset, DeterministicForSeed) {
  auto recs = make_records(50);
  auto a = split_dataset(recs, {}, 7), b = split_dataset(recs, {}, 7), c = split_dataset(recs, {}, 8);
  EXPECT_EQ(a.train_index, b.train_index);
  EXPECT_EQ(a.test_index, b.test_index);
  EXPECT_NE(a.train_index, c.train_index);
}

TEST(SplitDataset, HundredRecordsPartition) {
  auto recs = make_records(100);
  auto s = split_dataset(recs, {}, 3);
  EXPECT_EQ(s.train.size(), 80u);
  EXPECT_EQ(s.validation.size(), 10u);
  EXPECT_EQ(s.test.size(), 10u);
  std::vector<int> hits(100, 0);
  for (const auto* idx : {&s.train_index, &s.validation_index, &s.test_index})
    for (auto i : *idx) ++hits[i];
  for (int h : hits) EXPECT_EQ(h, 1);
  for (std::size_t k = 0; k < s.test.size(); ++k) EXPECT_EQ(s.test[k], recs[s.test_index[k]]);
}

TEST(SplitDataset, PartitionPropertyAcrossSeedsAndSizes) {
  for (std::size_t n : {3u, 4u, 7u, 19u, 33u, 101u}) {
    auto recs = make_records(n);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto s = split_dataset(recs, {}, seed);
      std::set<std::size_t> all;
      for (const auto* idx : {&s.train_index, &s.validation_index, &s.test_index})
        all.insert(idx->begin(), idx->end());
      EXPECT_EQ(all.size(), n);
      EXPECT_EQ(s.train.size() + s.validation.size() + s.test.size(), n);
      EXPECT_GE(s.validation.size(), 1u);
      EXPECT_GE(s.test.size(), 1u);
      if (n >= 10) {
        EXPECT_LE(std::abs(static_cast<double>(s.train.size()) - 0.8 * n), 1.0);
        EXPECT_LE(std::abs(static_cast<double>(s.validation.size()) - 0.1 * n), 1.0);
        EXPECT_LE(std::abs(static_cast<double>(s.test.size()) - 0.1 * n), 1.0);
      }
    }
  }
}

TEST(SplitDataset, Errors) {
  EXPECT_THROW(split_dataset(make_records(2), {}, 1), InputError);
  EXPECT_THROW(split_dataset(make_records(10), {0.8, 0.1, 0.05}, 1), InputError);
  EXPECT_THROW(split_dataset(make_records(10), {0.9, 0.1, 0.0}, 1), InputError);
}

// --- build_documents --------------------------------------------------------------

TEST(BuildDocuments, ConcatenatesTrainReviews) {
  DatasetSplit s;
  s.train = {{"u1", "i1", 4, "a b", 0}, {"u1", "i2", 3, "c", 0}};
  auto d = build_documents(s);
  const auto& u = d.user("u1");
  EXPECT_EQ(u.reviews, (std::vector<std::vector<std::string>>{{"a", "b"}, {"c"}}));
  EXPECT_EQ(u.length(), 3u);
  EXPECT_EQ(d.item("i2").flattened(), (std::vector<std::string>{"c"}));
  EXPECT_DOUBLE_EQ(d.train_mean_rating, 3.5);
}

TEST(BuildDocuments, HeldOutReviewAbsentFromBoth) {
  DatasetSplit s;
  s.train = {{"u1", "i2", 4, "alpha beta", 1}, {"u2", "i1", 2, "gamma", 2}};
  s.test = {{"u1", "i1", 5, "secret words", 3}};
  auto d = build_documents(s);
  for (const auto* doc : {&d.user("u1"), &d.item("i1")})
    for (const auto& t : doc->flattened()) EXPECT_TRUE(t != "secret" && t != "words");
}

TEST(BuildDocuments, SixRecordFixtureTokenByToken) {
  // Users A,B,C; items X,Y,Z. Test pair (B,Y); validation pair (C,X).
  std::vector<ReviewRecord> recs = {
      {"A", "X", 5, "a1 a2", 30}, {"A", "Y", 4, "a3", 10},  {"B", "Y", 2, "b1 b2", 20},
      {"B", "Z", 3, "b3", 40},    {"C", "X", 1, "c1", 50},  {"C", "Z", 5, "c2 c3", 10},
  };
  DatasetSplit s;
  s.train_index = {0, 1, 3, 5};
  s.validation_index = {4};
  s.test_index = {2};
  for (auto i : s.train_index) s.train.push_back(recs[i]);
  s.validation.push_back(recs[4]);
  s.test.push_back(recs[2]);
  auto d = build_documents(s);

  using V = std::vector<std::string>;
  EXPECT_EQ(d.user("A").flattened(), (V{"a3", "a1", "a2"}));  // timestamp 10 before 30
  EXPECT_EQ(d.user("B").flattened(), (V{"b3"}));
  EXPECT_EQ(d.user("C").flattened(), (V{"c2", "c3"}));
  EXPECT_EQ(d.item("X").flattened(), (V{"a1", "a2"}));
  EXPECT_EQ(d.item("Y").flattened(), (V{"a3"}));
  EXPECT_EQ(d.item("Z").flattened(), (V{"c2", "c3", "b3"}));
  EXPECT_EQ(d.user("A").sources, (std::vector<std::size_t>{1, 0}));
  EXPECT_TRUE(d.empty_users().empty());
}

TEST(BuildDocuments, OwnersOnlyInHeldOutGetFlaggedEmptyDocuments) {
  DatasetSplit s;
  s.train = {{"u1", "i1", 4, "a", 0}};
  s.test = {{"u2", "i2", 4, "b", 0}};
  auto d = build_documents(s);
  EXPECT_EQ(d.empty_users(), std::vector<std::string>{"u2"});
  EXPECT_EQ(d.empty_items(), std::vector<std::string>{"i2"});
  EXPECT_TRUE(d.user("u2").empty());
  EXPECT_THROW(d.user("nobody"), InputError);
}

TEST(BuildDocuments, ExclusionSoundnessBySourceTags) {
  auto corpus = synthetic::review_corpus({.n_users = 30, .n_items = 20, .n_reviews = 300, .seed = 5});
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto s = split_dataset(corpus.records, {}, seed);
    auto d = build_documents(s);
    std::set<std::size_t> held;
    held.insert(s.validation_index.begin(), s.validation_index.end());
    held.insert(s.test_index.begin(), s.test_index.end());
    for (const auto* part : {&d.users, &d.items})
      for (const auto& [id, doc] : *part)
        for (auto src : doc.sources) EXPECT_EQ(held.count(s.train_index[src]), 0u);
  }
}

// --- shuffle_document ---------------------------------------------------------------

TEST(ShuffleDocument, SingleReviewIsIdentity) {
  Document d{"u", OwnerKind::User, {{"x", "y", "z"}}, {0}};
  for (std::uint64_t s = 0; s < 10; ++s) EXPECT_EQ(shuffle_document(d, s).reviews, d.reviews);
}

TEST(ShuffleDocument, PreservesTokenMultisetAndReviewIntegrity) {
  Document d{"u", OwnerKind::User, {{"a"}, {"b"}, {"c", "c2"}}, {0, 1, 2}};
  for (std::uint64_t s = 0; s < 50; ++s) {
    auto out = shuffle_document(d, s);
    EXPECT_EQ(out.reviews.size(), 3u);
    EXPECT_EQ(token_multiset(out), token_multiset(d));
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(out.reviews[k], d.reviews[out.sources[k]]);
  }
}

TEST(ShuffleDocument, AllPermutationsReachable) {
  Document d{"u", OwnerKind::Item, {{"a"}, {"b"}, {"c"}, {"d"}}, {0, 1, 2, 3}};
  std::set<std::vector<std::size_t>> seen;
  for (std::uint64_t s = 0; s < 1000; ++s) seen.insert(shuffle_document(d, s).sources);
  EXPECT_EQ(seen.size(), 24u);
}

// --- compute_corpus_stats ---------------------------------------------------------

TEST(CorpusStats, EmptyIsZero) {
  auto s = compute_corpus_stats({});
  EXPECT_EQ(s.n_users, 0u);
  EXPECT_EQ(s.n_items, 0u);
  EXPECT_EQ(s.n_ratings, 0u);
  EXPECT_EQ(s.user_doc_avg_len, 0.0);
  EXPECT_EQ(s.item_doc_avg_len, 0.0);
}

TEST(CorpusStats, FiveRecordHandCount) {
  // u1: 2+3 tokens, u2: 1+4, u3: 2 -> user avg 12/3 = 4
  // i1: 2+1, i2: 3+2, i3: 4 -> item avg 12/3 = 4
  std::vector<ReviewRecord> recs = {
      {"u1", "i1", 5, "aa bb", 0},  {"u1", "i2", 4, "x y z", 0}, {"u2", "i1", 3, "one", 0},
      {"u2", "i3", 2, "p q r s", 0}, {"u3", "i2", 1, "m-n", 0},
  };
  auto s = compute_corpus_stats(recs);
  EXPECT_EQ(s.n_users, 3u);
  EXPECT_EQ(s.n_items, 3u);
  EXPECT_EQ(s.n_ratings, 5u);
  EXPECT_DOUBLE_EQ(s.user_doc_avg_len, 4.0);
  EXPECT_DOUBLE_EQ(s.item_doc_avg_len, 4.0);
}

TEST(CorpusStats, TwentyReviewFixtureFile) {
  // 5 users x 4 items, 3 tokens per review; one line lacks reviewText.
  std::ifstream in(testing_support::data_path("reviews_20.jsonl"));
  auto parsed = parse_reviews(in);
  EXPECT_EQ(parsed.skipped_empty_text, 1u);
  auto s = compute_corpus_stats(parsed.records);
  EXPECT_EQ(s.n_users, 5u);
  EXPECT_EQ(s.n_items, 4u);
  EXPECT_EQ(s.n_ratings, 20u);
  EXPECT_DOUBLE_EQ(s.user_doc_avg_len, 12.0);
  EXPECT_DOUBLE_EQ(s.item_doc_avg_len, 15.0);
}
