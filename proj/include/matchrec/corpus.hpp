#pragma once

// Review ingestion, dataset splitting and per-user / per-item document
// construction.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "matchrec/error.hpp"
#include "matchrec/util.hpp"

namespace matchrec {

struct ReviewRecord {
  std::string user_id;
  std::string item_id;
  double rating = 0.0;
  std::string review_text;
  std::int64_t timestamp = 0;

  friend bool operator==(const ReviewRecord&, const ReviewRecord&) = default;
};

struct ParseIssue {
  std::size_t line = 0;  // 1-based
  std::string reason;
};

struct ParseResult {
  std::vector<ReviewRecord> records;
  std::vector<ParseIssue> errors;     // malformed lines and rejected records
  std::size_t skipped_empty_text = 0; // missing or empty reviewText
};

namespace detail {

inline std::optional<std::string> string_field(const nlohmann::json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_string()) return std::nullopt;
  return it->get<std::string>();
}

}  // namespace detail

/// Parses Amazon-format JSON lines. Bad lines are reported, never fatal.
inline ParseResult parse_reviews(std::istream& in) {
  ParseResult out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;

    nlohmann::json obj = nlohmann::json::parse(line, nullptr, /*allow_exceptions=*/false);
    if (obj.is_discarded() || !obj.is_object()) {
      out.errors.push_back({line_no, "malformed JSON"});
      continue;
    }
    auto text_it = obj.find("reviewText");
    if (text_it == obj.end() || !text_it->is_string() ||
        text_it->get_ref<const std::string&>().empty()) {
      ++out.skipped_empty_text;
      continue;
    }
    ReviewRecord rec;
    auto user = detail::string_field(obj, "reviewerID");
    auto item = detail::string_field(obj, "asin");
    if (!user || user->empty()) {
      out.errors.push_back({line_no, "missing reviewerID"});
      continue;
    }
    if (!item || item->empty()) {
      out.errors.push_back({line_no, "missing asin"});
      continue;
    }
    auto rating_it = obj.find("overall");
    if (rating_it == obj.end() || !rating_it->is_number()) {
      out.errors.push_back({line_no, "missing or non-numeric overall"});
      continue;
    }
    rec.rating = rating_it->get<double>();
    if (!(rec.rating >= 1.0 && rec.rating <= 5.0)) {
      out.errors.push_back({line_no, "rating " + rating_it->dump() + " outside [1,5]"});
      continue;
    }
    if (auto ts = obj.find("unixReviewTime"); ts != obj.end() && ts->is_number_integer())
      rec.timestamp = ts->get<std::int64_t>();
    rec.user_id = std::move(*user);
    rec.item_id = std::move(*item);
    rec.review_text = text_it->get<std::string>();
    out.records.push_back(std::move(rec));
  }
  return out;
}

/// Serializes a record back to the Amazon field layout (one line, no newline).
inline std::string to_json_line(const ReviewRecord& r) {
  nlohmann::ordered_json j;
  j["reviewerID"] = r.user_id;
  j["asin"] = r.item_id;
  j["overall"] = r.rating;
  j["reviewText"] = r.review_text;
  j["unixReviewTime"] = r.timestamp;
  return j.dump();
}

/// Lowercased maximal runs of word bytes. ASCII letters and digits are word
/// bytes; so is every byte >= 0x80, which keeps UTF-8 sequences intact.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (c >= 0x80 || std::isalnum(c)) {
      current.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitRatios {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
};

struct DatasetSplit {
  std::vector<ReviewRecord> train, validation, test;
  // Positions of each record in the input passed to split_dataset.
  std::vector<std::size_t> train_index, validation_index, test_index;
  std::uint64_t seed = 0;
  SplitRatios ratios;
};

inline void validate_ratios(const SplitRatios& r) {
  if (!(r.train > 0 && r.validation > 0 && r.test > 0))
    throw InputError("split ratios must all be positive");
  if (std::abs(r.train + r.validation + r.test - 1.0) > 1e-9)
    throw InputError("split ratios must sum to 1");
}

/// Seeded permutation followed by a contiguous cut.
inline DatasetSplit split_dataset(const std::vector<ReviewRecord>& records,
                                  const SplitRatios& ratios, std::uint64_t seed) {
  validate_ratios(ratios);
  const std::size_t n = records.size();
  if (n < 3) throw InputError("need at least 3 records to populate train/validation/test");

  auto round_count = [n](double r) {
    return static_cast<std::size_t>(std::floor(r * static_cast<double>(n) + 0.5));
  };
  std::size_t n_train = std::max<std::size_t>(1, round_count(ratios.train));
  std::size_t n_val = std::max<std::size_t>(1, round_count(ratios.validation));
  // Leave at least one record for each split.
  while (n_train + n_val > n - 1) {
    if (n_train >= n_val && n_train > 1)
      --n_train;
    else
      --n_val;
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, 0x5b1));
  std::shuffle(order.begin(), order.end(), rng);

  DatasetSplit split;
  split.seed = seed;
  split.ratios = ratios;
  split.train_index.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.validation_index.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                                order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  split.test_index.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val),
                          order.end());
  for (auto i : split.train_index) split.train.push_back(records[i]);
  for (auto i : split.validation_index) split.validation.push_back(records[i]);
  for (auto i : split.test_index) split.test.push_back(records[i]);
  return split;
}

// ---------------------------------------------------------------------------
// Documents

enum class OwnerKind { User, Item };

struct Document {
  std::string owner_id;
  OwnerKind owner_kind = OwnerKind::User;
  std::vector<std::vector<std::string>> reviews;
  // Source tag per review: index of the originating record within the split's
  // train list. Travels with its review through shuffles.
  std::vector<std::size_t> sources;

  std::size_t length() const {
    std::size_t total = 0;
    for (const auto& r : reviews) total += r.size();
    return total;
  }
  bool empty() const { return length() == 0; }

  std::vector<std::string> flattened() const {
    std::vector<std::string> out;
    out.reserve(length());
    for (const auto& r : reviews) out.insert(out.end(), r.begin(), r.end());
    return out;
  }
};

struct DocumentSet {
  std::map<std::string, Document> users;
  std::map<std::string, Document> items;
  double train_mean_rating = 0.0;

  const Document& user(const std::string& id) const { return lookup(users, id, "user"); }
  const Document& item(const std::string& id) const { return lookup(items, id, "item"); }

  /// Owners whose document is empty (all their reviews fell outside train).
  std::vector<std::string> empty_users() const { return empties(users); }
  std::vector<std::string> empty_items() const { return empties(items); }

private:
  static const Document& lookup(const std::map<std::string, Document>& m,
                                const std::string& id, const char* what) {
    auto it = m.find(id);
    if (it == m.end()) throw InputError(std::string("unknown ") + what + " '" + id + "'");
    return it->second;
  }
  static std::vector<std::string> empties(const std::map<std::string, Document>& m) {
    std::vector<std::string> out;
    for (const auto& [id, doc] : m)
      if (doc.empty()) out.push_back(id);
    return out;
  }
};

namespace detail {

inline void build_owner_documents(const std::vector<ReviewRecord>& records,
                                  std::map<std::string, Document>& users,
                                  std::map<std::string, Document>& items,
                                  const std::vector<std::size_t>& order_key) {
  // Review order within a document: ascending timestamp, then input order.
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (records[a].timestamp != records[b].timestamp)
      return records[a].timestamp < records[b].timestamp;
    return order_key[a] < order_key[b];
  });
  for (std::size_t idx : order) {
    const auto& rec = records[idx];
    auto tokens = tokenize(rec.review_text);
    auto& u = users[rec.user_id];
    u.owner_id = rec.user_id;
    u.owner_kind = OwnerKind::User;
    u.reviews.push_back(tokens);
    u.sources.push_back(idx);
    auto& it = items[rec.item_id];
    it.owner_id = rec.item_id;
    it.owner_kind = OwnerKind::Item;
    it.reviews.push_back(std::move(tokens));
    it.sources.push_back(idx);
  }
}

inline void register_owner(std::map<std::string, Document>& m, const std::string& id,
                           OwnerKind kind) {
  auto [it, inserted] = m.try_emplace(id);
  if (inserted) {
    it->second.owner_id = id;
    it->second.owner_kind = kind;
  }
}

}  // namespace detail

/// Documents from TRAIN reviews only, so every validation and test pair's
/// joint review is absent from both of its documents. Owners seen only in
/// validation/test get an empty document.
inline DocumentSet build_documents(const DatasetSplit& split) {
  DocumentSet docs;
  std::vector<std::size_t> key = split.train_index;
  if (key.size() != split.train.size()) {
    key.resize(split.train.size());
    std::iota(key.begin(), key.end(), 0);
  }
  detail::build_owner_documents(split.train, docs.users, docs.items, key);
  for (const auto* part : {&split.validation, &split.test})
    for (const auto& rec : *part) {
      detail::register_owner(docs.users, rec.user_id, OwnerKind::User);
      detail::register_owner(docs.items, rec.item_id, OwnerKind::Item);
    }
  double sum = 0.0;
  for (const auto& r : split.train) sum += r.rating;
  docs.train_mean_rating = split.train.empty() ? 0.0 : sum / static_cast<double>(split.train.size());
  return docs;
}

/// Review-level uniform permutation; tokens inside a review keep their order.
inline Document shuffle_document(const Document& doc, std::uint64_t seed) {
  Document out = doc;
  std::vector<std::size_t> perm(doc.reviews.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, 0x5f1));
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    out.reviews[i] = doc.reviews[perm[i]];
    if (perm[i] < doc.sources.size()) out.sources[i] = doc.sources[perm[i]];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Statistics

struct CorpusStats {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::size_t n_ratings = 0;
  double user_doc_avg_len = 0.0;
  double item_doc_avg_len = 0.0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["n_users"] = n_users;
    j["n_items"] = n_items;
    j["n_ratings"] = n_ratings;
    j["user_doc_avg_len"] = user_doc_avg_len;
    j["item_doc_avg_len"] = item_doc_avg_len;
    return j;
  }
};

/// Counts and mean document lengths over ALL records (no held-out exclusion).
inline CorpusStats compute_corpus_stats(const std::vector<ReviewRecord>& records) {
  CorpusStats s;
  std::map<std::string, std::size_t> user_len, item_len;
  for (const auto& r : records) {
    std::size_t n = tokenize(r.review_text).size();
    user_len[r.user_id] += n;
    item_len[r.item_id] += n;
  }
  s.n_users = user_len.size();
  s.n_items = item_len.size();
  s.n_ratings = records.size();
  auto mean_of = [](const std::map<std::string, std::size_t>& m) {
    if (m.empty()) return 0.0;
    double total = 0.0;
    for (const auto& [_, n] : m) total += static_cast<double>(n);
    return total / static_cast<double>(m.size());
  };
  s.user_doc_avg_len = mean_of(user_len);
  s.item_doc_avg_len = mean_of(item_len);
  return s;
}

}  // namespace matchrec
