#pragma once

// Evaluation protocol: test MSE, review-order shuffling, sparsity cohorts,
// trivial baselines and significance testing.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "matchrec/corpus.hpp"
#include "matchrec/embeddings.hpp"
#include "matchrec/stats.hpp"
#include "matchrec/training.hpp"

namespace matchrec {

struct PairResult {
  std::string user_id;
  std::string item_id;
  double rating = 0.0;
  double raw = 0.0;
  double clamped = 0.0;
  bool fallback = false;
  double squared_error = 0.0;
};

struct EvalReport {
  std::string label;
  double mse = 0.0;
  std::size_t n_test = 0;
  std::size_t n_fallback = 0;
  std::vector<PairResult> pairs;  // ordered by (user_id, item_id, input position)

  std::vector<double> squared_errors() const {
    std::vector<double> out;
    for (const auto& p : pairs) out.push_back(p.squared_error);
    return out;
  }
};

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::vector<std::string> parse_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

}  // namespace detail

/// Builds a report from clamped predictions. Rows are sorted by
/// (user_id, item_id, input position) and MSE is accumulated in that order.
inline EvalReport make_eval_report(std::string label, std::span<const RatingPair> pairs,
                                   const std::vector<Prediction>& preds) {
  if (pairs.empty()) throw InputError("evaluation needs a non-empty test set");
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (pairs[a].user_id != pairs[b].user_id) return pairs[a].user_id < pairs[b].user_id;
    return pairs[a].item_id < pairs[b].item_id;
  });
  EvalReport rep;
  rep.label = std::move(label);
  rep.n_test = pairs.size();
  std::vector<double> p, t;
  for (auto i : order) {
    const auto& pr = preds[i];
    const double e = pairs[i].rating - pr.clamped;
    rep.pairs.push_back({pairs[i].user_id, pairs[i].item_id, pairs[i].rating, pr.raw, pr.clamped,
                         pr.fallback, e * e});
    rep.n_fallback += pr.fallback ? 1 : 0;
    p.push_back(pr.clamped);
    t.push_back(pairs[i].rating);
  }
  rep.mse = mse(p, t);
  return rep;
}

/// Test-set MSE of clamped Eval-mode predictions. Pairs with an empty user
/// or item document get the training mean rating and are counted.
template <typename T>
EvalReport evaluate(const CnnRegressor<T>& model, std::span<const RatingPair> test,
                    const DocumentSet& docs, const EmbeddingTable& table,
                    std::string label = "model", std::size_t threads = 1) {
  if (test.empty()) throw InputError("evaluation needs a non-empty test set");
  const PairEncoder enc(docs, table, model.config.n_max, model.config.m_max);
  return make_eval_report(std::move(label), test,
                          predict_pairs(model, test, enc, docs.train_mean_rating, threads));
}

inline std::string eval_csv(const EvalReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "user_id,item_id,rating,raw,clamped,fallback,squared_error\n";
  for (const auto& p : r.pairs)
    os << detail::csv_field(p.user_id) << ',' << detail::csv_field(p.item_id) << ',' << p.rating
       << ',' << p.raw << ',' << p.clamped << ',' << (p.fallback ? 1 : 0) << ','
       << p.squared_error << '\n';
  return os.str();
}

/// Reads the rows of an eval CSV back (ids, rating, squared error).
inline EvalReport parse_eval_csv(const std::string& text, std::string label) {
  EvalReport r;
  r.label = std::move(label);
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 || line.empty()) continue;
    auto f = detail::parse_csv_line(line);
    if (f.size() != 7) throw InputError("eval csv line " + std::to_string(line_no) + ": expected 7 fields");
    try {
      PairResult p{f[0], f[1], std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), f[5] == "1",
                   std::stod(f[6])};
      r.pairs.push_back(std::move(p));
    } catch (const std::exception&) {
      throw InputError("eval csv line " + std::to_string(line_no) + ": bad number");
    }
  }
  if (r.pairs.empty()) throw InputError("eval csv has no rows");
  r.n_test = r.pairs.size();
  double s = 0.0;
  for (const auto& p : r.pairs) {
    s += p.squared_error;
    r.n_fallback += p.fallback ? 1 : 0;
  }
  r.mse = s / static_cast<double>(r.n_test);
  return r;
}

// ---------------------------------------------------------------------------
// Baselines

inline EvalReport global_mean_baseline(std::span<const RatingPair> train,
                                       std::span<const RatingPair> test) {
  if (train.empty()) throw InputError("baseline needs training pairs");
  double mu = 0.0;
  for (const auto& p : train) mu += p.rating;
  mu /= static_cast<double>(train.size());
  std::vector<Prediction> preds(test.size(), Prediction{mu, clamp_rating(mu), false});
  return make_eval_report("global_mean", test, preds);
}

/// mu + b_user + b_item with damped (shrunk) deviations.
inline EvalReport bias_baseline(std::span<const RatingPair> train, std::span<const RatingPair> test,
                                double damping = 5.0) {
  if (train.empty()) throw InputError("baseline needs training pairs");
  double mu = 0.0;
  for (const auto& p : train) mu += p.rating;
  mu /= static_cast<double>(train.size());
  std::map<std::string, std::pair<double, double>> bu, bi;  // (sum, count)
  for (const auto& p : train) {
    bu[p.user_id].first += p.rating - mu;
    bu[p.user_id].second += 1.0;
  }
  auto user_bias = [&](const std::string& u) {
    auto it = bu.find(u);
    return it == bu.end() ? 0.0 : it->second.first / (it->second.second + damping);
  };
  for (const auto& p : train) {
    bi[p.item_id].first += p.rating - mu - user_bias(p.user_id);
    bi[p.item_id].second += 1.0;
  }
  auto item_bias = [&](const std::string& i) {
    auto it = bi.find(i);
    return it == bi.end() ? 0.0 : it->second.first / (it->second.second + damping);
  };
  std::vector<Prediction> preds;
  for (const auto& p : test) {
    const double r = mu + user_bias(p.user_id) + item_bias(p.item_id);
    preds.push_back({r, clamp_rating(r), false});
  }
  return make_eval_report("user_item_bias", test, preds);
}

// ---------------------------------------------------------------------------
// Shuffle robustness

struct ShuffleRow {
  std::uint64_t seed = 0;
  double mse = 0.0;
  double abs_delta = 0.0;  // mse - baseline
  double rel_delta = 0.0;  // (mse - baseline) / baseline
};

struct ShuffleReport {
  double baseline_mse = 0.0;
  std::vector<ShuffleRow> rows;

  double mean_abs_rel_delta() const {
    if (rows.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : rows) s += std::abs(r.rel_delta);
    return s / static_cast<double>(rows.size());
  }

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "seed,mse,abs_delta,rel_delta\n";
    for (const auto& r : rows)
      os << r.seed << ',' << r.mse << ',' << r.abs_delta << ',' << r.rel_delta << '\n';
    return os.str();
  }
};

/// Every user and every item document review-shuffled independently; the
/// per-document seed is derived from (seed, owner kind, owner id).
inline DocumentSet shuffle_documents(const DocumentSet& docs, std::uint64_t seed) {
  DocumentSet out = docs;
  for (auto& [id, doc] : out.users) doc = shuffle_document(doc, mix_seed(seed, fnv1a64("u:" + id)));
  for (auto& [id, doc] : out.items) doc = shuffle_document(doc, mix_seed(seed, fnv1a64("i:" + id)));
  return out;
}

template <typename T>
ShuffleReport shuffle_experiment(const CnnRegressor<T>& model, std::span<const RatingPair> test,
                                 const DocumentSet& docs, const EmbeddingTable& table,
                                 std::span<const std::uint64_t> seeds, std::size_t threads = 1) {
  ShuffleReport rep;
  rep.baseline_mse = evaluate(model, test, docs, table, "original", threads).mse;
  for (auto seed : seeds) {
    const auto shuffled = shuffle_documents(docs, seed);
    ShuffleRow row;
    row.seed = seed;
    row.mse = evaluate(model, test, shuffled, table, "shuffled", threads).mse;
    row.abs_delta = row.mse - rep.baseline_mse;
    row.rel_delta = rep.baseline_mse > 0 ? row.abs_delta / rep.baseline_mse : 0.0;
    rep.rows.push_back(row);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Sparsity cohorts

inline constexpr std::size_t kMaxCohort = 5;

struct CohortCell {
  std::size_t n = 0;
  double mse = 0.0;
};

struct CohortReport {
  // Index k-1 holds the cohort of owners with exactly k training reviews;
  // empty cohorts stay nullopt.
  std::array<std::optional<CohortCell>, kMaxCohort> user{};
  std::array<std::optional<CohortCell>, kMaxCohort> item{};
  std::size_t user_excluded = 0;
  std::size_t item_excluded = 0;

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "cohort,user_n,user_mse,item_n,item_mse\n";
    for (std::size_t k = 0; k < kMaxCohort; ++k) {
      os << k + 1 << ',';
      if (user[k]) os << user[k]->n << ',' << user[k]->mse; else os << "0,";
      os << ',';
      if (item[k]) os << item[k]->n << ',' << item[k]->mse; else os << "0,";
      os << '\n';
    }
    return os.str();
  }
};

/// Cohort index (1..5) of an owner's exact training-review count; 0 means excluded.
inline std::size_t cohort_of(std::size_t train_count) {
  return train_count >= 1 && train_count <= kMaxCohort ? train_count : 0;
}

/// Groups evaluated pairs by the training-review counts of their user and item.
inline CohortReport bucket_cohorts(const EvalReport& eval, std::span<const RatingPair> train) {
  std::map<std::string, std::size_t> user_count, item_count;
  for (const auto& p : train) {
    ++user_count[p.user_id];
    ++item_count[p.item_id];
  }
  std::array<std::pair<double, std::size_t>, kMaxCohort> us{}, is{};
  CohortReport rep;
  auto count_of = [](const std::map<std::string, std::size_t>& m, const std::string& id) {
    auto it = m.find(id);
    return it == m.end() ? std::size_t{0} : it->second;
  };
  for (const auto& p : eval.pairs) {
    if (auto k = cohort_of(count_of(user_count, p.user_id))) {
      us[k - 1].first += p.squared_error;
      ++us[k - 1].second;
    } else {
      ++rep.user_excluded;
    }
    if (auto k = cohort_of(count_of(item_count, p.item_id))) {
      is[k - 1].first += p.squared_error;
      ++is[k - 1].second;
    } else {
      ++rep.item_excluded;
    }
  }
  for (std::size_t k = 0; k < kMaxCohort; ++k) {
    if (us[k].second) rep.user[k] = CohortCell{us[k].second, us[k].first / static_cast<double>(us[k].second)};
    if (is[k].second) rep.item[k] = CohortCell{is[k].second, is[k].first / static_cast<double>(is[k].second)};
  }
  return rep;
}

template <typename T>
CohortReport sparsity_experiment(const CnnRegressor<T>& model, std::span<const RatingPair> test,
                                 std::span<const RatingPair> train, const DocumentSet& docs,
                                 const EmbeddingTable& table, std::size_t threads = 1) {
  return bucket_cohorts(evaluate(model, test, docs, table, "model", threads), train);
}

/// Paired t-test on the per-pair squared errors of two reports over the same test set.
inline TTestResult compare_reports(const EvalReport& a, const EvalReport& b) {
  if (a.pairs.size() != b.pairs.size())
    throw InputError("reports cover different numbers of test pairs");
  for (std::size_t i = 0; i < a.pairs.size(); ++i)
    if (a.pairs[i].user_id != b.pairs[i].user_id || a.pairs[i].item_id != b.pairs[i].item_id)
      throw InputError("reports are not aligned at row " + std::to_string(i + 1));
  auto ea = a.squared_errors(), eb = b.squared_errors();
  return paired_t_test(ea, eb);
}

inline nlohmann::ordered_json ttest_json(const TTestResult& r) {
  nlohmann::ordered_json j;
  if (std::isfinite(r.t)) j["t"] = r.t; else j["t"] = nullptr;
  j["p"] = r.p;
  j["df"] = r.df;
  j["mean_difference"] = r.mean_difference;
  j["degenerate"] = r.degenerate;
  return j;
}

}  // namespace matchrec
