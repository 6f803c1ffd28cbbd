#pragma once

// Synthetic corpora with a planted, interaction-visible rating signal.
// Used by tests, the acceptance suite and `matchrec synth`.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "matchrec/corpus.hpp"
#include "matchrec/embeddings.hpp"
#include "matchrec/training.hpp"

namespace matchrec::synthetic {

// ---------------------------------------------------------------------------
// Tiny overlap corpus: rating = 1 + 4 * shared / max_shared.

struct OverlapCorpus {
  DocumentSet docs;
  std::vector<RatingPair> pairs;
  std::vector<std::size_t> overlap;  // shared tokens per pair
};

inline OverlapCorpus overlap_corpus(std::size_t n_pairs = 20, std::size_t doc_len = 12,
                                    std::size_t max_shared = 6, std::uint64_t seed = 11) {
  std::mt19937_64 rng(mix_seed(seed, 0x0e1));
  OverlapCorpus c;
  std::size_t fresh = 0;
  auto new_token = [&] { return "w" + std::to_string(fresh++); };
  for (std::size_t k = 0; k < n_pairs; ++k) {
    const std::size_t shared = k % (max_shared + 1);
    std::vector<std::string> user_tokens, item_tokens;
    for (std::size_t t = 0; t < doc_len; ++t) user_tokens.push_back(new_token());
    std::vector<std::string> pick = user_tokens;
    std::shuffle(pick.begin(), pick.end(), rng);
    for (std::size_t t = 0; t < shared; ++t) item_tokens.push_back(pick[t]);
    while (item_tokens.size() < doc_len) item_tokens.push_back(new_token());
    std::shuffle(item_tokens.begin(), item_tokens.end(), rng);

    const std::string num = (k < 10 ? "0" : "") + std::to_string(k);
    const std::string uid = "u" + num, iid = "i" + num;
    Document u{uid, OwnerKind::User, {user_tokens}, {k}};
    Document i{iid, OwnerKind::Item, {item_tokens}, {k}};
    c.docs.users.emplace(uid, std::move(u));
    c.docs.items.emplace(iid, std::move(i));
    const double rating =
        1.0 + 4.0 * static_cast<double>(shared) / static_cast<double>(max_shared);
    c.pairs.push_back({uid, iid, rating});
    c.overlap.push_back(shared);
  }
  double s = 0.0;
  for (const auto& p : c.pairs) s += p.rating;
  c.docs.train_mean_rating = s / static_cast<double>(c.pairs.size());
  return c;
}

// ---------------------------------------------------------------------------
// Amazon-format review corpus driven by latent aspect preferences.
//
// Every user cares about a few aspects and every item is strong in a few.
// Ratings rise with the number of aspects a user cares about that the item
// is strong in, plus user/item offsets and noise. Reviews mention the
// writer's aspects and the item's aspects through synonym words whose
// embeddings cluster per aspect, so the signal is only visible by matching
// a user's document against an item's document.

struct ReviewCorpusOptions {
  std::size_t n_users = 400;
  std::size_t n_items = 250;
  std::size_t n_reviews = 5000;
  std::size_t aspects_per_owner = 3;
  std::size_t filler_per_review = 6;
  double base_rating = 1.0;
  double signal_span = 4.0;  // rating gain when every aspect is shared
  double offset_sd = 0.15;
  double noise_sd = 0.3;
  std::size_t embedding_dim = 32;
  std::uint64_t seed = 2024;
};

struct ReviewCorpus {
  std::vector<ReviewRecord> records;
  EmbeddingTable embeddings;
};

inline const std::vector<std::vector<std::string>>& aspect_lexicon() {
  static const std::vector<std::vector<std::string>> lex = {
      {"sound", "tone", "audio", "resonance"},      {"price", "cost", "value", "bargain"},
      {"durable", "sturdy", "solid", "rugged"},     {"tuning", "pitch", "intonation", "tuner"},
      {"strings", "gauge", "nickel", "bronze"},     {"cable", "cord", "jack", "connector"},
      {"shipping", "delivery", "arrived", "packaging"}, {"comfort", "grip", "ergonomic", "padded"},
      {"volume", "loud", "gain", "amplifier"},      {"stand", "mount", "clamp", "bracket"},
  };
  return lex;
}

inline ReviewCorpus review_corpus(const ReviewCorpusOptions& opt = {}) {
  std::mt19937_64 rng(mix_seed(opt.seed, 0xa5a));
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto& lex = aspect_lexicon();
  const std::size_t K = lex.size();

  ReviewCorpus out;
  out.embeddings = EmbeddingTable(opt.embedding_dim, opt.seed);
  auto random_unit = [&] {
    std::vector<double> v(opt.embedding_dim);
    double n2 = 0.0;
    for (auto& x : v) {
      x = normal(rng);
      n2 += x * x;
    }
    for (auto& x : v) x /= std::sqrt(n2);
    return v;
  };
  for (const auto& synonyms : lex) {
    const auto centre = random_unit();
    for (const auto& w : synonyms) {
      auto v = centre;
      const auto jitter = random_unit();
      for (std::size_t d = 0; d < v.size(); ++d) v[d] += 0.35 * jitter[d];
      out.embeddings.insert(w, std::move(v));
    }
  }
  std::vector<std::string> filler;
  for (std::size_t f = 0; f < 300; ++f) {
    filler.push_back("f" + std::to_string(f));
    out.embeddings.insert(filler.back(), random_unit());
  }

  auto pick_aspects = [&] {
    std::vector<std::size_t> all(K);
    for (std::size_t k = 0; k < K; ++k) all[k] = k;
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(opt.aspects_per_owner);
    std::sort(all.begin(), all.end());
    return all;
  };
  std::vector<std::vector<std::size_t>> user_aspects, item_aspects;
  std::vector<double> user_offset, item_offset, user_weight, item_weight;
  for (std::size_t u = 0; u < opt.n_users; ++u) {
    user_aspects.push_back(pick_aspects());
    user_offset.push_back(opt.offset_sd * normal(rng));
    user_weight.push_back(1.0 / std::pow(static_cast<double>(u + 1), 0.6));
  }
  for (std::size_t i = 0; i < opt.n_items; ++i) {
    item_aspects.push_back(pick_aspects());
    item_offset.push_back(opt.offset_sd * normal(rng));
    item_weight.push_back(1.0 / std::pow(static_cast<double>(i + 1), 0.6));
  }
  std::discrete_distribution<std::size_t> pick_user(user_weight.begin(), user_weight.end());
  std::discrete_distribution<std::size_t> pick_item(item_weight.begin(), item_weight.end());
  std::uniform_int_distribution<std::size_t> syn(0, 3), fill(0, filler.size() - 1);

  std::set<std::pair<std::size_t, std::size_t>> seen;
  std::int64_t clock = 1'300'000'000;
  std::size_t guard = 0;
  while (out.records.size() < opt.n_reviews && guard++ < opt.n_reviews * 50) {
    const std::size_t u = pick_user(rng), i = pick_item(rng);
    if (!seen.insert({u, i}).second) continue;
    std::size_t shared = 0;
    for (auto a : user_aspects[u])
      shared += std::count(item_aspects[i].begin(), item_aspects[i].end(), a);
    const double latent = opt.base_rating + opt.signal_span * static_cast<double>(shared) /
                                    static_cast<double>(opt.aspects_per_owner) +
                          user_offset[u] + item_offset[i] + opt.noise_sd * normal(rng);
    const double rating = std::clamp(std::round(latent), 1.0, 5.0);

    std::vector<std::string> words;
    for (std::size_t t = 0; t < 2; ++t) {
      words.push_back(lex[user_aspects[u][(t + u) % user_aspects[u].size()]][syn(rng)]);
      words.push_back(lex[item_aspects[i][(t + i + out.records.size()) % item_aspects[i].size()]][syn(rng)]);
    }
    for (std::size_t t = 0; t < opt.filler_per_review; ++t) words.push_back(filler[fill(rng)]);
    std::shuffle(words.begin(), words.end(), rng);
    std::string text;
    for (const auto& w : words) text += (text.empty() ? "" : " ") + w;

    clock += 3600 + static_cast<std::int64_t>(rng() % 86400);
    char uid[24], iid[24];
    std::snprintf(uid, sizeof uid, "A%05zu", u);
    std::snprintf(iid, sizeof iid, "B%05zu", i);
    out.records.push_back({uid, iid, rating, text + ".", clock});
  }
  return out;
}

inline void write_embeddings(std::ostream& os, const EmbeddingTable& table,
                             const std::vector<std::string>& tokens) {
  os.precision(17);
  os << tokens.size() << ' ' << table.dim() << '\n';
  for (const auto& t : tokens) {
    os << t;
    for (double v : table.lookup(t)) os << ' ' << v;
    os << '\n';
  }
}

/// Vocabulary of the review corpus's embedding table, in a stable order.
inline std::vector<std::string> review_vocabulary() {
  std::vector<std::string> out;
  for (const auto& syn : aspect_lexicon()) out.insert(out.end(), syn.begin(), syn.end());
  for (std::size_t f = 0; f < 300; ++f) out.push_back("f" + std::to_string(f));
  return out;
}

}  // namespace matchrec::synthetic
