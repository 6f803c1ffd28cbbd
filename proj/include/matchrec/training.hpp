#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "matchrec/corpus.hpp"
#include "matchrec/embeddings.hpp"
#include "matchrec/error.hpp"
#include "matchrec/matching.hpp"
#include "matchrec/model.hpp"

namespace matchrec {

/// Mean of squared residuals.
inline double mse(std::span<const double> predictions, std::span<const double> targets) {
  if (predictions.empty()) throw InputError("mse of an empty set");
  if (predictions.size() != targets.size())
    throw InputError("mse: " + std::to_string(predictions.size()) + " predictions vs " +
                     std::to_string(targets.size()) + " targets");
  double s = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double r = targets[i] - predictions[i];
    s += r * r;
  }
  return s / static_cast<double>(predictions.size());
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double weight_decay = 0.0;
  std::size_t max_epochs = 20;
  std::size_t patience = 3;
  std::uint64_t rng_seed = 0;
  // Start the regression bias at the mean training rating instead of 0.
  bool init_head_bias_to_mean = true;
  bool cache_matrices = false;
  std::string precision = "f32";  // "f32" or "f64"
  std::size_t threads = 1;        // evaluation fan-out; training is sequential

  void validate() const {
    if (batch_size < 1) throw InputError("batch_size must be >= 1");
    if (!(learning_rate > 0)) throw InputError("learning_rate must be > 0");
    if (patience < 1) throw InputError("patience must be >= 1");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1))
      throw InputError("adam betas must lie in [0, 1)");
    if (!(adam_epsilon > 0)) throw InputError("adam_epsilon must be > 0");
    if (weight_decay < 0) throw InputError("weight_decay must be >= 0");
    if (precision != "f32" && precision != "f64")
      throw InputError("precision must be \"f32\" or \"f64\"");
    if (threads < 1) throw InputError("threads must be >= 1");
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["batch_size"] = batch_size;
    j["learning_rate"] = learning_rate;
    j["adam_beta1"] = adam_beta1;
    j["adam_beta2"] = adam_beta2;
    j["adam_epsilon"] = adam_epsilon;
    j["weight_decay"] = weight_decay;
    j["max_epochs"] = max_epochs;
    j["patience"] = patience;
    j["rng_seed"] = rng_seed;
    j["init_head_bias_to_mean"] = init_head_bias_to_mean;
    j["cache_matrices"] = cache_matrices;
    j["precision"] = precision;
    j["threads"] = threads;
    return j;
  }

  template <typename Json>
  static TrainConfig from_json(const Json& j) {
    if (!j.is_object()) throw InputError("train config must be a JSON object");
    TrainConfig c;
    try {
      for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        const auto& v = it.value();
        if (k == "batch_size") c.batch_size = v.template get<std::size_t>();
        else if (k == "learning_rate") c.learning_rate = v.template get<double>();
        else if (k == "adam_beta1") c.adam_beta1 = v.template get<double>();
        else if (k == "adam_beta2") c.adam_beta2 = v.template get<double>();
        else if (k == "adam_epsilon") c.adam_epsilon = v.template get<double>();
        else if (k == "weight_decay") c.weight_decay = v.template get<double>();
        else if (k == "max_epochs") c.max_epochs = v.template get<std::size_t>();
        else if (k == "patience") c.patience = v.template get<std::size_t>();
        else if (k == "rng_seed") c.rng_seed = v.template get<std::uint64_t>();
        else if (k == "init_head_bias_to_mean") c.init_head_bias_to_mean = v.template get<bool>();
        else if (k == "cache_matrices") c.cache_matrices = v.template get<bool>();
        else if (k == "precision") c.precision = v.template get<std::string>();
        else if (k == "threads") c.threads = v.template get<std::size_t>();
        else throw InputError("unknown train config key '" + k + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw InputError(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Adam

struct AdamMoments {
  std::vector<double> m, v;
};

struct AdamState {
  std::size_t step = 0;
  std::vector<AdamMoments> moments;  // one per trainable tensor, declared order
};

/// One bias-corrected Adam update of `params` at step t >= 1.
template <typename T>
void adam_update(std::span<T> params, std::span<const T> grads, AdamMoments& mom,
                 std::size_t t, const TrainConfig& cfg, const std::string& name = "tensor") {
  if (t < 1) throw InputError("adam step must be >= 1");
  if (params.size() != grads.size()) throw ModelError("gradient shape mismatch for " + name);
  for (T g : grads)
    if (!std::isfinite(static_cast<double>(g)))
      throw ModelError("non-finite gradient in " + name);
  if (mom.m.size() != params.size()) {
    mom.m.assign(params.size(), 0.0);
    mom.v.assign(params.size(), 0.0);
  }
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]) + cfg.weight_decay * params[i];
    mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g;
    mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g * g;
    const double mhat = mom.m[i] / c1, vhat = mom.v[i] / c2;
    params[i] = static_cast<T>(params[i] - cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_epsilon));
  }
}

/// Adam over every trainable tensor of the model. Advances state.step.
template <typename T>
void adam_step(CnnRegressor<T>& model, const CnnRegressor<T>& grads, AdamState& state,
               const TrainConfig& cfg) {
  std::vector<std::pair<std::string, std::span<const T>>> g;
  for_each_parameter(grads, [&](const std::string& name, std::span<const T> s) {
    g.emplace_back(name, s);
  });
  for (const auto& [name, s] : g)
    for (T v : s)
      if (!std::isfinite(static_cast<double>(v))) throw ModelError("non-finite gradient in " + name);
  state.moments.resize(g.size());
  const std::size_t t = ++state.step;
  std::size_t k = 0;
  for_each_parameter(model, [&](const std::string& name, std::span<T> p) {
    adam_update<T>(p, g[k].second, state.moments[k], t, cfg, name);
    ++k;
  });
  ++model.revision;
}

// ---------------------------------------------------------------------------
// Pair encoding and prediction

struct RatingPair {
  std::string user_id;
  std::string item_id;
  double rating = 0.0;
};

inline std::vector<RatingPair> to_pairs(const std::vector<ReviewRecord>& records) {
  std::vector<RatingPair> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back({r.user_id, r.item_id, r.rating});
  return out;
}

/// Resolves each document to embedding vectors once, then builds matching
/// matrices for pairs on demand.
class PairEncoder {
public:
  PairEncoder(const DocumentSet& docs, const EmbeddingTable& table, std::size_t n_max,
              std::size_t m_max)
      : n_max_(n_max), m_max_(m_max) {
    for (const auto& [id, doc] : docs.users) users_.emplace(id, resolve_document(doc, table, n_max));
    for (const auto& [id, doc] : docs.items) items_.emplace(id, resolve_document(doc, table, m_max));
  }

  /// False when either document is empty (or the owner is unknown); such
  /// pairs fall back to the training mean rating.
  bool has_content(const RatingPair& p) const {
    auto u = users_.find(p.user_id);
    auto i = items_.find(p.item_id);
    return u != users_.end() && i != items_.end() && u->second.size() > 0 && i->second.size() > 0;
  }

  template <typename T>
  MatchingMatrix<T> matrix(const RatingPair& p) const {
    static const DocumentVectors empty;
    auto u = users_.find(p.user_id);
    auto i = items_.find(p.item_id);
    return build_matching_matrix<T>(u == users_.end() ? empty : u->second,
                                    i == items_.end() ? empty : i->second, n_max_, m_max_);
  }

private:
  std::size_t n_max_, m_max_;
  std::map<std::string, DocumentVectors> users_, items_;
};

struct Prediction {
  double raw = 0.0;
  double clamped = 0.0;
  bool fallback = false;
};

/// Eval-mode predictions in input order. Work is split into contiguous
/// chunks across `threads`; each prediction depends only on its own pair, so
/// results do not depend on the thread count.
template <typename T>
std::vector<Prediction> predict_pairs(const CnnRegressor<T>& model,
                                      std::span<const RatingPair> pairs,
                                      const PairEncoder& encoder, double fallback_rating,
                                      std::size_t threads = 1) {
  std::vector<Prediction> out(pairs.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    constexpr std::size_t kChunk = 16;
    std::vector<MatchingMatrix<T>> mats;
    std::vector<std::size_t> slots;
    auto flush = [&] {
      if (mats.empty()) return;
      std::vector<const MatchingMatrix<T>*> ptrs;
      for (const auto& m : mats) ptrs.push_back(&m);
      auto tr = forward(model, stack_matrices<T>(ptrs, model.config), Mode::Eval);
      for (std::size_t k = 0; k < slots.size(); ++k) {
        const double r = static_cast<double>(tr.predictions[k]);
        out[slots[k]] = {r, clamp_rating(r), false};
      }
      mats.clear();
      slots.clear();
    };
    for (std::size_t i = begin; i < end; ++i) {
      if (!encoder.has_content(pairs[i])) {
        out[i] = {fallback_rating, clamp_rating(fallback_rating), true};
        continue;
      }
      mats.push_back(encoder.matrix<T>(pairs[i]));
      slots.push_back(i);
      if (mats.size() == kChunk) flush();
    }
    flush();
  };
  threads = std::max<std::size_t>(1, std::min(threads, pairs.size()));
  if (threads == 1) {
    work(0, pairs.size());
  } else {
    std::vector<std::jthread> pool;
    const std::size_t per = (pairs.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t b = t * per, e = std::min(pairs.size(), b + per);
      if (b < e) pool.emplace_back(work, b, e);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_mse = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::optional<std::size_t> best_epoch;  // empty when no epoch ran
  std::size_t skipped_train_pairs = 0;    // pairs with an empty document

  /// epoch,train_loss,val_mse,seconds. With `with_timing` false the seconds
  /// column is omitted, leaving only reproducible content.
  std::string to_csv(bool with_timing = true) const {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,train_loss,val_mse" << (with_timing ? ",seconds" : "") << '\n';
    for (const auto& e : epochs) {
      os << e.epoch << ',' << e.train_loss << ',' << e.val_mse;
      if (with_timing) os << ',' << e.seconds;
      os << '\n';
    }
    return os.str();
  }
};

template <typename T>
struct FitResult {
  CnnRegressor<T> model;
  TrainReport report;
};

inline double mse_clamped(const std::vector<Prediction>& preds, std::span<const RatingPair> pairs) {
  std::vector<double> p, t;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    p.push_back(preds[i].clamped);
    t.push_back(pairs[i].rating);
  }
  return mse(p, t);
}

/// Minibatch Adam on per-pair squared error with early stopping on
/// validation MSE (Eval mode, clamped). Returns the best-validation model.
template <typename T>
FitResult<T> fit(CnnRegressor<T> model, std::span<const RatingPair> train,
                 std::span<const RatingPair> validation, const DocumentSet& docs,
                 const EmbeddingTable& table, const TrainConfig& cfg) {
  cfg.validate();
  FitResult<T> result;
  if (cfg.max_epochs == 0) {
    result.model = std::move(model);
    return result;
  }
  if (train.empty()) throw InputError("training set is empty");
  if (validation.empty()) throw InputError("validation set is empty");

  const PairEncoder encoder(docs, table, model.config.n_max, model.config.m_max);
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < train.size(); ++i)
    if (encoder.has_content(train[i])) usable.push_back(i);
  result.report.skipped_train_pairs = train.size() - usable.size();
  if (usable.empty()) throw InputError("no training pair has non-empty documents");

  if (cfg.init_head_bias_to_mean) {
    double s = 0.0;
    for (auto i : usable) s += train[i].rating;
    model.head_bias[0] = static_cast<T>(s / static_cast<double>(usable.size()));
  }

  std::vector<std::optional<MatchingMatrix<T>>> cache(cfg.cache_matrices ? train.size() : 0);
  auto matrix_for = [&](std::size_t i) -> MatchingMatrix<T> {
    if (!cfg.cache_matrices) return encoder.matrix<T>(train[i]);
    if (!cache[i]) cache[i] = encoder.matrix<T>(train[i]);
    return *cache[i];
  };

  AdamState adam;
  std::optional<CnnRegressor<T>> best;
  double best_mse = 0.0;
  std::size_t since_best = 0;
  std::vector<std::size_t> order = usable;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(mix_seed(cfg.rng_seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double sq_sum = 0.0;
    for (std::size_t start = 0, batch_no = 1; start < order.size();
         start += cfg.batch_size, ++batch_no) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<MatchingMatrix<T>> mats;
      for (std::size_t k = start; k < end; ++k) mats.push_back(matrix_for(order[k]));
      std::vector<const MatchingMatrix<T>*> ptrs;
      for (const auto& m : mats) ptrs.push_back(&m);

      auto tr = forward(model, stack_matrices<T>(ptrs, model.config), Mode::Train);
      const double B = static_cast<double>(end - start);
      std::vector<T> d_pred(end - start);
      double batch_sq = 0.0;
      for (std::size_t k = 0; k < d_pred.size(); ++k) {
        const double r = static_cast<double>(tr.predictions[k]) - train[order[start + k]].rating;
        batch_sq += r * r;
        d_pred[k] = static_cast<T>(2.0 * r / B);
      }
      if (!std::isfinite(batch_sq))
        throw ModelError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(batch_no));
      sq_sum += batch_sq;
      auto grads = backward<T>(tr, model, d_pred);
      commit_batch_statistics(model, tr);
      adam_step(model, grads, adam, cfg);
    }

    const auto preds = predict_pairs(model, validation, encoder, docs.train_mean_rating, cfg.threads);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = sq_sum / static_cast<double>(order.size());
    rec.val_mse = mse_clamped(preds, validation);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.report.epochs.push_back(rec);
    log(LogLevel::Info, "epoch " + std::to_string(epoch) + " train_loss " +
                            std::to_string(rec.train_loss) + " val_mse " + std::to_string(rec.val_mse));

    if (!best || rec.val_mse < best_mse) {
      best = model;
      best_mse = rec.val_mse;
      result.report.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  result.model = std::move(*best);
  return result;
}

}  // namespace matchrec
