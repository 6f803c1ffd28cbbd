#pragma once

// `matchrec` command-line driver. Exit codes: 0 success, 2 input/config
// error, 3 model/numerical error.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "matchrec/checkpoint.hpp"
#include "matchrec/corpus.hpp"
#include "matchrec/embeddings.hpp"
#include "matchrec/experiments.hpp"
#include "matchrec/synthetic.hpp"
#include "matchrec/training.hpp"
#include "matchrec/util.hpp"

namespace matchrec::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;
inline constexpr int kExitModel = 3;

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// One per run, written last as <out_dir>/manifest.json.
class RunManifest {
public:
  explicit RunManifest(std::string command) {
    j_["command"] = std::move(command);
    j_["tool_version"] = std::string(kVersion);
    j_["config"] = ojson::object();
    j_["inputs"] = ojson::object();
    j_["seeds"] = ojson::object();
    j_["started_at"] = utc_now();
  }
  ojson& config() { return j_["config"]; }
  ojson& seeds() { return j_["seeds"]; }
  void input(const std::string& role, const fs::path& path) {
    j_["inputs"][role] = {{"path", path.string()}, {"digest", file_digest(path)}};
  }
  void set(const std::string& key, ojson value) { j_[key] = std::move(value); }
  void write(const fs::path& dir) {
    j_["finished_at"] = utc_now();
    write_file_atomic(dir / "manifest.json", j_.dump(2) + "\n");
  }

private:
  ojson j_;
};

inline std::vector<ReviewRecord> read_reviews(const fs::path& path, bool strict = false) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open reviews file " + path.string());
  auto res = parse_reviews(in);
  for (const auto& e : res.errors) {
    if (strict) throw InputError(path.string() + ":" + std::to_string(e.line) + ": " + e.reason);
    log(LogLevel::Warn, path.string() + ":" + std::to_string(e.line) + ": skipped, " + e.reason);
  }
  if (res.skipped_empty_text)
    log(LogLevel::Info, std::to_string(res.skipped_empty_text) + " lines without reviewText skipped");
  return std::move(res.records);
}

inline ojson read_json_file(const fs::path& path) {
  auto j = ojson::parse(read_file(path), nullptr, false);
  if (j.is_discarded()) throw InputError("invalid JSON in " + path.string());
  return j;
}

/// Split directory written by `split`: train/validation/test JSON lines.
inline DatasetSplit read_split(const fs::path& dir) {
  DatasetSplit s;
  s.train = read_reviews(dir / "train.jsonl", true);
  s.validation = read_reviews(dir / "validation.jsonl", true);
  s.test = read_reviews(dir / "test.jsonl", true);
  return s;
}

inline std::vector<double> parse_real_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw InputError("bad number '" + item + "' in list '" + text + "'");
    }
  }
  return out;
}

inline EmbeddingTable resolve_table(const std::optional<fs::path>& path, std::size_t dim,
                                    std::uint64_t oov_seed) {
  if (path) return load_embeddings(*path, oov_seed);
  return EmbeddingTable(dim, oov_seed);
}

// ---------------------------------------------------------------------------
// Commands

struct StatsArgs {
  fs::path reviews;
  std::optional<fs::path> out_dir;
};

inline int cmd_stats(const StatsArgs& a) {
  RunManifest manifest("stats");
  auto records = read_reviews(a.reviews);
  auto stats = compute_corpus_stats(records).to_json();
  std::cout << stats.dump(2) << '\n';
  if (a.out_dir) {
    ensure_directory(*a.out_dir);
    write_file_atomic(*a.out_dir / "stats.json", stats.dump(2) + "\n");
    manifest.input("reviews", a.reviews);
    manifest.write(*a.out_dir);
  }
  return kExitOk;
}

struct SplitArgs {
  fs::path reviews;
  fs::path out_dir;
  std::string ratios = "0.8,0.1,0.1";
  std::uint64_t seed = 0;
};

inline int cmd_split(const SplitArgs& a) {
  RunManifest manifest("split");
  auto r = parse_real_list(a.ratios);
  if (r.size() != 3) throw InputError("--ratios needs three comma-separated values");
  SplitRatios ratios{r[0], r[1], r[2]};
  validate_ratios(ratios);
  auto records = read_reviews(a.reviews);
  auto split = split_dataset(records, ratios, a.seed);
  ensure_directory(a.out_dir);

  // Files list records in original input order.
  auto write_part = [&](const char* name, std::vector<std::size_t> idx) {
    std::sort(idx.begin(), idx.end());
    std::string body;
    for (auto i : idx) body += to_json_line(records[i]) + "\n";
    write_file_atomic(a.out_dir / name, body);
  };
  write_part("train.jsonl", split.train_index);
  write_part("validation.jsonl", split.validation_index);
  write_part("test.jsonl", split.test_index);

  manifest.input("reviews", a.reviews);
  manifest.config()["ratios"] = {ratios.train, ratios.validation, ratios.test};
  manifest.seeds()["split"] = a.seed;
  manifest.set("counts", {{"train", split.train.size()},
                          {"validation", split.validation.size()},
                          {"test", split.test.size()}});
  manifest.write(a.out_dir);
  std::cout << "train " << split.train.size() << ", validation " << split.validation.size()
            << ", test " << split.test.size() << '\n';
  return kExitOk;
}

struct TrainArgs {
  fs::path split_dir;
  std::optional<fs::path> embeddings;
  std::optional<fs::path> model_config;
  std::optional<fs::path> train_config;
  fs::path out_dir;
  std::uint64_t oov_seed = 0;
  // Flag overrides.
  std::optional<std::size_t> epochs, batch_size, patience, threads, n_max, m_max;
  std::optional<double> learning_rate;
  std::optional<std::uint64_t> seed, init_seed;
  std::optional<std::string> precision;
  bool single_thread = false;
};

template <typename T>
void train_with(const ModelConfig& mc, const TrainConfig& tc, const DatasetSplit& split,
                const EmbeddingTable& table, const fs::path& out_dir, const ojson& meta,
                RunManifest& manifest) {
  const auto docs = build_documents(split);
  const auto train = to_pairs(split.train), val = to_pairs(split.validation);
  auto model = init_params<T>(mc);
  auto result = fit<T>(std::move(model), train, val, docs, table, tc);
  save_checkpoint(out_dir / "model.ckpt", result.model, meta);
  write_file_atomic(out_dir / "train_report.csv", result.report.to_csv());
  manifest.set("result", {{"epochs_run", result.report.epochs.size()},
                          {"best_epoch", result.report.best_epoch ? ojson(*result.report.best_epoch)
                                                                  : ojson(nullptr)},
                          {"skipped_train_pairs", result.report.skipped_train_pairs}});
  if (result.report.best_epoch)
    std::cout << "best epoch " << *result.report.best_epoch << ", validation MSE "
              << result.report.epochs[*result.report.best_epoch - 1].val_mse << '\n';
  else
    std::cout << "no epochs run; initial model written\n";
}

inline int cmd_train(const TrainArgs& a) {
  RunManifest manifest("train");
  ModelConfig mc;
  bool dim_explicit = false;
  if (a.model_config) {
    auto j = read_json_file(*a.model_config);
    mc = ModelConfig::from_json(j);
    dim_explicit = j.contains("embedding_dim");
    manifest.input("model_config", *a.model_config);
  }
  TrainConfig tc;
  if (a.train_config) {
    tc = TrainConfig::from_json(read_json_file(*a.train_config));
    manifest.input("train_config", *a.train_config);
  }
  if (a.n_max) mc.n_max = *a.n_max;
  if (a.m_max) mc.m_max = *a.m_max;
  if (a.init_seed) mc.init_seed = *a.init_seed;
  if (a.epochs) tc.max_epochs = *a.epochs;
  if (a.batch_size) tc.batch_size = *a.batch_size;
  if (a.patience) tc.patience = *a.patience;
  if (a.learning_rate) tc.learning_rate = *a.learning_rate;
  if (a.seed) tc.rng_seed = *a.seed;
  if (a.precision) tc.precision = *a.precision;
  if (a.threads) tc.threads = *a.threads;
  if (a.single_thread) tc.threads = 1;
  tc.validate();
  mc.block_shapes();  // ModelError on collapse

  auto split = read_split(a.split_dir);
  for (const char* f : {"train.jsonl", "validation.jsonl", "test.jsonl"})
    manifest.input(f, a.split_dir / f);
  EmbeddingTable table = resolve_table(a.embeddings, mc.embedding_dim, a.oov_seed);
  if (a.embeddings) {
    manifest.input("embeddings", *a.embeddings);
    if (table.dim() != mc.embedding_dim) {
      if (dim_explicit)
        throw ModelError("embedding_dim: model config says " + std::to_string(mc.embedding_dim) +
                         ", embeddings file has " + std::to_string(table.dim()));
      mc.embedding_dim = table.dim();
    }
  }
  ensure_directory(a.out_dir);

  manifest.config()["model"] = mc.to_json();
  manifest.config()["train"] = tc.to_json();
  manifest.config()["embedding_dim"] = mc.embedding_dim;
  manifest.config()["oov_seed"] = a.oov_seed;
  manifest.seeds()["init_seed"] = mc.init_seed;
  manifest.seeds()["rng_seed"] = tc.rng_seed;
  manifest.seeds()["oov_seed"] = a.oov_seed;

  ojson meta;
  meta["precision"] = tc.precision;
  meta["oov_seed"] = a.oov_seed;
  if (tc.precision == "f64")
    train_with<double>(mc, tc, split, table, a.out_dir, meta, manifest);
  else
    train_with<float>(mc, tc, split, table, a.out_dir, meta, manifest);
  manifest.write(a.out_dir);
  return kExitOk;
}

struct EvalArgs {
  fs::path checkpoint;
  fs::path split_dir;
  std::optional<fs::path> embeddings;
  fs::path out_dir;
  std::string label = "test";
  std::size_t threads = 1;
  std::optional<std::size_t> n_max, m_max;
  std::string seeds = "1,2,3,4,5";  // shuffle only
};

/// Everything the evaluation commands share once inputs are validated.
struct EvalContext {
  Checkpoint checkpoint;
  DatasetSplit split;
  DocumentSet docs;
  EmbeddingTable table;
  std::vector<RatingPair> train, test;
  std::string tag;  // "<label>_<config hash>"
};

inline EvalContext load_eval_context(const EvalArgs& a, RunManifest& manifest) {
  EvalContext ctx;
  ctx.checkpoint = load_checkpoint(a.checkpoint);
  const auto& cfg = ctx.checkpoint.model.config;
  if (a.n_max && *a.n_max != cfg.n_max)
    throw ModelError("n_max: requested " + std::to_string(*a.n_max) + ", checkpoint has " +
                     std::to_string(cfg.n_max));
  if (a.m_max && *a.m_max != cfg.m_max)
    throw ModelError("m_max: requested " + std::to_string(*a.m_max) + ", checkpoint has " +
                     std::to_string(cfg.m_max));
  const std::uint64_t oov_seed = ctx.checkpoint.metadata.value("oov_seed", std::uint64_t{0});
  ctx.table = resolve_table(a.embeddings, cfg.embedding_dim, oov_seed);
  if (ctx.table.dim() != cfg.embedding_dim)
    throw ModelError("embedding_dim: checkpoint has " + std::to_string(cfg.embedding_dim) +
                     ", embeddings file has " + std::to_string(ctx.table.dim()));
  ctx.split = read_split(a.split_dir);
  if (ctx.split.test.empty()) throw InputError("test split is empty");
  ctx.docs = build_documents(ctx.split);
  ctx.train = to_pairs(ctx.split.train);
  ctx.test = to_pairs(ctx.split.test);
  ctx.tag = a.label + "_" + hex64(config_hash(cfg)).substr(0, 8);
  ensure_directory(a.out_dir);

  manifest.input("checkpoint", a.checkpoint);
  for (const char* f : {"train.jsonl", "validation.jsonl", "test.jsonl"})
    manifest.input(f, a.split_dir / f);
  if (a.embeddings) manifest.input("embeddings", *a.embeddings);
  manifest.config()["model"] = cfg.to_json();
  manifest.config()["label"] = a.label;
  manifest.config()["threads"] = a.threads;
  manifest.config()["embedding_dim"] = cfg.embedding_dim;
  manifest.seeds()["oov_seed"] = oov_seed;
  return ctx;
}

template <typename F>
auto with_precision(const Checkpoint& ck, F&& f) {
  if (ck.metadata.value("precision", std::string("f32")) == "f64") return f(ck.model);
  return f(convert_model<float>(ck.model));
}

inline int cmd_eval(const EvalArgs& a) {
  RunManifest manifest("eval");
  auto ctx = load_eval_context(a, manifest);
  auto report = with_precision(ctx.checkpoint, [&](const auto& model) {
    return evaluate(model, ctx.test, ctx.docs, ctx.table, a.label, a.threads);
  });
  const auto mean_rep = global_mean_baseline(ctx.train, ctx.test);
  const auto bias_rep = bias_baseline(ctx.train, ctx.test);

  write_file_atomic(a.out_dir / ("eval_" + ctx.tag + ".csv"), eval_csv(report));
  write_file_atomic(a.out_dir / ("eval_" + ctx.tag + "_global_mean.csv"), eval_csv(mean_rep));
  write_file_atomic(a.out_dir / ("eval_" + ctx.tag + "_user_item_bias.csv"), eval_csv(bias_rep));
  ojson s;
  s["label"] = a.label;
  s["mse"] = report.mse;
  s["n_test"] = report.n_test;
  s["n_fallback"] = report.n_fallback;
  s["baselines"] = {{"global_mean", mean_rep.mse}, {"user_item_bias", bias_rep.mse}};
  s["ttest_vs_global_mean"] = ttest_json(compare_reports(report, mean_rep));
  s["ttest_vs_user_item_bias"] = ttest_json(compare_reports(report, bias_rep));
  write_file_atomic(a.out_dir / ("eval_" + ctx.tag + ".json"), s.dump(2) + "\n");
  manifest.write(a.out_dir);
  std::cout << s.dump(2) << '\n';
  return kExitOk;
}

inline int cmd_shuffle(const EvalArgs& a) {
  RunManifest manifest("shuffle");
  std::vector<std::uint64_t> seeds;
  for (double v : parse_real_list(a.seeds)) {
    if (v < 0 || v != std::floor(v)) throw InputError("--seeds must be non-negative integers");
    seeds.push_back(static_cast<std::uint64_t>(v));
  }
  auto ctx = load_eval_context(a, manifest);
  manifest.seeds()["shuffle"] = seeds;
  auto rep = with_precision(ctx.checkpoint, [&](const auto& model) {
    return shuffle_experiment(model, ctx.test, ctx.docs, ctx.table, seeds, a.threads);
  });
  write_file_atomic(a.out_dir / ("shuffle_" + ctx.tag + ".csv"), rep.to_csv());
  ojson s;
  s["label"] = a.label;
  s["baseline_mse"] = rep.baseline_mse;
  s["mean_abs_rel_delta"] = rep.mean_abs_rel_delta();
  s["n_seeds"] = rep.rows.size();
  write_file_atomic(a.out_dir / ("shuffle_" + ctx.tag + ".json"), s.dump(2) + "\n");
  manifest.write(a.out_dir);
  std::cout << rep.to_csv();
  return kExitOk;
}

inline int cmd_cohorts(const EvalArgs& a) {
  RunManifest manifest("cohorts");
  auto ctx = load_eval_context(a, manifest);
  auto rep = with_precision(ctx.checkpoint, [&](const auto& model) {
    return sparsity_experiment(model, ctx.test, ctx.train, ctx.docs, ctx.table, a.threads);
  });
  write_file_atomic(a.out_dir / ("cohorts_" + ctx.tag + ".csv"), rep.to_csv());
  ojson s;
  s["label"] = a.label;
  s["cohort_rule"] = "exact training-review count 1..5";
  s["user_excluded"] = rep.user_excluded;
  s["item_excluded"] = rep.item_excluded;
  auto cells = [](const auto& arr) {
    ojson out = ojson::array();
    for (std::size_t k = 0; k < arr.size(); ++k)
      out.push_back(arr[k] ? ojson{{"cohort", k + 1}, {"n", arr[k]->n}, {"mse", arr[k]->mse}}
                           : ojson{{"cohort", k + 1}, {"n", 0}, {"mse", nullptr}});
    return out;
  };
  s["users"] = cells(rep.user);
  s["items"] = cells(rep.item);
  write_file_atomic(a.out_dir / ("cohorts_" + ctx.tag + ".json"), s.dump(2) + "\n");
  manifest.write(a.out_dir);
  std::cout << rep.to_csv();
  return kExitOk;
}

struct TTestArgs {
  fs::path a, b;
  std::optional<fs::path> out_dir;
};

inline int cmd_ttest(const TTestArgs& a) {
  RunManifest manifest("ttest");
  auto ra = parse_eval_csv(read_file(a.a), "a");
  auto rb = parse_eval_csv(read_file(a.b), "b");
  auto j = ttest_json(compare_reports(ra, rb));
  j["mse_a"] = ra.mse;
  j["mse_b"] = rb.mse;
  j["n"] = ra.n_test;
  std::cout << j.dump(2) << '\n';
  if (a.out_dir) {
    ensure_directory(*a.out_dir);
    write_file_atomic(*a.out_dir / "ttest.json", j.dump(2) + "\n");
    manifest.input("a", a.a);
    manifest.input("b", a.b);
    manifest.write(*a.out_dir);
  }
  return kExitOk;
}

struct SynthArgs {
  fs::path out_dir;
  synthetic::ReviewCorpusOptions opt;
};

inline int cmd_synth(const SynthArgs& a) {
  RunManifest manifest("synth");
  ensure_directory(a.out_dir);
  auto corpus = synthetic::review_corpus(a.opt);
  std::string body;
  for (const auto& r : corpus.records) body += to_json_line(r) + "\n";
  write_file_atomic(a.out_dir / "reviews.jsonl", body);
  std::ostringstream emb;
  synthetic::write_embeddings(emb, corpus.embeddings, synthetic::review_vocabulary());
  write_file_atomic(a.out_dir / "embeddings.txt", emb.str());
  manifest.config()["n_users"] = a.opt.n_users;
  manifest.config()["n_items"] = a.opt.n_items;
  manifest.config()["n_reviews"] = a.opt.n_reviews;
  manifest.config()["embedding_dim"] = a.opt.embedding_dim;
  manifest.seeds()["synth"] = a.opt.seed;
  manifest.write(a.out_dir);
  std::cout << corpus.records.size() << " reviews written\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv) {
  CLI::App app{"matchrec: review-matching CNN rating prediction"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  StatsArgs stats;
  auto* c_stats = app.add_subcommand("stats", "Corpus statistics of a JSON-lines review file");
  c_stats->add_option("reviews", stats.reviews, "Reviews file")->required();
  c_stats->add_option("--out-dir", stats.out_dir, "Also write stats.json and a manifest here");

  SplitArgs split;
  auto* c_split = app.add_subcommand("split", "Seeded train/validation/test split");
  c_split->add_option("reviews", split.reviews, "Reviews file")->required();
  c_split->add_option("--out-dir", split.out_dir)->required();
  c_split->add_option("--ratios", split.ratios, "train,validation,test")->capture_default_str();
  c_split->add_option("--seed", split.seed)->capture_default_str();

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train the CNN regressor on a split directory");
  c_train->add_option("--split-dir", train.split_dir)->required();
  c_train->add_option("--embeddings", train.embeddings, "Word vectors (text format)");
  c_train->add_option("--model-config", train.model_config);
  c_train->add_option("--train-config", train.train_config);
  c_train->add_option("--out-dir", train.out_dir)->required();
  c_train->add_option("--oov-seed", train.oov_seed)->capture_default_str();
  c_train->add_option("--epochs", train.epochs);
  c_train->add_option("--batch-size", train.batch_size);
  c_train->add_option("--patience", train.patience);
  c_train->add_option("--lr", train.learning_rate);
  c_train->add_option("--seed", train.seed, "Training shuffle seed");
  c_train->add_option("--init-seed", train.init_seed);
  c_train->add_option("--precision", train.precision)->check(CLI::IsMember({"f32", "f64"}));
  c_train->add_option("--threads", train.threads);
  c_train->add_option("--n-max", train.n_max);
  c_train->add_option("--m-max", train.m_max);
  c_train->add_flag("--single-thread", train.single_thread);

  EvalArgs ev;
  auto add_eval_options = [&](CLI::App* c) {
    c->add_option("--checkpoint", ev.checkpoint)->required();
    c->add_option("--split-dir", ev.split_dir)->required();
    c->add_option("--embeddings", ev.embeddings);
    c->add_option("--out-dir", ev.out_dir)->required();
    c->add_option("--label", ev.label)->capture_default_str();
    c->add_option("--threads", ev.threads)->capture_default_str();
    c->add_option("--n-max", ev.n_max);
    c->add_option("--m-max", ev.m_max);
  };
  auto* c_eval = app.add_subcommand("eval", "Test-set MSE with baselines and t-tests");
  add_eval_options(c_eval);
  auto* c_shuffle = app.add_subcommand("shuffle", "MSE change under review-order shuffling");
  add_eval_options(c_shuffle);
  c_shuffle->add_option("--seeds", ev.seeds, "Comma-separated seeds")->capture_default_str();
  auto* c_cohorts = app.add_subcommand("cohorts", "MSE by training-review count (1..5)");
  add_eval_options(c_cohorts);

  TTestArgs tt;
  auto* c_ttest = app.add_subcommand("ttest", "Paired t-test on two eval CSVs");
  c_ttest->add_option("--a", tt.a)->required();
  c_ttest->add_option("--b", tt.b)->required();
  c_ttest->add_option("--out-dir", tt.out_dir);

  SynthArgs syn;
  auto* c_synth = app.add_subcommand("synth", "Write a synthetic review corpus and embeddings");
  c_synth->add_option("--out-dir", syn.out_dir)->required();
  c_synth->add_option("--reviews", syn.opt.n_reviews)->capture_default_str();
  c_synth->add_option("--users", syn.opt.n_users)->capture_default_str();
  c_synth->add_option("--items", syn.opt.n_items)->capture_default_str();
  c_synth->add_option("--dim", syn.opt.embedding_dim)->capture_default_str();
  c_synth->add_option("--seed", syn.opt.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    if (*c_stats) return cmd_stats(stats);
    if (*c_split) return cmd_split(split);
    if (*c_train) return cmd_train(train);
    if (*c_eval) return cmd_eval(ev);
    if (*c_shuffle) return cmd_shuffle(ev);
    if (*c_cohorts) return cmd_cohorts(ev);
    if (*c_ttest) return cmd_ttest(tt);
    if (*c_synth) return cmd_synth(syn);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const ModelError& e) {
    std::cerr << "model error: " << e.what() << '\n';
    return kExitModel;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitModel;
  }
  return kExitInput;
}

}  // namespace matchrec::cli
