#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include "matchrec/cli.hpp"
#include "test_support.hpp"

using namespace matchrec;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + MATCHREC_CLI + "\" " + args + " > \"" + log.string() +
                          "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

fs::path find_one(const fs::path& dir, const std::string& prefix, const std::string& suffix) {
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.starts_with(prefix) && name.ends_with(suffix) &&
        name.find("_global_mean") == std::string::npos &&
        name.find("_user_item_bias") == std::string::npos)
      return e.path();
  }
  return {};
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

// Synthetic corpus, split and a short training run shared by the tests below.
class CliPipeline : public ::testing::Test {
protected:
  static void SetUpTestSuite() {
    root_ = testing_support::temp_dir("cli");
    log_ = root_ / "log.txt";
    ASSERT_EQ(run_cli("synth --out-dir " + q(root_ / "data") +
                          " --reviews 300 --users 30 --items 20 --dim 8 --seed 3",
                      log_),
              0);
    ASSERT_EQ(run_cli("split " + q(root_ / "data/reviews.jsonl") + " --out-dir " +
                          q(root_ / "split") + " --seed 7",
                      log_),
              0);
    ASSERT_EQ(run_cli(train_args(root_ / "run1"), log_), 0) << read_file(log_);
  }

  static std::string train_args(const fs::path& out) {
    return "train --split-dir " + q(root_ / "split") + " --embeddings " +
           q(root_ / "data/embeddings.txt") + " --out-dir " + q(out) +
           " --n-max 16 --m-max 16 --epochs 2 --batch-size 8 --seed 1";
  }

  static inline fs::path root_, log_;
};

}  // namespace

TEST(CliErrors, MissingFileIsInputError) {
  auto dir = testing_support::temp_dir("cli_err");
  EXPECT_EQ(run_cli("stats " + q(dir / "nope.jsonl"), dir / "log"), 2);
  EXPECT_EQ(run_cli("no-such-command", dir / "log"), 2);
}

TEST(CliErrors, EmptyFileGivesZeroStats) {
  auto dir = testing_support::temp_dir("cli_empty");
  std::ofstream(dir / "empty.jsonl").close();
  ASSERT_EQ(run_cli("stats " + q(dir / "empty.jsonl"), dir / "log"), 0);
  auto j = nlohmann::json::parse(read_file(dir / "log"));
  EXPECT_EQ(j["n_ratings"], 0);
  EXPECT_EQ(j["user_doc_avg_len"], 0.0);
}

TEST(CliErrors, StatsOnFixture) {
  auto dir = testing_support::temp_dir("cli_stats");
  ASSERT_EQ(run_cli("stats " + q(testing_support::data_path("reviews_20.jsonl")) + " --out-dir " +
                        q(dir / "out"),
                    dir / "log"),
            0);
  auto j = nlohmann::json::parse(read_file(dir / "out/stats.json"));
  EXPECT_EQ(j["n_users"], 5);
  EXPECT_EQ(j["n_items"], 4);
  EXPECT_EQ(j["item_doc_avg_len"], 15.0);
  EXPECT_TRUE(fs::exists(dir / "out/manifest.json"));
}

TEST(CliErrors, BadRatiosAndUnwritableOutDir) {
  auto dir = testing_support::temp_dir("cli_split_err");
  auto reviews = testing_support::data_path("reviews_20.jsonl");
  EXPECT_EQ(run_cli("split " + q(reviews) + " --out-dir " + q(dir / "s") + " --ratios 0.8,0.05,0.05",
                    dir / "log"),
            2);
  std::ofstream(dir / "file").put('x');
  EXPECT_EQ(run_cli("split " + q(reviews) + " --out-dir " + q(dir / "file"), dir / "log"), 2);
}

TEST_F(CliPipeline, SplitWritesEightyTenTen) {
  EXPECT_EQ(line_count(root_ / "split/train.jsonl"), 240u);
  EXPECT_EQ(line_count(root_ / "split/validation.jsonl"), 30u);
  EXPECT_EQ(line_count(root_ / "split/test.jsonl"), 30u);
  auto m = nlohmann::json::parse(read_file(root_ / "split/manifest.json"));
  EXPECT_EQ(m["command"], "split");
  EXPECT_TRUE(m["inputs"].contains("reviews"));
}

TEST_F(CliPipeline, RerunIsByteIdentical) {
  ASSERT_EQ(run_cli(train_args(root_ / "run2"), log_), 0);
  EXPECT_EQ(read_file(root_ / "run1/model.ckpt"), read_file(root_ / "run2/model.ckpt"));
  auto strip = [](const fs::path& p) {
    std::ifstream in(p);
    std::string out;
    for (std::string line; std::getline(in, line);) out += line.substr(0, line.rfind(',')) + "\n";
    return out;
  };
  EXPECT_EQ(strip(root_ / "run1/train_report.csv"), strip(root_ / "run2/train_report.csv"));
}

TEST_F(CliPipeline, EvalMatchesLibrary) {
  auto out = root_ / "eval";
  ASSERT_EQ(run_cli("eval --checkpoint " + q(root_ / "run1/model.ckpt") + " --split-dir " +
                        q(root_ / "split") + " --embeddings " + q(root_ / "data/embeddings.txt") +
                        " --out-dir " + q(out),
                    log_),
            0)
      << read_file(log_);
  auto summary = nlohmann::json::parse(read_file(find_one(out, "eval_test_", ".json")));

  auto ck = load_checkpoint(root_ / "run1/model.ckpt");
  auto table = load_embeddings(root_ / "data/embeddings.txt");
  auto split = cli::read_split(root_ / "split");
  auto docs = build_documents(split);
  auto test = to_pairs(split.test);
  auto rep = evaluate(convert_model<float>(ck.model), test, docs, table, "test");
  EXPECT_EQ(summary["mse"].get<double>(), rep.mse);
  EXPECT_EQ(read_file(find_one(out, "eval_test_", ".csv")), eval_csv(rep));
  EXPECT_TRUE(summary["ttest_vs_global_mean"].contains("p"));
}

TEST_F(CliPipeline, ShuffleSeedsAndCohorts) {
  auto out = root_ / "shuffle";
  const std::string common = " --checkpoint " + q(root_ / "run1/model.ckpt") + " --split-dir " +
                             q(root_ / "split") + " --embeddings " +
                             q(root_ / "data/embeddings.txt") + " --out-dir " + q(out);
  ASSERT_EQ(run_cli("shuffle" + common + " --seeds 1,2,3", log_), 0) << read_file(log_);
  EXPECT_EQ(line_count(find_one(out, "shuffle_test_", ".csv")), 4u);
  ASSERT_EQ(run_cli("cohorts" + common, log_), 0) << read_file(log_);
  EXPECT_EQ(line_count(find_one(out, "cohorts_test_", ".csv")), 6u);
}

TEST_F(CliPipeline, ConfigMismatchIsModelError) {
  const std::string base = " --checkpoint " + q(root_ / "run1/model.ckpt") + " --split-dir " +
                           q(root_ / "split") + " --out-dir " + q(root_ / "mismatch");
  EXPECT_EQ(run_cli("eval" + base + " --embeddings " + q(root_ / "data/embeddings.txt") +
                        " --n-max 32",
                    log_),
            3);
  EXPECT_NE(read_file(log_).find("n_max"), std::string::npos);
  std::ofstream(root_ / "dim3.txt") << "great 1 0 0\nsound 0 1 0\n";
  EXPECT_EQ(run_cli("eval" + base + " --embeddings " + q(root_ / "dim3.txt"), log_), 3);
  EXPECT_NE(read_file(log_).find("embedding_dim"), std::string::npos);
}

TEST_F(CliPipeline, TTestOnTwoEvalCsvs) {
  auto out = root_ / "eval";
  if (find_one(out, "eval_test_", ".csv").empty()) GTEST_SKIP() << "eval output missing";
  auto model_csv = find_one(out, "eval_test_", ".csv");
  auto mean_csv = fs::path(model_csv.string().substr(0, model_csv.string().size() - 4) +
                           "_global_mean.csv");
  ASSERT_EQ(run_cli("ttest --a " + q(model_csv) + " --b " + q(mean_csv), log_), 0) << read_file(log_);
  auto j = nlohmann::json::parse(read_file(log_));
  auto ref = compare_reports(parse_eval_csv(read_file(model_csv), "a"),
                             parse_eval_csv(read_file(mean_csv), "b"));
  EXPECT_EQ(j["p"].get<double>(), ref.p);
}
