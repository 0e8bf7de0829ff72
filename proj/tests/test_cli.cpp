#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "commands.hpp"
#include "json.hpp"

namespace {

namespace fs = std::filesystem;
using namespace coavt;
using namespace coavt::tools;
using json = nlohmann::json;

const fs::path kConfigs = COAVT_CONFIG_DIR;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

int guarded(const std::function<int()>& body, std::string* diagnostic = nullptr) {
  std::ostringstream err;
  const int code = run_guarded(body, err);
  if (diagnostic) *diagnostic = err.str();
  return code;
}

/// Micro corpus shared by the tests in this file, generated once.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("coavt_cli_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    std::ostringstream log;
    ASSERT_EQ(guarded([&] { return cmd_gen_corpus({kConfigs / "micro.cfg", {}, root_ / "corpus"}, log); }), 0);
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static PretrainArgs micro_pretrain(const fs::path& out) {
    PretrainArgs a;
    a.config = kConfigs / "micro.cfg";
    a.corpus = root_ / "corpus";
    a.out = out;
    a.quiet = true;
    return a;
  }

  static inline fs::path root_;
};

TEST_F(CliTest, GenCorpusIsReproducible) {
  std::ostringstream log;
  ASSERT_EQ(guarded([&] { return cmd_gen_corpus({kConfigs / "micro.cfg", {}, root_ / "corpus2"}, log); }), 0);
  EXPECT_NE(log.str().find("nearest-centroid"), std::string::npos) << log.str();
  const auto a = RunManifest::read(root_ / "corpus");
  const auto b = RunManifest::read(root_ / "corpus2");
  EXPECT_EQ(a.corpus_checksum, b.corpus_checksum);
  EXPECT_TRUE(a.complete);
  EXPECT_EQ(fnv1a_file(root_ / "corpus" / kTrainFile), fnv1a_file(root_ / "corpus2" / kTrainFile));
  EXPECT_EQ(load_corpus_dir(root_ / "corpus").checksum, a.corpus_checksum);
}

TEST_F(CliTest, GenCorpusRejectsEmptyTrainSplit) {
  std::ostringstream log;
  std::string diag;
  EXPECT_EQ(guarded([&] { return cmd_gen_corpus({kConfigs / "micro.cfg", {"n_train=0"}, root_ / "bad"}, log); }, &diag),
            kExitContract);
  EXPECT_NE(diag.find("n_train"), std::string::npos);
  EXPECT_EQ(std::count(diag.begin(), diag.end(), '\n'), 1);
}

TEST_F(CliTest, ExitCodesFollowTheErrorKind) {
  std::ostringstream log;
  EXPECT_EQ(guarded([&] { return cmd_gen_corpus({kConfigs / "micro.cfg", {"bogus_key=1"}, root_ / "x"}, log); }),
            kExitUsage);
  EXPECT_EQ(guarded([&] { return cmd_gen_corpus({kConfigs / "micro.cfg", {"no-equals"}, root_ / "x"}, log); }),
            kExitUsage);
  EXPECT_EQ(guarded([&] { return cmd_pretrain(micro_pretrain(root_ / "run_missing"), log); }), kExitOk);
  auto missing = micro_pretrain(root_ / "run_x");
  missing.corpus = root_ / "no_such_corpus";
  EXPECT_EQ(guarded([&] { return cmd_pretrain(missing, log); }), kExitIo);
  EXPECT_EQ(guarded([] { throw ContractError("x"); return 0; }), kExitContract);
  EXPECT_EQ(guarded([] { throw FormatError("x"); return 0; }), kExitIo);
}

TEST_F(CliTest, PresetsSetTheAblationFlags) {
  const auto vanilla = load_run_config(kConfigs / "vanilla.cfg", {});
  EXPECT_TRUE(vanilla.train.disable_a);
  EXPECT_TRUE(vanilla.train.disable_v);
  EXPECT_FALSE(vanilla.train.disable_matching);
  const auto baseline = load_run_config(kConfigs / "baseline.cfg", {});
  EXPECT_TRUE(baseline.train.disable_a && baseline.train.disable_v);
  EXPECT_TRUE(baseline.train.disable_matching && baseline.train.disable_lm);
  const auto full = load_run_config(kConfigs / "full.cfg", {});
  EXPECT_FALSE(full.train.disable_a || full.train.disable_v);
  const auto large = load_run_config(kConfigs / "paper-scale.cfg", {});
  EXPECT_EQ(large.model.hidden, 768u);
  EXPECT_EQ(large.train.peak_lr, 1e-4);
}

TEST_F(CliTest, PretrainWritesManifestMetricsAndCheckpoints) {
  const auto out = root_ / "run";
  std::ostringstream log;
  ASSERT_EQ(guarded([&] { return cmd_pretrain(micro_pretrain(out), log); }), 0);
  const auto manifest = RunManifest::read(out);
  EXPECT_TRUE(manifest.complete);
  EXPECT_EQ(manifest.corpus_checksum, load_corpus_dir(root_ / "corpus").checksum);
  EXPECT_TRUE(fs::exists(out / "epoch-1.ckpt"));
  EXPECT_TRUE(fs::exists(out / "epoch-2.ckpt"));
  EXPECT_TRUE(fs::exists(out / "last.ckpt"));
  std::ifstream metrics(out / "metrics.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(metrics, line)) {
    const auto j = json::parse(line);
    EXPECT_EQ(j.at("step").get<std::size_t>(), ++n);
    EXPECT_TRUE(j.contains("av") && j.contains("a") && j.contains("v") && j.contains("tau"));
  }
  EXPECT_EQ(n, 8u);  // 16 items, batch 4, 2 epochs
}

TEST_F(CliTest, ResumedRunMatchesUninterruptedRun) {
  const auto full = root_ / "run_full";
  const auto part = root_ / "run_part";
  std::ostringstream log;
  ASSERT_EQ(guarded([&] { return cmd_pretrain(micro_pretrain(full), log); }), 0);
  fs::copy(full, part, fs::copy_options::recursive);
  fs::remove(part / "last.ckpt");
  fs::remove(part / "epoch-2.ckpt");
  auto resume = micro_pretrain(part);
  resume.resume = part / "epoch-1.ckpt";
  ASSERT_EQ(guarded([&] { return cmd_pretrain(resume, log); }), 0);
  EXPECT_EQ(slurp(part / "metrics.jsonl"), slurp(full / "metrics.jsonl"));
  EXPECT_EQ(slurp(part / "last.ckpt"), slurp(full / "last.ckpt"));
}

TEST_F(CliTest, ResumeRefusesADifferentCorpus) {
  const auto out = root_ / "run_other";
  std::ostringstream log;
  ASSERT_EQ(guarded([&] { return cmd_pretrain(micro_pretrain(out), log); }), 0);
  ASSERT_EQ(guarded([&] { return cmd_gen_corpus({kConfigs / "micro.cfg", {"corpus_seed=99"}, root_ / "corpus99"}, log); }),
            0);
  auto resume = micro_pretrain(out);
  resume.corpus = root_ / "corpus99";
  resume.resume = out / "epoch-1.ckpt";
  EXPECT_EQ(guarded([&] { return cmd_pretrain(resume, log); }), kExitContract);
}

TEST_F(CliTest, EvalAcceptsEveryModalityAndRejectsUnknownTask) {
  for (const char* modality : {"a", "v", "av"}) {
    EvalArgs args;
    args.config = kConfigs / "micro.cfg";
    args.corpus = root_ / "corpus";
    args.modality = modality;
    std::ostringstream out;
    ASSERT_EQ(guarded([&] { return cmd_eval(args, out); }), 0) << modality;
    const auto j = json::parse(out.str());
    EXPECT_EQ(j.at("modality"), modality);
    EXPECT_EQ(j.at("task"), "retrieval");
    EXPECT_EQ(j.at("n_queries"), 8);
  }
  EvalArgs bad;
  bad.corpus = root_ / "corpus";
  bad.config = kConfigs / "micro.cfg";
  bad.task = "captioning";
  std::ostringstream out;
  EXPECT_EQ(guarded([&] { return cmd_eval(bad, out); }), kExitUsage);
  bad.task = "retrieval";
  bad.modality = "t";
  EXPECT_EQ(guarded([&] { return cmd_eval(bad, out); }), kExitUsage);
}

TEST_F(CliTest, FinetuneClassificationThenEvaluate) {
  FinetuneArgs ft;
  ft.config = kConfigs / "micro.cfg";
  ft.corpus = root_ / "corpus";
  ft.out = root_ / "ft";
  ft.task = "classification";
  ft.modality = "v";
  ft.quiet = true;
  std::ostringstream log;
  ASSERT_EQ(guarded([&] { return cmd_finetune(ft, log); }), 0);
  EXPECT_TRUE(RunManifest::read(ft.out).complete);
  EvalArgs ev;
  ev.checkpoint = ft.out / "finetuned.ckpt";
  ev.corpus = root_ / "corpus";
  ev.task = "classification";
  ev.modality = "v";
  std::ostringstream out;
  ASSERT_EQ(guarded([&] { return cmd_eval(ev, out); }), 0);
  const auto j = json::parse(out.str());
  EXPECT_TRUE(j.contains("accuracy") && j.contains("mAP"));
  ev.modality = "a";  // no head trained for audio
  EXPECT_EQ(guarded([&] { return cmd_eval(ev, out); }), kExitContract);
}

TEST_F(CliTest, AvEvalReportsBothDirections) {
  AvEvalArgs args;
  args.config = kConfigs / "micro.cfg";
  args.corpus = root_ / "corpus";
  std::ostringstream out;
  ASSERT_EQ(guarded([&] { return cmd_av_eval(args, out); }), 0);
  const auto j = json::parse(out.str());
  ASSERT_EQ(j.size(), 2u);
  EXPECT_EQ(j[0].at("direction"), "a2v");
  EXPECT_EQ(j[1].at("direction"), "v2a");
}

TEST_F(CliTest, AblationTablesMatchTheirGrids) {
  EXPECT_EQ(ablation_grid("queries").size(), 3u);
  EXPECT_EQ(ablation_grid("objectives").size(), 3u);
  const auto masking = ablation_grid("masking");
  EXPECT_EQ(masking.front().first, "no mask");
  EXPECT_THROW(ablation_grid("depth"), UsageError);

  AblateArgs args;
  args.config = kConfigs / "micro.cfg";
  args.overrides = {"epochs=1"};
  args.corpus = root_ / "corpus";
  args.out = root_ / "ablate";
  args.grid = "queries";
  args.quiet = true;
  std::ostringstream log;
  ASSERT_EQ(guarded([&] { return cmd_ablate(args, log); }), 0);
  const auto j = json::parse(slurp(args.out / "ablation.json"));
  EXPECT_EQ(j.at("rows").size(), 3u);
  const auto md = slurp(args.out / "ablation.md");
  EXPECT_NE(md.find("| A"), std::string::npos);
  EXPECT_NE(md.find("A+V"), std::string::npos);
}

TEST(GradcheckCommand, PassesAndReportsEveryPrimitive) {
  std::ostringstream out;
  EXPECT_EQ(cmd_gradcheck({}, out), 0);
  for (const char* name : {"matmul", "softmax-last-axis", "layer-norm", "gelu", "cross-entropy-from-logits", "total_loss"})
    EXPECT_NE(out.str().find(name), std::string::npos) << name;
  EXPECT_NE(out.str().find("PASS"), std::string::npos);
}

TEST(GradcheckCommand, CorruptedGeluFails) {
  GradcheckArgs args;
  args.gelu_fault = 1.01;
  std::ostringstream out;
  EXPECT_EQ(guarded([&] { return cmd_gradcheck(args, out); }), kExitContract);
  EXPECT_NE(out.str().find("FAIL"), std::string::npos);
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(COAVT_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Executable, UsageErrorsExitOne) {
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("eval"), 1);  // --corpus is required
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("gradcheck --preset huge"), 1);
}

}  // namespace
