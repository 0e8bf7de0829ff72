#pragma once

// Subcommand implementations behind the coavt executable.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "coavt/error.hpp"
#include "coavt/trainer.hpp"

namespace coavt::tools {

namespace fs = std::filesystem;

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitContract = 2, kExitIo = 3 };

class UsageError : public Error {
 public:
  using Error::Error;
};

/// Runs `body`, printing a one-line diagnostic for any exception and mapping
/// it to an exit code.
int run_guarded(const std::function<int()>& body, std::ostream& err);

inline constexpr const char* kVersion = "coavt 0.1.0";

/// 64-bit FNV-1a over a file's bytes, as 16 hex digits.
std::string fnv1a_file(const fs::path& path);
std::string fnv1a_bytes(std::string_view bytes);

struct RunManifest {
  std::string command;
  std::string config;  // key=value snapshot
  std::uint64_t seed = 0;
  std::string corpus_checksum;
  std::vector<std::string> checkpoints;
  std::vector<std::string> metrics;
  std::vector<std::pair<std::string, double>> timings;  // seconds
  std::string version = kVersion;
  bool complete = false;

  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
  void write(const fs::path& dir) const;
  static RunManifest read(const fs::path& dir);
};

inline constexpr const char* kManifestName = "manifest.json";
inline constexpr const char* kTrainFile = "train.coavt";
inline constexpr const char* kTestFile = "test.coavt";

/// Loads a config file (if given) and then applies `key=value` overrides.
train::RunConfig load_run_config(const std::optional<fs::path>& config, const std::vector<std::string>& overrides);

struct LoadedCorpus {
  std::vector<data::TripletExample> train;
  std::vector<data::TripletExample> test;
  std::string checksum;  // over both split files
  std::size_t n_classes = 0;
};
LoadedCorpus load_corpus_dir(const fs::path& dir);

// ---------------------------------------------------------------------------

struct GenCorpusArgs {
  std::optional<fs::path> config;
  std::vector<std::string> overrides;
  fs::path out;
};
int cmd_gen_corpus(const GenCorpusArgs& args, std::ostream& log);

struct PretrainArgs {
  std::optional<fs::path> config;
  std::vector<std::string> overrides;
  fs::path corpus;
  fs::path out;
  std::optional<fs::path> resume;
  bool quiet = false;
};
int cmd_pretrain(const PretrainArgs& args, std::ostream& log);

struct FinetuneArgs {
  std::optional<fs::path> config;
  std::vector<std::string> overrides;
  fs::path corpus;
  std::optional<fs::path> checkpoint;  // absent: train from scratch
  fs::path out;
  std::string task = "retrieval";
  std::string modality = "av";
  bool quiet = false;
};
int cmd_finetune(const FinetuneArgs& args, std::ostream& log);

struct EvalArgs {
  std::optional<fs::path> checkpoint;  // absent: random init from config and seed
  std::optional<fs::path> config;
  std::vector<std::string> overrides;
  fs::path corpus;
  std::string task = "retrieval";
  std::string modality = "av";
  std::size_t k = 128;
  bool rerank = true;
  std::optional<fs::path> out;
};
int cmd_eval(const EvalArgs& args, std::ostream& out);

struct AvEvalArgs {
  std::optional<fs::path> checkpoint;
  std::optional<fs::path> config;
  std::vector<std::string> overrides;
  fs::path corpus;
  std::optional<fs::path> out;
};
int cmd_av_eval(const AvEvalArgs& args, std::ostream& out);

struct GradcheckArgs {
  std::string preset = "micro";
  double gelu_fault = 1.0;  // != 1 corrupts the gelu derivative
  bool json = false;
};
int cmd_gradcheck(const GradcheckArgs& args, std::ostream& out);

struct AblateArgs {
  std::optional<fs::path> config;
  std::vector<std::string> overrides;
  fs::path corpus;
  fs::path out;
  std::string grid = "queries";  // queries | objectives | masking
  bool quiet = false;
};

struct AblationRow {
  std::string label;
  std::vector<std::pair<std::string, double>> values;
};
struct AblationTable {
  std::string grid;
  std::vector<std::string> columns;
  std::vector<AblationRow> rows;

  std::string to_markdown() const;
  std::string to_json() const;
};

/// One labelled config change per grid cell.
std::vector<std::pair<std::string, std::vector<std::string>>> ablation_grid(const std::string& grid);
int cmd_ablate(const AblateArgs& args, std::ostream& log);

}  // namespace coavt::tools
