#include "commands.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "coavt/evaluation.hpp"
#include "gradcheck_suite.hpp"

namespace coavt::tools {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

model::Condition parse_modality(const std::string& name) {
  if (name == "a" || name == "v" || name == "av") return model::condition_from_name(name);
  throw UsageError("unknown modality '" + name + "' (expected a, v, or av)");
}

}  // namespace

int run_guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const FormatError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const ContractError& e) {
    err << "contract violation: " << e.what() << '\n';
    return kExitContract;
  } catch (const json::exception& e) {
    err << "i/o error: malformed json: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    err << "contract violation: " << e.what() << '\n';
    return kExitContract;
  }
}

std::string fnv1a_bytes(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string fnv1a_file(const fs::path& path) { return fnv1a_bytes(read_text(path)); }

// ---------------------------------------------------------------------------

std::string RunManifest::to_json() const {
  json t = json::object();
  for (const auto& [k, v] : timings) t[k] = v;
  return json{{"version", version},
              {"command", command},
              {"config", config},
              {"seed", seed},
              {"corpus_checksum", corpus_checksum},
              {"checkpoints", checkpoints},
              {"metrics", metrics},
              {"timings", t},
              {"complete", complete}}
      .dump(2);
}

RunManifest RunManifest::from_json(const std::string& text) {
  const json j = json::parse(text);
  RunManifest m;
  m.version = j.at("version").get<std::string>();
  m.command = j.at("command").get<std::string>();
  m.config = j.at("config").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.corpus_checksum = j.at("corpus_checksum").get<std::string>();
  m.checkpoints = j.at("checkpoints").get<std::vector<std::string>>();
  m.metrics = j.at("metrics").get<std::vector<std::string>>();
  for (const auto& [k, v] : j.at("timings").items()) m.timings.emplace_back(k, v.get<double>());
  m.complete = j.at("complete").get<bool>();
  return m;
}

void RunManifest::write(const fs::path& dir) const { write_text(dir / kManifestName, to_json() + "\n"); }

RunManifest RunManifest::read(const fs::path& dir) { return from_json(read_text(dir / kManifestName)); }

train::RunConfig load_run_config(const std::optional<fs::path>& config, const std::vector<std::string>& overrides) {
  train::ConfigFile file = config ? train::ConfigFile::parse_file(*config) : train::ConfigFile{};
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + kv + "'");
    file.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  try {
    return train::apply_config(file);
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
}

LoadedCorpus load_corpus_dir(const fs::path& dir) {
  const auto train_path = dir / kTrainFile;
  const auto test_path = dir / kTestFile;
  if (!fs::exists(train_path) || !fs::exists(test_path))
    throw IoError("corpus directory " + dir.string() + " lacks " + kTrainFile + " / " + kTestFile);
  LoadedCorpus c;
  c.train = data::read_corpus_file(train_path);
  c.test = data::read_corpus_file(test_path);
  c.checksum = fnv1a_bytes(fnv1a_file(train_path) + fnv1a_file(test_path));
  for (const auto* split : {&c.train, &c.test})
    for (const auto& item : *split) c.n_classes = std::max<std::size_t>(c.n_classes, item.class_id + 1u);
  return c;
}

// ---------------------------------------------------------------------------

int cmd_gen_corpus(const GenCorpusArgs& args, std::ostream& log) {
  const auto start = Clock::now();
  const auto cfg = load_run_config(args.config, args.overrides);
  cfg.corpus.validate();
  ensure_dir(args.out);
  RunManifest manifest;
  manifest.command = "gen-corpus";
  manifest.config = train::to_config_text(cfg);
  manifest.seed = cfg.corpus.seed;
  manifest.write(args.out);

  const auto corpus = data::generate_corpus(cfg.corpus);
  data::write_corpus_file(args.out / kTrainFile, corpus.train);
  data::write_corpus_file(args.out / kTestFile, corpus.test);
  const double sanity = data::nearest_centroid_accuracy(corpus, cfg.corpus.n_classes);

  manifest.corpus_checksum = fnv1a_bytes(fnv1a_file(args.out / kTrainFile) + fnv1a_file(args.out / kTestFile));
  manifest.timings.emplace_back("total", seconds_since(start));
  manifest.complete = true;
  manifest.write(args.out);
  log << "wrote " << corpus.train.size() << " train / " << corpus.test.size() << " test items to "
      << args.out.string() << " (checksum " << manifest.corpus_checksum << ", nearest-centroid accuracy "
      << sanity << ")\n";
  return kExitOk;
}

namespace {

fs::path epoch_checkpoint(const fs::path& out, std::size_t epoch) {
  return out / ("epoch-" + std::to_string(epoch) + ".ckpt");
}

// Keeps only metric lines up to and including `step`.
void truncate_metrics(const fs::path& path, std::size_t step) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (json::parse(line).at("step").get<std::size_t>() <= step) kept += line + "\n";
  }
  in.close();
  write_text(path, kept);
}

void verify_resume_manifest(const fs::path& out, const std::string& checksum) {
  if (!fs::exists(out / kManifestName)) return;
  const auto previous = RunManifest::read(out);
  if (!previous.corpus_checksum.empty() && previous.corpus_checksum != checksum)
    throw ContractError("resume: corpus checksum " + checksum + " differs from the run's " +
                        previous.corpus_checksum);
}

}  // namespace

int cmd_pretrain(const PretrainArgs& args, std::ostream& log) {
  const auto start = Clock::now();
  auto cfg = load_run_config(args.config, args.overrides);
  cfg.train.validate();
  cfg.model.validate();
  const auto corpus = load_corpus_dir(args.corpus);
  ensure_dir(args.out);

  std::optional<train::LoadedCheckpoint> resumed;
  if (args.resume) {
    verify_resume_manifest(args.out, corpus.checksum);
    resumed.emplace(train::load_checkpoint(*args.resume));
    cfg.model = resumed->model.config();
  }
  model::Model model = resumed ? std::move(resumed->model) : model::Model(cfg.model, cfg.train.seed);
  train::OptimizerState state = resumed ? std::move(resumed->state) : train::OptimizerState{};

  RunManifest manifest;
  manifest.command = "pretrain";
  manifest.config = train::to_config_text(cfg);
  manifest.seed = cfg.train.seed;
  manifest.corpus_checksum = corpus.checksum;
  manifest.metrics.push_back("metrics.jsonl");
  manifest.write(args.out);

  const auto metrics_path = args.out / "metrics.jsonl";
  if (resumed) {
    truncate_metrics(metrics_path, state.step);
  } else {
    write_text(metrics_path, "");
  }
  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw IoError("cannot open " + metrics_path.string());

  const train::Pretrainer trainer(model, corpus.train, cfg.train);
  if (!args.quiet)
    log << "pretrain: " << trainer.total_steps() << " steps (" << trainer.steps_per_epoch() << " per epoch), from step "
        << state.step << '\n';
  train::LoopCallbacks cb;
  cb.on_step = [&](const objectives::LossReport& r) {
    metrics << r.to_json() << '\n';
    metrics.flush();
    if (!args.quiet && (r.step % 10 == 0 || r.step == trainer.total_steps()))
      log << "step " << r.step << " loss " << r.total << " tau " << r.tau << '\n';
  };
  cb.on_epoch_end = [&](std::size_t epoch) {
    const auto path = epoch_checkpoint(args.out, epoch);
    train::save_checkpoint(model, &state, path);
    manifest.checkpoints.push_back(path.filename().string());
    manifest.write(args.out);
  };
  trainer.run(state, cb);
  train::save_checkpoint(model, &state, args.out / "last.ckpt");
  manifest.checkpoints.push_back("last.ckpt");
  manifest.timings.emplace_back("total", seconds_since(start));
  manifest.complete = true;
  manifest.write(args.out);
  return kExitOk;
}

int cmd_finetune(const FinetuneArgs& args, std::ostream& log) {
  const auto start = Clock::now();
  auto cfg = load_run_config(args.config, args.overrides);
  const auto task = [&] {
    try {
      return train::finetune_task_from_name(args.task);
    } catch (const ContractError& e) {
      throw UsageError(e.what());
    }
  }();
  const auto cond = parse_modality(args.modality);
  cfg.train.validate();
  const auto corpus = load_corpus_dir(args.corpus);
  ensure_dir(args.out);

  std::optional<train::LoadedCheckpoint> loaded;
  if (args.checkpoint) {
    loaded.emplace(train::load_checkpoint(*args.checkpoint));
    cfg.model = loaded->model.config();
  }
  model::Model model = loaded ? std::move(loaded->model) : model::Model(cfg.model, cfg.train.seed);
  train::OptimizerState state;

  RunManifest manifest;
  manifest.command = "finetune " + args.task + " " + args.modality;
  manifest.config = train::to_config_text(cfg);
  manifest.seed = cfg.train.seed;
  manifest.corpus_checksum = corpus.checksum;
  manifest.metrics.push_back("metrics.jsonl");
  manifest.write(args.out);

  std::ofstream metrics(args.out / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw IoError("cannot write metrics in " + args.out.string());
  train::LoopCallbacks cb;
  cb.on_step = [&](const objectives::LossReport& r) { metrics << r.to_json() << '\n'; };
  const auto on_cls = [&](const train::ClassificationStep& s) {
    metrics << json{{"step", s.step}, {"loss", s.loss}, {"batch_accuracy", s.accuracy}}.dump() << '\n';
    if (!args.quiet && s.step % 10 == 0) log << "step " << s.step << " loss " << s.loss << '\n';
  };
  train::finetune(model, corpus.train, task, cond, corpus.n_classes, cfg.train, state, cb, on_cls);
  train::save_checkpoint(model, &state, args.out / "finetuned.ckpt");
  manifest.checkpoints.push_back("finetuned.ckpt");
  manifest.timings.emplace_back("total", seconds_since(start));
  manifest.complete = true;
  manifest.write(args.out);
  if (!args.quiet) log << "finetune: " << state.step << " steps, wrote " << (args.out / "finetuned.ckpt").string() << '\n';
  return kExitOk;
}

namespace {

model::Model model_for_eval(const std::optional<fs::path>& checkpoint, const std::optional<fs::path>& config,
                            const std::vector<std::string>& overrides) {
  if (checkpoint) return train::load_checkpoint(*checkpoint).model;
  const auto cfg = load_run_config(config, overrides);
  cfg.model.validate();
  return model::Model(cfg.model, cfg.train.seed);
}

std::uint64_t eval_seed(const std::optional<fs::path>& checkpoint, const std::optional<fs::path>& config,
                        const std::vector<std::string>& overrides) {
  if (checkpoint) return 0;
  return load_run_config(config, overrides).train.seed;
}

void emit(const std::string& doc, const std::optional<fs::path>& path, std::ostream& out) {
  out << doc << '\n';
  if (path) write_text(*path, doc + "\n");
}

}  // namespace

int cmd_eval(const EvalArgs& args, std::ostream& out) {
  if (args.task != "retrieval" && args.task != "classification")
    throw UsageError("unknown task '" + args.task + "' (expected retrieval or classification)");
  const auto cond = parse_modality(args.modality);
  if (args.k == 0) throw UsageError("--k must be positive");
  const auto model = model_for_eval(args.checkpoint, args.config, args.overrides);
  const auto corpus = load_corpus_dir(args.corpus);
  const std::uint64_t seed = eval_seed(args.checkpoint, args.config, args.overrides);
  const std::string ckpt = args.checkpoint ? args.checkpoint->string() : "random-init";
  if (args.task == "retrieval") {
    const auto index = eval::build_index(model, corpus.test, cond);
    const auto m = eval::text_to_x(model, index, {args.k, args.rerank});
    emit(eval::to_json(m, seed, ckpt), args.out, out);
  } else {
    const auto m = eval::evaluate_classification(model, corpus.test, cond, corpus.n_classes);
    emit(eval::to_json(m, cond, seed, ckpt), args.out, out);
  }
  return kExitOk;
}

int cmd_av_eval(const AvEvalArgs& args, std::ostream& out) {
  const auto model = model_for_eval(args.checkpoint, args.config, args.overrides);
  const auto corpus = load_corpus_dir(args.corpus);
  const std::uint64_t seed = eval_seed(args.checkpoint, args.config, args.overrides);
  const std::string ckpt = args.checkpoint ? args.checkpoint->string() : "random-init";
  std::vector<std::uint32_t> ids;
  for (const auto& item : corpus.test) ids.push_back(item.item_id);
  const auto qa = eval::pooled_queries(model, corpus.test, model::Condition::kA);
  const auto qv = eval::pooled_queries(model, corpus.test, model::Condition::kV);
  json doc = json::array();
  for (const auto dir : {eval::AvDirection::kAudioToVisual, eval::AvDirection::kVisualToAudio})
    doc.push_back(json::parse(eval::to_json(eval::av_retrieval_from_vectors(qa, qv, ids, dir), seed, ckpt)));
  emit(doc.dump(), args.out, out);
  return kExitOk;
}

int cmd_gradcheck(const GradcheckArgs& args, std::ostream& out) {
  if (args.preset != "micro") throw UsageError("unknown gradcheck preset '" + args.preset + "' (expected micro)");
  std::optional<diff::testing::ScopedGeluGradientFault> fault;
  if (args.gelu_fault != 1.0) fault.emplace(args.gelu_fault);
  const auto report = run_gradcheck_suite();
  out << (args.json ? report.to_json() + "\n" : report.to_text());
  return report.passed() ? kExitOk : kExitContract;
}

// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, std::vector<std::string>>> ablation_grid(const std::string& grid) {
  if (grid == "queries")
    return {{"N_q=8", {"num_queries=8"}}, {"N_q=16", {"num_queries=16"}}, {"N_q=32", {"num_queries=32"}}};
  if (grid == "objectives")
    return {{"full", {}},
            {"-L_V", {"disable_v=1"}},
            {"-L_V-L_A", {"disable_v=1", "disable_a=1"}}};
  if (grid == "masking")
    return {{"no mask", {"disable_masking=1"}},
            {"ma=0.5 mv=0.5", {"mask_ratio_audio=0.5", "mask_ratio_visual=0.5"}},
            {"ma=0.75 mv=0.5", {"mask_ratio_audio=0.75", "mask_ratio_visual=0.5"}},
            {"ma=0.75 mv=0.75", {"mask_ratio_audio=0.75", "mask_ratio_visual=0.75"}}};
  throw UsageError("unknown ablation grid '" + grid + "' (expected queries, objectives, or masking)");
}

std::string AblationTable::to_markdown() const {
  std::ostringstream out;
  out << "| " << grid;
  for (const auto& c : columns) out << " | " << c;
  out << " |\n|---";
  for (std::size_t i = 0; i < columns.size(); ++i) out << "|---:";
  out << "|\n";
  for (const auto& r : rows) {
    out << "| " << r.label;
    for (const auto& [name, v] : r.values) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.1f", v);
      out << " | " << buf;
    }
    out << " |\n";
  }
  return out.str();
}

std::string AblationTable::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows) {
    json row{{"label", r.label}};
    for (const auto& [name, v] : r.values) row[name] = v;
    rows_json.push_back(row);
  }
  return json{{"grid", grid}, {"columns", columns}, {"rows", rows_json}}.dump(2);
}

int cmd_ablate(const AblateArgs& args, std::ostream& log) {
  const auto start = Clock::now();
  const auto cells = ablation_grid(args.grid);
  const auto base = load_run_config(args.config, args.overrides);
  const auto corpus = load_corpus_dir(args.corpus);
  ensure_dir(args.out);

  RunManifest manifest;
  manifest.command = "ablate " + args.grid;
  manifest.config = train::to_config_text(base);
  manifest.seed = base.train.seed;
  manifest.corpus_checksum = corpus.checksum;
  manifest.metrics = {"ablation.md", "ablation.json"};
  manifest.write(args.out);

  AblationTable table;
  table.grid = args.grid;
  const std::vector<model::Condition> conds =
      args.grid == "objectives" ? std::vector{model::Condition::kV, model::Condition::kA, model::Condition::kAV}
                                : std::vector{model::Condition::kA, model::Condition::kAV};
  for (const auto c : conds)
    for (const char* r : {"R@1", "R@5", "R@10"})
      table.columns.push_back(std::string(c == model::Condition::kAV ? "A+V" : c == model::Condition::kA ? "A" : "V") +
                              " " + r);
  if (args.grid == "masking") table.columns.push_back("step ms");

  for (const auto& [label, changes] : cells) {
    auto overrides = args.overrides;
    overrides.insert(overrides.end(), changes.begin(), changes.end());
    const auto cfg = load_run_config(args.config, overrides);
    const auto cell_start = Clock::now();
    model::Model model(cfg.model, cfg.train.seed);
    train::OptimizerState state;
    const train::Pretrainer trainer(model, corpus.train, cfg.train);
    trainer.run(state);
    const double step_ms = 1000.0 * seconds_since(cell_start) / static_cast<double>(trainer.total_steps());
    AblationRow row{label, {}};
    for (const auto c : conds) {
      const auto m = eval::text_to_x(model, eval::build_index(model, corpus.test, c));
      const std::string prefix = c == model::Condition::kAV ? "A+V" : c == model::Condition::kA ? "A" : "V";
      row.values.emplace_back(prefix + " R@1", m.r1);
      row.values.emplace_back(prefix + " R@5", m.r5);
      row.values.emplace_back(prefix + " R@10", m.r10);
    }
    if (args.grid == "masking") row.values.emplace_back("step ms", step_ms);
    if (!args.quiet) log << "ablate " << args.grid << ": " << label << " done\n";
    table.rows.push_back(std::move(row));
  }
  write_text(args.out / "ablation.md", table.to_markdown());
  write_text(args.out / "ablation.json", table.to_json() + "\n");
  manifest.timings.emplace_back("total", seconds_since(start));
  manifest.complete = true;
  manifest.write(args.out);
  log << table.to_markdown();
  return kExitOk;
}

}  // namespace coavt::tools
