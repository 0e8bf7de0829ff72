#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"

using namespace coavt::tools;

namespace {

void add_config(CLI::App* cmd, std::optional<fs::path>& config, std::vector<std::string>& overrides) {
  cmd->add_option("-c,--config", config, "key=value config file (supports include)")->check(CLI::ExistingFile);
  cmd->add_option("--set", overrides, "override a config key, key=value (repeatable)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tri-modal audio-visual-text pre-training on a synthetic corpus"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  GenCorpusArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-corpus", "Generate the synthetic train/test corpus");
  add_config(gen_cmd, gen.config, gen.overrides);
  gen_cmd->add_option("-o,--out", gen.out, "output directory")->required();

  PretrainArgs pre;
  auto* pre_cmd = app.add_subcommand("pretrain", "Pre-train on a generated corpus");
  add_config(pre_cmd, pre.config, pre.overrides);
  pre_cmd->add_option("--corpus", pre.corpus, "corpus directory")->required();
  pre_cmd->add_option("-o,--out", pre.out, "run directory")->required();
  pre_cmd->add_option("--resume", pre.resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  pre_cmd->add_flag("-q,--quiet", pre.quiet, "no progress output");

  FinetuneArgs fin;
  auto* fin_cmd = app.add_subcommand("finetune", "Fine-tune for retrieval or classification");
  add_config(fin_cmd, fin.config, fin.overrides);
  fin_cmd->add_option("--corpus", fin.corpus, "corpus directory")->required();
  fin_cmd->add_option("--checkpoint", fin.checkpoint, "starting checkpoint (omit to train from scratch)")
      ->check(CLI::ExistingFile);
  fin_cmd->add_option("-o,--out", fin.out, "run directory")->required();
  fin_cmd->add_option("--task", fin.task, "retrieval | classification");
  fin_cmd->add_option("--modality", fin.modality, "a | v | av");
  fin_cmd->add_flag("-q,--quiet", fin.quiet, "no progress output");

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "Evaluate text->X retrieval or classification on the test split");
  add_config(ev_cmd, ev.config, ev.overrides);
  ev_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint (omit for a random-init model from --config)")
      ->check(CLI::ExistingFile);
  ev_cmd->add_option("--corpus", ev.corpus, "corpus directory")->required();
  ev_cmd->add_option("--task", ev.task, "retrieval | classification");
  ev_cmd->add_option("--modality", ev.modality, "a | v | av");
  ev_cmd->add_option("--k", ev.k, "contrastive candidates before re-ranking");
  bool no_rerank = false;
  ev_cmd->add_flag("--no-rerank", no_rerank, "skip the matching re-rank stage");
  ev_cmd->add_option("-o,--out", ev.out, "also write the metrics JSON here");

  AvEvalArgs av;
  auto* av_cmd = app.add_subcommand("av-eval", "Audio->visual and visual->audio retrieval");
  add_config(av_cmd, av.config, av.overrides);
  av_cmd->add_option("--checkpoint", av.checkpoint, "checkpoint")->check(CLI::ExistingFile);
  av_cmd->add_option("--corpus", av.corpus, "corpus directory")->required();
  av_cmd->add_option("-o,--out", av.out, "also write the metrics JSON here");

  GradcheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every primitive and the full loss");
  gc_cmd->add_option("--preset", gc.preset, "scale preset (micro)");
  gc_cmd->add_option("--gelu-fault", gc.gelu_fault, "scale the gelu derivative (harness sensitivity check)");
  gc_cmd->add_flag("--json", gc.json, "JSON report");

  AblateArgs ab;
  auto* ab_cmd = app.add_subcommand("ablate", "Run an ablation grid and emit Markdown + JSON tables");
  add_config(ab_cmd, ab.config, ab.overrides);
  ab_cmd->add_option("--corpus", ab.corpus, "corpus directory")->required();
  ab_cmd->add_option("-o,--out", ab.out, "output directory")->required();
  ab_cmd->add_option("--grid", ab.grid, "queries | objectives | masking");
  ab_cmd->add_flag("-q,--quiet", ab.quiet, "no progress output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }
  ev.rerank = !no_rerank;

  return run_guarded(
      [&] {
        if (*gen_cmd) return cmd_gen_corpus(gen, std::cerr);
        if (*pre_cmd) return cmd_pretrain(pre, std::cerr);
        if (*fin_cmd) return cmd_finetune(fin, std::cerr);
        if (*ev_cmd) return cmd_eval(ev, std::cout);
        if (*av_cmd) return cmd_av_eval(av, std::cout);
        if (*gc_cmd) return cmd_gradcheck(gc, std::cout);
        if (*ab_cmd) return cmd_ablate(ab, std::cerr);
        return static_cast<int>(kExitUsage);
      },
      std::cerr);
}
