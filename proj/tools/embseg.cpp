// embseg: label-space analysis, synthetic data, training, evaluation,
// unseen-label runs and gradient checks. See README.md for the config schema.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "embseg/commands.hpp"

namespace cli = embseg::cli;

int main(int argc, char** argv) {
  CLI::App app{"embseg - language-embedding semantic segmentation at desk scale"};
  app.require_subcommand(1);

  // labels
  cli::LabelsArgs labels;
  auto* lab = app.add_subcommand("labels", "label-space similarity, export and placeholder embeddings");
  lab->add_option("action", labels.action, "sim | export | placeholder")
      ->required()
      ->check(CLI::IsMember({"sim", "export", "placeholder"}));
  lab->add_option("--embeddings", labels.embeddings, "JSONL embedding file (sim, export)");
  lab->add_option("--out", labels.out, "output file")->required();
  std::string blocks;
  lab->add_option("--blocks", blocks, "block id per label, whitespace separated (sim)");
  lab->add_option("--names", labels.names, "name<TAB>description file (placeholder)");
  lab->add_option("--dim", labels.dim, "placeholder embedding dimension")->capture_default_str();

  // synth / train / eval / zeroshot share their flags
  cli::RunArgs run;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  auto add_run = [&](const char* name, const char* help, bool with_checkpoint) {
    auto* sc = app.add_subcommand(name, help);
    sc->add_option("--config", run.config, "experiment config (JSON)")->required();
    sc->add_option("--seed", seed, "run seed (EMBSEG_SEED overrides)");
    sc->add_option("--out", run.out, "output directory")->required();
    if (with_checkpoint) sc->add_option("--checkpoint", checkpoint, "model checkpoint directory");
    return sc;
  };
  auto* synth = add_run("synth", "generate the synthetic sample archives", false);
  auto* train = add_run("train", "train and evaluate; writes checkpoint, metrics.csv, report.json", false);
  auto* eval = add_run("eval", "evaluate a checkpoint on fresh scenes", true);
  auto* zeroshot = add_run("zeroshot", "unseen-label evaluation (trains unless --checkpoint)", true);

  // gradcheck
  cli::GradcheckArgs gc;
  std::string gc_out;
  auto* grad = app.add_subcommand("gradcheck", "central-difference gradient checks");
  grad->add_option("--module", gc.module, "all | head | losses")
      ->check(CLI::IsMember({"all", "head", "losses"}))
      ->capture_default_str();
  grad->add_option("--trials", gc.trials, "random instances per target")
      ->check(CLI::Range(std::size_t{1}, std::size_t{1000000}))
      ->capture_default_str();
  grad->add_option("--eps", gc.eps, "finite-difference step")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  grad->add_option("--seed", seed, "instance seed (EMBSEG_SEED overrides)");
  grad->add_option("--out", gc_out, "directory for gradcheck.csv and the run manifest");

  // replay
  std::string manifest, replay_out;
  auto* replay = app.add_subcommand("replay", "re-run a manifest and compare metric outputs");
  replay->add_option("--manifest", manifest, "manifest.json of an earlier run")->required();
  replay->add_option("--out", replay_out, "output path for the re-run")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cli::kUsage;
  }

  return cli::guarded(
      [&]() -> int {
        if (*lab) {
          if (!blocks.empty()) labels.blocks = blocks;
          if (labels.action != "placeholder" && labels.embeddings.empty()) {
            throw embseg::ConfigError({"labels " + labels.action + ": --embeddings is required"});
          }
          if (labels.action == "placeholder" && labels.names.empty()) {
            throw embseg::ConfigError({"labels placeholder: --names is required"});
          }
          return cli::cmd_labels(labels, std::cout);
        }
        if (*grad) {
          if (seed) gc.seed = *seed;
          if (!gc_out.empty()) gc.out = gc_out;
          return cli::cmd_gradcheck(gc, std::cout);
        }
        if (*replay) return cli::cmd_replay(manifest, replay_out, std::cout);
        run.seed = seed;
        if (!checkpoint.empty()) run.checkpoint = checkpoint;
        if (*synth) return cli::cmd_synth(run, std::cout);
        if (*train) return cli::cmd_train(run, std::cout);
        if (*eval) return cli::cmd_eval(run, std::cout);
        if (*zeroshot) return cli::cmd_zeroshot(run, std::cout);
        return cli::kUsage;
      },
      std::cerr);
}
