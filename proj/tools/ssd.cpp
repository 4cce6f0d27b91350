#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include "ssd/cli.hpp"

namespace {

template <typename T>
void optional_option(CLI::App* app, const std::string& flag, std::optional<T>& slot, const std::string& help) {
  app->add_option_function<T>(flag, [&slot](const T& v) { slot = v; }, help);
}

}  // namespace

int main(int argc, char** argv) {
  using namespace ssd::cli;
  CLI::App app{"Style-conditioned DCGAN with a spectrally normalized discriminator"};
  app.require_subcommand(1);
  app.get_formatter()->column_width(36);

  TrainOptions train;
  auto* t = app.add_subcommand("train", "Train generator and discriminator");
  t->add_option("--config", train.config, "key=value config file applied before the flags below")->check(CLI::ExistingFile);
  t->add_option("--data-dir", train.data_dir, "Training image directory (PNG/JPEG)")->required()->check(CLI::ExistingDirectory);
  t->add_option("--val-dir", train.val_dir, "Validation image directory (optional)")->check(CLI::ExistingDirectory);
  t->add_option("--out-dir", train.out_dir, "Output directory for checkpoints, loss CSV and sample grids")->required();
  optional_option(t, "--seed", train.seed, "Run seed [default: 0]");
  optional_option(t, "--epochs", train.epochs, "Training epochs [default: 20]");
  optional_option(t, "--batch-size", train.batch_size, "Batch size [default: 32]");
  t->add_flag("--no-spectral-norm", train.no_spectral_norm, "Disable spectral normalization in the discriminator [default: enabled]");
  optional_option(t, "--generator-mode", train.generator_mode, "adain | mapping_only [default: adain]");
  optional_option(t, "--data-fraction", train.data_fraction, "Percent of the training split: 25 | 50 | 75 | 100 [default: 100]");
  t->footer("Other defaults: lr=5e-4, Adam betas (0.5, 0.999), eps=1e-8, 500 validation noise vectors.");

  GenerateOptions gen;
  auto* g = app.add_subcommand("generate", "Write a grid of samples from a checkpoint");
  g->add_option("--checkpoint", gen.checkpoint, "Checkpoint file")->required();
  g->add_option("--n", gen.n, "Number of samples")->capture_default_str();
  g->add_option("--seed", gen.seed, "Latent seed")->capture_default_str();
  g->add_option("--cols", gen.cols, "Grid columns, 0 for ceil(sqrt(n))")->capture_default_str();
  g->add_option("--out", gen.out, "Output PNG")->capture_default_str();

  InterpolateOptions interp;
  auto* i = app.add_subcommand("interpolate", "Generate frames along a line between two seeded latents");
  i->add_option("--checkpoint", interp.checkpoint, "Checkpoint file")->required();
  i->add_option("--seed-a", interp.seed_a, "Seed of the first latent")->capture_default_str();
  i->add_option("--seed-b", interp.seed_b, "Seed of the second latent")->capture_default_str();
  i->add_option("--steps", interp.steps, "Frames including both endpoints (>= 2)")->capture_default_str();
  i->add_option("--out", interp.out, "Output PNG row")->capture_default_str();
  i->add_option("--frames-dir", interp.frames_dir, "Also write each frame as its own PNG here");

  EvaluateOptions eval;
  auto* e = app.add_subcommand("evaluate", "Compute FID, clean-FID and KID");
  e->add_option("--real-dir", eval.real_dir, "Real image directory")->required();
  auto* fake_dir = e->add_option("--fake-dir", eval.fake_dir, "Generated image directory");
  auto* ckpt = e->add_option("--checkpoint", eval.checkpoint, "Generate fake images from this checkpoint");
  fake_dir->excludes(ckpt);
  e->add_option("--n-samples", eval.n_samples, "Samples drawn from --checkpoint")->capture_default_str();
  e->add_option("--seed", eval.seed, "Latent seed for --checkpoint samples")->capture_default_str();
  e->add_option("--extractor", eval.extractor, "toy | plugin:<library>[,<argument>]")->capture_default_str();
  e->add_option("--metrics", eval.metrics, "Comma list of fid, clean-fid, kid")->capture_default_str();
  e->add_option("--out", eval.out, "Write the report line to this file");
  e->add_option("--csv", eval.csv, "Append the report to this CSV");

  std::string arch = "ours";
  auto* c = app.add_subcommand("count-params", "Print learnable parameter counts");
  c->add_option("--arch", arch, "ours | dcgan-control")->capture_default_str()->check(CLI::IsMember({"ours", "dcgan-control"}));

  std::string inspect_path;
  auto* s = app.add_subcommand("inspect", "Print a checkpoint's manifest");
  s->add_option("checkpoint", inspect_path, "Checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? ok : usage;
  }

  try {
    if (*t) cmd_train(train, std::cout);
    else if (*g) cmd_generate(gen, std::cout);
    else if (*i) cmd_interpolate(interp, std::cout);
    else if (*e) {
      if (eval.fake_dir.empty() && eval.checkpoint.empty()) {
        std::cerr << "usage error: evaluate needs --fake-dir or --checkpoint\n";
        return usage;
      }
      cmd_evaluate(eval, std::cout);
    } else if (*c) cmd_count_params(arch, std::cout);
    else if (*s) cmd_inspect(inspect_path, std::cout);
  } catch (const ssd::Error& err) {
    std::cerr << to_string(err.kind()) << ": " << err.what() << '\n';
    return exit_code_for(err.kind());
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return failure;
  }
  return ok;
}
