#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "pdlatent/config.hpp"
#include "pdlatent/error.hpp"
#include "pdlatent/pipeline.hpp"

using namespace pdlatent;

namespace {

struct Flags {
  std::string config;
  std::string stage;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::optional<int> threads;
  bool print_config = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "INI config file (defaults apply when omitted)");
  cmd->add_option("--seed", f.seed, "Override run.seed");
  cmd->add_option("--out-dir", f.out_dir, "Override run.out_dir");
  cmd->add_option("--threads", f.threads, "Override run.threads")->check(CLI::PositiveNumber);
  cmd->add_flag("--print-config", f.print_config, "Print the resolved config and exit");
  cmd->add_flag("-q,--quiet", f.quiet, "Only print errors");
}

PipelineConfig resolve(const Flags& f) {
  PipelineConfig c = f.config.empty() ? parse_config("") : load_config(f.config);
  if (f.seed) c.seed = *f.seed;
  if (!f.out_dir.empty()) c.out_dir = f.out_dir;
  if (f.threads) c.threads = *f.threads;
  c.validate();
  return c;
}

int run(const std::string& command, const Flags& f) {
  const auto config = resolve(f);
  if (f.print_config) {
    std::cout << config_to_ini(config);
    return 0;
  }
  StageLogger log;
  if (!f.quiet) log = [](const std::string& line) { std::cerr << line << '\n'; };
  Pipeline pipeline(config, log);
  if (command != "pipeline") {
    pipeline.run_stage(command);
  } else {
    const int first = f.stage.empty() ? 0 : stage_index(f.stage);
    for (std::size_t i = static_cast<std::size_t>(first); i < kStageNames.size(); ++i) pipeline.run_stage(kStageNames[i]);
  }
  if (!f.quiet) std::cerr << "run manifest: " << pipeline.paths().run_manifest().string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-feature pipeline for striatal SPECT-like volumes"};
  app.require_subcommand(1);
  Flags flags;
  std::string command;

  const std::pair<const char*, const char*> commands[] = {
      {"phantom-gen", "Generate the synthetic cohort, or check the ingest manifest"},
      {"preprocess", "Normalise, compress, downsample and crop the cohort"},
      {"train", "Train the convolutional VAE"},
      {"encode", "Encode every scan to its latent mean and log-variance"},
      {"features", "Fit K-means on the latent means and write the feature table"},
      {"regress", "Fit every target and model on the full cohort"},
      {"cv", "Cross-validate every target and model"},
      {"shap", "Exact tree SHAP attributions, importance and dependence"},
      {"manifold", "Decode a latent grid into a montage and tile means"},
  };
  for (const auto& [name, help] : commands) {
    auto* cmd = app.add_subcommand(name, help);
    add_common(cmd, flags);
    cmd->callback([&command, n = std::string(name)] { command = n; });
  }
  auto* all = app.add_subcommand("pipeline", "Run every stage in order");
  add_common(all, flags);
  all->add_option("--stage", flags.stage, "Start at this stage");
  all->callback([&command] { command = "pipeline"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_code(ErrorKind::Config);
  }

  try {
    return run(command, flags);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(ErrorKind::Data);
  }
}
