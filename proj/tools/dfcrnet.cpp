#include <iostream>

#include "CLI11.hpp"

#include "dfcr/harness.hpp"
#include "dfcr/kernels.hpp"

int main(int argc, char** argv) {
  CLI::App app{"DFCRNet dual-branch scene classifier: data generation, training and experiments"};
  app.require_subcommand(1, 1);

  dfcr::CommandOptions opt;
  std::uint64_t seed = 0;
  int threads = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override the seed list with a single seed");
    sub->add_flag("--deterministic", opt.deterministic, "omit wall-clock fields so reports are byte-reproducible");
    sub->add_flag("--quiet", opt.quiet, "no per-epoch progress on stderr");
    sub->add_option("--threads", threads, "OpenMP threads (default: runtime setting)");
  };
  const std::pair<const char*, const char*> commands[] = {
      {"generate-data", "write the synthetic MBT tiles and manifest"},
      {"train", "train every configured seed and report test metrics"},
      {"ablate", "train the six module-toggle variants"},
      {"compare-attention", "swap the attention block for SE, ECA, CBAM or CDLM+LFEM"},
      {"gradcheck", "finite-difference gradient checks of the modules"},
  };
  for (const auto& [name, help] : commands) add_common(app.add_subcommand(name, help));
  auto* eval = app.add_subcommand("evaluate", "metrics of a checkpoint on one split");
  add_common(eval);
  eval->add_option("--checkpoint", opt.checkpoint, "DFCR1 checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", opt.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));

  CLI11_PARSE(app, argc, argv);
  auto* sub = app.get_subcommands().front();
  if (sub->count("--seed")) opt.seed = seed;
  if (threads > 0) dfcr::kernels::set_threads(threads);
  return dfcr::run_command(sub->get_name(), opt, std::cout, std::cerr);
}
