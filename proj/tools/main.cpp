#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "mkbe/cli/run.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Multimodal knowledge base embeddings"};
  app.require_subcommand(1);
  std::string config;
  std::uint64_t seed = 0;
  std::string modalities;
  mkbe::cli::Overrides o;

  for (const auto* name : {"prepare", "train", "eval", "impute"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config, "run config (JSON)")->required();
    sub->add_option("--seed", seed, "global seed, overrides the config");
    sub->add_option("--workers", o.workers, "evaluation threads")->check(CLI::PositiveNumber);
    sub->add_flag("--per-relation", o.per_relation, "write per-relation metrics");
    sub->add_option("--modalities", modalities, "comma-separated relation groups, e.g. S,N");
    sub->add_option("--checkpoint", o.checkpoint, "checkpoint to load instead of the run's own");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const auto* sub = app.get_subcommands().front();
  if (sub->count("--seed")) o.seed = seed;
  if (sub->count("--modalities")) {
    std::vector<std::string> groups;
    std::stringstream ss(modalities);
    for (std::string g; std::getline(ss, g, ',');)
      if (!g.empty()) groups.push_back(g);
    o.modalities = groups;
  }
  return mkbe::cli::run_command(sub->get_name(), config, o, std::cout, std::cerr);
}
