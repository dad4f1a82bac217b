#include <iostream>

#include <CLI11.hpp>

#include "clipmap/commands.hpp"
#include "clipmap/kernels.hpp"

int main(int argc, char** argv) {
  clipmap::kernels::keep_freed_buffers();
  CLI::App app{"Compress a two-tower image-text encoder through learnable width and depth maps"};
  app.require_subcommand(1);
  clipmap::CommandOptions opts;
  std::uint64_t seed = 0;
  for (const auto& name : clipmap::command_names()) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", opts.config, "run configuration (key = value lines)");
    sub->add_option("--teacher", opts.teacher, "teacher checkpoint");
    sub->add_option("--student", opts.student, "student checkpoint");
    sub->add_option("--maps", opts.maps, "map checkpoint (inspect-maps)");
    sub->add_option("--out", opts.out, "output directory")->capture_default_str();
    sub->add_option("--seed", seed, "overrides train.seed");
    sub->add_flag("--deterministic", opts.deterministic, "single-threaded, bit-reproducible kernels");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : clipmap::kExitConfig;
  }
  CLI::App* sub = app.get_subcommands().front();
  if (sub->count("--seed")) opts.seed = seed;
  return clipmap::run_command(sub->get_name(), opts, std::cout, std::cerr);
}
