#pragma once

// Command implementations behind the clipmap executable.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "clipmap/config.hpp"
#include "clipmap/data.hpp"
#include "clipmap/mapping.hpp"
#include "clipmap/model.hpp"

namespace clipmap {

struct CommandOptions {
  std::filesystem::path config;  // empty: all defaults
  std::filesystem::path teacher;
  std::filesystem::path student;
  std::filesystem::path maps;
  std::filesystem::path out = ".";
  std::optional<std::uint64_t> seed;  // overrides train.seed
  bool deterministic = false;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumeric = 4;

const std::vector<std::string>& command_names();

// Runs one command and maps failures onto exit codes, reporting to `err`.
int run_command(const std::string& name, const CommandOptions& opts, std::ostream& out, std::ostream& err);

// Mean task loss over consecutive full batches of `data` (a single batch when
// data is smaller than `batch`).
Real dataset_task_loss(const ClipModel& model, const Dataset& data, std::size_t batch);

struct InitComparisonRow {
  MapInit scheme = MapInit::Diagonal;
  std::uint64_t steps = 0;
  std::uint64_t warmup = 0;
  Real base_lr = 0;
  std::vector<Real> lr_trace;
  Real initial_task_loss = 0;  // first logged step
  Real end_task_loss = 0;      // mean of the last min(20, steps) logged steps
  Real val_task_loss = 0;
  Real val_tr1 = 0;
};

// Mapping stage under each initialization with identical data, budget, and
// schedule. Rows come in the order random, fan_in, fan_avg, diag.
std::vector<InitComparisonRow> compare_map_inits(const ClipModel& teacher, const RunConfig& cfg, std::uint64_t seed,
                                                 const Dataset& train, const Dataset& val);
std::string init_comparison_csv(const std::vector<InitComparisonRow>& rows);

}  // namespace clipmap
