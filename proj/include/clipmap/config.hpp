#pragma once

// Flat "key = value" run configuration. '#' starts a comment. Every key has a
// default; unknown keys, duplicates, and malformed values are ConfigErrors
// naming the key.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "clipmap/data.hpp"
#include "clipmap/losses.hpp"
#include "clipmap/mapping.hpp"
#include "clipmap/model.hpp"
#include "clipmap/training.hpp"

namespace clipmap {

class RunConfig {
 public:
  RunConfig();

  static RunConfig parse(const std::string& text, const std::string& origin = "<config>");
  static RunConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  const std::string& raw(const std::string& key) const;
  bool was_set(const std::string& key) const { return explicit_.count(key) != 0; }
  std::vector<std::string> keys() const;

  std::uint64_t u64(const std::string& key) const;
  Real real(const std::string& key) const;

  EncoderConfig encoder(Tower tower) const;
  SyntheticSpec data() const;
  StageConfig stage(Stage s) const;
  LossWeights loss() const;
  MapInit map_init() const;
  Real off_diag_std() const;
  std::size_t target_width() const { return u64("compress.d2"); }
  std::size_t target_depth() const { return u64("compress.l2"); }
  bool map_distill() const { return u64("train.map.distill") != 0; }
  std::uint64_t seed() const { return u64("train.seed"); }
  std::size_t threads() const { return u64("run.threads"); }

  // Cross-key checks (vocab covers the generator, compression fits the model, ...).
  void validate() const;

  // Every key with its current value, one per line.
  std::string dump() const;

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, bool> explicit_;
};

}  // namespace clipmap
