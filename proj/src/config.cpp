#include "clipmap/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "clipmap/errors.hpp"

namespace clipmap {

namespace {

const std::vector<std::pair<std::string, std::string>>& defaults() {
  static const std::vector<std::pair<std::string, std::string>> d = {
      {"model.width", "64"},
      {"model.depth", "8"},
      {"model.heads", "4"},
      {"model.ffn_mult", "4"},
      {"model.embed_dim", "32"},
      {"model.vocab", "64"},
      {"model.max_len", "16"},
      {"model.grid", "4"},
      {"model.patch", "2"},
      {"model.channels", "3"},
      {"compress.d2", "32"},
      {"compress.l2", "4"},
      {"compress.init", "diag"},
      {"compress.off_diag_std", "0"},
      {"data.attributes", "4"},
      {"data.values", "12"},
      {"data.noise", "0.1"},
      {"data.train", "8192"},
      {"data.val", "256"},
      {"data.seed", "0"},
      {"train.seed", "0"},
      {"train.batch", "64"},
      {"train.clip", "5"},
      {"train.beta1", "0.9"},
      {"train.beta2", "0.98"},
      {"train.eps", "1e-8"},
      {"train.teacher.steps", "2000"},
      {"train.teacher.warmup", "200"},
      {"train.teacher.lr", "1e-3"},
      {"train.teacher.wd", "0.2"},
      {"train.map.steps", "500"},
      {"train.map.warmup", "50"},
      {"train.map.lr", "1e-3"},
      {"train.map.wd", "0"},
      {"train.map.distill", "0"},
      {"train.retrain.steps", "2000"},
      {"train.retrain.warmup", "200"},
      {"train.retrain.lr", "3e-4"},
      {"train.retrain.wd", "0.2"},
      {"loss.lambda", "1"},
      {"run.threads", "1"},
  };
  return d;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& [k, v] : defaults()) values_[k] = v;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
  explicit_[key] = true;
}

const std::string& RunConfig::raw(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::vector<std::string> RunConfig::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : defaults()) out.push_back(k);
  return out;
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(no);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw ConfigError(where + ": expected 'key = value'");
    if (c.was_set(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
    try {
      c.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str(), path.string());
}

std::uint64_t RunConfig::u64(const std::string& key) const {
  const std::string& s = raw(key);
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + s + "'");
  return v;
}

Real RunConfig::real(const std::string& key) const {
  const std::string& s = raw(key);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || !std::isfinite(v))
    throw ConfigError("config key '" + key + "': expected a number, got '" + s + "'");
  return Real(v);
}

EncoderConfig RunConfig::encoder(Tower tower) const {
  EncoderConfig c;
  c.tower = tower;
  c.width = u64("model.width");
  c.depth = u64("model.depth");
  c.heads = u64("model.heads");
  c.ffn_mult = u64("model.ffn_mult");
  c.embed_dim = u64("model.embed_dim");
  c.vocab = u64("model.vocab");
  c.max_len = u64("model.max_len");
  c.grid = u64("model.grid");
  c.patch = u64("model.patch");
  c.channels = u64("model.channels");
  return c;
}

SyntheticSpec RunConfig::data() const {
  SyntheticSpec s;
  s.attributes = u64("data.attributes");
  s.values = u64("data.values");
  s.grid = u64("model.grid");
  s.patch = u64("model.patch");
  s.channels = u64("model.channels");
  s.max_len = u64("model.max_len");
  s.noise = real("data.noise");
  s.seed = u64("data.seed");
  s.n_train = u64("data.train");
  s.n_val = u64("data.val");
  return s;
}

StageConfig RunConfig::stage(Stage s) const {
  const std::string p = "train." + stage_name(s) + ".";
  StageConfig c;
  c.stage = s;
  c.steps = u64(p + "steps");
  c.warmup = u64(p + "warmup");
  c.lr = real(p + "lr");
  c.adamw.weight_decay = real(p + "wd");
  c.adamw.beta1 = real("train.beta1");
  c.adamw.beta2 = real("train.beta2");
  c.adamw.eps = real("train.eps");
  c.batch = u64("train.batch");
  c.clip = real("train.clip");
  c.seed = u64("train.seed");
  return c;
}

LossWeights RunConfig::loss() const { return {real("loss.lambda")}; }

MapInit RunConfig::map_init() const { return parse_map_init(raw("compress.init")); }

Real RunConfig::off_diag_std() const { return real("compress.off_diag_std"); }

void RunConfig::validate() const {
  for (Tower t : {Tower::Image, Tower::Text}) encoder(t).validate();
  const SyntheticSpec d = data();
  d.validate();
  if (d.vocab_needed() > u64("model.vocab"))
    throw ConfigError("model.vocab " + raw("model.vocab") + " is below the " + std::to_string(d.vocab_needed()) +
                      " tokens the data needs");
  for (Stage s : {Stage::Teacher, Stage::Mapping, Stage::Retraining}) stage(s).validate();
  if (stage(Stage::Teacher).batch > d.n_train) throw ConfigError("train.batch exceeds data.train");
  loss().validate();
  map_init();
  if (!(off_diag_std() >= 0)) throw ConfigError("compress.off_diag_std must be >= 0");
  if (u64("train.map.distill") > 1) throw ConfigError("train.map.distill must be 0 or 1");
  const std::size_t d2 = target_width(), l2 = target_depth();
  if (d2 == 0 || d2 > u64("model.width")) throw ConfigError("compress.d2 must lie in [1, model.width]");
  if (l2 == 0 || l2 > u64("model.depth")) throw ConfigError("compress.l2 must lie in [1, model.depth]");
  if (d2 % u64("model.heads") != 0) throw ConfigError("compress.d2 must be divisible by model.heads");
  if (threads() == 0) throw ConfigError("run.threads must be >= 1");
}

std::string RunConfig::dump() const {
  std::string out;
  for (const auto& [k, v] : defaults()) out += k + " = " + values_.at(k) + "\n";
  return out;
}

}  // namespace clipmap
