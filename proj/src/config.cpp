// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "kgfuse/error.hpp"

namespace kgfuse {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

const std::set<std::string, std::less<>>& known_keys() {
  static const std::set<std::string, std::less<>> keys = [] {
    std::set<std::string, std::less<>> k{
        "seed", "preset", "train.optimizer", "experiment.modes", "eval.max_new_tokens",
        "eval.bootstrap_resamples", "synth.entities", "synth.relations", "synth.triples_per_entity",
        "synth.functional", "synth.holdout_fraction", "synth.types", "synth.regions", "fusion.mode",
        "fusion.layer", "fusion.radius", "fusion.heads", "fusion.d_ff", "fusion.cotrain_kg",
        "fuse.freeze_base", "fuse.counterfactual_graphs", "fuse.real_qa"};
    for (const char* model : {"lm", "scorer"}) {
      for (const char* f : {"d_model", "layers", "heads", "d_ff", "max_seq", "dropout"}) {
        k.insert(std::string(model) + "." + f);
      }
    }
    for (const char* section : {"lm", "scorer", "fuse"}) {
      for (const char* f : {"epochs", "batch_size", "lr", "warmup_fraction", "clip_norm"}) {
        k.insert(std::string(section) + "." + f);
      }
    }
    return k;
  }();
  return keys;
}

Config from_lines(std::initializer_list<std::pair<const char*, const char*>> kv) {
  Config c;
  for (const auto& [k, v] : kv) c.set(k, v);
  return c;
}

Config desk_preset() {
  return from_lines({
      {"synth.entities", "50"},
      {"synth.relations", "4"},
      {"synth.types", "2"},
      {"synth.regions", "1"},
      {"synth.triples_per_entity", "2"},
      {"synth.functional", "true"},
      {"synth.holdout_fraction", "0.2"},
      {"lm.d_model", "32"},
      {"lm.layers", "2"},
      {"lm.heads", "4"},
      {"lm.d_ff", "64"},
      {"lm.max_seq", "24"},
      {"lm.epochs", "60"},
      {"lm.batch_size", "16"},
      {"lm.lr", "3e-3"},
      {"scorer.d_model", "32"},
      {"scorer.layers", "2"},
      {"scorer.heads", "4"},
      {"scorer.d_ff", "64"},
      {"scorer.max_seq", "16"},
      {"scorer.epochs", "20"},
      {"scorer.batch_size", "16"},
      {"scorer.lr", "1e-3"},
      {"fusion.mode", "kg-attention-layer"},
      {"fusion.cotrain_kg", "true"},
      {"fuse.epochs", "30"},
      {"fuse.batch_size", "16"},
      {"fuse.lr", "3e-3"},
      {"fuse.freeze_base", "true"},
      {"fuse.counterfactual_graphs", "20"},
      {"fuse.real_qa", "true"},
      {"experiment.modes", "gated-injection,kg-attention-layer,cross-layer-adapter,dedicated-head"},
      {"eval.max_new_tokens", "8"},
  });
}

std::vector<FusionMode> parse_modes(const std::string& list) {
  std::vector<FusionMode> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_fusion_mode(item));
  }
  return out;
}

ModelConfig model_section(const Config& c, const std::string& s, ModelConfig m) {
  m.d_model = c.get_size(s + ".d_model", m.d_model);
  m.n_layers = c.get_size(s + ".layers", m.n_layers);
  m.n_heads = c.get_size(s + ".heads", m.n_heads);
  m.d_ff = c.get_size(s + ".d_ff", m.d_ff);
  m.max_seq = c.get_size(s + ".max_seq", m.max_seq);
  m.dropout = c.get_double(s + ".dropout", m.dropout);
  return m;
}

TrainOptions train_section(const Config& c, const std::string& s, TrainOptions t, std::uint64_t seed) {
  t.epochs = c.get_size(s + ".epochs", t.epochs);
  t.batch_size = c.get_size(s + ".batch_size", t.batch_size);
  t.lr = c.get_double(s + ".lr", t.lr);
  t.warmup_fraction = c.get_double(s + ".warmup_fraction", t.warmup_fraction);
  t.clip_norm = c.get_double(s + ".clip_norm", t.clip_norm);
  t.seed = seed;
  return t;
}

void validate_train(const TrainOptions& t, const std::string& section) {
  auto fail = [&](const std::string& what) {
    throw Error(ErrorKind::kInvalidArgument, "config: " + section + "." + what);
  };
  if (t.epochs > 1000) fail("epochs must be within 0..1000");
  if (t.batch_size < 1) fail("batch_size must be >= 1");
  if (!(t.lr > 0.0)) fail("lr must be positive");
  if (t.warmup_fraction < 0.0 || t.warmup_fraction > 1.0) fail("warmup_fraction must be in [0, 1]");
  if (t.clip_norm < 0.0) fail("clip_norm must be >= 0");
}

}  // namespace

Config Config::parse(std::istream& in, const std::string& source) {
  Config c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorKind::kParse, source + " line " + std::to_string(lineno) + ": expected key=value");
    }
    const auto key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw Error(ErrorKind::kParse, source + " line " + std::to_string(lineno) + ": empty key");
    c.set(key, trim(std::string_view(t).substr(eq + 1)));
  }
  return c;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open config " + path.string());
  return parse(in, path.string());
}

std::string Config::get(std::string_view key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::size_t Config::get_size(std::string_view key, std::size_t fallback) const {
  return static_cast<std::size_t>(get_u64(key, fallback));
}

std::uint64_t Config::get_u64(std::string_view key, std::uint64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const auto& v = it->second;
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw Error(ErrorKind::kInvalidArgument, "config key '" + std::string(key) + "' is not a non-negative integer: '" + v + "'");
  }
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw Error(ErrorKind::kInvalidArgument, "config key '" + std::string(key) + "' is out of range");
  }
}

double Config::get_double(std::string_view key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t used = 0;
    const double d = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(it->second);
    return d;
  } catch (const std::exception&) {
    throw Error(ErrorKind::kInvalidArgument, "config key '" + std::string(key) + "' is not a number: '" + it->second + "'");
  }
}

bool Config::get_bool(std::string_view key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  if (it->second == "true") return true;
  if (it->second == "false") return false;
  throw Error(ErrorKind::kInvalidArgument, "config key '" + std::string(key) + "' must be true or false");
}

void Config::merge(const Config& other) {
  for (const auto& [k, v] : other.values()) values_[k] = v;
}

std::vector<std::string> preset_names() { return {"tiny", "desk", "gpt4like", "mistrallike", "claudelike"}; }

Config preset(std::string_view name) {
  if (name == "tiny") {
    return from_lines({
        {"synth.entities", "12"},
        {"synth.relations", "2"},
        {"synth.triples_per_entity", "1"},
        {"synth.holdout_fraction", "0.17"},
        {"lm.d_model", "16"},
        {"lm.layers", "1"},
        {"lm.heads", "2"},
        {"lm.d_ff", "32"},
        {"lm.max_seq", "16"},
        {"lm.epochs", "30"},
        {"lm.batch_size", "4"},
        {"lm.lr", "3e-3"},
        {"scorer.d_model", "16"},
        {"scorer.layers", "1"},
        {"scorer.heads", "2"},
        {"scorer.d_ff", "32"},
        {"scorer.max_seq", "16"},
        {"scorer.epochs", "3"},
        {"scorer.batch_size", "8"},
        {"fusion.mode", "gated-injection"},
        {"fuse.epochs", "3"},
        {"fuse.batch_size", "4"},
        {"fuse.lr", "3e-3"},
        {"fuse.counterfactual_graphs", "1"},
        {"experiment.modes", "gated-injection,kg-attention-layer"},
        {"eval.max_new_tokens", "6"},
        {"eval.bootstrap_resamples", "1000"},
    });
  }
  if (name == "desk") return desk_preset();
  // Batch sizes and fusion strategies of the three hosted-model setups.
  if (name == "gpt4like") {
    auto c = desk_preset();
    c.merge(from_lines({{"lm.batch_size", "16"}, {"fuse.batch_size", "16"}, {"fusion.mode", "dedicated-head"}}));
    return c;
  }
  if (name == "mistrallike") {
    auto c = desk_preset();
    c.merge(from_lines({{"lm.batch_size", "32"}, {"fuse.batch_size", "32"}, {"fusion.mode", "cross-layer-adapter"}}));
    return c;
  }
  if (name == "claudelike") {
    auto c = desk_preset();
    c.merge(from_lines({{"fusion.mode", "kg-attention-layer"}}));
    return c;
  }
  std::string names;
  for (const auto& n : preset_names()) names += (names.empty() ? "" : ", ") + n;
  throw Error(ErrorKind::kInvalidArgument, "unknown preset '" + std::string(name) + "' (known: " + names + ")");
}

Config resolve_config(const Config& explicit_values) {
  for (const auto& [k, v] : explicit_values.values()) {
    if (known_keys().count(k) == 0) throw Error(ErrorKind::kInvalidArgument, "unknown config key '" + k + "'");
  }
  Config out;
  if (explicit_values.has("preset")) out = preset(explicit_values.get("preset", ""));
  out.merge(explicit_values);
  return out;
}

RunConfig RunConfig::from(const Config& c) {
  RunConfig r;
  r.seed = c.get_u64("seed", 0);
  if (c.get("train.optimizer", "adam") != "adam") {
    throw Error(ErrorKind::kInvalidArgument, "config: train.optimizer supports only 'adam'");
  }
  r.synth.entity_count = c.get_size("synth.entities", r.synth.entity_count);
  r.synth.relation_count = c.get_size("synth.relations", r.synth.relation_count);
  r.synth.triples_per_entity = c.get_size("synth.triples_per_entity", r.synth.triples_per_entity);
  r.synth.functional = c.get_bool("synth.functional", r.synth.functional);
  r.synth.holdout_fraction = c.get_double("synth.holdout_fraction", r.synth.holdout_fraction);
  r.synth.type_count = c.get_size("synth.types", r.synth.type_count);
  r.synth.region_count = c.get_size("synth.regions", r.synth.region_count);
  r.synth.seed = r.seed;

  r.lm = model_section(c, "lm", r.lm);
  r.lm.mode = AttentionMode::kCausal;
  ModelConfig sc;
  sc.mode = AttentionMode::kBidirectional;
  sc.segment_vocab = 3;
  r.scorer = model_section(c, "scorer", sc);
  r.lm_train = train_section(c, "lm", r.lm_train, r.seed);
  r.scorer_train = train_section(c, "scorer", r.scorer_train, r.seed);
  r.fuse.train = train_section(c, "fuse", r.fuse.train, r.seed);
  r.fuse.freeze_base = c.get_bool("fuse.freeze_base", r.fuse.freeze_base);
  r.fuse.counterfactual_graphs = c.get_size("fuse.counterfactual_graphs", r.fuse.counterfactual_graphs);
  r.fuse.real_qa = c.get_bool("fuse.real_qa", r.fuse.real_qa);

  std::map<std::string, std::string> fusion_kv;
  for (const auto& [k, v] : c.values()) {
    if (k.rfind("fusion.", 0) == 0) fusion_kv[k] = v;
  }
  r.fusion = FusionConfig::from_map(fusion_kv);
  r.modes = parse_modes(c.get("experiment.modes", std::string(to_string(r.fusion.mode))));
  r.max_new_tokens = c.get_size("eval.max_new_tokens", r.max_new_tokens);
  r.bootstrap_resamples = c.get_size("eval.bootstrap_resamples", r.bootstrap_resamples);
  return r;
}

void RunConfig::validate() const {
  synth.validate();
  validate_train(lm_train, "lm");
  validate_train(scorer_train, "scorer");
  validate_train(fuse.train, "fuse");
  if (modes.empty()) throw Error(ErrorKind::kInvalidArgument, "config: experiment.modes is empty");
  if (max_new_tokens < 1) throw Error(ErrorKind::kInvalidArgument, "config: eval.max_new_tokens must be >= 1");
  if (bootstrap_resamples < 1) {
    throw Error(ErrorKind::kInvalidArgument, "config: eval.bootstrap_resamples must be >= 1");
  }
  // Model shapes are checked once the vocabulary size is known.
}

}  // namespace kgfuse
