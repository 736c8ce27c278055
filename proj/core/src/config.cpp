// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

#include "fsdrive/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "fsdrive/error.hpp"
#include "fsdrive/hash.hpp"
#include "fsdrive/io.hpp"

namespace fsd::experiment {

namespace {

using curriculum::Task;

std::string Trim(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string FormatDouble(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, r.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

[[noreturn]] void BadValue(const std::string& key, std::string_view raw, const char* expected) {
  Fail(ErrorKind::kConfig, key + ": expected " + expected + ", got '" + std::string(raw) + "'");
}

double ToDouble(const std::string& key, const std::string& raw) {
  double v = 0.0;
  auto r = std::from_chars(raw.data(), raw.data() + raw.size(), v);
  if (r.ec != std::errc() || r.ptr != raw.data() + raw.size()) BadValue(key, raw, "a number");
  return v;
}

int64_t ToInt(const std::string& key, const std::string& raw) {
  int64_t v = 0;
  auto r = std::from_chars(raw.data(), raw.data() + raw.size(), v);
  if (r.ec != std::errc() || r.ptr != raw.data() + raw.size()) BadValue(key, raw, "an integer");
  return v;
}

bool ToBool(const std::string& key, const std::string& raw) {
  if (raw == "true") return true;
  if (raw == "false") return false;
  BadValue(key, raw, "true or false");
}

std::string ToString(const std::string& key, const std::string& raw) {
  if (raw.size() >= 2 && raw.front() == '"' && raw.back() == '"') return raw.substr(1, raw.size() - 2);
  // Bare words are accepted so shell overrides need no extra quoting.
  if (raw.empty() || raw.find_first_of("\" \t[]=#") != std::string::npos) BadValue(key, raw, "a quoted string");
  return raw;
}

std::vector<std::string> ToList(const std::string& key, const std::string& raw) {
  if (raw.size() < 2 || raw.front() != '[' || raw.back() != ']') BadValue(key, raw, "a [list]");
  std::vector<std::string> items;
  std::stringstream ss(raw.substr(1, raw.size() - 2));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = Trim(item);
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

struct Field {
  std::string get;  // formatted value
  std::function<void(const std::string& key, const std::string& raw)> set;
};

// Every configurable field in canonical order, bound to `c`.
std::vector<std::pair<std::string, Field>> Fields(ExperimentConfig& c) {
  std::vector<std::pair<std::string, Field>> f;
  auto dbl = [&f](const std::string& name, double& v) {
    f.push_back({name, {FormatDouble(v), [&v](auto& k, auto& raw) { v = ToDouble(k, raw); }}});
  };
  auto integer = [&f](const std::string& name, auto& v) {
    using T = std::remove_reference_t<decltype(v)>;
    f.push_back({name, {std::to_string(v), [&v](auto& k, auto& raw) { v = static_cast<T>(ToInt(k, raw)); }}});
  };
  auto boolean = [&f](const std::string& name, bool& v) {
    f.push_back({name, {v ? "true" : "false", [&v](auto& k, auto& raw) { v = ToBool(k, raw); }}});
  };
  auto str = [&f](const std::string& name, std::string& v) {
    f.push_back({name, {"\"" + v + "\"", [&v](auto& k, auto& raw) { v = ToString(k, raw); }}});
  };
  auto train = [&](const std::string& s, TrainSpec& t) {
    integer(s + ".steps", t.steps);
    integer(s + ".batch_size", t.batch_size);
    dbl(s + ".lr", t.hyper.lr);
    integer(s + ".warmup_steps", t.hyper.warmup_steps);
    dbl(s + ".min_lr_ratio", t.hyper.min_lr_ratio);
    dbl(s + ".clip_norm", t.hyper.clip_norm);
    dbl(s + ".beta1", t.hyper.beta1);
    dbl(s + ".beta2", t.hyper.beta2);
    dbl(s + ".eps", t.hyper.eps);
    integer(s + ".log_every", t.log_every);
  };

  integer("data.train_scenes", c.train_scenes);
  integer("data.val_scenes", c.val_scenes);
  integer("seeds.data", c.data_seed);
  integer("seeds.train", c.train_seed);
  integer("seeds.sample", c.sample_seed);

  auto& w = c.world;
  integer("world.num_lanes", w.num_lanes);
  dbl("world.lane_width", w.lane_width);
  dbl("world.road_length", w.road_length);
  integer("world.num_agents", w.num_agents);
  dbl("world.mix_constant_speed", w.behavior_mix.constant_speed);
  dbl("world.mix_decelerating", w.behavior_mix.decelerating);
  dbl("world.mix_lane_change", w.behavior_mix.lane_change);
  dbl("world.ego_speed_min", w.ego_speed_min);
  dbl("world.ego_speed_max", w.ego_speed_max);
  {
    std::string list = "[";
    for (size_t i = 0; i < w.ego_accel_choices.size(); ++i) list += (i ? ", " : "") + FormatDouble(w.ego_accel_choices[i]);
    list += "]";
    f.push_back({"world.ego_accel_choices", {list, [&w](auto& k, auto& raw) {
                   w.ego_accel_choices.clear();
                   for (const auto& item : ToList(k, raw)) w.ego_accel_choices.push_back(ToDouble(k, item));
                 }}});
  }
  dbl("world.agent_speed_min", w.agent_speed_min);
  dbl("world.agent_speed_max", w.agent_speed_max);
  dbl("world.ego_lane_change_prob", w.ego_lane_change_prob);

  dbl("raster.lateral_extent", c.raster.lateral_extent);
  dbl("raster.forward_extent", c.raster.forward_extent);
  dbl("raster.behind", c.raster.behind);
  dbl("raster.meters_per_px_lateral", c.raster.meters_per_px_lateral);
  dbl("raster.meters_per_px_forward", c.raster.meters_per_px_forward);

  integer("codec.k", c.codebook_k);

  integer("model.d_model", c.model.d_model);
  integer("model.n_layers", c.model.n_layers);
  integer("model.n_heads", c.model.n_heads);
  integer("model.ffn_mult", c.model.ffn_mult);
  integer("model.context_len", c.model.context_len);

  auto& m = c.mixture;
  for (int i = 0; i < curriculum::kNumTasks; ++i) {
    const std::string name = curriculum::TaskName(static_cast<Task>(i));
    if (i != static_cast<int>(Task::kPlan)) dbl("stage1.weight_" + name, m.stage1[i]);
  }
  train("stage1", c.stage1);
  dbl("stage2.weight_vqa", m.stage2[static_cast<int>(Task::kVqa)]);
  dbl("stage2.weight_plan", m.stage2[static_cast<int>(Task::kPlan)]);
  boolean("stage2.future_aux", m.future_aux);
  dbl("stage2.future_aux_weight", m.future_aux_weight);
  train("stage2", c.stage2);

  for (int i = 0; i < curriculum::kNumTasks; ++i) {
    const std::string name = std::string("tasks.") + curriculum::TaskName(static_cast<Task>(i));
    // std::array<bool> elements are addressable, unlike vector<bool>.
    boolean(name, m.enabled[i]);
  }

  {
    f.push_back({"plan.cot_variant", {std::string("\"") + curriculum::CotVariantName(m.cot_variant) + "\"",
                                      [&m](auto& k, auto& raw) {
                                        m.cot_variant = curriculum::CotVariantFromName(ToString(k, raw));
                                      }}});
  }
  boolean("plan.ego_status", m.ego_status);

  integer("eval.episodes", c.eval_episodes);
  {
    std::string list = "[";
    for (size_t i = 0; i < c.eval_times.size(); ++i) list += (i ? ", " : "") + std::to_string(c.eval_times[i]);
    list += "]";
    f.push_back({"eval.times", {list, [&c](auto& k, auto& raw) {
                   c.eval_times.clear();
                   for (const auto& item : ToList(k, raw)) c.eval_times.push_back(static_cast<int>(ToInt(k, item)));
                 }}});
  }
  boolean("eval.vqa", c.eval_vqa);

  str("run.out_dir", c.out_dir);
  integer("run.jobs", c.jobs);
  return f;
}

void Assign(ExperimentConfig& c, const std::string& key, const std::string& raw) {
  for (auto& [name, field] : Fields(c)) {
    if (name == key) {
      try {
        field.set(key, raw);
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::kConfig) throw;
        Fail(ErrorKind::kConfig, key + ": " + e.what());
      }
      return;
    }
  }
  Fail(ErrorKind::kConfig, "unknown config key '" + key + "'");
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
  stage1.steps = 20000;
  stage2.steps = 10000;
}

ExperimentConfig ExperimentConfig::Parse(std::string_view text) {
  ExperimentConfig c;
  std::string section;
  std::stringstream ss{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos && line.find('"') > hash) line.resize(hash);
    line = Trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      FSD_CHECK(line.back() == ']', ErrorKind::kConfig, "line " + std::to_string(lineno) + ": malformed section header");
      section = Trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    FSD_CHECK(eq != std::string::npos, ErrorKind::kConfig, "line " + std::to_string(lineno) + ": expected key = value");
    FSD_CHECK(!section.empty(), ErrorKind::kConfig, "line " + std::to_string(lineno) + ": key outside a [section]");
    Assign(c, section + "." + Trim(std::string_view(line).substr(0, eq)), Trim(std::string_view(line).substr(eq + 1)));
  }
  c.Validate();
  return c;
}

ExperimentConfig ExperimentConfig::Load(const std::filesystem::path& path) {
  try {
    return Parse(io::ReadFile(path));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kIo) throw;
    Fail(e.kind(), path.string() + ": " + e.what());
  }
}

void ExperimentConfig::Set(std::string_view assignment) {
  const auto eq = assignment.find('=');
  FSD_CHECK(eq != std::string_view::npos, ErrorKind::kConfig,
            "override must look like section.key=value: " + std::string(assignment));
  Assign(*this, Trim(assignment.substr(0, eq)), Trim(assignment.substr(eq + 1)));
}

std::string ExperimentConfig::ToText() const {
  ExperimentConfig copy = *this;
  std::string out, section;
  for (const auto& [name, field] : Fields(copy)) {
    const auto dot = name.find('.');
    const std::string s = name.substr(0, dot);
    if (s != section) {
      out += (out.empty() ? "[" : "\n[") + s + "]\n";
      section = s;
    }
    out += name.substr(dot + 1) + " = " + field.get + "\n";
  }
  return out;
}

std::string ExperimentConfig::Hash() const { return HashBytes(ToText()); }

void ExperimentConfig::Validate() const {
  auto need = [](bool ok, const std::string& what) { FSD_CHECK(ok, ErrorKind::kConfig, what); };
  need(train_scenes > 0, "data.train_scenes must be positive");
  need(val_scenes > 0, "data.val_scenes must be positive");
  world.Validate();
  raster.Validate();
  need(codebook_k > 0 && codebook_k <= codec::kDefaultCapacity, "codec.k must be in 1..=512");
  model::ModelConfig m = model;
  m.vocab_size = codec::Vocab(codebook_k).size();
  m.Validate();
  for (const auto* t : {&stage1, &stage2}) {
    need(t->steps >= 0, "stage.steps must be non-negative");
    need(t->batch_size > 0, "stage.batch_size must be positive");
    need(t->hyper.lr >= 0.0, "stage.lr must be non-negative");
    need(t->log_every > 0, "stage.log_every must be positive");
  }
  mixture.Weights(curriculum::Stage::kPretrain);
  mixture.Weights(curriculum::Stage::kFinetune);
  need(eval_episodes > 0 && eval_episodes <= val_scenes, "eval.episodes must be in 1..=data.val_scenes");
  need(!eval_times.empty(), "eval.times must not be empty");
  for (int t : eval_times) {
    need(t >= curriculum::kFirstT && t <= curriculum::kLastT, "eval.times entries must be in 1..=10");
  }
  need(jobs >= 1, "run.jobs must be at least 1");
}

void RunManifest::Append(std::string_view command, std::string_view fields_json) const {
  nlohmann::ordered_json j;
  j["seq"] = Lines().size();
  j["command"] = command;
  j["tool_version"] = kToolVersion;
  const auto fields = nlohmann::ordered_json::parse(fields_json);
  for (const auto& [k, v] : fields.items()) j[k] = v;
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  std::ofstream out(path_, std::ios::app | std::ios::binary);
  FSD_CHECK(out.good(), ErrorKind::kIo, "cannot append to " + path_.string());
  out << j.dump() << "\n";
  out.flush();
  FSD_CHECK(out.good(), ErrorKind::kIo, "short write to " + path_.string());
}

std::vector<std::string> RunManifest::Lines() const {
  std::vector<std::string> lines;
  if (!std::filesystem::exists(path_)) return lines;
  std::stringstream ss(io::ReadFile(path_));
  std::string line;
  while (std::getline(ss, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

}  // namespace fsd::experiment
