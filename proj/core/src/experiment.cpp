// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

#include "fsdrive/experiment.hpp"

#include <atomic>
#include <exception>
#include <iostream>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>

#include "fsdrive/error.hpp"
#include "fsdrive/hash.hpp"
#include "fsdrive/io.hpp"

namespace fsd::experiment {

using curriculum::CotVariant;
using curriculum::Stage;
using curriculum::Task;
using json = nlohmann::ordered_json;

namespace {
std::atomic<bool> g_verbose{false};

void Info(const std::string& msg) {
  if (g_verbose) std::cerr << "[fsdrive] " << msg << "\n";
}
}  // namespace

void SetVerbose(bool on) { g_verbose = on; }

void ParallelFor(int n, int jobs, const std::function<void(int)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> workers;
  for (int w = 0; w < std::min(jobs, n); ++w) {
    workers.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------

uint64_t EpisodeSeed(uint64_t data_seed, bool validation, int index) {
  return MixSeed(MixSeed(data_seed, validation ? 2 : 1), static_cast<uint64_t>(index));
}

Dataset GenerateDataset(const world::WorldConfig& world, int train_scenes, int val_scenes, uint64_t seed, int jobs) {
  world.Validate();
  Dataset d;
  d.train.resize(train_scenes);
  d.val.resize(val_scenes);
  ParallelFor(train_scenes, jobs, [&](int i) { d.train[i] = world::GenerateScene(EpisodeSeed(seed, false, i), world); });
  ParallelFor(val_scenes, jobs, [&](int i) { d.val[i] = world::GenerateScene(EpisodeSeed(seed, true, i), world); });
  return d;
}

void WriteEpisodes(const fs::path& path, const std::vector<world::ScenarioEpisode>& episodes) {
  std::string out;
  for (const auto& ep : episodes) out += world::EpisodeToJsonLine(ep) + "\n";
  io::WriteFileAtomic(path, out);
}

std::vector<world::ScenarioEpisode> ReadEpisodes(const fs::path& path) {
  std::vector<world::ScenarioEpisode> eps;
  std::stringstream ss(io::ReadFile(path));
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      eps.push_back(world::EpisodeFromJsonLine(line));
    } catch (const Error& e) {
      Fail(ErrorKind::kDecode, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return eps;
}

codec::Codebook CodebookFromEpisodes(const std::vector<world::ScenarioEpisode>& episodes,
                                     const raster::RasterConfig& raster, int capacity) {
  codec::Codebook cb(capacity);
  auto add = [&](const raster::Frame& f) {
    for (int r = 0; r < codec::kGridRows; ++r) {
      for (int c = 0; c < codec::kGridCols; ++c) {
        if (cb.size() >= capacity) return;
        cb.Add(codec::ExtractPatch(f, r, c));
      }
    }
  };
  for (const auto& ep : episodes) {
    for (int t = curriculum::kFirstT; t <= curriculum::kLastT; ++t) {
      for (const auto& f : curriculum::ObservationFrames(ep, t, raster)) add(f);
      add(curriculum::FutureFrame(ep, t, raster));
      add(curriculum::LanePriorFrame(ep, t, raster));
      add(curriculum::BoxPriorFrame(ep, t, raster));
      add(curriculum::UnifiedCotFrame(ep, t, raster));
    }
  }
  return cb;
}

Codec::Codec(codec::Codebook cb, codec::Vocab v, const raster::RasterConfig& raster)
    : codebook(std::move(cb)), vocab(std::move(v)), tok{codebook, vocab, {}, raster} {}

std::unique_ptr<Codec> LoadCodec(const DataPaths& paths, const raster::RasterConfig& raster) {
  auto cb = codec::Codebook::Deserialize(io::ReadFile(paths.codebook()));
  auto vocab = codec::Vocab::FromJson(io::ReadFile(paths.vocab()));
  FSD_CHECK(vocab.image_capacity() == cb.capacity(), ErrorKind::kCompatibility,
            "vocab image range does not match the codebook capacity");
  return std::make_unique<Codec>(std::move(cb), std::move(vocab), raster);
}

namespace {

// Hash of every field that shapes the episode files.
std::string DataKey(const ExperimentConfig& cfg) {
  std::string text = "scenes " + std::to_string(cfg.train_scenes) + " " + std::to_string(cfg.val_scenes) +
                     "\nseed " + std::to_string(cfg.data_seed) + "\n";
  std::stringstream ss(cfg.ToText());
  std::string line, section;
  while (std::getline(ss, line)) {
    if (!line.empty() && line.front() == '[') section = line;
    if (section == "[world]" || section == "[raster]") text += line + "\n";
  }
  return HashBytes(text);
}

}  // namespace

void GenerateData(const ExperimentConfig& cfg, const DataPaths& paths, const RunManifest* manifest) {
  Info("generating " + std::to_string(cfg.train_scenes) + " train / " + std::to_string(cfg.val_scenes) +
       " val episodes");
  const Dataset d = GenerateDataset(cfg.world, cfg.train_scenes, cfg.val_scenes, cfg.data_seed, cfg.jobs);
  WriteEpisodes(paths.train(), d.train);
  WriteEpisodes(paths.val(), d.val);
  json j;
  j["data_key"] = DataKey(cfg);
  j["train_scenes"] = cfg.train_scenes;
  j["val_scenes"] = cfg.val_scenes;
  j["data_seed"] = cfg.data_seed;
  j["train_hash"] = HashBytes(io::ReadFile(paths.train()));
  j["val_hash"] = HashBytes(io::ReadFile(paths.val()));
  io::WriteFileAtomic(paths.meta(), j.dump(2) + "\n");
  if (manifest) manifest->Append("gen-data", j.dump());
}

void BuildCodecFiles(const DataPaths& paths, const raster::RasterConfig& raster, int k, const RunManifest* manifest) {
  const auto train = ReadEpisodes(paths.train());
  const auto cb = CodebookFromEpisodes(train, raster, k);
  const codec::Vocab vocab(k);
  io::WriteFileAtomic(paths.codebook(), cb.Serialize());
  io::WriteFileAtomic(paths.vocab(), vocab.ToJson());
  Info("codebook holds " + std::to_string(cb.size()) + " patches");
  if (manifest) {
    json j;
    j["k"] = k;
    j["entries"] = cb.size();
    j["codebook_hash"] = cb.Hash();
    j["vocab_hash"] = vocab.Hash();
    manifest->Append("build-codebook", j.dump());
  }
}

void PrepareData(const ExperimentConfig& cfg, const DataPaths& paths, const RunManifest* manifest) {
  if (fs::exists(paths.meta())) {
    const auto j = json::parse(io::ReadFile(paths.meta()));
    FSD_CHECK(j.at("data_key").get<std::string>() == DataKey(cfg), ErrorKind::kConfig,
              "data directory " + paths.dir.string() + " was built from a different data/world config");
  } else {
    GenerateData(cfg, paths, manifest);
  }
  if (!fs::exists(paths.codebook()) || !fs::exists(paths.vocab())) {
    BuildCodecFiles(paths, cfg.raster, cfg.codebook_k, manifest);
  }
  const auto vocab = codec::Vocab::FromJson(io::ReadFile(paths.vocab()));
  FSD_CHECK(vocab.image_capacity() == cfg.codebook_k, ErrorKind::kConfig,
            "codec.k = " + std::to_string(cfg.codebook_k) + " but " + paths.vocab().string() + " was built with " +
                std::to_string(vocab.image_capacity()));
}

Dataset LoadDataset(const DataPaths& paths) { return {ReadEpisodes(paths.train()), ReadEpisodes(paths.val())}; }

// ---------------------------------------------------------------------------

model::ModelConfig ModelFor(const ExperimentConfig& cfg, const Codec& codec) {
  model::ModelConfig m = cfg.model;
  m.vocab_size = codec.vocab.size();
  m.Validate();
  return m;
}

model::Checkpoint LoadCheckpoint(const fs::path& path) {
  try {
    return model::DeserializeCheckpoint(io::ReadFile(path));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kIo) throw;
    Fail(e.kind(), path.string() + ": " + e.what());
  }
}

namespace {

constexpr int kShardRecords = 4096;

const char* StageName(Stage s) { return s == Stage::kPretrain ? "pretrain" : "finetune"; }

}  // namespace

TrainSummary Train(const ExperimentConfig& cfg, const Dataset& data, const Codec& codec, const TrainRequest& req,
                   const RunManifest* manifest) {
  const TrainSpec& spec = req.stage == Stage::kPretrain ? cfg.stage1 : cfg.stage2;
  const model::ModelConfig mcfg = ModelFor(cfg, codec);

  // Parameters: fresh or continued from the stage-1 checkpoint.
  std::string init_hash = "scratch";
  std::optional<model::Params<float>> loaded;
  if (req.init) {
    auto ck = LoadCheckpoint(*req.init);
    planner::CheckCompatibility(ck.meta, codec.codebook, codec.vocab);
    FSD_CHECK(ck.params.config == mcfg, ErrorKind::kCompatibility,
              "init checkpoint model config differs from the experiment config");
    init_hash = HashBytes(io::ReadFile(*req.init));
    loaded.emplace(std::move(ck.params));
  }
  model::Params<float> params = loaded ? std::move(*loaded)
                                       : model::InitParams<float>(mcfg, MixSeed(cfg.train_seed, 7));

  // Materialize the sequence stream into shards, then train from them.
  const uint64_t stream_seed = MixSeed(cfg.train_seed, 100 + static_cast<int>(req.stage));
  curriculum::MixtureStream stream(req.stage, cfg.mixture, data.train, codec.tok, stream_seed);
  const int64_t total = spec.steps * spec.batch_size;
  std::vector<curriculum::PackedRecord> records;
  records.reserve(static_cast<size_t>(total));
  for (int64_t i = 0; i < total; ++i) {
    auto s = stream.Next();
    records.push_back({s.task, std::move(s.tokens), std::move(s.target)});
  }
  TrainSummary summary;
  const std::string stem = req.out.stem().string();
  fs::create_directories(req.shard_dir);
  for (size_t b = 0, idx = 0; b < records.size(); b += kShardRecords, ++idx) {
    const std::vector<curriculum::PackedRecord> part(records.begin() + static_cast<std::ptrdiff_t>(b),
                                                     records.begin() + static_cast<std::ptrdiff_t>(
                                                                           std::min(records.size(), b + kShardRecords)));
    const std::string bytes = curriculum::SerializeShard(part);
    char name[32];
    std::snprintf(name, sizeof(name), "-%05zu.fssq", idx);
    io::WriteFileAtomic(req.shard_dir / (stem + name), bytes);
    summary.shard_hashes.push_back(HashBytes(bytes));
  }

  model::AdamState opt = model::AdamState::For(params);
  model::Hyper hyper = spec.hyper;
  hyper.total_steps = spec.steps;
  const int pad = codec.vocab.Token(codec::Special::kPad);
  json log_lines = json::array();
  double window = 0.0;
  int window_n = 0;
  for (int64_t step = 0; step < spec.steps; ++step) {
    std::vector<std::vector<int>> toks;
    std::vector<std::vector<uint8_t>> flags;
    for (int b = 0; b < spec.batch_size; ++b) {
      const auto& r = records[static_cast<size_t>(step * spec.batch_size + b)];
      toks.push_back(r.tokens);
      flags.push_back(r.target);
    }
    const auto res = model::TrainStep(params, opt, model::MakeBatch(toks, flags, pad), hyper);
    if (step == 0) summary.first_loss = res.loss;
    window += res.loss;
    ++window_n;
    if ((step + 1) % spec.log_every == 0 || step + 1 == spec.steps) {
      summary.final_loss = window / window_n;
      log_lines.push_back({{"step", step + 1}, {"loss", summary.final_loss}, {"lr", res.lr},
                           {"grad_norm", res.grad_norm}});
      Info(std::string(StageName(req.stage)) + " step " + std::to_string(step + 1) + "/" +
                std::to_string(spec.steps) + " loss " + std::to_string(summary.final_loss));
      window = 0.0;
      window_n = 0;
    }
  }
  summary.steps = spec.steps;

  model::Checkpoint ck{std::move(params), {}, std::nullopt};
  ck.meta.vocab_hash = codec.vocab.Hash();
  ck.meta.codebook_hash = codec.codebook.Hash();
  ck.meta.step = spec.steps;
  ck.meta.stage = StageName(req.stage);
  ck.meta.rng_state = stream_seed;
  json extra;
  extra["config_hash"] = cfg.Hash();
  extra["init"] = init_hash;
  extra["variant"] = curriculum::CotVariantName(cfg.mixture.cot_variant);
  extra["ego_status"] = cfg.mixture.ego_status;
  extra["mixture"] = json::parse(cfg.mixture.ToJson());
  extra["shards"] = summary.shard_hashes;
  ck.meta.extra_json = extra.dump();
  const std::string bytes = model::SerializeCheckpoint(ck);
  io::WriteFileAtomic(req.out, bytes);
  io::WriteFileAtomic(fs::path(req.out).concat(".log.jsonl"), [&] {
    std::string s;
    for (const auto& l : log_lines) s += l.dump() + "\n";
    return s;
  }());
  summary.checkpoint = req.out;
  summary.checkpoint_hash = HashBytes(bytes);

  if (manifest) {
    json m;
    m["stage"] = StageName(req.stage);
    m["config_hash"] = cfg.Hash();
    m["checkpoint"] = req.out.string();
    m["checkpoint_hash"] = summary.checkpoint_hash;
    m["init"] = init_hash;
    m["shards"] = summary.shard_hashes;
    m["codebook_hash"] = codec.codebook.Hash();
    m["vocab_hash"] = codec.vocab.Hash();
    m["steps"] = spec.steps;
    m["first_loss"] = summary.first_loss;
    m["final_loss"] = summary.final_loss;
    manifest->Append("train", m.dump());
  }
  return summary;
}

// ---------------------------------------------------------------------------

namespace {

struct SampleIndex {
  int episode;
  int t;
};

std::vector<SampleIndex> EvalSamples(const ExperimentConfig& cfg, const std::vector<world::ScenarioEpisode>& eps) {
  const int n = std::min<int>(cfg.eval_episodes, static_cast<int>(eps.size()));
  FSD_CHECK(n > 0, ErrorKind::kDegenerate, "no evaluation episodes");
  std::vector<SampleIndex> out;
  for (int e = 0; e < n; ++e) {
    for (int t : cfg.eval_times) out.push_back({e, t});
  }
  return out;
}

// Number of emitted tokens outside the grammar of their slot.
int GrammarViolations(const planner::PlanResult& p, const Codec& codec) {
  int bad = 0;
  const auto img = planner::ImageRange(codec.tok);
  for (int t : p.cot_tokens) bad += img.Contains(t) ? 0 : 1;
  if (p.waypoint_tokens.size() != 2u * world::kHorizon) return bad + 1;
  for (size_t i = 0; i < p.waypoint_tokens.size(); ++i) {
    const auto& r = i % 2 == 0 ? codec.vocab.wpx() : codec.vocab.wpy();
    bad += r.Contains(p.waypoint_tokens[i]) ? 0 : 1;
  }
  return bad;
}

}  // namespace

EvalOutput Evaluate(const ExperimentConfig& cfg, const model::Params<float>& params, const Codec& codec,
                    const std::vector<world::ScenarioEpisode>& episodes, const EvalOptions& options) {
  const auto samples = EvalSamples(cfg, episodes);
  const int n = static_cast<int>(samples.size());
  EvalOutput out;
  out.rows.resize(n);
  out.plans.resize(n);
  std::vector<int> violations(n, 0);
  ParallelFor(n, cfg.jobs, [&](int i) {
    const auto& ep = episodes[samples[i].episode];
    const int t = samples[i].t;
    planner::PlanRequest req;
    req.episode = &ep;
    req.t = t;
    req.ego_status = options.ego_status;
    req.variant = options.variant;
    req.mode = model::DecodeMode::kGreedy;
    req.seed = MixSeed(cfg.sample_seed, static_cast<uint64_t>(i));
    req.teacher_forced_cot = options.teacher_forced_cot;
    try {
      out.plans[i] = planner::Plan(params, codec.tok, req);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kGrammar) throw;
      violations[i] = 1;
      return;
    }
    violations[i] = GrammarViolations(out.plans[i], codec);
    const auto gt = world::EgoFutureTrajectory(ep, t);
    out.rows[i].distances = metrics::WaypointDistances(out.plans[i].trajectory, gt);
    out.rows[i].collision = world::CheckCollision(ep, out.plans[i].trajectory, t);
    out.rows[i].clamped = out.plans[i].clamped;
  });
  for (int v : violations) out.grammar_errors += v;

  for (int i = 0; i < n; ++i) {
    if (!out.plans[i].cot_frame) continue;
    out.cot_frames.push_back(*out.plans[i].cot_frame);
    out.gt_frames.push_back(curriculum::UnifiedCotFrame(episodes[samples[i].episode], samples[i].t, cfg.raster));
  }
  out.report = metrics::Aggregate(out.rows);
  out.report.variant = curriculum::CotVariantName(options.variant);
  out.report.config_hash = cfg.Hash();
  if (out.cot_frames.size() >= 2) out.report.ffd = metrics::Ffd(out.cot_frames, out.gt_frames, codec.codebook);
  return out;
}

double EvaluateVqa(const ExperimentConfig& cfg, const model::Params<float>& params, const Codec& codec,
                   const std::vector<world::ScenarioEpisode>& episodes) {
  const auto samples = EvalSamples(cfg, episodes);
  const int n = static_cast<int>(samples.size());
  const auto& v = codec.vocab;
  const int eos = v.Token(codec::Special::kEos);
  constexpr int kMaxAnswer = 24;
  model::ConstraintSchedule schedule;
  schedule.slots.assign(kMaxAnswer, model::Slot{{v.printable(), {eos, eos + 1}}, eos});
  std::vector<std::string> predictions(n), references(n);
  ParallelFor(n, cfg.jobs, [&](int i) {
    const auto& ep = episodes[samples[i].episode];
    const auto qa = curriculum::SynthQa(ep, samples[i].t, MixSeed(cfg.sample_seed, 1000 + static_cast<uint64_t>(i)));
    const auto seq = curriculum::BuildVqaSeq(ep, samples[i].t, qa, codec.tok);
    const auto* answer = seq.Find(curriculum::Role::kAnswer);
    const std::vector<int> prompt(seq.tokens.begin(), seq.tokens.begin() + answer->begin);
    auto gen = model::Sample(params, prompt, schedule, {});
    if (!gen.empty() && gen.back() == eos) gen.pop_back();
    predictions[i] = v.DecodeText(gen);
    references[i] = qa.answer;
  });
  return metrics::VqaAccuracy(predictions, references);
}

GenerateOutput GenerateFutures(const ExperimentConfig& cfg, const model::Params<float>& params, const Codec& codec,
                               const std::vector<world::ScenarioEpisode>& episodes, Task task) {
  const auto samples = EvalSamples(cfg, episodes);
  const int n = static_cast<int>(samples.size());
  GenerateOutput out;
  out.generated.resize(n);
  out.reference.resize(n);
  ParallelFor(n, cfg.jobs, [&](int i) {
    const auto& ep = episodes[samples[i].episode];
    model::SampleOptions o;
    o.seed = MixSeed(cfg.sample_seed, static_cast<uint64_t>(i));
    out.generated[i] = planner::GenerateFrames(params, codec.tok, ep, samples[i].t, task, o).future;
    out.reference[i] = curriculum::FutureFrame(ep, samples[i].t, cfg.raster);
  });
  out.ffd = metrics::Ffd(out.generated, out.reference, codec.codebook);
  return out;
}

std::string ReportSvg(const metrics::MetricsReport& r) {
  struct Group {
    const char* title;
    const metrics::Triple* triple;
  };
  const Group groups[] = {{"L2 uniad (m)", &r.l2_uniad},
                          {"L2 stp3 (m)", &r.l2_stp3},
                          {"collision uniad (%)", &r.collision.uniad},
                          {"collision stp3 (%)", &r.collision.stp3}};
  const int w = 180, h = 160, pad = 30;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << 4 * w << "\" height=\"" << h + 40
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<text x=\"8\" y=\"16\">variant " << r.variant << ", n=" << r.n_samples << "</text>\n";
  const char* labels[] = {"1s", "2s", "3s", "avg"};
  for (int g = 0; g < 4; ++g) {
    const double vals[] = {groups[g].triple->at1s, groups[g].triple->at2s, groups[g].triple->at3s,
                           groups[g].triple->avg};
    double vmax = 1e-9;
    for (double v : vals) vmax = std::max(vmax, v);
    const int x0 = g * w + pad;
    s << "<text x=\"" << x0 << "\" y=\"36\">" << groups[g].title << "</text>\n";
    for (int k = 0; k < 4; ++k) {
      const double bh = (h - 60) * vals[k] / vmax;
      const double x = x0 + k * 34, y = h - bh;
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.2f", vals[k]);
      s << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"26\" height=\"" << bh << "\" fill=\""
        << (k == 3 ? "#444" : "#3a78c2") << "\"/>\n";
      s << "<text x=\"" << x << "\" y=\"" << y - 3 << "\">" << buf << "</text>\n";
      s << "<text x=\"" << x + 5 << "\" y=\"" << h + 14 << "\">" << labels[k] << "</text>\n";
    }
  }
  s << "</svg>\n";
  return s.str();
}

// ---------------------------------------------------------------------------

Suite SuiteFromName(std::string_view name) {
  if (name == "pretrain") return Suite::kPretrain;
  if (name == "cot") return Suite::kCot;
  if (name == "progressive") return Suite::kProgressive;
  Fail(ErrorKind::kUsage, "unknown suite '" + std::string(name) + "' (pretrain|cot|progressive)");
}

namespace {

// Config text with the sections irrelevant to a stage blanked, so that
// checkpoints can be shared between experiments that only differ there.
std::string StageKey(const ExperimentConfig& cfg, Stage stage) {
  ExperimentConfig c = cfg;
  const ExperimentConfig defaults;
  c.eval_episodes = defaults.eval_episodes;
  c.eval_times = defaults.eval_times;
  c.eval_vqa = defaults.eval_vqa;
  c.out_dir = defaults.out_dir;
  c.jobs = defaults.jobs;
  c.sample_seed = defaults.sample_seed;
  if (stage == Stage::kPretrain) {
    c.stage2 = defaults.stage2;
    c.mixture.stage2 = defaults.mixture.stage2;
    c.mixture.cot_variant = defaults.mixture.cot_variant;
    c.mixture.ego_status = defaults.mixture.ego_status;
    c.mixture.future_aux = defaults.mixture.future_aux;
    c.mixture.future_aux_weight = defaults.mixture.future_aux_weight;
    c.mixture.enabled[static_cast<int>(Task::kPlan)] = true;
  }
  return HashBytes(c.ToText());
}

bool ReusableCheckpoint(const fs::path& path, const std::string& key) {
  if (!fs::exists(path)) return false;
  try {
    const auto ck = LoadCheckpoint(path);
    const auto extra = json::parse(ck.meta.extra_json);
    return extra.contains("stage_key") && extra.at("stage_key").get<std::string>() == key;
  } catch (const Error&) {
    return false;
  }
}

// Rewrites the checkpoint with the reuse key in its provenance block.
void StampKey(const fs::path& path, const std::string& key) {
  auto ck = LoadCheckpoint(path);
  auto extra = json::parse(ck.meta.extra_json);
  extra["stage_key"] = key;
  ck.meta.extra_json = extra.dump();
  io::WriteFileAtomic(path, model::SerializeCheckpoint(ck));
}

fs::path Ensure(const ExperimentConfig& cfg, const Dataset& data, const Codec& codec, Stage stage,
                const std::optional<fs::path>& init, const RunManifest* manifest) {
  std::string key = StageKey(cfg, stage);
  if (stage == Stage::kFinetune) key = HashBytes(key + (init ? HashBytes(io::ReadFile(*init)) : "scratch"));
  const fs::path dir = fs::path(cfg.out_dir) / "ckpt";
  const fs::path path = dir / ((stage == Stage::kPretrain ? "stage1-" : "stage2-") + key + ".fsdk");
  if (ReusableCheckpoint(path, key)) {
    Info("reusing " + path.string());
    return path;
  }
  TrainRequest req;
  req.stage = stage;
  req.init = init;
  req.out = path;
  req.shard_dir = fs::path(cfg.out_dir) / "shards";
  Train(cfg, data, codec, req, manifest);
  StampKey(path, key);
  return path;
}

std::string SplitHash(const std::vector<world::ScenarioEpisode>& eps, int n) {
  std::string seeds;
  for (int i = 0; i < n && i < static_cast<int>(eps.size()); ++i) seeds += std::to_string(eps[i].seed) + ",";
  return HashBytes(seeds);
}

}  // namespace

fs::path EnsurePretrained(const ExperimentConfig& cfg, const Dataset& data, const Codec& codec,
                          const RunManifest* manifest) {
  return Ensure(cfg, data, codec, Stage::kPretrain, std::nullopt, manifest);
}

fs::path EnsureFinetuned(const ExperimentConfig& cfg, const Dataset& data, const Codec& codec,
                         const std::optional<fs::path>& init, const RunManifest* manifest) {
  return Ensure(cfg, data, codec, Stage::kFinetune, init, manifest);
}

ArmResult EvaluateArm(const ExperimentConfig& cfg, const Dataset& data, const Codec& codec, const std::string& name,
                      const fs::path& checkpoint, const RunManifest* manifest) {
  const auto ck = LoadCheckpoint(checkpoint);
  planner::CheckCompatibility(ck.meta, codec.codebook, codec.vocab);
  EvalOptions o;
  o.variant = cfg.mixture.cot_variant;
  o.ego_status = cfg.mixture.ego_status;
  auto ev = Evaluate(cfg, ck.params, codec, data.val, o);
  if (cfg.eval_vqa) ev.report.vqa_acc = EvaluateVqa(cfg, ck.params, codec, data.val);
  ArmResult arm;
  arm.name = name;
  arm.checkpoint = checkpoint;
  arm.report = ev.report;
  arm.report_path = fs::path(cfg.out_dir) / "reports" / (name + ".json");
  io::WriteFileAtomic(arm.report_path, arm.report.ToJson() + "\n");
  if (manifest) {
    json m;
    m["arm"] = name;
    m["checkpoint_hash"] = HashBytes(io::ReadFile(checkpoint));
    m["report"] = arm.report_path.string();
    m["report_hash"] = HashBytes(io::ReadFile(arm.report_path));
    m["split_hash"] = SplitHash(data.val, cfg.eval_episodes);
    m["eval_times"] = cfg.eval_times;
    m["sample_seed"] = cfg.sample_seed;
    m["train_seed"] = cfg.train_seed;
    m["grammar_errors"] = ev.grammar_errors;
    manifest->Append("eval", m.dump());
  }
  return arm;
}

SuiteResult RunSuite(Suite suite, const ExperimentConfig& cfg, const RunManifest* manifest) {
  const DataPaths paths{fs::path(cfg.out_dir) / "data"};
  PrepareData(cfg, paths, manifest);
  const Dataset data = LoadDataset(paths);
  const auto codec = LoadCodec(paths, cfg.raster);

  SuiteResult result;
  auto arm = [&](const ExperimentConfig& c, const std::string& name, const std::optional<fs::path>& init) {
    const auto ckpt = EnsureFinetuned(c, data, *codec, init, manifest);
    result.arms.push_back(EvaluateArm(c, data, *codec, name, ckpt, manifest));
  };
  const auto stage1 = [&](const ExperimentConfig& c) { return EnsurePretrained(c, data, *codec, manifest); };

  switch (suite) {
    case Suite::kPretrain:
      arm(cfg, "pretrain-off", std::nullopt);
      arm(cfg, "pretrain-on", stage1(cfg));
      break;
    case Suite::kProgressive: {
      ExperimentConfig off = cfg;
      off.mixture.enabled[static_cast<int>(Task::kProgressive)] = false;
      ExperimentConfig on = cfg;
      on.mixture.enabled[static_cast<int>(Task::kProgressive)] = true;
      arm(off, "progressive-off", stage1(off));
      arm(on, "progressive-on", stage1(on));
      break;
    }
    case Suite::kCot: {
      const auto init = stage1(cfg);
      for (auto v : {CotVariant::kNone, CotVariant::kText, CotVariant::kImgText, CotVariant::kSt}) {
        ExperimentConfig c = cfg;
        c.mixture.cot_variant = v;
        arm(c, std::string("cot-") + curriculum::CotVariantName(v), init);
      }
      break;
    }
  }

  std::ostringstream t;
  t << "| arm | L2 uniad avg | coll uniad avg | L2 stp3 avg | coll stp3 avg | ffd | vqa |\n";
  t << "|---|---|---|---|---|---|---|\n";
  char buf[256];
  for (const auto& a : result.arms) {
    const auto& r = a.report;
    std::snprintf(buf, sizeof(buf), "| %s | %.2f | %.2f | %.2f | %.2f | %s | %s |\n", a.name.c_str(), r.l2_uniad.avg,
                  r.collision.uniad.avg, r.l2_stp3.avg, r.collision.stp3.avg,
                  r.ffd ? std::to_string(*r.ffd).c_str() : "-",
                  r.vqa_acc ? std::to_string(*r.vqa_acc).c_str() : "-");
    t << buf;
  }
  result.table = t.str();
  const char* suite_name = suite == Suite::kPretrain ? "pretrain" : suite == Suite::kCot ? "cot" : "progressive";
  io::WriteFileAtomic(fs::path(cfg.out_dir) / "reports" / (std::string(suite_name) + "-table.md"), result.table);
  return result;
}

// ---------------------------------------------------------------------------

GradcheckResult RunGradcheck(uint64_t seed) {
  model::ModelConfig c;
  c.vocab_size = 11;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.ffn_mult = 4;
  c.context_len = 6;
  auto p = model::InitParams<double>(c, seed, 0.5);
  Rng rng(MixSeed(seed, 1));
  for (const auto& s : p.layout.slots) {
    if (s.rows != 1) continue;  // perturb norm gains and biases away from their init
    for (size_t i = 0; i < s.size(); ++i) p.data[s.offset + i] += 0.3 * rng.Normal();
  }
  const std::vector<std::vector<int>> seqs = {{1, 4, 2, 9, 3, 0}, {7, 7, 5, 10}};
  const std::vector<std::vector<uint8_t>> flags = {{0, 1, 1, 0, 1, 1}, {0, 0, 1, 1}};
  const auto batch = model::MakeBatch(seqs, flags, 0);
  std::vector<double> grads;
  model::LossAndGrad(p, batch, grads);

  constexpr double kEps = 1e-4;
  GradcheckResult r;
  for (const auto& slot : p.layout.slots) {
    double worst = 0.0;
    for (size_t i = slot.offset; i < slot.offset + slot.size(); ++i) {
      const double saved = p.data[i];
      p.data[i] = saved + kEps;
      const double up = model::BatchLoss(p, batch);
      p.data[i] = saved - kEps;
      const double down = model::BatchLoss(p, batch);
      p.data[i] = saved;
      const double fd = (up - down) / (2 * kEps);
      const double denom = std::max({std::abs(fd), std::abs(grads[i]), 1e-6});
      worst = std::max(worst, std::abs(fd - grads[i]) / denom);
    }
    r.per_group.emplace_back(slot.name, worst);
    if (worst >= r.max_rel_error) {
      r.max_rel_error = worst;
      r.worst_tensor = slot.name;
    }
  }
  return r;
}

}  // namespace fsd::experiment
