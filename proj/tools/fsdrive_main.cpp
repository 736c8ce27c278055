// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

// fsdrive command-line entry point.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "fsdrive/error.hpp"
#include "fsdrive/experiment.hpp"
#include "fsdrive/hash.hpp"
#include "fsdrive/io.hpp"

namespace {

using namespace fsd;
using namespace fsd::experiment;
using json = nlohmann::ordered_json;

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

int ExitCodeFor(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kUsage: return kExitUsage;
    case ErrorKind::kNumeric:
    case ErrorKind::kDegenerate: return kExitNumeric;
    default: return kExitData;
  }
}

void PrintError(const std::string& kind, const std::string& message) {
  json j;
  j["error"] = kind;
  j["message"] = message;
  std::cerr << j.dump() << "\n";
}

// Options shared by every config-driven command.
struct ConfigArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string data;
  int jobs = 0;
  bool quiet = false;

  void Attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "experiment config file");
    cmd->add_option("--set", overrides, "override one field, e.g. --set stage1.steps=100");
    cmd->add_option("--data", data, "data directory (default: <run.out_dir>/data)");
    cmd->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
    cmd->add_flag("--quiet", quiet, "suppress progress output");
  }

  ExperimentConfig Load() const {
    ExperimentConfig cfg = config.empty() ? ExperimentConfig() : ExperimentConfig::Load(config);
    for (const auto& o : overrides) cfg.Set(o);
    if (jobs > 0) cfg.jobs = jobs;
    cfg.Validate();
    SetVerbose(!quiet);
    return cfg;
  }

  DataPaths Paths(const ExperimentConfig& cfg) const {
    return {data.empty() ? fs::path(cfg.out_dir) / "data" : fs::path(data)};
  }
};

RunManifest ManifestIn(const fs::path& dir) {
  fs::create_directories(dir);
  return RunManifest(dir / "manifest.jsonl");
}

void RecordInvocation(const RunManifest& m, const std::string& command, const ConfigArgs& args,
                      const ExperimentConfig& cfg, int argc, char** argv) {
  json j;
  j["argv"] = std::vector<std::string>(argv, argv + argc);
  j["config_file"] = args.config;
  j["overrides"] = args.overrides;
  j["config_hash"] = cfg.Hash();
  j["config"] = cfg.ToText();
  m.Append(command, j.dump());
}

curriculum::CotVariant VariantOr(const std::string& name, curriculum::CotVariant fallback) {
  return name.empty() ? fallback : curriculum::CotVariantFromName(name);
}

std::optional<bool> EgoFlag(const std::string& v) {
  if (v.empty()) return std::nullopt;
  return v == "on";
}

const std::vector<world::ScenarioEpisode>& Split(const Dataset& d, const std::string& split) {
  return split == "train" ? d.train : d.val;
}

int Run(int argc, char** argv) {
  CLI::App app{"fsdrive: visual chain-of-thought driving planner on a synthetic world"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  // gen-data -----------------------------------------------------------------
  ConfigArgs gen_args;
  int scenes = -1, val_scenes = -1;
  int64_t seed = -1;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "generate train/val episode files");
  gen_args.Attach(gen);
  gen->add_option("--scenes", scenes, "training episodes")->check(CLI::PositiveNumber);
  gen->add_option("--val-scenes", val_scenes, "validation episodes")->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", seed, "data seed")->check(CLI::NonNegativeNumber);
  gen->add_option("--out", gen_out, "output directory")->required();

  // build-codebook -----------------------------------------------------------
  ConfigArgs cb_args;
  int k = -1;
  auto* cb = app.add_subcommand("build-codebook", "build the patch codebook and vocab from training episodes");
  cb_args.Attach(cb);
  cb->add_option("--k", k, "codebook capacity")->check(CLI::PositiveNumber);

  // pretrain / finetune ------------------------------------------------------
  ConfigArgs pre_args, ft_args;
  std::string pre_out, ft_out, ft_init, ft_variant, ft_ego;
  auto* pre = app.add_subcommand("pretrain", "stage-1 unified pre-training");
  pre_args.Attach(pre);
  pre->add_option("--out", pre_out, "checkpoint path (default: <run.out_dir>/ckpt/stage1.fsdk)");
  auto* ft = app.add_subcommand("finetune", "stage-2 planning fine-tuning");
  ft_args.Attach(ft);
  ft->add_option("--init", ft_init, "stage-1 checkpoint, or 'none' to start from scratch")->required();
  ft->add_option("--out", ft_out, "checkpoint path (default: <run.out_dir>/ckpt/stage2.fsdk)");
  ft->add_option("--variant", ft_variant, "CoT variant")->check(CLI::IsMember({"none", "text", "imgtxt", "st"}));
  ft->add_option("--ego", ft_ego, "ego status tokens")->check(CLI::IsMember({"on", "off"}));

  // generate -----------------------------------------------------------------
  ConfigArgs gen_frames_args;
  std::string gf_task = "future", gf_ckpt, gf_out, gf_split = "val";
  auto* gf = app.add_subcommand("generate", "generate future frames and score them against ground truth");
  gen_frames_args.Attach(gf);
  gf->add_option("--task", gf_task, "future|progressive")->check(CLI::IsMember({"future", "progressive"}));
  gf->add_option("--ckpt", gf_ckpt, "checkpoint")->required();
  gf->add_option("--out", gf_out, "output directory for PPM frames")->required();
  gf->add_option("--split", gf_split, "train|val")->check(CLI::IsMember({"train", "val"}));

  // plan ---------------------------------------------------------------------
  ConfigArgs plan_args;
  std::string plan_ckpt, plan_variant, plan_ego, plan_split = "val", plan_ppm;
  int plan_episode = 0, plan_t = 5;
  auto* plan = app.add_subcommand("plan", "plan one episode and print the result as JSON");
  plan_args.Attach(plan);
  plan->add_option("--ckpt", plan_ckpt, "checkpoint")->required();
  plan->add_option("--episode", plan_episode, "episode index in the split")->check(CLI::NonNegativeNumber);
  plan->add_option("--t", plan_t, "planning time index");
  plan->add_option("--variant", plan_variant, "CoT variant")->check(CLI::IsMember({"none", "text", "imgtxt", "st"}));
  plan->add_option("--ego", plan_ego, "ego status tokens")->check(CLI::IsMember({"on", "off"}));
  plan->add_option("--split", plan_split, "train|val")->check(CLI::IsMember({"train", "val"}));
  plan->add_option("--cot-ppm", plan_ppm, "write the generated CoT frame here");

  // eval ---------------------------------------------------------------------
  ConfigArgs eval_args;
  std::string eval_ckpt, eval_variant, eval_ego, eval_split = "val", eval_out, eval_svg;
  bool eval_teacher = false;
  auto* ev = app.add_subcommand("eval", "evaluate a planning checkpoint");
  eval_args.Attach(ev);
  ev->add_option("--ckpt", eval_ckpt, "checkpoint")->required();
  ev->add_option("--split", eval_split, "train|val")->check(CLI::IsMember({"train", "val"}));
  ev->add_option("--variant", eval_variant, "CoT variant")->check(CLI::IsMember({"none", "text", "imgtxt", "st"}));
  ev->add_option("--ego", eval_ego, "ego status tokens")->check(CLI::IsMember({"on", "off"}));
  ev->add_option("--out", eval_out, "report path (default: <run.out_dir>/reports/eval.json)");
  ev->add_option("--svg", eval_svg, "write a bar chart of the report");
  ev->add_flag("--teacher-forced-cot", eval_teacher, "inject the ground-truth CoT span");

  // ablate -------------------------------------------------------------------
  ConfigArgs ab_args;
  std::string suite;
  auto* ab = app.add_subcommand("ablate", "train and evaluate an ablation grid");
  ab_args.Attach(ab);
  ab->add_option("--suite", suite, "pretrain|cot|progressive")
      ->required()
      ->check(CLI::IsMember({"pretrain", "cot", "progressive"}));

  // gradcheck ----------------------------------------------------------------
  int64_t gc_seed = 7;
  double gc_tol = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check on a tiny model");
  gc->add_option("--seed", gc_seed, "parameter seed")->check(CLI::NonNegativeNumber);
  gc->add_option("--tol", gc_tol, "maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    PrintError("usage", e.what());
    return kExitUsage;
  }

  if (gen->parsed()) {
    auto cfg = gen_args.Load();
    if (scenes > 0) cfg.train_scenes = scenes;
    if (val_scenes >= 0) cfg.val_scenes = val_scenes;
    if (seed >= 0) cfg.data_seed = static_cast<uint64_t>(seed);
    if (cfg.eval_episodes > cfg.val_scenes) cfg.eval_episodes = cfg.val_scenes;
    const DataPaths paths{gen_out};
    fs::create_directories(paths.dir);
    const auto m = ManifestIn(paths.dir);
    RecordInvocation(m, "gen-data", gen_args, cfg, argc, argv);
    GenerateData(cfg, paths, &m);
    std::cout << io::ReadFile(paths.meta());
    return 0;
  }

  if (cb->parsed()) {
    auto cfg = cb_args.Load();
    if (k > 0) cfg.codebook_k = k;
    const auto paths = cb_args.Paths(cfg);
    const auto m = ManifestIn(paths.dir);
    RecordInvocation(m, "build-codebook", cb_args, cfg, argc, argv);
    BuildCodecFiles(paths, cfg.raster, cfg.codebook_k, &m);
    return 0;
  }

  if (pre->parsed() || ft->parsed()) {
    const bool stage1 = pre->parsed();
    ConfigArgs& args = stage1 ? pre_args : ft_args;
    auto cfg = args.Load();
    if (!stage1) {
      cfg.mixture.cot_variant = VariantOr(ft_variant, cfg.mixture.cot_variant);
      if (auto e = EgoFlag(ft_ego)) cfg.mixture.ego_status = *e;
    }
    const auto paths = args.Paths(cfg);
    const auto m = ManifestIn(cfg.out_dir);
    RecordInvocation(m, stage1 ? "pretrain" : "finetune", args, cfg, argc, argv);
    PrepareData(cfg, paths, &m);
    const Dataset data = LoadDataset(paths);
    const auto codec = LoadCodec(paths, cfg.raster);
    TrainRequest req;
    req.stage = stage1 ? curriculum::Stage::kPretrain : curriculum::Stage::kFinetune;
    if (!stage1 && ft_init != "none") req.init = fs::path(ft_init);
    const std::string& out = stage1 ? pre_out : ft_out;
    req.out = out.empty() ? fs::path(cfg.out_dir) / "ckpt" / (stage1 ? "stage1.fsdk" : "stage2.fsdk") : fs::path(out);
    req.shard_dir = fs::path(cfg.out_dir) / "shards";
    const auto s = Train(cfg, data, *codec, req, &m);
    json j;
    j["checkpoint"] = s.checkpoint.string();
    j["checkpoint_hash"] = s.checkpoint_hash;
    j["first_loss"] = s.first_loss;
    j["final_loss"] = s.final_loss;
    j["steps"] = s.steps;
    std::cout << j.dump(2) << "\n";
    return 0;
  }

  if (gf->parsed()) {
    auto cfg = gen_frames_args.Load();
    const auto paths = gen_frames_args.Paths(cfg);
    const auto m = ManifestIn(cfg.out_dir);
    RecordInvocation(m, "generate", gen_frames_args, cfg, argc, argv);
    const Dataset data = LoadDataset(paths);
    const auto codec = LoadCodec(paths, cfg.raster);
    const auto ck = LoadCheckpoint(gf_ckpt);
    planner::CheckCompatibility(ck.meta, codec->codebook, codec->vocab);
    const auto task = curriculum::TaskFromName(gf_task);
    const auto out = GenerateFutures(cfg, ck.params, *codec, Split(data, gf_split), task);
    fs::create_directories(gf_out);
    for (size_t i = 0; i < out.generated.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "%04zu", i);
      io::WriteFileAtomic(fs::path(gf_out) / (std::string("gen_") + name + ".ppm"), raster::ExportPpm(out.generated[i]));
      io::WriteFileAtomic(fs::path(gf_out) / (std::string("gt_") + name + ".ppm"), raster::ExportPpm(out.reference[i]));
    }
    json j;
    j["task"] = gf_task;
    j["frames"] = out.generated.size();
    j["ffd"] = out.ffd;
    j["checkpoint_hash"] = HashBytes(io::ReadFile(gf_ckpt));
    io::WriteFileAtomic(fs::path(gf_out) / "ffd.json", j.dump(2) + "\n");
    m.Append("generate-result", j.dump());
    std::cout << j.dump(2) << "\n";
    return 0;
  }

  if (plan->parsed()) {
    auto cfg = plan_args.Load();
    const auto paths = plan_args.Paths(cfg);
    const Dataset data = LoadDataset(paths);
    const auto& eps = Split(data, plan_split);
    FSD_CHECK(plan_episode < static_cast<int>(eps.size()), ErrorKind::kUsage,
              "--episode " + std::to_string(plan_episode) + " out of range (split has " +
                  std::to_string(eps.size()) + ")");
    const auto codec = LoadCodec(paths, cfg.raster);
    const auto ck = LoadCheckpoint(plan_ckpt);
    planner::CheckCompatibility(ck.meta, codec->codebook, codec->vocab);
    planner::PlanRequest req;
    req.episode = &eps[static_cast<size_t>(plan_episode)];
    req.t = plan_t;
    req.variant = VariantOr(plan_variant, cfg.mixture.cot_variant);
    req.ego_status = EgoFlag(plan_ego).value_or(cfg.mixture.ego_status);
    req.seed = cfg.sample_seed;
    const auto result = planner::Plan(ck.params, codec->tok, req);
    if (!plan_ppm.empty() && result.cot_frame) io::WriteFileAtomic(plan_ppm, raster::ExportPpm(*result.cot_frame));
    std::cout << result.ToJson(result.cot_frame ? plan_ppm : "") << "\n";
    return 0;
  }

  if (ev->parsed()) {
    auto cfg = eval_args.Load();
    const auto paths = eval_args.Paths(cfg);
    const auto m = ManifestIn(cfg.out_dir);
    RecordInvocation(m, "eval", eval_args, cfg, argc, argv);
    const Dataset data = LoadDataset(paths);
    const auto codec = LoadCodec(paths, cfg.raster);
    const auto ck = LoadCheckpoint(eval_ckpt);
    planner::CheckCompatibility(ck.meta, codec->codebook, codec->vocab);
    EvalOptions o;
    o.variant = VariantOr(eval_variant, cfg.mixture.cot_variant);
    o.ego_status = EgoFlag(eval_ego).value_or(cfg.mixture.ego_status);
    o.teacher_forced_cot = eval_teacher;
    const auto& eps = Split(data, eval_split);
    auto out = Evaluate(cfg, ck.params, *codec, eps, o);
    if (cfg.eval_vqa) out.report.vqa_acc = EvaluateVqa(cfg, ck.params, *codec, eps);
    const fs::path report = eval_out.empty() ? fs::path(cfg.out_dir) / "reports" / "eval.json" : fs::path(eval_out);
    const std::string text = out.report.ToJson() + "\n";
    io::WriteFileAtomic(report, text);
    if (!eval_svg.empty()) io::WriteFileAtomic(eval_svg, ReportSvg(out.report));
    json j;
    j["report"] = report.string();
    j["report_hash"] = HashBytes(text);
    j["checkpoint_hash"] = HashBytes(io::ReadFile(eval_ckpt));
    j["grammar_errors"] = out.grammar_errors;
    m.Append("eval-result", j.dump());
    std::cout << text;
    return 0;
  }

  if (ab->parsed()) {
    auto cfg = ab_args.Load();
    const auto m = ManifestIn(cfg.out_dir);
    RecordInvocation(m, "ablate", ab_args, cfg, argc, argv);
    FSD_CHECK(ab_args.data.empty(), ErrorKind::kUsage, "ablate keeps its data under <run.out_dir>/data");
    const auto result = RunSuite(SuiteFromName(suite), cfg, &m);
    std::cout << result.table;
    return 0;
  }

  if (gc->parsed()) {
    const auto r = RunGradcheck(static_cast<uint64_t>(gc_seed));
    json j;
    j["max_rel_error"] = r.max_rel_error;
    j["worst_tensor"] = r.worst_tensor;
    j["tolerance"] = gc_tol;
    j["pass"] = r.max_rel_error < gc_tol;
    json groups = json::object();
    for (const auto& [name, err] : r.per_group) groups[name] = err;
    j["per_group"] = groups;
    std::cout << j.dump(2) << "\n";
    if (!(r.max_rel_error < gc_tol)) {
      PrintError("numeric", "gradient check failed: max relative error " + std::to_string(r.max_rel_error) + " in " +
                                r.worst_tensor);
      return kExitNumeric;
    }
    return 0;
  }
  return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return Run(argc, argv);
  } catch (const fsd::Error& e) {
    PrintError(fsd::ErrorKindName(e.kind()), e.what());
    return ExitCodeFor(e.kind());
  } catch (const nlohmann::json::exception& e) {
    PrintError("decode", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    PrintError("internal", e.what());
    return kExitData;
  }
}
