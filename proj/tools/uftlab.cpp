// SPDX-License-Identifier: Apache-2.0
//
// uftlab: train, mix, convert and evaluate on the toy byte model.
//
//   uftlab pretrain-toy --data corpus.txt --config toy.json --out base.ckpt
//   uftlab train --config sft.json --data inst.jsonl --base base.ckpt --out run/
//   uftlab pipeline --config pipe.json --base base.ckpt --out run/
//   uftlab convert --data in.jsonl --schema instruction --to scored --out out.jsonl
//   uftlab mix --mix-spec mix.json --out mixed.jsonl
//   uftlab eval --out report/ base.ckpt run/sft.ckpt run/una.ckpt
//   uftlab gradcheck

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "uftlab/uftlab.hpp"

namespace fs = std::filesystem;
using namespace uftlab;

namespace {

enum Exit { kOk = 0, kIo = 1, kData = 2, kNumeric = 3, kUsage = 64 };

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::io: return kIo;
    case ErrorCode::data:
    case ErrorCode::shape: return kData;
    case ErrorCode::numeric: return kNumeric;
    case ErrorCode::usage:
    case ErrorCode::state: return kUsage;
  }
  return kIo;
}

void require_distinct(const fs::path& in, const fs::path& out) {
  std::error_code ec;
  if (fs::exists(out) && fs::equivalent(in, out, ec)) throw UsageError("output would overwrite input '" + in.string() + "'");
}

struct Overrides {
  std::optional<std::size_t> steps;
  std::optional<double> lr;
  std::optional<double> beta;
  std::optional<std::string> objective;
  std::optional<std::string> g;
  std::optional<std::uint64_t> seed;

  void apply(TrainingConfig& c) const {
    if (steps) c.steps = *steps;
    if (lr) c.learning_rate = *lr;
    if (beta) c.beta = Beta(*beta);
    if (objective) c.objective = parse_objective(*objective);
    if (g) c.g = parse_g(*g);
    if (seed) c.seed = *seed;
    c.validate();
  }
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--steps", o.steps, "Number of updates");
  cmd->add_option("--lr", o.lr, "Learning rate");
  cmd->add_option("--beta", o.beta, "KL coefficient");
  cmd->add_option("--objective", o.objective, "sft | dpo | una | uft-sft | reward-model");
  cmd->add_option("--g", o.g, "sigmoid-mse | raw-mse | bce");
  cmd->add_option("--seed", o.seed, "Seed for batch order and adapters");
}

// ---- pretrain-toy ----

struct PretrainArgs {
  fs::path data, config, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::optional<double> lr;
};

int cmd_pretrain(const PretrainArgs& a) {
  ModelConfig model;
  PretrainConfig pre;
  if (!a.config.empty()) {
    const json j = read_json_file(a.config);
    detail::reject_unknown(j, "pretrain-toy config", {"model", "pretrain"});
    if (j.contains("model")) model = model_config_from_json(j.at("model"));
    if (j.contains("pretrain")) pre = pretrain_config_from_json(j.at("pretrain"));
  }
  if (a.seed) pre.seed = *a.seed;
  if (a.steps) pre.steps = *a.steps;
  if (a.lr) pre.learning_rate = *a.lr;
  require_distinct(a.data, a.out);
  const std::string corpus = read_file(a.data);
  PolicyModel init(Transformer::random(model, mix_seed(pre.seed, 0x1417)));
  const StageResult r = pretrain(std::move(init), corpus, pre);
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  save_checkpoint(a.out, r.model);
  write_file(fs::path(a.out.string() + ".metrics.csv"), r.log.to_csv());
  std::printf("pretrain: loss %.4f -> %.4f over %zu steps\n", r.log.stages[0].initial_loss, r.log.stages[0].final_loss,
              r.log.stages[0].steps);
  return kOk;
}

// ---- train ----

struct TrainArgs {
  fs::path config, data, base, out;
  std::string schema;
  Overrides overrides;
};

int cmd_train(const TrainArgs& a) {
  TrainingConfig cfg;
  if (!a.config.empty()) cfg = training_config_from_json(read_json_file(a.config));
  a.overrides.apply(cfg);
  const Schema schema = a.schema.empty() ? required_schema(cfg.objective) : parse_schema(a.schema);
  const RecordList data = load_records(a.data, schema);
  const PolicyModel base = load_policy(a.base);
  const ReferenceModel reference = snapshot_reference(base);
  fs::create_directories(a.out);
  StageResult r;
  try {
    r = train_stage(base, reference, data, cfg);
  } catch (const Error& e) {
    throw StageError(1, e.code(), std::string(objective_name(cfg.objective)) + ": " + e.what());
  }
  save_checkpoint(a.out / "model.ckpt", r.model);
  write_file(a.out / "metrics.csv", r.log.to_csv());
  write_file(a.out / "summary.csv", r.log.summary_csv());
  std::printf("%s: loss %.6f -> %.6f over %zu steps\n", std::string(objective_name(cfg.objective)).c_str(),
              r.log.stages[0].initial_loss, r.log.stages[0].final_loss, r.log.stages[0].steps);
  return kOk;
}

// ---- pipeline ----

struct PipelineArgs {
  fs::path config, base, out;
  double threshold = 0.05;
};

int cmd_pipeline(const PipelineArgs& a) {
  const PipelineFile file = pipeline_file_from_json(read_json_file(a.config), a.config.parent_path());
  std::map<std::string, RecordList> datasets;
  for (const auto& [name, src] : file.sources) datasets.emplace(name, load_source(src));
  const PolicyModel base = load_policy(a.base);
  const EvalPlan plan = file.eval.value_or(EvalPlan{});
  const PipelineResult result = run_pipeline(file.spec, base, datasets, &plan);
  write_pipeline_outputs(result, a.out, a.threshold);
  MetricsLog all;
  for (const auto& s : result.stages) all.stages.insert(all.stages.end(), s.log.stages.begin(), s.log.stages.end());
  write_file(a.out / "summary.csv", all.summary_csv());
  for (const auto& s : result.stages) {
    std::printf("%s: loss %.6f -> %.6f over %zu steps\n", s.name.c_str(), s.log.stages[0].initial_loss,
                s.log.stages[0].final_loss, s.log.stages[0].steps);
  }
  const auto reports = result.reports();
  if (!reports.empty()) std::cout << report_text(reports);
  if (reports.size() >= 2) std::cout << degradation_text(degradation_report(reports, a.threshold));
  return kOk;
}

// ---- convert / mix ----

struct ConvertArgs {
  fs::path data, out;
  std::string schema, to;
};

int cmd_convert(const ConvertArgs& a) {
  const Schema from = parse_schema(a.schema), to = parse_schema(a.to);
  require_distinct(a.data, a.out);
  const RecordList in = load_records(a.data, from);
  RecordList out;
  if (from == Schema::instruction && to == Schema::scored) {
    out = instruction_to_scored(std::get<std::vector<InstructionExample>>(in));
  } else if (from == Schema::pairwise && to == Schema::scored) {
    out = pairwise_to_scored(std::get<std::vector<PairwiseExample>>(in));
  } else if (from == Schema::conversation && to == Schema::instruction) {
    out = unfold_conversation(std::get<std::vector<Conversation>>(in));
  } else {
    throw UsageError("unsupported conversion " + a.schema + " -> " + a.to);
  }
  write_records(a.out, out);
  std::visit([](const auto& v) { std::printf("wrote %zu records\n", v.size()); }, out);
  return kOk;
}

struct MixArgs {
  fs::path spec, out;
};

int cmd_mix(const MixArgs& a) {
  const MixFile file = parse_mix_file(a.spec);
  for (const auto& [_, p] : file.paths) require_distinct(p, a.out);
  require_distinct(a.spec, a.out);
  const std::vector<ScoredExample> mixed = load_mix(a.spec);
  write_records(a.out, mixed);
  std::printf("wrote %zu records\n", mixed.size());
  return kOk;
}

// ---- eval ----

struct EvalArgs {
  std::vector<fs::path> checkpoints;
  fs::path out, config, reference;
  std::string tasks;
  std::optional<std::size_t> n_per_task;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> kl_samples;
  double threshold = 0.05;
};

int cmd_eval(const EvalArgs& a) {
  EvalPlan plan;
  if (!a.config.empty()) plan = eval_plan_from_json(read_json_file(a.config));
  if (!a.tasks.empty()) {
    plan.tasks.clear();
    std::stringstream ss(a.tasks);
    std::string name;
    while (std::getline(ss, name, ',')) plan.tasks.push_back(tasks::by_name(name));
    if (plan.tasks.empty()) throw UsageError("--tasks names no task");
  }
  if (a.n_per_task) plan.n_per_task = *a.n_per_task;
  if (a.seed) plan.seed = *a.seed;
  if (a.kl_samples) plan.kl_samples = *a.kl_samples;
  if (plan.n_per_task < 1) throw UsageError("--n-per-task must be >= 1");
  if (plan.kl_samples > 0 && a.reference.empty()) throw UsageError("--kl-samples needs --reference");

  std::optional<ReferenceModel> reference;
  if (!a.reference.empty()) reference = load_reference(a.reference);
  std::vector<EvalReport> reports;
  for (const auto& path : a.checkpoints) {
    const PolicyModel m = load_policy(path);
    reports.push_back(evaluate(m, reference ? &*reference : nullptr, plan, path.stem().string()));
  }
  fs::create_directories(a.out);
  write_file(a.out / "eval.csv", report_csv(reports));
  std::cout << report_text(reports);
  if (reports.size() >= 2) {
    const DegradationTable table = degradation_report(reports, a.threshold);
    write_file(a.out / "degradation.csv", degradation_csv(table));
    std::cout << degradation_text(table);
  }
  return kOk;
}

// ---- gradcheck ----

int cmd_gradcheck(std::uint64_t seed, double tolerance) {
  GradCheckOptions opt;
  opt.seed = seed;
  bool ok = true;
  for (const auto& r : gradcheck_suite(opt)) {
    const bool pass = r.max_error < tolerance;
    ok = ok && pass;
    std::printf("%-32s max_rel_err %.3e  coords %4zu  %s\n", r.name.c_str(), r.max_error, r.coordinates,
                pass ? "ok" : "FAIL");
  }
  return ok ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"uftlab: post-training objectives on a tiny byte transformer"};
  app.require_subcommand(1, 1);

  PretrainArgs pre;
  auto* c_pre = app.add_subcommand("pretrain-toy", "Next-token pretraining on a byte corpus");
  c_pre->add_option("--data", pre.data, "Corpus file")->required();
  c_pre->add_option("--config", pre.config, "JSON with 'model' and 'pretrain' sections");
  c_pre->add_option("--out", pre.out, "Output checkpoint")->required();
  c_pre->add_option("--seed", pre.seed, "Seed");
  c_pre->add_option("--steps", pre.steps, "Number of updates");
  c_pre->add_option("--lr", pre.lr, "Learning rate");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Run one training stage");
  c_train->add_option("--config", train.config, "Training config JSON");
  c_train->add_option("--data", train.data, "Record file")->required();
  c_train->add_option("--schema", train.schema, "Record schema (defaults to the objective's)");
  c_train->add_option("--base", train.base, "Base checkpoint, also the reference")->required();
  c_train->add_option("--out", train.out, "Output directory")->required();
  add_overrides(c_train, train.overrides);

  PipelineArgs pipe;
  auto* c_pipe = app.add_subcommand("pipeline", "Run a multi-stage pipeline");
  c_pipe->add_option("--config", pipe.config, "Pipeline JSON")->required();
  c_pipe->add_option("--base", pipe.base, "Pretrained checkpoint")->required();
  c_pipe->add_option("--out", pipe.out, "Output directory")->required();
  c_pipe->add_option("--threshold", pipe.threshold, "Degradation flag threshold");

  ConvertArgs conv;
  auto* c_conv = app.add_subcommand("convert", "Convert records between schemas");
  c_conv->add_option("--data", conv.data, "Input records")->required();
  c_conv->add_option("--schema", conv.schema, "Input schema")->required();
  c_conv->add_option("--to", conv.to, "Output schema")->required();
  c_conv->add_option("--out", conv.out, "Output records")->required();

  MixArgs mixa;
  auto* c_mix = app.add_subcommand("mix", "Mix scored sources per a spec file");
  c_mix->add_option("--mix-spec", mixa.spec, "Mix spec JSON")->required();
  c_mix->add_option("--out", mixa.out, "Output records")->required();

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Evaluate checkpoints on the synthetic suite");
  c_eval->add_option("checkpoints", ev.checkpoints, "Checkpoints in stage order")->required();
  c_eval->add_option("--out", ev.out, "Output directory")->required();
  c_eval->add_option("--config", ev.config, "Eval plan JSON");
  c_eval->add_option("--reference", ev.reference, "Reference checkpoint for the KL column");
  c_eval->add_option("--tasks", ev.tasks, "Comma-separated task names");
  c_eval->add_option("--n-per-task", ev.n_per_task, "Prompts per task");
  c_eval->add_option("--seed", ev.seed, "Prompt seed");
  c_eval->add_option("--kl-samples", ev.kl_samples, "Samples per prompt for the KL estimate");
  c_eval->add_option("--threshold", ev.threshold, "Degradation flag threshold");

  std::uint64_t gc_seed = 0;
  double gc_tol = 1e-4;
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference check of every objective");
  c_gc->add_option("--seed", gc_seed, "Seed for the probe model");
  c_gc->add_option("--threshold", gc_tol, "Maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (c_pre->parsed()) return cmd_pretrain(pre);
    if (c_train->parsed()) return cmd_train(train);
    if (c_pipe->parsed()) return cmd_pipeline(pipe);
    if (c_conv->parsed()) return cmd_convert(conv);
    if (c_mix->parsed()) return cmd_mix(mixa);
    if (c_eval->parsed()) return cmd_eval(ev);
    if (c_gc->parsed()) return cmd_gradcheck(gc_seed, gc_tol);
  } catch (const Error& e) {
    std::fprintf(stderr, "uftlab: %s\n", e.what());
    return exit_code(e.code());
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "uftlab: malformed input: %s\n", e.what());
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "uftlab: %s\n", e.what());
    return kIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "uftlab: %s\n", e.what());
    return kIo;
  }
  return kUsage;
}
