// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "uftlab/checkpoint.hpp"
#include "uftlab/datasets.hpp"
#include "uftlab/error.hpp"
#include "uftlab/evalsuite.hpp"
#include "uftlab/model.hpp"
#include "uftlab/trainer.hpp"

namespace uftlab {

enum class ReferencePolicy { pretrained_snapshot, previous_stage_snapshot };

inline std::string_view reference_policy_name(ReferencePolicy p) {
  return p == ReferencePolicy::pretrained_snapshot ? "pretrained-snapshot" : "previous-stage-snapshot";
}

inline ReferencePolicy parse_reference_policy(std::string_view name) {
  if (name == "pretrained-snapshot") return ReferencePolicy::pretrained_snapshot;
  if (name == "previous-stage-snapshot") return ReferencePolicy::previous_stage_snapshot;
  throw UsageError("unknown reference policy '" + std::string(name) + "'");
}

struct StageSpec {
  std::string name;
  TrainingConfig config;
  std::string dataset;
  ReferencePolicy reference = ReferencePolicy::pretrained_snapshot;
};

struct PipelineSpec {
  std::vector<StageSpec> stages;
  bool eval_after_each_stage = false;
  // A unified run: one scored stage anchored to the pretrained model.
  bool unified = false;

  void validate() const {
    if (stages.empty()) throw UsageError("pipeline needs at least one stage");
    for (const auto& s : stages) s.config.validate();
    if (unified) {
      if (stages.size() != 1) throw UsageError("a unified pipeline has exactly one stage");
      if (stages[0].config.objective != Objective::una) {
        throw UsageError("a unified pipeline trains the una objective over scored data");
      }
      if (stages[0].reference != ReferencePolicy::pretrained_snapshot) {
        throw UsageError("a unified pipeline is anchored to the pretrained model");
      }
    }
  }
};

struct EvalPlan {
  std::vector<SyntheticTask> tasks = tasks::standard_suite();
  std::size_t n_per_task = 50;
  std::uint64_t seed = 0;
  // 0 skips the KL estimate.
  std::size_t kl_samples = 0;
  std::size_t kl_prompts_per_task = 8;
};

template <HasNetwork R>
EvalReport evaluate(const PolicyModel& model, const R* reference, const EvalPlan& plan, std::string id) {
  EvalReport report = eval_tasks(model, plan.tasks, plan.n_per_task, plan.seed, std::move(id));
  if (reference != nullptr && plan.kl_samples > 0) {
    const auto prompts = suite_prompts(plan.tasks, plan.kl_prompts_per_task, plan.seed);
    report.mean_kl = kl_to_reference(model, *reference, prompts, plan.kl_samples, plan.seed, 8);
  }
  return report;
}

struct StageOutcome {
  std::string name;
  PolicyModel model;
  ReferenceModel reference;
  MetricsLog log;
  std::optional<EvalReport> eval;
};

struct PipelineResult {
  std::optional<EvalReport> base_eval;
  std::vector<StageOutcome> stages;

  /// Base report (if any) followed by every stage report.
  [[nodiscard]] std::vector<EvalReport> reports() const {
    std::vector<EvalReport> out;
    if (base_eval) out.push_back(*base_eval);
    for (const auto& s : stages) {
      if (s.eval) out.push_back(*s.eval);
    }
    return out;
  }
};

/// Runs stages in order. `pretrained-snapshot` stages are anchored to the
/// base model, `previous-stage-snapshot` stages to the model they start from.
inline PipelineResult run_pipeline(const PipelineSpec& spec, const PolicyModel& base,
                                   const std::map<std::string, RecordList>& datasets, const EvalPlan* plan = nullptr) {
  spec.validate();
  const ReferenceModel pretrained = snapshot_reference(base);
  const bool evals = spec.eval_after_each_stage && plan != nullptr;
  PipelineResult result;
  if (evals) result.base_eval = evaluate(base, &pretrained, *plan, "base");

  PolicyModel current = base;
  for (std::size_t i = 0; i < spec.stages.size(); ++i) {
    const StageSpec& stage = spec.stages[i];
    const std::string name = stage.name.empty() ? "stage" + std::to_string(i + 1) : stage.name;
    try {
      const auto it = datasets.find(stage.dataset);
      if (it == datasets.end()) throw UsageError("dataset '" + stage.dataset + "' was not supplied");
      ReferenceModel reference =
          stage.reference == ReferencePolicy::pretrained_snapshot ? pretrained : snapshot_reference(current);
      Trainer trainer(current, reference, it->second, stage.config);
      MetricsLog log = trainer.run({}, name);
      current = trainer.take_model();
      StageOutcome outcome{name, current, std::move(reference), std::move(log), std::nullopt};
      if (evals) outcome.eval = evaluate(current, &outcome.reference, *plan, name);
      result.stages.push_back(std::move(outcome));
    } catch (const StageError&) {
      throw;
    } catch (const Error& e) {
      throw StageError(i + 1, e.code(), std::string(name) + ": " + e.what());
    }
  }
  return result;
}

/// Writes `<stage>.ckpt` and `<stage>.metrics.csv` per stage, plus the eval
/// and degradation reports when present.
inline void write_pipeline_outputs(const PipelineResult& result, const std::filesystem::path& dir, double threshold) {
  std::filesystem::create_directories(dir);
  for (const auto& s : result.stages) {
    save_checkpoint(dir / (s.name + ".ckpt"), s.model);
    write_file(dir / (s.name + ".metrics.csv"), s.log.to_csv());
  }
  const auto reports = result.reports();
  if (!reports.empty()) write_file(dir / "eval.csv", report_csv(reports));
  if (reports.size() >= 2) write_file(dir / "degradation.csv", degradation_csv(degradation_report(reports, threshold)));
}

// ---- mixing sweep ----

struct MixSweepSpec {
  std::vector<std::size_t> instruction_counts{1600, 2000, 3200, 6500, 13000, 26000};
  std::size_t alignment_count = 2000;
  std::uint64_t seed = 0;
  TrainingConfig config;
  EvalPlan eval;
};

struct MixRun {
  std::size_t instruction_count = 0;
  std::size_t mixed_size = 0;
  EvalReport report;
  std::string csv;
};

/// One unified run per instruction count: `count` instruction-as-scored
/// records plus the alignment records, mixed, trained against the base model.
inline MixRun run_mix(const MixSweepSpec& spec, std::size_t count, const PolicyModel& base,
                      const std::vector<ScoredExample>& instruction_pool,
                      const std::vector<ScoredExample>& alignment_pool) {
  MixSpec mspec;
  mspec.seed = spec.seed;
  mspec.sources = {{"instruction", count}, {"alignment", spec.alignment_count}};
  const std::map<std::string, std::vector<ScoredExample>> pools{{"instruction", instruction_pool},
                                                                {"alignment", alignment_pool}};
  std::vector<ScoredExample> mixed = mix(mspec, pools);
  TrainingConfig cfg = spec.config;
  cfg.objective = Objective::una;
  const ReferenceModel reference = snapshot_reference(base);
  MixRun run;
  run.instruction_count = count;
  run.mixed_size = mixed.size();
  const RecordList data = std::move(mixed);
  StageResult trained = train_stage(base, reference, data, cfg);
  run.report = evaluate(trained.model, &reference, spec.eval, "mix_" + std::to_string(count));
  run.csv = report_csv(run.report);
  return run;
}

inline std::vector<MixRun> run_mixing_sweep(const MixSweepSpec& spec, const PolicyModel& base,
                                            const std::vector<ScoredExample>& instruction_pool,
                                            const std::vector<ScoredExample>& alignment_pool,
                                            const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  if (out_dir) std::filesystem::create_directories(*out_dir);
  std::vector<MixRun> runs;
  for (const std::size_t n : spec.instruction_counts) {
    runs.push_back(run_mix(spec, n, base, instruction_pool, alignment_pool));
    if (out_dir) write_file(*out_dir / ("mix_" + std::to_string(n) + ".csv"), runs.back().csv);
  }
  return runs;
}

}  // namespace uftlab
