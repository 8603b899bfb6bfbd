// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "uftlab/error.hpp"
#include "uftlab/evalsuite.hpp"
#include "uftlab/model.hpp"
#include "uftlab/pipeline.hpp"
#include "uftlab/trainer.hpp"

// JSON config files. Keys mirror the struct fields with hyphens:
//
//   {"objective": "una", "beta": 0.1, "g": "bce", "learning-rate": 1e-3,
//    "steps": 200, "batch-size": 8, "epochs": 0, "seed": 1,
//    "adam-params": {"beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8},
//    "lora": 4, "grad-clip": 1.0}

namespace uftlab {

using json = nlohmann::json;

namespace detail {

inline void reject_unknown(const json& j, std::string_view where, std::initializer_list<std::string_view> known) {
  if (!j.is_object()) throw UsageError(std::string(where) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const auto k : known) ok = ok || key == k;
    if (!ok) throw UsageError(std::string(where) + ": unknown key '" + key + "'");
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw UsageError(std::string("config key '") + key + "' has the wrong type");
  }
}

inline std::size_t get_count(const json& j, const char* key, std::size_t fallback) {
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  if (!it->is_number_integer() || it->get<long long>() < 0) {
    throw UsageError(std::string("config key '") + key + "' must be a non-negative integer");
  }
  return it->get<std::size_t>();
}

}  // namespace detail

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

inline TrainingConfig training_config_from_json(const json& j) {
  detail::reject_unknown(j, "training config",
                         {"objective", "beta", "g", "learning-rate", "steps", "batch-size", "epochs", "seed",
                          "adam-params", "lora", "grad-clip"});
  TrainingConfig c;
  c.objective = parse_objective(detail::get_or<std::string>(j, "objective", "sft"));
  c.beta = Beta(detail::get_or<double>(j, "beta", c.beta.value()));
  c.g = parse_g(detail::get_or<std::string>(j, "g", std::string(g_name(c.g))));
  c.learning_rate = detail::get_or<double>(j, "learning-rate", c.learning_rate);
  c.steps = detail::get_count(j, "steps", c.steps);
  c.batch_size = detail::get_count(j, "batch-size", c.batch_size);
  c.epochs = detail::get_count(j, "epochs", c.epochs);
  c.seed = detail::get_or<std::uint64_t>(j, "seed", c.seed);
  if (const auto it = j.find("adam-params"); it != j.end()) {
    detail::reject_unknown(*it, "adam-params", {"beta1", "beta2", "epsilon"});
    c.adam.beta1 = detail::get_or<double>(*it, "beta1", c.adam.beta1);
    c.adam.beta2 = detail::get_or<double>(*it, "beta2", c.adam.beta2);
    c.adam.epsilon = detail::get_or<double>(*it, "epsilon", c.adam.epsilon);
  }
  if (const auto it = j.find("lora"); it != j.end() && !it->is_null()) c.lora_rank = detail::get_count(j, "lora", 0);
  c.grad_clip = detail::get_or<double>(j, "grad-clip", c.grad_clip);
  c.validate();
  return c;
}

inline json to_json(const TrainingConfig& c) {
  json j;
  j["objective"] = objective_name(c.objective);
  j["beta"] = c.beta.value();
  j["g"] = g_name(c.g);
  j["learning-rate"] = c.learning_rate;
  j["steps"] = c.steps;
  j["batch-size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["seed"] = c.seed;
  j["adam-params"] = {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"epsilon", c.adam.epsilon}};
  j["lora"] = c.lora_rank ? json(*c.lora_rank) : json(nullptr);
  j["grad-clip"] = c.grad_clip;
  return j;
}

inline ModelConfig model_config_from_json(const json& j) {
  detail::reject_unknown(j, "model config", {"layers", "heads", "model-dim", "context-length", "mlp-ratio", "lora"});
  ModelConfig c;
  c.layers = detail::get_count(j, "layers", c.layers);
  c.heads = detail::get_count(j, "heads", c.heads);
  c.model_dim = detail::get_count(j, "model-dim", c.model_dim);
  c.context_length = detail::get_count(j, "context-length", c.context_length);
  c.mlp_ratio = detail::get_count(j, "mlp-ratio", c.mlp_ratio);
  if (const auto it = j.find("lora"); it != j.end() && !it->is_null()) c.lora_rank = detail::get_count(j, "lora", 0);
  c.validate();
  return c;
}

inline PretrainConfig pretrain_config_from_json(const json& j) {
  detail::reject_unknown(j, "pretrain config", {"learning-rate", "steps", "batch-size", "window", "seed", "grad-clip"});
  PretrainConfig c;
  c.learning_rate = detail::get_or<double>(j, "learning-rate", c.learning_rate);
  c.steps = detail::get_count(j, "steps", c.steps);
  c.batch_size = detail::get_count(j, "batch-size", c.batch_size);
  c.window = detail::get_count(j, "window", c.window);
  c.seed = detail::get_or<std::uint64_t>(j, "seed", c.seed);
  c.grad_clip = detail::get_or<double>(j, "grad-clip", c.grad_clip);
  return c;
}

inline EvalPlan eval_plan_from_json(const json& j) {
  detail::reject_unknown(j, "eval", {"tasks", "n-per-task", "seed", "kl-samples", "word-length"});
  EvalPlan p;
  TaskOptions opt;
  opt.length = detail::get_count(j, "word-length", opt.length);
  p.tasks.clear();
  if (const auto it = j.find("tasks"); it != j.end()) {
    for (const auto& name : *it) p.tasks.push_back(tasks::by_name(name.get<std::string>(), opt));
  } else {
    p.tasks = tasks::standard_suite(opt);
  }
  p.n_per_task = detail::get_count(j, "n-per-task", p.n_per_task);
  p.seed = detail::get_or<std::uint64_t>(j, "seed", p.seed);
  p.kl_samples = detail::get_count(j, "kl-samples", p.kl_samples);
  if (p.n_per_task < 1) throw UsageError("eval: n-per-task must be >= 1");
  return p;
}

/// Where a stage's records come from: a record file, or a mix spec file.
struct DatasetSource {
  std::filesystem::path path;
  Schema schema = Schema::scored;
  bool is_mix = false;
};

struct PipelineFile {
  PipelineSpec spec;
  std::map<std::string, DatasetSource> sources;
  std::optional<EvalPlan> eval;
};

//   {"stages": [{"name": "sft", "data": "inst.jsonl", "schema": "instruction",
//                "reference": "pretrained-snapshot", "config": {...}},
//               {"name": "uft", "mix": "mix.json", "config": {...}}],
//    "eval-after-each-stage": true, "unified": false, "eval": {...}}
// Relative paths resolve against the pipeline file's directory.
inline PipelineFile pipeline_file_from_json(const json& j, const std::filesystem::path& base_dir) {
  detail::reject_unknown(j, "pipeline", {"stages", "eval-after-each-stage", "unified", "eval"});
  PipelineFile out;
  out.spec.eval_after_each_stage = detail::get_or<bool>(j, "eval-after-each-stage", false);
  out.spec.unified = detail::get_or<bool>(j, "unified", false);
  const auto stages = j.find("stages");
  if (stages == j.end() || !stages->is_array()) throw UsageError("pipeline: 'stages' must be a list");
  for (const auto& s : *stages) {
    detail::reject_unknown(s, "pipeline stage", {"name", "data", "schema", "mix", "reference", "config"});
    StageSpec stage;
    stage.name = detail::get_or<std::string>(s, "name", "stage" + std::to_string(out.spec.stages.size() + 1));
    stage.config = training_config_from_json(s.value("config", json::object()));
    stage.reference = parse_reference_policy(detail::get_or<std::string>(s, "reference", "pretrained-snapshot"));
    DatasetSource src;
    const bool has_data = s.contains("data"), has_mix = s.contains("mix");
    if (has_data == has_mix) throw UsageError("pipeline stage '" + stage.name + "' needs exactly one of data / mix");
    const std::string rel = has_data ? s.at("data").get<std::string>() : s.at("mix").get<std::string>();
    src.path = std::filesystem::path(rel).is_absolute() ? std::filesystem::path(rel) : base_dir / rel;
    src.is_mix = has_mix;
    src.schema = has_mix ? Schema::scored
                         : parse_schema(detail::get_or<std::string>(
                               s, "schema", std::string(schema_name(required_schema(stage.config.objective)))));
    stage.dataset = (has_mix ? "mix:" : "data:") + rel;
    out.sources.emplace(stage.dataset, src);
    out.spec.stages.push_back(std::move(stage));
  }
  if (const auto it = j.find("eval"); it != j.end()) out.eval = eval_plan_from_json(*it);
  out.spec.validate();
  return out;
}

/// Loads a mix spec file and returns the mixed scored records.
inline std::vector<ScoredExample> load_mix(const std::filesystem::path& path) {
  const MixFile file = parse_mix_file(path);
  std::map<std::string, std::vector<ScoredExample>> pools;
  for (const auto& [name, p] : file.paths) pools[name] = as_scored(load_records(p, file.schemas.at(name)));
  return mix(file.spec, pools);
}

inline RecordList load_source(const DatasetSource& src) {
  if (src.is_mix) return load_mix(src.path);
  return load_records(src.path, src.schema);
}

}  // namespace uftlab
