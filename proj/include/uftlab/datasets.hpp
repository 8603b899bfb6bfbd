// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "uftlab/error.hpp"
#include "uftlab/rng.hpp"

namespace uftlab {

struct InstructionExample {
  std::string prompt;
  std::string response;
  friend bool operator==(const InstructionExample&, const InstructionExample&) = default;
};

struct PairwiseExample {
  std::string prompt;
  std::string chosen;
  std::string rejected;
  friend bool operator==(const PairwiseExample&, const PairwiseExample&) = default;
};

enum class Origin { instruction, pairwise_chosen, pairwise_rejected, binary, native_score };

/// The universal feedback record: a response to a prompt with a score in [0, 1].
struct ScoredExample {
  std::string prompt;
  std::string response;
  double score = 0.0;
  Origin origin = Origin::native_score;
  friend bool operator==(const ScoredExample&, const ScoredExample&) = default;
};

/// Alternating user / assistant turns. A trailing user turn without a reply is allowed.
struct Conversation {
  std::vector<std::string> turns;
  friend bool operator==(const Conversation&, const Conversation&) = default;

  [[nodiscard]] std::size_t complete_turns() const { return turns.size() / 2; }
};

enum class Schema { instruction, pairwise, scored, conversation };

using RecordList = std::variant<std::vector<InstructionExample>, std::vector<PairwiseExample>,
                                std::vector<ScoredExample>, std::vector<Conversation>>;

inline std::string_view schema_name(Schema s) {
  switch (s) {
    case Schema::instruction: return "instruction";
    case Schema::pairwise: return "pairwise";
    case Schema::scored: return "scored";
    case Schema::conversation: return "conversation";
  }
  return "?";
}

inline Schema parse_schema(std::string_view name) {
  for (const Schema s : {Schema::instruction, Schema::pairwise, Schema::scored, Schema::conversation}) {
    if (schema_name(s) == name) return s;
  }
  throw UsageError("unknown schema '" + std::string(name) + "'");
}

inline std::string_view origin_name(Origin o) {
  switch (o) {
    case Origin::instruction: return "instruction";
    case Origin::pairwise_chosen: return "pairwise-chosen";
    case Origin::pairwise_rejected: return "pairwise-rejected";
    case Origin::binary: return "binary";
    case Origin::native_score: return "native-score";
  }
  return "?";
}

inline Schema schema_of(const RecordList& records) {
  return static_cast<Schema>(records.index());
}

namespace detail {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

[[noreturn]] inline void invariant(std::size_t line, const std::string& field, const std::string& what) {
  throw DataError(DataError::Kind::invariant, line, field, what);
}

inline std::string string_field(const json& j, const char* field, std::size_t line, bool allow_empty = false) {
  const auto it = j.find(field);
  if (it == j.end()) invariant(line, field, "missing");
  if (!it->is_string()) invariant(line, field, "must be a string");
  std::string s = it->get<std::string>();
  if (!allow_empty && s.empty()) invariant(line, field, "must be non-empty");
  return s;
}

inline Origin parse_origin(const json& j, std::size_t line) {
  const auto it = j.find("origin");
  if (it == j.end()) return Origin::native_score;
  if (!it->is_string()) invariant(line, "origin", "must be a string");
  const auto name = it->get<std::string>();
  for (const Origin o : {Origin::instruction, Origin::pairwise_chosen, Origin::pairwise_rejected, Origin::binary,
                         Origin::native_score}) {
    if (origin_name(o) == name) return o;
  }
  invariant(line, "origin", "unknown origin '" + name + "'");
}

inline InstructionExample parse_instruction(const json& j, std::size_t line) {
  return {string_field(j, "prompt", line), string_field(j, "response", line)};
}

inline PairwiseExample parse_pairwise(const json& j, std::size_t line) {
  PairwiseExample ex{string_field(j, "prompt", line), string_field(j, "chosen", line),
                     string_field(j, "rejected", line)};
  if (ex.chosen == ex.rejected) invariant(line, "rejected", "identical to chosen");
  return ex;
}

inline ScoredExample parse_scored(const json& j, std::size_t line) {
  ScoredExample ex;
  ex.prompt = string_field(j, "prompt", line);
  ex.response = string_field(j, "response", line);
  const auto it = j.find("score");
  if (it == j.end()) invariant(line, "score", "missing");
  if (!it->is_number()) invariant(line, "score", "must be a number");
  ex.score = it->get<double>();
  if (!(ex.score >= 0.0 && ex.score <= 1.0)) invariant(line, "score", "outside [0, 1]");
  ex.origin = parse_origin(j, line);
  return ex;
}

inline Conversation parse_conversation(const json& j, std::size_t line) {
  const auto it = j.find("turns");
  if (it == j.end()) invariant(line, "turns", "missing");
  if (!it->is_array()) invariant(line, "turns", "must be an array of strings");
  Conversation c;
  for (const auto& t : *it) {
    if (!t.is_string()) invariant(line, "turns", "must be an array of strings");
    c.turns.push_back(t.get<std::string>());
  }
  if (c.complete_turns() == 0) invariant(line, "turns", "needs at least one user/assistant pair");
  return c;
}

inline std::string dump_line(const ordered_json& j, const char* field_hint) {
  try {
    return j.dump();
  } catch (const nlohmann::json::type_error& e) {
    throw DataError(DataError::Kind::invariant, 0, field_hint, "string is not valid UTF-8");
  }
}

}  // namespace detail

inline std::string to_record_line(const InstructionExample& ex) {
  return detail::dump_line({{"prompt", ex.prompt}, {"response", ex.response}}, "prompt");
}

inline std::string to_record_line(const PairwiseExample& ex) {
  return detail::dump_line({{"prompt", ex.prompt}, {"chosen", ex.chosen}, {"rejected", ex.rejected}}, "prompt");
}

inline std::string to_record_line(const ScoredExample& ex) {
  return detail::dump_line(
      {{"prompt", ex.prompt}, {"response", ex.response}, {"score", ex.score}, {"origin", origin_name(ex.origin)}},
      "prompt");
}

inline std::string to_record_line(const Conversation& c) {
  return detail::dump_line({{"turns", c.turns}}, "turns");
}

/// Parses line-delimited records. Blank lines are skipped but still counted,
/// so errors name the physical line.
inline RecordList parse_records(std::istream& in, Schema schema) {
  RecordList out;
  switch (schema) {
    case Schema::instruction: out = std::vector<InstructionExample>{}; break;
    case Schema::pairwise: out = std::vector<PairwiseExample>{}; break;
    case Schema::scored: out = std::vector<ScoredExample>{}; break;
    case Schema::conversation: out = std::vector<Conversation>{}; break;
  }
  std::string text;
  std::size_t line = 0;
  std::size_t records = 0;
  while (std::getline(in, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.find_first_not_of(" \t") == std::string::npos) continue;
    detail::json j;
    try {
      j = detail::json::parse(text);
    } catch (const detail::json::parse_error& e) {
      throw DataError(DataError::Kind::parse, line, "", e.what());
    }
    if (!j.is_object()) throw DataError(DataError::Kind::parse, line, "", "record is not an object");
    std::visit(
        [&](auto& list) {
          using T = typename std::decay_t<decltype(list)>::value_type;
          if constexpr (std::is_same_v<T, InstructionExample>) list.push_back(detail::parse_instruction(j, line));
          else if constexpr (std::is_same_v<T, PairwiseExample>) list.push_back(detail::parse_pairwise(j, line));
          else if constexpr (std::is_same_v<T, ScoredExample>) list.push_back(detail::parse_scored(j, line));
          else list.push_back(detail::parse_conversation(j, line));
        },
        out);
    ++records;
  }
  if (records == 0) throw DataError(DataError::Kind::empty_file, 0, "", "no records");
  return out;
}

inline RecordList load_records(const std::filesystem::path& path, Schema schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return parse_records(in, schema);
}

template <typename T>
std::vector<T> load_records_as(const std::filesystem::path& path) {
  Schema schema;
  if constexpr (std::is_same_v<T, InstructionExample>) schema = Schema::instruction;
  else if constexpr (std::is_same_v<T, PairwiseExample>) schema = Schema::pairwise;
  else if constexpr (std::is_same_v<T, ScoredExample>) schema = Schema::scored;
  else schema = Schema::conversation;
  return std::get<std::vector<T>>(load_records(path, schema));
}

template <typename T>
std::string format_records(std::span<const T> records) {
  std::string out;
  for (const auto& r : records) {
    out += to_record_line(r);
    out += '\n';
  }
  return out;
}

template <typename T>
void write_records(const std::filesystem::path& path, std::span<const T> records) {
  const std::string text = format_records(records);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

template <typename T>
void write_records(const std::filesystem::path& path, const std::vector<T>& records) {
  write_records(path, std::span<const T>(records));
}

inline void write_records(const std::filesystem::path& path, const RecordList& records) {
  std::visit([&](const auto& list) { write_records(path, list); }, records);
}

inline std::vector<ScoredExample> instruction_to_scored(std::span<const InstructionExample> examples) {
  std::vector<ScoredExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back({ex.prompt, ex.response, 1.0, Origin::instruction});
  return out;
}

/// chosen -> 1, rejected -> 0, interleaved in input order.
inline std::vector<ScoredExample> pairwise_to_scored(std::span<const PairwiseExample> examples) {
  std::vector<ScoredExample> out;
  out.reserve(2 * examples.size());
  for (const auto& ex : examples) {
    out.push_back({ex.prompt, ex.chosen, 1.0, Origin::pairwise_chosen});
    out.push_back({ex.prompt, ex.rejected, 0.0, Origin::pairwise_rejected});
  }
  return out;
}

inline constexpr std::string_view kTurnSeparator = "\n";

/// One example per assistant turn. The prompt for turn i is the full history
/// (user_1, assistant_1, ..., user_i) joined by newlines.
inline std::vector<InstructionExample> unfold_conversation(std::span<const Conversation> conversations) {
  std::vector<InstructionExample> out;
  for (const auto& c : conversations) {
    std::string history;
    for (std::size_t i = 0; i < c.complete_turns(); ++i) {
      if (i > 0) history += kTurnSeparator;
      history += c.turns[2 * i];
      out.push_back({history, c.turns[2 * i + 1]});
      history += kTurnSeparator;
      history += c.turns[2 * i + 1];
    }
  }
  return out;
}

struct MixSource {
  std::string dataset;
  std::size_t count = 0;
};

struct MixSpec {
  std::vector<MixSource> sources;
  std::uint64_t seed = 0;
};

/// Seeded-shuffled prefix of each source, concatenated, then shuffled once more.
inline std::vector<ScoredExample> mix(const MixSpec& spec,
                                      const std::map<std::string, std::vector<ScoredExample>>& datasets) {
  if (spec.sources.empty()) throw DataError(DataError::Kind::invariant, 0, "sources", "mix needs at least one source");
  std::vector<ScoredExample> out;
  for (std::size_t s = 0; s < spec.sources.size(); ++s) {
    const auto& src = spec.sources[s];
    const auto it = datasets.find(src.dataset);
    if (it == datasets.end()) {
      throw DataError(DataError::Kind::invariant, 0, "sources", "unknown dataset '" + src.dataset + "'");
    }
    const auto& pool = it->second;
    if (src.count == 0) throw DataError(DataError::Kind::invariant, 0, "count", "count must be positive");
    if (src.count > pool.size()) {
      throw DataError(DataError::Kind::count_exceeds_source, 0, "count",
                      "'" + src.dataset + "' has " + std::to_string(pool.size()) + " examples, " +
                          std::to_string(src.count) + " requested");
    }
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(spec.seed, s));
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t i = 0; i < src.count; ++i) out.push_back(pool[order[i]]);
  }
  Rng final_rng(mix_seed(spec.seed, spec.sources.size()));
  final_rng.shuffle(std::span<ScoredExample>(out));
  return out;
}

/// Loads any feedback-carrying schema as scored records.
inline std::vector<ScoredExample> as_scored(const RecordList& records) {
  if (const auto* p = std::get_if<std::vector<ScoredExample>>(&records)) return *p;
  if (const auto* p = std::get_if<std::vector<InstructionExample>>(&records)) return instruction_to_scored(*p);
  if (const auto* p = std::get_if<std::vector<PairwiseExample>>(&records)) return pairwise_to_scored(*p);
  throw DataError(DataError::Kind::schema_mismatch, 0, "", "conversation records carry no feedback");
}

/// Mix description on disk:
///   {"seed": 7, "sources": [{"path": "a.jsonl", "schema": "instruction", "count": 2000}, ...]}
/// Relative paths resolve against the spec file's directory.
struct MixFile {
  MixSpec spec;
  std::map<std::string, std::filesystem::path> paths;
  std::map<std::string, Schema> schemas;
};

inline MixFile parse_mix_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  detail::json j;
  try {
    j = detail::json::parse(in);
  } catch (const detail::json::parse_error& e) {
    throw DataError(DataError::Kind::parse, 0, "", e.what());
  }
  MixFile out;
  try {
    out.spec.seed = j.value("seed", std::uint64_t{0});
    for (const auto& s : j.at("sources")) {
      const std::string p = s.at("path").get<std::string>();
      const std::filesystem::path resolved =
          std::filesystem::path(p).is_absolute() ? std::filesystem::path(p) : path.parent_path() / p;
      out.paths[p] = resolved;
      out.schemas[p] = parse_schema(s.value("schema", std::string("scored")));
      out.spec.sources.push_back({p, s.at("count").get<std::size_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataError::Kind::invariant, 0, "sources", e.what());
  }
  return out;
}

}  // namespace uftlab
