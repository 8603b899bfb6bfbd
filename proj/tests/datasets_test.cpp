// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "uftlab/datasets.hpp"

using namespace uftlab;

namespace {

RecordList parse(const std::string& text, Schema schema) {
  std::istringstream in(text);
  return parse_records(in, schema);
}

DataError parse_error(const std::string& text, Schema schema) {
  try {
    (void)parse(text, schema);
  } catch (const DataError& e) {
    return e;
  }
  ADD_FAILURE() << "expected a DataError";
  return DataError(DataError::Kind::parse, 0, "", "none");
}

std::vector<ScoredExample> numbered(const std::string& tag, std::size_t n) {
  std::vector<ScoredExample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({tag + std::to_string(i), "r", 0.5, Origin::native_score});
  return out;
}

}  // namespace

TEST(Records, ParseEachSchema) {
  const auto inst = std::get<std::vector<InstructionExample>>(
      parse("{\"prompt\":\"p\",\"response\":\"r\"}\n\n{\"prompt\":\"q\",\"response\":\"s\"}\n", Schema::instruction));
  ASSERT_EQ(inst.size(), 2u);
  EXPECT_EQ(inst[1].prompt, "q");
  const auto pairs =
      std::get<std::vector<PairwiseExample>>(parse("{\"prompt\":\"p\",\"chosen\":\"a\",\"rejected\":\"b\"}", Schema::pairwise));
  EXPECT_EQ(pairs[0].rejected, "b");
  const auto scored = std::get<std::vector<ScoredExample>>(
      parse("{\"prompt\":\"p\",\"response\":\"r\",\"score\":0.25,\"origin\":\"binary\"}", Schema::scored));
  EXPECT_EQ(scored[0].score, 0.25);
  EXPECT_EQ(scored[0].origin, Origin::binary);
  const auto conv = std::get<std::vector<Conversation>>(parse("{\"turns\":[\"u\",\"a\",\"u2\"]}", Schema::conversation));
  EXPECT_EQ(conv[0].complete_turns(), 1u);
}

TEST(Records, ErrorsCarryLineNumbers) {
  const auto e = parse_error("{\"prompt\":\"p\",\"response\":\"r\"}\n\n{\"prompt\":\"p\"}\n", Schema::instruction);
  EXPECT_EQ(e.kind(), DataError::Kind::invariant);
  EXPECT_EQ(e.line(), 3u);
  EXPECT_EQ(e.field(), "response");
  EXPECT_EQ(parse_error("{not json", Schema::instruction).kind(), DataError::Kind::parse);
  EXPECT_EQ(parse_error("{\"prompt\":\"p\",\"response\":\"r\",\"score\":1.5}", Schema::scored).field(), "score");
  EXPECT_EQ(parse_error("{\"prompt\":\"p\",\"chosen\":\"a\",\"rejected\":\"a\"}", Schema::pairwise).field(), "rejected");
  EXPECT_EQ(parse_error("\n  \n", Schema::scored).kind(), DataError::Kind::empty_file);
}

TEST(Records, RoundTripPreservesBytes) {
  const std::vector<ScoredExample> recs{{"tab\there \"quoted\"", "\xc3\xa9\xe2\x82\xac", 0.1, Origin::pairwise_rejected},
                                        {"p", "r", 1.0 / 3.0, Origin::native_score}};
  const std::string text = format_records(std::span<const ScoredExample>(recs));
  const auto back = std::get<std::vector<ScoredExample>>(parse(text, Schema::scored));
  EXPECT_EQ(back, recs);
  EXPECT_EQ(format_records(std::span<const ScoredExample>(back)), text);
}

TEST(Records, InvalidUtf8IsRejectedOnWrite) {
  const InstructionExample bad{"\xff\xfe", "r"};
  EXPECT_THROW(to_record_line(bad), DataError);
}

TEST(Convert, InstructionToScoredIsScoreOne) {
  std::vector<InstructionExample> inst;
  for (int i = 0; i < 20000; ++i) inst.push_back({"p" + std::to_string(i), "r"});
  const auto scored = instruction_to_scored(inst);
  ASSERT_EQ(scored.size(), 20000u);
  for (std::size_t i = 0; i < scored.size(); ++i) {
    EXPECT_EQ(scored[i].score, 1.0);
    EXPECT_EQ(scored[i].prompt, inst[i].prompt);
    EXPECT_EQ(scored[i].origin, Origin::instruction);
  }
}

TEST(Convert, PairwiseInterleavesChosenAndRejected) {
  const std::vector<PairwiseExample> pairs{{"p", "w", "l"}, {"q", "w2", "l2"}};
  const auto s = pairwise_to_scored(pairs);
  ASSERT_EQ(s.size(), 4u);
  EXPECT_EQ(s[0].response, "w");
  EXPECT_EQ(s[0].score, 1.0);
  EXPECT_EQ(s[1].response, "l");
  EXPECT_EQ(s[1].score, 0.0);
  EXPECT_EQ(s[3].origin, Origin::pairwise_rejected);
}

TEST(Convert, UnfoldThreeTurnConversation) {
  const std::vector<Conversation> c{{{"u1", "a1", "u2", "a2", "u3", "a3"}}};
  const auto out = unfold_conversation(c);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0].prompt, "u1");
  EXPECT_EQ(out[1].prompt, "u1\na1\nu2");
  EXPECT_EQ(out[2].prompt, "u1\na1\nu2\na2\nu3");
  EXPECT_EQ(out[2].response, "a3");
}

TEST(Mix, CountsAndDeterminism) {
  const std::map<std::string, std::vector<ScoredExample>> pools{{"a", numbered("a", 50)}, {"b", numbered("b", 30)}};
  MixSpec spec{{{"a", 20}, {"b", 30}}, 7};
  const auto m1 = mix(spec, pools);
  const auto m2 = mix(spec, pools);
  EXPECT_EQ(m1, m2);
  ASSERT_EQ(m1.size(), 50u);
  std::size_t from_a = 0;
  std::set<std::string> seen;
  for (const auto& ex : m1) {
    from_a += ex.prompt[0] == 'a';
    seen.insert(ex.prompt);
  }
  EXPECT_EQ(from_a, 20u);
  EXPECT_EQ(seen.size(), 50u);
  spec.seed = 8;
  EXPECT_NE(mix(spec, pools), m1);
}

TEST(Mix, LargeMergeSize) {
  const std::map<std::string, std::vector<ScoredExample>> pools{{"i", numbered("i", 20000)}, {"s", numbered("s", 20000)}};
  EXPECT_EQ(mix({{{"i", 20000}, {"s", 20000}}, 1}, pools).size(), 40000u);
}

TEST(Mix, Errors) {
  const std::map<std::string, std::vector<ScoredExample>> pools{{"a", numbered("a", 5)}};
  try {
    (void)mix({{{"a", 6}}, 0}, pools);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_EQ(e.kind(), DataError::Kind::count_exceeds_source);
  }
  EXPECT_THROW(mix({{{"zzz", 1}}, 0}, pools), DataError);
  EXPECT_THROW(mix({{}, 0}, pools), DataError);
}

TEST(Mix, SpecFileResolvesRelativePaths) {
  const auto dir = std::filesystem::temp_directory_path() / "uftlab_mix_spec_test";
  std::filesystem::create_directories(dir);
  write_records(dir / "a.jsonl", std::vector<InstructionExample>{{"p", "r"}, {"q", "s"}});
  std::ofstream(dir / "mix.json") << R"({"seed": 3, "sources": [{"path": "a.jsonl", "schema": "instruction", "count": 2}]})";
  const MixFile f = parse_mix_file(dir / "mix.json");
  EXPECT_EQ(f.spec.seed, 3u);
  EXPECT_EQ(f.paths.at("a.jsonl"), dir / "a.jsonl");
  EXPECT_EQ(f.schemas.at("a.jsonl"), Schema::instruction);
}

TEST(Schema, NamesRoundTrip) {
  for (const Schema s : {Schema::instruction, Schema::pairwise, Schema::scored, Schema::conversation}) {
    EXPECT_EQ(parse_schema(schema_name(s)), s);
  }
  EXPECT_THROW(parse_schema("binary"), UsageError);
}
