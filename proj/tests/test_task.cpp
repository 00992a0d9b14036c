// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "greater/task.hpp"

using namespace greater;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "greater_task_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<TaskSample> numbered(std::size_t n, const std::string& prefix = "r") {
  std::vector<TaskSample> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back({prefix + std::to_string(i), "q " + std::to_string(i), std::to_string(i), AnswerKind::numeric});
  return out;
}

}  // namespace

TEST_CASE("split spec presets and explicit counts") {
  const auto bbh = SplitSpec::parse("bbh");
  CHECK(bbh.train == 50);
  CHECK(bbh.dev == 100);
  CHECK(bbh.test == 100);
  const auto gsm = SplitSpec::parse("gsm8k");
  CHECK(gsm.train == 100);
  CHECK(gsm.dev == 100);
  CHECK(gsm.test == 1319);
  const auto folio = SplitSpec::parse("folio");
  CHECK(folio.train == 50);
  CHECK(folio.test == 203);

  const auto s = SplitSpec::parse("3/4/all");
  CHECK(s.train == 3);
  CHECK(s.dev == 4);
  CHECK_FALSE(s.test.has_value());
  CHECK(s.to_string() == "3/4/all");
  CHECK(SplitSpec::parse("1/2/3").to_string() == "1/2/3");

  CHECK_THROWS_AS(SplitSpec::parse("1/2"), ConfigError);
  CHECK_THROWS_AS(SplitSpec::parse("a/2/3"), ConfigError);
  CHECK_THROWS_AS(SplitSpec::parse("mmlu"), ConfigError);
}

TEST_CASE("splits are disjoint, sized and seed-deterministic") {
  const auto records = numbered(300);
  const auto ds = make_splits("t", AnswerKind::numeric, records, SplitSpec::parse("bbh", 7));
  CHECK(ds.train.size() == 50);
  CHECK(ds.dev.size() == 100);
  CHECK(ds.test.size() == 100);
  std::set<std::string> ids;
  for (const auto* split : {&ds.train, &ds.dev, &ds.test})
    for (const auto& s : *split) CHECK(ids.insert(s.id).second);

  const auto again = make_splits("t", AnswerKind::numeric, records, SplitSpec::parse("bbh", 7));
  CHECK(again.train == ds.train);
  CHECK(again.test == ds.test);
  const auto other = make_splits("t", AnswerKind::numeric, records, SplitSpec::parse("bbh", 8));
  CHECK(other.train != ds.train);

  CHECK_THROWS_AS(make_splits("t", AnswerKind::numeric, numbered(249), SplitSpec::parse("bbh")), DataError);
}

TEST_CASE("separate test file is used in order and in full") {
  const auto main = numbered(200);
  const auto test = numbered(1319, "test:");
  const auto ds = make_splits("gsm", AnswerKind::numeric, main, SplitSpec::parse("gsm8k"), test);
  CHECK(ds.train.size() == 100);
  CHECK(ds.dev.size() == 100);
  REQUIRE(ds.test.size() == 1319);
  CHECK(ds.test.front().id == "test:0");
  CHECK(ds.test.back().id == "test:1318");
  CHECK_THROWS_AS(make_splits("gsm", AnswerKind::numeric, main, SplitSpec::parse("gsm8k"), numbered(10, "t")),
                  DataError);
}

TEST_CASE("jsonl reading") {
  const auto path = scratch("ok.jsonl");
  {
    std::ofstream out(path);
    out << R"({"input": "What is 1+1?", "target": "2"})" << "\n\n";
    out << R"({"id": "x", "input": "b", "target": "3"})" << "\n";
  }
  const auto recs = read_jsonl(path, AnswerKind::numeric);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].id == "L1");
  CHECK(recs[1].id == "x");
  CHECK(recs[0].target == "2");

  write_jsonl(scratch("copy.jsonl"), recs);
  CHECK(read_jsonl(scratch("copy.jsonl"), AnswerKind::numeric) == recs);

  const auto bad = scratch("bad.jsonl");
  {
    std::ofstream out(bad);
    out << R"({"input": "a", "target": "1"})" << "\n";
    out << R"({"input": "a"})" << "\n";
  }
  try {
    read_jsonl(bad, AnswerKind::numeric);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("bad.jsonl:2") != std::string::npos);
  }
  {
    std::ofstream out(bad);
    out << "{not json\n";
  }
  CHECK_THROWS_AS(read_jsonl(bad, AnswerKind::numeric), DataError);
  {
    std::ofstream out(bad);
    out << R"({"input": "a", "target": "7"})" << "\n";
  }
  CHECK_THROWS_AS(read_jsonl(bad, AnswerKind::multiple_choice), DataError);
  CHECK_THROWS_AS(read_jsonl(scratch("missing.jsonl"), AnswerKind::numeric), DataError);
}

TEST_CASE("metric") {
  CHECK(metric("72", "72", AnswerKind::numeric) == 1);
  CHECK(metric("72.0", "72", AnswerKind::numeric) == 1);
  CHECK(metric("1,000", "1000", AnswerKind::numeric) == 1);
  CHECK(metric("$5", "5", AnswerKind::numeric) == 1);
  CHECK(metric("71", "72", AnswerKind::numeric) == 0);
  CHECK(metric("seventy", "72", AnswerKind::numeric) == 0);
  CHECK(metric("no-answer", "72", AnswerKind::numeric) == 0);

  CHECK(metric("b", "B", AnswerKind::multiple_choice) == 1);
  CHECK(metric("(B)", "B", AnswerKind::multiple_choice) == 1);
  CHECK(metric("C", "B", AnswerKind::multiple_choice) == 0);

  CHECK(metric("true", "True", AnswerKind::label) == 1);
  CHECK(metric("Uncertain.", "uncertain", AnswerKind::label) == 1);
  CHECK(metric("False", "True", AnswerKind::label) == 0);
  CHECK(metric("", "", AnswerKind::label) == 0);
  CHECK(metric("no-answer", "no-answer", AnswerKind::label) == 0);
}

TEST_CASE("answer kinds round trip") {
  for (auto k : {AnswerKind::numeric, AnswerKind::multiple_choice, AnswerKind::label})
    CHECK(parse_answer_kind(to_string(k)) == k);
  CHECK_THROWS_AS(parse_answer_kind("free-text"), ConfigError);
}
