// SPDX-License-Identifier: Apache-2.0

#include "greater/task.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "greater/rng.hpp"

namespace greater {

using nlohmann::json;

std::string to_string(AnswerKind kind) {
  switch (kind) {
    case AnswerKind::numeric: return "numeric";
    case AnswerKind::multiple_choice: return "multiple-choice";
    case AnswerKind::label: return "label";
  }
  return "numeric";
}

AnswerKind parse_answer_kind(std::string_view text) {
  if (text == "numeric") return AnswerKind::numeric;
  if (text == "multiple-choice" || text == "multiple_choice" || text == "mc") return AnswerKind::multiple_choice;
  if (text == "label") return AnswerKind::label;
  throw ConfigError("unknown answer kind '" + std::string(text) + "' (expected numeric, multiple-choice or label)");
}

void TaskSample::validate() const {
  if (input.empty()) throw DataError("sample " + id + ": empty input");
  if (target.empty()) throw DataError("sample " + id + ": empty target");
  if (kind == AnswerKind::multiple_choice &&
      !(target.size() == 1 && target[0] >= 'A' && target[0] <= 'Z'))
    throw DataError("sample " + id + ": multiple-choice target '" + target + "' is not a single letter A-Z");
}

namespace {

std::size_t parse_count(std::string_view s, std::string_view whole) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ConfigError("split spec '" + std::string(whole) + "': '" + std::string(s) + "' is not a count");
  return v;
}

}  // namespace

SplitSpec SplitSpec::parse(std::string_view text, std::uint64_t seed) {
  SplitSpec s;
  s.seed = seed;
  if (text == "bbh") {
    s.train = 50, s.dev = 100, s.test = 100;
  } else if (text == "gsm8k") {
    s.train = 100, s.dev = 100, s.test = 1319;
  } else if (text == "folio") {
    s.train = 50, s.dev = 100, s.test = 203;
  } else {
    const auto a = text.find('/');
    const auto b = a == std::string_view::npos ? a : text.find('/', a + 1);
    if (a == std::string_view::npos || b == std::string_view::npos)
      throw ConfigError("split spec '" + std::string(text) + "': expected a preset (bbh, gsm8k, folio) or train/dev/test");
    s.train = parse_count(text.substr(0, a), text);
    s.dev = parse_count(text.substr(a + 1, b - a - 1), text);
    const auto t = text.substr(b + 1);
    if (t == "all")
      s.test.reset();
    else
      s.test = parse_count(t, text);
  }
  return s;
}

std::string SplitSpec::to_string() const {
  return std::to_string(train) + "/" + std::to_string(dev) + "/" + (test ? std::to_string(*test) : std::string("all"));
}

const std::vector<TaskSample>& TaskDataset::split(std::string_view which) const {
  if (which == "train") return train;
  if (which == "dev") return dev;
  if (which == "test") return test;
  throw ConfigError("unknown split '" + std::string(which) + "' (expected train, dev or test)");
}

std::vector<TaskSample> read_jsonl(const std::filesystem::path& path, AnswerKind kind, std::string_view id_prefix) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset '" + path.string() + "'");
  std::vector<TaskSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c) != 0; })) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!rec.is_object() || !rec.contains("input") || !rec.contains("target") || !rec["input"].is_string() ||
        !rec["target"].is_string())
      throw DataError(where + ": record needs string fields \"input\" and \"target\"");
    TaskSample s;
    if (rec.contains("id")) {
      s.id = rec["id"].is_string() ? rec["id"].get<std::string>() : rec["id"].dump();
    } else {
      s.id = std::string(id_prefix) + "L" + std::to_string(lineno);
    }
    s.input = rec["input"].get<std::string>();
    s.target = rec["target"].get<std::string>();
    s.kind = kind;
    try {
      s.validate();
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    out.push_back(std::move(s));
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<TaskSample>& samples) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  for (const auto& s : samples) out << json{{"id", s.id}, {"input", s.input}, {"target", s.target}}.dump() << '\n';
}

TaskDataset make_splits(std::string name, AnswerKind kind, std::vector<TaskSample> records, const SplitSpec& spec,
                        std::optional<std::vector<TaskSample>> test_records) {
  const std::size_t from_main = spec.train + spec.dev + (test_records ? 0 : spec.test.value_or(0));
  if (records.size() < from_main)
    throw DataError("dataset '" + name + "': split " + spec.to_string() + " needs " + std::to_string(from_main) +
                    " records, found " + std::to_string(records.size()));
  if (test_records && spec.test && test_records->size() < *spec.test)
    throw DataError("dataset '" + name + "': test split needs " + std::to_string(*spec.test) + " records, found " +
                    std::to_string(test_records->size()));

  Rng rng(derive_seed(spec.seed, 0x5e11));
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  TaskDataset ds;
  ds.name = std::move(name);
  ds.kind = kind;
  std::size_t cursor = 0;
  auto take = [&](std::size_t n, std::vector<TaskSample>& dst) {
    for (std::size_t i = 0; i < n; ++i) dst.push_back(records[order[cursor++]]);
  };
  take(spec.train, ds.train);
  take(spec.dev, ds.dev);
  if (test_records) {
    const std::size_t n = spec.test.value_or(test_records->size());
    ds.test.assign(test_records->begin(), test_records->begin() + static_cast<std::ptrdiff_t>(n));
  } else {
    take(spec.test.value_or(records.size() - cursor), ds.test);
  }

  std::set<std::string> ids;
  for (const auto* split : {&ds.train, &ds.dev, &ds.test}) {
    for (const auto& s : *split) {
      if (!ids.insert(s.id).second) throw DataError("dataset '" + ds.name + "': sample id '" + s.id + "' repeats");
    }
  }
  return ds;
}

TaskDataset load_dataset(const std::filesystem::path& path, AnswerKind kind, const SplitSpec& spec,
                         const std::optional<std::filesystem::path>& test_path) {
  auto records = read_jsonl(path, kind);
  std::optional<std::vector<TaskSample>> test;
  if (test_path) test = read_jsonl(*test_path, kind, "test:");
  return make_splits(path.stem().string(), kind, std::move(records), spec, std::move(test));
}

std::optional<double> parse_number(std::string_view text) {
  std::string s;
  for (char c : text) {
    if (c == ',' || c == '$' || std::isspace(static_cast<unsigned char>(c))) continue;
    s.push_back(c);
  }
  while (!s.empty() && s.back() == '.') s.pop_back();
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

namespace {

std::string fold(std::string_view text) {
  std::string out;
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::ispunct(u) || std::isspace(u)) continue;
    out.push_back(static_cast<char>(std::tolower(u)));
  }
  return out;
}

}  // namespace

int metric(std::string_view prediction, std::string_view gold, AnswerKind kind) {
  if (prediction == kNoAnswer || gold == kNoAnswer) return 0;
  if (kind == AnswerKind::numeric) {
    const auto a = parse_number(prediction);
    const auto b = parse_number(gold);
    if (!a || !b) return 0;
    return std::abs(*a - *b) <= 1e-9 * std::max({1.0, std::abs(*a), std::abs(*b)}) ? 1 : 0;
  }
  const std::string a = fold(prediction);
  const std::string b = fold(gold);
  return !a.empty() && a == b ? 1 : 0;
}

}  // namespace greater
