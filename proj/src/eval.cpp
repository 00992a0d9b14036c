// SPDX-License-Identifier: Apache-2.0

#include "greater/eval.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <map>
#include <sstream>

#include "greater/io.hpp"

namespace greater {

using nlohmann::json;

DecodeConfig EvalRequest::decode() const {
  DecodeConfig d;
  d.max_new_tokens = max_new_tokens;
  d.stop_sequences = stop_sequences;
  return d;
}

ExtractionTemplate EvalRequest::extraction() const {
  auto t = ExtractionTemplate::default_for(parse_answer_kind(answer_kind));
  if (!extraction_template.empty()) t.text = extraction_template;
  return t;
}

json EvalRequest::to_json() const {
  return {{"model", model},
          {"task", task},
          {"split_spec", split_spec},
          {"data_seed", data_seed},
          {"answer_kind", answer_kind},
          {"extraction_template", extraction_template},
          {"split", split},
          {"prompt", prompt},
          {"max_new_tokens", max_new_tokens},
          {"stop_sequences", stop_sequences},
          {"answer_tokens", answer_tokens}};
}

EvalRequest EvalRequest::from_json(const json& j) {
  EvalRequest r;
  try {
    r.model = j.at("model").get<std::string>();
    r.task = j.at("task").get<std::string>();
    r.split_spec = j.at("split_spec").get<std::string>();
    r.data_seed = j.at("data_seed").get<std::uint64_t>();
    r.answer_kind = j.at("answer_kind").get<std::string>();
    r.extraction_template = j.at("extraction_template").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.prompt = j.at("prompt").get<std::string>();
    r.max_new_tokens = j.at("max_new_tokens").get<std::size_t>();
    r.stop_sequences = j.at("stop_sequences").get<std::vector<std::string>>();
    r.answer_tokens = j.at("answer_tokens").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("evaluation request: ") + e.what());
  }
  return r;
}

std::string EvalRequest::settings_hash() const {
  auto j = to_json();
  j.erase("model");
  j.erase("prompt");
  return hex64(fnv1a64(j.dump()));
}

json EvalReport::to_json() const {
  json per = json::array();
  for (const auto& s : samples) {
    per.push_back({{"id", s.id},
                   {"prediction", s.prediction},
                   {"gold", s.gold},
                   {"correct", s.correct},
                   {"continuation", s.continuation},
                   {"diagnostic", s.diagnostic}});
  }
  return {{"task", request.task},
          {"model", request.model},
          {"prompt", request.prompt},
          {"split", request.split},
          {"accuracy", accuracy},
          {"timestamp", timestamp},
          {"config_hash", config_hash},
          {"request", request.to_json()},
          {"samples", per}};
}

EvalReport EvalReport::from_json(const json& j) {
  EvalReport r;
  try {
    r.request = EvalRequest::from_json(j.at("request"));
    r.accuracy = j.at("accuracy").get<double>();
    r.timestamp = j.at("timestamp").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& s : j.at("samples")) {
      r.samples.push_back({s.at("id").get<std::string>(), s.at("prediction").get<std::string>(),
                           s.at("gold").get<std::string>(), s.at("correct").get<int>(),
                           s.value("continuation", std::string()), s.value("diagnostic", std::string())});
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("evaluation report: ") + e.what());
  }
  return r;
}

EvalReport evaluate(const LanguageModel& model, const TaskDataset& dataset, const EvalRequest& request) {
  const auto& split = dataset.split(request.split);
  if (split.empty()) throw DataError("split '" + request.split + "' of '" + dataset.name + "' is empty");
  const auto tmpl = request.extraction();
  tmpl.validate();
  const auto decode = request.decode();
  decode.validate();
  const auto prompt = model.tokenize(request.prompt);

  EvalReport rep;
  rep.request = request;
  rep.timestamp = utc_timestamp();
  rep.config_hash = request.settings_hash();
  std::size_t correct = 0;
  for (const auto& s : split) {
    SampleResult r;
    r.id = s.id;
    r.gold = s.target;
    try {
      const auto got = extract_answer(model, s, prompt, tmpl, decode, request.answer_tokens);
      r.prediction = got.answer;
      r.continuation = got.continuation;
    } catch (const std::exception& e) {
      r.prediction = std::string(kNoAnswer);
      r.diagnostic = e.what();
    }
    r.correct = metric(r.prediction, r.gold, s.kind);
    correct += static_cast<std::size_t>(r.correct);
    rep.samples.push_back(std::move(r));
  }
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(split.size());
  return rep;
}

void write_report(const std::filesystem::path& path, const EvalReport& report) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_atomic(path, report.to_json().dump(2) + "\n");
}

EvalReport read_report(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse report '" + path.string() + "': " + e.what());
  }
  return EvalReport::from_json(j);
}

json Comparison::to_json() const {
  json rs = json::array();
  for (const auto& r : rows) {
    rs.push_back({{"label", r.label},
                  {"model", r.model},
                  {"prompt", r.prompt},
                  {"accuracy", r.accuracy},
                  {"delta", r.delta},
                  {"outcome", r.outcome},
                  {"sample_wins", r.sample_wins},
                  {"sample_draws", r.sample_draws},
                  {"sample_losses", r.sample_losses},
                  {"input_index", r.input_index}});
  }
  return {{"task", task}, {"split", split}, {"rows", rs}};
}

std::string Comparison::to_text() const {
  std::vector<std::array<std::string, 6>> cells;
  cells.push_back({"label", "model", "accuracy", "delta", "vs first", "w/d/l"});
  char buf[64];
  for (const auto& r : rows) {
    std::array<std::string, 6> c;
    c[0] = r.label;
    c[1] = r.model;
    std::snprintf(buf, sizeof buf, "%.4f", r.accuracy);
    c[2] = buf;
    std::snprintf(buf, sizeof buf, "%+.4f", r.delta);
    c[3] = buf;
    c[4] = r.outcome;
    c[5] = std::to_string(r.sample_wins) + "/" + std::to_string(r.sample_draws) + "/" +
           std::to_string(r.sample_losses);
    cells.push_back(std::move(c));
  }
  std::array<std::size_t, 6> width{};
  for (const auto& c : cells)
    for (std::size_t i = 0; i < 6; ++i) width[i] = std::max(width[i], c[i].size());
  std::ostringstream out;
  out << "task " << task << ", split " << split << "\n";
  for (const auto& c : cells) {
    for (std::size_t i = 0; i < 6; ++i) {
      // Numbers right-aligned, text left-aligned.
      const bool right = i == 2 || i == 3;
      const std::string pad(width[i] - c[i].size(), ' ');
      out << (right ? pad + c[i] : c[i] + pad) << (i + 1 < 6 ? "  " : "");
    }
    out << "\n";
  }
  return out.str();
}

Comparison compare(const std::vector<EvalReport>& reports, const std::vector<std::string>& labels) {
  if (reports.empty()) throw ConfigError("compare: no reports");
  if (!labels.empty() && labels.size() != reports.size()) throw ConfigError("compare: one label per report");
  const auto& base = reports.front();
  for (std::size_t i = 1; i < reports.size(); ++i) {
    const auto& r = reports[i];
    if (r.request.task != base.request.task || r.request.split != base.request.split)
      throw ConfigError("compare: report " + std::to_string(i) + " is for task '" + r.request.task + "' split '" +
                        r.request.split + "', expected task '" + base.request.task + "' split '" +
                        base.request.split + "'");
    if (r.config_hash != base.config_hash)
      throw ConfigError("compare: report " + std::to_string(i) + " was produced with different settings (" +
                        r.config_hash + " vs " + base.config_hash + ")");
  }
  std::map<std::string, int> base_correct;
  for (const auto& s : base.samples) base_correct[s.id] = s.correct;

  Comparison cmp;
  cmp.task = base.request.task;
  cmp.split = base.request.split;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    ComparisonRow row;
    row.input_index = i;
    row.label = labels.empty() ? "#" + std::to_string(i) : labels[i];
    row.model = r.request.model;
    row.prompt = r.request.prompt;
    row.accuracy = r.accuracy;
    row.delta = r.accuracy - base.accuracy;
    if (i == 0)
      row.outcome = "baseline";
    else
      row.outcome = r.accuracy > base.accuracy ? "win" : r.accuracy < base.accuracy ? "loss" : "draw";
    for (const auto& s : r.samples) {
      const auto it = base_correct.find(s.id);
      if (it == base_correct.end()) continue;
      if (s.correct > it->second)
        ++row.sample_wins;
      else if (s.correct < it->second)
        ++row.sample_losses;
      else
        ++row.sample_draws;
    }
    cmp.rows.push_back(std::move(row));
  }
  std::stable_sort(cmp.rows.begin(), cmp.rows.end(),
                   [](const ComparisonRow& a, const ComparisonRow& b) { return a.accuracy > b.accuracy; });
  return cmp;
}

}  // namespace greater
