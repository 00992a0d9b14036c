// SPDX-License-Identifier: Apache-2.0

#include "convert.hpp"

#include <regex>
#include <sstream>

#include "greater/common.hpp"
#include "greater/io.hpp"

namespace greater::cli {

using nlohmann::json;

namespace {

std::string trim(std::string s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string gsm8k_target(const std::string& answer) {
  static const std::regex number(R"(^-?[0-9][0-9,]*(\.[0-9]+)?$)");
  const auto at = answer.rfind("####");
  std::string t = trim(at == std::string::npos ? answer : answer.substr(at + 4));
  if (at == std::string::npos && !std::regex_match(t, number))
    throw DataError("gsm8k answer has no '####' marker: " + answer.substr(0, 40));
  std::string out;
  for (char c : t)
    if (c != ',') out.push_back(c);
  return out;
}

std::string bbh_target(const std::string& target) {
  static const std::regex option(R"(^\s*\(([A-Za-z])\)\s*$)");
  std::smatch m;
  if (std::regex_match(target, m, option)) return std::string(1, static_cast<char>(std::toupper(m.str(1)[0])));
  return trim(target);
}

std::string text_of(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::string out;
    for (const auto& x : v) {
      if (!out.empty()) out += " ";
      out += text_of(x);
    }
    return out;
  }
  return v.dump();
}

json canonical(const json& rec, std::string input, std::string target) {
  json out;
  if (rec.contains("id")) out["id"] = rec["id"];
  out["input"] = std::move(input);
  out["target"] = std::move(target);
  return out;
}

}  // namespace

json convert_record(std::string_view format, const json& rec) {
  if (!rec.is_object()) throw DataError("record is not a JSON object");
  const bool done = rec.contains("input") && rec.contains("target");
  if (format == "gsm8k") {
    if (done) return canonical(rec, text_of(rec["input"]), gsm8k_target(text_of(rec["target"])));
    if (!rec.contains("question") || !rec.contains("answer"))
      throw DataError("gsm8k record needs \"question\" and \"answer\"");
    return canonical(rec, text_of(rec["question"]), gsm8k_target(text_of(rec["answer"])));
  }
  if (format == "bbh") {
    if (!done) throw DataError("bbh record needs \"input\" and \"target\"");
    return canonical(rec, text_of(rec["input"]), bbh_target(text_of(rec["target"])));
  }
  if (format == "folio") {
    if (done) return canonical(rec, text_of(rec["input"]), trim(text_of(rec["target"])));
    if (!rec.contains("premises") || !rec.contains("conclusion") || !rec.contains("label"))
      throw DataError("folio record needs \"premises\", \"conclusion\" and \"label\"");
    std::string premises;
    if (rec["premises"].is_array()) {
      for (const auto& p : rec["premises"]) premises += (premises.empty() ? "" : "\n") + text_of(p);
    } else {
      premises = text_of(rec["premises"]);
    }
    return canonical(rec, "Premises: " + premises + "\nConclusion: " + text_of(rec["conclusion"]),
                     trim(text_of(rec["label"])));
  }
  throw ConfigError("unknown source format '" + std::string(format) + "' (expected gsm8k, bbh or folio)");
}

ConvertStats convert_file(std::string_view format, const std::filesystem::path& in, const std::filesystem::path& out) {
  if (format != "gsm8k" && format != "bbh" && format != "folio")
    throw ConfigError("unknown source format '" + std::string(format) + "' (expected gsm8k, bbh or folio)");
  std::string content;
  try {
    content = read_file(in);
  } catch (const ConfigError&) {
    throw DataError("cannot open '" + in.string() + "'");
  }

  std::vector<json> records;
  const auto first = content.find_first_not_of(" \t\r\n");
  bool document = false;
  if (first != std::string::npos && content[first] == '{') {
    // A whole-file JSON document with an examples array (bbh layout).
    try {
      const auto doc = json::parse(content);
      if (doc.is_object() && doc.contains("examples") && doc["examples"].is_array()) {
        for (const auto& r : doc["examples"]) records.push_back(r);
        document = true;
      }
    } catch (const json::exception&) {
    }
  }
  if (!document) {
    std::istringstream lines(content);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(lines, line)) {
      ++lineno;
      if (trim(line).empty()) continue;
      try {
        records.push_back(json::parse(line));
      } catch (const json::exception& e) {
        throw DataError(in.string() + ":" + std::to_string(lineno) + ": malformed JSON (" + e.what() + ")");
      }
    }
  }

  ConvertStats stats;
  std::string body;
  for (std::size_t i = 0; i < records.size(); ++i) {
    ++stats.read;
    json c;
    try {
      c = convert_record(format, records[i]);
    } catch (const DataError& e) {
      throw DataError(in.string() + ": record " + std::to_string(i + 1) + ": " + e.what());
    }
    body += c.dump() + "\n";
    ++stats.written;
  }
  write_atomic(out, body);
  return stats;
}

}  // namespace greater::cli
