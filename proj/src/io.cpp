// SPDX-License-Identifier: Apache-2.0

#include "greater/io.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <iostream>
#include <sstream>

#include "greater/common.hpp"

namespace greater {

namespace fs = std::filesystem;

void write_atomic(const fs::path& path, std::string_view content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write '" + tmp.string() + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw ConfigError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw ConfigError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

RunLog::RunLog(const fs::path& path, bool quiet) : out_(path, std::ios::app), quiet_(quiet) {
  if (!out_) throw ConfigError("cannot open log '" + path.string() + "'");
}

void RunLog::info(std::string_view event, std::string_view message, const nlohmann::json& fields) {
  write("info", event, message, fields);
}

void RunLog::warn(std::string_view event, std::string_view message, const nlohmann::json& fields) {
  write("warn", event, message, fields);
}

void RunLog::write(std::string_view level, std::string_view event, std::string_view message,
                   const nlohmann::json& fields) {
  if (out_.is_open()) {
    nlohmann::json line{{"ts", utc_timestamp()}, {"level", level}, {"event", event}, {"message", message}};
    if (fields.is_object())
      for (const auto& [k, v] : fields.items()) line[k] = v;
    out_ << line.dump() << '\n';
    out_.flush();
  }
  if (!quiet_) std::cerr << "[" << level << "] " << message << '\n';
}

}  // namespace greater
