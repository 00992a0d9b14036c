// SPDX-License-Identifier: Apache-2.0
//
// File helpers and the line-delimited JSON log.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>

#include <json.hpp>

namespace greater {

/// Writes `content` to a sibling temp file, then renames it over `path`.
void write_atomic(const std::filesystem::path& path, std::string_view content);

std::string read_file(const std::filesystem::path& path);

/// FNV-1a, 64 bit.
std::uint64_t fnv1a64(std::string_view data);
std::string hex64(std::uint64_t v);

/// UTC, ISO 8601 with seconds.
std::string utc_timestamp();

/// JSON lines to a file, mirrored as plain text to stderr unless quiet.
class RunLog {
 public:
  RunLog() = default;
  explicit RunLog(const std::filesystem::path& path, bool quiet = false);

  void info(std::string_view event, std::string_view message, const nlohmann::json& fields = {});
  void warn(std::string_view event, std::string_view message, const nlohmann::json& fields = {});
  void set_quiet(bool quiet) { quiet_ = quiet; }

 private:
  void write(std::string_view level, std::string_view event, std::string_view message, const nlohmann::json& fields);

  std::ofstream out_;
  bool quiet_ = true;
};

}  // namespace greater
