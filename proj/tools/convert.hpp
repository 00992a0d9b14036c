// SPDX-License-Identifier: Apache-2.0
//
// Upstream dataset layouts to canonical {"input", "target"} JSONL.

#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

namespace greater::cli {

/// One upstream record in canonical form. Records that already carry
/// "input" and "target" are normalised the same way, so converting twice is
/// a no-op. Throws DataError on records the format cannot read.
nlohmann::json convert_record(std::string_view format, const nlohmann::json& rec);

struct ConvertStats {
  std::size_t read = 0;
  std::size_t written = 0;
};

/// `format` is gsm8k, bbh or folio (ConfigError otherwise). Input is JSONL,
/// or for bbh also a JSON document with an "examples" array.
ConvertStats convert_file(std::string_view format, const std::filesystem::path& in, const std::filesystem::path& out);

}  // namespace greater::cli
