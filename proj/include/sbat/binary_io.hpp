#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

namespace sbat {

/// Raw little-endian float64 payload.
void write_f64_file(const std::filesystem::path& path, std::span<const double> values);
/// Throws LoadError unless the file holds exactly `expected` values.
std::vector<double> read_f64_file(const std::filesystem::path& path, std::size_t expected);

/// `<path>.json`
std::filesystem::path sidecar_path(const std::filesystem::path& path);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

/// Integer JSON value that is not negative (signed or unsigned storage).
inline bool is_json_count(const nlohmann::json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

}  // namespace sbat
