#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace pecad::io {

namespace fs = std::filesystem;
using Json = nlohmann::json;

// Little-endian raw arrays. The host is asserted little-endian at compile
// time, so these are straight byte copies.
void write_i16(const fs::path& path, std::span<const std::int16_t> values);
std::vector<std::int16_t> read_i16(const fs::path& path);

void write_f32(const fs::path& path, std::span<const float> values);
std::vector<float> read_f32(const fs::path& path);

void write_f64(const fs::path& path, std::span<const double> values);
std::vector<double> read_f64(const fs::path& path);

std::uintmax_t file_size(const fs::path& path);

Json read_json(const fs::path& path);
void write_json(const fs::path& path, const Json& value);

std::string read_text(const fs::path& path);
// Writes to a sibling temp file then renames over the target.
void write_text_atomic(const fs::path& path, const std::string& text);

// Hex SHA-256 of a byte string.
std::string sha256_hex(const std::string& bytes);

// Minimal RFC-4180-ish CSV: no quoting support beyond plain fields.
std::vector<std::vector<std::string>> read_csv(const fs::path& path);

}  // namespace pecad::io
