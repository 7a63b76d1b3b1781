#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace difflob::io {

using json = nlohmann::json;

// Little-endian raw array files. The host is assumed little-endian; this is
// checked at compile time in io.cpp.
void write_f32le(const std::filesystem::path& path, std::span<const float> data);
void write_f64le(const std::filesystem::path& path, std::span<const double> data);
std::vector<float> read_f32le(const std::filesystem::path& path);
std::vector<double> read_f64le(const std::filesystem::path& path);

json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const json& doc);

void write_text(const std::filesystem::path& path, const std::string& text);

/// Shortest decimal representation that parses back to the same double.
std::string format_double(double value);

/// Creates `dir` (and parents). Throws ConfigError if it already exists and
/// is not empty, so that run directories are never overwritten.
void create_fresh_directory(const std::filesystem::path& dir);

}  // namespace difflob::io
