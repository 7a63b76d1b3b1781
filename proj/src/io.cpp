#include "difflob/io.hpp"

#include <bit>
#include <charconv>
#include <fstream>
#include <sstream>

#include "difflob/error.hpp"

namespace difflob::io {

static_assert(std::endian::native == std::endian::little, "f32le/f64le files require a little-endian host");

namespace {

template <typename T>
void write_raw(const std::filesystem::path& path, std::span<const T> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
  if (!out) throw DataError("write failed: " + path.string());
}

template <typename T>
std::vector<T> read_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path.string());
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes % sizeof(T) != 0) throw DataError("truncated array file: " + path.string());
  in.seekg(0, std::ios::beg);
  std::vector<T> data(bytes / sizeof(T));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw DataError("read failed: " + path.string());
  return data;
}

}  // namespace

void write_f32le(const std::filesystem::path& path, std::span<const float> data) { write_raw(path, data); }
void write_f64le(const std::filesystem::path& path, std::span<const double> data) { write_raw(path, data); }
std::vector<float> read_f32le(const std::filesystem::path& path) { return read_raw<float>(path); }
std::vector<double> read_f64le(const std::filesystem::path& path) { return read_raw<double>(path); }

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open: " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const json& doc) {
  write_text(path, doc.dump(2) + "\n");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

std::string format_double(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc()) return std::to_string(value);
  return std::string(buf, ptr);
}

void create_fresh_directory(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir) || !fs::is_empty(dir)) {
      throw ConfigError("output directory exists and is not empty: " + dir.string());
    }
    return;
  }
  fs::create_directories(dir);
}

}  // namespace difflob::io
