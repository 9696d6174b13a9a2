#include "pecad/core/io.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include "pecad/core/error.hpp"

namespace pecad::io {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats assume a little-endian host");

namespace {

template <typename T>
void write_raw(const fs::path& path, std::span<const T> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size_bytes()));
  if (!out) throw Error(ErrorKind::kIo, "write failed: " + path.string());
}

template <typename T>
std::vector<T> read_raw(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIngest, "missing file: " + path.string());
  const auto bytes = fs::file_size(path);
  if (bytes % sizeof(T) != 0) {
    throw Error(ErrorKind::kCorruptVolume,
                path.string() + ": byte count " + std::to_string(bytes) +
                    " is not a multiple of " + std::to_string(sizeof(T)));
  }
  std::vector<T> values(bytes / sizeof(T));
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw Error(ErrorKind::kIo, "read failed: " + path.string());
  return values;
}

}  // namespace

void write_i16(const fs::path& path, std::span<const std::int16_t> values) {
  write_raw(path, values);
}
std::vector<std::int16_t> read_i16(const fs::path& path) {
  return read_raw<std::int16_t>(path);
}
void write_f32(const fs::path& path, std::span<const float> values) {
  write_raw(path, values);
}
std::vector<float> read_f32(const fs::path& path) { return read_raw<float>(path); }
void write_f64(const fs::path& path, std::span<const double> values) {
  write_raw(path, values);
}
std::vector<double> read_f64(const fs::path& path) { return read_raw<double>(path); }

std::uintmax_t file_size(const fs::path& path) {
  std::error_code ec;
  const auto size = fs::file_size(path, ec);
  if (ec) throw Error(ErrorKind::kIngest, "missing file: " + path.string());
  return size;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIngest, "missing file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(ErrorKind::kIo, "cannot open for writing: " + tmp.string());
    out << text;
    if (!out) throw Error(ErrorKind::kIo, "write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::kIo, "rename failed: " + path.string());
}

Json read_json(const fs::path& path) {
  const std::string text = read_text(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw Error(ErrorKind::kIngest, path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const Json& value) {
  write_text_atomic(path, value.dump(2) + "\n");
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (line.back() == ',') fields.emplace_back();
    rows.push_back(std::move(fields));
  }
  return rows;
}

}  // namespace pecad::io
