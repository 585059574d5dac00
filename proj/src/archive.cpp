#include "tsseg/archive.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little, "archive format assumes a little-endian host");

namespace tsseg {
namespace {

constexpr char kMagic[8] = {'T', 'S', 'S', 'E', 'G', 'A', 'R', '1'};

size_t dtype_size(DType t) { return t == DType::F64 ? 8 : 4; }

const char* dtype_name(DType t) {
  switch (t) {
    case DType::F32: return "f32";
    case DType::F64: return "f64";
    case DType::I32: return "i32";
  }
  return "?";
}

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::F32;
  if (s == "f64") return DType::F64;
  if (s == "i32") return DType::I32;
  throw std::runtime_error("archive: unknown dtype '" + s + "'");
}

}  // namespace

void Archive::put_raw(const std::string& name, DType dtype, Eigen::Index rows, Eigen::Index cols, const void* data) {
  for (const auto& e : entries_)
    if (e.name == name) throw std::invalid_argument("archive: duplicate array '" + name + "'");
  Entry e{name, dtype, rows, cols, {}};
  e.bytes.resize(static_cast<size_t>(rows * cols) * dtype_size(dtype));
  if (!e.bytes.empty()) std::memcpy(e.bytes.data(), data, e.bytes.size());
  entries_.push_back(std::move(e));
}

bool Archive::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

std::vector<std::string> Archive::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

const Archive::Entry& Archive::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw std::out_of_range("archive: missing array '" + name + "'");
}

template <typename Scalar>
Planes<Scalar> Archive::get(const std::string& name) const {
  const Entry& e = find(name);
  if (e.dtype == DType::F32) {
    Planes<float> m(e.rows, e.cols);
    if (m.size()) std::memcpy(m.data(), e.bytes.data(), e.bytes.size());
    return m.template cast<Scalar>();
  }
  if (e.dtype == DType::F64) {
    Planes<double> m(e.rows, e.cols);
    if (m.size()) std::memcpy(m.data(), e.bytes.data(), e.bytes.size());
    return m.template cast<Scalar>();
  }
  throw std::runtime_error("archive: array '" + name + "' is not floating point");
}

template Planes<float> Archive::get<float>(const std::string&) const;
template Planes<double> Archive::get<double>(const std::string&) const;

IndexGrid Archive::get_index(const std::string& name) const {
  const Entry& e = find(name);
  if (e.dtype != DType::I32) throw std::runtime_error("archive: array '" + name + "' is not i32");
  IndexGrid m(e.rows, e.cols);
  if (m.size()) std::memcpy(m.data(), e.bytes.data(), e.bytes.size());
  return m;
}

std::vector<std::uint8_t> Archive::serialize() const {
  nlohmann::json index = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries_) {
    index.push_back({{"name", e.name},
                     {"dtype", dtype_name(e.dtype)},
                     {"shape", {e.rows, e.cols}},
                     {"offset", offset},
                     {"nbytes", e.bytes.size()}});
    offset += e.bytes.size();
  }
  const std::string header = nlohmann::json{{"meta", meta}, {"arrays", index}}.dump();
  std::vector<std::uint8_t> out(sizeof(kMagic) + 8 + header.size() + offset);
  std::memcpy(out.data(), kMagic, sizeof(kMagic));
  const std::uint64_t hlen = header.size();
  std::memcpy(out.data() + 8, &hlen, 8);
  std::memcpy(out.data() + 16, header.data(), header.size());
  std::uint8_t* cursor = out.data() + 16 + header.size();
  for (const auto& e : entries_) {
    if (!e.bytes.empty()) std::memcpy(cursor, e.bytes.data(), e.bytes.size());
    cursor += e.bytes.size();
  }
  return out;
}

Archive Archive::deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("archive: bad magic (not a tsseg archive or corrupt)");
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 8, 8);
  if (16 + hlen > bytes.size()) throw std::runtime_error("archive: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("archive: corrupt header: ") + e.what());
  }
  Archive a;
  a.meta = header.at("meta");
  const size_t base = 16 + hlen;
  for (const auto& item : header.at("arrays")) {
    Entry e;
    e.name = item.at("name").get<std::string>();
    e.dtype = parse_dtype(item.at("dtype").get<std::string>());
    e.rows = item.at("shape").at(0).get<Eigen::Index>();
    e.cols = item.at("shape").at(1).get<Eigen::Index>();
    const auto off = item.at("offset").get<std::uint64_t>();
    const auto n = item.at("nbytes").get<std::uint64_t>();
    if (n != static_cast<std::uint64_t>(e.rows * e.cols) * dtype_size(e.dtype) || base + off + n > bytes.size())
      throw std::runtime_error("archive: array '" + e.name + "' is truncated or inconsistent");
    e.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(base + off),
                   bytes.begin() + static_cast<std::ptrdiff_t>(base + off + n));
    a.entries_.push_back(std::move(e));
  }
  return a;
}

void Archive::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  write_file_atomic(path, bytes);
}

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace tsseg
