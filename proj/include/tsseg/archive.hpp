#pragma once

// Self-describing binary container: an 8-byte magic, a little-endian u64
// header length, a JSON header (metadata + array index) and the raw
// little-endian array payloads in index order.

#include "tsseg/core.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>

namespace tsseg {

enum class DType { F32, F64, I32 };

class Archive {
 public:
  nlohmann::json meta = nlohmann::json::object();

  void put(const std::string& name, const Planes<float>& m) { put_raw(name, DType::F32, m.rows(), m.cols(), m.data()); }
  void put(const std::string& name, const Planes<double>& m) { put_raw(name, DType::F64, m.rows(), m.cols(), m.data()); }
  void put(const std::string& name, const IndexGrid& m) { put_raw(name, DType::I32, m.rows(), m.cols(), m.data()); }

  bool contains(const std::string& name) const;
  std::vector<std::string> names() const;

  /// Reads an array, converting between float widths if needed.
  template <typename Scalar>
  Planes<Scalar> get(const std::string& name) const;
  IndexGrid get_index(const std::string& name) const;

  std::vector<std::uint8_t> serialize() const;
  static Archive deserialize(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);

 private:
  struct Entry {
    std::string name;
    DType dtype;
    Eigen::Index rows, cols;
    std::vector<std::uint8_t> bytes;
  };
  void put_raw(const std::string& name, DType dtype, Eigen::Index rows, Eigen::Index cols, const void* data);
  const Entry& find(const std::string& name) const;

  std::vector<Entry> entries_;
};

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string file_digest(const std::filesystem::path& path);

/// Writes bytes to path via a temporary sibling and rename.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace tsseg
