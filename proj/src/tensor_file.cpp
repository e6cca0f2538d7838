#include "oslo/tensor_file.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "oslo/errors.hpp"

namespace oslo {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

const Matrix& NamedArrays::at(const std::string& name) const {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw SchemaError(fmt::format("missing array '{}'", name));
  return it->second;
}

const std::string& NamedArrays::meta(const std::string& key) const {
  auto it = metadata.find(key);
  if (it == metadata.end()) throw SchemaError(fmt::format("missing metadata key '{}'", key));
  return it->second;
}

void save_named_arrays(const std::filesystem::path& path, const NamedArrays& data) {
  nlohmann::json header = nlohmann::json::object();
  header["__metadata__"] = data.metadata;
  std::uint64_t offset = 0;
  for (const auto& [name, m] : data.arrays) {
    const std::uint64_t bytes = static_cast<std::uint64_t>(m.size()) * sizeof(double);
    header[name] = {{"dtype", "F64"}, {"shape", {m.rows(), m.cols()}}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(fmt::format("cannot open '{}' for writing", path.string()));
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, m] : data.arrays) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const double v = m(i, j);
        out.write(reinterpret_cast<const char*>(&v), sizeof(v));
      }
    }
  }
  if (!out) throw std::runtime_error(fmt::format("write to '{}' failed", path.string()));
}

NamedArrays load_named_arrays(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SchemaError(fmt::format("cannot open '{}'", path.string()));
  const auto file_size = std::filesystem::file_size(path);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len == 0 || len > file_size - sizeof(len)) {
    throw SchemaError(fmt::format("'{}' has a corrupt header length", path.string()));
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(fmt::format("'{}' header is not valid JSON: {}", path.string(), e.what()));
  }
  const std::uint64_t data_size = file_size - sizeof(len) - len;
  std::vector<char> payload(data_size);
  in.read(payload.data(), static_cast<std::streamsize>(data_size));
  if (!in) throw SchemaError(fmt::format("'{}' is truncated", path.string()));

  NamedArrays result;
  try {
    for (const auto& [name, entry] : header.items()) {
      if (name == "__metadata__") {
        result.metadata = entry.get<std::map<std::string, std::string>>();
        continue;
      }
      if (entry.at("dtype") != "F64") throw SchemaError(fmt::format("array '{}' is not F64", name));
      const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
      const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
      const auto begin = entry.at("data_offsets").at(0).get<std::uint64_t>();
      const auto end = entry.at("data_offsets").at(1).get<std::uint64_t>();
      if (rows < 0 || cols < 0 || end < begin || end > data_size ||
          end - begin != static_cast<std::uint64_t>(rows * cols) * sizeof(double)) {
        throw SchemaError(fmt::format("array '{}' has inconsistent shape/offsets", name));
      }
      Matrix m(rows, cols);
      const char* p = payload.data() + begin;
      for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j, p += sizeof(double)) {
          std::memcpy(&m(i, j), p, sizeof(double));
        }
      }
      result.arrays.emplace(name, std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(fmt::format("'{}' header is malformed: {}", path.string(), e.what()));
  }
  return result;
}

}  // namespace oslo
