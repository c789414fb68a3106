#include "pmf/archive.hpp"

#include <cstring>
#include <fstream>

#include "pmf/errors.hpp"

namespace pmf {

namespace {

constexpr char kMagic[] = {'P', 'M', 'F', 'C', 'K', 'P', 'T'};

void put_u32(std::ofstream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); }

std::uint32_t get_u32(std::ifstream& in, const std::filesystem::path& path) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw DataError(path.filename().string() + ": truncated archive");
  return v;
}

}  // namespace

void write_archive(const std::filesystem::path& path,
                   const std::vector<std::pair<std::string, diff::Matrix>>& sections) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write file: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put_u32(out, kArchiveVersion);
  put_u32(out, static_cast<std::uint32_t>(sections.size()));
  for (const auto& [name, m] : sections) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  if (!out) throw DataError("write failed: " + path.string());
}

std::map<std::string, diff::Matrix> read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing file: " + path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError(path.filename().string() + ": not a checkpoint archive");
  }
  if (get_u32(in, path) != kArchiveVersion) throw DataError(path.filename().string() + ": unsupported version");
  const std::uint32_t count = get_u32(in, path);
  std::map<std::string, diff::Matrix> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name(get_u32(in, path), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    const std::uint32_t rows = get_u32(in, path);
    const std::uint32_t cols = get_u32(in, path);
    diff::Matrix m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw DataError(path.filename().string() + ": truncated section '" + name + "'");
    out.emplace(std::move(name), std::move(m));
  }
  return out;
}

}  // namespace pmf
