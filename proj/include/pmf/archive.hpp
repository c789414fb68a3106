#pragma once

// Versioned binary archive of named matrices.
//
// Layout: "PMFCKPT" u32 version u32 count, then per section: u32 name length,
// name bytes, u32 rows, u32 cols, rows*cols little-endian float64 row-major.

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pmf/diff.hpp"

namespace pmf {

inline constexpr std::uint32_t kArchiveVersion = 1;

void write_archive(const std::filesystem::path& path,
                   const std::vector<std::pair<std::string, diff::Matrix>>& sections);
std::map<std::string, diff::Matrix> read_archive(const std::filesystem::path& path);

}  // namespace pmf
