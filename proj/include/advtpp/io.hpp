#ifndef ADVTPP_IO_HPP_
#define ADVTPP_IO_HPP_

#include <filesystem>
#include <string>
#include <string_view>

namespace advtpp {

// Writes content to a sibling temporary file and renames it over path, so
// readers never observe a partially written file.
void write_atomic(const std::filesystem::path& path, std::string_view content);

std::string read_file(const std::filesystem::path& path);

}  // namespace advtpp

#endif  // ADVTPP_IO_HPP_
