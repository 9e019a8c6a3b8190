#pragma once

#include <string>
#include <string_view>

namespace imo {

std::string sha1_hex(std::string_view bytes);
/// Git's blob object id: SHA-1 over "blob <len>\0" + content.
std::string git_blob_hash(std::string_view content);

std::string read_file(const std::string& path);
/// Truncates `path` and writes `content`.
void write_file(const std::string& path, std::string_view content);

/// Shortest decimal text that parses back to exactly `v`.
std::string format_double(double v);

}  // namespace imo
