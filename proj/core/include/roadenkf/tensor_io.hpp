#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "roadenkf/tensor.hpp"

namespace roadenkf::io {

// TNS1 container: "TNS1", u8 kind (0 real, 1 complex), u8 rank,
// rank x u64 LE extents, then the row-major f64 LE payload. No padding.

std::vector<unsigned char> encode_tensor(const ad::Tensor& t);
/// Throws FormatError with the byte offset of the first inconsistency.
ad::Tensor decode_tensor(const std::vector<unsigned char>& bytes);

void write_tensor(const std::filesystem::path& path, const ad::Tensor& t);
ad::Tensor read_tensor(const std::filesystem::path& path);

/// Writes to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace roadenkf::io
