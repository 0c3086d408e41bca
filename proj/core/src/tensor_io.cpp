#include "roadenkf/tensor_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "roadenkf/error.hpp"

namespace roadenkf::io {

namespace {

constexpr char kMagic[4] = {'T', 'N', 'S', '1'};

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<unsigned char> encode_tensor(const ad::Tensor& t) {
  if (t.rank() > 255) throw DimensionError("TNS1 supports rank <= 255");
  std::vector<unsigned char> out;
  out.reserve(6 + 8 * t.rank() + 8 * t.size());
  out.insert(out.end(), kMagic, kMagic + 4);
  out.push_back(static_cast<unsigned char>(t.kind()));
  out.push_back(static_cast<unsigned char>(t.rank()));
  for (std::size_t e : t.shape()) put_u64(out, e);
  for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

ad::Tensor decode_tensor(const std::vector<unsigned char>& bytes) {
  const std::size_t n = bytes.size();
  if (n < 4) throw FormatError("truncated magic", n);
  for (std::size_t i = 0; i < 4; ++i) {
    if (bytes[i] != static_cast<unsigned char>(kMagic[i])) throw FormatError("bad magic, expected TNS1", i);
  }
  if (n < 6) throw FormatError("truncated header", n);
  if (bytes[4] > 1) throw FormatError("unknown kind byte " + std::to_string(bytes[4]), 4);
  const auto kind = static_cast<ad::Kind>(bytes[4]);
  const std::size_t rank = bytes[5];
  std::size_t offset = 6;
  ad::Shape shape(rank);
  std::uint64_t count = 1;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() / 16;
  for (std::size_t r = 0; r < rank; ++r) {
    if (offset + 8 > n) throw FormatError("truncated extents", n);
    const std::uint64_t e = get_u64(bytes.data() + offset);
    if (e != 0 && count > limit / e) throw FormatError("extent product overflows", offset);
    count *= e;
    shape[r] = static_cast<std::size_t>(e);
    offset += 8;
  }
  const std::uint64_t doubles = count * (kind == ad::Kind::complex ? 2 : 1);
  const std::uint64_t expected = offset + 8 * doubles;
  if (n < expected) throw FormatError("truncated payload, expected " + std::to_string(expected) + " bytes", n);
  if (n > expected) throw FormatError("trailing bytes after payload", static_cast<std::size_t>(expected));
  std::vector<double> data(static_cast<std::size_t>(doubles));
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = std::bit_cast<double>(get_u64(bytes.data() + offset + 8 * i));
  }
  return ad::Tensor(std::move(shape), std::move(data), kind);
}

void write_tensor(const std::filesystem::path& path, const ad::Tensor& t) {
  const auto bytes = encode_tensor(t);
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

ad::Tensor read_tensor(const std::filesystem::path& path) {
  const std::string s = read_file(path);
  return decode_tensor(std::vector<unsigned char>(s.begin(), s.end()));
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace roadenkf::io
