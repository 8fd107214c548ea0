#include "ersm/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace ersm {

void ByteWriter::put(std::uint64_t v, int width) {
  for (int i = 0; i < width; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u16(std::uint16_t v) { put(v, 2); }
void ByteWriter::u32(std::uint32_t v) { put(v, 4); }
void ByteWriter::f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
void ByteWriter::raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

void ByteReader::require(std::size_t n, const char* what) const {
  if (remaining() < n) {
    throw FormatError(context_ + ": truncated while reading " + what + " (need " +
                      std::to_string(n) + " bytes, " + std::to_string(remaining()) + " left)");
  }
}

void ByteReader::expect_end() const {
  if (remaining() != 0) {
    throw FormatError(context_ + ": " + std::to_string(remaining()) + " unexpected trailing bytes");
  }
}

std::uint64_t ByteReader::get(int width) {
  require(static_cast<std::size_t>(width), "integer field");
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
  pos_ += static_cast<std::size_t>(width);
  return v;
}

double ByteReader::f64() {
  require(8, "f64 field");
  return std::bit_cast<double>(get(8));
}

std::string ByteReader::raw(std::size_t n) {
  require(n, "byte string");
  std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span<const std::uint8_t>(
                              reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace ersm
