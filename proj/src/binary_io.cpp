#include "bae/binary_io.hpp"

#include <bit>
#include <fstream>
#include <iterator>

#include "bae/error.hpp"

namespace bae {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
  std::uint64_t hash = seed;
  for (std::uint8_t b : bytes) {
    hash ^= b;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

void ByteWriter::bytes(const void* src, std::size_t n) {
  const auto* p = static_cast<const std::uint8_t*>(src);
  buf_.insert(buf_.end(), p, p + n);
}

void ByteWriter::u16(std::uint16_t v) { bytes(&v, sizeof v); }
void ByteWriter::u32(std::uint32_t v) { bytes(&v, sizeof v); }
void ByteWriter::u64(std::uint64_t v) { bytes(&v, sizeof v); }
void ByteWriter::f32(float v) { bytes(&v, sizeof v); }
void ByteWriter::f64(double v) { bytes(&v, sizeof v); }

void ByteReader::bytes(void* dst, std::size_t n) {
  if (n > remaining()) throw Error(ErrorCode::TruncatedFile, "unexpected end of data");
  std::memcpy(dst, data_.data() + pos_, n);
  pos_ += n;
}

std::uint8_t ByteReader::u8() {
  std::uint8_t v;
  bytes(&v, 1);
  return v;
}

std::uint16_t ByteReader::u16() {
  std::uint16_t v;
  bytes(&v, sizeof v);
  return v;
}

std::uint32_t ByteReader::u32() {
  std::uint32_t v;
  bytes(&v, sizeof v);
  return v;
}

std::uint64_t ByteReader::u64() {
  std::uint64_t v;
  bytes(&v, sizeof v);
  return v;
}

float ByteReader::f32() {
  float v;
  bytes(&v, sizeof v);
  return v;
}

double ByteReader::f64() {
  double v;
  bytes(&v, sizeof v);
  return v;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path);
}

}  // namespace bae
