#include "bae/checkpoint.hpp"

#include <cstring>

#include "bae/binary_io.hpp"
#include "bae/error.hpp"

namespace bae {

namespace {

constexpr char kMagic[4] = {'B', 'A', 'E', '1'};

void put_matrix(ByteWriter& w, const Matrix& m) {
  for (double v : m.values()) w.f32(static_cast<float>(v));
}

Matrix get_matrix(ByteReader& r, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  for (auto& v : m.values()) v = r.f32();
  return m;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const BilinearAutoencoder& model) {
  model.validate();
  ByteWriter w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(static_cast<std::uint32_t>(model.d()));
  w.u32(static_cast<std::uint32_t>(model.h()));
  w.u32(static_cast<std::uint32_t>(model.k()));
  w.u8(static_cast<std::uint8_t>(model.prior.kind));
  w.u8(model.weight_tied ? 1 : 0);
  w.u16(0);
  w.f64(model.prior.active_fraction);
  put_matrix(w, model.left);
  put_matrix(w, model.right);
  put_matrix(w, model.mix);
  std::vector<std::uint8_t> bits((model.mask.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < model.mask.size(); ++i)
    if (model.mask[i]) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  w.bytes(bits.data(), bits.size());
  for (double b : model.offsets) w.f32(static_cast<float>(b));
  const std::uint64_t checksum = fnv1a64(w.buffer());
  w.u64(checksum);
  return std::move(w.buffer());
}

BilinearAutoencoder deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw Error(ErrorCode::BadMagic, "not a BAE1 checkpoint");
  const std::size_t d = r.u32();
  const std::size_t h = r.u32();
  const std::size_t k = r.u32();
  const std::uint8_t tag = r.u8();
  if (tag > 2) throw Error(ErrorCode::InvalidSpec, "unknown prior tag");
  const bool tied = r.u8() != 0;
  r.u16();
  BilinearAutoencoder m;
  m.prior.kind = static_cast<PriorKind>(tag);
  m.prior.active_fraction = r.f64();
  m.weight_tied = tied;
  m.left = get_matrix(r, h, d);
  m.right = get_matrix(r, h, d);
  m.mix = get_matrix(r, k, h);
  std::vector<std::uint8_t> bits((k * h + 7) / 8);
  r.bytes(bits.data(), bits.size());
  m.mask.resize(k * h);
  for (std::size_t i = 0; i < k * h; ++i) m.mask[i] = (bits[i / 8] >> (i % 8)) & 1u;
  m.offsets.resize(k);
  for (auto& b : m.offsets) b = r.f32();
  const std::size_t payload_end = r.position();
  const std::uint64_t stored = r.u64();
  if (r.remaining() != 0) throw Error(ErrorCode::InvalidSpec, "trailing bytes after checkpoint");
  if (fnv1a64(bytes.first(payload_end)) != stored) throw Error(ErrorCode::ChecksumFail, "checkpoint checksum mismatch");
  m.validate();
  return m;
}

void save_checkpoint(const std::string& path, const BilinearAutoencoder& model) {
  write_file(path, serialize_checkpoint(model));
}

BilinearAutoencoder load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace bae
