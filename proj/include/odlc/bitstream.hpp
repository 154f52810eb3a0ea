#pragma once

// Container for codec output:
//
//   offset  size  field
//   0       4     magic "ODLC"
//   4       1     version (1)
//   5       2     width,  little-endian (true, pre-padding)
//   7       2     height, little-endian
//   9       1     iterations T
//   10      1     C_b
//   11      1     flags (bit 0: deterministic binarization)
//   12      ...   payload: bits MSB-first in (iteration, channel, row, col)
//                 order, +1 -> 1, -1 -> 0, zero-padded to a byte boundary

#include "odlc/codec.hpp"

namespace odlc {

inline constexpr std::array<uint8_t, 4> kBitstreamMagic{'O', 'D', 'L', 'C'};
inline constexpr uint8_t kBitstreamVersion = 1;
inline constexpr size_t kBitstreamHeaderSize = 12;
inline constexpr uint8_t kFlagDeterministic = 0x01;

class BitstreamError : public Error {
 public:
  enum class Kind { bad_magic, version_mismatch, truncated_payload, dimension_mismatch, invalid_bits };
  BitstreamError(Kind k, const std::string& msg) : Error(msg), kind_(k) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct BitstreamHeader {
  uint8_t version = kBitstreamVersion;
  uint16_t width = 0;
  uint16_t height = 0;
  uint8_t iterations = 0;
  uint8_t bottleneck = 0;
  uint8_t flags = kFlagDeterministic;

  uint64_t payload_bits() const { return odlc::payload_bits(height, width, iterations, bottleneck); }
  size_t payload_bytes() const { return static_cast<size_t>((payload_bits() + 7) / 8); }
  friend bool operator==(const BitstreamHeader&, const BitstreamHeader&) = default;
};

struct Bitstream {
  BitstreamHeader header;
  std::vector<uint8_t> payload;

  /// Bits per pixel over the payload only.
  double bpp() const {
    return static_cast<double>(header.payload_bits()) / (static_cast<double>(header.width) * header.height);
  }
};

/// Packs {-1,+1} entries MSB-first; the last byte is zero-padded.
template <class T>
std::vector<uint8_t> pack_bits(std::span<const T> bits) {
  std::vector<uint8_t> out((bits.size() + 7) / 8, 0);
  for (size_t i = 0; i < bits.size(); ++i) {
    if (bits[i] == T(1))
      out[i / 8] |= static_cast<uint8_t>(0x80u >> (i % 8));
    else if (bits[i] != T(-1))
      throw BitstreamError(BitstreamError::Kind::invalid_bits,
                           "pack_bits: entry " + std::to_string(i) + " is not -1 or +1");
  }
  return out;
}

template <class T>
std::vector<uint8_t> pack_bits(const std::vector<Tensor<T>>& steps) {
  std::vector<T> flat;
  for (const auto& s : steps) flat.insert(flat.end(), s.data().begin(), s.data().end());
  return pack_bits<T>(std::span<const T>(flat));
}

inline std::vector<float> unpack_bits(std::span<const uint8_t> bytes, size_t count) {
  if (bytes.size() * 8 < count)
    throw BitstreamError(BitstreamError::Kind::truncated_payload,
                         "unpack_bits: " + std::to_string(bytes.size()) + " bytes hold fewer than " +
                             std::to_string(count) + " bits");
  std::vector<float> out(count);
  for (size_t i = 0; i < count; ++i) out[i] = (bytes[i / 8] >> (7 - i % 8)) & 1 ? 1.0f : -1.0f;
  return out;
}

inline std::vector<uint8_t> serialize(const Bitstream& b) {
  require(b.payload.size() == b.header.payload_bytes(), "bitstream: payload length does not match header");
  std::vector<uint8_t> out(kBitstreamMagic.begin(), kBitstreamMagic.end());
  out.push_back(b.header.version);
  out.push_back(static_cast<uint8_t>(b.header.width & 0xFF));
  out.push_back(static_cast<uint8_t>(b.header.width >> 8));
  out.push_back(static_cast<uint8_t>(b.header.height & 0xFF));
  out.push_back(static_cast<uint8_t>(b.header.height >> 8));
  out.push_back(b.header.iterations);
  out.push_back(b.header.bottleneck);
  out.push_back(b.header.flags);
  out.insert(out.end(), b.payload.begin(), b.payload.end());
  return out;
}

inline Bitstream parse_bitstream(std::span<const uint8_t> bytes) {
  using K = BitstreamError::Kind;
  if (bytes.size() < 4 || !std::equal(kBitstreamMagic.begin(), kBitstreamMagic.end(), bytes.begin()))
    throw BitstreamError(K::bad_magic, "bitstream: bad magic (not an ODLC stream)");
  if (bytes.size() < kBitstreamHeaderSize)
    throw BitstreamError(K::truncated_payload, "bitstream: truncated header");
  Bitstream b;
  b.header.version = bytes[4];
  if (b.header.version != kBitstreamVersion)
    throw BitstreamError(K::version_mismatch, "bitstream: unsupported version " + std::to_string(bytes[4]) +
                                                  " (expected " + std::to_string(kBitstreamVersion) + ")");
  b.header.width = static_cast<uint16_t>(bytes[5] | (bytes[6] << 8));
  b.header.height = static_cast<uint16_t>(bytes[7] | (bytes[8] << 8));
  b.header.iterations = bytes[9];
  b.header.bottleneck = bytes[10];
  b.header.flags = bytes[11];
  if (b.header.width == 0 || b.header.height == 0 || b.header.iterations == 0 || b.header.bottleneck == 0)
    throw BitstreamError(K::dimension_mismatch, "bitstream: zero width, height, iterations or C_b in header");
  const size_t have = bytes.size() - kBitstreamHeaderSize;
  const size_t need = b.header.payload_bytes();
  if (have < need)
    throw BitstreamError(K::truncated_payload, "bitstream: truncated payload (" + std::to_string(have) +
                                                   " of " + std::to_string(need) + " bytes)");
  if (have > need)
    throw BitstreamError(K::truncated_payload, "bitstream: payload has " + std::to_string(have - need) +
                                                   " trailing bytes beyond the header's length");
  b.payload.assign(bytes.begin() + kBitstreamHeaderSize, bytes.end());
  return b;
}

/// Keeps the first `iterations` steps by rewriting the header and dropping
/// the excess payload.
inline Bitstream truncate_iterations(const Bitstream& b, int iterations) {
  require(iterations >= 1 && iterations <= b.header.iterations,
          "truncate: iteration count must be in [1, " + std::to_string(b.header.iterations) + "]");
  Bitstream out = b;
  out.header.iterations = static_cast<uint8_t>(iterations);
  const uint64_t bits = out.header.payload_bits();
  out.payload.resize(out.header.payload_bytes());
  if (bits % 8) out.payload.back() &= static_cast<uint8_t>(0xFFu << (8 - bits % 8));
  return out;
}

/// Deterministic T-step encoding of a [0,1] image.
inline Bitstream compress(const Image& x, int iterations, const CodecParams<float>& p) {
  check_iterations(iterations, p.config);
  if (x.rank() == 3 && (x.dim(1) > 0xFFFF || x.dim(2) > 0xFFFF))
    throw Error("compress: image dimensions exceed 65535");
  const auto tr = reconstruct_progressive(x, iterations, p, QuantMode::deterministic);
  Bitstream b;
  b.header.width = static_cast<uint16_t>(x.dim(2));
  b.header.height = static_cast<uint16_t>(x.dim(1));
  b.header.iterations = static_cast<uint8_t>(iterations);
  b.header.bottleneck = static_cast<uint8_t>(p.config.bottleneck);
  b.header.flags = kFlagDeterministic;
  b.payload = pack_bits(tr.bits);
  require(b.payload.size() == b.header.payload_bytes(), "compress: payload size violates the bit-count law");
  return b;
}

inline std::vector<Tensor<float>> unpack_steps(const Bitstream& b) {
  const int hp = padded_extent(b.header.height), wp = padded_extent(b.header.width);
  const Shape step{b.header.bottleneck, hp / kCodecFactor, wp / kCodecFactor};
  const auto flat = unpack_bits(b.payload, b.header.payload_bits());
  const size_t per = shape_numel(step);
  std::vector<Tensor<float>> steps;
  for (int t = 0; t < b.header.iterations; ++t)
    steps.emplace_back(step, std::vector<float>(flat.begin() + t * per, flat.begin() + (t + 1) * per));
  return steps;
}

inline Image decompress(const Bitstream& b, const CodecParams<float>& p) {
  if (b.header.version != kBitstreamVersion)
    throw BitstreamError(BitstreamError::Kind::version_mismatch,
                         "decompress: unsupported version " + std::to_string(b.header.version));
  if (b.header.bottleneck != p.config.bottleneck)
    throw BitstreamError(BitstreamError::Kind::dimension_mismatch,
                         "decompress: stream has C_b = " + std::to_string(b.header.bottleneck) +
                             " but the model expects " + std::to_string(p.config.bottleneck));
  if (b.payload.size() != b.header.payload_bytes())
    throw BitstreamError(BitstreamError::Kind::truncated_payload, "decompress: payload length does not match header");
  check_iterations(b.header.iterations, p.config);
  const int hp = padded_extent(b.header.height), wp = padded_extent(b.header.width);
  const auto recon = decode_progressive(unpack_steps(b), hp, wp, p);
  return codec_output(recon.back(), p.config, b.header.height, b.header.width);
}

inline Image decompress(std::span<const uint8_t> bytes, const CodecParams<float>& p) {
  return decompress(parse_bitstream(bytes), p);
}

}  // namespace odlc
