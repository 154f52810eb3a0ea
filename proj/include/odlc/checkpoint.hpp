#pragma once

// Checkpoint container shared by codec and classifier models.
//
//   "ODCK" | u32 version | u32 meta_len | meta (key=value lines, UTF-8)
//   u32 tensor_count | manifest entries | tensor data
//
// A manifest entry is u16 name_len, name, u8 dtype (0 = float32), u8 rank,
// rank x u32 dims. Tensor data follows in manifest order as little-endian
// float32. All integers are little-endian.

#include <bit>
#include <charconv>
#include <cstring>

#include "odlc/codec.hpp"
#include "odlc/lossnet.hpp"

namespace odlc {

inline constexpr std::array<uint8_t, 4> kCheckpointMagic{'O', 'D', 'C', 'K'};
inline constexpr uint32_t kCheckpointVersion = 1;

using Metadata = std::map<std::string, std::string>;

namespace detail {

class ByteWriter {
 public:
  void u8(uint8_t v) { out.push_back(v); }
  void u16(uint16_t v) {
    for (int i = 0; i < 2; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void f32(float f) { u32(std::bit_cast<uint32_t>(f)); }
  void bytes(std::string_view s) { out.insert(out.end(), s.begin(), s.end()); }
  std::vector<uint8_t> out;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const uint8_t> b) : b_(b) {}
  uint8_t u8() { return take(1)[0]; }
  uint16_t u16() {
    auto p = take(2);
    return static_cast<uint16_t>(p[0] | (p[1] << 8));
  }
  uint32_t u32() {
    auto p = take(4);
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(size_t n) {
    auto p = take(n);
    return std::string(p.begin(), p.end());
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::span<const uint8_t> take(size_t n) {
    if (b_.size() - pos_ < n) throw Error("checkpoint: truncated file");
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::span<const uint8_t> b_;
  size_t pos_ = 0;
};

inline std::string fmt_float(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<double> split_numbers(const std::string& s) {
  std::vector<double> out;
  size_t start = 0;
  while (start <= s.size()) {
    const size_t end = std::min(s.find(',', start), s.size());
    const std::string tok = s.substr(start, end - start);
    double v = 0;
    auto r = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (tok.empty() || r.ec != std::errc() || r.ptr != tok.data() + tok.size())
      throw Error("checkpoint: malformed number list '" + s + "'");
    out.push_back(v);
    start = end + 1;
  }
  return out;
}

inline std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  for (double d : split_numbers(s)) out.push_back(static_cast<int>(d));
  return out;
}

inline const std::string& meta_get(const Metadata& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw Error("checkpoint: missing metadata key '" + key + "'");
  return it->second;
}

inline void put_norm(Metadata& m, const Normalization& n) {
  m["norm.mean"] = fmt_float(n.mean[0]) + "," + fmt_float(n.mean[1]) + "," + fmt_float(n.mean[2]);
  m["norm.std"] = fmt_float(n.stddev[0]) + "," + fmt_float(n.stddev[1]) + "," + fmt_float(n.stddev[2]);
}

inline Normalization get_norm(const Metadata& m) {
  const auto mean = split_numbers(meta_get(m, "norm.mean"));
  const auto sd = split_numbers(meta_get(m, "norm.std"));
  if (mean.size() != 3 || sd.size() != 3) throw Error("checkpoint: normalization needs 3 channels");
  Normalization n;
  for (int c = 0; c < 3; ++c) {
    n.mean[c] = static_cast<float>(mean[c]);
    n.stddev[c] = static_cast<float>(sd[c]);
  }
  return n;
}

}  // namespace detail

inline std::vector<uint8_t> encode_checkpoint(const Metadata& meta, const ParameterSet<float>& params) {
  detail::ByteWriter w;
  w.bytes(std::string_view(reinterpret_cast<const char*>(kCheckpointMagic.data()), 4));
  w.u32(kCheckpointVersion);
  std::string text;
  for (const auto& [k, v] : meta) {
    require(k.find_first_of("=\n") == std::string::npos && v.find('\n') == std::string::npos,
            "checkpoint: metadata keys/values may not contain '=' or newlines");
    text += k + "=" + v + "\n";
  }
  w.u32(static_cast<uint32_t>(text.size()));
  w.bytes(text);
  w.u32(static_cast<uint32_t>(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    w.u16(static_cast<uint16_t>(p.name.size()));
    w.bytes(p.name);
    w.u8(0);
    w.u8(static_cast<uint8_t>(p.value.rank()));
    for (int d : p.value.shape()) w.u32(static_cast<uint32_t>(d));
  }
  for (size_t i = 0; i < params.size(); ++i)
    for (float v : params[i].value.data()) w.f32(v);
  return std::move(w.out);
}

struct DecodedCheckpoint {
  Metadata meta;
  ParameterSet<float> params;
};

inline DecodedCheckpoint decode_checkpoint(std::span<const uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin()))
    throw Error("checkpoint: bad magic");
  detail::ByteReader r(bytes.subspan(4));
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw Error("checkpoint: unsupported version " + std::to_string(version));
  DecodedCheckpoint out;
  std::istringstream text(r.str(r.u32()));
  std::string line;
  while (std::getline(text, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("checkpoint: malformed metadata line '" + line + "'");
    out.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const uint32_t count = r.u32();
  std::vector<std::pair<std::string, Shape>> manifest;
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u16());
    if (r.u8() != 0) throw Error("checkpoint: unsupported dtype for '" + name + "'");
    Shape s(r.u8());
    for (int& d : s) d = static_cast<int>(r.u32());
    manifest.emplace_back(std::move(name), std::move(s));
  }
  for (auto& [name, shape] : manifest) {
    Tensor<float> t(shape);
    for (float& v : t.data()) v = r.f32();
    out.params.add(name, std::move(t));
  }
  if (!r.done()) throw Error("checkpoint: trailing bytes after tensor data");
  return out;
}

/// Fails unless `loaded` has exactly the names and shapes of `expected`.
inline void check_manifest(const ParameterSet<float>& loaded, const ParameterSet<float>& expected) {
  if (loaded.size() != expected.size())
    throw Error("checkpoint: expected " + std::to_string(expected.size()) + " tensors, found " +
                std::to_string(loaded.size()));
  for (size_t i = 0; i < expected.size(); ++i) {
    const auto* p = loaded.find(expected[i].name);
    if (!p) throw Error("checkpoint: missing tensor '" + expected[i].name + "'");
    if (p->value.shape() != expected[i].value.shape())
      throw Error("checkpoint: tensor '" + expected[i].name + "' has shape " + shape_str(p->value.shape()) +
                  ", expected " + shape_str(expected[i].value.shape()));
  }
}

inline std::vector<uint8_t> save_codec_bytes(const CodecParams<float>& p) {
  const auto& c = p.config;
  Metadata m{{"kind", "codec"},
             {"bottleneck", std::to_string(c.bottleneck)},
             {"encoder_stem", std::to_string(c.encoder_stem)},
             {"encoder_gru", detail::join_ints(c.encoder_gru)},
             {"decoder_expand", std::to_string(c.decoder_expand)},
             {"decoder_gru", detail::join_ints(c.decoder_gru)},
             {"hidden_kernel", std::to_string(c.hidden_kernel)},
             {"last_hidden_kernel", std::to_string(c.last_hidden_kernel)},
             {"output_scale", detail::fmt_float(c.output_scale)},
             {"max_iterations", std::to_string(c.max_iterations)}};
  detail::put_norm(m, c.norm);
  return encode_checkpoint(m, p.params);
}

inline CodecParams<float> load_codec_bytes(std::span<const uint8_t> bytes) {
  auto ck = decode_checkpoint(bytes);
  if (detail::meta_get(ck.meta, "kind") != "codec")
    throw Error("checkpoint: expected a codec checkpoint, found kind '" + ck.meta["kind"] + "'");
  CodecConfig c;
  c.bottleneck = std::stoi(detail::meta_get(ck.meta, "bottleneck"));
  c.encoder_stem = std::stoi(detail::meta_get(ck.meta, "encoder_stem"));
  c.encoder_gru = detail::split_ints(detail::meta_get(ck.meta, "encoder_gru"));
  c.decoder_expand = std::stoi(detail::meta_get(ck.meta, "decoder_expand"));
  c.decoder_gru = detail::split_ints(detail::meta_get(ck.meta, "decoder_gru"));
  c.hidden_kernel = std::stoi(detail::meta_get(ck.meta, "hidden_kernel"));
  c.last_hidden_kernel = std::stoi(detail::meta_get(ck.meta, "last_hidden_kernel"));
  c.output_scale = std::stod(detail::meta_get(ck.meta, "output_scale"));
  c.max_iterations = std::stoi(detail::meta_get(ck.meta, "max_iterations"));
  c.norm = detail::get_norm(ck.meta);
  c.validate();
  Rng dummy(0);
  CodecParams<float> p = CodecParams<float>::init(c, dummy);
  check_manifest(ck.params, p.params);
  for (size_t i = 0; i < p.params.size(); ++i) p.params[i].value = ck.params.get(p.params[i].name).value;
  return p;
}

inline std::vector<uint8_t> save_classifier_bytes(const ClassifierParams<float>& p) {
  const auto& a = p.arch;
  Metadata m{{"kind", "classifier"},
             {"widths", detail::join_ints(a.widths)},
             {"convs_per_block", std::to_string(a.convs_per_block)},
             {"num_classes", std::to_string(a.num_classes)},
             {"input_size", std::to_string(a.input_size)}};
  detail::put_norm(m, a.norm);
  return encode_checkpoint(m, p.params);
}

inline ClassifierParams<float> load_classifier_bytes(std::span<const uint8_t> bytes) {
  auto ck = decode_checkpoint(bytes);
  if (detail::meta_get(ck.meta, "kind") != "classifier")
    throw Error("checkpoint: expected a classifier checkpoint, found kind '" + ck.meta["kind"] + "'");
  ClassifierArch a;
  a.widths = detail::split_ints(detail::meta_get(ck.meta, "widths"));
  a.convs_per_block = std::stoi(detail::meta_get(ck.meta, "convs_per_block"));
  a.num_classes = std::stoi(detail::meta_get(ck.meta, "num_classes"));
  a.input_size = std::stoi(detail::meta_get(ck.meta, "input_size"));
  a.norm = detail::get_norm(ck.meta);
  Rng dummy(0);
  ClassifierParams<float> p = ClassifierParams<float>::init(a, dummy);
  check_manifest(ck.params, p.params);
  for (size_t i = 0; i < p.params.size(); ++i) p.params[i].value = ck.params.get(p.params[i].name).value;
  return p;
}

inline void save_codec(const std::string& path, const CodecParams<float>& p) { write_file(path, save_codec_bytes(p)); }
inline CodecParams<float> load_codec(const std::string& path) { return load_codec_bytes(read_file(path)); }
inline void save_classifier(const std::string& path, const ClassifierParams<float>& p) {
  write_file(path, save_classifier_bytes(p));
}
inline ClassifierParams<float> load_classifier(const std::string& path) {
  return load_classifier_bytes(read_file(path));
}

/// Kind recorded in a checkpoint ("codec" or "classifier").
inline std::string checkpoint_kind(std::span<const uint8_t> bytes) {
  return detail::meta_get(decode_checkpoint(bytes).meta, "kind");
}

}  // namespace odlc
