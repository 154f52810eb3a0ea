#pragma once

// Image utilities over [3,H,W] float tensors with values nominally in [0,1]:
// binary PPM (P6) I/O, bilinear resize, crops, flips, padding, normalization.

#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <iterator>

#include "odlc/tensor.hpp"

namespace odlc {

class ImageError : public Error {
 public:
  enum class Kind { unsupported_format, malformed_header, truncated_data, io };
  ImageError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline Image decode_ppm(const std::vector<uint8_t>& bytes) {
  size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* field) {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos]))
      throw ImageError(ImageError::Kind::malformed_header,
                       std::string("ppm: malformed header, expected ") + field);
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > 1 << 20)
        throw ImageError(ImageError::Kind::malformed_header, std::string("ppm: ") + field + " too large");
    }
    return static_cast<int>(v);
  };
  if (bytes.size() < 2 || bytes[0] != 'P')
    throw ImageError(ImageError::Kind::malformed_header, "ppm: malformed header, missing magic");
  if (bytes[1] != '6')
    throw ImageError(ImageError::Kind::unsupported_format,
                     std::string("ppm: unsupported format P") + static_cast<char>(bytes[1]) +
                         " (only binary P6 is supported)");
  pos = 2;
  const int w = read_int("width");
  const int h = read_int("height");
  const int maxval = read_int("maxval");
  if (w <= 0 || h <= 0) throw ImageError(ImageError::Kind::malformed_header, "ppm: zero dimension");
  if (maxval != 255)
    throw ImageError(ImageError::Kind::unsupported_format,
                     "ppm: unsupported format, maxval " + std::to_string(maxval) + " (need 255)");
  if (pos >= bytes.size() || !std::isspace(bytes[pos]))
    throw ImageError(ImageError::Kind::malformed_header, "ppm: malformed header terminator");
  ++pos;
  const size_t need = static_cast<size_t>(w) * h * 3;
  if (bytes.size() - pos < need)
    throw ImageError(ImageError::Kind::truncated_data,
                     "ppm: truncated data, need " + std::to_string(need) + " bytes, have " +
                         std::to_string(bytes.size() - pos));
  Image img({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = bytes[pos++] / 255.0f;
  return img;
}

inline uint8_t to_byte(float v) {
  const float s = std::floor(std::clamp(v, 0.0f, 1.0f) * 255.0f + 0.5f);
  return static_cast<uint8_t>(s);
}

inline std::vector<uint8_t> encode_ppm(const Image& img) {
  require(img.rank() == 3 && img.dim(0) == 3, "ppm: image must be [3,H,W]");
  const std::string header =
      "P6\n" + std::to_string(img.dim(2)) + " " + std::to_string(img.dim(1)) + "\n255\n";
  std::vector<uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + img.size());
  for (int y = 0; y < img.dim(1); ++y)
    for (int x = 0; x < img.dim(2); ++x)
      for (int c = 0; c < 3; ++c) out.push_back(to_byte(img.at(c, y, x)));
  return out;
}

inline std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError(ImageError::Kind::io, "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError(ImageError::Kind::io, "cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageError(ImageError::Kind::io, "short write to '" + path + "'");
}

inline Image read_ppm(const std::string& path) { return decode_ppm(read_file(path)); }
inline void write_ppm(const std::string& path, const Image& img) { write_file(path, encode_ppm(img)); }

/// Bilinear resize with half-pixel centers and edge clamping.
inline Image resize_bilinear(const Image& img, int out_h, int out_w) {
  require(out_h > 0 && out_w > 0, "resize: target dims must be positive");
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (H == out_h && W == out_w) return img;
  Image out({C, out_h, out_w});
  const double sy = static_cast<double>(H) / out_h, sx = static_cast<double>(W) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, H - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, H - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, W - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, W - 1);
      const double wx = fx - x0;
      for (int c = 0; c < C; ++c) {
        const double top = img.at(c, y0, x0) * (1 - wx) + img.at(c, y0, x1) * wx;
        const double bot = img.at(c, y1, x0) * (1 - wx) + img.at(c, y1, x1) * wx;
        out.at(c, y, x) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

/// Aspect-preserving resize so that min(H, W) == side.
inline Image resize_smallest_side(const Image& img, int side) {
  const int H = img.dim(1), W = img.dim(2);
  if (std::min(H, W) == side) return img;
  if (H <= W) {
    const int w = static_cast<int>(std::lround(static_cast<double>(W) * side / H));
    return resize_bilinear(img, side, std::max(w, side));
  }
  const int h = static_cast<int>(std::lround(static_cast<double>(H) * side / W));
  return resize_bilinear(img, std::max(h, side), side);
}

inline Image crop(const Image& img, int top, int left, int h, int w) {
  const int C = img.dim(0);
  if (top < 0 || left < 0 || h <= 0 || w <= 0 || top + h > img.dim(1) || left + w > img.dim(2))
    throw Error("crop: window " + std::to_string(h) + "x" + std::to_string(w) + " at (" +
                std::to_string(top) + "," + std::to_string(left) + ") exceeds image " +
                shape_str(img.shape()));
  Image out({C, h, w});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < h; ++y)
      std::copy_n(&img.at(c, top + y, left), w, &out.at(c, y, 0));
  return out;
}

inline Image center_crop(const Image& img, int h, int w) {
  if (h > img.dim(1) || w > img.dim(2))
    throw Error("center_crop: " + std::to_string(h) + "x" + std::to_string(w) +
                " larger than image " + shape_str(img.shape()));
  return crop(img, (img.dim(1) - h) / 2, (img.dim(2) - w) / 2, h, w);
}

inline Image hflip(const Image& img) {
  Image out(img.shape());
  for (int c = 0; c < img.dim(0); ++c)
    for (int y = 0; y < img.dim(1); ++y)
      for (int x = 0; x < img.dim(2); ++x) out.at(c, y, img.dim(2) - 1 - x) = img.at(c, y, x);
  return out;
}

/// Mirror index without repeating the edge sample (…2 1 | 0 1 2 … n-1 | n-2 …).
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

/// Pads bottom/right by reflection up to (h, w).
template <class T>
Tensor<T> reflect_pad(const Tensor<T>& img, int h, int w) {
  require(h >= img.dim(1) && w >= img.dim(2), "reflect_pad: target smaller than image");
  if (h == img.dim(1) && w == img.dim(2)) return img;
  Tensor<T> out({img.dim(0), h, w});
  for (int c = 0; c < img.dim(0); ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.at(c, y, x) = img.at(c, reflect_index(y, img.dim(1)), reflect_index(x, img.dim(2)));
  return out;
}

/// Per-channel statistics used to map [0,1] images to the network domain.
struct Normalization {
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> stddev{0.25f, 0.25f, 0.25f};

  friend bool operator==(const Normalization&, const Normalization&) = default;
};

inline Image normalize(const Image& img, const Normalization& n) {
  Image out(img.shape());
  const size_t plane = img.size() / img.dim(0);
  for (int c = 0; c < img.dim(0); ++c)
    for (size_t i = 0; i < plane; ++i)
      out[c * plane + i] = (img[c * plane + i] - n.mean[c]) / n.stddev[c];
  return out;
}

inline Image denormalize(const Image& img, const Normalization& n) {
  Image out(img.shape());
  const size_t plane = img.size() / img.dim(0);
  for (int c = 0; c < img.dim(0); ++c)
    for (size_t i = 0; i < plane; ++i)
      out[c * plane + i] = img[c * plane + i] * n.stddev[c] + n.mean[c];
  return out;
}

inline Image clamp01(Image img) {
  for (auto& v : img.data()) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

/// Mean and standard deviation per channel over a set of images.
inline Normalization estimate_normalization(const std::vector<Image>& images) {
  require(!images.empty(), "estimate_normalization: empty image set");
  Normalization n;
  for (int c = 0; c < 3; ++c) {
    double s = 0, s2 = 0, cnt = 0;
    for (const auto& img : images) {
      const size_t plane = img.size() / 3;
      for (size_t i = 0; i < plane; ++i) {
        const double v = img[c * plane + i];
        s += v;
        s2 += v * v;
      }
      cnt += static_cast<double>(plane);
    }
    const double m = s / cnt;
    n.mean[c] = static_cast<float>(m);
    n.stddev[c] = static_cast<float>(std::sqrt(std::max(s2 / cnt - m * m, 1e-6)));
  }
  return n;
}

}  // namespace odlc
