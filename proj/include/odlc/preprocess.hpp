#pragma once

#include "odlc/dataset.hpp"

namespace odlc {

struct PreprocessConfig {
  int resize_side = 64;  // smallest side after aspect-preserving resize
  int crop = 56;
  bool normalize = true;
  Normalization norm;
};

/// Resize smallest side -> crop (random + horizontal flip for train, central
/// for val) -> optional per-channel normalization.
inline Image preprocess(const Image& raw, Split split, Rng& rng, const PreprocessConfig& cfg) {
  require(raw.rank() == 3 && raw.dim(0) == 3, "preprocess: expected [3,H,W] image");
  Image img = resize_smallest_side(raw, cfg.resize_side);
  if (img.dim(1) < cfg.crop || img.dim(2) < cfg.crop)
    throw Error("preprocess: image " + shape_str(img.shape()) + " smaller than crop " +
                std::to_string(cfg.crop) + " after resize");
  if (split == Split::train) {
    const int top = static_cast<int>(rng.below(static_cast<uint64_t>(img.dim(1) - cfg.crop + 1)));
    const int left = static_cast<int>(rng.below(static_cast<uint64_t>(img.dim(2) - cfg.crop + 1)));
    img = crop(img, top, left, cfg.crop, cfg.crop);
    if (rng.bernoulli(0.5)) img = hflip(img);
  } else {
    img = center_crop(img, cfg.crop, cfg.crop);
  }
  return cfg.normalize ? normalize(img, cfg.norm) : img;
}

}  // namespace odlc
