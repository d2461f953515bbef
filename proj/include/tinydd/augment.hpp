#pragma once

// Differentiable image transforms. A sampled AugmentationParams value fully
// determines the transform, so applying the same params object to two batches
// applies the identical transform to both; that sharing is what the siamese
// matching loss relies on, and an observer hook can record it.

#include <cstdint>
#include <string>
#include <vector>

#include "tinydd/ops.hpp"
#include "tinydd/rng.hpp"
#include "tinydd/tensor.hpp"

namespace tinydd {

enum class TransformKind : std::uint8_t {
  identity = 0,
  flip = 1,        // mirror along the width axis
  shift = 2,       // integer translation, zero fill
  scale = 3,       // multiply all pixels
  brightness = 4,  // add a constant
  cutout = 5,      // zero a square patch
};

inline const char* transform_name(TransformKind k) {
  switch (k) {
    case TransformKind::identity: return "identity";
    case TransformKind::flip: return "flip";
    case TransformKind::shift: return "shift";
    case TransformKind::scale: return "scale";
    case TransformKind::brightness: return "brightness";
    case TransformKind::cutout: return "cutout";
  }
  return "?";
}

struct AugmentationParams {
  TransformKind kind = TransformKind::identity;
  std::int64_t dy = 0, dx = 0;      // shift offsets
  double factor = 1.0;              // scale multiplier
  double delta = 0.0;               // brightness offset
  std::int64_t cy = 0, cx = 0, csize = 0;  // cutout window

  static AugmentationParams neutral() { return {}; }
};

struct AugmentFamily {
  std::vector<TransformKind> enabled{TransformKind::flip, TransformKind::shift,
                                     TransformKind::scale,
                                     TransformKind::brightness,
                                     TransformKind::cutout};
  std::int64_t max_shift = 2;
  double scale_range = 0.2;       // factor drawn from [1 - r, 1 + r]
  double brightness_range = 0.15; // delta drawn from [-r, r]
  double cutout_frac = 0.3;       // patch side as a fraction of image side
};

// Draws one transform per call: the kind uniformly from the enabled list,
// then that kind's knobs from the family ranges.
inline AugmentationParams sample_params(const AugmentFamily& fam, Rng& rng,
                                        std::int64_t img_h, std::int64_t img_w) {
  check(!fam.enabled.empty(), "augmentation family has no transforms enabled");
  AugmentationParams p;
  p.kind = fam.enabled[rng.below(fam.enabled.size())];
  switch (p.kind) {
    case TransformKind::identity:
    case TransformKind::flip:
      break;
    case TransformKind::shift:
      p.dy = rng.range(-fam.max_shift, fam.max_shift);
      p.dx = rng.range(-fam.max_shift, fam.max_shift);
      break;
    case TransformKind::scale:
      p.factor = rng.uniform(1.0 - fam.scale_range, 1.0 + fam.scale_range);
      break;
    case TransformKind::brightness:
      p.delta = rng.uniform(-fam.brightness_range, fam.brightness_range);
      break;
    case TransformKind::cutout: {
      p.csize = std::max<std::int64_t>(
          1, static_cast<std::int64_t>(fam.cutout_frac *
                                       static_cast<double>(std::min(img_h, img_w))));
      p.cy = rng.range(0, img_h - p.csize);
      p.cx = rng.range(0, img_w - p.csize);
      break;
    }
  }
  return p;
}

// Called with the exact params object used on each branch of a siamese
// application, so tests can assert both branches saw the same transform.
class SiameseObserver {
 public:
  virtual ~SiameseObserver() = default;
  virtual void on_apply(const AugmentationParams& params, int branch) = 0;
};

inline Tensor apply_augment(const Tensor& batch, const AugmentationParams& p) {
  check(batch.rank() == 4, "augmentation needs a (b, c, h, w) batch");
  switch (p.kind) {
    case TransformKind::identity:
      return batch;  // same tensor, same node: a true no-op
    case TransformKind::flip:
      return flip_w(batch);
    case TransformKind::shift:
      return shift2d(batch, p.dy, p.dx);
    case TransformKind::scale:
      return scale(batch, p.factor);
    case TransformKind::brightness:
      return offset(batch, p.delta);
    case TransformKind::cutout: {
      const std::int64_t h = batch.shape()[2], w = batch.shape()[3];
      check(p.csize >= 1 && p.cy >= 0 && p.cx >= 0 && p.cy + p.csize <= h &&
                p.cx + p.csize <= w,
            "cutout window outside the image");
      std::vector<double> m(static_cast<std::size_t>(h * w), 1.0);
      for (std::int64_t y = p.cy; y < p.cy + p.csize; ++y)
        for (std::int64_t x = p.cx; x < p.cx + p.csize; ++x)
          m[y * w + x] = 0.0;
      // one plane, repeated over batch and channels
      const std::int64_t planes = batch.shape()[0] * batch.shape()[1];
      std::vector<double> full;
      full.reserve(m.size() * planes);
      for (std::int64_t i = 0; i < planes; ++i)
        full.insert(full.end(), m.begin(), m.end());
      return mul(batch, Tensor(batch.shape(), std::move(full)));
    }
  }
  return batch;
}

inline Tensor apply_augment(const Tensor& batch, const AugmentationParams& p,
                            SiameseObserver* observer, int branch) {
  if (observer) observer->on_apply(p, branch);
  return apply_augment(batch, p);
}

}  // namespace tinydd
