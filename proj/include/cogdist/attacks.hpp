#pragma once

#include <cstdint>
#include <json.hpp>
#include <span>
#include <string>
#include <vector>

#include "cogdist/data.hpp"

namespace cogdist::attacks {

enum class Family { badnets, blend, sig, warp };

std::string to_string(Family f);
Family family_from_string(const std::string& s);

/// Patch trigger. An empty `pattern` selects the default 3x3 checkerboard;
/// a negative offset places the patch flush with the bottom-right corner.
struct BadNetsParams {
  std::size_t patch_h = 3;
  std::size_t patch_w = 3;
  std::vector<float> pattern;  // (c, patch_h, patch_w) or (patch_h, patch_w) shared by channels
  long offset_y = -1;
  long offset_x = -1;
};

/// Blend trigger. An empty `trigger` selects seeded uniform noise.
struct BlendParams {
  double transparency = 0.2;
  std::vector<float> trigger;  // (c, h, w)
};

struct SigParams {
  double amplitude = 0.1;
  double frequency = 6.0;
};

struct WarpParams {
  std::size_t grid = 4;
  double strength = 0.5;
};

struct AttackSpec {
  Family family = Family::badnets;
  int target_label = 0;
  double poisoning_rate = 0.05;
  std::uint64_t seed = 0;
  BadNetsParams badnets;
  BlendParams blend;
  SigParams sig;
  WarpParams warp;

  void validate(int num_classes) const;
  nlohmann::json to_json() const;
  static AttackSpec from_json(const nlohmann::json& j);
  /// Stable hex digest of to_json(), recorded in manifests.
  std::string hash() const;
};

/// One CHW image in [0,1].
using Image = std::span<float>;
using ConstImage = std::span<const float>;

/// Replaces the patch region; pixels outside it are untouched.
void apply_badnets(Image image, Shape shape, std::span<const float> patch, std::size_t patch_h,
                   std::size_t patch_w, std::size_t offset_y, std::size_t offset_x);
/// (1 - tau) * image + tau * trigger, clipped to [0,1].
void apply_blend(Image image, ConstImage trigger, double transparency);
/// Adds amplitude * sin(2 pi j f / w) along columns, clipped to [0,1].
void apply_sig(Image image, Shape shape, double amplitude, double frequency);

/// Smooth displacement field upsampled from a control grid of random offsets.
struct WarpField {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> dy;  // unit-strength displacement, pixels
  std::vector<double> dx;
};
WarpField make_warp_field(std::size_t grid, std::size_t height, std::size_t width,
                          std::uint64_t seed);
/// Bilinear resampling at (y + s*dy, x + s*dx) with edge clamping.
void apply_warp(Image image, Shape shape, const WarpField& field, double strength);

/// A configured trigger ready to be stamped onto images of one shape.
class Trigger {
 public:
  Trigger(const AttackSpec& spec, Shape image_shape);
  void apply(Image image) const;
  Shape image_shape() const { return shape_; }
  /// Pixels covered by the patch for BadNets, or every pixel for full-image triggers.
  bool is_local() const { return family_ == Family::badnets; }

 private:
  Family family_;
  Shape shape_;
  std::vector<float> pattern_;
  std::size_t patch_h_ = 0, patch_w_ = 0, off_y_ = 0, off_x_ = 0;
  double transparency_ = 0.0;
  SigParams sig_;
  WarpField field_;
  double warp_strength_ = 0.0;
};

struct PoisonResult {
  ImageSet data;
  std::vector<std::size_t> poisoned;  // ascending
};

/// Triggers and relabels exactly floor(p * n) samples drawn uniformly from the
/// non-target classes; everything else is copied unchanged.
PoisonResult poison_dataset(const ImageSet& clean, const AttackSpec& spec);

/// Re-applies a recorded poisoning (indices from a manifest) to the clean set.
ImageSet rematerialize(const ImageSet& clean, const AttackSpec& spec,
                       std::span<const std::size_t> poisoned);

/// Every non-target test image with the trigger applied; labels keep the true class.
ImageSet triggered_test_set(const ImageSet& test, const AttackSpec& spec);

}  // namespace cogdist::attacks
