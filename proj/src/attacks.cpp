#include "cogdist/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "cogdist/rng.hpp"

namespace cogdist::attacks {

std::string to_string(Family f) {
  switch (f) {
    case Family::badnets: return "badnets";
    case Family::blend: return "blend";
    case Family::sig: return "sig";
    case Family::warp: return "warp";
  }
  return "?";
}

Family family_from_string(const std::string& s) {
  for (auto f : {Family::badnets, Family::blend, Family::sig, Family::warp}) {
    if (to_string(f) == s) return f;
  }
  throw ConfigError("attack.family", "unknown attack family '" + s +
                                         "' (expected badnets, blend, sig or warp)");
}

void AttackSpec::validate(int num_classes) const {
  if (!(poisoning_rate >= 0.0 && poisoning_rate <= 1.0)) {
    throw ConfigError("attack.poisoning_rate", "must be in [0,1]");
  }
  if (target_label < 0 || target_label >= num_classes) {
    throw ConfigError("attack.target_label", "must be in [0," + std::to_string(num_classes) + ")");
  }
  if (!(blend.transparency >= 0.0 && blend.transparency <= 1.0)) {
    throw ConfigError("attack.params.transparency", "must be in [0,1]");
  }
  if (!(sig.amplitude >= 0.0)) throw ConfigError("attack.params.amplitude", "must be >= 0");
  if (!(warp.strength >= 0.0)) throw ConfigError("attack.params.strength", "must be >= 0");
}

nlohmann::json AttackSpec::to_json() const {
  nlohmann::json params;
  switch (family) {
    case Family::badnets:
      params = {{"patch_h", badnets.patch_h}, {"patch_w", badnets.patch_w},
                {"offset_y", badnets.offset_y}, {"offset_x", badnets.offset_x}};
      if (!badnets.pattern.empty()) params["pattern"] = badnets.pattern;
      break;
    case Family::blend:
      params = {{"transparency", blend.transparency}};
      if (!blend.trigger.empty()) params["trigger"] = blend.trigger;
      break;
    case Family::sig: params = {{"amplitude", sig.amplitude}, {"frequency", sig.frequency}}; break;
    case Family::warp: params = {{"grid", warp.grid}, {"strength", warp.strength}}; break;
  }
  return {{"family", to_string(family)},
          {"target_label", target_label},
          {"poisoning_rate", poisoning_rate},
          {"seed", seed},
          {"params", params}};
}

AttackSpec AttackSpec::from_json(const nlohmann::json& j) {
  AttackSpec s;
  if (!j.contains("family")) throw ConfigError("attack.family", "missing");
  if (!j.at("family").is_string()) throw ConfigError("attack.family", "must be a string");
  s.family = family_from_string(j.at("family").get<std::string>());
  s.target_label = j.value("target_label", s.target_label);
  s.poisoning_rate = j.value("poisoning_rate", s.poisoning_rate);
  s.seed = j.value("seed", s.seed);
  const nlohmann::json p = j.value("params", nlohmann::json::object());
  s.badnets.patch_h = p.value("patch_h", s.badnets.patch_h);
  s.badnets.patch_w = p.value("patch_w", s.badnets.patch_w);
  s.badnets.offset_y = p.value("offset_y", s.badnets.offset_y);
  s.badnets.offset_x = p.value("offset_x", s.badnets.offset_x);
  s.badnets.pattern = p.value("pattern", s.badnets.pattern);
  s.blend.transparency = p.value("transparency", s.blend.transparency);
  s.blend.trigger = p.value("trigger", s.blend.trigger);
  s.sig.amplitude = p.value("amplitude", s.sig.amplitude);
  s.sig.frequency = p.value("frequency", s.sig.frequency);
  s.warp.grid = p.value("grid", s.warp.grid);
  s.warp.strength = p.value("strength", s.warp.strength);
  return s;
}

std::string AttackSpec::hash() const {
  // FNV-1a over the canonical JSON dump
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_json().dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void apply_badnets(Image image, Shape shape, std::span<const float> patch, std::size_t patch_h,
                   std::size_t patch_w, std::size_t offset_y, std::size_t offset_x) {
  if (patch_h == 0 || patch_w == 0) return;
  if (offset_y + patch_h > shape.h || offset_x + patch_w > shape.w) {
    throw InvalidArgument("apply_badnets: " + std::to_string(patch_h) + "x" +
                          std::to_string(patch_w) + " patch at (" + std::to_string(offset_y) +
                          "," + std::to_string(offset_x) + ") exceeds " + std::to_string(shape.h) +
                          "x" + std::to_string(shape.w) + " image");
  }
  const std::size_t plane = patch_h * patch_w;
  const bool shared = patch.size() == plane;
  if (!shared && patch.size() != shape.c * plane) {
    throw ShapeError("apply_badnets: patch has " + std::to_string(patch.size()) + " values");
  }
  for (std::size_t c = 0; c < shape.c; ++c) {
    const float* src = patch.data() + (shared ? 0 : c * plane);
    for (std::size_t y = 0; y < patch_h; ++y) {
      for (std::size_t x = 0; x < patch_w; ++x) {
        image[(c * shape.h + offset_y + y) * shape.w + offset_x + x] = src[y * patch_w + x];
      }
    }
  }
}

void apply_blend(Image image, ConstImage trigger, double transparency) {
  if (trigger.size() != image.size()) {
    throw ShapeError("apply_blend: trigger has " + std::to_string(trigger.size()) +
                     " values, image has " + std::to_string(image.size()));
  }
  if (!(transparency >= 0.0 && transparency <= 1.0)) {
    throw InvalidArgument("apply_blend: transparency must be in [0,1]");
  }
  if (transparency == 0.0) return;
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = (1.0 - transparency) * image[i] + transparency * trigger[i];
    image[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
}

void apply_sig(Image image, Shape shape, double amplitude, double frequency) {
  if (!(amplitude >= 0.0)) throw InvalidArgument("apply_sig: amplitude must be >= 0");
  if (amplitude == 0.0) return;
  for (std::size_t x = 0; x < shape.w; ++x) {
    const double delta = amplitude * std::sin(2.0 * std::numbers::pi * static_cast<double>(x) *
                                              frequency / static_cast<double>(shape.w));
    for (std::size_t c = 0; c < shape.c; ++c) {
      for (std::size_t y = 0; y < shape.h; ++y) {
        float& v = image[(c * shape.h + y) * shape.w + x];
        v = static_cast<float>(std::clamp(v + delta, 0.0, 1.0));
      }
    }
  }
}

namespace {

// Bilinear upsampling of a g x g grid to h x w with aligned corners.
std::vector<double> upsample(const std::vector<double>& grid, std::size_t g, std::size_t h,
                             std::size_t w) {
  std::vector<double> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    const double gy = h > 1 ? static_cast<double>(y) * static_cast<double>(g - 1) / static_cast<double>(h - 1) : 0.0;
    const auto y0 = std::min(static_cast<std::size_t>(gy), g - 2);
    const double fy = gy - static_cast<double>(y0);
    for (std::size_t x = 0; x < w; ++x) {
      const double gx = w > 1 ? static_cast<double>(x) * static_cast<double>(g - 1) / static_cast<double>(w - 1) : 0.0;
      const auto x0 = std::min(static_cast<std::size_t>(gx), g - 2);
      const double fx = gx - static_cast<double>(x0);
      out[y * w + x] = (1 - fy) * ((1 - fx) * grid[y0 * g + x0] + fx * grid[y0 * g + x0 + 1]) +
                       fy * ((1 - fx) * grid[(y0 + 1) * g + x0] + fx * grid[(y0 + 1) * g + x0 + 1]);
    }
  }
  return out;
}

}  // namespace

WarpField make_warp_field(std::size_t grid, std::size_t height, std::size_t width,
                          std::uint64_t seed) {
  if (grid < 2 || grid >= std::min(height, width)) {
    throw InvalidArgument("make_warp_field: control grid " + std::to_string(grid) +
                          " must be in [2, " + std::to_string(std::min(height, width)) + ")");
  }
  Rng rng(seed);
  std::vector<double> gy(grid * grid), gx(grid * grid);
  for (auto& v : gy) v = rng.uniform(-1.0, 1.0);
  for (auto& v : gx) v = rng.uniform(-1.0, 1.0);
  double mean_abs = 0.0;
  for (std::size_t i = 0; i < gy.size(); ++i) mean_abs += std::abs(gy[i]) + std::abs(gx[i]);
  mean_abs /= static_cast<double>(2 * gy.size());
  for (auto& v : gy) v /= mean_abs;
  for (auto& v : gx) v /= mean_abs;
  return {height, width, upsample(gy, grid, height, width), upsample(gx, grid, height, width)};
}

void apply_warp(Image image, Shape shape, const WarpField& field, double strength) {
  if (field.height != shape.h || field.width != shape.w) throw ShapeError("apply_warp: field shape");
  if (!(strength >= 0.0)) throw InvalidArgument("apply_warp: strength must be >= 0");
  if (strength == 0.0) return;
  std::vector<float> src(image.begin(), image.end());
  const double max_y = static_cast<double>(shape.h - 1);
  const double max_x = static_cast<double>(shape.w - 1);
  for (std::size_t y = 0; y < shape.h; ++y) {
    for (std::size_t x = 0; x < shape.w; ++x) {
      const double sy = std::clamp(static_cast<double>(y) + strength * field.dy[y * shape.w + x], 0.0, max_y);
      const double sx = std::clamp(static_cast<double>(x) + strength * field.dx[y * shape.w + x], 0.0, max_x);
      const auto y0 = static_cast<std::size_t>(sy);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t y1 = std::min(y0 + 1, shape.h - 1);
      const std::size_t x1 = std::min(x0 + 1, shape.w - 1);
      const double fy = sy - static_cast<double>(y0);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < shape.c; ++c) {
        const float* p = src.data() + c * shape.h * shape.w;
        const double v = (1 - fy) * ((1 - fx) * p[y0 * shape.w + x0] + fx * p[y0 * shape.w + x1]) +
                         fy * ((1 - fx) * p[y1 * shape.w + x0] + fx * p[y1 * shape.w + x1]);
        image[(c * shape.h + y) * shape.w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
}

Trigger::Trigger(const AttackSpec& spec, Shape image_shape) : family_(spec.family), shape_(image_shape) {
  shape_.n = 1;
  switch (family_) {
    case Family::badnets: {
      const auto& p = spec.badnets;
      patch_h_ = p.patch_h;
      patch_w_ = p.patch_w;
      if (patch_h_ > shape_.h || patch_w_ > shape_.w) {
        throw ConfigError("attack.params.patch_h", "patch larger than the image");
      }
      pattern_ = p.pattern;
      if (pattern_.empty()) {
        pattern_.resize(patch_h_ * patch_w_);
        for (std::size_t y = 0; y < patch_h_; ++y) {
          for (std::size_t x = 0; x < patch_w_; ++x) pattern_[y * patch_w_ + x] = (y + x) % 2 == 0 ? 1.0f : 0.0f;
        }
      }
      off_y_ = p.offset_y < 0 ? shape_.h - patch_h_ : static_cast<std::size_t>(p.offset_y);
      off_x_ = p.offset_x < 0 ? shape_.w - patch_w_ : static_cast<std::size_t>(p.offset_x);
      if (off_y_ + patch_h_ > shape_.h || off_x_ + patch_w_ > shape_.w) {
        throw ConfigError("attack.params.offset_y", "patch out of bounds");
      }
      break;
    }
    case Family::blend: {
      transparency_ = spec.blend.transparency;
      pattern_ = spec.blend.trigger;
      if (pattern_.empty()) {
        Rng rng(derive_seed(spec.seed, 0xb1e4d));
        pattern_.resize(shape_.per_item());
        for (auto& v : pattern_) v = static_cast<float>(rng.uniform());
      }
      if (pattern_.size() != shape_.per_item()) {
        throw ConfigError("attack.params.trigger", "trigger must have c*h*w values");
      }
      break;
    }
    case Family::sig: sig_ = spec.sig; break;
    case Family::warp:
      field_ = make_warp_field(spec.warp.grid, shape_.h, shape_.w, derive_seed(spec.seed, 0x3a49));
      warp_strength_ = spec.warp.strength;
      break;
  }
}

void Trigger::apply(Image image) const {
  switch (family_) {
    case Family::badnets: apply_badnets(image, shape_, pattern_, patch_h_, patch_w_, off_y_, off_x_); break;
    case Family::blend: apply_blend(image, pattern_, transparency_); break;
    case Family::sig: apply_sig(image, shape_, sig_.amplitude, sig_.frequency); break;
    case Family::warp: apply_warp(image, shape_, field_, warp_strength_); break;
  }
}

ImageSet rematerialize(const ImageSet& clean, const AttackSpec& spec,
                       std::span<const std::size_t> poisoned) {
  spec.validate(clean.num_classes);
  const Trigger trigger(spec, clean.image_shape());
  ImageSet out = clean;
  for (std::size_t i : poisoned) {
    if (i >= out.size()) throw InvalidArgument("poisoned index out of range");
    trigger.apply(out.images.item(i));
    out.labels[i] = spec.target_label;
    out.is_backdoor[i] = true;
  }
  out.meta["attack"] = to_string(spec.family);
  out.meta["attack_hash"] = spec.hash();
  return out;
}

PoisonResult poison_dataset(const ImageSet& clean, const AttackSpec& spec) {
  spec.validate(clean.num_classes);
  const std::size_t n = clean.size();
  const auto count = static_cast<std::size_t>(std::floor(spec.poisoning_rate * static_cast<double>(n) + 1e-9));
  if (count < 1) {
    throw InvalidArgument("poison_dataset: poisoning rate " + std::to_string(spec.poisoning_rate) +
                          " selects no sample out of " + std::to_string(n));
  }
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < n; ++i) {
    if (clean.labels[i] != spec.target_label) candidates.push_back(i);
  }
  if (count > candidates.size()) {
    throw InvalidArgument("poison_dataset: " + std::to_string(count) + " samples requested, only " +
                          std::to_string(candidates.size()) + " non-target samples available");
  }
  Rng rng(derive_seed(spec.seed, 0x9015));
  PoisonResult result;
  for (std::size_t k : rng.sample_without_replacement(candidates.size(), count)) {
    result.poisoned.push_back(candidates[k]);
  }
  std::sort(result.poisoned.begin(), result.poisoned.end());
  result.data = rematerialize(clean, spec, result.poisoned);
  return result;
}

ImageSet triggered_test_set(const ImageSet& test, const AttackSpec& spec) {
  spec.validate(test.num_classes);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (test.labels[i] != spec.target_label) keep.push_back(i);
  }
  ImageSet out = test.subset(keep);
  const Trigger trigger(spec, test.image_shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    trigger.apply(out.images.item(i));
    out.is_backdoor[i] = true;
  }
  return out;
}

}  // namespace cogdist::attacks
