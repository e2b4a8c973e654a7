#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cogdist/tensor.hpp"

namespace cogdist {

/// A batch of images in [0,1] with labels and ground-truth poisoning flags.
struct ImageSet {
  FloatTensor images;  // (n, c, h, w)
  std::vector<int> labels;
  std::vector<bool> is_backdoor;
  int num_classes = 0;
  std::map<std::string, std::string> meta;

  std::size_t size() const { return labels.size(); }
  Shape image_shape() const {
    Shape s = images.shape();
    s.n = 1;
    return s;
  }

  /// Throws ShapeError / InvalidArgument when any invariant is broken.
  void validate() const;

  ImageSet subset(std::span<const std::size_t> indices) const;
  std::size_t count_backdoor() const;
};

/// Binary attribute matrix paired row-for-row with an ImageSet.
struct AttributeTable {
  std::vector<std::string> names;
  std::vector<std::uint8_t> values;  // row-major (n, names.size())
  std::size_t rows = 0;

  std::size_t num_attributes() const { return names.size(); }
  bool get(std::size_t row, std::size_t attr) const { return values[row * names.size() + attr] != 0; }
  void validate(std::size_t expected_rows) const;
};

// Loaders ----------------------------------------------------------------

/// Reads one or more CIFAR-10 binary batch files (1 label byte + 3072 pixel bytes per record).
ImageSet load_cifar10_binary(std::span<const std::filesystem::path> files);
ImageSet load_cifar10_binary(const std::filesystem::path& file);

/// Reads an IDX image file (magic 0x00000803) and label file (magic 0x00000801).
ImageSet load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Writers for the two binary formats, used to produce fixtures and subsets.
void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
               const ImageSet& set);
void write_cifar10_binary(const std::filesystem::path& file, const ImageSet& set);

// Synthetic data -----------------------------------------------------------

/// Class k is a bright filled rectangle at the k-th of K grid positions, jittered by
/// up to one pixel, over a low-intensity noise background. Deterministic in `seed`.
ImageSet make_synthetic_shapes(std::size_t n_per_class, int num_classes, std::size_t height,
                               std::size_t width, std::uint64_t seed, std::size_t channels = 1);

/// A planted co-occurrence: attribute `follower` copies attribute `leader` with
/// probability `strength`, and is drawn independently otherwise.
struct AttributeLink {
  std::size_t leader = 0;
  std::size_t follower = 0;
  double strength = 1.0;
};

struct AttributeDataset {
  ImageSet images;  // labels hold attribute 0
  AttributeTable attributes;
};

/// Images where each of `num_attributes` binary attributes draws its own marker
/// (a short bar in a dedicated cell). `faint` attributes are drawn at low contrast.
AttributeDataset make_synthetic_attributes(std::size_t n, std::size_t num_attributes,
                                           std::size_t height, std::size_t width,
                                           std::span<const AttributeLink> links,
                                           std::span<const std::size_t> faint, std::uint64_t seed);

// Mask persistence ----------------------------------------------------------

/// 2-D mask stored as raw little-endian float32 plus `<path>.json` {shape, dtype}.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> values;

  float at(std::size_t i, std::size_t j) const { return values[i * width + j]; }
  double l1() const;
  friend bool operator==(const Mask&, const Mask&) = default;
};

void save_mask(const std::filesystem::path& path, const Mask& mask);
Mask load_mask(const std::filesystem::path& path);
/// 8-bit binary PGM for viewing; not read back.
void export_mask_pgm(const std::filesystem::path& path, const Mask& mask);

}  // namespace cogdist
