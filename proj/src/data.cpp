#include "cogdist/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <sstream>

#include "cogdist/rng.hpp"

namespace cogdist {
namespace fs = std::filesystem;

void ImageSet::validate() const {
  const Shape s = images.shape();
  if (s.n != labels.size() || s.n != is_backdoor.size()) {
    throw ShapeError("ImageSet: images/labels/is_backdoor lengths disagree (" +
                     std::to_string(s.n) + "/" + std::to_string(labels.size()) + "/" +
                     std::to_string(is_backdoor.size()) + ")");
  }
  if (num_classes < 1) throw InvalidArgument("ImageSet: num_classes must be positive");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const float v = images[i];
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw InvalidArgument("ImageSet: pixel " + std::to_string(i) + " outside [0,1]");
    }
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw InvalidArgument("ImageSet: label " + std::to_string(labels[i]) + " at index " +
                            std::to_string(i) + " outside [0," + std::to_string(num_classes) + ")");
    }
  }
}

ImageSet ImageSet::subset(std::span<const std::size_t> indices) const {
  ImageSet out;
  Shape s = images.shape();
  s.n = indices.size();
  out.images = FloatTensor(s);
  out.labels.reserve(indices.size());
  out.is_backdoor.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    auto src = images.item(indices[k]);
    std::copy(src.begin(), src.end(), out.images.item(k).begin());
    out.labels.push_back(labels[indices[k]]);
    out.is_backdoor.push_back(is_backdoor[indices[k]]);
  }
  out.num_classes = num_classes;
  out.meta = meta;
  return out;
}

std::size_t ImageSet::count_backdoor() const {
  return static_cast<std::size_t>(std::count(is_backdoor.begin(), is_backdoor.end(), true));
}

void AttributeTable::validate(std::size_t expected_rows) const {
  if (rows != expected_rows) {
    throw ShapeError("AttributeTable: " + std::to_string(rows) + " rows, paired set has " +
                     std::to_string(expected_rows));
  }
  if (values.size() != rows * names.size()) throw ShapeError("AttributeTable: value count");
}

namespace {

std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset,
                        const fs::path& path) {
  if (offset + 4 > buf.size()) {
    throw FormatError(path.string() + ": truncated header at offset " + std::to_string(offset));
  }
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                         static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(bytes, 4);
}

unsigned char to_byte(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

constexpr std::size_t kCifarRecord = 3073;
constexpr std::size_t kCifarSide = 32;

}  // namespace

ImageSet load_cifar10_binary(std::span<const fs::path> files) {
  std::vector<std::vector<unsigned char>> buffers;
  std::size_t n = 0;
  for (const auto& f : files) {
    auto buf = read_file(f);
    if (buf.size() % kCifarRecord != 0) {
      const std::size_t offset = buf.size() - buf.size() % kCifarRecord;
      throw FormatError(f.string() + ": incomplete record of " +
                        std::to_string(buf.size() - offset) + " bytes at offset " +
                        std::to_string(offset) + " (records are 3073 bytes)");
    }
    n += buf.size() / kCifarRecord;
    buffers.push_back(std::move(buf));
  }
  ImageSet set;
  set.images = FloatTensor(Shape{n, 3, kCifarSide, kCifarSide});
  set.labels.reserve(n);
  set.is_backdoor.assign(n, false);
  set.num_classes = 10;
  std::size_t k = 0;
  for (std::size_t b = 0; b < buffers.size(); ++b) {
    const auto& buf = buffers[b];
    for (std::size_t off = 0; off < buf.size(); off += kCifarRecord, ++k) {
      const int label = buf[off];
      if (label > 9) {
        throw FormatError(files[b].string() + ": label " + std::to_string(label) +
                          " at offset " + std::to_string(off));
      }
      set.labels.push_back(label);
      auto img = set.images.item(k);
      for (std::size_t p = 0; p < kCifarRecord - 1; ++p) {
        img[p] = static_cast<float>(buf[off + 1 + p]) / 255.0f;
      }
    }
  }
  set.meta["dataset"] = "cifar10";
  set.validate();
  return set;
}

ImageSet load_cifar10_binary(const fs::path& file) {
  return load_cifar10_binary(std::span<const fs::path>(&file, 1));
}

ImageSet load_idx(const fs::path& images_path, const fs::path& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  const std::uint32_t img_magic = read_be32(img, 0, images_path);
  if (img_magic != 0x00000803) {
    std::ostringstream msg;
    msg << images_path.string() << ": bad IDX image magic 0x" << std::hex << img_magic;
    throw FormatError(msg.str());
  }
  const std::uint32_t lab_magic = read_be32(lab, 0, labels_path);
  if (lab_magic != 0x00000801) {
    std::ostringstream msg;
    msg << labels_path.string() << ": bad IDX label magic 0x" << std::hex << lab_magic;
    throw FormatError(msg.str());
  }
  const std::size_t n = read_be32(img, 4, images_path);
  const std::size_t rows = read_be32(img, 8, images_path);
  const std::size_t cols = read_be32(img, 12, images_path);
  const std::size_t n_labels = read_be32(lab, 4, labels_path);
  if (n != n_labels) {
    throw FormatError("IDX count mismatch: " + std::to_string(n) + " images vs " +
                      std::to_string(n_labels) + " labels");
  }
  if (img.size() != 16 + n * rows * cols) {
    throw FormatError(images_path.string() + ": expected " + std::to_string(16 + n * rows * cols) +
                      " bytes, found " + std::to_string(img.size()));
  }
  if (lab.size() != 8 + n) {
    throw FormatError(labels_path.string() + ": expected " + std::to_string(8 + n) +
                      " bytes, found " + std::to_string(lab.size()));
  }
  ImageSet set;
  set.images = FloatTensor(Shape{n, 1, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i) {
    set.images[i] = static_cast<float>(img[16 + i]) / 255.0f;
  }
  int max_label = 0;
  set.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    set.labels[i] = lab[8 + i];
    max_label = std::max(max_label, set.labels[i]);
  }
  set.is_backdoor.assign(n, false);
  set.num_classes = std::max(2, max_label + 1);
  set.meta["dataset"] = "idx";
  set.validate();
  return set;
}

void write_idx(const fs::path& images_path, const fs::path& labels_path, const ImageSet& set) {
  const Shape s = set.images.shape();
  if (s.c != 1) throw ShapeError("write_idx: IDX images must be single-channel");
  std::ofstream img(images_path, std::ios::binary);
  write_be32(img, 0x00000803);
  write_be32(img, static_cast<std::uint32_t>(s.n));
  write_be32(img, static_cast<std::uint32_t>(s.h));
  write_be32(img, static_cast<std::uint32_t>(s.w));
  for (float v : set.images.vec()) img.put(static_cast<char>(to_byte(v)));
  std::ofstream lab(labels_path, std::ios::binary);
  write_be32(lab, 0x00000801);
  write_be32(lab, static_cast<std::uint32_t>(s.n));
  for (int l : set.labels) lab.put(static_cast<char>(l));
}

void write_cifar10_binary(const fs::path& file, const ImageSet& set) {
  const Shape s = set.images.shape();
  if (s.c != 3 || s.h != kCifarSide || s.w != kCifarSide) {
    throw ShapeError("write_cifar10_binary: images must be (3,32,32), got " + s.str());
  }
  std::ofstream out(file, std::ios::binary);
  for (std::size_t i = 0; i < s.n; ++i) {
    out.put(static_cast<char>(set.labels[i]));
    for (float v : set.images.item(i)) out.put(static_cast<char>(to_byte(v)));
  }
}

ImageSet make_synthetic_shapes(std::size_t n_per_class, int num_classes, std::size_t height,
                               std::size_t width, std::uint64_t seed, std::size_t channels) {
  if (num_classes < 2) throw InvalidArgument("make_synthetic_shapes: need at least 2 classes");
  if (channels < 1) throw InvalidArgument("make_synthetic_shapes: channels must be >= 1");
  const auto k = static_cast<std::size_t>(num_classes);
  const auto grid = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(k))));
  // one-pixel border, then a grid x grid layout of cells holding one rectangle each
  const std::size_t cell_h = height >= 2 ? (height - 2) / grid : 0;
  const std::size_t cell_w = width >= 2 ? (width - 2) / grid : 0;
  if (cell_h < 4 || cell_w < 4) {
    throw InvalidArgument("make_synthetic_shapes: " + std::to_string(height) + "x" +
                          std::to_string(width) + " is too small for " +
                          std::to_string(num_classes) + " shape positions");
  }
  const std::size_t rect_h = std::max<std::size_t>(2, cell_h / 2 + 1);
  const std::size_t rect_w = std::max<std::size_t>(2, cell_w / 2 + 1);

  const std::size_t n = n_per_class * k;
  ImageSet set;
  set.images = FloatTensor(Shape{n, channels, height, width});
  set.labels.resize(n);
  set.is_backdoor.assign(n, false);
  set.num_classes = num_classes;

  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % k;
    set.labels[i] = static_cast<int>(label);
    auto img = set.images.item(i);
    for (auto& v : img) v = static_cast<float>(rng.uniform(0.0, 0.2));

    const std::size_t cell_row = label / grid;
    const std::size_t cell_col = label % grid;
    const long jitter_y = static_cast<long>(rng.index(3)) - 1;
    const long jitter_x = static_cast<long>(rng.index(3)) - 1;
    const long top = static_cast<long>(1 + cell_row * cell_h + (cell_h - rect_h) / 2) + jitter_y;
    const long left = static_cast<long>(1 + cell_col * cell_w + (cell_w - rect_w) / 2) + jitter_x;
    std::vector<float> color(channels);
    for (auto& c : color) c = static_cast<float>(rng.uniform(0.6, 1.0));
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t y = 0; y < rect_h; ++y) {
        for (std::size_t x = 0; x < rect_w; ++x) {
          const long yy = std::clamp<long>(top + static_cast<long>(y), 0, static_cast<long>(height) - 1);
          const long xx = std::clamp<long>(left + static_cast<long>(x), 0, static_cast<long>(width) - 1);
          const float noise = static_cast<float>(rng.uniform(-0.05, 0.05));
          img[(c * height + static_cast<std::size_t>(yy)) * width + static_cast<std::size_t>(xx)] =
              std::clamp(color[c] + noise, 0.0f, 1.0f);
        }
      }
    }
  }
  set.meta["dataset"] = "synthetic_shapes";
  set.meta["seed"] = std::to_string(seed);
  set.validate();
  return set;
}

AttributeDataset make_synthetic_attributes(std::size_t n, std::size_t num_attributes,
                                           std::size_t height, std::size_t width,
                                           std::span<const AttributeLink> links,
                                           std::span<const std::size_t> faint, std::uint64_t seed) {
  if (num_attributes < 2) throw InvalidArgument("make_synthetic_attributes: need >= 2 attributes");
  const auto grid = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(num_attributes))));
  const std::size_t cell_h = height / grid;
  const std::size_t cell_w = width / grid;
  if (cell_h < 3 || cell_w < 3) throw InvalidArgument("make_synthetic_attributes: image too small");
  for (const auto& link : links) {
    if (link.leader >= num_attributes || link.follower >= num_attributes ||
        link.leader == link.follower) {
      throw InvalidArgument("make_synthetic_attributes: bad attribute link");
    }
  }

  AttributeDataset out;
  out.attributes.rows = n;
  for (std::size_t a = 0; a < num_attributes; ++a) out.attributes.names.push_back("attr" + std::to_string(a));
  out.attributes.values.assign(n * num_attributes, 0);

  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint8_t* row = out.attributes.values.data() + i * num_attributes;
    for (std::size_t a = 0; a < num_attributes; ++a) row[a] = rng.uniform() < 0.5 ? 1 : 0;
    for (const auto& link : links) {
      if (rng.uniform() < link.strength) row[link.follower] = row[link.leader];
    }
  }

  ImageSet& set = out.images;
  set.images = FloatTensor(Shape{n, 1, height, width});
  set.labels.resize(n);
  set.is_backdoor.assign(n, false);
  set.num_classes = 2;
  for (std::size_t i = 0; i < n; ++i) {
    auto img = set.images.item(i);
    for (auto& v : img) v = static_cast<float>(rng.uniform(0.0, 0.2));
    for (std::size_t a = 0; a < num_attributes; ++a) {
      if (!out.attributes.get(i, a)) continue;
      const bool is_faint = std::find(faint.begin(), faint.end(), a) != faint.end();
      const float level = is_faint ? 0.35f : 0.95f;
      const std::size_t y = (a / grid) * cell_h + cell_h / 2;
      const std::size_t x0 = (a % grid) * cell_w + 1;
      for (std::size_t x = x0; x + 1 < x0 + cell_w; ++x) img[y * width + x] = level;
    }
    set.labels[i] = out.attributes.get(i, 0) ? 1 : 0;
  }
  set.meta["dataset"] = "synthetic_attributes";
  set.meta["seed"] = std::to_string(seed);
  set.validate();
  return out;
}

double Mask::l1() const {
  double s = 0.0;
  for (float v : values) s += std::abs(static_cast<double>(v));
  return s;
}

namespace {
fs::path sidecar(const fs::path& path) { return fs::path(path.string() + ".json"); }
}  // namespace

void save_mask(const fs::path& path, const Mask& mask) {
  if (mask.values.size() != mask.height * mask.width) throw ShapeError("save_mask: value count");
  for (float v : mask.values) {
    if (!(v >= 0.0f && v <= 1.0f)) throw InvalidArgument("save_mask: value outside [0,1]");
  }
  static_assert(std::endian::native == std::endian::little, "mask files are little-endian");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("save_mask: cannot open " + path.string());
  out.write(reinterpret_cast<const char*>(mask.values.data()),
            static_cast<std::streamsize>(mask.values.size() * sizeof(float)));
  nlohmann::json meta = {{"shape", {mask.height, mask.width}}, {"dtype", "float32"}};
  std::ofstream(sidecar(path)) << meta.dump(2) << "\n";
}

Mask load_mask(const fs::path& path) {
  std::ifstream side(sidecar(path));
  if (!side) throw FormatError("load_mask: missing sidecar " + sidecar(path).string());
  const auto meta = nlohmann::json::parse(side);
  if (meta.value("dtype", "") != "float32") throw FormatError("load_mask: dtype must be float32");
  const auto shape = meta.at("shape").get<std::vector<std::size_t>>();
  if (shape.size() != 2) throw FormatError("load_mask: shape must have two dimensions");
  Mask mask{shape[0], shape[1], {}};
  const auto raw = read_file(path);
  if (raw.size() != mask.height * mask.width * sizeof(float)) {
    throw ShapeError("load_mask: sidecar shape (" + std::to_string(shape[0]) + "," +
                     std::to_string(shape[1]) + ") needs " +
                     std::to_string(mask.height * mask.width * sizeof(float)) + " bytes, file has " +
                     std::to_string(raw.size()));
  }
  mask.values.resize(mask.height * mask.width);
  std::memcpy(mask.values.data(), raw.data(), raw.size());
  return mask;
}

void export_mask_pgm(const fs::path& path, const Mask& mask) {
  std::ofstream out(path, std::ios::binary);
  out << "P5\n" << mask.width << " " << mask.height << "\n255\n";
  for (float v : mask.values) out.put(static_cast<char>(to_byte(v)));
}

}  // namespace cogdist
