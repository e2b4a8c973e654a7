#include "cogdist/model.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "cogdist/rng.hpp"

namespace cogdist::nn {
namespace fs = std::filesystem;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv3x3: return "conv3x3";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2: return "maxpool2";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::linear: return "linear";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
  for (auto k : {LayerKind::conv3x3, LayerKind::relu, LayerKind::maxpool2,
                 LayerKind::global_avg_pool, LayerKind::linear}) {
    if (to_string(k) == s) return k;
  }
  throw InvalidArgument("unknown layer kind '" + s + "'");
}

nlohmann::json Architecture::to_json() const {
  nlohmann::json layers_json = nlohmann::json::array();
  for (const auto& l : layers) layers_json.push_back({{"kind", to_string(l.kind)}, {"out", l.out}});
  return {{"name", name},
          {"input", {input.c, input.h, input.w}},
          {"layers", layers_json},
          {"feature_layer", feature_layer},
          {"num_classes", num_classes}};
}

Architecture Architecture::from_json(const nlohmann::json& j) {
  Architecture a;
  a.name = j.value("name", "");
  const auto in = j.at("input").get<std::vector<std::size_t>>();
  if (in.size() != 3) throw InvalidArgument("architecture input must be [c,h,w]");
  a.input = Shape{1, in[0], in[1], in[2]};
  for (const auto& l : j.at("layers")) {
    a.layers.push_back({layer_kind_from_string(l.at("kind").get<std::string>()),
                        l.value("out", std::size_t{0})});
  }
  a.feature_layer = j.at("feature_layer").get<std::size_t>();
  a.num_classes = j.at("num_classes").get<int>();
  return a;
}

Architecture reference_cnn(Shape input, int num_classes, double width_multiplier) {
  if (input.h < 8 || input.w < 8 || input.c < 1) {
    throw InvalidArgument("reference_cnn: input " + input.str() + " unsupported (need h,w >= 8)");
  }
  if (num_classes < 2) throw InvalidArgument("reference_cnn: need at least 2 classes");
  if (!(width_multiplier > 0.0)) throw InvalidArgument("reference_cnn: width_multiplier must be > 0");
  auto width = [&](double base) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(base * width_multiplier)));
  };
  Architecture a;
  a.name = "reference_cnn";
  a.input = Shape{1, input.c, input.h, input.w};
  a.num_classes = num_classes;
  a.layers = {{LayerKind::conv3x3, width(8)},  {LayerKind::relu, 0}, {LayerKind::maxpool2, 0},
              {LayerKind::conv3x3, width(16)}, {LayerKind::relu, 0}, {LayerKind::maxpool2, 0},
              {LayerKind::conv3x3, width(32)}, {LayerKind::relu, 0},
              {LayerKind::linear, width(64)},  {LayerKind::relu, 0},
              {LayerKind::linear, static_cast<std::size_t>(num_classes)}};
  a.feature_layer = 7;
  return a;
}

namespace {

std::size_t param_count(const LayerSpec& l, const Shape& in) {
  switch (l.kind) {
    case LayerKind::conv3x3: return l.out * in.c * 9 + l.out;
    case LayerKind::linear: return l.out * in.per_item() + l.out;
    default: return 0;
  }
}

Shape out_shape(const LayerSpec& l, const Shape& in) {
  switch (l.kind) {
    case LayerKind::conv3x3: return {1, l.out, in.h, in.w};
    case LayerKind::relu: return in;
    case LayerKind::maxpool2:
      if (in.h < 2 || in.w < 2) throw InvalidArgument("maxpool2 on spatial size below 2");
      return {1, in.c, in.h / 2, in.w / 2};
    case LayerKind::global_avg_pool: return {1, in.c, 1, 1};
    case LayerKind::linear: return {1, l.out, 1, 1};
  }
  return in;
}

// cols is (C*9, N*H*W) row-major.
void im2col(const Batch& x, std::vector<double>& cols) {
  const auto [n, c, h, w] = x.shape();
  const std::size_t hw = h * w;
  const std::size_t ncols = n * hw;
  cols.assign(c * 9 * ncols, 0.0);
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        double* row = cols.data() + ((ci * 9) + ky * 3 + kx) * ncols;
        for (std::size_t b = 0; b < n; ++b) {
          const double* src = x.data() + (b * c + ci) * hw;
          double* dst = row + b * hw;
          for (std::size_t y = 0; y < h; ++y) {
            const long sy = static_cast<long>(y + ky) - 1;
            if (sy < 0 || sy >= static_cast<long>(h)) continue;
            for (std::size_t xx = 0; xx < w; ++xx) {
              const long sx = static_cast<long>(xx + kx) - 1;
              if (sx < 0 || sx >= static_cast<long>(w)) continue;
              dst[y * w + xx] = src[static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)];
            }
          }
        }
      }
    }
  }
}

void col2im(const std::vector<double>& cols, Batch& dx) {
  const auto [n, c, h, w] = dx.shape();
  const std::size_t hw = h * w;
  const std::size_t ncols = n * hw;
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const double* row = cols.data() + ((ci * 9) + ky * 3 + kx) * ncols;
        for (std::size_t b = 0; b < n; ++b) {
          double* dst = dx.data() + (b * c + ci) * hw;
          const double* src = row + b * hw;
          for (std::size_t y = 0; y < h; ++y) {
            const long sy = static_cast<long>(y + ky) - 1;
            if (sy < 0 || sy >= static_cast<long>(h)) continue;
            for (std::size_t xx = 0; xx < w; ++xx) {
              const long sx = static_cast<long>(xx + kx) - 1;
              if (sx < 0 || sx >= static_cast<long>(w)) continue;
              dst[static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)] += src[y * w + xx];
            }
          }
        }
      }
    }
  }
}

Batch conv_forward(const Batch& x, std::size_t out_c, const double* params) {
  const auto [n, c, h, w] = x.shape();
  const std::size_t hw = h * w;
  std::vector<double> cols;
  im2col(x, cols);
  ConstMatMap weight(params, static_cast<Eigen::Index>(out_c), static_cast<Eigen::Index>(c * 9));
  const double* bias = params + out_c * c * 9;
  ConstMatMap col_mat(cols.data(), static_cast<Eigen::Index>(c * 9), static_cast<Eigen::Index>(n * hw));
  RowMatrix out_mat = weight * col_mat;
  Batch y(Shape{n, out_c, h, w});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t o = 0; o < out_c; ++o) {
      const double* src = out_mat.data() + o * n * hw + b * hw;
      double* dst = y.data() + (b * out_c + o) * hw;
      for (std::size_t p = 0; p < hw; ++p) dst[p] = src[p] + bias[o];
    }
  }
  return y;
}

void conv_backward(const Batch& x, const Batch& dy, const double* params, Batch* dx,
                   double* d_params) {
  const auto [n, c, h, w] = x.shape();
  const std::size_t out_c = dy.shape().c;
  const std::size_t hw = h * w;
  RowMatrix g(static_cast<Eigen::Index>(out_c), static_cast<Eigen::Index>(n * hw));
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t o = 0; o < out_c; ++o) {
      std::memcpy(g.data() + o * n * hw + b * hw, dy.data() + (b * out_c + o) * hw,
                  hw * sizeof(double));
    }
  }
  std::vector<double> cols;
  if (d_params != nullptr) {
    im2col(x, cols);
    ConstMatMap col_mat(cols.data(), static_cast<Eigen::Index>(c * 9), static_cast<Eigen::Index>(n * hw));
    MatMap dw(d_params, static_cast<Eigen::Index>(out_c), static_cast<Eigen::Index>(c * 9));
    dw.noalias() += g * col_mat.transpose();
    double* db = d_params + out_c * c * 9;
    for (std::size_t o = 0; o < out_c; ++o) db[o] += g.row(static_cast<Eigen::Index>(o)).sum();
  }
  if (dx != nullptr) {
    ConstMatMap weight(params, static_cast<Eigen::Index>(out_c), static_cast<Eigen::Index>(c * 9));
    RowMatrix dcols = weight.transpose() * g;
    cols.assign(dcols.data(), dcols.data() + dcols.size());
    *dx = Batch(x.shape());
    col2im(cols, *dx);
  }
}

Batch linear_forward(const Batch& x, std::size_t out, const double* params) {
  const std::size_t n = x.shape().n;
  const std::size_t d = x.shape().per_item();
  ConstMatMap in(x.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  ConstMatMap weight(params, static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(d));
  Eigen::Map<const Eigen::RowVectorXd> bias(params + out * d, static_cast<Eigen::Index>(out));
  Batch y(Shape{n, out, 1, 1});
  MatMap ym(y.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(out));
  ym.noalias() = in * weight.transpose();
  ym.rowwise() += bias;
  return y;
}

void linear_backward(const Batch& x, const Batch& dy, const double* params, Batch* dx,
                     double* d_params) {
  const std::size_t n = x.shape().n;
  const std::size_t d = x.shape().per_item();
  const std::size_t out = dy.shape().per_item();
  ConstMatMap g(dy.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(out));
  if (d_params != nullptr) {
    ConstMatMap in(x.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    MatMap dw(d_params, static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(d));
    dw.noalias() += g.transpose() * in;
    Eigen::Map<Eigen::RowVectorXd> db(d_params + out * d, static_cast<Eigen::Index>(out));
    db += g.colwise().sum();
  }
  if (dx != nullptr) {
    ConstMatMap weight(params, static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(d));
    *dx = Batch(x.shape());
    MatMap dxm(dx->data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    dxm.noalias() = g * weight;
  }
}

Batch maxpool_forward(const Batch& x) {
  const auto [n, c, h, w] = x.shape();
  const std::size_t oh = h / 2, ow = w / 2;
  Batch y(Shape{n, c, oh, ow});
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* src = x.data() + p * h * w;
    double* dst = y.data() + p * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const double* s = src + 2 * i * w + 2 * j;
        dst[i * ow + j] = std::max(std::max(s[0], s[1]), std::max(s[w], s[w + 1]));
      }
    }
  }
  return y;
}

// Gradient goes to the first maximum in scan order.
Batch maxpool_backward(const Batch& x, const Batch& dy) {
  const auto [n, c, h, w] = x.shape();
  const std::size_t oh = h / 2, ow = w / 2;
  Batch dx(x.shape());
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* src = x.data() + p * h * w;
    const double* g = dy.data() + p * oh * ow;
    double* dst = dx.data() + p * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t base = 2 * i * w + 2 * j;
        std::size_t best = base;
        for (std::size_t off : {base + 1, base + w, base + w + 1}) {
          if (src[off] > src[best]) best = off;
        }
        dst[best] += g[i * ow + j];
      }
    }
  }
  return dx;
}

}  // namespace

void Model::layout() {
  shapes_.clear();
  offsets_.clear();
  shapes_.push_back(arch_.input);
  std::size_t total = 0;
  for (const auto& l : arch_.layers) {
    if ((l.kind == LayerKind::conv3x3 || l.kind == LayerKind::linear) && l.out == 0) {
      throw InvalidArgument("layer " + to_string(l.kind) + " needs a positive output size");
    }
    offsets_.push_back(total);
    total += param_count(l, shapes_.back());
    shapes_.push_back(out_shape(l, shapes_.back()));
  }
  if (arch_.layers.empty()) throw InvalidArgument("architecture has no layers");
  if (arch_.feature_layer >= arch_.layers.size()) throw InvalidArgument("feature_layer out of range");
  if (shapes_.back().per_item() != static_cast<std::size_t>(arch_.num_classes)) {
    throw InvalidArgument("last layer width " + std::to_string(shapes_.back().per_item()) +
                          " differs from num_classes " + std::to_string(arch_.num_classes));
  }
  params_.assign(total, 0.0);
}

Model::Model(Architecture arch, std::uint64_t seed) : arch_(std::move(arch)) {
  layout();
  Rng rng(seed);
  for (std::size_t k = 0; k < arch_.layers.size(); ++k) {
    const auto& l = arch_.layers[k];
    std::size_t fan_in = 0;
    if (l.kind == LayerKind::conv3x3) fan_in = shapes_[k].c * 9;
    if (l.kind == LayerKind::linear) fan_in = shapes_[k].per_item();
    if (fan_in == 0) continue;
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    const std::size_t n_weights = l.out * fan_in;
    for (std::size_t i = 0; i < n_weights; ++i) params_[offsets_[k] + i] = stddev * rng.normal();
  }
}

std::size_t Model::feature_dim() const { return shapes_[arch_.feature_layer + 1].per_item(); }

void Model::check_input(const Batch& x) const {
  const Shape s = x.shape();
  if (s.c != arch_.input.c || s.h != arch_.input.h || s.w != arch_.input.w) {
    throw ShapeError("model expects (" + std::to_string(arch_.input.c) + "," +
                     std::to_string(arch_.input.h) + "," + std::to_string(arch_.input.w) +
                     ") inputs, got " + s.str());
  }
}

ForwardTrace Model::forward(Batch x) const {
  check_input(x);
  ForwardTrace t;
  t.acts.reserve(arch_.layers.size() + 1);
  t.acts.push_back(std::move(x));
  for (std::size_t k = 0; k < arch_.layers.size(); ++k) {
    const Batch& in = t.acts.back();
    const auto& l = arch_.layers[k];
    const double* p = params_.data() + offsets_[k];
    switch (l.kind) {
      case LayerKind::conv3x3: t.acts.push_back(conv_forward(in, l.out, p)); break;
      case LayerKind::relu: {
        Batch y = in;
        for (auto& v : y.vec()) v = v > 0.0 ? v : 0.0;
        t.acts.push_back(std::move(y));
        break;
      }
      case LayerKind::maxpool2: t.acts.push_back(maxpool_forward(in)); break;
      case LayerKind::global_avg_pool: {
        const auto [n, c, h, w] = in.shape();
        Batch y(Shape{n, c, 1, 1});
        for (std::size_t i = 0; i < n * c; ++i) {
          const double* src = in.data() + i * h * w;
          y[i] = std::accumulate(src, src + h * w, 0.0) / static_cast<double>(h * w);
        }
        t.acts.push_back(std::move(y));
        break;
      }
      case LayerKind::linear: t.acts.push_back(linear_forward(in, l.out, p)); break;
    }
  }
  return t;
}

Batch Model::backward(const ForwardTrace& trace, const Batch* d_logits, const Batch* d_features,
                      std::span<double> d_params) const {
  if (trace.acts.size() != arch_.layers.size() + 1) throw InvalidArgument("backward: stale trace");
  const bool want_params = !d_params.empty();
  if (want_params && d_params.size() != params_.size()) {
    throw ShapeError("backward: parameter gradient buffer has wrong size");
  }
  auto check_grad = [&](const Batch* g, const Batch& act, const char* what) {
    if (g != nullptr && !g->empty() && g->size() != act.size()) {
      throw ShapeError(std::string("backward: ") + what + " gradient shape " + g->shape().str() +
                       " does not match " + act.shape().str());
    }
  };
  check_grad(d_logits, trace.acts.back(), "logits");
  check_grad(d_features, trace.acts[arch_.feature_layer + 1], "feature");

  Shape last = trace.acts.back().shape();
  Batch grad(last);
  if (d_logits != nullptr && !d_logits->empty()) grad = Batch(last, d_logits->vec());
  for (std::size_t k = arch_.layers.size(); k-- > 0;) {
    if (k == arch_.feature_layer && d_features != nullptr && !d_features->empty()) {
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += (*d_features)[i];
    }
    const Batch& in = trace.acts[k];
    const Batch& out = trace.acts[k + 1];
    const auto& l = arch_.layers[k];
    const double* p = params_.data() + offsets_[k];
    double* dp = want_params ? d_params.data() + offsets_[k] : nullptr;
    switch (l.kind) {
      case LayerKind::conv3x3: {
        Batch dx;
        conv_backward(in, grad, p, &dx, dp);
        grad = std::move(dx);
        break;
      }
      case LayerKind::relu:
        for (std::size_t i = 0; i < grad.size(); ++i) {
          if (!(out[i] > 0.0)) grad[i] = 0.0;
        }
        break;
      case LayerKind::maxpool2: grad = maxpool_backward(in, grad); break;
      case LayerKind::global_avg_pool: {
        const auto [bn, c, h, w] = in.shape();
        Batch dx(in.shape());
        const double scale = 1.0 / static_cast<double>(h * w);
        for (std::size_t i = 0; i < bn * c; ++i) {
          const double g = grad[i] * scale;
          std::fill(dx.data() + i * h * w, dx.data() + (i + 1) * h * w, g);
        }
        grad = std::move(dx);
        break;
      }
      case LayerKind::linear: {
        Batch dx;
        linear_backward(in, grad, p, &dx, dp);
        grad = std::move(dx);
        break;
      }
    }
  }
  return grad;
}

void Model::save(const fs::path& blob) const {
  std::ofstream out(blob, std::ios::binary);
  if (!out) throw Error("cannot write " + blob.string());
  out.write(reinterpret_cast<const char*>(params_.data()),
            static_cast<std::streamsize>(params_.size() * sizeof(double)));
  nlohmann::json meta = {{"architecture", arch_.to_json()},
                         {"dtype", "float64"},
                         {"num_parameters", params_.size()}};
  std::ofstream(blob.string() + ".json") << meta.dump(2) << "\n";
}

Model Model::load(const fs::path& blob) {
  std::ifstream side(blob.string() + ".json");
  if (!side) throw FormatError("missing checkpoint descriptor " + blob.string() + ".json");
  const auto meta = nlohmann::json::parse(side);
  Model m;
  m.arch_ = Architecture::from_json(meta.at("architecture"));
  m.layout();
  std::ifstream in(blob, std::ios::binary | std::ios::ate);
  if (!in) throw FormatError("cannot read " + blob.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != m.params_.size() * sizeof(double)) {
    throw FormatError(blob.string() + ": " + std::to_string(bytes) + " bytes, architecture needs " +
                      std::to_string(m.params_.size() * sizeof(double)));
  }
  in.seekg(0);
  in.read(reinterpret_cast<char*>(m.params_.data()), static_cast<std::streamsize>(bytes));
  return m;
}

Model build_reference_cnn(Shape input, int num_classes, double width_multiplier,
                          std::uint64_t seed) {
  return Model(reference_cnn(input, num_classes, width_multiplier), seed);
}

namespace {
constexpr std::size_t kEvalChunk = 256;

template <class Pick>
Batch chunked_forward(const Model& model, const Batch& images, Pick pick) {
  const std::size_t n = images.shape().n;
  Batch out;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += kEvalChunk) {
    const std::size_t end = std::min(n, start + kEvalChunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto trace = model.forward(gather_batch(images, idx));
    const Batch& part = pick(trace);
    if (out.empty()) {
      Shape s = part.shape();
      s.n = n;
      out = Batch(s);
    }
    std::copy(part.vec().begin(), part.vec().end(), out.data() + start * part.shape().per_item());
  }
  return out;
}
}  // namespace

Batch forward_logits(const Model& model, const Batch& images) {
  return chunked_forward(model, images, [&](const ForwardTrace& t) -> const Batch& { return model.logits(t); });
}

Batch forward_features(const Model& model, const Batch& images) {
  Batch f = chunked_forward(model, images,
                            [&](const ForwardTrace& t) -> const Batch& { return model.features(t); });
  f.reshape(Shape{f.shape().n, f.shape().per_item(), 1, 1});
  return f;
}

Batch softmax(const Batch& logits) {
  Batch p(logits.shape());
  const std::size_t n = logits.shape().n;
  const std::size_t k = logits.shape().per_item();
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.data() + i * k;
    double* out = p.data() + i * k;
    const double mx = *std::max_element(z, z + k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += (out[j] = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < k; ++j) out[j] /= total;
  }
  return p;
}

Batch input_gradient(const Model& model, const Batch& images, const Objective& objective) {
  const auto trace = model.forward(images);
  Batch features = model.features(trace);
  features.reshape(Shape{features.shape().n, features.shape().per_item(), 1, 1});
  ObjectiveValue value = objective(model.logits(trace), features);
  if (!value.d_features.empty()) value.d_features.reshape(model.features(trace).shape());
  return model.backward(trace, &value.d_logits, &value.d_features);
}

}  // namespace cogdist::nn
