#include "cogdist/distill.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <spdlog/spdlog.h>
#include <thread>

#include "cogdist/rng.hpp"

namespace cogdist::distill {

std::string to_string(OutputLayer l) { return l == OutputLayer::logits ? "logits" : "features"; }
std::string to_string(NoiseMode m) {
  return m == NoiseMode::per_step_uniform ? "per_step_uniform" : "zero_fill";
}

CDConfig CDConfig::for_layer(OutputLayer layer) {
  CDConfig c;
  c.layer = layer;
  c.alpha = layer == OutputLayer::logits ? 0.01 : 0.001;
  return c;
}

void CDConfig::validate() const {
  if (!(alpha >= 0.0)) throw ConfigError("cd.alpha", "must be >= 0");
  if (!(beta >= 0.0)) throw ConfigError("cd.beta", "must be >= 0");
  if (steps < 0) throw ConfigError("cd.steps", "must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("cd.lr", "must be > 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ConfigError("cd.adam_beta1", "must be in [0,1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ConfigError("cd.adam_beta2", "must be in [0,1)");
  if (!(adam_eps > 0.0)) throw ConfigError("cd.adam_eps", "must be > 0");
  if (batch_size < 1) throw ConfigError("cd.batch_size", "must be >= 1");
}

nlohmann::json CDConfig::to_json() const {
  return {{"alpha", alpha},
          {"beta", beta},
          {"steps", steps},
          {"lr", lr},
          {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},
          {"adam_eps", adam_eps},
          {"layer", to_string(layer)},
          {"noise_mode", to_string(noise_mode)},
          {"init_raw", init_raw},
          {"output_first", output_first},
          {"output_count", output_count},
          {"batch_size", batch_size}};
}

CDConfig CDConfig::from_json(const nlohmann::json& j) {
  OutputLayer layer = OutputLayer::logits;
  if (j.contains("layer")) {
    const auto name = j.at("layer").get<std::string>();
    if (name == "logits") {
      layer = OutputLayer::logits;
    } else if (name == "features") {
      layer = OutputLayer::features;
    } else {
      throw ConfigError("cd.layer", "expected 'logits' or 'features', got '" + name + "'");
    }
  }
  CDConfig c = for_layer(layer);
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.beta);
  c.steps = j.value("steps", c.steps);
  c.lr = j.value("lr", c.lr);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  if (j.contains("noise_mode")) {
    const auto name = j.at("noise_mode").get<std::string>();
    if (name == "per_step_uniform") {
      c.noise_mode = NoiseMode::per_step_uniform;
    } else if (name == "zero_fill") {
      c.noise_mode = NoiseMode::zero_fill;
    } else {
      throw ConfigError("cd.noise_mode", "expected 'per_step_uniform' or 'zero_fill'");
    }
  }
  c.init_raw = j.value("init_raw", c.init_raw);
  c.output_first = j.value("output_first", c.output_first);
  c.output_count = j.value("output_count", c.output_count);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.validate();
  return c;
}

double tv_loss(std::span<const double> mask, std::size_t height, std::size_t width) {
  if (mask.size() != height * width) throw ShapeError("tv_loss: mask size");
  double tv = 0.0;
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      const double v = mask[i * width + j];
      if (i + 1 < height) tv += std::abs(mask[(i + 1) * width + j] - v);
      if (j + 1 < width) tv += std::abs(mask[i * width + j + 1] - v);
    }
  }
  return tv;
}

namespace {
double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }
}  // namespace

void tv_subgradient(std::span<const double> mask, std::size_t height, std::size_t width,
                    double weight, std::span<double> grad) {
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      const std::size_t p = i * width + j;
      if (i + 1 < height) {
        const double s = weight * sign(mask[p + width] - mask[p]);
        grad[p + width] += s;
        grad[p] -= s;
      }
      if (j + 1 < width) {
        const double s = weight * sign(mask[p + 1] - mask[p]);
        grad[p + 1] += s;
        grad[p] -= s;
      }
    }
  }
}

double mask_reparam(double w_raw) { return 0.5 * (std::tanh(w_raw) + 1.0); }

std::vector<double> mask_reparam(std::span<const double> w_raw) {
  std::vector<double> m(w_raw.size());
  std::transform(w_raw.begin(), w_raw.end(), m.begin(), [](double w) { return mask_reparam(w); });
  return m;
}

void adam_update(std::span<double> params, std::span<const double> grad, AdamState& state,
                 double lr, double beta1, double beta2, double eps) {
  if (grad.size() != params.size()) throw ShapeError("adam_update: gradient size");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad[i];
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad[i] * grad[i];
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

namespace {

// Selected model outputs (B, D) of a forward trace.
Batch select_outputs(const nn::Model& model, const nn::ForwardTrace& trace, const CDConfig& config) {
  const Batch& full = config.layer == OutputLayer::logits ? model.logits(trace) : model.features(trace);
  const std::size_t b = full.shape().n;
  const std::size_t d = full.shape().per_item();
  const std::size_t first = config.output_first;
  const std::size_t count = config.output_count == 0 ? d - std::min(first, d) : config.output_count;
  if (first + count > d || count == 0) {
    throw ShapeError("cd: output slice [" + std::to_string(first) + "," +
                     std::to_string(first + count) + ") outside " + std::to_string(d) + " outputs");
  }
  Batch out(Shape{b, count, 1, 1});
  for (std::size_t i = 0; i < b; ++i) {
    std::copy_n(full.data() + i * d + first, count, out.data() + i * count);
  }
  return out;
}

// Scatters output-slice gradients back to a full-width head gradient.
Batch expand_grad(const Batch& g, const Batch& full, const CDConfig& config) {
  Batch out(full.shape());
  const std::size_t b = full.shape().n;
  const std::size_t d = full.shape().per_item();
  const std::size_t count = g.shape().per_item();
  for (std::size_t i = 0; i < b; ++i) {
    std::copy_n(g.data() + i * count, count, out.data() + i * d + config.output_first);
  }
  return out;
}

// Objective terms for a batch of images and, optionally, gradients w.r.t. the raw masks.
// x: (B,c,h,w); target: selected outputs on x; w_raw: B*h*w; deltas: B*c.
void evaluate_batch(const nn::Model& model, const Batch& x, const Batch& target,
                    std::span<const double> w_raw, std::span<const double> deltas,
                    const CDConfig& config, std::vector<ObjectiveTerms>& terms,
                    std::vector<double>* grad_w) {
  const auto [b, c, h, w] = x.shape();
  const std::size_t hw = h * w;
  const std::vector<double> mask = mask_reparam(w_raw);
  const bool zero_fill = config.noise_mode == NoiseMode::zero_fill;

  Batch x_cp(x.shape());
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double fill = zero_fill ? 0.0 : deltas[i * c + ch];
      const double* src = x.data() + (i * c + ch) * hw;
      double* dst = x_cp.data() + (i * c + ch) * hw;
      const double* m = mask.data() + i * hw;
      for (std::size_t p = 0; p < hw; ++p) dst[p] = src[p] * m[p] + (1.0 - m[p]) * fill;
    }
  }
  const auto trace = model.forward(x_cp);
  const Batch out = select_outputs(model, trace, config);
  const std::size_t d = out.shape().per_item();

  terms.assign(b, {});
  Batch d_out(out.shape());
  for (std::size_t i = 0; i < b; ++i) {
    double fid = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = out[i * d + k] - target[i * d + k];
      fid += std::abs(diff);
      d_out[i * d + k] = sign(diff);
    }
    const std::span<const double> m(mask.data() + i * hw, hw);
    terms[i].fidelity = fid;
    terms[i].l1 = config.alpha * std::accumulate(m.begin(), m.end(), 0.0);
    terms[i].tv = config.beta * tv_loss(m, h, w);
  }
  if (grad_w == nullptr) return;

  const Batch& head = config.layer == OutputLayer::logits ? model.logits(trace) : model.features(trace);
  const Batch d_head = expand_grad(d_out, head, config);
  const Batch d_xcp = config.layer == OutputLayer::logits ? model.backward(trace, &d_head, nullptr)
                                                           : model.backward(trace, nullptr, &d_head);
  grad_w->assign(b * hw, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    std::span<double> g(grad_w->data() + i * hw, hw);
    const std::span<const double> m(mask.data() + i * hw, hw);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double fill = zero_fill ? 0.0 : deltas[i * c + ch];
      const double* src = x.data() + (i * c + ch) * hw;
      const double* gx = d_xcp.data() + (i * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) g[p] += gx[p] * (src[p] - fill);
    }
    for (std::size_t p = 0; p < hw; ++p) g[p] += config.alpha;
    tv_subgradient(m, h, w, config.beta, g);
    // chain rule through m = (tanh(w) + 1) / 2: dm/dw = 2 m (1 - m)
    for (std::size_t p = 0; p < hw; ++p) g[p] *= 2.0 * m[p] * (1.0 - m[p]);
  }
}

void check_image_shape(const nn::Model& model, Shape s) {
  const Shape in = model.input_shape();
  if (s.c != in.c || s.h != in.h || s.w != in.w) {
    throw ShapeError("cd: image shape " + s.str() + " does not match model input " + in.str());
  }
}

std::vector<double> draw_fill(Rng& rng, std::size_t c, NoiseMode mode) {
  std::vector<double> delta(c, 0.0);
  if (mode == NoiseMode::per_step_uniform) {
    for (auto& v : delta) v = rng.uniform();
  }
  return delta;
}

void distill_chunk(const nn::Model& model, const FloatTensor& images, std::size_t first,
                   std::size_t last, const CDConfig& config, std::uint64_t seed,
                   std::vector<MaskResult>& results) {
  const Shape s = images.shape();
  const std::size_t c = s.c, h = s.h, w = s.w, hw = h * w;
  std::vector<std::size_t> idx(last - first);
  std::iota(idx.begin(), idx.end(), first);
  const Batch x = gather_batch(images, idx);
  const std::size_t b = idx.size();
  const Batch target = select_outputs(model, model.forward(x), config);

  std::vector<Rng> rngs;
  rngs.reserve(b);
  for (std::size_t i : idx) rngs.emplace_back(derive_seed(seed, i));

  std::vector<double> w_raw(b * hw, config.init_raw);
  std::vector<AdamState> adam(b);
  std::vector<bool> failed(b, false);
  std::vector<std::string> why(b);
  std::vector<std::vector<double>> traces(b);
  std::vector<double> deltas(b * c);
  std::vector<ObjectiveTerms> terms;
  std::vector<double> grad;

  for (int step = 0; step < config.steps; ++step) {
    for (std::size_t i = 0; i < b; ++i) {
      const auto d = draw_fill(rngs[i], c, config.noise_mode);
      std::copy(d.begin(), d.end(), deltas.begin() + static_cast<long>(i * c));
    }
    evaluate_batch(model, x, target, w_raw, deltas, config, terms, &grad);
    for (std::size_t i = 0; i < b; ++i) {
      if (failed[i]) continue;
      const double value = terms[i].total();
      std::span<double> gi(grad.data() + i * hw, hw);
      const bool finite = std::isfinite(value) &&
                          std::all_of(gi.begin(), gi.end(), [](double v) { return std::isfinite(v); });
      if (!finite) {
        failed[i] = true;
        why[i] = "non-finite objective at step " + std::to_string(step);
        continue;
      }
      traces[i].push_back(value);
      adam_update(std::span<double>(w_raw.data() + i * hw, hw), gi, adam[i], config.lr,
                  config.adam_beta1, config.adam_beta2, config.adam_eps);
    }
  }

  for (std::size_t i = 0; i < b; ++i) {
    MaskResult& r = results[first + i];
    const auto m = mask_reparam(std::span<const double>(w_raw.data() + i * hw, hw));
    r.mask = Mask{h, w, std::vector<float>(hw)};
    std::transform(m.begin(), m.end(), r.mask.values.begin(),
                   [](double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); });
    const auto delta = draw_fill(rngs[i], c, config.noise_mode);
    r.pattern.resize(c * hw);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < hw; ++p) {
        const double xv = x[(i * c + ch) * hw + p];
        r.pattern[ch * hw + p] = static_cast<float>(xv * m[p] + (1.0 - m[p]) * delta[ch]);
      }
    }
    r.trace = std::move(traces[i]);
    r.failed = failed[i] || !std::all_of(m.begin(), m.end(), [](double v) { return std::isfinite(v); });
    if (r.failed) {
      r.score = std::numeric_limits<double>::quiet_NaN();
      r.diagnostic = why[i].empty() ? "non-finite mask" : why[i];
    } else {
      r.score = std::accumulate(m.begin(), m.end(), 0.0);
    }
  }
}

}  // namespace

ObjectiveTerms cd_objective(const nn::Model& model, std::span<const float> x,
                            std::span<const double> w_raw, std::span<const double> delta,
                            const CDConfig& config, std::vector<double>* grad_w_raw) {
  Shape s = model.input_shape();
  s.n = 1;
  if (x.size() != s.per_item()) throw ShapeError("cd_objective: image size does not match model input");
  if (w_raw.size() != s.h * s.w) throw ShapeError("cd_objective: mask must be h*w");
  if (config.noise_mode == NoiseMode::per_step_uniform && delta.size() != s.c) {
    throw ShapeError("cd_objective: fill colour must have one value per channel");
  }
  Batch xb(s);
  std::copy(x.begin(), x.end(), xb.vec().begin());
  const Batch target = select_outputs(model, model.forward(xb), config);
  std::vector<double> fill(s.c, 0.0);
  if (config.noise_mode == NoiseMode::per_step_uniform) std::copy(delta.begin(), delta.end(), fill.begin());
  std::vector<ObjectiveTerms> terms;
  evaluate_batch(model, xb, target, w_raw, fill, config, terms, grad_w_raw);
  return terms.front();
}

std::vector<MaskResult> distill_mask(const nn::Model& model, const FloatTensor& images,
                                     const CDConfig& config, std::uint64_t seed,
                                     std::size_t threads) {
  config.validate();
  check_image_shape(model, images.shape());
  const std::size_t n = images.shape().n;
  std::vector<MaskResult> results(n);
  std::vector<std::pair<std::size_t, std::size_t>> chunks;
  for (std::size_t start = 0; start < n; start += config.batch_size) {
    chunks.emplace_back(start, std::min(n, start + config.batch_size));
  }
  threads = std::max<std::size_t>(1, std::min(threads, chunks.size()));
  if (threads == 1) {
    for (const auto& [a, b] : chunks) distill_chunk(model, images, a, b, config, seed, results);
  } else {
    // chunk boundaries are fixed by batch_size, so the output does not depend on thread count
    std::vector<std::jthread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t k = t; k < chunks.size(); k += threads) {
            distill_chunk(model, images, chunks[k].first, chunks[k].second, config, seed, results);
          }
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    pool.clear();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (results[i].failed) spdlog::warn("cd: image {} excluded: {}", i, results[i].diagnostic);
  }
  return results;
}

std::vector<float> simplify_trigger(const Mask& mask, std::span<const float> x_bd,
                                    std::span<const float> x_clean, Shape image_shape,
                                    double bin_threshold) {
  if (!(bin_threshold > 0.0 && bin_threshold < 1.0)) {
    throw InvalidArgument("simplify_trigger: threshold must be in (0,1)");
  }
  const std::size_t hw = image_shape.h * image_shape.w;
  if (mask.height != image_shape.h || mask.width != image_shape.w || x_bd.size() != image_shape.per_item() ||
      x_clean.size() != image_shape.per_item()) {
    throw ShapeError("simplify_trigger: mask and images must share spatial shape");
  }
  std::vector<float> out(x_clean.begin(), x_clean.end());
  for (std::size_t ch = 0; ch < image_shape.c; ++ch) {
    for (std::size_t p = 0; p < hw; ++p) {
      if (mask.values[p] >= bin_threshold) out[ch * hw + p] = x_bd[ch * hw + p];
    }
  }
  return out;
}

double mask_area(const Mask& mask, double bin_threshold) {
  if (mask.values.empty()) return 0.0;
  const auto kept = std::count_if(mask.values.begin(), mask.values.end(),
                                  [&](float v) { return v >= bin_threshold; });
  return static_cast<double>(kept) / static_cast<double>(mask.values.size());
}

}  // namespace cogdist::distill
