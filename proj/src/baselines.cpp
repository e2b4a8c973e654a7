#include "cogdist/baselines.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <spdlog/spdlog.h>

#include "cogdist/rng.hpp"

namespace cogdist::baselines {

namespace {

ScoreTable make_table(const ImageSet& data, std::vector<double> scores, Orientation orientation,
                      std::string method) {
  ScoreTable t;
  t.orientation = orientation;
  t.method = std::move(method);
  t.rows.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    t.rows.push_back({i, scores[i], data.is_backdoor[i], data.labels[i]});
  }
  t.validate();
  return t;
}

std::map<int, std::vector<std::size_t>> by_class(const ImageSet& data) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < data.size(); ++i) groups[data.labels[i]].push_back(i);
  return groups;
}

Eigen::MatrixXd centred_rows(const Batch& features, const std::vector<std::size_t>& rows) {
  const std::size_t d = features.shape().per_item();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t k = 0; k < d; ++k) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = features[rows[r] * d + k];
  }
  m.rowwise() -= m.colwise().mean();
  return m;
}

void check_features(const Batch& features, const ImageSet& data) {
  if (features.shape().n != data.size()) {
    throw ShapeError("baseline: " + std::to_string(features.shape().n) + " feature rows for " +
                     std::to_string(data.size()) + " samples");
  }
}

}  // namespace

ScoreTable abl_scores(const nn::LossHistory& history, const ImageSet& data, std::size_t n_epochs) {
  if (history.epochs == 0 || history.samples == 0) throw InvalidArgument("abl_scores: empty loss history");
  if (history.samples != data.size()) throw ShapeError("abl_scores: history does not match dataset");
  std::size_t used = n_epochs;
  if (history.epochs < n_epochs) {
    spdlog::info("abl: only {} epochs recorded, averaging all of them", history.epochs);
    used = history.epochs;
  }
  std::vector<double> scores(history.samples, 0.0);
  for (std::size_t e = 0; e < used; ++e) {
    for (std::size_t i = 0; i < history.samples; ++i) scores[i] += history.at(e, i);
  }
  for (auto& s : scores) s /= static_cast<double>(used);
  return make_table(data, std::move(scores), Orientation::low_is_backdoor, "abl");
}

ScoreTable strip_scores(const nn::Model& model, const ImageSet& data, const FloatTensor& overlay_pool,
                        std::size_t n_overlays, std::uint64_t seed) {
  const std::size_t pool = overlay_pool.shape().n;
  if (pool == 0) throw InvalidArgument("strip_scores: empty overlay pool");
  if (n_overlays == 0) throw InvalidArgument("strip_scores: need at least one overlay");
  if (overlay_pool.shape().per_item() != data.images.shape().per_item()) {
    throw ShapeError("strip_scores: overlay pool images differ in shape");
  }
  const std::size_t per = data.images.shape().per_item();
  const double max_entropy = std::log(static_cast<double>(model.num_classes()));
  std::vector<double> scores(data.size(), 0.0);
  Shape s = data.images.shape();
  s.n = n_overlays;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Rng rng(derive_seed(seed, i));
    Batch blended(s);
    auto x = data.images.item(i);
    for (std::size_t k = 0; k < n_overlays; ++k) {
      auto other = overlay_pool.item(rng.index(pool));
      for (std::size_t p = 0; p < per; ++p) {
        blended[k * per + p] = 0.5 * (static_cast<double>(x[p]) + static_cast<double>(other[p]));
      }
    }
    const Batch probs = nn::softmax(nn::forward_logits(model, blended));
    const std::size_t kc = probs.shape().per_item();
    double total = 0.0;
    for (std::size_t k = 0; k < n_overlays; ++k) {
      double h = 0.0;
      for (std::size_t j = 0; j < kc; ++j) {
        const double p = probs[k * kc + j];
        if (p > 0.0) h -= p * std::log(p);
      }
      total += std::clamp(h, 0.0, max_entropy);
    }
    scores[i] = total / static_cast<double>(n_overlays);
  }
  return make_table(data, std::move(scores), Orientation::low_is_backdoor, "strip");
}

ScoreTable ss_scores(const Batch& features, const ImageSet& data) {
  check_features(features, data);
  std::vector<double> scores(data.size(), 0.0);
  for (const auto& [label, rows] : by_class(data)) {
    if (rows.size() < 2) {
      throw InvalidArgument("ss_scores: class " + std::to_string(label) + " has fewer than 2 samples");
    }
    const Eigen::MatrixXd centred = centred_rows(features, rows);
    Eigen::BDCSVD<Eigen::MatrixXd> svd(centred, Eigen::ComputeThinV);
    const Eigen::VectorXd v = svd.matrixV().col(0);
    const Eigen::VectorXd proj = centred * v;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const double p = proj(static_cast<Eigen::Index>(r));
      scores[rows[r]] = p * p;
    }
  }
  return make_table(data, std::move(scores), Orientation::high_is_backdoor, "ss");
}

std::vector<double> silhouette(const std::vector<std::vector<double>>& points,
                               const std::vector<int>& assignment) {
  const std::size_t n = points.size();
  std::vector<double> s(n, 0.0);
  std::size_t sizes[2] = {0, 0};
  for (int a : assignment) ++sizes[a];
  for (std::size_t i = 0; i < n; ++i) {
    double sum[2] = {0.0, 0.0};
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double d2 = 0.0;
      for (std::size_t k = 0; k < points[i].size(); ++k) {
        const double diff = points[i][k] - points[j][k];
        d2 += diff * diff;
      }
      sum[assignment[j]] += std::sqrt(d2);
    }
    const int own = assignment[i];
    const std::size_t own_others = sizes[own] - 1;
    if (own_others == 0 || sizes[1 - own] == 0) continue;  // singleton cluster: 0 by convention
    const double a = sum[own] / static_cast<double>(own_others);
    const double b = sum[1 - own] / static_cast<double>(sizes[1 - own]);
    const double denom = std::max(a, b);
    s[i] = denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return s;
}

namespace {

// 2-means with k-means++ seeding; returns false if a cluster ends up empty.
bool two_means(const std::vector<std::vector<double>>& pts, Rng& rng, std::vector<int>& assign) {
  const std::size_t n = pts.size();
  const std::size_t d = pts.front().size();
  auto dist2 = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return s;
  };
  std::vector<std::vector<double>> centre(2);
  centre[0] = pts[rng.index(n)];
  std::vector<double> w(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += (w[i] = dist2(pts[i], centre[0]));
  if (total <= 0.0) return false;
  double r = rng.uniform() * total;
  std::size_t pick = n - 1;
  for (std::size_t i = 0; i < n; ++i) {
    r -= w[i];
    if (r < 0.0) {
      pick = i;
      break;
    }
  }
  centre[1] = pts[pick];

  assign.assign(n, 0);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const int a = dist2(pts[i], centre[1]) < dist2(pts[i], centre[0]) ? 1 : 0;
      if (a != assign[i]) changed = true;
      assign[i] = a;
    }
    std::size_t count[2] = {0, 0};
    std::vector<std::vector<double>> sum(2, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      ++count[assign[i]];
      for (std::size_t k = 0; k < d; ++k) sum[assign[i]][k] += pts[i][k];
    }
    if (count[0] == 0 || count[1] == 0) return false;
    for (int c = 0; c < 2; ++c) {
      for (std::size_t k = 0; k < d; ++k) centre[c][k] = sum[c][k] / static_cast<double>(count[c]);
    }
    if (!changed && iter > 0) break;
  }
  return true;
}

}  // namespace

ACResult ac_scores(const Batch& features, const ImageSet& data, std::size_t reduced_dim,
                   std::uint64_t seed) {
  check_features(features, data);
  if (reduced_dim == 0) throw InvalidArgument("ac_scores: reduced_dim must be positive");
  ACResult result;
  std::vector<double> scores(data.size(), 0.0);
  for (const auto& [label, rows] : by_class(data)) {
    if (rows.size() <= reduced_dim) {
      throw InvalidArgument("ac_scores: class " + std::to_string(label) + " has " +
                            std::to_string(rows.size()) + " samples, needs more than " +
                            std::to_string(reduced_dim));
    }
    const Eigen::MatrixXd centred = centred_rows(features, rows);
    Eigen::BDCSVD<Eigen::MatrixXd> svd(centred, Eigen::ComputeThinV);
    const auto dims = static_cast<Eigen::Index>(std::min<std::size_t>(reduced_dim, svd.matrixV().cols()));
    const Eigen::MatrixXd reduced = centred * svd.matrixV().leftCols(dims);
    std::vector<std::vector<double>> pts(rows.size(), std::vector<double>(static_cast<std::size_t>(dims)));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (Eigen::Index k = 0; k < dims; ++k) pts[r][static_cast<std::size_t>(k)] = reduced(static_cast<Eigen::Index>(r), k);
    }

    std::vector<int> assign;
    bool ok = false;
    for (std::uint64_t attempt = 0; attempt < 10 && !ok; ++attempt) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(label) * 16 + attempt));
      ok = two_means(pts, rng, assign);
    }
    std::vector<double> sil(rows.size(), 0.0);
    if (ok) {
      sil = silhouette(pts, assign);
    } else {
      spdlog::warn("ac: class {} could not be split into two clusters; silhouettes set to 0", label);
      assign.assign(rows.size(), 0);
    }
    const auto small_size = static_cast<std::size_t>(std::count(assign.begin(), assign.end(), 1));
    const int smaller = small_size <= rows.size() - small_size ? 1 : 0;
    double mean = 0.0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      mean += sil[r];
      scores[rows[r]] = assign[r] == smaller ? sil[r] : -sil[r];
    }
    result.class_silhouette[label] = mean / static_cast<double>(rows.size());
  }
  result.table = make_table(data, std::move(scores), Orientation::high_is_backdoor, "ac");
  return result;
}

}  // namespace cogdist::baselines
