#include "cogdist/detect.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cogdist/error.hpp"

namespace cogdist::detect {

double fit_threshold(std::span<const double> clean_scores, double gamma, Orientation orientation) {
  const std::size_t n = clean_scores.size();
  if (n < 2) throw InvalidArgument("fit_threshold: need at least 2 clean scores, got " + std::to_string(n));
  const double mean = std::accumulate(clean_scores.begin(), clean_scores.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double s : clean_scores) ss += (s - mean) * (s - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  return orientation == Orientation::low_is_backdoor ? mean - gamma * sd : mean + gamma * sd;
}

std::vector<int> classify(std::span<const double> scores, double threshold, Orientation orientation) {
  std::vector<int> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool flagged = orientation == Orientation::low_is_backdoor ? scores[i] <= threshold
                                                                     : scores[i] >= threshold;
    out[i] = flagged ? 1 : 0;
  }
  return out;
}

namespace {

void require_both_classes(const ScoreTable& table, const char* who) {
  const std::size_t pos = table.count_backdoor();
  if (pos == 0 || pos == table.size()) {
    throw InvalidArgument(std::string(who) + ": needs both backdoor and clean samples");
  }
}

// Indices sorted by decreasing suspicion.
std::vector<std::size_t> by_suspicion(const ScoreTable& table) {
  std::vector<std::size_t> order(table.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return table.suspicion(a) > table.suspicion(b); });
  return order;
}

}  // namespace

double auroc(const ScoreTable& table) {
  require_both_classes(table, "auroc");
  const std::size_t n = table.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return table.suspicion(a) < table.suspicion(b); });
  // average ranks (1-based) over tie groups
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && table.suspicion(order[j + 1]) == table.suspicion(order[i])) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double rank_sum = 0.0;
  const auto n_pos = static_cast<double>(table.count_backdoor());
  const double n_neg = static_cast<double>(n) - n_pos;
  for (std::size_t i = 0; i < n; ++i) {
    if (table.rows[i].is_backdoor) rank_sum += rank[i];
  }
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

double auprc(const ScoreTable& table) {
  const std::size_t n_pos = table.count_backdoor();
  if (n_pos == 0) throw InvalidArgument("auprc: no backdoor samples");
  const auto order = by_suspicion(table);
  double area = 0.0;
  double prev_recall = 0.0;
  std::size_t tp = 0, flagged = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && table.suspicion(order[j]) == table.suspicion(order[i])) {
      tp += table.rows[order[j]].is_backdoor ? 1 : 0;
      ++flagged;
      ++j;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(flagged);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return area;
}

namespace {
struct Counts {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};
Counts confusion(const ScoreTable& table, double threshold) {
  Counts c;
  const auto flags = classify(table.scores(), threshold, table.orientation);
  for (std::size_t i = 0; i < flags.size(); ++i) {
    const bool bd = table.rows[i].is_backdoor;
    if (flags[i] != 0) {
      (bd ? c.tp : c.fp) += 1;
    } else {
      (bd ? c.fn : c.tn) += 1;
    }
  }
  return c;
}
double ratio(std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); }
}  // namespace

Rates tpr_fpr(const ScoreTable& table, double threshold) {
  const Counts c = confusion(table, threshold);
  return {ratio(c.tp, c.tp + c.fn), ratio(c.fp, c.fp + c.tn)};
}

Rates trr_far(const ScoreTable& table, double threshold) {
  const Counts c = confusion(table, threshold);
  return {ratio(c.tp, c.tp + c.fp), ratio(c.fn, c.fn + c.tn)};
}

nlohmann::json DetectionReport::to_json() const {
  return {{"method", method}, {"auroc", auroc}, {"auprc", auprc}, {"tpr", tpr},
          {"fpr", fpr},       {"threshold", threshold}, {"gamma", gamma}};
}

DetectionReport DetectionReport::from_json(const nlohmann::json& j) {
  DetectionReport r;
  r.method = j.value("method", "");
  r.auroc = j.at("auroc").get<double>();
  r.auprc = j.at("auprc").get<double>();
  r.tpr = j.at("tpr").get<double>();
  r.fpr = j.at("fpr").get<double>();
  r.threshold = j.at("threshold").get<double>();
  r.gamma = j.at("gamma").get<double>();
  return r;
}

std::string DetectionReport::csv_header() { return "attack,detector,auroc,auprc,tpr,fpr,threshold,gamma"; }

std::string DetectionReport::csv_row(const std::string& attack) const {
  std::ostringstream out;
  out.precision(10);
  out << attack << ',' << method << ',' << auroc << ',' << auprc << ',' << tpr << ',' << fpr << ','
      << threshold << ',' << gamma;
  return out.str();
}

DetectionReport evaluate(const ScoreTable& table, std::span<const std::size_t> reference_clean,
                         double gamma) {
  table.validate();
  std::vector<double> ref;
  for (std::size_t i : reference_clean) {
    if (i >= table.size()) throw InvalidArgument("evaluate: reference index out of range");
    ref.push_back(table.rows[i].score);
  }
  DetectionReport r;
  r.method = table.method;
  r.gamma = gamma;
  r.auroc = auroc(table);
  r.auprc = auprc(table);
  r.threshold = fit_threshold(ref, gamma, table.orientation);
  const Rates rates = tpr_fpr(table, r.threshold);
  r.tpr = rates.first;
  r.fpr = rates.second;
  return r;
}

std::vector<std::pair<double, double>> roc_curve(const ScoreTable& table) {
  require_both_classes(table, "roc_curve");
  const auto order = by_suspicion(table);
  const auto n_pos = static_cast<double>(table.count_backdoor());
  const double n_neg = static_cast<double>(table.size()) - n_pos;
  std::vector<std::pair<double, double>> pts{{0.0, 0.0}};
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && table.suspicion(order[j]) == table.suspicion(order[i])) {
      (table.rows[order[j]].is_backdoor ? tp : fp) += 1;
      ++j;
    }
    pts.emplace_back(fp / n_neg, tp / n_pos);
    i = j;
  }
  return pts;
}

}  // namespace cogdist::detect
