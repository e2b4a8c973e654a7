#pragma once

#include <json.hpp>
#include <span>
#include <vector>

#include "cogdist/score_table.hpp"

namespace cogdist::detect {

/// t = mean - gamma * sd for low_is_backdoor scores, mean + gamma * sd for
/// high_is_backdoor, with the sample (n - 1) standard deviation.
double fit_threshold(std::span<const double> clean_scores, double gamma,
                     Orientation orientation = Orientation::low_is_backdoor);

/// 1 = backdoor. low_is_backdoor flags score <= t; high_is_backdoor flags score >= t.
std::vector<int> classify(std::span<const double> scores, double threshold, Orientation orientation);

/// Mann-Whitney statistic with backdoor as the positive class; ties count 1/2.
double auroc(const ScoreTable& table);
/// Average precision: sum over distinct thresholds of (R_k - R_{k-1}) * P_k.
double auprc(const ScoreTable& table);

struct Rates {
  double first = 0.0;
  double second = 0.0;
};
/// (detected backdoor / all backdoor, flagged clean / all clean); 0 for an empty class.
Rates tpr_fpr(const ScoreTable& table, double threshold);
/// (backdoor share of the flagged set, backdoor share of the accepted set); 0 when empty.
Rates trr_far(const ScoreTable& table, double threshold);

struct DetectionReport {
  std::string method;
  double auroc = 0.0;
  double auprc = 0.0;
  double tpr = 0.0;
  double fpr = 0.0;
  double threshold = 0.0;
  double gamma = 1.0;

  nlohmann::json to_json() const;
  static DetectionReport from_json(const nlohmann::json& j);
  static std::string csv_header();
  std::string csv_row(const std::string& attack) const;
};

/// Full report. The threshold is fit on the scores of `reference_clean` rows
/// (indices into the table), which must hold at least two entries.
DetectionReport evaluate(const ScoreTable& table, std::span<const std::size_t> reference_clean,
                         double gamma);

/// ROC curve points (fpr, tpr) over all distinct thresholds, starting at (0,0).
std::vector<std::pair<double, double>> roc_curve(const ScoreTable& table);

}  // namespace cogdist::detect
