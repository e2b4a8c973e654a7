#include "cogdist/bias.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cogdist/error.hpp"

namespace cogdist::bias {

std::vector<std::size_t> select_low_norm_subset(const ScoreTable& scores, double fraction) {
  const std::size_t n = scores.size();
  const auto count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
  if (!(fraction > 0.0 && fraction <= 1.0) || count < 1) {
    throw InvalidArgument("select_low_norm_subset: fraction " + std::to_string(fraction) +
                          " of " + std::to_string(n) + " samples selects nothing");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores.rows[a].score != scores.rows[b].score) return scores.rows[a].score < scores.rows[b].score;
    return scores.rows[a].index < scores.rows[b].index;
  });
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < count; ++k) out.push_back(scores.rows[order[k]].index);
  return out;
}

AttributeShift attribute_shift(const AttributeTable& table, const std::vector<std::size_t>& subset,
                               std::size_t attribute) {
  if (subset.empty()) throw InvalidArgument("attribute_shift: empty subset");
  const std::size_t a = table.num_attributes();
  if (attribute >= a) throw InvalidArgument("attribute_shift: attribute out of range");
  AttributeShift out;
  out.attribute = attribute;
  out.score.assign(a, 0.0);
  out.skipped.assign(a, false);
  for (std::size_t j = 0; j < a; ++j) {
    std::size_t all = 0, in_subset = 0;
    for (std::size_t r = 0; r < table.rows; ++r) all += table.get(r, j) ? 1 : 0;
    for (std::size_t r : subset) {
      if (r >= table.rows) throw InvalidArgument("attribute_shift: subset index out of range");
      in_subset += table.get(r, j) ? 1 : 0;
    }
    const double p_j = static_cast<double>(all) / static_cast<double>(table.rows);
    const double p_ij = static_cast<double>(in_subset) / static_cast<double>(subset.size());
    if (all == 0 || all == table.rows) {
      out.skipped[j] = true;
      continue;
    }
    const double s = (p_ij - p_j) / std::max(p_j, 1.0 - p_j);
    if (std::abs(s) > 1.0 + 1e-12) throw Error("attribute_shift: |s| exceeded 1");
    out.score[j] = std::clamp(s, -1.0, 1.0);
  }
  return out;
}

BiasGraph top_predictive_attributes(const std::vector<AttributeShift>& shifts,
                                    const std::vector<std::string>& names, double threshold) {
  BiasGraph g;
  g.names = names;
  for (const auto& shift : shifts) {
    for (std::size_t j = 0; j < shift.score.size(); ++j) {
      if (j == shift.attribute || shift.skipped[j]) continue;
      if (std::abs(shift.score[j]) >= threshold) g.edges.push_back({j, shift.attribute, shift.score[j]});
    }
  }
  return g;
}

nlohmann::json BiasGraph::to_json() const {
  nlohmann::json edges_json = nlohmann::json::array();
  for (const auto& e : edges) {
    edges_json.push_back({{"from", names.at(e.from)}, {"to", names.at(e.to)}, {"score", e.score}});
  }
  return {{"nodes", names}, {"edges", edges_json}};
}

std::string BiasGraph::to_dot() const {
  std::ostringstream out;
  out.precision(3);
  out << "digraph bias {\n";
  std::vector<bool> target(names.size(), false);
  for (const auto& e : edges) target[e.to] = true;
  for (std::size_t i = 0; i < names.size(); ++i) {
    out << "  \"" << names[i] << "\"";
    if (target[i]) out << " [style=filled, fillcolor=palegreen]";
    out << ";\n";
  }
  for (const auto& e : edges) {
    out << "  \"" << names[e.from] << "\" -> \"" << names[e.to] << "\" [label=\"" << e.score
        << "\", penwidth=" << 1.0 + 3.0 * std::abs(e.score)
        << ", color=" << (e.score >= 0 ? "\"#1f4e99\"" : "\"#b22222\"") << "];\n";
  }
  out << "}\n";
  return out.str();
}

}  // namespace cogdist::bias
