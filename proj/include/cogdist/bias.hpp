#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "cogdist/data.hpp"
#include "cogdist/score_table.hpp"

namespace cogdist::bias {

/// floor(fraction * n) row indices with the lowest scores, ties by ascending index.
std::vector<std::size_t> select_low_norm_subset(const ScoreTable& scores, double fraction = 0.005);

/// s(j,i) for every attribute j given the subset selected for attribute i:
///   s = (P_ij - P_j) / max(P_j, 1 - P_j)
/// where P_ij is the share of the subset with attribute j and P_j the share of
/// the full table. Attributes with P_j in {0,1} are skipped.
struct AttributeShift {
  std::size_t attribute = 0;        // i
  std::vector<double> score;        // indexed by j; 0 where skipped
  std::vector<bool> skipped;
};
AttributeShift attribute_shift(const AttributeTable& table, const std::vector<std::size_t>& subset,
                               std::size_t attribute);

struct Edge {
  std::size_t from = 0;  // predictive attribute j
  std::size_t to = 0;    // attribute of interest i
  double score = 0.0;
};

struct BiasGraph {
  std::vector<std::string> names;
  std::vector<Edge> edges;

  nlohmann::json to_json() const;
  /// Graphviz digraph; edge pen width and label carry |s|.
  std::string to_dot() const;
};

/// Edges j -> i for every computed shift with |s(j,i)| >= threshold and j != i.
BiasGraph top_predictive_attributes(const std::vector<AttributeShift>& shifts,
                                    const std::vector<std::string>& names, double threshold = 0.8);

}  // namespace cogdist::bias
