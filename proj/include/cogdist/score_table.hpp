#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace cogdist {

/// Which end of the score range indicates a backdoor sample.
enum class Orientation { low_is_backdoor, high_is_backdoor };

std::string to_string(Orientation o);
Orientation orientation_from_string(const std::string& s);

struct ScoreRow {
  std::size_t index = 0;
  double score = 0.0;
  bool is_backdoor = false;
  int label = 0;
  friend bool operator==(const ScoreRow&, const ScoreRow&) = default;
};

/// Per-sample detection scores for one method.
struct ScoreTable {
  std::vector<ScoreRow> rows;
  Orientation orientation = Orientation::low_is_backdoor;
  std::string method;

  std::size_t size() const { return rows.size(); }
  /// Score mapped so that larger always means more backdoor-like.
  double suspicion(std::size_t i) const {
    return orientation == Orientation::low_is_backdoor ? -rows[i].score : rows[i].score;
  }
  std::vector<double> scores() const;
  std::size_t count_backdoor() const;
  /// Throws when a score is non-finite.
  void validate() const;

  friend bool operator==(const ScoreTable&, const ScoreTable&) = default;
};

/// CSV with header `index,score,is_backdoor,label`. When the table carries a
/// method name, `method` and `orientation` columns follow.
void save_scores(const std::filesystem::path& path, const ScoreTable& table);
ScoreTable load_scores(const std::filesystem::path& path);

}  // namespace cogdist
