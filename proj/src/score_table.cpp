#include "cogdist/score_table.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "cogdist/error.hpp"

namespace cogdist {

std::string to_string(Orientation o) {
  return o == Orientation::low_is_backdoor ? "low_is_backdoor" : "high_is_backdoor";
}

Orientation orientation_from_string(const std::string& s) {
  if (s == "low_is_backdoor") return Orientation::low_is_backdoor;
  if (s == "high_is_backdoor") return Orientation::high_is_backdoor;
  throw FormatError("unknown orientation '" + s + "'");
}

std::vector<double> ScoreTable::scores() const {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(r.score);
  return out;
}

std::size_t ScoreTable::count_backdoor() const {
  return static_cast<std::size_t>(
      std::count_if(rows.begin(), rows.end(), [](const ScoreRow& r) { return r.is_backdoor; }));
}

void ScoreTable::validate() const {
  for (const auto& r : rows) {
    if (!std::isfinite(r.score)) {
      throw InvalidArgument("ScoreTable: non-finite score at index " + std::to_string(r.index));
    }
  }
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

void save_scores(const std::filesystem::path& path, const ScoreTable& table) {
  std::ofstream out(path);
  if (!out) throw Error("save_scores: cannot open " + path.string());
  out.precision(std::numeric_limits<double>::max_digits10);
  const bool extended = !table.method.empty();
  out << "index,score,is_backdoor,label";
  if (extended) out << ",method,orientation";
  out << "\n";
  for (const auto& r : table.rows) {
    out << r.index << ',' << r.score << ',' << (r.is_backdoor ? 1 : 0) << ',' << r.label;
    if (extended) out << ',' << table.method << ',' << to_string(table.orientation);
    out << "\n";
  }
}

ScoreTable load_scores(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("load_scores: cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv(line);
  const std::vector<std::string> required = {"index", "score", "is_backdoor", "label"};
  const bool basic = header == required;
  const bool extended =
      header.size() == 6 && std::equal(required.begin(), required.end(), header.begin()) &&
      header[4] == "method" && header[5] == "orientation";
  if (!basic && !extended) {
    throw FormatError(path.string() + ": header '" + line +
                      "' does not match index,score,is_backdoor,label[,method,orientation]");
  }
  ScoreTable table;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size()) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                        std::to_string(header.size()) + " columns, found " +
                        std::to_string(cells.size()));
    }
    try {
      ScoreRow row;
      row.index = std::stoull(cells[0]);
      row.score = std::stod(cells[1]);
      row.is_backdoor = std::stoi(cells[2]) != 0;
      row.label = std::stoi(cells[3]);
      table.rows.push_back(row);
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": malformed number");
    }
    if (extended) {
      table.method = cells[4];
      table.orientation = orientation_from_string(cells[5]);
    }
  }
  return table;
}

}  // namespace cogdist
