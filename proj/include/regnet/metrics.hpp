#pragma once
// Overlap and landmark metrics plus Table-shaped reports.

#include <cmath>
#include <cstdio>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "regnet/affine.hpp"
#include "regnet/image.hpp"

namespace regnet {

/// 2TP / (2TP + FP + FN). Two empty masks agree perfectly (1.0).
inline double dice(const Mask& predicted, const Mask& truth) {
  if (!same_dimensions(predicted, truth)) {
    throw DimensionError("dice: mask sizes differ (" + std::to_string(predicted.width) + "x" +
                         std::to_string(predicted.height) + " vs " + std::to_string(truth.width) + "x" +
                         std::to_string(truth.height) + ")");
  }
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < truth.values.size(); ++i) {
    const bool p = predicted.values[i] != 0, t = truth.values[i] != 0;
    tp += p && t;
    fp += p && !t;
    fn += !p && t;
  }
  if (tp + fp + fn == 0) return 1.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

inline double tre(Point2 transformed, Point2 reference) {
  return std::hypot(transformed.x - reference.x, transformed.y - reference.y);
}

struct Landmark {
  std::string id;
  Point2 position;  // pixels
};

/// The same anatomical point seen in both frames.
struct LandmarkPair {
  std::string id;
  Point2 moving;
  Point2 fixed;
};

struct Statistics {
  double mean = 0.0;
  double std = 0.0;  // population
};

inline Statistics summarize(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("summarize: no values");
  double total = 0.0;
  for (double v : values) total += v;
  const double mean = total / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  return {mean, std::sqrt(sq / static_cast<double>(values.size()))};
}

struct TreEvaluation {
  std::vector<std::string> ids;
  std::vector<double> tre;  // pixels, one per landmark
  Statistics summary;
};

/// Maps each moving landmark through `matrix` (pixel convention, moving -> fixed)
/// and measures its distance to the fixed landmark.
inline TreEvaluation evaluate_registration(const AffineMatrix& matrix, const std::vector<LandmarkPair>& pairs) {
  if (matrix.convention != Convention::pixel) throw ContractError("evaluate_registration: expects pixel convention");
  if (pairs.empty()) throw std::invalid_argument("evaluate_registration: empty landmark list");
  TreEvaluation out;
  for (const auto& p : pairs) {
    out.ids.push_back(p.id);
    out.tre.push_back(tre(matrix.apply(p.moving), p.fixed));
  }
  out.summary = summarize(out.tre);
  return out;
}

inline std::vector<LandmarkPair> pair_landmarks(const std::vector<Landmark>& moving, const std::vector<Landmark>& fixed) {
  std::vector<LandmarkPair> pairs;
  for (const auto& m : moving) {
    for (const auto& f : fixed) {
      if (f.id == m.id) pairs.push_back({m.id, m.position, f.position});
    }
  }
  if (pairs.size() != moving.size() || pairs.size() != fixed.size()) {
    throw std::invalid_argument("pair_landmarks: landmark ids do not match one-to-one");
  }
  return pairs;
}

inline void to_json(nlohmann::json& j, const Landmark& l) {
  j = nlohmann::json{{"id", l.id}, {"x", l.position.x}, {"y", l.position.y}};
}

inline void from_json(const nlohmann::json& j, Landmark& l) {
  l.id = j.at("id").get<std::string>();
  l.position = {j.at("x").get<double>(), j.at("y").get<double>()};
}

// ---------------------------------------------------------------------------
// Reports. Rows are items (folds, images); columns are measured quantities.
// A failed row carries no values and is excluded from the summary rows.

struct ReportRow {
  std::string label;
  std::vector<double> values;
  bool failed = false;
  std::string note;
};

struct EvaluationReport {
  std::string title;
  std::string unit;
  std::vector<std::string> columns;
  std::vector<ReportRow> rows;

  void add_row(std::string label, std::vector<double> values) {
    if (values.size() != columns.size()) throw DimensionError("report row width does not match columns");
    rows.push_back({std::move(label), std::move(values), false, {}});
  }

  void add_failure(std::string label, std::string note) { rows.push_back({std::move(label), {}, true, std::move(note)}); }

  std::vector<double> column(std::size_t c) const {
    std::vector<double> v;
    for (const auto& r : rows) {
      if (!r.failed) v.push_back(r.values.at(c));
    }
    return v;
  }

  /// Mean and population std per column over successful rows.
  std::vector<Statistics> summary() const {
    std::vector<Statistics> s;
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const auto v = column(c);
      s.push_back(v.empty() ? Statistics{std::nan(""), std::nan("")} : summarize(v));
    }
    return s;
  }

  std::string to_text() const {
    std::ostringstream os;
    char buf[64];
    const int label_width = 22;
    int cell = 12;
    for (const auto& c : columns) cell = std::max(cell, static_cast<int>(c.size()) + 2);
    os << title;
    if (!unit.empty()) os << " (" << unit << ")";
    os << '\n';
    std::snprintf(buf, sizeof buf, "%-*s", label_width, "");
    os << buf;
    for (const auto& c : columns) {
      std::snprintf(buf, sizeof buf, "%*s", cell, c.c_str());
      os << buf;
    }
    os << '\n';
    auto emit = [&](const std::string& label, auto value_of, bool failed) {
      std::snprintf(buf, sizeof buf, "%-*s", label_width, label.c_str());
      os << buf;
      for (std::size_t c = 0; c < columns.size(); ++c) {
        if (failed) {
          std::snprintf(buf, sizeof buf, "%*s", cell, "FAILED");
        } else {
          std::snprintf(buf, sizeof buf, "%*.3f", cell, value_of(c));
        }
        os << buf;
      }
      os << '\n';
    };
    for (const auto& r : rows) emit(r.label, [&](std::size_t c) { return r.values[c]; }, r.failed);
    const auto s = summary();
    emit("Mean", [&](std::size_t c) { return s[c].mean; }, false);
    emit("Standard deviation", [&](std::size_t c) { return s[c].std; }, false);
    return os.str();
  }
};

inline void to_json(nlohmann::json& j, const EvaluationReport& r) {
  j = nlohmann::json{{"title", r.title}, {"unit", r.unit}, {"columns", r.columns}, {"std_convention", "population"}};
  j["rows"] = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json jr{{"label", row.label}, {"failed", row.failed}, {"values", row.values}};
    if (!row.note.empty()) jr["note"] = row.note;
    j["rows"].push_back(std::move(jr));
  }
  j["mean"] = nlohmann::json::array();
  j["std"] = nlohmann::json::array();
  for (const auto& s : r.summary()) {
    j["mean"].push_back(s.mean);
    j["std"].push_back(s.std);
  }
}

inline void from_json(const nlohmann::json& j, EvaluationReport& r) {
  r.title = j.at("title").get<std::string>();
  r.unit = j.value("unit", "");
  r.columns = j.at("columns").get<std::vector<std::string>>();
  r.rows.clear();
  for (const auto& jr : j.at("rows")) {
    ReportRow row;
    row.label = jr.at("label").get<std::string>();
    row.failed = jr.value("failed", false);
    row.values = jr.at("values").get<std::vector<double>>();
    row.note = jr.value("note", "");
    r.rows.push_back(std::move(row));
  }
}

/// True when the stored mean/std arrays agree with the stored rows.
inline bool report_is_consistent(const nlohmann::json& j, double tolerance = 1e-9) {
  const auto report = j.get<EvaluationReport>();
  const auto s = report.summary();
  const auto& mean = j.at("mean");
  const auto& std = j.at("std");
  for (std::size_t c = 0; c < s.size(); ++c) {
    if (mean[c].is_null() || std[c].is_null()) return false;
    if (std::abs(mean[c].get<double>() - s[c].mean) > tolerance) return false;
    if (std::abs(std[c].get<double>() - s[c].std) > tolerance) return false;
  }
  return true;
}

}  // namespace regnet
