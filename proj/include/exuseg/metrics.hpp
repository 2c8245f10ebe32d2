#pragma once

// Pixel-level confusion matrices and the accuracy / recall figures derived
// from them. Rows are the predicted class, columns the actual class.

#include <array>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "exuseg/dataset.hpp"
#include "exuseg/inference.hpp"

namespace exuseg {

struct ConfusionMatrix {
  // cells[predicted][actual], 0 = background, 1 = exudate
  std::array<std::array<std::uint64_t, 2>, 2> cells{};

  static ConfusionMatrix from_counts(std::uint64_t bg_bg, std::uint64_t bg_ex, std::uint64_t ex_bg, std::uint64_t ex_ex) {
    ConfusionMatrix m;
    m.cells = {{{bg_bg, bg_ex}, {ex_bg, ex_ex}}};
    return m;
  }

  std::uint64_t at(std::size_t predicted, std::size_t actual) const { return cells.at(predicted).at(actual); }
  std::uint64_t predicted_total(std::size_t p) const { return cells[p][0] + cells[p][1]; }
  std::uint64_t actual_total(std::size_t a) const { return cells[0][a] + cells[1][a]; }
  std::uint64_t total() const { return predicted_total(0) + predicted_total(1); }
  std::uint64_t correct() const { return cells[0][0] + cells[1][1]; }

  ConfusionMatrix transposed() const { return from_counts(cells[0][0], cells[1][0], cells[0][1], cells[1][1]); }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    for (std::size_t p = 0; p < 2; ++p)
      for (std::size_t a = 0; a < 2; ++a) cells[p][a] += o.cells[p][a];
    return *this;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline void to_json(nlohmann::json& j, const ConfusionMatrix& m) {
  j = {{"predicted_background", {{"actual_background", m.cells[0][0]}, {"actual_exudate", m.cells[0][1]}}},
       {"predicted_exudate", {{"actual_background", m.cells[1][0]}, {"actual_exudate", m.cells[1][1]}}}};
}

inline void from_json(const nlohmann::json& j, ConfusionMatrix& m) {
  // Either the object form written by to_json or [[bg_bg, bg_ex], [ex_bg, ex_ex]].
  if (j.is_array()) {
    if (j.size() != 2 || j[0].size() != 2 || j[1].size() != 2) throw ConfigError("confusion matrix must be 2x2");
    m = ConfusionMatrix::from_counts(j[0][0].get<std::uint64_t>(), j[0][1].get<std::uint64_t>(),
                                     j[1][0].get<std::uint64_t>(), j[1][1].get<std::uint64_t>());
    return;
  }
  const auto& b = j.at("predicted_background");
  const auto& e = j.at("predicted_exudate");
  m = ConfusionMatrix::from_counts(b.at("actual_background").get<std::uint64_t>(), b.at("actual_exudate").get<std::uint64_t>(),
                                   e.at("actual_background").get<std::uint64_t>(), e.at("actual_exudate").get<std::uint64_t>());
}

// Both masks hold {0,1} values and must have equal extents.
inline ConfusionMatrix confusion(const Tensor& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape())
    throw ShapeError("confusion: prediction " + shape_str(pred.shape()) + " vs ground truth " + shape_str(truth.shape()));
  ConfusionMatrix m;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const real p = pred[i], a = truth[i];
    if ((p != 0 && p != 1) || (a != 0 && a != 1)) throw Error("confusion: masks must be binary");
    ++m.cells[p == 1][a == 1];
  }
  return m;
}

// Ground truth in the prediction's frame: resized to the working resolution,
// then cropped to rows/cols [16, 240) for valid-mode masks.
inline Tensor truth_for(const GroundTruthMask& truth, PredictMode mode) {
  const GroundTruthMask r = truth.height() == geom::kWorking && truth.width() == geom::kWorking ? truth : resize_mask(truth);
  if (mode == PredictMode::padded) return r.pixels;
  const std::size_t e = geom::kCentersPerAxis;
  Tensor out({e, e});
  for (std::size_t i = 0; i < e; ++i)
    for (std::size_t j = 0; j < e; ++j) out.at(i, j) = r.pixels.at(i + geom::kHalf, j + geom::kHalf);
  return out;
}

// Derived figures under two conventions. The bg_* pair takes background as
// the positive class; the standard_* pair takes exudate as positive.
struct EvalReport {
  std::string id;
  ConfusionMatrix matrix;
  std::optional<double> accuracy;
  std::optional<double> bg_sensitivity;     // background recall
  std::optional<double> bg_specificity;     // exudate recall
  std::optional<double> standard_sensitivity;  // exudate recall
  std::optional<double> standard_specificity;  // background recall
};

inline std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

inline EvalReport report(const ConfusionMatrix& m, std::string id = {}) {
  if (m.total() == 0) throw Error("report: confusion matrix '" + id + "' is empty");
  EvalReport r;
  r.id = std::move(id);
  r.matrix = m;
  r.accuracy = ratio(m.correct(), m.total());
  r.bg_sensitivity = ratio(m.cells[0][0], m.actual_total(0));
  r.bg_specificity = ratio(m.cells[1][1], m.actual_total(1));
  r.standard_sensitivity = r.bg_specificity;
  r.standard_specificity = r.bg_sensitivity;
  return r;
}

struct Aggregate {
  EvalReport pooled;                    // metrics of the summed matrix
  std::optional<double> macro_accuracy;  // unweighted mean of per-image accuracy
  std::size_t images = 0;
};

inline Aggregate aggregate(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw Error("aggregate: no reports");
  ConfusionMatrix sum;
  double acc = 0;
  for (const auto& r : reports) {
    sum += r.matrix;
    acc += r.accuracy.value_or(0);
  }
  return {report(sum, "pooled"), acc / static_cast<double>(reports.size()), reports.size()};
}

// ---- rendering ---------------------------------------------------------------

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json("undefined");
}

inline nlohmann::json to_json_report(const EvalReport& r) {
  return {{"id", r.id},
          {"confusion_matrix", r.matrix},
          {"total", r.matrix.total()},
          {"accuracy", optional_json(r.accuracy)},
          {"bg_sensitivity_background_recall", optional_json(r.bg_sensitivity)},
          {"bg_specificity_exudate_recall", optional_json(r.bg_specificity)},
          {"standard_sensitivity_exudate_recall", optional_json(r.standard_sensitivity)},
          {"standard_specificity_background_recall", optional_json(r.standard_specificity)}};
}

inline std::string format_ratio(const std::optional<double>& v) {
  if (!v) return "undefined";
  std::ostringstream os;
  os << std::fixed << std::setprecision(5) << *v << " (" << std::setprecision(2) << *v * 100 << "%)";
  return os.str();
}

// Aligned text rendering: the matrix with marginal totals, then the figures.
inline std::string format_table(const EvalReport& r) {
  const ConfusionMatrix& m = r.matrix;
  std::ostringstream os;
  auto row = [&](const std::string& label, std::uint64_t a, std::uint64_t b, std::uint64_t t) {
    os << std::left << std::setw(20) << label << std::right << std::setw(12) << a << std::setw(12) << b << std::setw(12) << t
       << '\n';
  };
  os << "CONFUSION MATRIX" << (r.id.empty() ? "" : " [" + r.id + "]") << '\n';
  os << std::left << std::setw(20) << "Predicted \\ Actual" << std::right << std::setw(12) << "Background" << std::setw(12)
     << "Exudates" << std::setw(12) << "Total" << '\n';
  row("Background", m.cells[0][0], m.cells[0][1], m.predicted_total(0));
  row("Exudates", m.cells[1][0], m.cells[1][1], m.predicted_total(1));
  row("Total", m.actual_total(0), m.actual_total(1), m.total());
  os << '\n';
  os << "accuracy                              " << format_ratio(r.accuracy) << '\n';
  os << "sensitivity (background recall)       " << format_ratio(r.bg_sensitivity) << '\n';
  os << "specificity (exudate recall)          " << format_ratio(r.bg_specificity) << '\n';
  os << "standard sensitivity (exudate recall) " << format_ratio(r.standard_sensitivity) << '\n';
  os << "standard specificity (bg recall)      " << format_ratio(r.standard_specificity) << '\n';
  return os.str();
}

}  // namespace exuseg
