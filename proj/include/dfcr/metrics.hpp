#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace dfcr {

/// counts[t][p]: rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : k_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const { return k_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * k_ + pred]; }
  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts_[truth * k_ + pred]; }
  std::uint64_t total() const;
  std::uint64_t row_sum(std::size_t k) const;
  std::uint64_t col_sum(std::size_t k) const;

  /// Adds one count per (truth, pred) pair. Throws InputError on a length
  /// mismatch or an out-of-range label.
  void accumulate(const std::vector<std::size_t>& truths, const std::vector<std::size_t>& preds);
  /// Element-wise sum; shapes must agree.
  void merge(const ConfusionMatrix& other);

  std::vector<std::vector<std::uint64_t>> rows() const;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

struct MetricsReport {
  double oa = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  double kappa = 0.0;
  std::vector<double> per_class_recall;
  std::vector<double> per_class_precision;
  std::vector<double> per_class_f1;
  /// Classes never predicted; their precision (and F1) counts as 0.
  std::vector<std::size_t> undefined_precision;
  /// Classes with no true samples; left out of the recall and F1 means.
  std::vector<std::size_t> undefined_recall;
  std::uint64_t total = 0;
  std::vector<std::vector<std::uint64_t>> confusion;
};

/// Throws InputError on an empty matrix.
///
/// Precision of a never-predicted class is 0 (flagged). Classes without true
/// samples have no recall and are excluded from the macro recall and F1; they
/// still enter macro precision when predicted. F1 of a class with
/// precision + recall = 0 is 0. kappa is 0 when chance agreement is 1.
MetricsReport compute_metrics(const ConfusionMatrix& cm);

nlohmann::json to_json(const MetricsReport& r);
MetricsReport metrics_from_json(const nlohmann::json& j);

/// Checks a serialized report: required fields, types, ranges and a
/// confusion matrix consistent with `total`. Returns the first problem found.
std::optional<std::string> validate_metrics_json(const nlohmann::json& j);

/// Mean and sample standard deviation (n - 1) of the scalar metrics over
/// several runs. `std` is absent with fewer than two runs.
struct Aggregate {
  double mean = 0.0;
  std::optional<double> stddev;
};
Aggregate aggregate(const std::vector<double>& values);

}  // namespace dfcr
