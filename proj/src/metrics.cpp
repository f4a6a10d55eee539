#include "dfcr/metrics.hpp"

#include <cmath>
#include <numeric>

#include "dfcr/tensor.hpp"

namespace dfcr {

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

std::uint64_t ConfusionMatrix::row_sum(std::size_t k) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < k_; ++p) s += at(k, p);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t k) const {
  std::uint64_t s = 0;
  for (std::size_t t = 0; t < k_; ++t) s += at(t, k);
  return s;
}

void ConfusionMatrix::accumulate(const std::vector<std::size_t>& truths, const std::vector<std::size_t>& preds) {
  if (truths.size() != preds.size()) {
    throw InputError("confusion matrix: " + std::to_string(truths.size()) + " truths vs " +
                     std::to_string(preds.size()) + " predictions");
  }
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (truths[i] >= k_ || preds[i] >= k_) {
      throw InputError("confusion matrix: label pair (" + std::to_string(truths[i]) + ", " + std::to_string(preds[i]) +
                       ") outside " + std::to_string(k_) + " classes");
    }
  }
  for (std::size_t i = 0; i < truths.size(); ++i) ++at(truths[i], preds[i]);
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw InputError("cannot merge confusion matrices of different class counts");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::vector<std::vector<std::uint64_t>> ConfusionMatrix::rows() const {
  std::vector<std::vector<std::uint64_t>> r(k_);
  for (std::size_t t = 0; t < k_; ++t) r[t].assign(counts_.begin() + t * k_, counts_.begin() + (t + 1) * k_);
  return r;
}

MetricsReport compute_metrics(const ConfusionMatrix& cm) {
  const std::size_t k = cm.classes();
  const std::uint64_t total = cm.total();
  if (k == 0 || total == 0) throw InputError("metrics of an empty confusion matrix are undefined");
  MetricsReport r;
  r.total = total;
  r.confusion = cm.rows();
  r.per_class_precision.assign(k, 0.0);
  r.per_class_recall.assign(k, 0.0);
  r.per_class_f1.assign(k, 0.0);

  const double n = static_cast<double>(total);
  double trace = 0.0, pe = 0.0;
  double sum_p = 0.0, sum_r = 0.0, sum_f = 0.0;
  std::size_t n_r = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const double tp = static_cast<double>(cm.at(c, c));
    const double row = static_cast<double>(cm.row_sum(c));
    const double col = static_cast<double>(cm.col_sum(c));
    trace += tp;
    pe += (row / n) * (col / n);
    if (col > 0) {
      r.per_class_precision[c] = tp / col;
    } else {
      r.undefined_precision.push_back(c);
    }
    if (row > 0) {
      r.per_class_recall[c] = tp / row;
    } else {
      r.undefined_recall.push_back(c);
    }
    const double p = r.per_class_precision[c], q = r.per_class_recall[c];
    r.per_class_f1[c] = p + q > 0 ? 2.0 * p * q / (p + q) : 0.0;
    // A class absent from both truths and predictions carries no information.
    if (row > 0 || col > 0) sum_p += p;
    if (row > 0) {
      sum_r += q;
      sum_f += r.per_class_f1[c];
      ++n_r;
    }
  }
  std::size_t n_p = 0;
  for (std::size_t c = 0; c < k; ++c) n_p += (cm.row_sum(c) > 0 || cm.col_sum(c) > 0) ? 1 : 0;
  r.oa = trace / n;
  r.macro_precision = sum_p / static_cast<double>(n_p);
  r.macro_recall = n_r ? sum_r / static_cast<double>(n_r) : 0.0;
  r.macro_f1 = n_r ? sum_f / static_cast<double>(n_r) : 0.0;
  r.kappa = pe < 1.0 ? (r.oa - pe) / (1.0 - pe) : 0.0;
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  return {{"oa", r.oa},
          {"macro_precision", r.macro_precision},
          {"macro_recall", r.macro_recall},
          {"macro_f1", r.macro_f1},
          {"kappa", r.kappa},
          {"per_class_recall", r.per_class_recall},
          {"per_class_precision", r.per_class_precision},
          {"per_class_f1", r.per_class_f1},
          {"undefined_precision", r.undefined_precision},
          {"undefined_recall", r.undefined_recall},
          {"total", r.total},
          {"confusion", r.confusion}};
}

MetricsReport metrics_from_json(const nlohmann::json& j) {
  if (auto problem = validate_metrics_json(j)) throw InputError("metrics report: " + *problem);
  MetricsReport r;
  r.oa = j.at("oa");
  r.macro_precision = j.at("macro_precision");
  r.macro_recall = j.at("macro_recall");
  r.macro_f1 = j.at("macro_f1");
  r.kappa = j.at("kappa");
  r.per_class_recall = j.at("per_class_recall").get<std::vector<double>>();
  r.per_class_precision = j.at("per_class_precision").get<std::vector<double>>();
  r.per_class_f1 = j.at("per_class_f1").get<std::vector<double>>();
  r.undefined_precision = j.at("undefined_precision").get<std::vector<std::size_t>>();
  r.undefined_recall = j.at("undefined_recall").get<std::vector<std::size_t>>();
  r.total = j.at("total");
  r.confusion = j.at("confusion").get<std::vector<std::vector<std::uint64_t>>>();
  return r;
}

std::optional<std::string> validate_metrics_json(const nlohmann::json& j) {
  if (!j.is_object()) return "not an object";
  for (const char* key : {"oa", "macro_precision", "macro_recall", "macro_f1"}) {
    if (!j.contains(key) || !j[key].is_number()) return std::string("missing number '") + key + "'";
    const double v = j[key];
    if (!(v >= 0.0 && v <= 1.0)) return std::string(key) + " outside [0,1]";
  }
  if (!j.contains("kappa") || !j["kappa"].is_number()) return "missing number 'kappa'";
  if (const double kv = j["kappa"]; !(kv >= -1.0 && kv <= 1.0)) return "kappa outside [-1,1]";
  if (!j.contains("total") || !j["total"].is_number_unsigned()) return "missing unsigned 'total'";
  if (!j.contains("confusion") || !j["confusion"].is_array()) return "missing 'confusion'";
  const std::size_t k = j["confusion"].size();
  std::uint64_t sum = 0;
  for (const auto& row : j["confusion"]) {
    if (!row.is_array() || row.size() != k) return "confusion matrix is not square";
    for (const auto& v : row) {
      if (!v.is_number_unsigned()) return "confusion counts must be non-negative integers";
      sum += v.get<std::uint64_t>();
    }
  }
  if (sum != j["total"].get<std::uint64_t>()) return "confusion counts do not add up to total";
  for (const char* key : {"per_class_recall", "per_class_precision", "per_class_f1"}) {
    if (!j.contains(key) || !j[key].is_array() || j[key].size() != k) return std::string("'") + key + "' must have one value per class";
    for (const auto& v : j[key]) {
      if (!v.is_number() || v.get<double>() < 0.0 || v.get<double>() > 1.0) return std::string(key) + " value outside [0,1]";
    }
  }
  for (const char* key : {"undefined_precision", "undefined_recall"}) {
    if (!j.contains(key) || !j[key].is_array()) return std::string("missing '") + key + "'";
    for (const auto& v : j[key]) {
      if (!v.is_number_unsigned() || v.get<std::size_t>() >= k) return std::string(key) + " lists an invalid class";
    }
  }
  return std::nullopt;
}

Aggregate aggregate(const std::vector<double>& values) {
  Aggregate a;
  if (values.empty()) return a;
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / double(values.size());
  if (values.size() >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.stddev = std::sqrt(ss / double(values.size() - 1));
  }
  return a;
}

}  // namespace dfcr
