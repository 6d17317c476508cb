#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "comet/boxgeom.hpp"
#include "comet/dataset.hpp"

namespace comet {

inline constexpr int kPrecisionPoints = 51;  // 0..50 px
inline constexpr int kSuccessPoints = 51;    // 0, 0.02, ..., 1

inline double precision_threshold(int k) { return static_cast<double>(k); }
inline double success_threshold(int k) { return k / 50.0; }

struct EvalResult {
  std::vector<double> center_errors;
  std::vector<double> overlaps;
  std::vector<double> precision;  // kPrecisionPoints
  std::vector<double> success;    // kSuccessPoints
  double auc = 0.0;
  double precision_at_20 = 0.0;
  double success_at_0_5 = 0.0;

  nlohmann::json to_json() const;
  static EvalResult from_json(const nlohmann::json& j);
};

/// One-pass evaluation of a predicted trajectory. Ties at a success
/// threshold count as success.
EvalResult ope_metrics(const std::vector<BoxXYWH>& pred, const std::vector<BoxXYWH>& gt);

/// Curves averaged over sequences; per-frame lists are left empty.
EvalResult average_results(const std::map<std::string, EvalResult>& results);

struct AttributeRow {
  std::string attribute;
  int sequences = 0;
  double precision_at_20 = 0.0;
  double auc = 0.0;
};

/// "Overall" first, then each attribute code in lexical order.
std::vector<AttributeRow> attribute_breakdown(const std::map<std::string, EvalResult>& results,
                                              const std::vector<SequenceRecord>& records);

/// Writes report.json, curves.csv, precision.svg and success.svg into dir.
void emit_report(const std::map<std::string, EvalResult>& results, const std::vector<AttributeRow>& attributes,
                 const nlohmann::json& config, const std::filesystem::path& dir);

}  // namespace comet
