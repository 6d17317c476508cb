#include "comet/metrics.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace comet {

nlohmann::json EvalResult::to_json() const {
  return {{"center_errors", center_errors},
          {"overlaps", overlaps},
          {"precision", precision},
          {"success", success},
          {"auc", auc},
          {"precision_at_20", precision_at_20},
          {"success_at_0_5", success_at_0_5}};
}

EvalResult EvalResult::from_json(const nlohmann::json& j) {
  EvalResult r;
  r.center_errors = j.value("center_errors", std::vector<double>{});
  r.overlaps = j.value("overlaps", std::vector<double>{});
  r.precision = j.at("precision").get<std::vector<double>>();
  r.success = j.at("success").get<std::vector<double>>();
  r.auc = j.at("auc").get<double>();
  r.precision_at_20 = j.at("precision_at_20").get<double>();
  r.success_at_0_5 = j.at("success_at_0_5").get<double>();
  return r;
}

namespace {

void finish(EvalResult& r) {
  double s = 0.0;
  for (double v : r.success) s += v;
  r.auc = s / static_cast<double>(r.success.size());
  r.precision_at_20 = r.precision[20];
  r.success_at_0_5 = r.success[25];
}

}  // namespace

EvalResult ope_metrics(const std::vector<BoxXYWH>& pred, const std::vector<BoxXYWH>& gt) {
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("ope_metrics: " + std::to_string(pred.size()) + " predictions for " +
                                std::to_string(gt.size()) + " ground-truth boxes");
  }
  if (gt.empty()) throw std::invalid_argument("ope_metrics: empty sequence");
  EvalResult r;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    r.center_errors.push_back(center_error(pred[i], gt[i]));
    r.overlaps.push_back(iou(pred[i], gt[i]));
  }
  const double n = static_cast<double>(gt.size());
  for (int k = 0; k < kPrecisionPoints; ++k) {
    int hits = 0;
    for (double e : r.center_errors) hits += e <= precision_threshold(k);
    r.precision.push_back(hits / n);
  }
  for (int k = 0; k < kSuccessPoints; ++k) {
    int hits = 0;
    for (double o : r.overlaps) hits += o >= success_threshold(k);
    r.success.push_back(hits / n);
  }
  finish(r);
  return r;
}

EvalResult average_results(const std::map<std::string, EvalResult>& results) {
  if (results.empty()) throw std::invalid_argument("average_results: no results");
  EvalResult r;
  r.precision.assign(kPrecisionPoints, 0.0);
  r.success.assign(kSuccessPoints, 0.0);
  for (const auto& [name, e] : results) {
    for (int k = 0; k < kPrecisionPoints; ++k) r.precision[k] += e.precision.at(k);
    for (int k = 0; k < kSuccessPoints; ++k) r.success[k] += e.success.at(k);
  }
  const double n = static_cast<double>(results.size());
  for (double& v : r.precision) v /= n;
  for (double& v : r.success) v /= n;
  finish(r);
  return r;
}

std::vector<AttributeRow> attribute_breakdown(const std::map<std::string, EvalResult>& results,
                                              const std::vector<SequenceRecord>& records) {
  std::map<std::string, const SequenceRecord*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;
  std::map<std::string, AttributeRow> rows;
  AttributeRow overall{"Overall"};
  auto add = [](AttributeRow& row, const EvalResult& e) {
    ++row.sequences;
    row.precision_at_20 += e.precision_at_20;
    row.auc += e.auc;
  };
  for (const auto& [name, e] : results) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw std::invalid_argument("attribute_breakdown: no record for sequence '" + name + "'");
    add(overall, e);
    for (const auto& code : std::set<std::string>(it->second->attributes.begin(), it->second->attributes.end())) {
      auto& row = rows[code];
      row.attribute = code;
      add(row, e);
    }
  }
  std::vector<AttributeRow> out{overall};
  for (auto& [code, row] : rows) out.push_back(row);
  for (auto& row : out) {
    if (row.sequences == 0) continue;
    row.precision_at_20 /= row.sequences;
    row.auc /= row.sequences;
  }
  return out;
}

namespace {

std::string fmt(double v, const char* spec = "%.4f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// Plot area 60..460 x 20..320 in a 480x360 canvas.
std::string svg_plot(const std::string& title, const std::string& xlabel, const std::vector<double>& xs,
                     const std::vector<double>& ys, double xmax) {
  constexpr double x0 = 60, x1 = 460, y0 = 320, y1 = 20;
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"360\" viewBox=\"0 0 480 360\">\n"
     << "<rect x=\"0\" y=\"0\" width=\"480\" height=\"360\" fill=\"white\"/>\n"
     << "<text x=\"260\" y=\"14\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << title
     << "</text>\n"
     << "<polyline fill=\"none\" stroke=\"black\" stroke-width=\"1\" points=\"" << x0 << "," << y1 << " " << x0 << ","
     << y0 << " " << x1 << "," << y0 << "\"/>\n";
  os << "<polyline fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) os << ' ';
    os << fmt(x0 + (x1 - x0) * xs[i] / xmax, "%.2f") << ',' << fmt(y0 + (y1 - y0) * ys[i], "%.2f");
  }
  os << "\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double f = t / 4.0;
    os << "<text x=\"" << fmt(x0 + (x1 - x0) * f, "%.1f") << "\" y=\"336\" text-anchor=\"middle\" "
       << "font-family=\"sans-serif\" font-size=\"10\">" << fmt(xmax * f, xmax > 1 ? "%.0f" : "%.2f") << "</text>\n";
    os << "<text x=\"54\" y=\"" << fmt(y0 + (y1 - y0) * f + 3, "%.1f") << "\" text-anchor=\"end\" "
       << "font-family=\"sans-serif\" font-size=\"10\">" << fmt(f, "%.2f") << "</text>\n";
  }
  os << "<text x=\"260\" y=\"354\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << xlabel
     << "</text>\n"
     << "</svg>\n";
  return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace

void emit_report(const std::map<std::string, EvalResult>& results, const std::vector<AttributeRow>& attributes,
                 const nlohmann::json& config, const std::filesystem::path& dir) {
  const EvalResult overall = average_results(results);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create report directory " + dir.string() + ": " + ec.message());

  nlohmann::json j;
  j["config"] = config;
  j["overall"] = overall.to_json();
  j["sequences"] = nlohmann::json::object();
  for (const auto& [name, e] : results) j["sequences"][name] = e.to_json();
  j["attributes"] = nlohmann::json::array();
  for (const auto& row : attributes) {
    j["attributes"].push_back({{"attribute", row.attribute},
                               {"sequences", row.sequences},
                               {"precision_at_20", row.precision_at_20},
                               {"auc", row.auc}});
  }
  std::vector<double> px, ov;
  for (int k = 0; k < kPrecisionPoints; ++k) px.push_back(precision_threshold(k));
  for (int k = 0; k < kSuccessPoints; ++k) ov.push_back(success_threshold(k));
  j["precision_thresholds"] = px;
  j["success_thresholds"] = ov;
  write_text(dir / "report.json", j.dump(2) + "\n");

  std::ostringstream csv;
  csv << "# row k pairs the precision threshold k px with the success threshold k/50; 51 rows below the header\n"
      << "k,px_threshold,precision,overlap_threshold,success\n";
  for (int k = 0; k < kSuccessPoints; ++k) {
    csv << k << ',' << px[k] << ',' << fmt(overall.precision[k], "%.6f") << ',' << fmt(ov[k], "%.2f") << ','
        << fmt(overall.success[k], "%.6f") << '\n';
  }
  write_text(dir / "curves.csv", csv.str());

  write_text(dir / "precision.svg",
             svg_plot("Precision (at 20 px: " + fmt(overall.precision_at_20, "%.3f") + ")", "location error threshold (px)",
                      px, overall.precision, 50.0));
  write_text(dir / "success.svg", svg_plot("Success (AUC: " + fmt(overall.auc, "%.3f") + ")", "overlap threshold", ov,
                                           overall.success, 1.0));
}

}  // namespace comet
