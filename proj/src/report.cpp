#include <fstream>
#include <iomanip>

#include <json.hpp>

#include "mtseg/trainer.hpp"

namespace mtseg {

using nlohmann::json;

namespace {

constexpr std::array<const char*, 3> kRegions = {"wt", "tc", "et"};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

json region_block(const MetricsReport& rep) {
  json j;
  for (int t = 0; t < 3; ++t) {
    j[kRegions[t]] = {{"dice", rep.dice[t]},
                      {"hd95", rep.hd95[t]},
                      {"sensitivity", rep.sens[t]},
                      {"hd95_undefined", rep.hd95_undefined_count[t]}};
  }
  j["mean"] = {{"dice", rep.dice_mean}, {"hd95", rep.hd95_mean}, {"sensitivity", rep.sens_mean}};
  return j;
}

}  // namespace

void write_report_json(const MetricsReport& rep, const std::string& path) {
  json j;
  j["fingerprint"] = rep.fingerprint;
  j["conventions"] = rep.conventions;
  j["volume_mode"] = rep.volume_mode;
  j["sample_count"] = rep.samples.size();
  j["regions"] = region_block(rep);
  j["samples"] = json::array();
  for (const auto& r : rep.samples) {
    json s;
    s["subject"] = r.subject;
    s["index"] = r.index;
    for (int t = 0; t < 3; ++t) {
      s[kRegions[t]] = {{"dice", r.dice[t]},
                        {"sensitivity", r.sens[t]},
                        {"hd95", r.hd95_undefined[t] ? json() : json(r.hd95[t])}};
    }
    j["samples"].push_back(std::move(s));
  }
  std::ofstream out(path);
  if (!out) throw InputError(str_cat("cannot write report: ", path));
  out << j.dump(2) << "\n";
}

namespace {
void write_metrics_row(std::ofstream& out, const std::string& name, const MetricsReport& rep) {
  out << name;
  for (int t = 0; t < 3; ++t) out << "," << fmt(rep.dice[t]);
  out << "," << fmt(rep.dice_mean);
  for (int t = 0; t < 3; ++t) out << "," << fmt(rep.hd95[t]);
  out << "," << fmt(rep.hd95_mean);
  for (int t = 0; t < 3; ++t) out << "," << fmt(rep.sens[t]);
  out << "," << fmt(rep.sens_mean);
  out << "\n";
}

constexpr const char* kMetricsHeader =
    "model,dice_wt,dice_tc,dice_et,dice_mean,hd95_wt,hd95_tc,hd95_et,hd95_mean,"
    "sens_wt,sens_tc,sens_et,sens_mean";
}  // namespace

void write_report_csv(const MetricsReport& rep, const std::string& model_name,
                      const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError(str_cat("cannot write report: ", path));
  out << kMetricsHeader << "\n";
  write_metrics_row(out, model_name, rep);
}

void write_report_samples_csv(const MetricsReport& rep, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError(str_cat("cannot write report: ", path));
  out << "subject,index";
  for (const auto* m : {"dice", "hd95", "sens"})
    for (const auto* r : kRegions) out << "," << m << "_" << r;
  out << "\n";
  for (const auto& r : rep.samples) {
    out << r.subject << "," << r.index;
    for (int t = 0; t < 3; ++t) out << "," << fmt(r.dice[t]);
    for (int t = 0; t < 3; ++t) {
      out << ",";
      if (!r.hd95_undefined[t]) out << fmt(r.hd95[t]);
    }
    for (int t = 0; t < 3; ++t) out << "," << fmt(r.sens[t]);
    out << "\n";
  }
}

void write_comparison_csv(const std::vector<std::pair<std::string, MetricsReport>>& rows,
                          const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError(str_cat("cannot write comparison: ", path));
  out << kMetricsHeader << "\n";
  for (const auto& [name, rep] : rows) write_metrics_row(out, name, rep);
}

}  // namespace mtseg
