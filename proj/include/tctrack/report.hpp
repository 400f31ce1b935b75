#pragma once

// JSON evaluation report. Layout is documented in README.md ("Report schema").

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tctrack/config.hpp"
#include "tctrack/metrics.hpp"
#include "tctrack/online.hpp"

namespace tctrack {

inline constexpr int kReportSchemaVersion = 1;

struct PairingRow {
  std::size_t gt_frame = 0;                 // 1-based
  std::optional<std::size_t> prediction;    // 1-based frame whose output is scored; nullopt = initial box
  BoundingBox box;
};

/// Offline runs score every frame against its own prediction.
inline std::vector<PairingRow> identity_pairing(const std::vector<BoundingBox>& predictions) {
  std::vector<PairingRow> rows;
  for (std::size_t k = 0; k < predictions.size(); ++k) rows.push_back({k + 1, k + 1, predictions[k]});
  return rows;
}

inline std::vector<PairingRow> online_pairing_rows(const OnlineResult& r) {
  std::vector<PairingRow> rows;
  for (std::size_t k = 0; k < r.predictions.size(); ++k) {
    const auto& p = r.pairing.paired[k];
    rows.push_back({k + 1, p ? std::optional<std::size_t>(*p + 1) : std::nullopt, r.predictions[k]});
  }
  return rows;
}

struct ReportTiming {
  std::string latency = "offline";  // latency profile description
  double mean_fps = 0.0;            // 0: not available
  std::size_t processed_frames = 0;
};

inline json metrics_json(const MetricsReport& m) {
  return {
      {"frames", m.frames},
      {"precision", m.precision},
      {"norm_precision", m.norm_precision},
      {"success_auc", m.success_auc},
      {"ao", m.ao},
      {"sr50", m.sr50},
      {"sr75", m.sr75},
      {"precision_curve", m.precision_curve},
      {"norm_precision_curve", m.norm_precision_curve},
      {"success_curve", m.success_curve},
      {"per_frame_iou", m.per_frame_iou},
      {"per_frame_cle", m.per_frame_cle},
  };
}

inline json make_report(const std::string& sequence, double fps, const MetricsReport& m,
                        const std::vector<PairingRow>& pairing, const ReportTiming& timing, const json& config) {
  json rows = json::array();
  for (const auto& r : pairing)
    rows.push_back({{"gt_frame", r.gt_frame},
                    {"prediction", r.prediction ? json(*r.prediction) : json(nullptr)},
                    {"box", {r.box.cx, r.box.cy, r.box.w, r.box.h}}});
  return {
      {"schema_version", kReportSchemaVersion},
      {"mode", to_string(m.mode)},
      {"sequence", {{"name", sequence}, {"frames", m.frames}, {"fps", fps}}},
      {"metrics", metrics_json(m)},
      {"timing",
       {{"latency", timing.latency},
        {"mean_fps", timing.mean_fps},
        {"processed_frames", timing.processed_frames}}},
      {"pairing", rows},
      {"config", config},
  };
}

/// Everything except mode and timing, which legitimately differ between otherwise identical runs.
inline json comparable_part(json report) {
  report.erase("mode");
  report.erase("timing");
  return report;
}

inline void write_report(const json& report, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write report '" + path + "'");
  os << report.dump(2) << '\n';
}

}  // namespace tctrack
