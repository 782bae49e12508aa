#pragma once

// Pixel-wise segmentation metrics built on accumulated confusion counts, the
// clipped Jaccard and the per-slide score.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace sgseg {

struct ConfusionCounts {
    std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::uint64_t total() const { return tp + fp + tn + fn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o);
    bool operator==(const ConfusionCounts&) const = default;
};

struct MetricsConfig {
    double binarize_threshold = 0.5;
    double clip_threshold = 0.65;

    void validate() const;
};

struct Metrics {
    double sp = 1, pc = 1, rc = 1, dc = 1, js = 1;
};

// value >= threshold -> 1.
std::vector<std::uint8_t> binarize(std::span<const float> prob, double threshold);
std::vector<std::uint8_t> binarize(std::span<const double> prob, double threshold);

// Both masks must hold only 0/1 and have equal length.
ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);
ConfusionCounts accumulate(std::span<const ConfusionCounts> parts);

// 0/0 is taken as 1.
Metrics derive_metrics(const ConfusionCounts& c);
double clipped_js(double js, double tau = 0.65);
double s_wsi(std::span<const double> per_wsi_js, double tau = 0.65);

struct ReportRow {
    std::string unit;
    ConfusionCounts counts;
};

// CSV: unit,tp,fp,tn,fn,sp,pc,rc,dc,js,clipped_js. Rows as given, then an
// AGGREGATE row over `aggregate_counts` whose clipped_js column holds
// `aggregate_score` (the slide score).
void write_metrics_csv(std::ostream& os, const std::vector<ReportRow>& rows,
                       const ConfusionCounts& aggregate_counts, double aggregate_score, double tau = 0.65);

}  // namespace sgseg
