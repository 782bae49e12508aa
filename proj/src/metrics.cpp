#include "sgseg/metrics.hpp"

#include <cstdio>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace sgseg {

namespace {

void add_checked(std::uint64_t& a, std::uint64_t b) {
    if (a > std::numeric_limits<std::uint64_t>::max() - b) throw std::overflow_error("confusion counter overflow");
    a += b;
}

double ratio(std::uint64_t num, std::uint64_t den) {
    return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
}

template <typename T>
std::vector<std::uint8_t> binarize_impl(std::span<const T> prob, double threshold) {
    std::vector<std::uint8_t> out(prob.size());
    for (std::size_t i = 0; i < prob.size(); ++i) out[i] = static_cast<double>(prob[i]) >= threshold ? 1 : 0;
    return out;
}

std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
    add_checked(tp, o.tp);
    add_checked(fp, o.fp);
    add_checked(tn, o.tn);
    add_checked(fn, o.fn);
    return *this;
}

void MetricsConfig::validate() const {
    if (!(binarize_threshold > 0 && binarize_threshold < 1))
        throw std::invalid_argument("binarize threshold must be in (0,1)");
    if (!(clip_threshold > 0 && clip_threshold < 1)) throw std::invalid_argument("clip threshold must be in (0,1)");
}

std::vector<std::uint8_t> binarize(std::span<const float> prob, double threshold) {
    return binarize_impl(prob, threshold);
}

std::vector<std::uint8_t> binarize(std::span<const double> prob, double threshold) {
    return binarize_impl(prob, threshold);
}

ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
    if (pred.size() != truth.size())
        throw std::invalid_argument("confusion: mask sizes differ (" + std::to_string(pred.size()) + " vs " +
                                    std::to_string(truth.size()) + ")");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const auto p = pred[i], g = truth[i];
        if (p > 1 || g > 1) throw std::invalid_argument("confusion: masks must be binary");
        if (p && g) ++c.tp;
        else if (p) ++c.fp;
        else if (g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

ConfusionCounts accumulate(std::span<const ConfusionCounts> parts) {
    ConfusionCounts c;
    for (const auto& p : parts) c += p;
    return c;
}

Metrics derive_metrics(const ConfusionCounts& c) {
    Metrics m;
    m.sp = ratio(c.tn, c.tn + c.fp);
    m.pc = ratio(c.tp, c.tp + c.fp);
    m.rc = ratio(c.tp, c.tp + c.fn);
    m.js = ratio(c.tp, c.tp + c.fp + c.fn);
    m.dc = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
    return m;
}

double clipped_js(double js, double tau) { return js >= tau ? js : 0.0; }

double s_wsi(std::span<const double> per_wsi_js, double tau) {
    if (per_wsi_js.empty()) throw std::invalid_argument("s_wsi: no slides");
    double s = 0;
    for (double js : per_wsi_js) s += clipped_js(js, tau);
    return s / static_cast<double>(per_wsi_js.size());
}

void write_metrics_csv(std::ostream& os, const std::vector<ReportRow>& rows, const ConfusionCounts& aggregate_counts,
                       double aggregate_score, double tau) {
    os << "unit,tp,fp,tn,fn,sp,pc,rc,dc,js,clipped_js\n";
    auto line = [&](const std::string& unit, const ConfusionCounts& c, double clipped) {
        const auto m = derive_metrics(c);
        os << unit << ',' << c.tp << ',' << c.fp << ',' << c.tn << ',' << c.fn << ',' << fmt6(m.sp) << ','
           << fmt6(m.pc) << ',' << fmt6(m.rc) << ',' << fmt6(m.dc) << ',' << fmt6(m.js) << ',' << fmt6(clipped)
           << '\n';
    };
    for (const auto& r : rows) line(r.unit, r.counts, clipped_js(derive_metrics(r.counts).js, tau));
    line("AGGREGATE", aggregate_counts, aggregate_score);
}

}  // namespace sgseg
