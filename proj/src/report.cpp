#include "sgseg/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace sgseg {

namespace {

constexpr double kW = 640, kH = 400, kLeft = 70, kRight = 130, kTop = 40, kBottom = 50;
const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

std::string px(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '<') out += "&lt;";
        else if (c == '>') out += "&gt;";
        else if (c == '&') out += "&amp;";
        else out += c;
    }
    return out;
}

}  // namespace

std::string render_svg(const std::string& title, const std::string& y_label, const std::vector<Series>& series) {
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    const double pad = 0.05 * (ymax - ymin);
    ymin -= pad;
    ymax += pad;
    const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
    auto sx = [&](double x) { return kLeft + (x - xmin) / (xmax - xmin) * pw; };
    auto sy = [&](double y) { return kTop + (1 - (y - ymin) / (ymax - ymin)) * ph; };

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 "
      << kW << ' ' << kH << "\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << px(kLeft + pw / 2) << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" "
      << "font-size=\"15\">" << escape(title) << "</text>\n";
    o << "<g stroke=\"black\" stroke-width=\"1\">\n";
    o << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + ph << "\" x2=\"" << kLeft + pw << "\" y2=\"" << kTop + ph
      << "\"/>\n";
    o << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + ph << "\"/>\n";
    o << "</g>\n<g font-family=\"sans-serif\" font-size=\"11\">\n";
    for (int i = 0; i <= 4; ++i) {
        const double xv = xmin + (xmax - xmin) * i / 4, yv = ymin + (ymax - ymin) * i / 4;
        o << "<text x=\"" << px(sx(xv)) << "\" y=\"" << px(kTop + ph + 16) << "\" text-anchor=\"middle\">" << num(xv)
          << "</text>\n";
        o << "<text x=\"" << px(kLeft - 6) << "\" y=\"" << px(sy(yv) + 4) << "\" text-anchor=\"end\">" << num(yv)
          << "</text>\n";
    }
    o << "</g>\n";
    o << "<text class=\"x-label\" x=\"" << px(kLeft + pw / 2) << "\" y=\"" << px(kH - 10)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">epoch</text>\n";
    o << "<text class=\"y-label\" x=\"16\" y=\"" << px(kTop + ph / 2) << "\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 16 " << px(kTop + ph / 2) << ")\">"
      << escape(y_label) << "</text>\n";

    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const char* color = kColors[k % std::size(kColors)];
        o << "<g class=\"series\" data-name=\"" << escape(s.name) << "\" stroke=\"" << color << "\" fill=\"" << color
          << "\">\n";
        o << "<polyline fill=\"none\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i) o << (i ? " " : "") << px(sx(s.x[i])) << ',' << px(sy(s.y[i]));
        o << "\"/>\n";
        for (std::size_t i = 0; i < s.x.size(); ++i)
            o << "<circle class=\"pt\" cx=\"" << px(sx(s.x[i])) << "\" cy=\"" << px(sy(s.y[i])) << "\" r=\"2.5\"/>\n";
        o << "</g>\n";
        const double ly = kTop + 14 + 18 * static_cast<double>(k);
        o << "<line x1=\"" << px(kW - kRight + 12) << "\" y1=\"" << px(ly) << "\" x2=\"" << px(kW - kRight + 32)
          << "\" y2=\"" << px(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        o << "<text x=\"" << px(kW - kRight + 38) << "\" y=\"" << px(ly + 4)
          << "\" font-family=\"sans-serif\" font-size=\"12\">" << escape(s.name) << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

std::vector<std::filesystem::path> write_loss_plots(const TrainLog& log, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    struct Term {
        const char* name;
        double EpochRecord::*field;
    };
    const Term terms[] = {{"ce", &EpochRecord::ce},
                          {"ssim", &EpochRecord::ssim},
                          {"iou", &EpochRecord::iou},
                          {"total", &EpochRecord::total}};
    auto collect = [&](const char* split, double EpochRecord::*field) {
        Series s;
        s.name = split;
        for (const auto& r : log.records)
            if (r.split == split) {
                s.x.push_back(r.epoch);
                s.y.push_back(r.*field);
            }
        return s;
    };
    std::vector<std::filesystem::path> written;
    auto save = [&](const std::string& file, const std::string& svg) {
        const auto path = out_dir / file;
        std::ofstream os(path, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write " + path.string());
        os << svg;
        written.push_back(path);
    };
    std::vector<Series> overlay;
    for (const auto& t : terms) {
        std::vector<Series> s;
        for (const char* split : {"train", "val"}) {
            auto one = collect(split, t.field);
            if (!one.x.empty()) s.push_back(std::move(one));
        }
        save(std::string(t.name) + ".svg", render_svg(std::string(t.name) + " loss", "loss value", s));
        auto tr = collect("train", t.field);
        tr.name = t.name;
        overlay.push_back(std::move(tr));
    }
    save("overlay.svg", render_svg("training losses", "loss value", overlay));
    return written;
}

}  // namespace sgseg
