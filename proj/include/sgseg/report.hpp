#pragma once

// Loss-versus-epoch SVG plots.

#include <filesystem>
#include <string>
#include <vector>

#include "sgseg/trainer.hpp"

namespace sgseg {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

// Line chart with one <circle class="pt"> per data point, axes labelled
// "epoch" and `y_label`.
std::string render_svg(const std::string& title, const std::string& y_label, const std::vector<Series>& series);

// Writes <term>.svg for ce, ssim, iou and total (train and val series) plus
// overlay.svg with every term's train curve. Returns the written paths.
std::vector<std::filesystem::path> write_loss_plots(const TrainLog& log, const std::filesystem::path& out_dir);

}  // namespace sgseg
