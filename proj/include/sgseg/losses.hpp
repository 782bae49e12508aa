#pragma once

// Segmentation objectives: pixel cross-entropy, SSIM / multi-scale SSIM and
// soft IoU, plus weighted combinations.
//
// Loss functions accept maps shaped [H,W], [1,H,W] or [B,1,H,W]. Batched
// inputs are reduced per sample, then averaged over the batch.

#include <span>
#include <string>
#include <vector>

#include "sgseg/ops.hpp"

namespace sgseg {

enum class WindowKind { uniform, gaussian };

struct SsimConfig {
    int K = 11;
    double C1 = 0.01 * 0.01;
    double C2 = 0.03 * 0.03;
    WindowKind window = WindowKind::uniform;
    double sigma = 1.5;
    int ms_scales = 1;
    std::vector<double> ms_weights;  // empty: uniform over ms_scales

    void validate() const;
    // Normalized K*K window, row-major.
    std::vector<double> window_weights() const;
    std::vector<double> scale_weights() const;
};

struct WindowStats {
    double mu_x = 0, mu_y = 0;
    double sigma_x = 0, sigma_y = 0;
    double sigma_xy = 0;
};

// Weighted (population) statistics of two aligned K*K windows.
WindowStats window_stats(std::span<const double> x, std::span<const double> y, const SsimConfig& cfg);
double ssim_index(std::span<const double> x, std::span<const double> y, const SsimConfig& cfg);

struct LossSpec {
    bool ce = true;
    bool ssim = false;
    bool iou = false;
    double w_ce = 1.0;
    double w_ssim = 1.0;
    double w_iou = 1.0;

    // "ce", "ce+ssim", "ce+ssim+iou", ...
    static LossSpec parse(const std::string& text);
    std::string to_string() const;
    void validate() const;
};

template <typename T>
Tensor<T> ce_loss(const Tensor<T>& mp, const Tensor<T>& mg);
template <typename T>
Tensor<T> ssim_loss(const Tensor<T>& mp, const Tensor<T>& mg, const SsimConfig& cfg = {});
template <typename T>
Tensor<T> ms_ssim_loss(const Tensor<T>& mp, const Tensor<T>& mg, const SsimConfig& cfg = {});
template <typename T>
Tensor<T> iou_loss(const Tensor<T>& mp, const Tensor<T>& mg);

// The structural term used by combined_loss: ms_ssim_loss when
// cfg.ms_scales > 1, ssim_loss otherwise.
template <typename T>
Tensor<T> structural_loss(const Tensor<T>& mp, const Tensor<T>& mg, const SsimConfig& cfg);

template <typename T>
Tensor<T> combined_loss(const Tensor<T>& mp, const Tensor<T>& mg, const LossSpec& spec,
                        const SsimConfig& cfg = {});

// Total plus the value of every term. Terms not enabled in the LossSpec are evaluated
// without recording a graph, for logging.
template <typename T>
struct LossTerms {
    Tensor<T> total;
    double ce = 0, ssim = 0, iou = 0;
};

template <typename T>
LossTerms<T> combined_loss_detailed(const Tensor<T>& mp, const Tensor<T>& mg, const LossSpec& spec,
                                    const SsimConfig& cfg = {});

}  // namespace sgseg
