#pragma once

// Adam training loop with a step-decayed learning rate, loss-curve logging,
// checkpointing and patch / slide level evaluation.

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "sgseg/dataset.hpp"
#include "sgseg/losses.hpp"
#include "sgseg/metrics.hpp"
#include "sgseg/segnet.hpp"

namespace sgseg {

class ConfigError : public std::invalid_argument {
public:
    ConfigError(int line, const std::string& msg)
        : std::invalid_argument("config line " + std::to_string(line) + ": " + msg), line_(line) {}
    int line() const { return line_; }

private:
    int line_;
};

class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    NetworkConfig net;
    AdamConfig adam;
    int epochs = 100;
    int decay_epochs = 10;
    double decay_rate = 0.1;
    int batch_size = 4;
    std::uint64_t seed = 0;
    LossSpec loss;
    SsimConfig ssim;
    bool augment = true;
    AugmentConfig augment_cfg;
    double grad_clip = 0;  // global L2 norm; 0 disables
    bool record_time = true;
    int threads = 0;  // 0: leave the OpenMP default
    MetricsConfig metrics;

    void validate() const;
};

// Flat "key = value" text; '#' starts a comment. Unknown keys and bad values
// raise ConfigError carrying the line number.
TrainConfig parse_train_config(std::istream& is, TrainConfig base = {});
TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base = {});

// Per-tensor moment buffers.
struct AdamBuffers {
    std::vector<double> m, v;
};

// One bias-corrected Adam update. t counts from 1.
template <typename T>
void adam_step(std::span<T> param, std::span<const T> grad, AdamBuffers& buf, long t, double lr,
               const AdamConfig& cfg);

template <typename T>
class Adam {
public:
    Adam(ParameterSet<T>& params, AdamConfig cfg);
    // Parameters with no gradient take a zero gradient.
    void step(double lr);
    long steps() const { return t_; }

private:
    ParameterSet<T>* params_;
    AdamConfig cfg_;
    std::vector<AdamBuffers> buffers_;
    long t_ = 0;
};

double lr_schedule(int epoch, const TrainConfig& cfg);

struct EpochRecord {
    int epoch = 0;  // 1-based
    std::string split;
    double ce = 0, ssim = 0, iou = 0, total = 0, seconds = 0;
};

struct TrainLog {
    std::vector<EpochRecord> records;

    // epoch,split,ce,ssim,iou,total,seconds
    void write_csv(std::ostream& os) const;
    static TrainLog read_csv(std::istream& is);
};

struct TrainResult {
    Model<float> model;  // state after the last epoch
    TrainLog log;
    double best_val_dice = -1;
    int best_epoch = 0;
};

// Trains on every fold except `fold` and validates on `fold`. With a
// non-empty out_dir, writes losses.csv (after every epoch), best.sgck and
// final.sgck there. Throws NumericalError on a non-finite loss.
TrainResult train(const Dataset& ds, int fold, const TrainConfig& cfg, const std::filesystem::path& out_dir = {},
                  std::function<void(const EpochRecord&)> on_epoch = {});

// Maps a batch of images to probability maps (1 channel). The ground-truth
// masks are passed along so that reference predictors can be expressed.
using PredictFn =
    std::function<std::vector<Image>(const std::vector<const Image*>& images, const std::vector<const Image*>& truth)>;

PredictFn model_predictor(Model<float>& model, int batch_size = 8);
PredictFn oracle_predictor();
PredictFn constant_predictor(float value);

struct EvalResult {
    std::vector<ReportRow> tile_rows;
    std::vector<ReportRow> wsi_rows;
    ConfusionCounts patch_counts;
    Metrics patch_metrics;
    std::vector<double> wsi_js;
    double s_wsi = 0;

    void write_csv(std::ostream& os, double tau) const;
};

// Patch-level accumulated metrics over the fold's samples and slide-level
// clipped Jaccard. Slides with rasters are tiled, predicted, stitched and
// binarized; without rasters, tile counts are accumulated per slide id.
EvalResult evaluate(const PredictFn& predict, const Dataset& ds, int fold, const MetricsConfig& cfg,
                    int batch_size = 8);

}  // namespace sgseg
