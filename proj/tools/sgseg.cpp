// sgseg: synthetic data, tiling, stitching, training, evaluation and loss
// plots from the command line.
//
// Exit codes: 0 success, 2 usage or input error, 3 numerical failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "sgseg/dataset.hpp"
#include "sgseg/kernels.hpp"
#include "sgseg/report.hpp"
#include "sgseg/tensor_io.hpp"
#include "sgseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace sgseg;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string patch_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "patch_%05zu.png", i);
    return buf;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw UsageError("cannot create directory " + dir.string());
}

struct SynthArgs {
    int n = 0;
    int size = 64;
    std::string out;
    std::uint64_t seed = 0;
    int folds = 5;
    int slides = 0;
    int slide_size = 0;
    int overlap = 0;
};

int run_synth(const SynthArgs& a) {
    if (a.size < 32) throw UsageError("--size must be >= 32");
    Dataset ds;
    if (a.slides > 0) {
        if (a.slide_size < a.size) throw UsageError("--slide-size must be >= --size");
        ds = synth_slides(a.slides, a.slide_size, a.size, a.overlap, a.seed, a.folds);
    } else {
        if (a.n < 0) throw UsageError("--n must be >= 0");
        if (a.n > 0 && a.n < a.folds) throw UsageError("--n must be 0 or at least --folds");
        ds = synth_generate(a.n, a.size, a.seed, a.folds);
    }
    try {
        ensure_dir(a.out);
        write_dataset(a.out, ds);
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
    std::cout << "wrote " << ds.samples.size() << " samples";
    if (!ds.slides.empty()) std::cout << " from " << ds.slides.size() << " slides";
    std::cout << " to " << a.out << "\n";
    return 0;
}

struct TileArgs {
    std::string image;
    int size = 0;
    int overlap = 0;
    std::string out;
};

int run_tile(const TileArgs& a) {
    if (a.overlap < 0 || a.overlap >= a.size) throw UsageError("--overlap must be in [0, --size)");
    Image img;
    try {
        img = read_png(a.image);
    } catch (const ImageError& e) {
        throw UsageError(e.what());
    }
    TileGrid grid;
    try {
        grid = make_grid(img.height, img.width, a.size, a.overlap);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    ensure_dir(a.out);
    const auto patches = extract(img, grid);
    for (std::size_t i = 0; i < patches.size(); ++i) write_png(fs::path(a.out) / patch_name(i), patches[i]);
    save_grid(fs::path(a.out) / "grid.json", grid);
    std::cout << "wrote " << patches.size() << " patches and grid.json to " << a.out << "\n";
    return 0;
}

struct StitchArgs {
    std::string grid;
    std::string patches;
    std::string out;
};

int run_stitch(const StitchArgs& a) {
    TileGrid grid;
    try {
        grid = load_grid(a.grid);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    std::vector<Image> maps;
    for (std::size_t i = 0; i < grid.positions.size(); ++i) {
        const auto p = fs::path(a.patches) / patch_name(i);
        if (!fs::exists(p)) throw UsageError("missing patch file " + p.string());
        try {
            maps.push_back(read_png(p));
        } catch (const ImageError& e) {
            throw UsageError(e.what());
        }
    }
    Image full;
    try {
        full = stitch(maps, grid);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const fs::path out(a.out);
    if (out.has_parent_path()) ensure_dir(out.parent_path());
    if (out.extension() == ".png") {
        if (full.channels == 1) write_png16(out, full);
        else write_png(out, full);
    } else {
        save_tensor(out, Tensor<float>({full.channels, full.height, full.width}, full.data));
    }
    std::cout << "stitched " << maps.size() << " patches into " << a.out << "\n";
    return 0;
}

struct TrainArgs {
    std::string config;
    std::string data;
    int fold = 0;
    std::string out;
    std::optional<std::uint64_t> seed;
};

Dataset load_data(const std::string& dir) {
    try {
        return read_dataset(dir);
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
}

int run_train(const TrainArgs& a, int threads) {
    TrainConfig cfg;
    try {
        cfg = load_train_config(a.config);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    if (a.seed) cfg.seed = *a.seed;
    if (threads > 0) cfg.threads = threads;
    const auto ds = load_data(a.data);
    if (a.fold < 0 || a.fold >= ds.folds) throw UsageError("--fold must be in [0, " + std::to_string(ds.folds) + ")");
    TrainResult res;
    try {
        res = train(ds, a.fold, cfg, a.out, [](const EpochRecord& r) {
            std::cout << "epoch " << r.epoch << ' ' << r.split << " ce=" << r.ce << " ssim=" << r.ssim
                      << " iou=" << r.iou << " total=" << r.total << "\n";
        });
    } catch (const NumericalError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    std::cout << "best validation dice " << res.best_val_dice << " at epoch " << res.best_epoch << "\n";
    return 0;
}

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    int fold = 0;
    std::string report;
    std::string predictor = "model";
    double threshold = 0.5;
    double clip = 0.65;
    int batch = 8;
};

int run_eval(const EvalArgs& a) {
    MetricsConfig mc;
    mc.binarize_threshold = a.threshold;
    mc.clip_threshold = a.clip;
    try {
        mc.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    std::optional<Model<float>> model;
    PredictFn predict;
    if (a.predictor == "model") {
        if (a.checkpoint.empty()) throw UsageError("--checkpoint is required with --predictor model");
        try {
            model = load_checkpoint<float>(a.checkpoint);
        } catch (const std::exception& e) {
            throw UsageError(e.what());
        }
        predict = model_predictor(*model, a.batch);
    } else if (a.predictor == "oracle") {
        predict = oracle_predictor();
    } else if (a.predictor.rfind("constant:", 0) == 0) {
        double v;
        try {
            v = std::stod(a.predictor.substr(9));
        } catch (const std::exception&) {
            throw UsageError("bad constant predictor '" + a.predictor + "'");
        }
        predict = constant_predictor(static_cast<float>(v));
    } else {
        throw UsageError("--predictor must be model, oracle or constant:<v>");
    }
    const auto ds = load_data(a.data);
    if (a.fold < 0 || a.fold >= ds.folds) throw UsageError("--fold must be in [0, " + std::to_string(ds.folds) + ")");
    if (model && (model->config().input_height != ds.samples.front().image.height ||
                  model->config().input_width != ds.samples.front().image.width))
        throw UsageError("checkpoint input size does not match the dataset patches");
    EvalResult r;
    try {
        r = evaluate(predict, ds, a.fold, mc, a.batch);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const fs::path out(a.report);
    if (out.has_parent_path()) ensure_dir(out.parent_path());
    std::ofstream os(out, std::ios::binary);
    if (!os) throw UsageError("cannot write " + a.report);
    r.write_csv(os, mc.clip_threshold);
    const auto& m = r.patch_metrics;
    std::printf("tiles %zu  slides %zu\nDC %.6f  JS %.6f  PC %.6f  RC %.6f  SP %.6f  S_wsi %.6f\n", r.tile_rows.size(),
                r.wsi_rows.size(), m.dc, m.js, m.pc, m.rc, m.sp, r.s_wsi);
    return 0;
}

struct ReportArgs {
    std::string curves;
    std::string out;
};

int run_report(const ReportArgs& a) {
    std::ifstream is(a.curves);
    if (!is) throw UsageError("cannot read " + a.curves);
    TrainLog log;
    try {
        log = TrainLog::read_csv(is);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    for (const auto& p : write_loss_plots(log, a.out)) std::cout << "wrote " << p.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sgseg: scale-adaptive segmentation toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    int threads = 0;
    app.add_option("--threads", threads, "worker threads (1 = reproducibility mode)")->check(CLI::NonNegativeNumber);

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "generate a synthetic blob dataset");
    synth->add_option("--n", sa.n, "number of independent samples");
    synth->add_option("--size", sa.size, "patch side in pixels");
    synth->add_option("--out", sa.out, "output directory")->required();
    synth->add_option("--seed", sa.seed, "random seed");
    synth->add_option("--folds", sa.folds, "fold count")->check(CLI::PositiveNumber);
    synth->add_option("--slides", sa.slides, "generate this many slides and tile them instead");
    synth->add_option("--slide-size", sa.slide_size, "slide side in pixels");
    synth->add_option("--overlap", sa.overlap, "patch overlap for slides");

    TileArgs ta;
    auto* tile = app.add_subcommand("tile", "cut an image into overlapping patches");
    tile->add_option("--image", ta.image, "input PNG")->required();
    tile->add_option("--size", ta.size, "patch side")->required();
    tile->add_option("--overlap", ta.overlap, "overlap in pixels")->required();
    tile->add_option("--out", ta.out, "output directory")->required();

    StitchArgs st;
    auto* stitch_cmd = app.add_subcommand("stitch", "average patch maps back into a full map");
    stitch_cmd->add_option("--grid", st.grid, "grid.json from tile")->required();
    stitch_cmd->add_option("--patches", st.patches, "directory of patch_NNNNN.png maps")->required();
    stitch_cmd->add_option("--out", st.out, "output (.png: 16-bit gray, otherwise raw tensor)")->required();

    TrainArgs tr;
    std::uint64_t train_seed = 0;
    auto* train_cmd = app.add_subcommand("train", "train a network on one fold split");
    train_cmd->add_option("--config", tr.config, "key = value config file")->required();
    train_cmd->add_option("--data", tr.data, "dataset directory")->required();
    train_cmd->add_option("--fold", tr.fold, "validation fold");
    train_cmd->add_option("--out", tr.out, "output directory")->required();
    auto* seed_opt = train_cmd->add_option("--seed", train_seed, "override the config seed");

    EvalArgs ea;
    auto* eval_cmd = app.add_subcommand("eval", "patch and slide metrics on one fold");
    eval_cmd->add_option("--checkpoint", ea.checkpoint, "model checkpoint");
    eval_cmd->add_option("--data", ea.data, "dataset directory")->required();
    eval_cmd->add_option("--fold", ea.fold, "fold to evaluate");
    eval_cmd->add_option("--report", ea.report, "CSV report path")->required();
    eval_cmd->add_option("--predictor", ea.predictor, "model, oracle or constant:<v>");
    eval_cmd->add_option("--threshold", ea.threshold, "binarization threshold");
    eval_cmd->add_option("--clip", ea.clip, "clipped Jaccard threshold");
    eval_cmd->add_option("--batch", ea.batch, "inference batch size")->check(CLI::PositiveNumber);

    ReportArgs ra;
    auto* report = app.add_subcommand("report", "plot loss curves as SVG");
    report->add_option("--curves", ra.curves, "losses.csv")->required();
    report->add_option("--out-svg", ra.out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (threads > 0) kernels::set_num_threads(threads);
        if (*synth) return run_synth(sa);
        if (*tile) return run_tile(ta);
        if (*stitch_cmd) return run_stitch(st);
        if (*train_cmd) {
            if (*seed_opt) tr.seed = train_seed;
            return run_train(tr, threads);
        }
        if (*eval_cmd) return run_eval(ea);
        if (*report) return run_report(ra);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
