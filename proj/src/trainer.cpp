#include "sgseg/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "sgseg/kernels.hpp"

namespace sgseg {

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    net.validate();
    if (!(adam.lr > 0)) throw std::invalid_argument("lr must be positive");
    if (!(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1))
        throw std::invalid_argument("Adam betas must be in [0,1)");
    if (!(adam.eps > 0)) throw std::invalid_argument("eps must be positive");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (decay_epochs < 0 || decay_epochs > epochs) throw std::invalid_argument("decay_epochs must be in [0, epochs]");
    if (!(decay_rate > 0 && decay_rate <= 1)) throw std::invalid_argument("decay_rate must be in (0,1]");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (grad_clip < 0) throw std::invalid_argument("grad_clip must be >= 0");
    if (threads < 0) throw std::invalid_argument("threads must be >= 0");
    loss.validate();
    ssim.validate();
    augment_cfg.validate();
    metrics.validate();
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

double to_double(const std::string& v) {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size() || !std::isfinite(d)) throw std::invalid_argument("not a number: '" + v + "'");
    return d;
}

long long to_int(const std::string& v) {
    std::size_t pos = 0;
    const long long i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("not an integer: '" + v + "'");
    return i;
}

bool to_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw std::invalid_argument("not a boolean: '" + v + "'");
}

void set_key(TrainConfig& c, const std::string& key, const std::string& v) {
    auto i32 = [&] { return static_cast<int>(to_int(v)); };
    if (key == "input_size") {
        const auto x = v.find('x');
        if (x == std::string::npos) {
            c.net.input_height = c.net.input_width = i32();
        } else {
            c.net.input_height = static_cast<int>(to_int(v.substr(0, x)));
            c.net.input_width = static_cast<int>(to_int(v.substr(x + 1)));
        }
    } else if (key == "in_channels") c.net.in_channels = i32();
    else if (key == "depth") c.net.depth = i32();
    else if (key == "width") c.net.width = i32();
    else if (key == "skips") c.net.skips = SkipSet::parse(v);
    else if (key == "block") c.net.block = parse_block_kind(v);
    else if (key == "attention") c.net.attention = parse_attention(v);
    else if (key == "fusion") c.net.fusion = parse_fusion(v);
    else if (key == "n_scales") c.net.n_scales = i32();
    else if (key == "reduction") c.net.reduction = i32();
    else if (key == "lr") c.adam.lr = to_double(v);
    else if (key == "beta1") c.adam.beta1 = to_double(v);
    else if (key == "beta2") c.adam.beta2 = to_double(v);
    else if (key == "eps") c.adam.eps = to_double(v);
    else if (key == "epochs") c.epochs = i32();
    else if (key == "decay_epochs") c.decay_epochs = i32();
    else if (key == "decay_rate") c.decay_rate = to_double(v);
    else if (key == "batch_size") c.batch_size = i32();
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(to_int(v));
    else if (key == "loss") {
        const auto w_ce = c.loss.w_ce, w_ssim = c.loss.w_ssim, w_iou = c.loss.w_iou;
        c.loss = LossSpec::parse(v);
        c.loss.w_ce = w_ce, c.loss.w_ssim = w_ssim, c.loss.w_iou = w_iou;
    } else if (key == "weight_ce") c.loss.w_ce = to_double(v);
    else if (key == "weight_ssim") c.loss.w_ssim = to_double(v);
    else if (key == "weight_iou") c.loss.w_iou = to_double(v);
    else if (key == "ssim_window") c.ssim.K = i32();
    else if (key == "ssim_c1") c.ssim.C1 = to_double(v);
    else if (key == "ssim_c2") c.ssim.C2 = to_double(v);
    else if (key == "ssim_kernel") {
        if (v == "uniform") c.ssim.window = WindowKind::uniform;
        else if (v == "gaussian") c.ssim.window = WindowKind::gaussian;
        else throw std::invalid_argument("ssim_kernel must be uniform or gaussian");
    } else if (key == "ssim_sigma") c.ssim.sigma = to_double(v);
    else if (key == "ms_scales") c.ssim.ms_scales = i32();
    else if (key == "ms_weights") {
        c.ssim.ms_weights.clear();
        std::stringstream ss(v);
        std::string item;
        while (std::getline(ss, item, ',')) c.ssim.ms_weights.push_back(to_double(trim(item)));
    } else if (key == "augment") c.augment = to_bool(v);
    else if (key == "augment_p") c.augment_cfg.p = to_double(v);
    else if (key == "rotate") c.augment_cfg.rotate = to_bool(v);
    else if (key == "hflip") c.augment_cfg.hflip = to_bool(v);
    else if (key == "vflip") c.augment_cfg.vflip = to_bool(v);
    else if (key == "jitter") c.augment_cfg.jitter = to_bool(v);
    else if (key == "jitter_brightness") c.augment_cfg.brightness = to_double(v);
    else if (key == "jitter_contrast") c.augment_cfg.contrast = to_double(v);
    else if (key == "jitter_saturation") c.augment_cfg.saturation = to_double(v);
    else if (key == "jitter_hue") c.augment_cfg.hue = to_double(v);
    else if (key == "grad_clip") c.grad_clip = to_double(v);
    else if (key == "record_time") c.record_time = to_bool(v);
    else if (key == "threads") c.threads = i32();
    else if (key == "threshold") c.metrics.binarize_threshold = to_double(v);
    else if (key == "clip_threshold") c.metrics.clip_threshold = to_double(v);
    else throw std::invalid_argument("unknown key '" + key + "'");
}

}  // namespace

TrainConfig parse_train_config(std::istream& is, TrainConfig base) {
    std::string line;
    int n = 0;
    std::map<std::string, int> seen;
    while (std::getline(is, line)) {
        ++n;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(n, "expected 'key = value'");
        const auto key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(n, "empty key");
        if (value.empty()) throw ConfigError(n, "empty value for '" + key + "'");
        if (auto [it, fresh] = seen.emplace(key, n); !fresh)
            throw ConfigError(n, "'" + key + "' already set on line " + std::to_string(it->second));
        try {
            set_key(base, key, value);
        } catch (const std::exception& e) {
            throw ConfigError(n, e.what());
        }
    }
    try {
        base.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(n, e.what());
    }
    return base;
}

TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("cannot read config " + path.string());
    return parse_train_config(is, std::move(base));
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

template <typename T>
void adam_step(std::span<T> param, std::span<const T> grad, AdamBuffers& buf, long t, double lr,
               const AdamConfig& cfg) {
    if (!grad.empty() && grad.size() != param.size())
        throw std::invalid_argument("adam_step: gradient size " + std::to_string(grad.size()) + " != parameter size " +
                                    std::to_string(param.size()));
    if (t < 1) throw std::invalid_argument("adam_step: step index starts at 1");
    if (buf.m.size() != param.size()) {
        buf.m.assign(param.size(), 0.0);
        buf.v.assign(param.size(), 0.0);
    }
    const double bc1 = 1 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
        buf.m[i] = cfg.beta1 * buf.m[i] + (1 - cfg.beta1) * g;
        buf.v[i] = cfg.beta2 * buf.v[i] + (1 - cfg.beta2) * g * g;
        const double mh = buf.m[i] / bc1, vh = buf.v[i] / bc2;
        param[i] = static_cast<T>(static_cast<double>(param[i]) - lr * mh / (std::sqrt(vh) + cfg.eps));
    }
}

template <typename T>
Adam<T>::Adam(ParameterSet<T>& params, AdamConfig cfg)
    : params_(&params), cfg_(cfg), buffers_(params.params().size()) {}

template <typename T>
void Adam<T>::step(double lr) {
    ++t_;
    auto& ps = params_->params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        if (!ps[i].trainable) continue;
        auto& tensor = ps[i].tensor;
        adam_step<T>(tensor.data(), tensor.grad(), buffers_[i], t_, lr, cfg_);
    }
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
    return epoch < cfg.epochs - cfg.decay_epochs ? cfg.adam.lr : cfg.adam.lr * cfg.decay_rate;
}

// ---------------------------------------------------------------------------
// log
// ---------------------------------------------------------------------------

namespace {
std::string fmt(double v, const char* f = "%.9g") {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}
}  // namespace

void TrainLog::write_csv(std::ostream& os) const {
    os << "epoch,split,ce,ssim,iou,total,seconds\n";
    for (const auto& r : records)
        os << r.epoch << ',' << r.split << ',' << fmt(r.ce) << ',' << fmt(r.ssim) << ',' << fmt(r.iou) << ','
           << fmt(r.total) << ',' << fmt(r.seconds, "%.3f") << '\n';
}

TrainLog TrainLog::read_csv(std::istream& is) {
    TrainLog log;
    std::string line;
    if (!std::getline(is, line) || trim(line) != "epoch,split,ce,ssim,iou,total,seconds")
        throw std::invalid_argument("losses CSV: unexpected header");
    int n = 1;
    while (std::getline(is, line)) {
        ++n;
        if (trim(line).empty()) continue;
        std::stringstream ss(line);
        std::vector<std::string> f;
        std::string item;
        while (std::getline(ss, item, ',')) f.push_back(trim(item));
        if (f.size() != 7) throw std::invalid_argument("losses CSV line " + std::to_string(n) + ": expected 7 fields");
        try {
            EpochRecord r;
            r.epoch = static_cast<int>(to_int(f[0]));
            r.split = f[1];
            r.ce = to_double(f[2]);
            r.ssim = to_double(f[3]);
            r.iou = to_double(f[4]);
            r.total = to_double(f[5]);
            r.seconds = to_double(f[6]);
            log.records.push_back(r);
        } catch (const std::exception& e) {
            throw std::invalid_argument("losses CSV line " + std::to_string(n) + ": " + e.what());
        }
    }
    return log;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

namespace {

struct TermSums {
    double ce = 0, ssim = 0, iou = 0, total = 0;
    std::int64_t n = 0;

    void add(const LossTerms<float>& t, std::int64_t batch) {
        ce += t.ce * batch;
        ssim += t.ssim * batch;
        iou += t.iou * batch;
        total += static_cast<double>(t.total.item()) * batch;
        n += batch;
    }
    EpochRecord record(int epoch, const char* split, double seconds) const {
        const double d = n > 0 ? static_cast<double>(n) : 1.0;
        return {epoch, split, ce / d, ssim / d, iou / d, total / d, seconds};
    }
};

void clip_gradients(ParameterSet<float>& ps, double max_norm) {
    double sq = 0;
    for (auto& p : ps.params())
        for (float g : p.tensor.grad()) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0) return;
    const float s = static_cast<float>(max_norm / norm);
    for (auto& p : ps.params())
        if (p.tensor.has_grad())
            for (float& g : p.tensor.mutable_grad()) g *= s;
}

std::string describe_terms(int epoch, std::size_t batch, const LossTerms<float>& t) {
    return "non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
           " (ce=" + fmt(t.ce) + ", ssim=" + fmt(t.ssim) + ", iou=" + fmt(t.iou) +
           ", total=" + fmt(static_cast<double>(t.total.item())) + ")";
}

}  // namespace

TrainResult train(const Dataset& ds, int fold, const TrainConfig& cfg, const std::filesystem::path& out_dir,
                  std::function<void(const EpochRecord&)> on_epoch) {
    cfg.validate();
    if (cfg.threads > 0) kernels::set_num_threads(cfg.threads);
    const auto train_set = ds.outside_fold(fold);
    const auto val_set = ds.in_fold(fold);
    if (train_set.empty()) throw std::invalid_argument("no training samples outside fold " + std::to_string(fold));
    for (const auto* s : train_set)
        if (s->image.height != cfg.net.input_height || s->image.width != cfg.net.input_width ||
            s->image.channels != cfg.net.in_channels)
            throw std::invalid_argument("sample '" + s->id + "' does not match the configured input size");
    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

    TrainResult res;
    res.model = Model<float>::build(cfg.net, cfg.seed);
    auto& model = res.model;
    Adam<float> opt(model.parameters(), cfg.adam);
    Rng root(cfg.seed ^ 0x7a11ULL);

    auto write_log = [&] {
        if (out_dir.empty()) return;
        std::ofstream os(out_dir / "losses.csv", std::ios::binary);
        res.log.write_csv(os);
    };

    for (int e = 0; e < cfg.epochs; ++e) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = lr_schedule(e, cfg);
        Rng erng = root.fork(static_cast<std::uint64_t>(e));
        std::vector<std::size_t> order(train_set.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        erng.shuffle(order);

        TermSums tr;
        std::size_t batch_index = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
            const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
            std::vector<Image> imgs, masks;
            for (std::size_t i = b0; i < b1; ++i) {
                const auto* s = train_set[order[i]];
                imgs.push_back(s->image);
                masks.push_back(s->mask);
                if (cfg.augment) {
                    Rng arng = erng.fork(i);
                    augment(imgs.back(), masks.back(), cfg.augment_cfg, arng);
                }
            }
            std::vector<const Image*> ip, mp;
            for (std::size_t i = 0; i < imgs.size(); ++i) ip.push_back(&imgs[i]), mp.push_back(&masks[i]);
            const auto x = images_to_tensor<float>(ip);
            const auto y = images_to_tensor<float>(mp);

            model.parameters().zero_grad();
            const auto prob = model.forward(x, Mode::train);
            const auto terms = combined_loss_detailed(prob, y, cfg.loss, cfg.ssim);
            if (!std::isfinite(terms.total.item()) || !std::isfinite(terms.ce) || !std::isfinite(terms.ssim) ||
                !std::isfinite(terms.iou)) {
                write_log();
                throw NumericalError(describe_terms(e + 1, batch_index, terms));
            }
            backward(terms.total);
            if (cfg.grad_clip > 0) clip_gradients(model.parameters(), cfg.grad_clip);
            opt.step(lr);
            tr.add(terms, static_cast<std::int64_t>(b1 - b0));
        }

        TermSums va;
        ConfusionCounts vc;
        if (!val_set.empty()) {
            NoGradGuard ng;
            for (std::size_t b0 = 0; b0 < val_set.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
                const std::size_t b1 = std::min(val_set.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
                std::vector<const Image*> ip, mp;
                for (std::size_t i = b0; i < b1; ++i) ip.push_back(&val_set[i]->image), mp.push_back(&val_set[i]->mask);
                const auto x = images_to_tensor<float>(ip);
                const auto y = images_to_tensor<float>(mp);
                const auto prob = model.forward(x, Mode::eval);
                va.add(combined_loss_detailed(prob, y, cfg.loss, cfg.ssim), static_cast<std::int64_t>(b1 - b0));
                const auto pred = binarize(prob.data(), cfg.metrics.binarize_threshold);
                const auto truth = binarize(y.data(), 0.5);
                vc += confusion(pred, truth);
            }
        }
        const double seconds =
            cfg.record_time ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() : 0.0;
        res.log.records.push_back(tr.record(e + 1, "train", seconds));
        if (on_epoch) on_epoch(res.log.records.back());
        if (!val_set.empty()) {
            res.log.records.push_back(va.record(e + 1, "val", seconds));
            if (on_epoch) on_epoch(res.log.records.back());
        }
        const double dice = val_set.empty() ? 0.0 : derive_metrics(vc).dc;
        if (res.best_epoch == 0 || dice > res.best_val_dice) {
            res.best_val_dice = dice;
            res.best_epoch = e + 1;
            if (!out_dir.empty()) save_checkpoint(out_dir / "best.sgck", model);
        }
        write_log();
    }
    if (!out_dir.empty()) save_checkpoint(out_dir / "final.sgck", model);
    return res;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

PredictFn model_predictor(Model<float>& model, int batch_size) {
    return [&model, batch_size](const std::vector<const Image*>& images, const std::vector<const Image*>&) {
        NoGradGuard ng;
        std::vector<Image> out;
        for (std::size_t b0 = 0; b0 < images.size(); b0 += static_cast<std::size_t>(batch_size)) {
            const std::size_t b1 = std::min(images.size(), b0 + static_cast<std::size_t>(batch_size));
            std::vector<const Image*> batch(images.begin() + static_cast<std::ptrdiff_t>(b0),
                                            images.begin() + static_cast<std::ptrdiff_t>(b1));
            const auto prob = model.forward(images_to_tensor<float>(batch), Mode::eval);
            const auto h = static_cast<int>(prob.dim(2)), w = static_cast<int>(prob.dim(3));
            const auto plane = static_cast<std::size_t>(h) * w;
            for (std::size_t i = 0; i < batch.size(); ++i) {
                Image m(1, h, w);
                std::copy_n(prob.data().begin() + static_cast<std::ptrdiff_t>(i * plane), plane, m.data.begin());
                out.push_back(std::move(m));
            }
        }
        return out;
    };
}

PredictFn oracle_predictor() {
    return [](const std::vector<const Image*>&, const std::vector<const Image*>& truth) {
        std::vector<Image> out;
        for (const auto* t : truth) out.push_back(*t);
        return out;
    };
}

PredictFn constant_predictor(float value) {
    return [value](const std::vector<const Image*>& images, const std::vector<const Image*>&) {
        std::vector<Image> out;
        for (const auto* im : images) out.emplace_back(1, im->height, im->width, value);
        return out;
    };
}

void EvalResult::write_csv(std::ostream& os, double tau) const {
    std::vector<ReportRow> rows = tile_rows;
    rows.insert(rows.end(), wsi_rows.begin(), wsi_rows.end());
    write_metrics_csv(os, rows, patch_counts, s_wsi, tau);
}

EvalResult evaluate(const PredictFn& predict, const Dataset& ds, int fold, const MetricsConfig& cfg, int batch_size) {
    cfg.validate();
    EvalResult r;
    const auto samples = ds.in_fold(fold);
    std::map<std::string, ConfusionCounts> per_wsi;
    for (std::size_t b0 = 0; b0 < samples.size(); b0 += static_cast<std::size_t>(batch_size)) {
        const std::size_t b1 = std::min(samples.size(), b0 + static_cast<std::size_t>(batch_size));
        std::vector<const Image*> ip, mp;
        for (std::size_t i = b0; i < b1; ++i) ip.push_back(&samples[i]->image), mp.push_back(&samples[i]->mask);
        const auto maps = predict(ip, mp);
        for (std::size_t i = 0; i < maps.size(); ++i) {
            const auto pred = binarize(std::span<const float>(maps[i].data), cfg.binarize_threshold);
            const auto truth = binarize(std::span<const float>(mp[i]->data), 0.5);
            const auto c = confusion(pred, truth);
            const auto* s = samples[b0 + i];
            r.tile_rows.push_back({"tile:" + s->id, c});
            r.patch_counts += c;
            per_wsi[s->wsi] += c;
        }
    }
    r.patch_metrics = derive_metrics(r.patch_counts);

    bool have_slides = false;
    for (const auto& sl : ds.slides) {
        if (sl.fold != fold) continue;
        have_slides = true;
        const auto grid = sl.grid();
        const auto tiles = extract(sl.image, grid);
        const auto tmasks = extract(sl.mask, grid);
        std::vector<const Image*> ip, mp;
        for (std::size_t i = 0; i < tiles.size(); ++i) ip.push_back(&tiles[i]), mp.push_back(&tmasks[i]);
        std::vector<Image> maps;
        for (std::size_t b0 = 0; b0 < ip.size(); b0 += static_cast<std::size_t>(batch_size)) {
            const std::size_t b1 = std::min(ip.size(), b0 + static_cast<std::size_t>(batch_size));
            auto part = predict({ip.begin() + static_cast<std::ptrdiff_t>(b0), ip.begin() + static_cast<std::ptrdiff_t>(b1)},
                                {mp.begin() + static_cast<std::ptrdiff_t>(b0), mp.begin() + static_cast<std::ptrdiff_t>(b1)});
            for (auto& m : part) maps.push_back(std::move(m));
        }
        const auto full = stitch(maps, grid);
        const auto c = confusion(binarize(std::span<const float>(full.data), cfg.binarize_threshold),
                                 binarize(std::span<const float>(sl.mask.data), 0.5));
        r.wsi_rows.push_back({"wsi:" + sl.wsi, c});
        r.wsi_js.push_back(derive_metrics(c).js);
    }
    if (!have_slides)
        for (const auto& [wsi, c] : per_wsi) {
            r.wsi_rows.push_back({"wsi:" + wsi, c});
            r.wsi_js.push_back(derive_metrics(c).js);
        }
    r.s_wsi = r.wsi_js.empty() ? 0.0 : s_wsi(r.wsi_js, cfg.clip_threshold);
    return r;
}

template void adam_step<float>(std::span<float>, std::span<const float>, AdamBuffers&, long, double, const AdamConfig&);
template void adam_step<double>(std::span<double>, std::span<const double>, AdamBuffers&, long, double,
                                const AdamConfig&);
template class Adam<float>;
template class Adam<double>;

}  // namespace sgseg
