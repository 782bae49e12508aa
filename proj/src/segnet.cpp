#include "sgseg/segnet.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "sgseg/tensor_io.hpp"

namespace sgseg {

// ---------------------------------------------------------------------------
// enums / skip set / config
// ---------------------------------------------------------------------------

std::string to_string(BlockKind k) { return k == BlockKind::basic ? "basic" : "shortcut"; }
std::string to_string(Attention a) { return a == Attention::none ? "none" : "se"; }
std::string to_string(Fusion f) {
    switch (f) {
        case Fusion::single: return "single";
        case Fusion::average: return "average";
        case Fusion::adaptive: return "adaptive";
    }
    return "?";
}

BlockKind parse_block_kind(const std::string& s) {
    if (s == "basic") return BlockKind::basic;
    if (s == "shortcut") return BlockKind::shortcut;
    throw std::invalid_argument("unknown block kind '" + s + "' (basic|shortcut)");
}

Attention parse_attention(const std::string& s) {
    if (s == "none") return Attention::none;
    if (s == "se") return Attention::se;
    throw std::invalid_argument("unknown attention '" + s + "' (none|se)");
}

Fusion parse_fusion(const std::string& s) {
    if (s == "single") return Fusion::single;
    if (s == "average") return Fusion::average;
    if (s == "adaptive") return Fusion::adaptive;
    throw std::invalid_argument("unknown fusion '" + s + "' (single|average|adaptive)");
}

SkipSet SkipSet::parse(const std::string& text) {
    if (text == "all") return all();
    if (text == "none" || text == "0") return none();
    SkipSet s = none();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, '+')) {
        item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
        if (item.rfind("1/", 0) != 0) throw std::invalid_argument("bad skip fraction '" + item + "'");
        const int denom = std::stoi(item.substr(2));
        if (denom < 1 || (denom & (denom - 1)) != 0)
            throw std::invalid_argument("skip fraction denominator must be a power of two: '" + item + "'");
        int stage = 0;
        while ((1 << stage) < denom) ++stage;
        s.mask |= 1u << stage;
    }
    return s;
}

std::string SkipSet::to_string(int depth) const {
    std::string out;
    for (int s = depth - 2; s >= 0; --s) {
        if (!contains(s)) continue;
        if (!out.empty()) out += '+';
        out += "1/" + std::to_string(1 << s);
    }
    return out.empty() ? "none" : out;
}

int NetworkConfig::stage_channels(int stage) const { return width << std::min(stage, 4); }

void NetworkConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("invalid network config: " + m); };
    if (depth < 1 || depth > 8) fail("depth must be in [1, 8], got " + std::to_string(depth));
    if (width < 1) fail("width must be >= 1");
    if (in_channels < 1) fail("in_channels must be >= 1");
    if (reduction < 1) fail("reduction must be >= 1");
    const int factor = 1 << (depth - 1);
    if (input_height < 1 || input_width < 1 || input_height % factor != 0 || input_width % factor != 0)
        fail("input " + std::to_string(input_height) + "x" + std::to_string(input_width) +
             " must be divisible by 2^(depth-1) = " + std::to_string(factor));
    if (n_scales < 1 || n_scales > 4) fail("n_scales must be in [1, 4]");
    if (n_scales > depth) fail("n_scales (" + std::to_string(n_scales) + ") exceeds depth (" + std::to_string(depth) + ")");
    if (fusion == Fusion::single && n_scales != 1) fail("fusion=single requires n_scales=1");
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

template <typename T>
struct Model<T>::Layers {
    NetworkConfig cfg;
    std::vector<ConvBlock<T>> enc;  // depth entries; the last is the bottleneck
    std::vector<SEBlock<T>> enc_se;
    std::vector<Conv2d<T>> up_conv;  // index s: stage s+1 -> stage s
    std::vector<BatchNorm2d<T>> up_bn;
    std::vector<ConvBlock<T>> dec;  // index s, s < depth-1
    std::vector<SEBlock<T>> dec_se;
    std::vector<std::optional<Conv2d<T>>> align;
    std::optional<SafsModule<T>> safs;
    Conv2d<T> head;
    ParameterSet<T> params;
};

template <typename T>
Model<T>::Model() = default;
template <typename T>
Model<T>::~Model() = default;
template <typename T>
Model<T>::Model(Model&&) noexcept = default;
template <typename T>
Model<T>& Model<T>::operator=(Model&&) noexcept = default;

template <typename T>
Model<T> Model<T>::build(const NetworkConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    Model m;
    m.layers_ = std::make_unique<Layers>();
    auto& L = *m.layers_;
    L.cfg = cfg;
    const int D = cfg.depth;
    const bool se = cfg.attention == Attention::se;
    auto block_cfg = [&](int in, int out) {
        BlockConfig b;
        b.in_channels = in;
        b.out_channels = out;
        b.kind = cfg.block;
        return b;
    };

    for (int s = 0; s < D; ++s) {
        const int in = s == 0 ? cfg.in_channels : cfg.stage_channels(s - 1);
        L.enc.emplace_back(block_cfg(in, cfg.stage_channels(s)), rng);
        if (se) L.enc_se.emplace_back(cfg.stage_channels(s), cfg.reduction, rng);
    }
    L.up_conv.resize(static_cast<std::size_t>(std::max(0, D - 1)));
    L.up_bn.resize(static_cast<std::size_t>(std::max(0, D - 1)));
    L.dec.resize(static_cast<std::size_t>(std::max(0, D - 1)));
    if (se) L.dec_se.resize(static_cast<std::size_t>(std::max(0, D - 1)));
    for (int s = D - 2; s >= 0; --s) {
        const int ch = cfg.stage_channels(s);
        const auto i = static_cast<std::size_t>(s);
        L.up_conv[i] = Conv2d<T>::make(cfg.stage_channels(s + 1), ch, 3, 1, rng);
        L.up_bn[i] = BatchNorm2d<T>::make(ch);
        L.dec[i] = ConvBlock<T>(block_cfg(cfg.skips.contains(s) ? 2 * ch : ch, ch), rng);
        if (se) L.dec_se[i] = SEBlock<T>(ch, cfg.reduction, rng);
    }
    const bool multi = cfg.fusion != Fusion::single && cfg.n_scales > 1;
    L.align.resize(static_cast<std::size_t>(cfg.n_scales));
    if (multi) {
        for (int s = 0; s < cfg.n_scales; ++s)
            if (cfg.stage_channels(s) != cfg.width)
                L.align[static_cast<std::size_t>(s)] = Conv2d<T>::make(cfg.stage_channels(s), cfg.width, 1, 0, rng);
        if (cfg.fusion == Fusion::adaptive) L.safs.emplace(cfg.n_scales, cfg.width, cfg.reduction, rng);
    }
    L.head = Conv2d<T>::make(cfg.width, 1, 1, 0, rng);

    for (int s = 0; s < D; ++s) {
        const std::string p = "enc.stage" + std::to_string(s);
        L.enc[static_cast<std::size_t>(s)].register_params(L.params, p);
        if (se) L.enc_se[static_cast<std::size_t>(s)].register_params(L.params, p + ".se");
    }
    for (int s = D - 2; s >= 0; --s) {
        const auto i = static_cast<std::size_t>(s);
        const std::string u = "up.stage" + std::to_string(s);
        L.up_conv[i].register_params(L.params, u + ".conv");
        L.up_bn[i].register_params(L.params, u + ".bn");
        const std::string d = "dec.stage" + std::to_string(s);
        L.dec[i].register_params(L.params, d);
        if (se) L.dec_se[i].register_params(L.params, d + ".se");
    }
    for (std::size_t s = 0; s < L.align.size(); ++s)
        if (L.align[s]) L.align[s]->register_params(L.params, "fuse.align" + std::to_string(s));
    if (L.safs) L.safs->register_params(L.params, "safs");
    L.head.register_params(L.params, "head");
    return m;
}

template <typename T>
ForwardOutput<T> Model<T>::forward_detailed(const Tensor<T>& image, Mode mode) {
    auto& L = *layers_;
    const auto& cfg = L.cfg;
    if (image.ndim() != 4 || image.dim(1) != cfg.in_channels || image.dim(2) != cfg.input_height ||
        image.dim(3) != cfg.input_width)
        throw ShapeError("model expects [B," + std::to_string(cfg.in_channels) + "," +
                         std::to_string(cfg.input_height) + "," + std::to_string(cfg.input_width) +
                         "], got " + shape_str(image.shape()));
    const int D = cfg.depth;
    const bool se = cfg.attention == Attention::se;

    std::vector<Tensor<T>> skips;
    Tensor<T> x = image;
    for (int s = 0; s < D; ++s) {
        const auto i = static_cast<std::size_t>(s);
        auto h = L.enc[i].forward(x, mode);
        if (se) h = L.enc_se[i].forward(h);
        if (s < D - 1) {
            skips.push_back(h);
            x = max_pool2(h);
        } else {
            x = h;
        }
    }
    std::vector<Tensor<T>> stage_out(static_cast<std::size_t>(D));
    stage_out[static_cast<std::size_t>(D - 1)] = x;
    for (int s = D - 2; s >= 0; --s) {
        const auto i = static_cast<std::size_t>(s);
        auto u = relu(L.up_bn[i](L.up_conv[i](upsample_bilinear2(x)), mode));
        if (cfg.skips.contains(s)) u = concat<T>({skips[i], u}, 1);
        x = L.dec[i].forward(u, mode);
        if (se) x = L.dec_se[i].forward(x);
        stage_out[i] = x;
    }

    ForwardOutput<T> out;
    Tensor<T> fused;
    if (cfg.fusion == Fusion::single || cfg.n_scales == 1) {
        fused = stage_out[0];
        out.fusion_inputs.push_back(fused);
    } else {
        for (int s = 0; s < cfg.n_scales; ++s) {
            auto m = stage_out[static_cast<std::size_t>(s)];
            if (L.align[static_cast<std::size_t>(s)]) m = (*L.align[static_cast<std::size_t>(s)])(m);
            for (int k = 0; k < s; ++k) m = upsample_bilinear2(m);
            out.fusion_inputs.push_back(m);
        }
        if (cfg.fusion == Fusion::average) {
            fused = avg_fuse(out.fusion_inputs);
        } else {
            auto r = L.safs->forward(out.fusion_inputs);
            fused = r.fused;
            out.safs_weights = r.weights;
        }
    }
    out.probability = sigmoid(L.head(fused));
    return out;
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& image, Mode mode) {
    return forward_detailed(image, mode).probability;
}

template <typename T>
const NetworkConfig& Model<T>::config() const {
    return layers_->cfg;
}

template <typename T>
ParameterSet<T>& Model<T>::parameters() {
    return layers_->params;
}

template <typename T>
const ParameterSet<T>& Model<T>::parameters() const {
    return layers_->params;
}

std::int64_t expected_param_count(const NetworkConfig& cfg) {
    cfg.validate();
    auto conv = [](std::int64_t in, std::int64_t out, std::int64_t k) { return out * in * k * k + out; };
    auto bn = [](std::int64_t c) { return 2 * c; };
    auto lin = [](std::int64_t in, std::int64_t out) { return in * out + out; };
    auto block = [&](std::int64_t in, std::int64_t out) {
        std::int64_t n = conv(in, out, 3) + bn(out) + conv(out, out, 3) + bn(out);
        if (cfg.block == BlockKind::shortcut && in != out) n += conv(in, out, 1) + bn(out);
        return n;
    };
    auto se = [&](std::int64_t c) {
        if (cfg.attention != Attention::se) return std::int64_t{0};
        const std::int64_t h = reduced_dim(static_cast<int>(c), cfg.reduction);
        return lin(c, h) + lin(h, c);
    };
    std::int64_t n = 0;
    for (int s = 0; s < cfg.depth; ++s) {
        const std::int64_t in = s == 0 ? cfg.in_channels : cfg.stage_channels(s - 1);
        n += block(in, cfg.stage_channels(s)) + se(cfg.stage_channels(s));
    }
    for (int s = cfg.depth - 2; s >= 0; --s) {
        const std::int64_t ch = cfg.stage_channels(s);
        n += conv(cfg.stage_channels(s + 1), ch, 3) + bn(ch);
        n += block(cfg.skips.contains(s) ? 2 * ch : ch, ch) + se(ch);
    }
    if (cfg.fusion != Fusion::single && cfg.n_scales > 1) {
        for (int s = 0; s < cfg.n_scales; ++s)
            if (cfg.stage_channels(s) != cfg.width) n += conv(cfg.stage_channels(s), cfg.width, 1);
        if (cfg.fusion == Fusion::adaptive) {
            const std::int64_t h = reduced_dim(cfg.width, cfg.reduction);
            n += lin(cfg.width, h) + cfg.n_scales * lin(h, cfg.width);
        }
    }
    n += conv(cfg.width, 1, 1);
    return n;
}

// ---------------------------------------------------------------------------
// checkpoint
// ---------------------------------------------------------------------------

namespace {
constexpr char kCheckpointMagic[4] = {'S', 'G', 'C', 'K'};

template <typename T>
Tensor<T> to_type(const AnyTensor& any) {
    return std::visit(
        [](const auto& t) {
            std::vector<T> data(t.data().begin(), t.data().end());
            return Tensor<T>(t.shape(), std::move(data));
        },
        any);
}

template <typename T>
void copy_checked(Tensor<T>& dst, const Tensor<T>& src, const std::string& name) {
    if (dst.shape() != src.shape())
        throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(src.shape()) +
                          ", config expects " + shape_str(dst.shape()));
    std::copy(src.data().begin(), src.data().end(), dst.data().begin());
}
}  // namespace

void write_network_config(std::ostream& os, const NetworkConfig& cfg) {
    le::write_u32(os, static_cast<std::uint32_t>(cfg.input_height));
    le::write_u32(os, static_cast<std::uint32_t>(cfg.input_width));
    le::write_u32(os, static_cast<std::uint32_t>(cfg.in_channels));
    le::write_u32(os, static_cast<std::uint32_t>(cfg.depth));
    le::write_u32(os, static_cast<std::uint32_t>(cfg.width));
    le::write_u32(os, cfg.skips.mask);
    le::write_u8(os, static_cast<std::uint8_t>(cfg.block));
    le::write_u8(os, static_cast<std::uint8_t>(cfg.attention));
    le::write_u8(os, static_cast<std::uint8_t>(cfg.fusion));
    le::write_u8(os, static_cast<std::uint8_t>(cfg.n_scales));
    le::write_u32(os, static_cast<std::uint32_t>(cfg.reduction));
}

NetworkConfig read_network_config(std::istream& is) {
    NetworkConfig cfg;
    cfg.input_height = static_cast<int>(le::read_u32(is));
    cfg.input_width = static_cast<int>(le::read_u32(is));
    cfg.in_channels = static_cast<int>(le::read_u32(is));
    cfg.depth = static_cast<int>(le::read_u32(is));
    cfg.width = static_cast<int>(le::read_u32(is));
    cfg.skips.mask = le::read_u32(is);
    const auto block = le::read_u8(is), att = le::read_u8(is), fusion = le::read_u8(is);
    if (block > 1 || att > 1 || fusion > 2) throw FormatError("checkpoint config has an unknown enum value");
    cfg.block = static_cast<BlockKind>(block);
    cfg.attention = static_cast<Attention>(att);
    cfg.fusion = static_cast<Fusion>(fusion);
    cfg.n_scales = le::read_u8(is);
    cfg.reduction = static_cast<int>(le::read_u32(is));
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("checkpoint config: ") + e.what());
    }
    return cfg;
}

template <typename T>
void write_checkpoint(std::ostream& os, const Model<T>& model) {
    os.write(kCheckpointMagic, 4);
    le::write_u16(os, kCheckpointVersion);
    write_network_config(os, model.config());
    const auto& ps = model.parameters();
    le::write_u32(os, static_cast<std::uint32_t>(ps.params().size()));
    for (const auto& p : ps.params()) {
        le::write_string(os, p.name);
        write_tensor(os, p.tensor);
    }
    le::write_u32(os, static_cast<std::uint32_t>(ps.batch_norms().size()));
    for (const auto& [name, st] : ps.batch_norms()) {
        le::write_string(os, name);
        write_tensor(os, st->running_mean);
        write_tensor(os, st->running_var);
    }
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    write_checkpoint(os, model);
    if (!os) throw FormatError("write failed: " + path.string());
}

template <typename T>
Model<T> read_checkpoint(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw FormatError("not a checkpoint (bad magic)");
    const auto version = le::read_u16(is);
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const NetworkConfig cfg = read_network_config(is);
    Model<T> model = Model<T>::build(cfg, 0);
    auto& ps = model.parameters();
    const auto n_params = le::read_u32(is);
    if (n_params != ps.params().size())
        throw FormatError("checkpoint has " + std::to_string(n_params) + " parameters, config implies " +
                          std::to_string(ps.params().size()));
    for (std::uint32_t i = 0; i < n_params; ++i) {
        const std::string name = le::read_string(is);
        auto t = to_type<T>(read_any_tensor(is));
        auto& slot = ps.params()[i];
        if (slot.name != name)
            throw FormatError("checkpoint parameter " + std::to_string(i) + " is '" + name + "', expected '" +
                              slot.name + "'");
        copy_checked(slot.tensor, t, name);
    }
    const auto n_bn = le::read_u32(is);
    if (n_bn != ps.batch_norms().size()) throw FormatError("checkpoint batch-norm count mismatch");
    for (std::uint32_t i = 0; i < n_bn; ++i) {
        const std::string name = le::read_string(is);
        auto& [expected, st] = ps.batch_norms()[i];
        if (name != expected) throw FormatError("checkpoint batch-norm '" + name + "', expected '" + expected + "'");
        copy_checked(st->running_mean, to_type<T>(read_any_tensor(is)), name + ".running_mean");
        copy_checked(st->running_var, to_type<T>(read_any_tensor(is)), name + ".running_var");
        st->populated = true;
    }
    return model;
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint " + path.string());
    return read_checkpoint<T>(is);
}

template class Model<float>;
template class Model<double>;
template void write_checkpoint(std::ostream&, const Model<float>&);
template void write_checkpoint(std::ostream&, const Model<double>&);
template void save_checkpoint(const std::filesystem::path&, const Model<float>&);
template void save_checkpoint(const std::filesystem::path&, const Model<double>&);
template Model<float> read_checkpoint<float>(std::istream&);
template Model<double> read_checkpoint<double>(std::istream&);
template Model<float> load_checkpoint<float>(const std::filesystem::path&);
template Model<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace sgseg
