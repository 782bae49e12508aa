#include "sgseg/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace sgseg {

template <typename T>
void ParameterSet<T>::add(const std::string& name, Tensor<T> tensor, bool trainable) {
    if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    tensor.set_requires_grad(trainable);
    params_.push_back({name, std::move(tensor), trainable});
}

template <typename T>
void ParameterSet<T>::add_batch_norm(const std::string& name, BatchNormState<T>* state) {
    for (auto& [n, s] : bns_)
        if (n == name) throw std::invalid_argument("duplicate batch-norm name: " + name);
    bns_.emplace_back(name, state);
}

template <typename T>
const Parameter<T>* ParameterSet<T>::find(const std::string& name) const {
    for (auto& p : params_)
        if (p.name == name) return &p;
    return nullptr;
}

template <typename T>
std::int64_t ParameterSet<T>::scalar_count(bool trainable_only) const {
    std::int64_t n = 0;
    for (auto& p : params_)
        if (p.trainable || !trainable_only) n += p.tensor.numel();
    return n;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
Tensor<T> kaiming_normal(const Shape& shape, std::int64_t fan_in, Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(std::max<std::int64_t>(fan_in, 1)));
    std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : data) v = static_cast<T>(rng.normal(0.0, stddev));
    return Tensor<T>(shape, std::move(data));
}

template <typename T>
Conv2d<T> Conv2d<T>::make(int in_channels, int out_channels, int kernel, int pad, Rng& rng) {
    Conv2d c;
    c.weight = kaiming_normal<T>({out_channels, in_channels, kernel, kernel},
                                 static_cast<std::int64_t>(in_channels) * kernel * kernel, rng);
    c.bias = Tensor<T>::zeros({out_channels});
    c.pad = pad;
    return c;
}

template <typename T>
void Conv2d<T>::register_params(ParameterSet<T>& ps, const std::string& prefix) const {
    ps.add(prefix + ".weight", weight);
    ps.add(prefix + ".bias", bias);
}

template <typename T>
BatchNorm2d<T> BatchNorm2d<T>::make(int channels) {
    BatchNorm2d b;
    b.gamma = Tensor<T>::full({channels}, T(1));
    b.beta = Tensor<T>::zeros({channels});
    b.state.running_mean = Tensor<T>::zeros({channels});
    b.state.running_var = Tensor<T>::full({channels}, T(1));
    b.state.populated = true;
    return b;
}

template <typename T>
void BatchNorm2d<T>::register_params(ParameterSet<T>& ps, const std::string& prefix) {
    ps.add(prefix + ".gamma", gamma);
    ps.add(prefix + ".beta", beta);
    ps.add_batch_norm(prefix, &state);
}

template <typename T>
Linear<T> Linear<T>::make(int in_features, int out_features, Rng& rng) {
    Linear l;
    l.weight = kaiming_normal<T>({out_features, in_features}, in_features, rng);
    l.bias = Tensor<T>::zeros({out_features});
    return l;
}

template <typename T>
void Linear<T>::register_params(ParameterSet<T>& ps, const std::string& prefix) const {
    ps.add(prefix + ".weight", weight);
    ps.add(prefix + ".bias", bias);
}

void BlockConfig::validate() const {
    if (in_channels < 1 || out_channels < 1) throw std::invalid_argument("block channels must be >= 1");
    if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("block kernel must be odd");
    if (padding != (kernel - 1) / 2)
        throw std::invalid_argument("block padding must be (kernel - 1) / 2 to preserve size");
}

template <typename T>
ConvBlock<T>::ConvBlock(const BlockConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    conv1 = Conv2d<T>::make(cfg.in_channels, cfg.out_channels, cfg.kernel, cfg.padding, rng);
    bn1 = BatchNorm2d<T>::make(cfg.out_channels);
    conv2 = Conv2d<T>::make(cfg.out_channels, cfg.out_channels, cfg.kernel, cfg.padding, rng);
    bn2 = BatchNorm2d<T>::make(cfg.out_channels);
    if (cfg.kind == BlockKind::shortcut && cfg.in_channels != cfg.out_channels) {
        has_projection = true;
        proj = Conv2d<T>::make(cfg.in_channels, cfg.out_channels, 1, 0, rng);
        proj_bn = BatchNorm2d<T>::make(cfg.out_channels);
    }
}

template <typename T>
Tensor<T> ConvBlock<T>::forward(const Tensor<T>& x, Mode mode) {
    if (x.ndim() != 4 || x.dim(1) != cfg_.in_channels)
        throw ShapeError("conv block expects [B," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                         shape_str(x.shape()));
    auto h = relu(bn1(conv1(x), mode));
    auto pre = bn2(conv2(h), mode);
    if (cfg_.kind == BlockKind::basic) return relu(pre);
    auto skip = has_projection ? proj_bn(proj(x), mode) : x;
    return relu(add(pre, skip));
}

template <typename T>
void ConvBlock<T>::register_params(ParameterSet<T>& ps, const std::string& prefix) {
    conv1.register_params(ps, prefix + ".conv1");
    bn1.register_params(ps, prefix + ".bn1");
    conv2.register_params(ps, prefix + ".conv2");
    bn2.register_params(ps, prefix + ".bn2");
    if (has_projection) {
        proj.register_params(ps, prefix + ".proj");
        proj_bn.register_params(ps, prefix + ".proj_bn");
    }
}

template <typename T>
Tensor<T> basic_block(ConvBlock<T>& block, const Tensor<T>& x, Mode mode) {
    if (block.config().kind != BlockKind::basic) throw std::invalid_argument("block is not a basic block");
    return block.forward(x, mode);
}

template <typename T>
Tensor<T> shortcut_block(ConvBlock<T>& block, const Tensor<T>& x, Mode mode) {
    if (block.config().kind != BlockKind::shortcut)
        throw std::invalid_argument("block is not a shortcut block");
    return block.forward(x, mode);
}

int reduced_dim(int channels, int reduction) {
    if (channels < 1 || reduction < 1) throw std::invalid_argument("channels and reduction must be >= 1");
    return std::max(1, (channels + reduction - 1) / reduction);
}

template <typename T>
SEBlock<T>::SEBlock(int channels, int reduction, Rng& rng) {
    const int hidden = reduced_dim(channels, reduction);
    fc1 = Linear<T>::make(channels, hidden, rng);
    fc2 = Linear<T>::make(hidden, channels, rng);
}

template <typename T>
Tensor<T> SEBlock<T>::forward(const Tensor<T>& features) const {
    auto p = global_avg_pool(features);
    auto s = sigmoid(fc2(relu(fc1(p))));
    return scale_channels(features, s);
}

template <typename T>
void SEBlock<T>::register_params(ParameterSet<T>& ps, const std::string& prefix) const {
    fc1.register_params(ps, prefix + ".fc1");
    fc2.register_params(ps, prefix + ".fc2");
}

template <typename T>
Tensor<T> avg_fuse(const std::vector<Tensor<T>>& maps) {
    if (maps.empty()) throw std::invalid_argument("avg_fuse: no maps");
    if (maps.size() == 1) {
        return maps.front();
    }
    return div_scalar(add_n(maps), static_cast<T>(maps.size()));
}

template <typename T>
SafsWeights SafsResult<T>::weights_of(std::int64_t batch_index) const {
    SafsWeights w;
    const bool batched = weights.ndim() == 3;
    w.branches = static_cast<int>(weights.dim(batched ? 1 : 0));
    w.channels = static_cast<int>(weights.dim(batched ? 2 : 1));
    const std::int64_t per = static_cast<std::int64_t>(w.branches) * w.channels;
    const std::int64_t off = batched ? batch_index * per : 0;
    w.q.assign(weights.data().begin() + off, weights.data().begin() + off + per);
    return w;
}

template <typename T>
SafsModule<T>::SafsModule(int branches, int channels, int reduction, Rng& rng)
    : channels_(channels), reduction_(reduction) {
    if (branches < 1) throw std::invalid_argument("SAFS needs at least one branch");
    const int hidden = reduced_dim(channels, reduction);
    reduce = Linear<T>::make(channels, hidden, rng);
    for (int i = 0; i < branches; ++i) branch_fcs.push_back(Linear<T>::make(hidden, channels, rng));
}

template <typename T>
SafsResult<T> SafsModule<T>::forward(const std::vector<Tensor<T>>& maps) const {
    if (maps.empty()) throw std::invalid_argument("safs_fuse: no maps");
    if (maps.size() != branch_fcs.size())
        throw std::invalid_argument("safs_fuse: got " + std::to_string(maps.size()) + " maps for " +
                                    std::to_string(branch_fcs.size()) + " branches");
    for (auto& m : maps)
        if (m.shape() != maps.front().shape())
            throw ShapeError("safs_fuse: map shape mismatch " + shape_str(m.shape()) + " vs " +
                             shape_str(maps.front().shape()));
    const auto& s = maps.front().shape();
    if (s.size() < 3 || s[s.size() - 3] != channels_)
        throw ShapeError("safs_fuse: expected " + std::to_string(channels_) + " channels, got " +
                         shape_str(s));
    const bool batched = s.size() == 4;
    const int branch_axis = batched ? 1 : 0;

    SafsResult<T> r;
    auto united = add_n(maps);
    r.pooled = global_avg_pool(united);
    r.reduced = relu(reduce(r.pooled));
    std::vector<Tensor<T>> logits;
    logits.reserve(branch_fcs.size());
    for (auto& fc : branch_fcs) logits.push_back(mlp_branch(fc, r.reduced));
    r.logits = stack(logits, branch_axis);
    r.weights = softmax(r.logits, branch_axis);
    std::vector<Tensor<T>> weighted;
    weighted.reserve(maps.size());
    for (std::size_t i = 0; i < maps.size(); ++i)
        weighted.push_back(scale_channels(maps[i], select(r.weights, branch_axis, static_cast<std::int64_t>(i))));
    r.fused = add_n(weighted);
    return r;
}

template <typename T>
void SafsModule<T>::register_params(ParameterSet<T>& ps, const std::string& prefix) const {
    reduce.register_params(ps, prefix + ".reduce");
    for (std::size_t i = 0; i < branch_fcs.size(); ++i)
        branch_fcs[i].register_params(ps, prefix + ".branch" + std::to_string(i));
}

#define SGSEG_INSTANTIATE_BLOCKS(T)                                                  \
    template class ParameterSet<T>;                                                  \
    template Tensor<T> kaiming_normal<T>(const Shape&, std::int64_t, Rng&);          \
    template struct Conv2d<T>;                                                       \
    template struct BatchNorm2d<T>;                                                  \
    template struct Linear<T>;                                                       \
    template class ConvBlock<T>;                                                     \
    template Tensor<T> basic_block(ConvBlock<T>&, const Tensor<T>&, Mode);           \
    template Tensor<T> shortcut_block(ConvBlock<T>&, const Tensor<T>&, Mode);        \
    template class SEBlock<T>;                                                       \
    template Tensor<T> avg_fuse(const std::vector<Tensor<T>>&);                      \
    template struct SafsResult<T>;                                                   \
    template class SafsModule<T>;

SGSEG_INSTANTIATE_BLOCKS(float)
SGSEG_INSTANTIATE_BLOCKS(double)

#undef SGSEG_INSTANTIATE_BLOCKS

}  // namespace sgseg
