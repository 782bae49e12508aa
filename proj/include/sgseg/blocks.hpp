#pragma once

// Building blocks of the segmentation network: convolutional blocks (plain
// and residual), squeeze-and-excitation channel attention, average
// multi-scale fusion and scale-adaptive feature selection (SAFS).

#include <string>
#include <vector>

#include "sgseg/ops.hpp"
#include "sgseg/rng.hpp"

namespace sgseg {

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
};

// Ordered, uniquely named parameter list plus the batch-norm states that
// travel with a model in checkpoints.
template <typename T>
class ParameterSet {
public:
    void add(const std::string& name, Tensor<T> tensor, bool trainable = true);
    void add_batch_norm(const std::string& name, BatchNormState<T>* state);

    const std::vector<Parameter<T>>& params() const { return params_; }
    std::vector<Parameter<T>>& params() { return params_; }
    const std::vector<std::pair<std::string, BatchNormState<T>*>>& batch_norms() const { return bns_; }

    const Parameter<T>* find(const std::string& name) const;
    std::int64_t scalar_count(bool trainable_only = true) const;
    void zero_grad();

private:
    std::vector<Parameter<T>> params_;
    std::vector<std::pair<std::string, BatchNormState<T>*>> bns_;
};

// Kaiming-normal fan-in init for conv / fc weights.
template <typename T>
Tensor<T> kaiming_normal(const Shape& shape, std::int64_t fan_in, Rng& rng);

template <typename T>
struct Conv2d {
    Tensor<T> weight;  // [out, in, k, k]
    Tensor<T> bias;    // [out]
    int stride = 1;
    int pad = 0;

    static Conv2d make(int in_channels, int out_channels, int kernel, int pad, Rng& rng);
    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }
    void register_params(ParameterSet<T>& ps, const std::string& prefix) const;
};

template <typename T>
struct BatchNorm2d {
    Tensor<T> gamma;
    Tensor<T> beta;
    BatchNormState<T> state;

    static BatchNorm2d make(int channels);
    Tensor<T> operator()(const Tensor<T>& x, Mode mode) { return batch_norm(x, gamma, beta, state, mode); }
    void register_params(ParameterSet<T>& ps, const std::string& prefix);
};

template <typename T>
struct Linear {
    Tensor<T> weight;  // [out, in]
    Tensor<T> bias;    // [out]

    static Linear make(int in_features, int out_features, Rng& rng);
    Tensor<T> operator()(const Tensor<T>& x) const { return fully_connected(x, weight, bias); }
    void register_params(ParameterSet<T>& ps, const std::string& prefix) const;
};

enum class BlockKind { basic, shortcut };

struct BlockConfig {
    int in_channels = 0;
    int out_channels = 0;
    BlockKind kind = BlockKind::basic;
    int kernel = 3;
    int padding = 1;

    // Throws std::invalid_argument when kernel is even or padding does not
    // preserve the spatial size.
    void validate() const;
};

// Two (conv -> BN -> ReLU) stages. The shortcut kind adds the input (via a
// 1x1 conv + BN projection when channel counts differ) before the last ReLU.
template <typename T>
class ConvBlock {
public:
    ConvBlock() = default;
    ConvBlock(const BlockConfig& cfg, Rng& rng);

    Tensor<T> forward(const Tensor<T>& x, Mode mode);
    const BlockConfig& config() const { return cfg_; }
    void register_params(ParameterSet<T>& ps, const std::string& prefix);

    Conv2d<T> conv1, conv2;
    BatchNorm2d<T> bn1, bn2;
    bool has_projection = false;
    Conv2d<T> proj;
    BatchNorm2d<T> proj_bn;

private:
    BlockConfig cfg_;
};

template <typename T>
Tensor<T> basic_block(ConvBlock<T>& block, const Tensor<T>& x, Mode mode);
template <typename T>
Tensor<T> shortcut_block(ConvBlock<T>& block, const Tensor<T>& x, Mode mode);

int reduced_dim(int channels, int reduction);

// Squeeze-and-excitation: GAP -> FC(C -> C/r) -> ReLU -> FC(C/r -> C) ->
// sigmoid -> per-channel rescale.
template <typename T>
class SEBlock {
public:
    SEBlock() = default;
    SEBlock(int channels, int reduction, Rng& rng);

    Tensor<T> forward(const Tensor<T>& features) const;
    void register_params(ParameterSet<T>& ps, const std::string& prefix) const;

    Linear<T> fc1, fc2;
};

template <typename T>
Tensor<T> se_block(const SEBlock<T>& se, const Tensor<T>& features) {
    return se.forward(features);
}

// Elementwise mean of same-shape maps.
template <typename T>
Tensor<T> avg_fuse(const std::vector<Tensor<T>>& maps);

// Branch-by-channel attention weights; each column sums to 1.
struct SafsWeights {
    int branches = 0;
    int channels = 0;
    std::vector<double> q;  // row-major [branches x channels]

    double at(int branch, int channel) const {
        return q[static_cast<std::size_t>(branch) * channels + channel];
    }
};

template <typename T>
struct SafsResult {
    Tensor<T> fused;    // same shape as each input map
    Tensor<T> weights;  // [n, C] or [B, n, C]
    Tensor<T> pooled;   // channel statistics p
    Tensor<T> reduced;  // z
    Tensor<T> logits;   // z' stacked, same layout as weights

    // Weights for one batch item as a plain matrix.
    SafsWeights weights_of(std::int64_t batch_index = 0) const;
};

// Scale-adaptive feature selection. One shared reduction FC (C -> C/r,
// followed by ReLU) feeds n per-branch FCs (C/r -> C); a softmax across
// branches yields per-channel convex weights for the input maps.
template <typename T>
class SafsModule {
public:
    SafsModule() = default;
    SafsModule(int branches, int channels, int reduction, Rng& rng);

    SafsResult<T> forward(const std::vector<Tensor<T>>& maps) const;
    void register_params(ParameterSet<T>& ps, const std::string& prefix) const;

    int branches() const { return static_cast<int>(branch_fcs.size()); }
    int channels() const { return channels_; }
    int reduction() const { return reduction_; }

    Linear<T> reduce;
    std::vector<Linear<T>> branch_fcs;

private:
    int channels_ = 0;
    int reduction_ = 8;
};

template <typename T>
SafsResult<T> safs_fuse(const SafsModule<T>& module, const std::vector<Tensor<T>>& maps) {
    return module.forward(maps);
}

// One per-branch projection of the reduced code z back to C logits.
template <typename T>
Tensor<T> mlp_branch(const Linear<T>& branch, const Tensor<T>& z) {
    return branch(z);
}

}  // namespace sgseg
