#pragma once

// Encoder-decoder segmentation network with configurable resolution, depth,
// width, skip-connection subset, block kind, channel attention and
// multi-scale fusion.
//
// Depth counts resolution stages: a depth-D network has D-1 down-sampling
// units (2x2 max pool), a bottleneck at 1/2^(D-1) and D-1 decoder stages.
// Stage s carries width * 2^min(s, 4) channels.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>

#include "sgseg/blocks.hpp"

namespace sgseg {

enum class Attention { none, se };
enum class Fusion { single, average, adaptive };

std::string to_string(BlockKind k);
std::string to_string(Attention a);
std::string to_string(Fusion f);
BlockKind parse_block_kind(const std::string& s);
Attention parse_attention(const std::string& s);
Fusion parse_fusion(const std::string& s);

// Set of decoder resolutions that receive an encoder skip connection.
// Bit s stands for resolution 1/2^s (bit 0 = 1/1, bit 3 = 1/8).
struct SkipSet {
    std::uint32_t mask = 0xFFFFFFFFu;

    static SkipSet all() { return {0xFFFFFFFFu}; }
    static SkipSet none() { return {0u}; }
    // "all", "none", or fractions joined by '+', e.g. "1/8+1/4+1/2+1/1".
    static SkipSet parse(const std::string& text);
    bool contains(int stage) const { return (mask >> stage) & 1u; }
    SkipSet without(int stage) const { return {mask & ~(1u << stage)}; }
    // Canonical text for a network of the given depth.
    std::string to_string(int depth) const;
};

struct NetworkConfig {
    int input_height = 64;
    int input_width = 64;
    int in_channels = 3;
    int depth = 3;
    int width = 8;
    SkipSet skips = SkipSet::all();
    BlockKind block = BlockKind::basic;
    Attention attention = Attention::none;
    Fusion fusion = Fusion::single;
    int n_scales = 1;
    int reduction = 8;

    int stage_channels(int stage) const;
    // Throws std::invalid_argument with a descriptive message.
    void validate() const;
};

template <typename T>
struct ForwardOutput {
    Tensor<T> probability;                  // [B,1,H,W]
    std::vector<Tensor<T>> fusion_inputs;   // aligned maps fed to the fusion
    std::optional<Tensor<T>> safs_weights;  // [B,n,C] for adaptive fusion
};

template <typename T>
class Model {
public:
    Model();
    ~Model();
    Model(Model&&) noexcept;
    Model& operator=(Model&&) noexcept;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    static Model build(const NetworkConfig& cfg, std::uint64_t seed);

    Tensor<T> forward(const Tensor<T>& image, Mode mode);
    ForwardOutput<T> forward_detailed(const Tensor<T>& image, Mode mode);

    const NetworkConfig& config() const;
    ParameterSet<T>& parameters();
    const ParameterSet<T>& parameters() const;

private:
    struct Layers;
    std::unique_ptr<Layers> layers_;
};

template <typename T>
std::int64_t param_count(const Model<T>& model) {
    return model.parameters().scalar_count(true);
}

// Closed-form trainable parameter count for a config (no allocation).
std::int64_t expected_param_count(const NetworkConfig& cfg);

// Checkpoint: "SGCK" | version u16 | config record | u32 param count |
// (name, raw tensor)* | u32 bn count | (name, mean tensor, var tensor)*.
inline constexpr std::uint16_t kCheckpointVersion = 1;

template <typename T>
void write_checkpoint(std::ostream& os, const Model<T>& model);
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model);
template <typename T>
Model<T> read_checkpoint(std::istream& is);
template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path);

void write_network_config(std::ostream& os, const NetworkConfig& cfg);
NetworkConfig read_network_config(std::istream& is);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace sgseg
