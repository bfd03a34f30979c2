#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "occtens/autodiff.hpp"
#include "occtens/bilinear.hpp"
#include "occtens/losses.hpp"
#include "occtens/rng.hpp"
#include "occtens/tensor.hpp"
#include "occtens/world.hpp"

namespace occtens {

struct TokenizerConfig {
    int grid_x = 32, grid_y = 32, grid_z = 4;
    int class_count = 5;
    int downsample = 4;
    int vocab = 512;     // V
    int code_dim = 32;   // C
    int hidden = 32;     // conv width
    std::vector<int> scales{1, 2, 4, 8};
    bool frozen_zero = true;

    int latent_h() const { return grid_x / downsample; }
    int latent_w() const { return grid_y / downsample; }
    int folded_channels() const { return grid_z * class_count; }
    int tokens_per_frame() const;
    void validate() const;  // throws ConfigError
    bool operator==(const TokenizerConfig&) const = default;
};

// M token maps at strictly increasing side lengths; maps[m] holds scales[m]^2
// codebook indices in row-major order.
struct MultiScaleTokenMap {
    std::vector<int> scales;
    std::vector<std::vector<int>> maps;

    int total() const;
    bool operator==(const MultiScaleTokenMap&) const = default;
};

// Shared bilinear up-maps and their normalized adjoints (tent-weighted
// averaging) between each scale and the full latent resolution.
struct ScaleMaps {
    std::vector<int> scales;
    int h = 0, w = 0;
    std::vector<ResizeMap> up, down;
};

ScaleMaps build_scale_maps(const std::vector<int>& scales, int h, int w);

// Uniform init in [-0.5, 0.5]; row 0 zeroed when frozen_zero; entries are
// redrawn until no two rows are bit-identical.
Tensor init_codebook(int vocab, int code_dim, bool frozen_zero, Rng& rng);

// Brute-force argmin of squared distance, lowest index on ties.
int nearest_code(const Tensor& codebook, const float* vec);

struct QuantizeResult {
    MultiScaleTokenMap tokens;
    Tensor recon;                     // [H,W,C] sum of upsampled contributions
    Tensor residual;                  // [H,W,C] what remains after the last scale
    std::vector<Tensor> downsampled;  // per scale [s,s,C], pre-quantization
};

// Residual next-scale quantization: r <- latent; per scale downsample r,
// snap each cell to its nearest code, upsample the looked-up vectors and
// subtract. latent - recon equals the final residual up to float reassociation.
QuantizeResult quantize_multiscale(const Tensor& codebook, const ScaleMaps& maps, const Tensor& latent);

// Sum of upsampled codebook lookups, accumulated in the same scale order as
// quantize_multiscale so the two reconstructions are bit-identical.
Tensor dequantize(const Tensor& codebook, const ScaleMaps& maps, const MultiScaleTokenMap& tokens);

class SceneTokenizer {
  public:
    SceneTokenizer(TokenizerConfig cfg, uint64_t seed);

    const TokenizerConfig& config() const { return cfg_; }
    ad::ParamStore& params() { return ps_; }
    const ad::ParamStore& params() const { return ps_; }
    const Tensor& codebook() const { return ps_.values[static_cast<size_t>(codebook_pid_)]; }
    int codebook_pid() const { return codebook_pid_; }
    const ScaleMaps& scale_maps() const { return maps_; }

    // One-hot labels with Z and K merged into channels: channel z*K + k.
    static Tensor fold_height(const SemanticGrid& grid);  // [X, Y, Z*K]

    int nearest(const float* vec) const { return nearest_code(codebook(), vec); }
    QuantizeResult quantize(const Tensor& latent) const { return quantize_multiscale(codebook(), maps_, latent); }
    Tensor dequantize_tokens(const MultiScaleTokenMap& tokens) const {
        return ::occtens::dequantize(codebook(), maps_, tokens);
    }

    ad::NodeRef encode_graph(const ad::NodeRef& folded) const;
    ad::NodeRef decode_graph(const ad::NodeRef& latent) const;  // [X*Y*Z, K] logits

    Tensor encode(const SemanticGrid& grid) const;        // [H,W,C]
    Tensor decode_logits(const Tensor& latent) const;     // [X*Y*Z, K]
    SemanticGrid decode_grid(const Tensor& latent, double cell_size) const;
    MultiScaleTokenMap tokenize(const SemanticGrid& grid) const;
    SemanticGrid detokenize(const MultiScaleTokenMap& tokens, double cell_size) const;

    struct TrainGraph {
        ad::NodeRef loss;
        losses::TokenizerLossBreakdown breakdown;
        MultiScaleTokenMap tokens;
    };
    TrainGraph training_graph(const SemanticGrid& grid, const losses::LossWeights& w) const;

    void save(const std::string& path) const;
    static SceneTokenizer load(const std::string& path);
    // FNV-1a over config echo + parameter bytes; world-model checkpoints and
    // token caches pin the tokenizer they were built against.
    uint64_t param_hash() const;

  private:
    explicit SceneTokenizer(TokenizerConfig cfg);  // params registered, values unset

    void register_params(Rng* rng);

    TokenizerConfig cfg_;
    ad::ParamStore ps_;
    std::vector<int> enc_w_, enc_b_, enc_stride_;
    std::vector<int> dec_w_, dec_b_;
    std::vector<uint8_t> dec_up_before_;
    int codebook_pid_ = -1;
    ScaleMaps maps_;
};

std::string tokenizer_config_json(const TokenizerConfig& cfg);
TokenizerConfig tokenizer_config_from_json(const std::string& text);

}  // namespace occtens
