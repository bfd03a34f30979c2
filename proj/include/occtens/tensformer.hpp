#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "occtens/autodiff.hpp"
#include "occtens/losses.hpp"
#include "occtens/motion.hpp"
#include "occtens/tokenizer.hpp"

namespace occtens {

// Token ordering: index 0 is the single BOS, then frames in time order; each
// frame starts with its pose token (scale slot m=0) followed by the occupancy
// scale blocks m=1..M in row-major spatial order.
struct SequenceLayout {
    struct Coord {
        int t = -1, m = -1, pos = 0;  // BOS is (-1,-1,0)
        bool operator==(const Coord&) const = default;
    };

    int frames = 0;
    std::vector<int> scales;
    bool include_pose = true;
    int tokens_per_frame = 0;  // N_f
    int length = 0;            // 1 + frames * N_f
    std::vector<Coord> coords;

    int frame_start(int t) const;           // sequence index of frame t's first token
    int block_start(int t, int m) const;    // first token of scale block m in frame t
    int block_size(int m) const;            // 1 for pose, s_m^2 otherwise
    int index_of(int t, int m, int pos) const;
};

SequenceLayout build_layout(int frames, const std::vector<int>& scales, bool include_pose);

// Dense row-major L x L mask, true = query row may attend to key column.
using AttentionMask = std::shared_ptr<const std::vector<uint8_t>>;

// Causal along time within each scale column; pose tokens see past poses.
AttentionMask build_temporal_scale_mask(const SequenceLayout& lay);
// The paper prose's literal attend set: everything from earlier frames plus
// the same frame's blocks up to and including one's own.
AttentionMask build_temporal_literal_mask(const SequenceLayout& lay);
// Bidirectional within each frame, never across frames.
AttentionMask build_frame_spatial_mask(const SequenceLayout& lay);
// Block-wise causal prefix: earlier frames, same-frame blocks m' <= m.
AttentionMask build_generation_mask(const SequenceLayout& lay);
// Generation mask restricted to the first `upto` positions.
AttentionMask build_generation_mask_prefix(const SequenceLayout& lay, int upto);

// Interleaved sin/cos vector: pair i holds (sin, cos) of idx / 10000^(2i/d).
std::vector<float> sinusoid(int idx, int dim);
// Per-position sum of position/scale/time sinusoids; the BOS row is zero.
Tensor sinusoid_table(const SequenceLayout& lay, int dim);

struct ModelConfig {
    int hidden = 64;
    int heads = 4;
    int layers_temporal = 2, layers_spatial = 2, layers_gen = 2;
    int occ_vocab = 512;
    PoseVocab pose_bins;
    std::vector<int> scales{1, 2, 4, 8};
    int frames = 10;
    int code_dim = 32;
    int latent_h = 8, latent_w = 8;
    bool include_pose = true;
    std::string temporal_mask = "scale";  // or "literal"

    int pose_vocab() const { return pose_bins.size(); }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

std::string model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

// The TENSFormer world model: scene-by-scene prediction (temporal block +
// spatial block) produces guidance features, and the generation block decodes
// next-scale token logits under the block-wise causal mask. The tokenizer's
// codebook is captured frozen for building partial-reconstruction inputs.
class WorldModel {
  public:
    WorldModel(ModelConfig cfg, const SceneTokenizer& tokenizer, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ad::ParamStore& params() { return ps_; }
    const ad::ParamStore& params() const { return ps_; }
    uint64_t tokenizer_hash() const { return tokenizer_hash_; }
    const SequenceLayout& train_layout() const { return layout_; }

    struct TokenSequence {
        std::vector<int> pose;                // one token per frame
        std::vector<MultiScaleTokenMap> occ;  // one map set per frame
    };

    // Layout-aligned flat ids; the BOS slot holds 0. Validates vocab ranges.
    std::vector<int> flatten_tokens(const TokenSequence& seq, const SequenceLayout& lay) const;

    // graph builders; train=false swaps parameter leaves for constant views so
    // inference graphs carry no backward state
    ad::NodeRef embed_graph(const std::vector<int>& tokens, const SequenceLayout& lay, bool train) const;
    ad::NodeRef temporal_graph(const ad::NodeRef& x, const SequenceLayout& lay, bool train) const;
    ad::NodeRef spatial_graph(const ad::NodeRef& x, const SequenceLayout& lay, bool train) const;
    ad::NodeRef scene_graph(const std::vector<int>& tokens, const SequenceLayout& lay, bool train) const;
    // features after the generation stack and its output norm, rows [0, upto);
    // upto must land on a block boundary
    ad::NodeRef gen_graph(const ad::NodeRef& guidance, const std::vector<int>& tokens, const SequenceLayout& lay,
                          int upto, bool train) const;

    struct TeacherLogits {
        Tensor occ;   // [frames * sum(s^2), occ_vocab], layout order
        Tensor pose;  // [frames, pose_vocab]
    };
    TeacherLogits teacher_logits(const TokenSequence& seq) const;

    Tensor scene_guidance(const std::vector<int>& tokens, const SequenceLayout& lay) const;  // [L, hidden]
    // Logits for one block: pose rows [1, pose_vocab] at m=0, occupancy rows
    // [s_m^2, occ_vocab] at m>=1. `tokens` must fill every position before the
    // block; `guidance` may come from a shorter (context-only) layout.
    Tensor block_logits(const Tensor& guidance, const std::vector<int>& tokens, const SequenceLayout& lay, int t,
                        int m) const;

    struct TrainGraph {
        ad::NodeRef loss;
        losses::WorldModelLossBreakdown breakdown;
    };
    TrainGraph training_graph(const TokenSequence& seq, const losses::LossWeights& w) const;

    void save(const std::string& path) const;
    static WorldModel load(const std::string& path, const SceneTokenizer& tokenizer);

  private:
    explicit WorldModel(ModelConfig cfg);  // params registered, values unset
    void register_params(Rng* rng);
    void adopt_tokenizer(const SceneTokenizer& tokenizer);
    ad::NodeRef leaf(int pid, bool train) const;
    ad::NodeRef transformer_layer(const ad::NodeRef& x, const std::string& prefix, const AttentionMask& mask,
                                  bool train) const;
    ad::NodeRef stack(const ad::NodeRef& x, const std::string& block, int layers, const AttentionMask& mask,
                      bool train) const;
    // constant partial-reconstruction context rows for scale m>=2 of a frame
    Tensor frame_context(const MultiScaleTokenMap& frame_tokens, int upto_scale_m) const;

    ModelConfig cfg_;
    ad::ParamStore ps_;
    SequenceLayout layout_;
    Tensor codebook_;          // frozen copy from the tokenizer
    ScaleMaps scale_maps_;     // scale <-> latent resolution
    std::vector<ResizeMap> ctx_maps_;  // latent resolution -> each scale
    uint64_t tokenizer_hash_ = 0;
};

}  // namespace occtens
