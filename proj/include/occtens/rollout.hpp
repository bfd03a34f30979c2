#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "occtens/motion.hpp"
#include "occtens/rng.hpp"
#include "occtens/tensformer.hpp"
#include "occtens/tokenizer.hpp"

namespace occtens {

struct SamplingStrategy {
    enum class Kind { greedy, top_k, temperature };
    Kind kind = Kind::greedy;
    int k = 5;
    double tau = 1.0;

    static SamplingStrategy greedy() { return {}; }
    static SamplingStrategy topk(int k, double tau = 1.0) { return {Kind::top_k, k, tau}; }
    static SamplingStrategy temp(double tau) { return {Kind::temperature, 5, tau}; }
};

// One token from one logit row. Greedy takes the argmax (lowest index on
// ties) and never touches the rng; the stochastic strategies consume exactly
// one uniform draw.
int sample(const float* logits, int n, const SamplingStrategy& strategy, Rng& rng);

enum class RolloutMode { plan, control };

struct RolloutRequest {
    WorldModel::TokenSequence history;  // >= 1 tokenized frame
    int horizon = 6;
    RolloutMode mode = RolloutMode::plan;
    std::vector<int> pose_overrides;  // exactly horizon entries iff control
    SamplingStrategy sampling;
    uint64_t seed = 0;
};

struct RolloutResult {
    std::vector<int> pose;                // one token per generated frame
    std::vector<MultiScaleTokenMap> occ;  // one map set per generated frame
};

// One frame: pose first (sampled in plan mode, injected in control mode),
// then scales 1..M, each scale one forward pass with all cells sampled from
// their own logit rows. For models without pose tokens the returned pose is
// -1 and `mode` must be plan.
std::pair<int, MultiScaleTokenMap> generate_next_frame(const WorldModel& model,
                                                       const WorldModel::TokenSequence& context, RolloutMode mode,
                                                       const int* pose_override, const SamplingStrategy& strategy,
                                                       Rng& rng);

// Token-space rollout. Context slides over the most recent frames so the
// layout never exceeds the trained frame count.
RolloutResult rollout(const WorldModel& model, const RolloutRequest& request);

struct DecodedRollout {
    std::vector<SemanticGrid> grids;
    std::vector<std::array<double, 3>> trajectory;  // anchor + one point per frame
};

// Decodes token frames to argmax grids and pose tokens to an absolute
// trajectory anchored at the origin. The tokenizer must be the one the model
// was built against (hash-checked).
DecodedRollout decode_rollout(const SceneTokenizer& tokenizer, const WorldModel& model,
                              const std::vector<MultiScaleTokenMap>& token_frames,
                              const std::vector<int>& pose_tokens, double cell_size);

}  // namespace occtens
