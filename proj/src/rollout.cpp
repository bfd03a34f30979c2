#include "occtens/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "occtens/common.hpp"

namespace occtens {

int sample(const float* logits, int n, const SamplingStrategy& strategy, Rng& rng) {
    if (n < 1) throw ConfigError("sample: empty logit row");
    for (int i = 0; i < n; ++i)
        if (!std::isfinite(logits[i])) throw NumericError("sample: non-finite logit");

    if (strategy.kind == SamplingStrategy::Kind::greedy) {
        int best = 0;
        for (int i = 1; i < n; ++i)
            if (logits[i] > logits[best]) best = i;
        return best;
    }
    if (strategy.tau <= 0.0) throw ConfigError("sample: temperature must be positive");

    std::vector<int> pool(static_cast<size_t>(n));
    std::iota(pool.begin(), pool.end(), 0);
    if (strategy.kind == SamplingStrategy::Kind::top_k) {
        if (strategy.k < 1) throw ConfigError("sample: top_k needs k >= 1");
        int keep = std::min(strategy.k, n);
        std::stable_sort(pool.begin(), pool.end(), [&](int a, int b) { return logits[a] > logits[b]; });
        pool.resize(static_cast<size_t>(keep));
    }

    double max_l = logits[pool[0]];
    for (int i : pool) max_l = std::max(max_l, static_cast<double>(logits[i]));
    std::vector<double> p(pool.size());
    double z = 0.0;
    for (size_t i = 0; i < pool.size(); ++i) {
        p[i] = std::exp((logits[pool[i]] - max_l) / strategy.tau);
        z += p[i];
    }
    double u = rng.uniform() * z;
    double acc = 0.0;
    for (size_t i = 0; i < pool.size(); ++i) {
        acc += p[i];
        if (u < acc) return pool[i];
    }
    return pool.back();  // u landed on the rounding edge
}

namespace {

MultiScaleTokenMap placeholder_map(const std::vector<int>& scales) {
    MultiScaleTokenMap m;
    m.scales = scales;
    for (int s : scales) m.maps.emplace_back(static_cast<size_t>(s) * s, 0);
    return m;
}

}  // namespace

std::pair<int, MultiScaleTokenMap> generate_next_frame(const WorldModel& model,
                                                       const WorldModel::TokenSequence& context, RolloutMode mode,
                                                       const int* pose_override, const SamplingStrategy& strategy,
                                                       Rng& rng) {
    const ModelConfig& cfg = model.config();
    int n_ctx = static_cast<int>(context.occ.size());
    if (n_ctx < 1) throw ConfigError("generate_next_frame: empty context");
    if (mode == RolloutMode::control && pose_override == nullptr)
        throw ConfigError("generate_next_frame: control mode needs a pose override");
    if (mode == RolloutMode::plan && pose_override != nullptr)
        throw ConfigError("generate_next_frame: plan mode forbids a pose override");
    if (mode == RolloutMode::control && !cfg.include_pose)
        throw ConfigError("generate_next_frame: model has no pose tokens to control");

    SequenceLayout ctx_lay = build_layout(n_ctx, cfg.scales, cfg.include_pose);
    Tensor guidance = model.scene_guidance(model.flatten_tokens(context, ctx_lay), ctx_lay);

    SequenceLayout lay = build_layout(n_ctx + 1, cfg.scales, cfg.include_pose);
    WorldModel::TokenSequence extended = context;
    if (cfg.include_pose) extended.pose.push_back(0);
    extended.occ.push_back(placeholder_map(cfg.scales));
    std::vector<int> flat = model.flatten_tokens(extended, lay);

    int pose_token = -1;
    if (cfg.include_pose) {
        if (mode == RolloutMode::control) {
            pose_token = *pose_override;
            if (pose_token < 0 || pose_token >= cfg.pose_vocab())
                throw DataError("generate_next_frame: injected pose token out of vocab");
        } else {
            Tensor logits = model.block_logits(guidance, flat, lay, n_ctx, 0);
            pose_token = sample(logits.data.data(), logits.cols(), strategy, rng);
        }
        flat[static_cast<size_t>(lay.block_start(n_ctx, 0))] = pose_token;
    }

    MultiScaleTokenMap out;
    out.scales = cfg.scales;
    for (int m = 1; m <= static_cast<int>(cfg.scales.size()); ++m) {
        Tensor logits = model.block_logits(guidance, flat, lay, n_ctx, m);
        int base = lay.block_start(n_ctx, m);
        std::vector<int> cells(static_cast<size_t>(logits.rows()));
        for (int r = 0; r < logits.rows(); ++r) {
            int tok = sample(&logits.data[static_cast<size_t>(r) * logits.cols()], logits.cols(), strategy, rng);
            cells[static_cast<size_t>(r)] = tok;
            flat[static_cast<size_t>(base + r)] = tok;
        }
        out.maps.push_back(std::move(cells));
    }
    return {pose_token, std::move(out)};
}

RolloutResult rollout(const WorldModel& model, const RolloutRequest& request) {
    const ModelConfig& cfg = model.config();
    if (request.horizon < 1) throw ConfigError("rollout: horizon must be >= 1");
    if (request.history.occ.empty()) throw ConfigError("rollout: empty history");
    if (request.mode == RolloutMode::control &&
        static_cast<int>(request.pose_overrides.size()) != request.horizon)
        throw ConfigError("rollout: control mode needs one pose override per generated frame");
    if (request.mode == RolloutMode::plan && !request.pose_overrides.empty())
        throw ConfigError("rollout: pose overrides are only valid in control mode");

    int window = std::max(1, cfg.frames - 1);
    Rng rng(request.seed);
    WorldModel::TokenSequence context = request.history;
    RolloutResult result;
    for (int h = 0; h < request.horizon; ++h) {
        int drop = static_cast<int>(context.occ.size()) - window;
        if (drop > 0) {
            context.occ.erase(context.occ.begin(), context.occ.begin() + drop);
            if (cfg.include_pose) context.pose.erase(context.pose.begin(), context.pose.begin() + drop);
        }
        const int* override_tok =
            request.mode == RolloutMode::control ? &request.pose_overrides[static_cast<size_t>(h)] : nullptr;
        auto [pose, occ] = generate_next_frame(model, context, request.mode, override_tok, request.sampling, rng);
        if (cfg.include_pose) context.pose.push_back(pose);
        context.occ.push_back(occ);
        result.pose.push_back(pose);
        result.occ.push_back(std::move(occ));
    }
    return result;
}

DecodedRollout decode_rollout(const SceneTokenizer& tokenizer, const WorldModel& model,
                              const std::vector<MultiScaleTokenMap>& token_frames,
                              const std::vector<int>& pose_tokens, double cell_size) {
    if (tokenizer.param_hash() != model.tokenizer_hash())
        throw DataError("decode_rollout: tokenizer does not match the one the model was trained with");
    if (model.config().include_pose && pose_tokens.size() != token_frames.size())
        throw DataError("decode_rollout: pose and occupancy frame counts differ");

    DecodedRollout out;
    for (const MultiScaleTokenMap& frame : token_frames) out.grids.push_back(tokenizer.detokenize(frame, cell_size));

    std::vector<RelPose> rel;
    for (int tok : pose_tokens) rel.push_back(decode_pose_token(tok, model.config().pose_bins));
    out.trajectory.push_back({0.0, 0.0, 0.0});
    for (const auto& p : compose_trajectory(rel)) out.trajectory.push_back(p);
    return out;
}

}  // namespace occtens
