#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "occtens/autodiff.hpp"
#include "occtens/config.hpp"
#include "occtens/tensformer.hpp"
#include "occtens/tokenizer.hpp"
#include "occtens/world.hpp"

namespace occtens::train {

// Adam with bias correction; moments live alongside the ParamStore they were
// initialized from and round-trip through TrainState files.
struct Adam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t t = 0;
    std::vector<Tensor> m, v;

    void init(const ad::ParamStore& ps);
    // params -= lr * m_hat / (sqrt(v_hat) + eps); grads pre-scaled by `scale`
    void step(ad::ParamStore& ps, const ad::GradStore& g, double lr, double scale);
};

double cosine_lr(double base, int64_t step, int64_t total_steps);

// Batch membership is a pure function of (seed, step): resuming at step k
// revisits exactly the data an uninterrupted run would have seen.
std::vector<int> batch_indices(uint64_t seed, int64_t step, int pool, int batch);

using LogSink = std::function<void(const std::string& json_line)>;

// Optimizer state + progress counters, pinned to the parameter checkpoint it
// was saved beside. Loading against different parameters is refused.
struct TrainState {
    int64_t step = 0;
    double best_metric = 0.0;
    int64_t best_step = -1;
    Adam opt;

    void save(const std::string& path, uint64_t param_hash) const;
    static TrainState load(const std::string& path, uint64_t param_hash);
};

struct TokenizerTrainResult {
    double best_miou = 0.0;
    int64_t best_step = -1;
    double final_loss = 0.0;
};

// Frames are sampled from `pool`; `val` reconstruction mIoU drives best-model
// selection. Parameters finish at the LAST step's values; the best snapshot
// is returned through *best_values when given. NaN loss aborts.
// stop_after >= 0 interrupts the run at that step while keeping the full
// schedule; resuming from the saved state continues the identical trajectory.
TokenizerTrainResult train_tokenizer(SceneTokenizer& tok, const std::vector<const SemanticGrid*>& pool,
                                     const std::vector<const SemanticGrid*>& val, const RunConfig& cfg,
                                     TrainState& state, const LogSink& log,
                                     std::vector<Tensor>* best_values = nullptr, int64_t stop_after = -1);

double reconstruction_miou(const SceneTokenizer& tok, const std::vector<const SemanticGrid*>& frames);

WorldModel::TokenSequence tokenize_episode(const SceneTokenizer& tok, const PoseVocab& bins, const Sequence& ep);

// Token cache file: enables the world-model stage to skip re-tokenization.
// Refuses caches written by a different tokenizer (hash pin).
void save_token_cache(const std::string& path, uint64_t tokenizer_hash,
                      const std::vector<WorldModel::TokenSequence>& episodes);
std::vector<WorldModel::TokenSequence> load_token_cache(const std::string& path, uint64_t expected_hash);

struct WorldModelTrainResult {
    double best_val_loss = 0.0;
    int64_t best_step = -1;
    double final_loss = 0.0;
};

WorldModelTrainResult train_world_model(WorldModel& wm, const std::vector<WorldModel::TokenSequence>& pool,
                                        const std::vector<WorldModel::TokenSequence>& val, const RunConfig& cfg,
                                        TrainState& state, const LogSink& log,
                                        std::vector<Tensor>* best_values = nullptr, int64_t stop_after = -1);

// Deterministic episode split: training episodes use seed+i, validation
// episodes a disjoint stride. Tracks come from the generator when asked.
std::vector<Sequence> make_episodes(const WorldConfig& world, uint64_t seed, int count,
                                    std::vector<std::vector<std::array<double, 3>>>* tracks = nullptr);

}  // namespace occtens::train
