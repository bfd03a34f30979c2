#pragma once

#include <array>
#include <string>
#include <vector>

#include "occtens/config.hpp"
#include "occtens/metrics.hpp"
#include "occtens/rollout.hpp"
#include "occtens/train.hpp"

namespace occtens::cmd {

// Every command writes its artifacts under cfg.out_dir next to a resolved
// config echo, and reports progress as JSON lines through the sink.

std::vector<std::string> gen_data(const RunConfig& cfg, const train::LogSink& log);

train::TokenizerTrainResult train_tokenizer(const RunConfig& cfg, bool resume, const train::LogSink& log);

train::WorldModelTrainResult train_world_model(const RunConfig& cfg, bool resume, const train::LogSink& log);

struct RolloutArtifacts {
    std::string occt_path, csv_path;
    int occ_tokens_per_frame = 0;
    int pose_tokens_per_frame = 0;
    int frames = 0;
    double ms_per_frame = 0.0;
    RolloutResult tokens;
    DecodedRollout decoded;
};

// mode plan ignores pose_file; mode control requires it. horizon <= 0 means
// "rest of the generated episode" in plan mode / pose-file length in control.
RolloutArtifacts rollout(const RunConfig& cfg, RolloutMode mode, const std::string& pose_file, int horizon,
                         const train::LogSink& log);

struct EvalResult {
    metrics::ForecastReport forecast;
    metrics::PlanningReport planning;
    metrics::ForecastReport recon;  // GT tokens round-tripped: the upper bound
    bool has_baseline = false;
    metrics::ForecastReport baseline_forecast;
    metrics::PlanningReport baseline_planning;
};

EvalResult eval(const RunConfig& cfg, bool baseline_copy_last, const train::LogSink& log);

std::vector<std::string> visualize(const std::string& occt_path, const std::string& out_dir,
                                   const train::LogSink& log);

// pose file: JSON array whose elements are either pose token ids or
// [dx, dy, dtheta] triples quantized with the model's bins
std::vector<int> read_pose_file(const std::string& path, const PoseVocab& bins);

uint64_t val_seed(const RunConfig& cfg);

}  // namespace occtens::cmd
