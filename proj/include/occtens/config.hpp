#pragma once

#include <cstdint>
#include <string>

#include "occtens/losses.hpp"
#include "occtens/tensformer.hpp"
#include "occtens/tokenizer.hpp"
#include "occtens/world.hpp"

namespace occtens {

struct TrainingConfig {
    int tokenizer_steps = 6000;
    int wm_steps = 160;
    int batch = 8;
    double lr_tokenizer = 1e-3;
    double lr_wm = 3e-4;
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
    int eval_every = 50;
    int episodes = 256;     // training episodes generated from seed
    int val_episodes = 4;   // held-out episodes from a shifted seed
    int eval_history = 2;   // context frames handed to rollouts during eval
    int eval_horizon = 3;   // predicted frames scored by eval

    void validate() const;  // throws ConfigError
    bool operator==(const TrainingConfig&) const = default;
};

// One file drives every command. Defaults are the desk-scale setup; section
// cross-references (grid dims, vocab, scales) are validated so a config that
// parses is a config whose stages can actually feed each other.
struct RunConfig {
    WorldConfig world;
    TokenizerConfig tokenizer;
    ModelConfig model;
    losses::LossWeights loss;
    TrainingConfig training;
    uint64_t seed = 1;
    std::string out_dir = "out";

    void validate() const;
};

RunConfig default_run_config();

std::string run_config_json(const RunConfig& cfg);           // resolved echo, stable key order
RunConfig run_config_from_json(const std::string& text);     // strict: unknown keys rejected at every level
RunConfig load_run_config(const std::string& path);          // empty path -> defaults

}  // namespace occtens
