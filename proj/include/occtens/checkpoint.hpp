#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "occtens/tensor.hpp"

namespace occtens {

// Versioned binary container for model parameters. `config_json` is an exact
// echo of the producing configuration; loaders compare it field-for-field and
// refuse mismatches rather than casting silently.
struct Checkpoint {
    std::string kind;
    std::string config_json;
    std::vector<std::string> names;
    std::vector<Tensor> tensors;
    uint64_t tokenizer_hash = 0;  // world-model checkpoints pin their tokenizer
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

uint64_t fnv1a64(const void* data, size_t n);
uint64_t fnv1a64_file(const std::string& path);

}  // namespace occtens
