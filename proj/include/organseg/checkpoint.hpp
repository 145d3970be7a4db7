#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "organseg/optim.hpp"
#include "organseg/tensor.hpp"

namespace organseg {

// weights.bin: magic "OSGW0001", u64 tensor count, then per tensor:
// u32 name length, name bytes, u32 ndim, i64 dims, f64 little-endian data.
// Optimizer moments ride along under "adam.m/<name>" and "adam.v/<name>".
// checkpoint.json carries {config_hash, stage, step, seed, normalization}.

struct CheckpointMeta {
    std::string config_hash;
    std::string stage;
    std::int64_t step = 0;
    std::uint64_t seed = 0;
    std::string normalization = "instance";
};

void save_weights(const std::filesystem::path& file,
                  const std::map<std::string, std::pair<Shape, std::vector<double>>>& tensors);
std::map<std::string, std::pair<Shape, std::vector<double>>> load_weights(
    const std::filesystem::path& file);

void save_checkpoint(const std::filesystem::path& dir, const std::vector<Tensor>& params,
                     const Adam* opt, const CheckpointMeta& meta);

// Loads weights into existing parameters by name (shape-checked) and restores
// optimizer moments when `opt` is given. Returns the metadata.
CheckpointMeta load_checkpoint(const std::filesystem::path& dir, std::vector<Tensor>& params,
                               Adam* opt);

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& dir);

}  // namespace organseg
