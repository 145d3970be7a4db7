#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "organseg/phantom.hpp"
#include "organseg/trainer.hpp"

namespace organseg {

// Full experiment description: dataset generation + training + output paths.
// A single JSON document; unknown keys are rejected so typos fail loudly.
struct ExperimentConfig {
    // dataset
    std::filesystem::path dataset_root = "data/phantoms";
    int train_cases = 60;
    int test_cases = 12;
    GeneratorConfig gen;
    std::uint64_t dataset_seed = 1234;
    std::vector<OrganSpec> roster;  // empty = default_roster()

    // training (model/loss/schedule fields live in TrainConfig)
    TrainConfig train;

    // output
    std::filesystem::path out_dir = "runs/exp";
};

ExperimentConfig default_experiment_config();

ExperimentConfig parse_experiment_config(const std::filesystem::path& file,
                                         const std::vector<std::string>& overrides = {});

// Canonical JSON for archiving beside outputs; parse(dump(c)) == c.
std::string dump_experiment_config(const ExperimentConfig& c);

// FNV-1a over the canonical dump.
std::string config_hash(const ExperimentConfig& c);

void archive_resolved_config(const ExperimentConfig& c, const std::filesystem::path& dir);

}  // namespace organseg
