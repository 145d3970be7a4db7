#pragma once

#include <stdexcept>
#include <string>

namespace organseg {

// Error categories map onto CLI exit codes: config/argument problems exit 2,
// I/O and data-format problems exit 3, pipeline ordering exit 4, training
// failures exit 5. std::invalid_argument is used for contract violations on
// library operations and also maps to exit 2.

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataFormatError : IoError {
    using IoError::IoError;
};

struct PipelineOrderError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainingFailure : std::runtime_error {
    TrainingFailure(const std::string& stage, long long step, const std::string& what)
        : std::runtime_error("training failure in stage '" + stage + "' at step " +
                             std::to_string(step) + ": " + what),
          stage(stage), step(step) {}
    std::string stage;
    long long step;
};

struct GenerationFailure : std::runtime_error {
    explicit GenerationFailure(const std::string& organ, const std::string& what)
        : std::runtime_error("cannot place organ '" + organ + "': " + what), organ(organ) {}
    std::string organ;
};

struct UndefinedMetric : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace organseg
