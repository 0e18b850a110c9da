#pragma once

#include <stdexcept>
#include <string>

namespace projprobe {

// Misconfiguration: shapes, geometry, schema. CLI exit code 2.
struct ConfigError : std::invalid_argument {
    explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Invalid runtime inputs (out-of-range beta, empty bundle, ...). Exit code 2.
struct ValidationError : std::invalid_argument {
    explicit ValidationError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Missing registry/model entries. Exit code 2.
struct LookupError : std::runtime_error {
    explicit LookupError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values during forward/attack. Exit code 3.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Divergence during surrogate/target training. Exit code 3.
struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace projprobe
