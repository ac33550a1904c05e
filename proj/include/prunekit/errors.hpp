#pragma once

#include <stdexcept>
#include <string>

namespace prunekit {

// Validation problems: bad arguments, malformed configs, dimension
// mismatches. CLI maps these to exit code 1.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string & msg) : std::runtime_error(msg) {}
};

// Numerical failures (non-SPD matrices, failed dampening). Exit code 2.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string & msg) : std::runtime_error(msg) {}
};

// File I/O and format violations. Exit code 2.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string & msg) : std::runtime_error(msg) {}
};

// Calibration set construction failures. Exit code 2.
class BuildError : public std::runtime_error {
public:
    explicit BuildError(const std::string & msg) : std::runtime_error(msg) {}
};

// Training failures (divergence). Exit code 2.
class TrainError : public std::runtime_error {
public:
    explicit TrainError(const std::string & msg) : std::runtime_error(msg) {}
};

} // namespace prunekit
