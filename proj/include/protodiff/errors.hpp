#pragma once

#include <stdexcept>
#include <string>

namespace protodiff {

// Error categories map 1:1 to CLI exit codes (see README).
enum class ErrorCode : int {
    usage = 2,
    missing_file = 3,
    bad_config = 4,
    shape_mismatch = 5,
    io_corrupt = 6,
    non_finite = 7,
};

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ErrorCode code() const { return code_; }
    int exit_code() const { return static_cast<int>(code_); }

private:
    ErrorCode code_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& what) : Error(ErrorCode::shape_mismatch, what) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(ErrorCode::bad_config, what) {}
};
struct MissingFileError : Error {
    explicit MissingFileError(const std::string& what) : Error(ErrorCode::missing_file, what) {}
};
struct IoError : Error {
    explicit IoError(const std::string& what) : Error(ErrorCode::io_corrupt, what) {}
};
struct NonFiniteError : Error {
    explicit NonFiniteError(const std::string& what) : Error(ErrorCode::non_finite, what) {}
};

} // namespace protodiff
