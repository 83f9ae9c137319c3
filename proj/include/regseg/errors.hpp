#pragma once

#include <stdexcept>
#include <string>

namespace regseg {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

struct SizeError : Error {
    explicit SizeError(const std::string& msg) : Error("size error: " + msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

struct DataError : Error {
    explicit DataError(const std::string& msg) : Error("data error: " + msg) {}
};

struct NumericsError : Error {
    explicit NumericsError(const std::string& msg) : Error("numerics error: " + msg) {}
};

struct EmptyMaskError : Error {
    explicit EmptyMaskError(const std::string& msg) : Error("empty mask: " + msg) {}
};

struct CorruptCheckpointError : Error {
    explicit CorruptCheckpointError(const std::string& msg)
        : Error("corrupt checkpoint: " + msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

}  // namespace regseg
