#pragma once

#include <stdexcept>
#include <string>

namespace s2corr {

// Shape/extent mismatches between tensors or against an op's contract.
class DimensionError : public std::runtime_error {
public:
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed serialized data: bad magic, unsupported version/dtype, truncation.
class FormatError : public std::runtime_error {
public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid argument values (out-of-range indices, bad configs, empty inputs).
class ArgumentError : public std::runtime_error {
public:
  explicit ArgumentError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace s2corr
