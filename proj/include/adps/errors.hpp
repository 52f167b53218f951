#pragma once

#include <stdexcept>
#include <string>

namespace adps {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

struct DivisibilityError : std::runtime_error {
  explicit DivisibilityError(const std::string& what) : std::runtime_error(what) {}
};

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct LayoutError : std::runtime_error {
  explicit LayoutError(const std::string& what) : std::runtime_error(what) {}
};

struct PairingError : std::runtime_error {
  explicit PairingError(const std::string& what) : std::runtime_error(what) {}
};

struct DegenerateLabelsError : std::runtime_error {
  explicit DegenerateLabelsError(const std::string& what) : std::runtime_error(what) {}
};

struct EmptyDatasetError : std::runtime_error {
  explicit EmptyDatasetError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace adps
