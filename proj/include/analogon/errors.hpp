#pragma once

#include <stdexcept>
#include <string>

namespace analogon {

/// Invalid environment or run specification. `field()` names the offending key.
class SpecError : public std::runtime_error {
 public:
  SpecError(std::string field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Caller violated a precondition (bad argument, mismatched shapes, ...).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values met during training or evaluation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A pipeline stage needs an artifact that a previous command should have produced.
class MissingArtifact : public std::runtime_error {
 public:
  MissingArtifact(const std::string& path, const std::string& producer)
      : std::runtime_error("missing " + path + " (run `analogon " + producer + "` first)") {}
};

}  // namespace analogon
