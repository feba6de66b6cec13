#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ehmam {

// Invalid or inconsistent configuration values.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller violated a function precondition (shapes, roles, ranges).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A loss or gradient became non-finite. `step` is -1 outside training.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what, std::int64_t step = -1)
      : std::runtime_error(what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

// File open/read/write failures. The message always carries the path.
class IoError : public std::runtime_error {
 public:
  IoError(const std::string& what, std::string path)
      : std::runtime_error(what + ": " + path), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

// Waveform shorter than the frontend receptive field.
class InputTooShortError : public ContractError {
 public:
  using ContractError::ContractError;
};

// A row is too short to place the requested number of mask blocks.
class DegenerateLengthError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class WavErrorCode { kMissingFile, kUnsupportedEncoding, kCorruptHeader };

class WavError : public std::runtime_error {
 public:
  WavError(WavErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  WavErrorCode code() const { return code_; }

 private:
  WavErrorCode code_;
};

}  // namespace ehmam
