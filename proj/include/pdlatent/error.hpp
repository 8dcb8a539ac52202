#pragma once

#include <stdexcept>
#include <string>

namespace pdlatent {

// Broad failure classes. The CLI maps these onto its exit codes.
enum class ErrorKind { Config, Data, Numeric };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::Config, w) {}
};
struct ParameterError : Error {
  explicit ParameterError(const std::string& w) : Error(ErrorKind::Config, w) {}
};
struct GeometryError : Error {
  explicit GeometryError(const std::string& w) : Error(ErrorKind::Config, w) {}
};

struct DataError : Error {
  explicit DataError(const std::string& w) : Error(ErrorKind::Data, w) {}
};
struct FormatError : DataError {
  explicit FormatError(const std::string& w) : DataError("format error: " + w) {}
};
struct CorruptFileError : DataError {
  explicit CorruptFileError(const std::string& w) : DataError("corrupt file: " + w) {}
};
struct UnsupportedError : DataError {
  explicit UnsupportedError(const std::string& w) : DataError("unsupported: " + w) {}
};
struct IoError : DataError {
  explicit IoError(const std::string& w) : DataError("i/o error: " + w) {}
};
struct ShapeError : DataError {
  explicit ShapeError(const std::string& w) : DataError("shape error: " + w) {}
};
struct DegenerateReferenceError : DataError {
  explicit DegenerateReferenceError(const std::string& w) : DataError(w) {}
};
struct ModelIntegrityError : DataError {
  explicit ModelIntegrityError(const std::string& w) : DataError("model integrity: " + w) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorKind::Numeric, w) {}
};

// Exit code for a failure of the given kind: 1 config, 2 data, 3 numeric.
int exit_code(ErrorKind kind) noexcept;

}  // namespace pdlatent
