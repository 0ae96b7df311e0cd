#pragma once

#include <stdexcept>
#include <string>

namespace decompress {

// Every failure raised by the library derives from Error. kind() is a short
// stable token the CLI prints for machine parsing.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error("dimension", w) {}
};
struct GeometryError : Error {
  explicit GeometryError(const std::string& w) : Error("geometry", w) {}
};
struct NumericGuardError : Error {
  explicit NumericGuardError(const std::string& w) : Error("numeric", w) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& w) : Error("contract", w) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& w) : Error("format", w) {}
};
struct VersionError : Error {
  explicit VersionError(const std::string& w) : Error("version", w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error("io", w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("config", w) {}
};

}  // namespace decompress
