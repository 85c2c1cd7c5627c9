#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace metamix {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A node was evaluated without a binding for one of its inputs.
class UnboundNodeError : public Error {
 public:
  explicit UnboundNodeError(std::string node)
      : Error("unbound graph node '" + node + "'"), node_(std::move(node)) {}
  const std::string& node() const noexcept { return node_; }

 private:
  std::string node_;
};

/// Shape or dimension mismatch when building a graph or binding values.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A loss, logit or gradient became NaN/inf. `where` names the location.
class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(std::string where)
      : Error("non-finite value in " + where), where_(std::move(where)) {}
  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

/// Invalid configuration value; `key` is the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error("config '" + key + "': " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

}  // namespace metamix
