#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace syncbn {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad shape, extent, length or argument value.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// NaN/Inf observed in an input or produced by an operation.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// Collective protocol violation (length/sequence/op mismatch), or a peer failure
// observed by a rank blocked inside a collective.
class CollectiveError : public Error {
 public:
  CollectiveError(const std::string& what, std::vector<int> ranks, bool secondary = false)
      : Error(what), ranks_(std::move(ranks)), secondary_(secondary) {}

  // Ranks implicated in the failure.
  const std::vector<int>& ranks() const noexcept { return ranks_; }
  // True when this rank only observed a failure that originated elsewhere.
  bool secondary() const noexcept { return secondary_; }

 private:
  std::vector<int> ranks_;
  bool secondary_;
};

class CollectiveTimeout : public CollectiveError {
 public:
  using CollectiveError::CollectiveError;
};

// Non-finite parameter update or exploding loss during training.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long long global_iter)
      : Error(what), global_iter_(global_iter) {}
  long long global_iter() const noexcept { return global_iter_; }

 private:
  long long global_iter_;
};

// Experiment configuration failed validation.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace syncbn
