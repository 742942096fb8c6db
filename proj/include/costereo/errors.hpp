#pragma once

#include <stdexcept>
#include <string>

namespace costereo {

/// Malformed or out-of-range scenario configuration.
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A mathematical precondition was violated (e.g. overlap geometry).
class DomainError : public std::domain_error {
public:
  using std::domain_error::domain_error;
};

/// Caller broke an operation's contract (stamp mismatch, full window, ...).
class ContractError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

/// Guidance batch could not be synchronized through the image cache.
class SyncError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Covariance lost symmetry / positive semi-definiteness.
class NumericalHealthError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A module invariant was breached while running a scenario.
class InvariantBreach : public std::runtime_error {
public:
  InvariantBreach(long step, std::string module, const std::string& what)
      : std::runtime_error("step " + std::to_string(step) + " [" + module +
                           "]: " + what),
        step_(step),
        module_(std::move(module)) {}

  long step() const { return step_; }
  const std::string& module() const { return module_; }

private:
  long step_;
  std::string module_;
};

}  // namespace costereo
