// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace meshmoe {

/// Invalid or unsupported configuration (dimensions, parallelism, presets).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Argument outside the domain of an operation (bad coordinate, bad bandwidth).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Internal bookkeeping broken (e.g. an expert routed to but hosted nowhere).
class InvariantError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A plan could not be constructed from otherwise valid inputs.
class PlanningError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace meshmoe
