#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace leakprobe {

// Malformed input: bad JSON, wrong types, unknown enum strings.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Well-formed input that breaks a data-model invariant.
class ValidationError : public std::runtime_error {
 public:
  ValidationError(std::string sample_id, std::string rule)
      : std::runtime_error("sample '" + sample_id + "': " + rule),
        sample_id_(std::move(sample_id)),
        rule_(std::move(rule)) {}

  const std::string& sample_id() const noexcept { return sample_id_; }
  const std::string& rule() const noexcept { return rule_; }

 private:
  std::string sample_id_;
  std::string rule_;
};

// A score or metric whose required inputs are missing or degenerate.
class AttackError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace leakprobe
