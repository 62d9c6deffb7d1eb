#pragma once

// Model-agnostic record of what a model "looked like" while reading a sample.
// Everything downstream (attacks, evaluation, the CLI) consumes TraceSets;
// producers are the toy lab in this repo and external extractors.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace leakprobe {

inline constexpr std::string_view kTraceFormat = "leakprobe-trace/1";

enum class Role { target, pretrained, shadow, selfprompt };
enum class Label { member, nonmember, unknown };

inline constexpr std::array<Role, 4> kAllRoles = {Role::target, Role::pretrained, Role::shadow,
                                                  Role::selfprompt};

std::string_view to_string(Role role);
std::string_view to_string(Label label);
std::optional<Role> parse_role(std::string_view s);
std::optional<Label> parse_label(std::string_view s);

/// Per-position statistics of the log-probability vector (natural log).
struct TokenStat {
  double lp = 0.0;     ///< log-probability of the realized next token
  double mu = 0.0;     ///< mean of the full-vocabulary log-probability vector
  double sigma = 0.0;  ///< population standard deviation of that vector

  bool operator==(const TokenStat&) const = default;
};

struct ModelTrace {
  Role role = Role::target;
  std::vector<TokenStat> tokens;
  double loss = 0.0;  ///< mean NLL per token; must agree with -mean(lp)
  std::optional<double> gradnorm_theta;  ///< adapter-gradient L2 norm (target only)
  std::optional<double> gradnorm_x;      ///< input-embedding-gradient L2 norm
  std::optional<std::vector<double>> neighbor_losses;
  std::optional<std::vector<double>> mope_losses;

  bool operator==(const ModelTrace&) const = default;
};

struct SampleRecord {
  std::string sample_id;
  Label label = Label::unknown;
  std::int64_t zlib_len = 0;
  std::int64_t n_tokens = 0;
  std::map<Role, ModelTrace> traces;

  const ModelTrace* find(Role role) const {
    auto it = traces.find(role);
    return it == traces.end() ? nullptr : &it->second;
  }

  bool operator==(const SampleRecord&) const = default;
};

struct TraceSet {
  std::vector<SampleRecord> records;
  nlohmann::ordered_json manifest = nlohmann::ordered_json::object();

  bool operator==(const TraceSet&) const = default;
};

// Tolerance for the stored-loss cross-check.
inline constexpr double kLossTokenTolerance = 1e-6;

/// -sum(lp)/count in position order. This is the canonical summation order;
/// extractors should store exactly this value as `loss`.
double mean_nll(const std::vector<TokenStat>& tokens);

/// Throws ValidationError naming the sample and the violated rule.
void validate(const SampleRecord& record);
void validate(const TraceSet& set);

/// Parses a JSON Lines trace file. Throws ParseError (with line number) for
/// malformed input and ValidationError for invariant violations.
TraceSet parse_trace_file(std::string_view text);

/// Canonical serialization: schema key order, optional keys omitted,
/// shortest round-trip float formatting, one trailing newline per line.
std::string write_trace_file(const TraceSet& set);

/// Length of the RFC 1950 stream for `text` at compression level 6.
std::int64_t zlib_entropy(std::string_view text);

}  // namespace leakprobe
