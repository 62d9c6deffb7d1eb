#pragma once

// Membership score functions. Every score is oriented so that a larger value
// means "more likely a member":
//
//   loss            mean(lp)                          = -loss
//   zlib            -loss * (n-1) / zlib_len          (per-byte log-likelihood)
//   gradnorm_theta  -||dL/dDelta||
//   gradnorm_x      -||dL/de||
//   mink            mean lp of the ceil(K% * (n-1)) lowest-lp tokens
//   minkpp          same selection over z = (lp - mu) / sigma
//   neighborhood    mean(neighbor_losses) - loss
//   mope            mean(mope_losses) - loss
//   <name>_pt       score(target) - score(pretrained)
//   spv             neighborhood(target) - neighborhood(selfprompt)
//
// Min-K and Min-K%++ are the negations of their usual "lower is member" form.

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "leakprobe/trace.hpp"

namespace leakprobe {

enum class AttackName {
  loss,
  zlib,
  gradnorm_theta,
  gradnorm_x,
  mink,
  minkpp,
  neighborhood,
  mope,
  loss_pt,
  mink_pt,
  minkpp_pt,
  neighborhood_pt,
  mope_pt,
  gradnorm_x_pt,
  spv,
};

inline constexpr std::size_t kAttackCount = 15;

inline constexpr std::array<AttackName, 8> kNonReferenced = {
    AttackName::loss, AttackName::zlib,  AttackName::gradnorm_theta, AttackName::gradnorm_x,
    AttackName::mink, AttackName::minkpp, AttackName::neighborhood,  AttackName::mope};

inline constexpr std::array<AttackName, 6> kPtReferenced = {
    AttackName::loss_pt,         AttackName::mink_pt, AttackName::minkpp_pt,
    AttackName::neighborhood_pt, AttackName::mope_pt, AttackName::gradnorm_x_pt};

std::string_view to_string(AttackName name);
std::optional<AttackName> parse_attack_name(std::string_view s);
const std::array<AttackName, kAttackCount>& all_attacks();

/// Non-referenced attack that a pt-referenced attack calibrates, if any.
std::optional<AttackName> base_attack(AttackName name);

struct AttackConfig {
  double k_percent = 20.0;
  double sigma_floor = 1e-6;
  // Use |zlib(x)| - S_loss instead of the per-byte ratio.
  bool zlib_literal = false;
  // Emit <base>_shadow columns when a shadow trace exists.
  bool shadow_columns = true;

  void validate() const;
};

/// Number of tokens the Min-K selection keeps: max(1, ceil(K/100 * count)).
std::size_t mink_count(std::size_t count, double k_percent);

double score_loss(const ModelTrace& t);
double score_zlib(const SampleRecord& r, Role role, bool literal = false);
double score_mink(const ModelTrace& t, const AttackConfig& cfg);
double score_minkpp(const ModelTrace& t, const AttackConfig& cfg);
double score_gradnorm_theta(const ModelTrace& t);
double score_gradnorm_x(const ModelTrace& t);
double score_neighborhood(const ModelTrace& t);
double score_mope(const ModelTrace& t);
std::optional<double> calibrate(std::optional<double> target, std::optional<double> reference);
double score_spv(const SampleRecord& r);

/// Non-referenced score of `base` on one trace; nullopt when inputs are absent.
std::optional<double> try_score(AttackName base, const SampleRecord& r, Role role,
                                const AttackConfig& cfg);

struct ScoreRow {
  std::string sample_id;
  Label label = Label::unknown;
  std::vector<std::optional<double>> cells;  // parallel to ScoreTable::columns

  bool operator==(const ScoreRow&) const = default;
};

struct ScoreTable {
  std::vector<std::string> columns;
  std::vector<ScoreRow> rows;

  std::optional<std::size_t> column_index(std::string_view name) const;
  std::size_t populated_columns(std::size_t row) const;
  const ScoreRow* find_row(std::string_view sample_id) const;

  bool operator==(const ScoreTable&) const = default;
};

/// Scores every record. Absent inputs give absent cells, never errors.
/// Columns: the 15 attacks in enum order, then <base>_shadow for each of the
/// six calibratable bases when any record carries a shadow trace.
ScoreTable run_attack_suite(const TraceSet& set, const AttackConfig& cfg);

std::string score_table_to_csv(const ScoreTable& table);
ScoreTable score_table_from_csv(std::string_view csv);
nlohmann::ordered_json score_table_to_json(const ScoreTable& table);

/// Shortest decimal that round-trips to the same double.
std::string format_double(double v);

}  // namespace leakprobe
