#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "leakprobe/attacks.hpp"

namespace leakprobe {

struct LabeledScores {
  std::vector<double> member;
  std::vector<double> nonmember;

  void add(double score, Label label);
  std::size_t size() const { return member.size() + nonmember.size(); }
};

/// Pulls one column out of a ScoreTable, skipping absent cells and unknown labels.
LabeledScores labeled_column(const ScoreTable& table, std::size_t column);

/// Mann-Whitney AUC with midrank ties:
/// (#{s_m > s_n} + 0.5 #{s_m == s_n}) / (n_m n_n), in O(N log N).
double roc_auc(const LabeledScores& ls);

struct DecisionRule {
  double threshold = 0.0;
};

/// member iff score > threshold.
std::vector<Label> classify(const std::vector<double>& scores, DecisionRule rule);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Stratified percentile bootstrap (95%) of the AUC. Resample i draws from
/// its own stream derived from (seed, i), so results do not depend on the
/// order resamples are evaluated in.
Interval bootstrap_ci(const LabeledScores& ls, std::size_t resamples, std::uint64_t seed);

/// Loss-scale perplexity: the arithmetic mean of per-sample mean NLL.
double perplexity(const std::vector<double>& losses);
double gap(double ppl_val, double ppl_ft);

enum class SpvGroup { referenced, nonreferenced, none };

struct GroupBest {
  std::string attack;               // lexicographically smallest among the maxima
  double auc = 0.0;
  std::vector<std::string> tied;    // every attack attaining the maximum
};

struct BestAuc {
  std::optional<GroupBest> nonref;
  std::optional<GroupBest> ptref;
};

/// Group maxima over attack AUCs. Attacks not present in `aucs` are skipped.
BestAuc best_auc(const std::vector<std::pair<std::string, double>>& aucs,
                 SpvGroup spv = SpvGroup::referenced);

struct Utility {
  double ppl_ft = 0.0;
  double ppl_val = 0.0;
  double gap = 0.0;
};

struct AttackAuc {
  std::string attack;
  double auc = 0.0;
  std::size_t n_member = 0;
  std::size_t n_nonmember = 0;
  std::optional<Interval> ci;
};

struct AUCReport {
  std::vector<AttackAuc> attacks;
  BestAuc best;
  std::optional<Utility> utility;
  bool ppl_exp = false;  // utility holds exp(mean NLL) instead of mean NLL

  std::optional<double> auc_of(std::string_view attack) const;
  /// max(best.nonref, best.ptref), or nullopt if both groups are empty.
  std::optional<double> best_overall() const;
};

struct EvalOptions {
  std::size_t bootstrap = 0;  // 0 disables intervals
  std::uint64_t seed = 0;
  SpvGroup spv_group = SpvGroup::referenced;
  bool ppl_exp = false;
};

/// AUC for every column with at least one member and one nonmember score.
AUCReport evaluate(const ScoreTable& table, const EvalOptions& opts);

/// Adds PPL@ft (members) / PPL@val (nonmembers) from the target traces.
void attach_utility(AUCReport& report, const TraceSet& set, bool ppl_exp = false);

nlohmann::ordered_json report_to_json(const AUCReport& report);
AUCReport report_from_json(const nlohmann::ordered_json& j);
std::string report_to_csv(const AUCReport& report);

}  // namespace leakprobe
