#include "leakprobe/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "leakprobe/error.hpp"
#include "leakprobe/random.hpp"

namespace leakprobe {

void LabeledScores::add(double score, Label label) {
  if (label == Label::member) {
    member.push_back(score);
  } else if (label == Label::nonmember) {
    nonmember.push_back(score);
  }
}

LabeledScores labeled_column(const ScoreTable& table, std::size_t column) {
  LabeledScores ls;
  for (const auto& row : table.rows) {
    const auto& cell = row.cells.at(column);
    if (cell) ls.add(*cell, row.label);
  }
  return ls;
}

namespace {

// 2U computed in integers, where U = #{m > n} + 0.5 #{m == n}.
std::int64_t twice_u(const std::vector<double>& member, const std::vector<double>& nonmember) {
  struct Item {
    double score;
    bool is_member;
  };
  std::vector<Item> items;
  items.reserve(member.size() + nonmember.size());
  for (double s : member) items.push_back({s, true});
  for (double s : nonmember) items.push_back({s, false});
  std::sort(items.begin(), items.end(),
            [](const Item& a, const Item& b) { return a.score < b.score; });

  // Twice the midrank of a tie block occupying 1-based ranks [i+1, j] is i+1+j.
  std::int64_t twice_rank_sum = 0;
  std::size_t i = 0;
  while (i < items.size()) {
    std::size_t j = i + 1;
    while (j < items.size() && items[j].score == items[i].score) ++j;
    std::int64_t members_in_block = 0;
    for (std::size_t k = i; k < j; ++k) members_in_block += items[k].is_member ? 1 : 0;
    twice_rank_sum += members_in_block * static_cast<std::int64_t>(i + 1 + j);
    i = j;
  }
  auto nm = static_cast<std::int64_t>(member.size());
  return twice_rank_sum - nm * (nm + 1);
}

void check_scores(const LabeledScores& ls) {
  if (ls.member.empty() || ls.nonmember.empty()) {
    throw AttackError("roc_auc: need at least one member and one nonmember");
  }
  for (const auto* v : {&ls.member, &ls.nonmember}) {
    for (double s : *v) {
      if (!std::isfinite(s)) throw AttackError("roc_auc: non-finite score");
    }
  }
}

}  // namespace

double roc_auc(const LabeledScores& ls) {
  check_scores(ls);
  auto denom = 2 * static_cast<std::int64_t>(ls.member.size()) *
               static_cast<std::int64_t>(ls.nonmember.size());
  return static_cast<double>(twice_u(ls.member, ls.nonmember)) / static_cast<double>(denom);
}

std::vector<Label> classify(const std::vector<double>& scores, DecisionRule rule) {
  std::vector<Label> out;
  out.reserve(scores.size());
  for (double s : scores) out.push_back(s > rule.threshold ? Label::member : Label::nonmember);
  return out;
}

namespace {

// Linear interpolation between order statistics (the "type 7" quantile).
double quantile(std::vector<double>& sorted, double q) {
  double pos = q * static_cast<double>(sorted.size() - 1);
  auto lo = static_cast<std::size_t>(std::floor(pos));
  std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace

Interval bootstrap_ci(const LabeledScores& ls, std::size_t resamples, std::uint64_t seed) {
  check_scores(ls);
  if (resamples == 0) throw ConfigError("bootstrap_ci: resamples must be >= 1");
  std::vector<double> aucs(resamples);
  LabeledScores draw;
  draw.member.resize(ls.member.size());
  draw.nonmember.resize(ls.nonmember.size());
  for (std::size_t b = 0; b < resamples; ++b) {
    Rng rng(derive_seed(seed, b));
    for (auto& s : draw.member) s = ls.member[rng.uniform_index(ls.member.size())];
    for (auto& s : draw.nonmember) s = ls.nonmember[rng.uniform_index(ls.nonmember.size())];
    aucs[b] = roc_auc(draw);
  }
  std::sort(aucs.begin(), aucs.end());
  return {quantile(aucs, 0.025), quantile(aucs, 0.975)};
}

double perplexity(const std::vector<double>& losses) {
  if (losses.empty()) throw AttackError("perplexity: empty loss list");
  double sum = 0.0;
  for (double l : losses) sum += l;
  return sum / static_cast<double>(losses.size());
}

double gap(double ppl_val, double ppl_ft) { return ppl_val - ppl_ft; }

namespace {

bool in_group(std::string_view name, bool referenced, SpvGroup spv) {
  auto parsed = parse_attack_name(name);
  if (!parsed) return false;
  if (*parsed == AttackName::spv) {
    return referenced ? spv == SpvGroup::referenced : spv == SpvGroup::nonreferenced;
  }
  const auto& group = referenced ? std::vector<AttackName>(kPtReferenced.begin(), kPtReferenced.end())
                                 : std::vector<AttackName>(kNonReferenced.begin(), kNonReferenced.end());
  return std::find(group.begin(), group.end(), *parsed) != group.end();
}

std::optional<GroupBest> group_best(const std::vector<std::pair<std::string, double>>& aucs,
                                    bool referenced, SpvGroup spv) {
  std::optional<GroupBest> best;
  for (const auto& [name, auc] : aucs) {
    if (!in_group(name, referenced, spv)) continue;
    if (!best || auc > best->auc) {
      best = GroupBest{name, auc, {name}};
    } else if (auc == best->auc) {
      best->tied.push_back(name);
      if (name < best->attack) best->attack = name;
    }
  }
  if (best) std::sort(best->tied.begin(), best->tied.end());
  return best;
}

}  // namespace

BestAuc best_auc(const std::vector<std::pair<std::string, double>>& aucs, SpvGroup spv) {
  return {group_best(aucs, false, spv), group_best(aucs, true, spv)};
}

std::optional<double> AUCReport::auc_of(std::string_view attack) const {
  for (const auto& a : attacks) {
    if (a.attack == attack) return a.auc;
  }
  return std::nullopt;
}

std::optional<double> AUCReport::best_overall() const {
  std::optional<double> out;
  if (best.nonref) out = best.nonref->auc;
  if (best.ptref) out = out ? std::max(*out, best.ptref->auc) : best.ptref->auc;
  return out;
}

AUCReport evaluate(const ScoreTable& table, const EvalOptions& opts) {
  AUCReport report;
  report.ppl_exp = opts.ppl_exp;
  std::vector<std::pair<std::string, double>> aucs;
  for (std::size_t c = 0; c < table.columns.size(); ++c) {
    auto ls = labeled_column(table, c);
    if (ls.member.empty() || ls.nonmember.empty()) continue;
    AttackAuc entry{table.columns[c], roc_auc(ls), ls.member.size(), ls.nonmember.size(), {}};
    if (opts.bootstrap > 0) entry.ci = bootstrap_ci(ls, opts.bootstrap, derive_seed(opts.seed, c));
    aucs.emplace_back(entry.attack, entry.auc);
    report.attacks.push_back(std::move(entry));
  }
  report.best = best_auc(aucs, opts.spv_group);
  return report;
}

void attach_utility(AUCReport& report, const TraceSet& set, bool ppl_exp) {
  std::vector<double> ft;
  std::vector<double> val;
  for (const auto& r : set.records) {
    const ModelTrace* t = r.find(Role::target);
    if (!t) continue;
    if (r.label == Label::member) ft.push_back(t->loss);
    if (r.label == Label::nonmember) val.push_back(t->loss);
  }
  if (ft.empty() || val.empty()) return;
  double p_ft = perplexity(ft);
  double p_val = perplexity(val);
  if (ppl_exp) {
    p_ft = std::exp(p_ft);
    p_val = std::exp(p_val);
  }
  report.ppl_exp = ppl_exp;
  report.utility = Utility{p_ft, p_val, gap(p_val, p_ft)};
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

using ojson = nlohmann::ordered_json;

ojson group_to_json(const std::optional<GroupBest>& g) {
  if (!g) return nullptr;
  ojson j = ojson::object();
  j["attack"] = g->attack;
  j["auc"] = g->auc;
  j["tied"] = g->tied;
  return j;
}

std::optional<GroupBest> group_from_json(const ojson& j) {
  if (j.is_null()) return std::nullopt;
  return GroupBest{j.at("attack").get<std::string>(), j.at("auc").get<double>(),
                   j.at("tied").get<std::vector<std::string>>()};
}

}  // namespace

ojson report_to_json(const AUCReport& report) {
  ojson j = ojson::object();
  ojson attacks = ojson::array();
  for (const auto& a : report.attacks) {
    ojson e = ojson::object();
    e["attack"] = a.attack;
    e["auc"] = a.auc;
    e["n_member"] = a.n_member;
    e["n_nonmember"] = a.n_nonmember;
    if (a.ci) e["ci"] = {a.ci->lo, a.ci->hi};
    attacks.push_back(std::move(e));
  }
  j["attacks"] = std::move(attacks);
  j["best_nonref"] = group_to_json(report.best.nonref);
  j["best_ptref"] = group_to_json(report.best.ptref);
  if (report.utility) {
    ojson u = ojson::object();
    u["ppl_ft"] = report.utility->ppl_ft;
    u["ppl_val"] = report.utility->ppl_val;
    u["gap"] = report.utility->gap;
    u["scale"] = report.ppl_exp ? "exp" : "nll";
    j["utility"] = std::move(u);
  }
  return j;
}

AUCReport report_from_json(const ojson& j) {
  AUCReport report;
  for (const auto& e : j.at("attacks")) {
    AttackAuc a{e.at("attack").get<std::string>(), e.at("auc").get<double>(),
                e.at("n_member").get<std::size_t>(), e.at("n_nonmember").get<std::size_t>(), {}};
    if (e.contains("ci")) a.ci = Interval{e["ci"][0].get<double>(), e["ci"][1].get<double>()};
    report.attacks.push_back(std::move(a));
  }
  report.best.nonref = group_from_json(j.at("best_nonref"));
  report.best.ptref = group_from_json(j.at("best_ptref"));
  if (j.contains("utility")) {
    const auto& u = j["utility"];
    report.utility = Utility{u.at("ppl_ft").get<double>(), u.at("ppl_val").get<double>(),
                             u.at("gap").get<double>()};
    report.ppl_exp = u.value("scale", std::string("nll")) == "exp";
  }
  return report;
}

std::string report_to_csv(const AUCReport& report) {
  std::string out = "kind,name,value,ci_lo,ci_hi\n";
  for (const auto& a : report.attacks) {
    out += "auc," + a.attack + "," + format_double(a.auc) + ",";
    if (a.ci) out += format_double(a.ci->lo) + "," + format_double(a.ci->hi);
    else out += ",";
    out += '\n';
  }
  if (report.best.nonref) {
    out += "best_nonref," + report.best.nonref->attack + "," +
           format_double(report.best.nonref->auc) + ",,\n";
  }
  if (report.best.ptref) {
    out += "best_ptref," + report.best.ptref->attack + "," +
           format_double(report.best.ptref->auc) + ",,\n";
  }
  if (report.utility) {
    out += "utility,ppl_ft," + format_double(report.utility->ppl_ft) + ",,\n";
    out += "utility,ppl_val," + format_double(report.utility->ppl_val) + ",,\n";
    out += "utility,gap," + format_double(report.utility->gap) + ",,\n";
  }
  return out;
}

}  // namespace leakprobe
