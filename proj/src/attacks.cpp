#include "leakprobe/attacks.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

#include "leakprobe/error.hpp"

namespace leakprobe {

namespace {

constexpr std::array<AttackName, kAttackCount> kAll = {
    AttackName::loss,         AttackName::zlib,          AttackName::gradnorm_theta,
    AttackName::gradnorm_x,   AttackName::mink,          AttackName::minkpp,
    AttackName::neighborhood, AttackName::mope,          AttackName::loss_pt,
    AttackName::mink_pt,      AttackName::minkpp_pt,     AttackName::neighborhood_pt,
    AttackName::mope_pt,      AttackName::gradnorm_x_pt, AttackName::spv};

}  // namespace

const std::array<AttackName, kAttackCount>& all_attacks() { return kAll; }

std::string_view to_string(AttackName name) {
  switch (name) {
    case AttackName::loss: return "loss";
    case AttackName::zlib: return "zlib";
    case AttackName::gradnorm_theta: return "gradnorm_theta";
    case AttackName::gradnorm_x: return "gradnorm_x";
    case AttackName::mink: return "mink";
    case AttackName::minkpp: return "minkpp";
    case AttackName::neighborhood: return "neighborhood";
    case AttackName::mope: return "mope";
    case AttackName::loss_pt: return "loss_pt";
    case AttackName::mink_pt: return "mink_pt";
    case AttackName::minkpp_pt: return "minkpp_pt";
    case AttackName::neighborhood_pt: return "neighborhood_pt";
    case AttackName::mope_pt: return "mope_pt";
    case AttackName::gradnorm_x_pt: return "gradnorm_x_pt";
    case AttackName::spv: return "spv";
  }
  return "?";
}

std::optional<AttackName> parse_attack_name(std::string_view s) {
  for (AttackName a : kAll) {
    if (to_string(a) == s) return a;
  }
  return std::nullopt;
}

std::optional<AttackName> base_attack(AttackName name) {
  switch (name) {
    case AttackName::loss_pt: return AttackName::loss;
    case AttackName::mink_pt: return AttackName::mink;
    case AttackName::minkpp_pt: return AttackName::minkpp;
    case AttackName::neighborhood_pt: return AttackName::neighborhood;
    case AttackName::mope_pt: return AttackName::mope;
    case AttackName::gradnorm_x_pt: return AttackName::gradnorm_x;
    default: return std::nullopt;
  }
}

void AttackConfig::validate() const {
  if (!(k_percent > 0.0 && k_percent <= 100.0)) throw ConfigError("k_percent must be in (0, 100]");
  if (!(sigma_floor >= 0.0)) throw ConfigError("sigma_floor must be >= 0");
}

std::size_t mink_count(std::size_t count, double k_percent) {
  // K * count / 100 first, so integral products (20 * 5) stay exact.
  double want = std::ceil(k_percent * static_cast<double>(count) / 100.0);
  auto k = static_cast<std::size_t>(std::max(1.0, want));
  return std::min(k, count);
}

double score_loss(const ModelTrace& t) {
  if (t.tokens.empty()) throw AttackError("loss: empty token list");
  return -mean_nll(t.tokens);
}

double score_zlib(const SampleRecord& r, Role role, bool literal) {
  const ModelTrace* t = r.find(role);
  if (!t) throw AttackError("zlib: missing trace for role " + std::string(to_string(role)));
  if (r.zlib_len <= 0) throw AttackError("zlib: zlib_len must be > 0");
  if (literal) return static_cast<double>(r.zlib_len) + t->loss;
  return -t->loss * static_cast<double>(r.n_tokens - 1) / static_cast<double>(r.zlib_len);
}

namespace {

// Mean of values[i] over the k lowest entries, ties broken by position,
// summed in position order.
double mean_of_lowest(const std::vector<double>& values, std::size_t k) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<char> keep(values.size(), 0);
  for (std::size_t i = 0; i < k; ++i) keep[order[i]] = 1;
  double sum = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (keep[i]) sum += values[i];
  }
  return sum / static_cast<double>(k);
}

}  // namespace

double score_mink(const ModelTrace& t, const AttackConfig& cfg) {
  if (t.tokens.empty()) throw AttackError("mink: empty token list");
  std::vector<double> lp;
  lp.reserve(t.tokens.size());
  for (const auto& tok : t.tokens) lp.push_back(tok.lp);
  return mean_of_lowest(lp, mink_count(lp.size(), cfg.k_percent));
}

double score_minkpp(const ModelTrace& t, const AttackConfig& cfg) {
  if (t.tokens.empty()) throw AttackError("minkpp: empty token list");
  std::vector<double> z;
  z.reserve(t.tokens.size());
  for (const auto& tok : t.tokens) {
    if (tok.sigma < cfg.sigma_floor && tok.lp == tok.mu) {
      z.push_back(0.0);
    } else {
      z.push_back((tok.lp - tok.mu) / std::max(tok.sigma, cfg.sigma_floor));
    }
  }
  return mean_of_lowest(z, mink_count(z.size(), cfg.k_percent));
}

double score_gradnorm_theta(const ModelTrace& t) {
  if (t.role != Role::target) throw AttackError("gradnorm_theta undefined for this role");
  if (!t.gradnorm_theta) throw AttackError("gradnorm_theta: field absent");
  return -*t.gradnorm_theta;
}

double score_gradnorm_x(const ModelTrace& t) {
  if (!t.gradnorm_x) throw AttackError("gradnorm_x: field absent");
  return -*t.gradnorm_x;
}

namespace {

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

double score_neighborhood(const ModelTrace& t) {
  if (!t.neighbor_losses || t.neighbor_losses->empty()) {
    throw AttackError("neighborhood: neighbor_losses absent or empty");
  }
  return mean(*t.neighbor_losses) - t.loss;
}

double score_mope(const ModelTrace& t) {
  if (!t.mope_losses || t.mope_losses->empty()) {
    throw AttackError("mope: mope_losses absent or empty");
  }
  return mean(*t.mope_losses) - t.loss;
}

std::optional<double> calibrate(std::optional<double> target, std::optional<double> reference) {
  if (!target || !reference) return std::nullopt;
  return *target - *reference;
}

double score_spv(const SampleRecord& r) {
  const ModelTrace* target = r.find(Role::target);
  const ModelTrace* sp = r.find(Role::selfprompt);
  if (!target) throw AttackError("spv: missing target trace");
  if (!sp) throw AttackError("spv: missing selfprompt trace");
  return score_neighborhood(*target) - score_neighborhood(*sp);
}

std::optional<double> try_score(AttackName base, const SampleRecord& r, Role role,
                                const AttackConfig& cfg) {
  const ModelTrace* t = r.find(role);
  if (!t || t->tokens.empty()) return std::nullopt;
  switch (base) {
    case AttackName::loss: return score_loss(*t);
    case AttackName::zlib:
      if (r.zlib_len <= 0) return std::nullopt;
      return score_zlib(r, role, cfg.zlib_literal);
    case AttackName::gradnorm_theta:
      if (role != Role::target || !t->gradnorm_theta) return std::nullopt;
      return score_gradnorm_theta(*t);
    case AttackName::gradnorm_x:
      if (!t->gradnorm_x) return std::nullopt;
      return score_gradnorm_x(*t);
    case AttackName::mink: return score_mink(*t, cfg);
    case AttackName::minkpp: return score_minkpp(*t, cfg);
    case AttackName::neighborhood:
      if (!t->neighbor_losses || t->neighbor_losses->empty()) return std::nullopt;
      return score_neighborhood(*t);
    case AttackName::mope:
      if (!t->mope_losses || t->mope_losses->empty()) return std::nullopt;
      return score_mope(*t);
    default: return std::nullopt;
  }
}

// ---------------------------------------------------------------------------
// ScoreTable

std::optional<std::size_t> ScoreTable::column_index(std::string_view name) const {
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i] == name) return i;
  }
  return std::nullopt;
}

std::size_t ScoreTable::populated_columns(std::size_t row) const {
  const auto& cells = rows.at(row).cells;
  return static_cast<std::size_t>(
      std::count_if(cells.begin(), cells.end(), [](const auto& c) { return c.has_value(); }));
}

const ScoreRow* ScoreTable::find_row(std::string_view sample_id) const {
  for (const auto& r : rows) {
    if (r.sample_id == sample_id) return &r;
  }
  return nullptr;
}

namespace {

std::optional<double> score_cell(AttackName name, const SampleRecord& r, const AttackConfig& cfg) {
  if (auto base = base_attack(name)) {
    return calibrate(try_score(*base, r, Role::target, cfg),
                     try_score(*base, r, Role::pretrained, cfg));
  }
  if (name == AttackName::spv) {
    const ModelTrace* t = r.find(Role::target);
    const ModelTrace* sp = r.find(Role::selfprompt);
    if (!t || !sp || !t->neighbor_losses || !sp->neighbor_losses || t->neighbor_losses->empty() ||
        sp->neighbor_losses->empty()) {
      return std::nullopt;
    }
    return score_spv(r);
  }
  return try_score(name, r, Role::target, cfg);
}

}  // namespace

ScoreTable run_attack_suite(const TraceSet& set, const AttackConfig& cfg) {
  cfg.validate();
  ScoreTable table;
  for (AttackName a : kAll) table.columns.emplace_back(to_string(a));

  bool any_shadow = cfg.shadow_columns &&
                    std::any_of(set.records.begin(), set.records.end(),
                                [](const SampleRecord& r) { return r.find(Role::shadow); });
  if (any_shadow) {
    for (AttackName a : kPtReferenced) {
      table.columns.push_back(std::string(to_string(*base_attack(a))) + "_shadow");
    }
  }

  table.rows.reserve(set.records.size());
  for (const auto& r : set.records) {
    ScoreRow row{r.sample_id, r.label, {}};
    row.cells.reserve(table.columns.size());
    if (!r.find(Role::target)) {
      row.cells.assign(table.columns.size(), std::nullopt);
      table.rows.push_back(std::move(row));
      continue;
    }
    for (AttackName a : kAll) row.cells.push_back(score_cell(a, r, cfg));
    if (any_shadow) {
      for (AttackName a : kPtReferenced) {
        auto base = *base_attack(a);
        row.cells.push_back(
            calibrate(try_score(base, r, Role::target, cfg), try_score(base, r, Role::shadow, cfg)));
      }
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string score_table_to_csv(const ScoreTable& table) {
  std::string out = "sample_id,label";
  for (const auto& c : table.columns) {
    out += ',';
    out += c;
  }
  out += '\n';
  for (const auto& row : table.rows) {
    out += row.sample_id;
    out += ',';
    out += to_string(row.label);
    for (const auto& cell : row.cells) {
      out += ',';
      if (cell) out += format_double(*cell);
    }
    out += '\n';
  }
  return out;
}

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

}  // namespace

ScoreTable score_table_from_csv(std::string_view csv) {
  ScoreTable table;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  bool header = true;
  while (pos < csv.size()) {
    std::size_t end = csv.find('\n', pos);
    if (end == std::string_view::npos) end = csv.size();
    std::string_view line = csv.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    auto fields = split_commas(line);
    if (header) {
      if (fields.size() < 2 || fields[0] != "sample_id" || fields[1] != "label") {
        throw ParseError(line_no, "score table header must start with sample_id,label");
      }
      for (std::size_t i = 2; i < fields.size(); ++i) table.columns.emplace_back(fields[i]);
      header = false;
      continue;
    }
    if (fields.size() != table.columns.size() + 2) {
      throw ParseError(line_no, "expected " + std::to_string(table.columns.size() + 2) + " fields");
    }
    auto label = parse_label(fields[1]);
    if (!label) throw ParseError(line_no, "unknown label '" + std::string(fields[1]) + "'");
    ScoreRow row{std::string(fields[0]), *label, {}};
    for (std::size_t i = 2; i < fields.size(); ++i) {
      if (fields[i].empty()) {
        row.cells.emplace_back(std::nullopt);
        continue;
      }
      double v = 0.0;
      auto res = std::from_chars(fields[i].data(), fields[i].data() + fields[i].size(), v);
      if (res.ec != std::errc() || res.ptr != fields[i].data() + fields[i].size() ||
          !std::isfinite(v)) {
        throw ParseError(line_no, "bad score '" + std::string(fields[i]) + "'");
      }
      row.cells.emplace_back(v);
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

nlohmann::ordered_json score_table_to_json(const ScoreTable& table) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  j["columns"] = table.columns;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : table.rows) {
    nlohmann::ordered_json r = nlohmann::ordered_json::object();
    r["sample_id"] = row.sample_id;
    r["label"] = std::string(to_string(row.label));
    nlohmann::ordered_json scores = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < row.cells.size(); ++i) {
      if (row.cells[i]) scores[table.columns[i]] = *row.cells[i];
    }
    r["scores"] = std::move(scores);
    rows.push_back(std::move(r));
  }
  j["rows"] = std::move(rows);
  return j;
}

}  // namespace leakprobe
