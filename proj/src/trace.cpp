#include "leakprobe/trace.hpp"

#include <zlib.h>

#include <cmath>
#include <set>
#include <sstream>

#include "leakprobe/error.hpp"

namespace leakprobe {

using ojson = nlohmann::ordered_json;

std::string_view to_string(Role role) {
  switch (role) {
    case Role::target: return "target";
    case Role::pretrained: return "pretrained";
    case Role::shadow: return "shadow";
    case Role::selfprompt: return "selfprompt";
  }
  return "?";
}

std::string_view to_string(Label label) {
  switch (label) {
    case Label::member: return "member";
    case Label::nonmember: return "nonmember";
    case Label::unknown: return "unknown";
  }
  return "?";
}

std::optional<Role> parse_role(std::string_view s) {
  for (Role r : kAllRoles) {
    if (to_string(r) == s) return r;
  }
  return std::nullopt;
}

std::optional<Label> parse_label(std::string_view s) {
  for (Label l : {Label::member, Label::nonmember, Label::unknown}) {
    if (to_string(l) == s) return l;
  }
  return std::nullopt;
}

double mean_nll(const std::vector<TokenStat>& tokens) {
  double sum = 0.0;
  for (const auto& t : tokens) sum += t.lp;
  return -sum / static_cast<double>(tokens.size());
}

namespace {

void check_losses(const SampleRecord& r, const std::optional<std::vector<double>>& losses,
                  const char* what) {
  if (!losses) return;
  if (losses->empty()) {
    throw ValidationError(r.sample_id, std::string(what) + " present but empty");
  }
  for (double v : *losses) {
    if (!std::isfinite(v) || v < 0.0) {
      throw ValidationError(r.sample_id, std::string(what) + " must be finite and >= 0");
    }
  }
}

void check_norm(const SampleRecord& r, const std::optional<double>& v, const char* what) {
  if (v && (!std::isfinite(*v) || *v < 0.0)) {
    throw ValidationError(r.sample_id, std::string(what) + " must be finite and >= 0");
  }
}

}  // namespace

void validate(const SampleRecord& r) {
  if (r.sample_id.empty()) throw ValidationError(r.sample_id, "empty sample_id");
  if (r.zlib_len <= 0) throw ValidationError(r.sample_id, "zlib_len must be > 0");
  if (r.n_tokens < 2) throw ValidationError(r.sample_id, "n_tokens must be >= 2");
  if (r.label != Label::unknown && !r.find(Role::target)) {
    throw ValidationError(r.sample_id, "labeled record without target trace");
  }
  for (const auto& [role, t] : r.traces) {
    if (t.role != role) throw ValidationError(r.sample_id, "trace role does not match its key");
    if (static_cast<std::int64_t>(t.tokens.size()) != r.n_tokens - 1) {
      throw ValidationError(r.sample_id, "token count must be n_tokens - 1 for role " +
                                             std::string(to_string(role)));
    }
    for (const auto& tok : t.tokens) {
      if (!std::isfinite(tok.lp) || !std::isfinite(tok.mu) || !std::isfinite(tok.sigma)) {
        throw ValidationError(r.sample_id, "non-finite token statistic");
      }
      if (tok.lp > 0.0) throw ValidationError(r.sample_id, "lp must be <= 0");
      if (tok.sigma < 0.0) throw ValidationError(r.sample_id, "sigma must be >= 0");
    }
    if (!std::isfinite(t.loss) || t.loss < 0.0) {
      throw ValidationError(r.sample_id, "loss must be finite and >= 0");
    }
    if (std::abs(t.loss - mean_nll(t.tokens)) > kLossTokenTolerance) {
      throw ValidationError(r.sample_id, "loss/token mismatch");
    }
    if (t.gradnorm_theta && role != Role::target) {
      throw ValidationError(r.sample_id, "gradnorm_theta undefined for this role");
    }
    check_norm(r, t.gradnorm_theta, "gradnorm_theta");
    check_norm(r, t.gradnorm_x, "gradnorm_x");
    check_losses(r, t.neighbor_losses, "neighbor_losses");
    check_losses(r, t.mope_losses, "mope_losses");
  }
}

void validate(const TraceSet& set) {
  std::set<std::string> seen;
  for (const auto& r : set.records) {
    if (!seen.insert(r.sample_id).second) throw ValidationError(r.sample_id, "duplicate sample_id");
    validate(r);
  }
}

// ---------------------------------------------------------------------------
// JSON Lines

namespace {

const ojson& require(const ojson& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(line, std::string("missing key '") + key + "'");
  return *it;
}

double as_double(const ojson& v, const char* what, std::size_t line) {
  if (!v.is_number()) throw ParseError(line, std::string(what) + " must be a number");
  return v.get<double>();
}

std::int64_t as_int(const ojson& v, const char* what, std::size_t line) {
  if (!v.is_number_integer()) throw ParseError(line, std::string(what) + " must be an integer");
  return v.get<std::int64_t>();
}

std::vector<double> as_double_list(const ojson& v, const char* what, std::size_t line) {
  if (!v.is_array()) throw ParseError(line, std::string(what) + " must be an array");
  std::vector<double> out;
  out.reserve(v.size());
  for (const auto& x : v) out.push_back(as_double(x, what, line));
  return out;
}

ModelTrace trace_from_json(Role role, const ojson& j, std::size_t line) {
  if (!j.is_object()) throw ParseError(line, "trace must be an object");
  ModelTrace t;
  t.role = role;
  t.loss = as_double(require(j, "loss", line), "loss", line);
  const auto& toks = require(j, "tokens", line);
  if (!toks.is_array()) throw ParseError(line, "tokens must be an array");
  t.tokens.reserve(toks.size());
  for (const auto& tok : toks) {
    if (!tok.is_object()) throw ParseError(line, "token entry must be an object");
    t.tokens.push_back({as_double(require(tok, "lp", line), "lp", line),
                        as_double(require(tok, "mu", line), "mu", line),
                        as_double(require(tok, "sigma", line), "sigma", line)});
  }
  if (auto it = j.find("gradnorm_theta"); it != j.end()) {
    t.gradnorm_theta = as_double(*it, "gradnorm_theta", line);
  }
  if (auto it = j.find("gradnorm_x"); it != j.end()) {
    t.gradnorm_x = as_double(*it, "gradnorm_x", line);
  }
  if (auto it = j.find("neighbor_losses"); it != j.end()) {
    t.neighbor_losses = as_double_list(*it, "neighbor_losses", line);
  }
  if (auto it = j.find("mope_losses"); it != j.end()) {
    t.mope_losses = as_double_list(*it, "mope_losses", line);
  }
  return t;
}

ojson trace_to_json(const ModelTrace& t) {
  ojson j = ojson::object();
  j["loss"] = t.loss;
  ojson toks = ojson::array();
  for (const auto& tok : t.tokens) {
    ojson e = ojson::object();
    e["lp"] = tok.lp;
    e["mu"] = tok.mu;
    e["sigma"] = tok.sigma;
    toks.push_back(std::move(e));
  }
  j["tokens"] = std::move(toks);
  if (t.gradnorm_theta) j["gradnorm_theta"] = *t.gradnorm_theta;
  if (t.gradnorm_x) j["gradnorm_x"] = *t.gradnorm_x;
  if (t.neighbor_losses) j["neighbor_losses"] = *t.neighbor_losses;
  if (t.mope_losses) j["mope_losses"] = *t.mope_losses;
  return j;
}

SampleRecord record_from_json(const ojson& j, std::size_t line) {
  if (!j.is_object()) throw ParseError(line, "record must be an object");
  SampleRecord r;
  const auto& id = require(j, "sample_id", line);
  if (!id.is_string()) throw ParseError(line, "sample_id must be a string");
  r.sample_id = id.get<std::string>();
  const auto& label = require(j, "label", line);
  if (!label.is_string()) throw ParseError(line, "label must be a string");
  auto parsed = parse_label(label.get<std::string>());
  if (!parsed) throw ParseError(line, "unknown label '" + label.get<std::string>() + "'");
  r.label = *parsed;
  r.zlib_len = as_int(require(j, "zlib_len", line), "zlib_len", line);
  r.n_tokens = as_int(require(j, "n_tokens", line), "n_tokens", line);
  const auto& traces = require(j, "traces", line);
  if (!traces.is_object()) throw ParseError(line, "traces must be an object");
  for (const auto& [key, value] : traces.items()) {
    auto role = parse_role(key);
    if (!role) throw ParseError(line, "unknown role '" + key + "'");
    r.traces.emplace(*role, trace_from_json(*role, value, line));
  }
  return r;
}

ojson record_to_json(const SampleRecord& r) {
  ojson j = ojson::object();
  j["sample_id"] = r.sample_id;
  j["label"] = std::string(to_string(r.label));
  j["zlib_len"] = r.zlib_len;
  j["n_tokens"] = r.n_tokens;
  ojson traces = ojson::object();
  for (Role role : kAllRoles) {
    if (const auto* t = r.find(role)) traces[std::string(to_string(role))] = trace_to_json(*t);
  }
  j["traces"] = std::move(traces);
  return j;
}

}  // namespace

TraceSet parse_trace_file(std::string_view text) {
  TraceSet set;
  std::size_t line_no = 0;
  bool have_manifest = false;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;

    ojson j;
    try {
      j = ojson::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, std::string("malformed JSON: ") + e.what());
    }
    if (!have_manifest) {
      if (!j.is_object() || !j.contains("format") || j["format"] != kTraceFormat) {
        throw ParseError(line_no, "first line must be a manifest with format \"" +
                                      std::string(kTraceFormat) + "\"");
      }
      set.manifest = j.contains("meta") ? j["meta"] : ojson::object();
      have_manifest = true;
      continue;
    }
    set.records.push_back(record_from_json(j, line_no));
  }
  validate(set);
  return set;
}

std::string write_trace_file(const TraceSet& set) {
  std::string out;
  ojson head = ojson::object();
  head["format"] = std::string(kTraceFormat);
  head["meta"] = set.manifest;
  out += head.dump();
  out += '\n';
  for (const auto& r : set.records) {
    out += record_to_json(r).dump();
    out += '\n';
  }
  return out;
}

std::int64_t zlib_entropy(std::string_view text) {
  uLongf cap = compressBound(static_cast<uLong>(text.size()));
  std::string buf(cap, '\0');
  int rc = compress2(reinterpret_cast<Bytef*>(buf.data()), &cap,
                     reinterpret_cast<const Bytef*>(text.data()), static_cast<uLong>(text.size()), 6);
  if (rc != Z_OK) throw std::runtime_error("zlib compress2 failed");
  return static_cast<std::int64_t>(cap);
}

}  // namespace leakprobe
