#include "leakprobe/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "leakprobe/attacks.hpp"
#include "leakprobe/error.hpp"
#include "leakprobe/evaluation.hpp"
#include "leakprobe/toylab/checkpoint.hpp"
#include "leakprobe/toylab/fixture.hpp"

#ifndef LEAKPROBE_VERSION
#define LEAKPROBE_VERSION "0.0.0"
#endif

namespace leakprobe::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using namespace leakprobe::toylab;

const char* version() { return LEAKPROBE_VERSION; }

namespace {

// Thrown for argument combinations CLI11 cannot express; maps to exit 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ojson read_json(const std::string& path) {
  try {
    return ojson::parse(read_text(path));
  } catch (const ojson::parse_error& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
}

struct Context {
  std::vector<std::string> argv;  // subcommand and its arguments, without --out-dir
  std::string subcommand;
  fs::path out_dir;
  std::ostream* out = nullptr;
  ojson seeds = ojson::object();
  ojson config = ojson::object();
  ojson inputs = ojson::array();
  ojson outputs = ojson::array();
  ojson extra = ojson::object();

  fs::path resolve(const std::string& path) const {
    fs::path p(path);
    return p.is_absolute() ? p : out_dir / p;
  }

  void input(const std::string& path) { inputs.push_back(path); }

  // Writes `text` to an output path and records it for the manifest.
  void write(const std::string& path, const std::string& text) {
    fs::path p = resolve(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f) throw ConfigError("cannot write '" + p.string() + "'");
    f << text;
    if (!f) throw ConfigError("write failed for '" + p.string() + "'");
    outputs.push_back(p.string());
  }

  // Writes to `path` when given, else to stdout.
  void emit(const std::optional<std::string>& path, const std::string& text) {
    if (path) {
      write(*path, text);
    } else {
      *out << text;
    }
  }

  ojson manifest() const {
    ojson m = ojson::object();
    m["tool"] = "leakprobe";
    m["version"] = version();
    m["subcommand"] = subcommand;
    m["argv"] = argv;
    m["cwd"] = fs::current_path().string();
    m["out_dir"] = fs::absolute(out_dir).string();
    m["seeds"] = seeds;
    m["config"] = config;
    m["inputs"] = inputs;
    m["outputs"] = outputs;
    for (const auto& [k, v] : extra.items()) m[k] = v;
    return m;
  }

  void write_manifests() const {
    const std::string text = manifest().dump(2) + "\n";
    for (const auto& o : outputs) {
      std::ofstream f(o.get<std::string>() + ".manifest.json", std::ios::binary);
      if (!f) throw ConfigError("cannot write manifest beside '" + o.get<std::string>() + "'");
      f << text;
    }
  }
};

std::string format_json(const ojson& j) { return j.dump(2) + "\n"; }

void add_format(CLI::App* cmd, std::string& format) {
  cmd->add_option("--format", format, "Output format")
      ->check(CLI::IsMember({"json", "csv"}))
      ->capture_default_str();
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::uint64_t seed = 0;
  std::string source = "domain";
  int count = 256;
  int min_len = 4;
  int max_len = 6;
  ChainParams chain;
  std::vector<std::string> out;
  std::vector<int> split;
};

void run_synth(Context& ctx, const SynthArgs& a) {
  CorpusParams p;
  p.chain = a.chain;
  p.source = parse_source(a.source);
  p.count = a.count;
  p.min_len = a.min_len;
  p.max_len = a.max_len;
  std::vector<int> split = a.split;
  if (split.empty()) split = {a.count};
  if (split.size() != a.out.size()) throw UsageError("--split needs one count per --out path");
  long total = 0;
  for (int s : split) {
    if (s < 0) throw UsageError("--split counts must be >= 0");
    total += s;
  }
  if (total != a.count) throw UsageError("--split counts must sum to --count");

  Corpus corpus = gen_corpus(a.seed, p);
  ctx.seeds["seed"] = a.seed;
  ctx.config = {{"source", a.source}, {"count", a.count}, {"min_len", a.min_len},
                {"max_len", a.max_len}, {"split", split},
                {"chain",
                 {{"vocab", a.chain.vocab},
                  {"cluster_size", a.chain.cluster_size},
                  {"concentration", a.chain.concentration},
                  {"general_stay", a.chain.general_stay},
                  {"domain_stay", a.chain.domain_stay},
                  {"seed", a.chain.seed}}}};
  std::size_t pos = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    Corpus part(corpus.begin() + static_cast<std::ptrdiff_t>(pos),
                corpus.begin() + static_cast<std::ptrdiff_t>(pos + static_cast<std::size_t>(split[i])));
    pos += static_cast<std::size_t>(split[i]);
    ctx.write(a.out[i], write_corpus(part));
  }
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainArgs {
  std::uint64_t seed = 0;
  std::string corpus;
  ToyLMConfig model;
  PretrainConfig train;
  std::string out;
};

void run_pretrain(Context& ctx, PretrainArgs a) {
  ctx.input(a.corpus);
  Corpus corpus = read_corpus(read_text(a.corpus));
  a.train.seed = a.seed;
  a.model.seed = derive_seed(a.seed, 0);
  PretrainResult r = pretrain(ToyLM::init(a.model), corpus, a.train);
  ctx.seeds = {{"seed", a.seed}, {"init", a.model.seed}};
  ctx.config = {{"vocab", a.model.vocab}, {"embed", a.model.embed}, {"hidden", a.model.hidden},
                {"window", a.model.window}, {"epochs", a.train.epochs}, {"batch", a.train.batch},
                {"lr", a.train.lr}};
  ctx.extra["epoch_loss"] = r.epoch_loss;
  ctx.write(a.out, model_to_json(r.model).dump() + "\n");
}

// ---------------------------------------------------------------------------
// finetune

struct FinetuneArgs {
  std::uint64_t seed = 0;
  std::string model;
  std::optional<std::string> corpus;
  std::optional<std::string> val;
  TrainConfig train;
  std::string modules = "a,u,d";
  bool no_match = false;
  std::optional<double> dp_clip;
  std::optional<double> dp_noise;
  std::optional<double> dp_epsilon;
  double dp_delta = 1e-5;
  std::string out;
  std::optional<std::string> log;
  std::string format = "csv";
  // self-prompt mode
  bool self_prompt = false;
  std::optional<std::string> from;
  std::optional<std::string> prompts;
  int prompt_len = 2;
  int continuation_len = 3;
  int samples = 256;
};

std::string epoch_log_text(const std::vector<EpochStats>& log, const std::string& format) {
  if (format == "json") {
    ojson arr = ojson::array();
    for (const auto& e : log) {
      ojson o = ojson::object();
      o["epoch"] = e.epoch;
      o["ppl_ft"] = e.ppl_ft;
      if (e.ppl_val) {
        o["ppl_val"] = *e.ppl_val;
        o["gap"] = gap(*e.ppl_val, e.ppl_ft);
      }
      o["adapter_norm"] = e.adapter_norm;
      arr.push_back(std::move(o));
    }
    return format_json(arr);
  }
  std::string s = "epoch,ppl_ft,ppl_val,gap,adapter_norm\n";
  for (const auto& e : log) {
    s += std::to_string(e.epoch) + "," + format_double(e.ppl_ft) + ",";
    if (e.ppl_val) s += format_double(*e.ppl_val) + "," + format_double(gap(*e.ppl_val, e.ppl_ft));
    else s += ",";
    s += "," + format_double(e.adapter_norm) + "\n";
  }
  return s;
}

void run_finetune_cmd(Context& ctx, FinetuneArgs a) {
  ctx.input(a.model);
  ToyLM model = load_model(a.model);
  a.train.modules = ModuleSet::parse(a.modules);
  a.train.match_parameters = !a.no_match;
  a.train.seed = a.seed;
  ctx.seeds["seed"] = a.seed;

  if (a.self_prompt) {
    if (!a.from || !a.prompts) throw UsageError("--self-prompt needs --from and --prompts");
    if (a.dp_clip || a.dp_noise || a.dp_epsilon) throw UsageError("--self-prompt does not take DP flags");
    ctx.input(*a.from);
    ctx.input(*a.prompts);
    LoRAAdapterSet ft = load_adapters(*a.from);
    Corpus prompts = read_corpus(read_text(*a.prompts));
    SelfPromptConfig sc;
    sc.prompt_len = a.prompt_len;
    sc.continuation_len = a.continuation_len;
    sc.n_samples = a.samples;
    sc.train = a.train;
    sc.seed = a.seed;
    SelfPromptResult r = build_self_prompt(model, ft, prompts, sc);
    ctx.config = train_config_to_json(a.train);
    ctx.config["self_prompt"] = {{"prompt_len", a.prompt_len},
                                 {"continuation_len", a.continuation_len},
                                 {"samples", a.samples}};
    ctx.write(a.out, adapters_to_json(r.adapters).dump() + "\n");
    return;
  }

  if (!a.corpus) throw UsageError("finetune needs --corpus (or --self-prompt)");
  ctx.input(*a.corpus);
  Corpus corpus = read_corpus(read_text(*a.corpus));
  std::optional<Corpus> val;
  if (a.val) {
    ctx.input(*a.val);
    val = read_corpus(read_text(*a.val));
  }

  if (a.dp_noise && a.dp_epsilon) throw UsageError("give at most one of --dp-noise and --dp-epsilon");
  std::size_t steps = steps_for(corpus.size(), a.train.epochs, a.train.batch);
  if (a.dp_clip || a.dp_noise || a.dp_epsilon) {
    DPConfig dp;
    dp.clip = a.dp_clip.value_or(1.0);
    dp.delta = a.dp_delta;
    if (a.dp_epsilon) dp.noise = dp_noise_for_epsilon(*a.dp_epsilon, steps, dp.delta);
    else dp.noise = a.dp_noise.value_or(0.0);
    a.train.dp = dp;
    ctx.extra["dp_epsilon"] = dp.noise > 0.0 ? ojson(dp_epsilon(steps, dp.noise, dp.delta)) : ojson(nullptr);
  }
  TrainResult r = train(model, corpus, val ? &*val : nullptr, a.train);
  ctx.config = train_config_to_json(a.train);
  ctx.config["rank_effective"] = r.adapters.rank;
  ctx.extra["steps"] = r.steps;
  ctx.write(a.out, adapters_to_json(r.adapters).dump() + "\n");
  if (a.log) ctx.write(*a.log, epoch_log_text(r.log, a.format));
}

// ---------------------------------------------------------------------------
// extract

struct ExtractArgs {
  std::uint64_t seed = 0;
  std::string model;
  std::string target;
  std::optional<std::string> shadow;
  std::optional<std::string> selfprompt;
  bool no_pretrained = false;
  std::optional<std::string> members;
  std::optional<std::string> nonmembers;
  std::optional<std::string> unknown;
  ExtractOptions opts;
  bool no_gradients = false;
  std::string out;
};

void run_extract(Context& ctx, ExtractArgs a) {
  if (!a.members && !a.nonmembers && !a.unknown) {
    throw UsageError("extract needs at least one of --members, --nonmembers, --unknown");
  }
  ctx.input(a.model);
  ToyLM model = load_model(a.model);
  ctx.input(a.target);
  LoRAAdapterSet target = load_adapters(a.target);
  std::optional<LoRAAdapterSet> shadow, selfprompt;
  if (a.shadow) {
    ctx.input(*a.shadow);
    shadow = load_adapters(*a.shadow);
  }
  if (a.selfprompt) {
    ctx.input(*a.selfprompt);
    selfprompt = load_adapters(*a.selfprompt);
  }

  auto load = [&](const std::optional<std::string>& p) {
    if (!p) return Corpus{};
    ctx.input(*p);
    return read_corpus(read_text(*p));
  };
  Corpus members = load(a.members);
  Corpus nonmembers = load(a.nonmembers);
  Corpus unknown = load(a.unknown);
  std::vector<LabeledSequence> samples = label_samples(members, nonmembers);
  for (std::size_t i = 0; i < unknown.size(); ++i) {
    samples.push_back({"u" + std::to_string(i), unknown[i], Label::unknown});
  }

  std::vector<RoleModel> roles{{Role::target, &model, &target}};
  if (!a.no_pretrained) roles.push_back({Role::pretrained, &model, nullptr});
  if (shadow) roles.push_back({Role::shadow, &model, &*shadow});
  if (selfprompt) roles.push_back({Role::selfprompt, &model, &*selfprompt});

  a.opts.seed = a.seed;
  a.opts.gradients = !a.no_gradients;
  ctx.seeds["seed"] = a.seed;
  ctx.config = {{"neighbors", a.opts.neighbors},   {"replace", a.opts.replace},
                {"mope_count", a.opts.mope_count}, {"mope_sigma", a.opts.mope_sigma},
                {"gradients", a.opts.gradients},   {"pretrained", !a.no_pretrained}};
  ojson meta = ojson::object();
  meta["tool"] = "leakprobe";
  meta["version"] = version();
  meta["model"] = a.model;
  meta["target"] = a.target;
  meta["extract"] = ctx.config;
  meta["seed"] = a.seed;
  TraceSet set = extract_trace(roles, samples, a.opts, meta);
  ctx.write(a.out, write_trace_file(set));
}

// ---------------------------------------------------------------------------
// attack / eval

struct AttackArgs {
  std::string traces;
  AttackConfig cfg;
  bool no_shadow = false;
  std::string format = "csv";
  std::optional<std::string> out;
};

std::string table_text(const ScoreTable& t, const std::string& format) {
  return format == "json" ? format_json(score_table_to_json(t)) : score_table_to_csv(t);
}

ojson attack_config_json(const AttackConfig& c) {
  return {{"k_percent", c.k_percent},
          {"sigma_floor", c.sigma_floor},
          {"zlib_literal", c.zlib_literal},
          {"shadow_columns", c.shadow_columns}};
}

void run_attack(Context& ctx, AttackArgs a) {
  a.cfg.shadow_columns = !a.no_shadow;
  a.cfg.validate();
  ctx.input(a.traces);
  TraceSet set = parse_trace_file(read_text(a.traces));
  ScoreTable table = run_attack_suite(set, a.cfg);
  ctx.config = attack_config_json(a.cfg);
  ctx.emit(a.out, table_text(table, a.format));
}

struct EvalArgs {
  std::optional<std::string> scores;
  std::optional<std::string> traces;
  AttackConfig attack;
  bool no_shadow = false;
  std::size_t bootstrap = 0;
  std::optional<std::uint64_t> seed;
  std::string spv_group = "referenced";
  bool ppl_exp = false;
  std::string format = "json";
  std::optional<std::string> out;
};

SpvGroup parse_spv_group(const std::string& s) {
  if (s == "referenced") return SpvGroup::referenced;
  if (s == "nonreferenced") return SpvGroup::nonreferenced;
  return SpvGroup::none;
}

std::string report_text(const AUCReport& r, const std::string& format) {
  return format == "json" ? format_json(report_to_json(r)) : report_to_csv(r);
}

void run_eval(Context& ctx, EvalArgs a) {
  if (!a.scores && !a.traces) throw UsageError("eval needs --scores or --traces");
  if (a.bootstrap > 0 && !a.seed) throw UsageError("--bootstrap needs --seed");
  a.attack.shadow_columns = !a.no_shadow;
  a.attack.validate();

  std::optional<TraceSet> set;
  if (a.traces) {
    ctx.input(*a.traces);
    set = parse_trace_file(read_text(*a.traces));
  }
  ScoreTable table;
  if (a.scores) {
    ctx.input(*a.scores);
    table = score_table_from_csv(read_text(*a.scores));
  } else {
    table = run_attack_suite(*set, a.attack);
  }
  EvalOptions opts;
  opts.bootstrap = a.bootstrap;
  opts.seed = a.seed.value_or(0);
  opts.spv_group = parse_spv_group(a.spv_group);
  opts.ppl_exp = a.ppl_exp;
  AUCReport report = evaluate(table, opts);
  if (set) attach_utility(report, *set, a.ppl_exp);
  if (a.seed) ctx.seeds["seed"] = *a.seed;
  ctx.config = {{"bootstrap", a.bootstrap}, {"spv_group", a.spv_group}, {"ppl_exp", a.ppl_exp}};
  if (!a.scores) ctx.config["attack"] = attack_config_json(a.attack);
  ctx.emit(a.out, report_text(report, a.format));
}

// ---------------------------------------------------------------------------
// sweep

struct SweepArgs {
  std::string kind;
  std::uint64_t seed = 0;
  std::optional<std::string> config;
  int max_epochs = 10;
  int epochs = 3;
  std::vector<std::string> values;
  double dp_clip = 1.0;
  double dp_delta = 1e-5;
  bool include_epoch0 = false;
  std::optional<std::string> save_reports;
  std::optional<std::string> plot_out;
  std::string format = "csv";
  std::optional<std::string> out;
};

struct SweepRow {
  std::string kind;
  std::string setting;
  int epoch = 0;
  std::optional<double> epsilon;
  AUCReport report;
};

double parse_number(const std::string& s, const char* what) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError(std::string("bad ") + what + " value '" + s + "'");
  }
}

std::vector<std::string> sweep_defaults(const std::string& kind) {
  if (kind == "dropout") return {"0.05", "0.1", "0.3", "0.5", "0.9"};
  if (kind == "weight-decay") return {"0", "0.001", "0.1"};
  if (kind == "dp") return {"1", "10", "100"};
  if (kind == "modules") return {"a,u,d", "a", "u,d"};
  return {};
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::vector<std::string> attack_cols;
  for (const auto& r : rows) {
    for (const auto& a : r.report.attacks) {
      if (std::find(attack_cols.begin(), attack_cols.end(), a.attack) == attack_cols.end()) {
        attack_cols.push_back(a.attack);
      }
    }
  }
  std::string s =
      "kind,setting,epoch,epsilon,ppl_ft,ppl_val,gap,best_nonref_attack,best_nonref_auc,"
      "best_ptref_attack,best_ptref_auc,best_auc";
  for (const auto& c : attack_cols) s += "," + c;
  s += "\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  for (const auto& r : rows) {
    const auto& rep = r.report;
    s += r.kind + ",\"" + r.setting + "\"," + std::to_string(r.epoch) + "," + opt(r.epsilon) + ",";
    if (rep.utility) {
      s += format_double(rep.utility->ppl_ft) + "," + format_double(rep.utility->ppl_val) + "," +
           format_double(rep.utility->gap);
    } else {
      s += ",,";
    }
    s += "," + (rep.best.nonref ? rep.best.nonref->attack + "," + format_double(rep.best.nonref->auc) : ",");
    s += "," + (rep.best.ptref ? rep.best.ptref->attack + "," + format_double(rep.best.ptref->auc) : ",");
    s += "," + opt(rep.best_overall());
    for (const auto& c : attack_cols) s += "," + opt(rep.auc_of(c));
    s += "\n";
  }
  return s;
}

ojson sweep_json(const std::vector<SweepRow>& rows) {
  ojson arr = ojson::array();
  for (const auto& r : rows) {
    ojson o = ojson::object();
    o["kind"] = r.kind;
    o["setting"] = r.setting;
    o["epoch"] = r.epoch;
    o["epsilon"] = r.epsilon ? ojson(*r.epsilon) : ojson(nullptr);
    o["best_auc"] = r.report.best_overall() ? ojson(*r.report.best_overall()) : ojson(nullptr);
    o["report"] = report_to_json(r.report);
    arr.push_back(std::move(o));
  }
  return arr;
}

std::string plot_csv(const std::vector<SweepRow>& rows) {
  std::string s = "epoch,ppl_ft,ppl_val,gap,loss_auc,best_auc\n";
  for (const auto& r : rows) {
    const auto& u = r.report.utility;
    auto loss = r.report.auc_of("loss");
    auto best = r.report.best_overall();
    s += std::to_string(r.epoch) + "," + (u ? format_double(u->ppl_ft) : "") + "," +
         (u ? format_double(u->ppl_val) : "") + "," + (u ? format_double(u->gap) : "") + "," +
         (loss ? format_double(*loss) : "") + "," + (best ? format_double(*best) : "") + "\n";
  }
  return s;
}

std::string setting_slug(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-') ? c : '_';
  return out;
}

void run_sweep(Context& ctx, SweepArgs a) {
  FixtureConfig fc = a.config ? fixture_from_json(read_json(*a.config)) : FixtureConfig::reference();
  if (a.config) ctx.input(*a.config);
  fc.reseed(a.seed);
  fc.validate();
  ctx.seeds = {{"seed", a.seed},
               {"pretrain", fc.pretrain.seed},
               {"finetune", fc.finetune.seed},
               {"extract", fc.extract.seed},
               {"bootstrap", fc.eval.seed}};
  ctx.config = fixture_to_json(fc);
  ctx.config["sweep"] = a.kind;

  World world = build_world(fc);
  std::vector<SweepRow> rows;

  auto run_setting = [&](const std::string& setting, TrainConfig tc, std::vector<int> evals,
                         std::optional<double> eps) {
    RunResult r = run_finetune(world, tc, RunOptions{evals, false});
    for (auto& er : r.reports) rows.push_back({a.kind, setting, er.epoch, eps, std::move(er.report)});
  };

  if (a.kind == "epochs") {
    if (!a.values.empty()) throw UsageError("sweep epochs takes --max, not --values");
    if (a.max_epochs < 1) throw UsageError("--max must be >= 1");
    std::vector<int> evals;
    for (int e = a.include_epoch0 ? 0 : 1; e <= a.max_epochs; ++e) evals.push_back(e);
    TrainConfig tc = fc.finetune;
    tc.epochs = a.max_epochs;
    run_setting("default", tc, evals, std::nullopt);
  } else {
    std::vector<std::string> values = a.values.empty() ? sweep_defaults(a.kind) : a.values;
    for (const auto& v : values) {
      TrainConfig tc = fc.finetune;
      tc.epochs = a.epochs;
      std::optional<double> eps;
      if (a.kind == "dropout") {
        tc.dropout = parse_number(v, "dropout");
      } else if (a.kind == "weight-decay") {
        tc.weight_decay = parse_number(v, "weight-decay");
      } else if (a.kind == "dp") {
        std::size_t steps = steps_for(world.members.size(), tc.epochs, tc.batch);
        DPConfig dp;
        dp.clip = a.dp_clip;
        dp.delta = a.dp_delta;
        if (v == "none") {
          // no DP: reference row
        } else {
          eps = parse_number(v, "epsilon");
          dp.noise = dp_noise_for_epsilon(*eps, steps, dp.delta);
          tc.dp = dp;
        }
      } else if (a.kind == "modules") {
        tc.modules = ModuleSet::parse(v);
      }
      tc.validate();
      run_setting(v, tc, {tc.epochs}, eps);
    }
  }

  if (a.save_reports) {
    for (const auto& r : rows) {
      std::string name = *a.save_reports + "/report_" + a.kind + "_" + setting_slug(r.setting) + "_ep" +
                         std::to_string(r.epoch) + ".json";
      ctx.write(name, format_json(report_to_json(r.report)));
    }
  }
  if (a.plot_out) {
    if (a.kind != "epochs") throw UsageError("--plot-out applies to sweep epochs");
    ctx.write(*a.plot_out, plot_csv(rows));
  }
  ctx.emit(a.out, a.format == "json" ? format_json(sweep_json(rows)) : sweep_csv(rows));
}

// ---------------------------------------------------------------------------
// report

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string format = "csv";
  std::optional<std::string> out;
};

void run_report(Context& ctx, const ReportArgs& a) {
  std::vector<SweepRow> rows;
  for (const auto& path : a.inputs) {
    ctx.input(path);
    ojson j = read_json(path);
    if (j.is_array()) {
      // A sweep --format json document.
      for (const auto& o : j) {
        SweepRow r;
        r.kind = o.at("kind").get<std::string>();
        r.setting = o.at("setting").get<std::string>();
        r.epoch = o.at("epoch").get<int>();
        if (!o.at("epsilon").is_null()) r.epsilon = o["epsilon"].get<double>();
        r.report = report_from_json(o.at("report"));
        rows.push_back(std::move(r));
      }
    } else {
      SweepRow r;
      r.kind = "report";
      r.setting = fs::path(path).stem().string();
      r.report = report_from_json(j);
      rows.push_back(std::move(r));
    }
  }
  ctx.emit(a.out, a.format == "json" ? format_json(sweep_json(rows)) : sweep_csv(rows));
}

// ---------------------------------------------------------------------------

std::vector<std::string> strip_out_dir(const std::vector<std::string>& args) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--out-dir") {
      ++i;
      continue;
    }
    if (args[i].rfind("--out-dir=", 0) == 0) continue;
    out.push_back(args[i]);
  }
  return out;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Membership-inference audits for LoRA fine-tuned language models", "leakprobe"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version());
  std::optional<std::string> out_dir_flag;
  app.add_option("--out-dir", out_dir_flag,
                 std::string("Directory for relative output paths (default: $") + kOutDirEnv + " or .)");
  app.fallthrough();

  // synth
  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a token corpus from the Markov chain");
  c_synth->add_option("--seed", synth.seed, "Sampling seed")->required();
  c_synth->add_option("--source", synth.source)->check(CLI::IsMember({"general", "domain"}))->capture_default_str();
  c_synth->add_option("--count", synth.count)->check(CLI::NonNegativeNumber)->capture_default_str();
  c_synth->add_option("--min-len", synth.min_len)->capture_default_str();
  c_synth->add_option("--max-len", synth.max_len)->capture_default_str();
  c_synth->add_option("--vocab", synth.chain.vocab)->capture_default_str();
  c_synth->add_option("--cluster-size", synth.chain.cluster_size)->capture_default_str();
  c_synth->add_option("--concentration", synth.chain.concentration)->capture_default_str();
  c_synth->add_option("--general-stay", synth.chain.general_stay)->capture_default_str();
  c_synth->add_option("--domain-stay", synth.chain.domain_stay)->capture_default_str();
  c_synth->add_option("--chain-seed", synth.chain.seed, "Seed fixing the transition matrices")->capture_default_str();
  c_synth->add_option("--out", synth.out, "Output corpus file(s)")->required();
  c_synth->add_option("--split", synth.split, "Counts per --out file, in order");

  // pretrain
  PretrainArgs pre;
  auto* c_pre = app.add_subcommand("pretrain", "Train a toy backbone from scratch");
  c_pre->add_option("--seed", pre.seed)->required();
  c_pre->add_option("--corpus", pre.corpus)->required();
  c_pre->add_option("--epochs", pre.train.epochs)->capture_default_str();
  c_pre->add_option("--batch", pre.train.batch)->capture_default_str();
  c_pre->add_option("--lr", pre.train.lr)->capture_default_str();
  c_pre->add_option("--vocab", pre.model.vocab)->capture_default_str();
  c_pre->add_option("--embed", pre.model.embed)->capture_default_str();
  c_pre->add_option("--hidden", pre.model.hidden)->capture_default_str();
  c_pre->add_option("--window", pre.model.window)->capture_default_str();
  c_pre->add_option("--out", pre.out)->required();

  // finetune
  FinetuneArgs ft;
  auto* c_ft = app.add_subcommand("finetune", "Fine-tune LoRA adapters on a frozen backbone");
  c_ft->add_option("--seed", ft.seed)->required();
  c_ft->add_option("--model", ft.model)->required();
  c_ft->add_option("--corpus", ft.corpus, "Training (member) corpus");
  c_ft->add_option("--val", ft.val, "Validation corpus for PPL@val");
  c_ft->add_option("--epochs", ft.train.epochs)->capture_default_str();
  c_ft->add_option("--batch", ft.train.batch)->capture_default_str();
  c_ft->add_option("--lr", ft.train.lr)->capture_default_str();
  c_ft->add_option("--dropout", ft.train.dropout)->check(CLI::Range(0.0, 0.999999))->capture_default_str();
  c_ft->add_option("--weight-decay", ft.train.weight_decay)->check(CLI::NonNegativeNumber)->capture_default_str();
  c_ft->add_option("--dp-clip", ft.dp_clip, "Per-sample clipping norm C");
  c_ft->add_option("--dp-noise", ft.dp_noise, "Noise multiplier");
  c_ft->add_option("--dp-epsilon", ft.dp_epsilon, "Target loose epsilon; sets the noise multiplier");
  c_ft->add_option("--dp-delta", ft.dp_delta)->capture_default_str();
  c_ft->add_option("--modules", ft.modules, "Adapter modules, subset of a,u,d")->capture_default_str();
  c_ft->add_option("--rank", ft.train.rank, "Rank for the full a,u,d mask")->capture_default_str();
  c_ft->add_option("--alpha-per-rank", ft.train.alpha_per_rank)->capture_default_str();
  c_ft->add_flag("--no-match-parameters", ft.no_match, "Keep --rank for partial module masks");
  c_ft->add_option("--init-std", ft.train.init_std)->capture_default_str();
  c_ft->add_option("--out", ft.out)->required();
  c_ft->add_option("--log", ft.log, "Per-epoch PPL log");
  add_format(c_ft, ft.format);
  c_ft->add_flag("--self-prompt", ft.self_prompt, "Build a self-prompt reference instead");
  c_ft->add_option("--from", ft.from, "Fine-tuned adapters to sample from (self-prompt)");
  c_ft->add_option("--prompts", ft.prompts, "Prompt corpus (self-prompt)");
  c_ft->add_option("--prompt-len", ft.prompt_len)->capture_default_str();
  c_ft->add_option("--continuation-len", ft.continuation_len)->capture_default_str();
  c_ft->add_option("--samples", ft.samples)->capture_default_str();

  // extract
  ExtractArgs ex;
  auto* c_ex = app.add_subcommand("extract", "Extract a trace file from toy models");
  c_ex->add_option("--seed", ex.seed)->required();
  c_ex->add_option("--model", ex.model, "Backbone checkpoint")->required();
  c_ex->add_option("--target", ex.target, "Target adapters")->required();
  c_ex->add_option("--shadow", ex.shadow, "Shadow adapters");
  c_ex->add_option("--selfprompt", ex.selfprompt, "Self-prompt adapters");
  c_ex->add_flag("--no-pretrained", ex.no_pretrained, "Omit the pretrained role");
  c_ex->add_option("--members", ex.members);
  c_ex->add_option("--nonmembers", ex.nonmembers);
  c_ex->add_option("--unknown", ex.unknown);
  c_ex->add_option("--neighbors", ex.opts.neighbors)->capture_default_str();
  c_ex->add_option("--replace", ex.opts.replace, "Positions replaced per neighbor")->capture_default_str();
  c_ex->add_option("--mope-count", ex.opts.mope_count)->capture_default_str();
  c_ex->add_option("--mope-sigma", ex.opts.mope_sigma)->capture_default_str();
  c_ex->add_flag("--no-gradients", ex.no_gradients);
  c_ex->add_option("--out", ex.out)->required();

  // attack
  AttackArgs at;
  auto* c_at = app.add_subcommand("attack", "Score a trace file with every attack");
  c_at->add_option("--traces", at.traces)->required();
  c_at->add_option("--k-percent", at.cfg.k_percent)->capture_default_str();
  c_at->add_option("--sigma-floor", at.cfg.sigma_floor)->capture_default_str();
  c_at->add_flag("--zlib-literal", at.cfg.zlib_literal, "zlib score as |zlib| - loss");
  c_at->add_flag("--no-shadow-columns", at.no_shadow);
  add_format(c_at, at.format);
  c_at->add_option("--out", at.out, "Output file (default: stdout)");

  // eval
  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "AUC, group bests and PPL/GAP for a score table");
  c_ev->add_option("--scores", ev.scores, "Score table CSV");
  c_ev->add_option("--traces", ev.traces, "Trace file (scored directly when --scores is absent)");
  c_ev->add_option("--k-percent", ev.attack.k_percent)->capture_default_str();
  c_ev->add_option("--sigma-floor", ev.attack.sigma_floor)->capture_default_str();
  c_ev->add_flag("--zlib-literal", ev.attack.zlib_literal);
  c_ev->add_flag("--no-shadow-columns", ev.no_shadow);
  c_ev->add_option("--bootstrap", ev.bootstrap, "Bootstrap resamples (0: off)")->capture_default_str();
  c_ev->add_option("--seed", ev.seed, "Bootstrap seed");
  c_ev->add_option("--spv-group", ev.spv_group)
      ->check(CLI::IsMember({"referenced", "nonreferenced", "none"}))
      ->capture_default_str();
  c_ev->add_flag("--ppl-exp", ev.ppl_exp, "Report exp(mean NLL) instead of mean NLL");
  add_format(c_ev, ev.format);
  c_ev->add_option("--out", ev.out, "Output file (default: stdout)");

  // sweep
  SweepArgs sw;
  auto* c_sw = app.add_subcommand("sweep", "Run the reference fixture across one setting");
  c_sw->add_option("kind", sw.kind)
      ->required()
      ->check(CLI::IsMember({"epochs", "dropout", "weight-decay", "dp", "modules"}));
  c_sw->add_option("--seed", sw.seed)->required();
  c_sw->add_option("--config", sw.config, "Fixture JSON (stage seeds are re-derived from --seed)");
  c_sw->add_option("--max", sw.max_epochs, "Last epoch (sweep epochs)")->capture_default_str();
  c_sw->add_option("--epochs", sw.epochs, "Fine-tuning epochs per setting")->capture_default_str();
  c_sw->add_option("--values", sw.values, "Settings to run; dp takes epsilons or 'none'");
  c_sw->add_option("--dp-clip", sw.dp_clip)->capture_default_str();
  c_sw->add_option("--dp-delta", sw.dp_delta)->capture_default_str();
  c_sw->add_flag("--include-epoch0", sw.include_epoch0);
  c_sw->add_option("--save-reports", sw.save_reports, "Directory for per-row report JSON");
  c_sw->add_option("--plot-out", sw.plot_out, "Epoch vs PPL/AUC CSV (sweep epochs)");
  add_format(c_sw, sw.format);
  c_sw->add_option("--out", sw.out, "Output file (default: stdout)");

  // report
  ReportArgs rp;
  auto* c_rp = app.add_subcommand("report", "Merge report or sweep JSON files into one table");
  c_rp->add_option("inputs", rp.inputs)->required();
  add_format(c_rp, rp.format);
  c_rp->add_option("--out", rp.out, "Output file (default: stdout)");

  // seeds
  std::uint64_t seeds_seed = 0;
  auto* c_seeds = app.add_subcommand("seeds", "Print the stage seeds a sweep derives from --seed");
  c_seeds->add_option("--seed", seeds_seed)->required();

  // replay
  std::string manifest_path;
  auto* c_replay = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
  c_replay->add_option("manifest", manifest_path)->required();

  std::vector<const char*> cargv{"leakprobe"};
  for (const auto& a : args) cargv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  Context ctx;
  ctx.out = &out;
  ctx.argv = strip_out_dir(args);
  if (out_dir_flag) {
    ctx.out_dir = *out_dir_flag;
  } else if (const char* env = std::getenv(kOutDirEnv); env && *env) {
    ctx.out_dir = env;
  } else {
    ctx.out_dir = ".";
  }

  try {
    if (c_replay->parsed()) {
      ojson m = read_json(manifest_path);
      if (m.value("tool", "") != "leakprobe") throw ConfigError("'" + manifest_path + "' is not a leakprobe manifest");
      if (m.value("version", "") != version()) {
        err << "warning: manifest written by leakprobe " << m.value("version", "?") << ", running " << version()
            << "\n";
      }
      std::vector<std::string> replay_args;
      replay_args.push_back("--out-dir");
      replay_args.push_back(out_dir_flag ? fs::absolute(*out_dir_flag).string()
                                         : m.at("out_dir").get<std::string>());
      for (const auto& a : m.at("argv")) replay_args.push_back(a.get<std::string>());
      fs::path here = fs::current_path();
      fs::current_path(m.at("cwd").get<std::string>());
      int code = run(replay_args, out, err);
      fs::current_path(here);
      return code;
    }
    if (c_seeds->parsed()) {
      FixtureConfig fc = FixtureConfig::reference(seeds_seed);
      ojson j = {{"seed", seeds_seed},
                 {"general_corpus", stage_seed(seeds_seed, Stage::general_corpus)},
                 {"domain_corpus", stage_seed(seeds_seed, Stage::domain_corpus)},
                 {"pretrain", fc.pretrain.seed},
                 {"finetune", fc.finetune.seed},
                 {"extract", fc.extract.seed},
                 {"bootstrap", fc.eval.seed},
                 {"shadow", stage_seed(seeds_seed, Stage::shadow)},
                 {"selfprompt", fc.selfprompt_cfg.seed}};
      out << format_json(j);
      return kExitOk;
    }

    if (c_synth->parsed()) {
      ctx.subcommand = "synth";
      run_synth(ctx, synth);
    } else if (c_pre->parsed()) {
      ctx.subcommand = "pretrain";
      run_pretrain(ctx, pre);
    } else if (c_ft->parsed()) {
      ctx.subcommand = "finetune";
      run_finetune_cmd(ctx, ft);
    } else if (c_ex->parsed()) {
      ctx.subcommand = "extract";
      run_extract(ctx, ex);
    } else if (c_at->parsed()) {
      ctx.subcommand = "attack";
      run_attack(ctx, at);
    } else if (c_ev->parsed()) {
      ctx.subcommand = "eval";
      run_eval(ctx, ev);
    } else if (c_sw->parsed()) {
      ctx.subcommand = "sweep";
      run_sweep(ctx, sw);
    } else if (c_rp->parsed()) {
      ctx.subcommand = "report";
      run_report(ctx, rp);
    }
    ctx.write_manifests();
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ValidationError& e) {
    err << "validation error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace leakprobe::cli
