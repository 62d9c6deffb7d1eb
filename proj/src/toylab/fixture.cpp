#include "leakprobe/toylab/fixture.hpp"

#include <algorithm>

#include "leakprobe/error.hpp"
#include "leakprobe/random.hpp"

namespace leakprobe::toylab {

using ojson = nlohmann::ordered_json;

std::uint64_t stage_seed(std::uint64_t seed, Stage stage) {
  return derive_seed(seed, static_cast<std::uint64_t>(stage));
}

FixtureConfig FixtureConfig::reference(std::uint64_t seed) {
  FixtureConfig cfg;
  cfg.pretrain.lr = 1e-2;
  cfg.reseed(seed);
  return cfg;
}

void FixtureConfig::reseed(std::uint64_t s) {
  seed = s;
  pretrain.seed = stage_seed(s, Stage::pretrain);
  model.seed = derive_seed(pretrain.seed, 0);
  finetune.seed = stage_seed(s, Stage::finetune);
  extract.seed = stage_seed(s, Stage::extract);
  eval.seed = stage_seed(s, Stage::bootstrap);
  selfprompt_cfg.seed = stage_seed(s, Stage::selfprompt);
  selfprompt_cfg.train = finetune;
}

void FixtureConfig::validate() const {
  model.validate();
  chain.validate();
  if (chain.vocab != model.vocab) throw ConfigError("fixture: chain vocab must equal model vocab");
  if (general_count < 1 || members < 1 || nonmembers < 1 || heldout < 0) {
    throw ConfigError("fixture: corpus sizes must be positive");
  }
  if (min_len < 2 || max_len < min_len) throw ConfigError("fixture: need 2 <= min_len <= max_len");
  pretrain.validate();
  finetune.validate();
  attack.validate();
}

// ---------------------------------------------------------------------------
// JSON

ojson train_config_to_json(const TrainConfig& c) {
  ojson j = ojson::object();
  j["epochs"] = c.epochs;
  j["batch"] = c.batch;
  j["lr"] = c.lr;
  j["dropout"] = c.dropout;
  j["weight_decay"] = c.weight_decay;
  if (c.dp) {
    j["dp"] = {{"clip", c.dp->clip}, {"noise", c.dp->noise}, {"delta", c.dp->delta}};
  } else {
    j["dp"] = nullptr;
  }
  j["modules"] = c.modules.str();
  j["rank"] = c.rank;
  j["alpha_per_rank"] = c.alpha_per_rank;
  j["match_parameters"] = c.match_parameters;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  j["init_std"] = c.init_std;
  j["seed"] = c.seed;
  return j;
}

TrainConfig train_config_from_json(const ojson& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.dropout = j.value("dropout", c.dropout);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  if (j.contains("dp") && !j["dp"].is_null()) {
    const auto& d = j["dp"];
    c.dp = DPConfig{d.at("clip").get<double>(), d.at("noise").get<double>(), d.at("delta").get<double>()};
  }
  if (j.contains("modules")) c.modules = ModuleSet::parse(j["modules"].get<std::string>());
  c.rank = j.value("rank", c.rank);
  c.alpha_per_rank = j.value("alpha_per_rank", c.alpha_per_rank);
  c.match_parameters = j.value("match_parameters", c.match_parameters);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.init_std = j.value("init_std", c.init_std);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

std::string_view spv_name(SpvGroup g) {
  switch (g) {
    case SpvGroup::referenced: return "referenced";
    case SpvGroup::nonreferenced: return "nonreferenced";
    case SpvGroup::none: return "none";
  }
  return "referenced";
}

SpvGroup parse_spv(std::string_view s) {
  if (s == "referenced") return SpvGroup::referenced;
  if (s == "nonreferenced") return SpvGroup::nonreferenced;
  if (s == "none") return SpvGroup::none;
  throw ConfigError("unknown spv group '" + std::string(s) + "'");
}

}  // namespace

ojson fixture_to_json(const FixtureConfig& c) {
  ojson j = ojson::object();
  j["seed"] = c.seed;
  j["model"] = {{"vocab", c.model.vocab}, {"embed", c.model.embed}, {"hidden", c.model.hidden},
                {"window", c.model.window}, {"seed", c.model.seed}};
  j["chain"] = {{"vocab", c.chain.vocab},
                {"cluster_size", c.chain.cluster_size},
                {"concentration", c.chain.concentration},
                {"general_stay", c.chain.general_stay},
                {"domain_stay", c.chain.domain_stay},
                {"seed", c.chain.seed}};
  j["general_count"] = c.general_count;
  j["members"] = c.members;
  j["nonmembers"] = c.nonmembers;
  j["heldout"] = c.heldout;
  j["min_len"] = c.min_len;
  j["max_len"] = c.max_len;
  j["pretrain"] = {{"epochs", c.pretrain.epochs}, {"batch", c.pretrain.batch}, {"lr", c.pretrain.lr},
                   {"seed", c.pretrain.seed}};
  j["finetune"] = train_config_to_json(c.finetune);
  j["extract"] = {{"neighbors", c.extract.neighbors},   {"replace", c.extract.replace},
                  {"mope_count", c.extract.mope_count}, {"mope_sigma", c.extract.mope_sigma},
                  {"gradients", c.extract.gradients},   {"seed", c.extract.seed}};
  j["attack"] = {{"k_percent", c.attack.k_percent},
                 {"sigma_floor", c.attack.sigma_floor},
                 {"zlib_literal", c.attack.zlib_literal},
                 {"shadow_columns", c.attack.shadow_columns}};
  j["eval"] = {{"bootstrap", c.eval.bootstrap}, {"seed", c.eval.seed},
               {"spv_group", spv_name(c.eval.spv_group)}, {"ppl_exp", c.eval.ppl_exp}};
  j["shadow"] = c.shadow;
  j["selfprompt"] = c.selfprompt;
  j["selfprompt_cfg"] = {{"prompt_len", c.selfprompt_cfg.prompt_len},
                         {"continuation_len", c.selfprompt_cfg.continuation_len},
                         {"n_samples", c.selfprompt_cfg.n_samples},
                         {"train", train_config_to_json(c.selfprompt_cfg.train)},
                         {"seed", c.selfprompt_cfg.seed}};
  return j;
}

FixtureConfig fixture_from_json(const ojson& j) {
  try {
    FixtureConfig c = FixtureConfig::reference(j.value("seed", FixtureConfig::kReferenceSeed));
    if (j.contains("model")) {
      const auto& m = j["model"];
      c.model.vocab = m.value("vocab", c.model.vocab);
      c.model.embed = m.value("embed", c.model.embed);
      c.model.hidden = m.value("hidden", c.model.hidden);
      c.model.window = m.value("window", c.model.window);
      c.model.seed = m.value("seed", c.model.seed);
    }
    if (j.contains("chain")) {
      const auto& m = j["chain"];
      c.chain.vocab = m.value("vocab", c.chain.vocab);
      c.chain.cluster_size = m.value("cluster_size", c.chain.cluster_size);
      c.chain.concentration = m.value("concentration", c.chain.concentration);
      c.chain.general_stay = m.value("general_stay", c.chain.general_stay);
      c.chain.domain_stay = m.value("domain_stay", c.chain.domain_stay);
      c.chain.seed = m.value("seed", c.chain.seed);
    }
    c.general_count = j.value("general_count", c.general_count);
    c.members = j.value("members", c.members);
    c.nonmembers = j.value("nonmembers", c.nonmembers);
    c.heldout = j.value("heldout", c.heldout);
    c.min_len = j.value("min_len", c.min_len);
    c.max_len = j.value("max_len", c.max_len);
    if (j.contains("pretrain")) {
      const auto& m = j["pretrain"];
      c.pretrain.epochs = m.value("epochs", c.pretrain.epochs);
      c.pretrain.batch = m.value("batch", c.pretrain.batch);
      c.pretrain.lr = m.value("lr", c.pretrain.lr);
      c.pretrain.seed = m.value("seed", c.pretrain.seed);
    }
    if (j.contains("finetune")) c.finetune = train_config_from_json(j["finetune"]);
    if (j.contains("extract")) {
      const auto& m = j["extract"];
      c.extract.neighbors = m.value("neighbors", c.extract.neighbors);
      c.extract.replace = m.value("replace", c.extract.replace);
      c.extract.mope_count = m.value("mope_count", c.extract.mope_count);
      c.extract.mope_sigma = m.value("mope_sigma", c.extract.mope_sigma);
      c.extract.gradients = m.value("gradients", c.extract.gradients);
      c.extract.seed = m.value("seed", c.extract.seed);
    }
    if (j.contains("attack")) {
      const auto& m = j["attack"];
      c.attack.k_percent = m.value("k_percent", c.attack.k_percent);
      c.attack.sigma_floor = m.value("sigma_floor", c.attack.sigma_floor);
      c.attack.zlib_literal = m.value("zlib_literal", c.attack.zlib_literal);
      c.attack.shadow_columns = m.value("shadow_columns", c.attack.shadow_columns);
    }
    if (j.contains("eval")) {
      const auto& m = j["eval"];
      c.eval.bootstrap = m.value("bootstrap", c.eval.bootstrap);
      c.eval.seed = m.value("seed", c.eval.seed);
      c.eval.spv_group = parse_spv(m.value("spv_group", std::string("referenced")));
      c.eval.ppl_exp = m.value("ppl_exp", c.eval.ppl_exp);
    }
    c.shadow = j.value("shadow", c.shadow);
    c.selfprompt = j.value("selfprompt", c.selfprompt);
    if (j.contains("selfprompt_cfg")) {
      const auto& m = j["selfprompt_cfg"];
      c.selfprompt_cfg.prompt_len = m.value("prompt_len", c.selfprompt_cfg.prompt_len);
      c.selfprompt_cfg.continuation_len = m.value("continuation_len", c.selfprompt_cfg.continuation_len);
      c.selfprompt_cfg.n_samples = m.value("n_samples", c.selfprompt_cfg.n_samples);
      if (m.contains("train")) c.selfprompt_cfg.train = train_config_from_json(m["train"]);
      c.selfprompt_cfg.seed = m.value("seed", c.selfprompt_cfg.seed);
    }
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("fixture config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

World build_world(const FixtureConfig& cfg) {
  cfg.validate();
  World w;
  w.config = cfg;

  CorpusParams general;
  general.chain = cfg.chain;
  general.source = Source::general;
  general.count = cfg.general_count;
  general.min_len = cfg.min_len;
  general.max_len = cfg.max_len;
  w.general = gen_corpus(stage_seed(cfg.seed, Stage::general_corpus), general);

  // Members, nonmembers and held-out text are consecutive i.i.d. draws from
  // one domain stream, so the membership split is fair by construction.
  CorpusParams domain = general;
  domain.source = Source::domain;
  domain.count = cfg.members + cfg.nonmembers + cfg.heldout;
  Corpus all = gen_corpus(stage_seed(cfg.seed, Stage::domain_corpus), domain);
  auto it = all.begin();
  w.members.assign(it, it + cfg.members);
  it += cfg.members;
  w.nonmembers.assign(it, it + cfg.nonmembers);
  it += cfg.nonmembers;
  w.heldout.assign(it, all.end());

  PretrainResult pt = pretrain(ToyLM::init(cfg.model), w.general, cfg.pretrain);
  w.backbone = std::move(pt.model);
  w.pretrain_loss = std::move(pt.epoch_loss);
  return w;
}

TraceSet extract_world(const World& world, const LoRAAdapterSet& adapters,
                       const LoRAAdapterSet* shadow, const LoRAAdapterSet* selfprompt,
                       const ojson& meta) {
  std::vector<RoleModel> roles{{Role::target, &world.backbone, &adapters},
                               {Role::pretrained, &world.backbone, nullptr}};
  if (shadow) roles.push_back({Role::shadow, &world.backbone, shadow});
  if (selfprompt) roles.push_back({Role::selfprompt, &world.backbone, selfprompt});
  return extract_trace(roles, label_samples(world.members, world.nonmembers), world.config.extract,
                       meta);
}

AUCReport audit(const World& world, const TraceSet& traces) {
  ScoreTable table = run_attack_suite(traces, world.config.attack);
  AUCReport report = evaluate(table, world.config.eval);
  attach_utility(report, traces, world.config.eval.ppl_exp);
  return report;
}

RunResult run_finetune(const World& world, const TrainConfig& train_cfg, const RunOptions& opts) {
  const FixtureConfig& fc = world.config;

  std::optional<LoRAAdapterSet> shadow;
  if (fc.shadow) {
    if (world.heldout.empty()) throw ConfigError("fixture: shadow role needs held-out text");
    TrainConfig sc = train_cfg;
    sc.seed = stage_seed(fc.seed, Stage::shadow);
    shadow = train(world.backbone, world.heldout, nullptr, sc).adapters;
  }

  RunResult result;
  int last_eval = opts.eval_epochs.empty()
                      ? -1
                      : *std::max_element(opts.eval_epochs.begin(), opts.eval_epochs.end());
  TrainConfig cfg = train_cfg;
  cfg.epochs = std::max(cfg.epochs, last_eval);

  TrainHooks hooks;
  hooks.on_epoch = [&](int epoch, const LoRAAdapterSet& ad) {
    if (std::find(opts.eval_epochs.begin(), opts.eval_epochs.end(), epoch) == opts.eval_epochs.end()) return;
    std::optional<LoRAAdapterSet> sp;
    if (fc.selfprompt) sp = build_self_prompt(world.backbone, ad, world.heldout, fc.selfprompt_cfg).adapters;
    ojson meta = ojson::object();
    meta["epoch"] = epoch;
    meta["train"] = train_config_to_json(train_cfg);
    TraceSet traces = extract_world(world, ad, shadow ? &*shadow : nullptr, sp ? &*sp : nullptr, meta);
    EpochReport er{epoch, audit(world, traces), std::nullopt};
    if (opts.keep_traces) er.traces = std::move(traces);
    result.reports.push_back(std::move(er));
  };
  TrainResult tr = train(world.backbone, world.members, &world.nonmembers, cfg, hooks);
  result.adapters = std::move(tr.adapters);
  result.log = std::move(tr.log);
  result.steps = tr.steps;
  return result;
}

}  // namespace leakprobe::toylab
