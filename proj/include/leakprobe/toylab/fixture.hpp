#pragma once

// The reference experiment: a backbone pretrained on "general" text, LoRA
// fine-tuned on "domain" members, audited against same-distribution
// nonmembers. Everything derives from FixtureConfig::seed.

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "leakprobe/attacks.hpp"
#include "leakprobe/evaluation.hpp"
#include "leakprobe/toylab/corpus.hpp"
#include "leakprobe/toylab/extract.hpp"
#include "leakprobe/toylab/perturb.hpp"
#include "leakprobe/toylab/train.hpp"

namespace leakprobe::toylab {

struct FixtureConfig {
  ToyLMConfig model;
  ChainParams chain;
  int general_count = 2000;
  int members = 256;
  int nonmembers = 256;
  int heldout = 256;  // prompts for the self-prompt reference and shadow data
  int min_len = 4;
  int max_len = 6;
  PretrainConfig pretrain;
  TrainConfig finetune;
  ExtractOptions extract;
  AttackConfig attack;
  EvalOptions eval;
  bool shadow = false;      // add a shadow role fine-tuned on held-out domain text
  bool selfprompt = false;  // add a self-prompt role built from the target
  SelfPromptConfig selfprompt_cfg;
  std::uint64_t seed = kReferenceSeed;

  static constexpr std::uint64_t kReferenceSeed = 20240;

  /// The settings used throughout the tests and documentation, with every
  /// stage seed derived from `seed`.
  static FixtureConfig reference(std::uint64_t seed = kReferenceSeed);
  /// Re-derives every stage seed from `seed`.
  void reseed(std::uint64_t seed);
  void validate() const;
};

nlohmann::ordered_json fixture_to_json(const FixtureConfig& cfg);
FixtureConfig fixture_from_json(const nlohmann::ordered_json& j);
nlohmann::ordered_json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::ordered_json& j);

struct World {
  FixtureConfig config;
  ToyLM backbone;
  Corpus general;
  Corpus members;
  Corpus nonmembers;
  Corpus heldout;
  std::vector<double> pretrain_loss;
};

/// Generates the corpora and pretrains the backbone.
World build_world(const FixtureConfig& cfg);

/// Child seeds for the stages of a fixture run.
// The backbone init seed is derive_seed(pretrain seed, 0).
enum class Stage : std::uint64_t {
  general_corpus = 1,
  domain_corpus,
  pretrain,
  finetune,
  extract,
  bootstrap,
  shadow,
  selfprompt,
};
std::uint64_t stage_seed(std::uint64_t seed, Stage stage);

struct EpochReport {
  int epoch = 0;
  AUCReport report;
  std::optional<TraceSet> traces;  // kept when requested
};

struct RunOptions {
  std::vector<int> eval_epochs;  // epochs (0 = before training) to audit
  bool keep_traces = false;
};

struct RunResult {
  LoRAAdapterSet adapters;
  std::vector<EpochStats> log;
  std::vector<EpochReport> reports;
  std::size_t steps = 0;
};

/// Audits one adapter set against the world's members and nonmembers.
TraceSet extract_world(const World& world, const LoRAAdapterSet& adapters,
                       const LoRAAdapterSet* shadow, const LoRAAdapterSet* selfprompt,
                       const nlohmann::ordered_json& meta);
AUCReport audit(const World& world, const TraceSet& traces);

/// Fine-tunes with `train_cfg` and audits at the requested epochs.
RunResult run_finetune(const World& world, const TrainConfig& train_cfg, const RunOptions& opts);

}  // namespace leakprobe::toylab
