#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "leakprobe/toylab/corpus.hpp"
#include "leakprobe/toylab/model.hpp"

namespace leakprobe::toylab {

struct DPConfig {
  double clip = 1.0;   // per-sample L2 bound C
  double noise = 0.0;  // noise multiplier; std of the added noise is noise * clip
  double delta = 1e-5;

  void validate() const;
  bool operator==(const DPConfig&) const = default;
};

struct TrainConfig {
  int epochs = 3;
  int batch = 16;
  double lr = 1e-2;
  double dropout = 0.0;       // eta, on the adapter-path input
  double weight_decay = 0.0;  // lambda, decoupled, adapters only
  std::optional<DPConfig> dp;
  ModuleSet modules = ModuleSet::all();
  int rank = 4;               // rank for the full a,u,d mask
  double alpha_per_rank = 2.0;
  // With a partial module mask, pick the rank whose adapter parameter count
  // is closest to the full mask at `rank`.
  bool match_parameters = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Rank actually used for cfg.modules.
int effective_rank(const ToyLMConfig& model, const TrainConfig& cfg);

/// Fresh adapters (B = 0) with the effective rank and alpha = alpha_per_rank * rank.
LoRAAdapterSet init_adapters(const ToyLM& model, const TrainConfig& cfg);

struct EpochStats {
  int epoch = 0;
  double ppl_ft = 0.0;                 // mean loss over the training corpus
  std::optional<double> ppl_val;       // mean loss over the validation corpus
  double adapter_norm = 0.0;
};

struct TrainHooks {
  /// After each epoch (and once with epoch 0 before any update).
  std::function<void(int epoch, const LoRAAdapterSet&)> on_epoch;
  /// Each per-sample adapter gradient after clipping (DP only).
  std::function<void(const LoRAAdapterSet&)> on_clipped_sample;
  /// After each optimizer step.
  std::function<void(std::size_t step, const LoRAAdapterSet&)> on_step;
};

struct TrainResult {
  LoRAAdapterSet adapters;
  std::vector<EpochStats> log;  // entry 0 is the state before training
  std::size_t steps = 0;
};

/// Adapter fine-tuning with a frozen backbone. AdamW with the decay applied
/// to the adapter matrices only; optional dropout and DP-SGD style clipping
/// and noise.
TrainResult train(const ToyLM& model, const Corpus& train_set, const Corpus* val_set,
                  const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Same, continuing from existing adapters.
TrainResult train_from(const ToyLM& model, LoRAAdapterSet adapters, const Corpus& train_set,
                       const Corpus* val_set, const TrainConfig& cfg,
                       const TrainHooks& hooks = {});

struct PretrainConfig {
  int epochs = 3;
  int batch = 16;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PretrainResult {
  ToyLM model;
  std::vector<double> epoch_loss;  // mean training loss after each epoch
};

/// Trains every backbone parameter from `init`.
PretrainResult pretrain(const ToyLM& init, const Corpus& corpus, const PretrainConfig& cfg);

/// Mean per-sample loss of (model, adapters) over a corpus.
double mean_loss(const ToyLM& model, const LoRAAdapterSet* adapters, const Corpus& corpus);

/// Loose (epsilon, delta) bound: each step is a Gaussian mechanism with
/// epsilon_0 = sqrt(2 ln(1.25/delta)) / noise, composed linearly over steps.
double dp_epsilon(std::size_t steps, double noise, double delta);

/// Noise multiplier giving dp_epsilon(steps, ., delta) == epsilon.
double dp_noise_for_epsilon(double epsilon, std::size_t steps, double delta);

/// Optimizer steps for `samples` examples over `epochs` at batch size `batch`.
std::size_t steps_for(std::size_t samples, int epochs, int batch);

/// Inverted-dropout masks for one sample of length n.
DropoutMasks draw_dropout_masks(const ToyLM& model, const LoRAAdapterSet& adapters, int n,
                                double eta, Rng& rng);

}  // namespace leakprobe::toylab
