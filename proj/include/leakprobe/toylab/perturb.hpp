#pragma once

#include <cstdint>
#include <vector>

#include "leakprobe/toylab/corpus.hpp"
#include "leakprobe/toylab/train.hpp"

namespace leakprobe::toylab {

/// `count` neighbors of `x`. Each picks `replace` distinct positions in
/// [1, n) uniformly and, left to right, resamples the token there from the
/// reference model's next-token distribution given the neighbor's prefix,
/// excluding the current token. Neighbors differ from x in at most `replace`
/// positions. Throws ConfigError when replace >= n.
Corpus make_neighbors(const ToyLM& reference, const LoRAAdapterSet* adapters, const Sequence& x,
                      int replace, int count, std::uint64_t seed);

/// `count` copies of `adapters` with i.i.d. N(0, sigma^2) added to every
/// entry of every A and B. Copies come in antithetic pairs: copy 2j draws
/// e from the stream (seed, j) and copy 2j+1 applies -e, so the first-order
/// loss change cancels in the mean and the curvature term is what remains.
std::vector<LoRAAdapterSet> mope_perturb(const LoRAAdapterSet& adapters, double sigma, int count,
                                         std::uint64_t seed);

/// Ancestral sample of `length` further tokens after `prefix`.
Sequence generate(const ToyLM& model, const LoRAAdapterSet* adapters, const Sequence& prefix,
                  int length, Rng& rng);

struct SelfPromptConfig {
  int prompt_len = 2;
  int continuation_len = 3;
  int n_samples = 256;
  TrainConfig train;
  std::uint64_t seed = 0;
};

struct SelfPromptResult {
  LoRAAdapterSet adapters;  // fresh adapters fine-tuned on `corpus`
  Corpus corpus;            // prompt + sampled continuation, one per sample
};

/// Samples continuations from the fine-tuned model on prefixes of held-out
/// sequences (cycling through `prompts`) and fine-tunes fresh adapters on
/// the backbone over that synthetic text. n_samples = 0 returns the untouched
/// initial adapters (B = 0).
SelfPromptResult build_self_prompt(const ToyLM& backbone, const LoRAAdapterSet& finetuned,
                                   const Corpus& prompts, const SelfPromptConfig& cfg);

}  // namespace leakprobe::toylab
