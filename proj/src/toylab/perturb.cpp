#include "leakprobe/toylab/perturb.hpp"

#include <algorithm>

#include "leakprobe/error.hpp"
#include "leakprobe/random.hpp"

namespace leakprobe::toylab {

Corpus make_neighbors(const ToyLM& reference, const LoRAAdapterSet* adapters, const Sequence& x,
                      int replace, int count, std::uint64_t seed) {
  check_sequence(reference, x);
  const int n = static_cast<int>(x.size());
  if (replace < 0 || replace >= n) {
    throw ConfigError("neighbors: replaced positions must be in [0, n), got " + std::to_string(replace));
  }
  if (count < 0) throw ConfigError("neighbors: count must be >= 0");

  Corpus out;
  out.reserve(static_cast<std::size_t>(count));
  std::vector<int> positions(static_cast<std::size_t>(n - 1));
  for (int i = 0; i < n - 1; ++i) positions[static_cast<std::size_t>(i)] = i + 1;

  for (int k = 0; k < count; ++k) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
    Sequence nb = x;
    rng.shuffle(positions);
    std::vector<int> chosen(positions.begin(), positions.begin() + replace);
    std::sort(chosen.begin(), chosen.end());
    for (int p : chosen) {
      RowVector probs = next_token_probs(reference, adapters,
                                         std::span<const Token>(nb.data(), static_cast<std::size_t>(p)));
      probs(nb[static_cast<std::size_t>(p)]) = 0.0;
      if (probs.sum() <= 0.0) continue;
      nb[static_cast<std::size_t>(p)] = static_cast<Token>(rng.categorical(probs));
    }
    out.push_back(std::move(nb));
  }
  return out;
}

std::vector<LoRAAdapterSet> mope_perturb(const LoRAAdapterSet& adapters, double sigma, int count,
                                         std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw ConfigError("mope: sigma must be >= 0");
  if (count < 0) throw ConfigError("mope: count must be >= 0");
  std::vector<LoRAAdapterSet> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    // Antithetic pairs: odd copies reuse the previous draw with the sign flipped.
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(k / 2)));
    const double scale = k % 2 == 0 ? sigma : -sigma;
    LoRAAdapterSet p = adapters;
    for (Module m : kAllModules) {
      LoRAFactor* f = p.find(m);
      if (!f) continue;
      for (Matrix* x : {&f->A, &f->B}) {
        for (Eigen::Index i = 0; i < x->rows(); ++i) {
          for (Eigen::Index j = 0; j < x->cols(); ++j) (*x)(i, j) += scale * rng.normal();
        }
      }
    }
    out.push_back(std::move(p));
  }
  return out;
}

Sequence generate(const ToyLM& model, const LoRAAdapterSet* adapters, const Sequence& prefix,
                  int length, Rng& rng) {
  if (prefix.empty()) throw ConfigError("generate: empty prefix");
  Sequence seq = prefix;
  for (int i = 0; i < length; ++i) {
    RowVector probs = next_token_probs(model, adapters, seq);
    seq.push_back(static_cast<Token>(rng.categorical(probs)));
  }
  return seq;
}

SelfPromptResult build_self_prompt(const ToyLM& backbone, const LoRAAdapterSet& finetuned,
                                   const Corpus& prompts, const SelfPromptConfig& cfg) {
  if (cfg.prompt_len < 1) throw ConfigError("self-prompt: prompt_len must be >= 1");
  if (cfg.continuation_len < 0) throw ConfigError("self-prompt: continuation_len must be >= 0");
  if (cfg.n_samples < 0) throw ConfigError("self-prompt: n_samples must be >= 0");
  if (cfg.prompt_len + cfg.continuation_len < 2) {
    throw ConfigError("self-prompt: prompt_len + continuation_len must be >= 2");
  }

  SelfPromptResult result;
  TrainConfig tcfg = cfg.train;
  tcfg.seed = derive_seed(cfg.seed, 1);
  if (cfg.n_samples == 0) {
    result.adapters = init_adapters(backbone, tcfg);
    return result;
  }
  if (prompts.empty()) throw ConfigError("self-prompt: empty prompt corpus");

  Rng rng(derive_seed(cfg.seed, 0));
  for (int i = 0; i < cfg.n_samples; ++i) {
    const Sequence& src = prompts[static_cast<std::size_t>(i) % prompts.size()];
    auto take = std::min<std::size_t>(src.size(), static_cast<std::size_t>(cfg.prompt_len));
    Sequence prefix(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(take));
    if (prefix.empty()) throw ConfigError("self-prompt: empty prompt sequence");
    int extra = cfg.continuation_len + cfg.prompt_len - static_cast<int>(take);
    result.corpus.push_back(generate(backbone, &finetuned, prefix, extra, rng));
  }
  result.adapters = train(backbone, result.corpus, nullptr, tcfg).adapters;
  return result;
}

}  // namespace leakprobe::toylab
