#pragma once

// A small differentiable causal LM with LoRA adapters.
//
// For target position i (predicting token i+1 from tokens 0..i):
//   c_i    = mean of input embeddings over the last `window` tokens
//   a_i    = c_i W_a'                         module "a" (attention stand-in)
//   u_i    = tanh(a_i W_u' + b_u)             module "u" (upscale)
//   o_i    = u_i W_d' + a_i                   module "d" (downscale) + residual
//   logits = o_i E^T + b_o                    tied output embedding
// where W' = W + (alpha / r) A B for modules that carry an adapter. Row
// vectors throughout; A is in x r and B is r x out.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "leakprobe/trace.hpp"

namespace leakprobe::toylab {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;
using Token = int;

struct ToyLMConfig {
  int vocab = 64;
  int embed = 16;
  int hidden = 32;
  int window = 8;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ToyLMConfig&) const = default;
};

enum class Module { a = 0, u = 1, d = 2 };
inline constexpr std::array<Module, 3> kAllModules = {Module::a, Module::u, Module::d};

std::string_view to_string(Module m);
/// Throws ConfigError for anything but "a", "u", "d".
Module parse_module(std::string_view name);

class ModuleSet {
 public:
  ModuleSet() = default;
  ModuleSet(std::initializer_list<Module> ms) {
    for (Module m : ms) insert(m);
  }
  static ModuleSet all() { return {Module::a, Module::u, Module::d}; }
  /// "a,u,d" style list; throws ConfigError on unknown names or empty input.
  static ModuleSet parse(std::string_view text);

  void insert(Module m) { bits_[static_cast<int>(m)] = true; }
  bool contains(Module m) const { return bits_[static_cast<int>(m)]; }
  bool empty() const { return !bits_[0] && !bits_[1] && !bits_[2]; }
  std::string str() const;

  bool operator==(const ModuleSet&) const = default;

 private:
  std::array<bool, 3> bits_{};
};

struct ToyLM {
  ToyLMConfig config;
  Matrix E;     // vocab x embed
  Matrix W_a;   // embed x embed
  Matrix W_u;   // embed x hidden
  RowVector b_u;
  Matrix W_d;   // hidden x embed
  RowVector b_o;

  /// Seeded backbone initialization.
  static ToyLM init(const ToyLMConfig& config);
  /// Every parameter zero (uniform predictions).
  static ToyLM zeros(const ToyLMConfig& config);

  Matrix& weight(Module m);
  const Matrix& weight(Module m) const;
  int in_dim(Module m) const;
  int out_dim(Module m) const;
  bool finite() const;
};

struct LoRAFactor {
  Matrix A;  // in x r
  Matrix B;  // r x out
};

struct LoRAAdapterSet {
  int rank = 4;
  double alpha = 8.0;
  std::array<std::optional<LoRAFactor>, 3> factors;

  double scale() const { return alpha / static_cast<double>(rank); }
  const LoRAFactor* find(Module m) const {
    const auto& f = factors[static_cast<int>(m)];
    return f ? &*f : nullptr;
  }
  LoRAFactor* find(Module m) {
    auto& f = factors[static_cast<int>(m)];
    return f ? &*f : nullptr;
  }
  ModuleSet modules() const;

  /// A ~ N(0, init_std^2), B = 0, so the adapted model starts equal to the backbone.
  static LoRAAdapterSet init(const ToyLM& model, ModuleSet modules, int rank, double alpha,
                             std::uint64_t seed, double init_std = 0.02);
  /// Same shapes as `like`, all entries zero.
  static LoRAAdapterSet zeros_like(const LoRAAdapterSet& like);

  std::size_t parameter_count() const;
  double squared_norm() const;
  double norm() const { return std::sqrt(squared_norm()); }
  void validate(const ToyLM& model) const;
};

/// Parameter count of adapters on `modules` at `rank`.
std::size_t adapter_parameter_count(const ToyLMConfig& cfg, ModuleSet modules, int rank);

/// Rank on `modules` whose parameter count is closest to `reference_count`,
/// clamped to [1, min(in, out)] over the chosen modules.
int matched_rank(const ToyLMConfig& cfg, ModuleSet modules, std::size_t reference_count);

/// Dropout masks for the adapter-path inputs, already scaled by 1/(1-eta).
struct DropoutMasks {
  std::array<std::optional<Matrix>, 3> masks;
  const Matrix* find(Module m) const {
    const auto& x = masks[static_cast<int>(m)];
    return x ? &*x : nullptr;
  }
};

struct ForwardResult {
  double loss = 0.0;
  std::vector<TokenStat> tokens;
};

struct BackboneGrads {
  Matrix E, W_a, W_u, W_d;
  RowVector b_u, b_o;
};

struct Gradients {
  double loss = 0.0;
  std::vector<TokenStat> tokens;
  std::optional<LoRAAdapterSet> adapters;  // same shapes as the input adapters
  Matrix input_embeddings;                 // n x embed
  std::optional<BackboneGrads> backbone;
};

struct BackwardOptions {
  bool backbone = false;
  const DropoutMasks* dropout = nullptr;
};

/// Input embeddings E[tokens] (n x embed).
Matrix embed(const ToyLM& model, std::span<const Token> tokens);

/// Throws ConfigError for n < 2 or out-of-range tokens.
void check_sequence(const ToyLM& model, std::span<const Token> tokens);

ForwardResult forward_loss(const ToyLM& model, const LoRAAdapterSet* adapters,
                           std::span<const Token> tokens);

/// Forward pass from explicit input embeddings (targets still come from `tokens`).
ForwardResult forward_from_embeddings(const ToyLM& model, const LoRAAdapterSet* adapters,
                                      std::span<const Token> tokens, const Matrix& inputs,
                                      const DropoutMasks* dropout = nullptr);

/// Exact reverse-mode gradients of the mean NLL.
Gradients backward(const ToyLM& model, const LoRAAdapterSet* adapters,
                   std::span<const Token> tokens, const BackwardOptions& opts = {});

/// Next-token probabilities after `prefix` (length >= 1).
RowVector next_token_probs(const ToyLM& model, const LoRAAdapterSet* adapters,
                           std::span<const Token> prefix);

/// Backbone with W + (alpha/r) A B folded in.
ToyLM merge_adapters(const ToyLM& model, const LoRAAdapterSet& adapters);

/// Adapter-path output (x .* mask) A B * scale, used by the dropout tests.
Matrix adapter_path(const Matrix& x, const LoRAFactor& factor, double scale,
                    const Matrix* mask = nullptr);

}  // namespace leakprobe::toylab
