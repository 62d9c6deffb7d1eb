#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "leakprobe/toylab/corpus.hpp"
#include "leakprobe/trace.hpp"

namespace leakprobe::toylab {

struct RoleModel {
  Role role = Role::target;
  const ToyLM* model = nullptr;
  const LoRAAdapterSet* adapters = nullptr;  // null for the plain backbone
};

struct LabeledSequence {
  std::string sample_id;
  Sequence tokens;
  Label label = Label::unknown;
};

struct ExtractOptions {
  int neighbors = 8;      // 0 disables neighbor_losses
  int replace = 1;        // positions replaced per neighbor
  int mope_count = 32;    // 0 disables mope_losses; even counts pair up antithetically
  double mope_sigma = 0.01;
  bool gradients = true;
  std::uint64_t seed = 0;
};

/// Runs every role model over every sample. Neighbors come from the
/// pretrained role (or the target's backbone without adapters) and are shared
/// by all roles, as is the MoPe noise; roles without adapters perturb the
/// target's adapters with B = 0 (a zero update). Per-sample randomness is keyed on
/// the sample_id, so results do not depend on sample order.
TraceSet extract_trace(const std::vector<RoleModel>& roles,
                       const std::vector<LabeledSequence>& samples, const ExtractOptions& opts,
                       const nlohmann::ordered_json& meta = nlohmann::ordered_json::object());

/// Member/nonmember sample list with ids "m<i>" / "n<i>".
std::vector<LabeledSequence> label_samples(const Corpus& members, const Corpus& nonmembers);

/// FNV-1a 64-bit; a platform-independent key for per-sample seeds.
std::uint64_t stable_hash(std::string_view s);

}  // namespace leakprobe::toylab
