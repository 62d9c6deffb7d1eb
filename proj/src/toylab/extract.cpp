#include "leakprobe/toylab/extract.hpp"

#include <set>

#include "leakprobe/error.hpp"
#include "leakprobe/random.hpp"
#include "leakprobe/toylab/perturb.hpp"

namespace leakprobe::toylab {

std::uint64_t stable_hash(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<LabeledSequence> label_samples(const Corpus& members, const Corpus& nonmembers) {
  std::vector<LabeledSequence> out;
  out.reserve(members.size() + nonmembers.size());
  for (std::size_t i = 0; i < members.size(); ++i) {
    out.push_back({"m" + std::to_string(i), members[i], Label::member});
  }
  for (std::size_t i = 0; i < nonmembers.size(); ++i) {
    out.push_back({"n" + std::to_string(i), nonmembers[i], Label::nonmember});
  }
  return out;
}

namespace {

double gradient_norm(const LoRAAdapterSet& g) { return g.norm(); }

}  // namespace

TraceSet extract_trace(const std::vector<RoleModel>& roles,
                       const std::vector<LabeledSequence>& samples, const ExtractOptions& opts,
                       const nlohmann::ordered_json& meta) {
  if (opts.neighbors < 0 || opts.mope_count < 0) throw ConfigError("extract: counts must be >= 0");
  if (!(opts.mope_sigma >= 0.0)) throw ConfigError("extract: mope sigma must be >= 0");

  const RoleModel* target = nullptr;
  const RoleModel* pretrained = nullptr;
  std::set<Role> seen;
  for (const auto& rm : roles) {
    if (!rm.model) throw ConfigError("extract: role '" + std::string(to_string(rm.role)) + "' has no model");
    if (!seen.insert(rm.role).second) {
      throw ConfigError("extract: duplicate role '" + std::string(to_string(rm.role)) + "'");
    }
    if (rm.role == Role::target) target = &rm;
    if (rm.role == Role::pretrained) pretrained = &rm;
  }
  if (!target) throw ConfigError("extract: target role required");

  const ToyLM& nb_model = pretrained ? *pretrained->model : *target->model;
  const LoRAAdapterSet* nb_adapters = pretrained ? pretrained->adapters : nullptr;
  // Zero-update adapters for roles without their own: the target's A with
  // B = 0. The model is still the plain backbone, and MoPe noise probes the
  // same low-rank subspace it does for the target.
  std::optional<LoRAAdapterSet> zero_adapters;
  if (target->adapters) {
    zero_adapters = *target->adapters;
    for (Module m : kAllModules) {
      if (auto* f = zero_adapters->find(m)) f->B.setZero();
    }
  }

  TraceSet set;
  set.manifest = meta;
  for (const auto& sample : samples) {
    const auto key = stable_hash(sample.sample_id);
    SampleRecord rec;
    rec.sample_id = sample.sample_id;
    rec.label = sample.label;
    rec.n_tokens = static_cast<std::int64_t>(sample.tokens.size());
    rec.zlib_len = zlib_entropy(sequence_text(sample.tokens));

    Corpus neighbors;
    if (opts.neighbors > 0) {
      int replace = std::min(opts.replace, static_cast<int>(sample.tokens.size()) - 1);
      neighbors = make_neighbors(nb_model, nb_adapters, sample.tokens, replace, opts.neighbors,
                                 derive_seed(derive_seed(opts.seed, 0), key));
    }
    const std::uint64_t mope_seed = derive_seed(derive_seed(opts.seed, 1), key);

    for (const auto& rm : roles) {
      ModelTrace t;
      t.role = rm.role;
      if (opts.gradients) {
        Gradients g = backward(*rm.model, rm.adapters, sample.tokens);
        t.tokens = std::move(g.tokens);
        t.loss = g.loss;
        t.gradnorm_x = g.input_embeddings.norm();
        if (rm.role == Role::target && g.adapters) t.gradnorm_theta = gradient_norm(*g.adapters);
      } else {
        ForwardResult f = forward_loss(*rm.model, rm.adapters, sample.tokens);
        t.tokens = std::move(f.tokens);
        t.loss = f.loss;
      }
      if (!neighbors.empty()) {
        std::vector<double> losses;
        losses.reserve(neighbors.size());
        for (const auto& nb : neighbors) losses.push_back(forward_loss(*rm.model, rm.adapters, nb).loss);
        t.neighbor_losses = std::move(losses);
      }
      const LoRAAdapterSet* base = rm.adapters ? rm.adapters : (zero_adapters ? &*zero_adapters : nullptr);
      if (opts.mope_count > 0 && base) {
        std::vector<double> losses;
        losses.reserve(static_cast<std::size_t>(opts.mope_count));
        for (const auto& p : mope_perturb(*base, opts.mope_sigma, opts.mope_count, mope_seed)) {
          losses.push_back(forward_loss(*rm.model, &p, sample.tokens).loss);
        }
        t.mope_losses = std::move(losses);
      }
      rec.traces.emplace(rm.role, std::move(t));
    }
    set.records.push_back(std::move(rec));
  }
  validate(set);
  return set;
}

}  // namespace leakprobe::toylab
