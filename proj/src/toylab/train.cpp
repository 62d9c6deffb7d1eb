#include "leakprobe/toylab/train.hpp"

#include <cmath>
#include <numeric>

#include "leakprobe/error.hpp"
#include "leakprobe/random.hpp"

namespace leakprobe::toylab {

void DPConfig::validate() const {
  if (!(clip > 0.0)) throw ConfigError("dp clip must be > 0");
  if (!(noise >= 0.0)) throw ConfigError("dp noise must be >= 0");
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("dp delta must be in (0, 1)");
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  if (dp) dp->validate();
  if (modules.empty()) throw ConfigError("module mask must not be empty");
  if (rank < 1) throw ConfigError("rank must be >= 1");
  if (!(alpha_per_rank > 0.0)) throw ConfigError("alpha per rank must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("adam betas must be in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam eps must be > 0");
  if (!(init_std >= 0.0)) throw ConfigError("init std must be >= 0");
}

void PretrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
}

int effective_rank(const ToyLMConfig& model, const TrainConfig& cfg) {
  if (!cfg.match_parameters || cfg.modules == ModuleSet::all()) return cfg.rank;
  return matched_rank(model, cfg.modules, adapter_parameter_count(model, ModuleSet::all(), cfg.rank));
}

LoRAAdapterSet init_adapters(const ToyLM& model, const TrainConfig& cfg) {
  int r = effective_rank(model.config, cfg);
  return LoRAAdapterSet::init(model, cfg.modules, r, cfg.alpha_per_rank * r,
                              derive_seed(cfg.seed, 0), cfg.init_std);
}

double mean_loss(const ToyLM& model, const LoRAAdapterSet* adapters, const Corpus& corpus) {
  if (corpus.empty()) throw ConfigError("mean_loss: empty corpus");
  double sum = 0.0;
  for (const auto& seq : corpus) sum += forward_loss(model, adapters, seq).loss;
  return sum / static_cast<double>(corpus.size());
}

double dp_epsilon(std::size_t steps, double noise, double delta) {
  if (!(noise > 0.0)) return std::numeric_limits<double>::infinity();
  return static_cast<double>(steps) * std::sqrt(2.0 * std::log(1.25 / delta)) / noise;
}

double dp_noise_for_epsilon(double epsilon, std::size_t steps, double delta) {
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
  return static_cast<double>(steps) * std::sqrt(2.0 * std::log(1.25 / delta)) / epsilon;
}

std::size_t steps_for(std::size_t samples, int epochs, int batch) {
  std::size_t per_epoch = (samples + static_cast<std::size_t>(batch) - 1) / static_cast<std::size_t>(batch);
  return per_epoch * static_cast<std::size_t>(epochs);
}

DropoutMasks draw_dropout_masks(const ToyLM& model, const LoRAAdapterSet& adapters, int n,
                                double eta, Rng& rng) {
  DropoutMasks dm;
  const double keep_scale = 1.0 / (1.0 - eta);
  for (Module m : kAllModules) {
    if (!adapters.find(m)) continue;
    Matrix mask(n - 1, model.in_dim(m));
    for (Eigen::Index i = 0; i < mask.rows(); ++i) {
      for (Eigen::Index j = 0; j < mask.cols(); ++j) mask(i, j) = rng.bernoulli(eta) ? 0.0 : keep_scale;
    }
    dm.masks[static_cast<int>(m)] = std::move(mask);
  }
  return dm;
}

namespace {

template <typename F>
void zip_factors(LoRAAdapterSet& a, const LoRAAdapterSet& b, F&& f) {
  for (Module m : kAllModules) {
    LoRAFactor* fa = a.find(m);
    const LoRAFactor* fb = b.find(m);
    if (!fa || !fb) continue;
    f(fa->A, fb->A);
    f(fa->B, fb->B);
  }
}

struct Adam {
  double lr, beta1, beta2, eps;
  std::size_t t = 0;

  template <typename P>
  void update(P& param, const P& grad, P& m, P& v) const {
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

void scale_in_place(LoRAAdapterSet& g, double s) {
  zip_factors(g, g, [&](Matrix& x, const Matrix&) { x *= s; });
}

void add_in_place(LoRAAdapterSet& acc, const LoRAAdapterSet& g) {
  zip_factors(acc, g, [](Matrix& x, const Matrix& y) { x += y; });
}

void add_noise(LoRAAdapterSet& g, double stddev, Rng& rng) {
  for (Module m : kAllModules) {
    LoRAFactor* f = g.find(m);
    if (!f) continue;
    for (Matrix* x : {&f->A, &f->B}) {
      for (Eigen::Index i = 0; i < x->rows(); ++i) {
        for (Eigen::Index j = 0; j < x->cols(); ++j) (*x)(i, j) += stddev * rng.normal();
      }
    }
  }
}

EpochStats epoch_stats(int epoch, const ToyLM& model, const LoRAAdapterSet& ad,
                       const Corpus& train_set, const Corpus* val_set) {
  EpochStats s;
  s.epoch = epoch;
  s.ppl_ft = mean_loss(model, &ad, train_set);
  if (val_set && !val_set->empty()) s.ppl_val = mean_loss(model, &ad, *val_set);
  s.adapter_norm = ad.norm();
  return s;
}

}  // namespace

TrainResult train(const ToyLM& model, const Corpus& train_set, const Corpus* val_set,
                  const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  return train_from(model, init_adapters(model, cfg), train_set, val_set, cfg, hooks);
}

TrainResult train_from(const ToyLM& model, LoRAAdapterSet adapters, const Corpus& train_set,
                       const Corpus* val_set, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("train: empty corpus");
  adapters.validate(model);
  for (const auto& seq : train_set) check_sequence(model, seq);

  Rng order_rng(derive_seed(cfg.seed, 1));
  Rng dropout_rng(derive_seed(cfg.seed, 2));
  Rng noise_rng(derive_seed(cfg.seed, 3));

  TrainResult result;
  LoRAAdapterSet m1 = LoRAAdapterSet::zeros_like(adapters);
  LoRAAdapterSet m2 = LoRAAdapterSet::zeros_like(adapters);
  Adam adam{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps};

  result.log.push_back(epoch_stats(0, model, adapters, train_set, val_set));
  if (hooks.on_epoch) hooks.on_epoch(0, adapters);

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch = static_cast<std::size_t>(cfg.batch);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      std::size_t end = std::min(order.size(), start + batch);
      LoRAAdapterSet grad = LoRAAdapterSet::zeros_like(adapters);
      for (std::size_t k = start; k < end; ++k) {
        const Sequence& seq = train_set[order[k]];
        std::optional<DropoutMasks> masks;
        if (cfg.dropout > 0.0) {
          masks = draw_dropout_masks(model, adapters, static_cast<int>(seq.size()), cfg.dropout,
                                     dropout_rng);
        }
        BackwardOptions opts;
        opts.dropout = masks ? &*masks : nullptr;
        LoRAAdapterSet g = std::move(*backward(model, &adapters, seq, opts).adapters);
        if (cfg.dp) {
          double norm = g.norm();
          if (norm > cfg.dp->clip) scale_in_place(g, cfg.dp->clip / norm);
          if (hooks.on_clipped_sample) hooks.on_clipped_sample(g);
        }
        add_in_place(grad, g);
      }
      if (cfg.dp && cfg.dp->noise > 0.0) add_noise(grad, cfg.dp->noise * cfg.dp->clip, noise_rng);
      scale_in_place(grad, 1.0 / static_cast<double>(end - start));

      ++adam.t;
      // Decoupled decay first, then the moment update, as in AdamW.
      if (cfg.weight_decay > 0.0) scale_in_place(adapters, 1.0 - cfg.lr * cfg.weight_decay);
      for (Module m : kAllModules) {
        LoRAFactor* p = adapters.find(m);
        if (!p) continue;
        const LoRAFactor* g = grad.find(m);
        LoRAFactor* a = m1.find(m);
        LoRAFactor* b = m2.find(m);
        adam.update(p->A, g->A, a->A, b->A);
        adam.update(p->B, g->B, a->B, b->B);
      }
      ++result.steps;
      if (hooks.on_step) hooks.on_step(result.steps, adapters);
    }
    result.log.push_back(epoch_stats(epoch, model, adapters, train_set, val_set));
    if (hooks.on_epoch) hooks.on_epoch(epoch, adapters);
  }
  result.adapters = std::move(adapters);
  return result;
}

PretrainResult pretrain(const ToyLM& init, const Corpus& corpus, const PretrainConfig& cfg) {
  cfg.validate();
  if (corpus.empty()) throw ConfigError("pretrain: empty corpus");
  for (const auto& seq : corpus) check_sequence(init, seq);

  PretrainResult result{init, {}};
  ToyLM& model = result.model;
  Rng order_rng(derive_seed(cfg.seed, 1));
  Adam adam{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps};

  ToyLM m1 = ToyLM::zeros(model.config);
  ToyLM m2 = ToyLM::zeros(model.config);

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch = static_cast<std::size_t>(cfg.batch);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      std::size_t end = std::min(order.size(), start + batch);
      BackboneGrads acc;
      acc.E = Matrix::Zero(model.E.rows(), model.E.cols());
      acc.W_a = Matrix::Zero(model.W_a.rows(), model.W_a.cols());
      acc.W_u = Matrix::Zero(model.W_u.rows(), model.W_u.cols());
      acc.W_d = Matrix::Zero(model.W_d.rows(), model.W_d.cols());
      acc.b_u = RowVector::Zero(model.b_u.size());
      acc.b_o = RowVector::Zero(model.b_o.size());
      for (std::size_t k = start; k < end; ++k) {
        BackwardOptions opts;
        opts.backbone = true;
        Gradients g = backward(model, nullptr, corpus[order[k]], opts);
        const BackboneGrads& bb = *g.backbone;
        acc.E += bb.E;
        acc.W_a += bb.W_a;
        acc.W_u += bb.W_u;
        acc.W_d += bb.W_d;
        acc.b_u += bb.b_u;
        acc.b_o += bb.b_o;
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      ++adam.t;
      adam.update(model.E, Matrix(acc.E * inv), m1.E, m2.E);
      adam.update(model.W_a, Matrix(acc.W_a * inv), m1.W_a, m2.W_a);
      adam.update(model.W_u, Matrix(acc.W_u * inv), m1.W_u, m2.W_u);
      adam.update(model.W_d, Matrix(acc.W_d * inv), m1.W_d, m2.W_d);
      adam.update(model.b_u, RowVector(acc.b_u * inv), m1.b_u, m2.b_u);
      adam.update(model.b_o, RowVector(acc.b_o * inv), m1.b_o, m2.b_o);
    }
    result.epoch_loss.push_back(mean_loss(model, nullptr, corpus));
  }
  return result;
}

}  // namespace leakprobe::toylab
