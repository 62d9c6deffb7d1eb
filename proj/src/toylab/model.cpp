#include "leakprobe/toylab/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "leakprobe/error.hpp"
#include "leakprobe/random.hpp"

namespace leakprobe::toylab {

void ToyLMConfig::validate() const {
  if (vocab < 2) throw ConfigError("vocab must be >= 2");
  if (embed < 1) throw ConfigError("embed must be >= 1");
  if (hidden < 1) throw ConfigError("hidden must be >= 1");
  if (window < 1) throw ConfigError("window must be >= 1");
}

std::string_view to_string(Module m) {
  switch (m) {
    case Module::a: return "a";
    case Module::u: return "u";
    case Module::d: return "d";
  }
  return "?";
}

Module parse_module(std::string_view name) {
  if (name == "a") return Module::a;
  if (name == "u") return Module::u;
  if (name == "d") return Module::d;
  throw ConfigError("unknown module '" + std::string(name) + "' (expected a, u, d)");
}

ModuleSet ModuleSet::parse(std::string_view text) {
  ModuleSet set;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t comma = text.find(',', pos);
    if (comma == std::string_view::npos) comma = text.size();
    set.insert(parse_module(text.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  return set;
}

std::string ModuleSet::str() const {
  std::string out;
  for (Module m : kAllModules) {
    if (!contains(m)) continue;
    if (!out.empty()) out += ',';
    out += to_string(m);
  }
  return out;
}

namespace {

Matrix gaussian(int rows, int cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  // Fill row-major so the draw order does not depend on Eigen's storage order.
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = stddev * rng.normal();
  }
  return m;
}

}  // namespace

ToyLM ToyLM::init(const ToyLMConfig& config) {
  config.validate();
  Rng rng(config.seed);
  ToyLM m;
  m.config = config;
  m.E = gaussian(config.vocab, config.embed, 1.0, rng);
  m.W_a = Matrix::Identity(config.embed, config.embed) +
          gaussian(config.embed, config.embed, 0.1, rng);
  m.W_u = gaussian(config.embed, config.hidden, 1.0 / std::sqrt(config.embed), rng);
  m.b_u = RowVector::Zero(config.hidden);
  m.W_d = gaussian(config.hidden, config.embed, 1.0 / std::sqrt(config.hidden), rng);
  m.b_o = RowVector::Zero(config.vocab);
  return m;
}

ToyLM ToyLM::zeros(const ToyLMConfig& config) {
  config.validate();
  ToyLM m;
  m.config = config;
  m.E = Matrix::Zero(config.vocab, config.embed);
  m.W_a = Matrix::Zero(config.embed, config.embed);
  m.W_u = Matrix::Zero(config.embed, config.hidden);
  m.b_u = RowVector::Zero(config.hidden);
  m.W_d = Matrix::Zero(config.hidden, config.embed);
  m.b_o = RowVector::Zero(config.vocab);
  return m;
}

Matrix& ToyLM::weight(Module m) {
  switch (m) {
    case Module::a: return W_a;
    case Module::u: return W_u;
    case Module::d: return W_d;
  }
  return W_a;
}

const Matrix& ToyLM::weight(Module m) const { return const_cast<ToyLM*>(this)->weight(m); }

int ToyLM::in_dim(Module m) const { return static_cast<int>(weight(m).rows()); }
int ToyLM::out_dim(Module m) const { return static_cast<int>(weight(m).cols()); }

bool ToyLM::finite() const {
  return E.allFinite() && W_a.allFinite() && W_u.allFinite() && b_u.allFinite() &&
         W_d.allFinite() && b_o.allFinite();
}

// ---------------------------------------------------------------------------
// Adapters

ModuleSet LoRAAdapterSet::modules() const {
  ModuleSet s;
  for (Module m : kAllModules) {
    if (find(m)) s.insert(m);
  }
  return s;
}

LoRAAdapterSet LoRAAdapterSet::init(const ToyLM& model, ModuleSet modules, int rank, double alpha,
                                    std::uint64_t seed, double init_std) {
  if (modules.empty()) throw ConfigError("adapter module set must not be empty");
  Rng rng(seed);
  LoRAAdapterSet set;
  set.rank = rank;
  set.alpha = alpha;
  for (Module m : kAllModules) {
    if (!modules.contains(m)) continue;
    int in = model.in_dim(m);
    int out = model.out_dim(m);
    set.factors[static_cast<int>(m)] = LoRAFactor{gaussian(in, rank, init_std, rng),
                                                  Matrix::Zero(rank, out)};
  }
  set.validate(model);
  return set;
}

LoRAAdapterSet LoRAAdapterSet::zeros_like(const LoRAAdapterSet& like) {
  LoRAAdapterSet out;
  out.rank = like.rank;
  out.alpha = like.alpha;
  for (Module m : kAllModules) {
    if (const auto* f = like.find(m)) {
      out.factors[static_cast<int>(m)] =
          LoRAFactor{Matrix::Zero(f->A.rows(), f->A.cols()), Matrix::Zero(f->B.rows(), f->B.cols())};
    }
  }
  return out;
}

std::size_t LoRAAdapterSet::parameter_count() const {
  std::size_t n = 0;
  for (Module m : kAllModules) {
    if (const auto* f = find(m)) n += static_cast<std::size_t>(f->A.size() + f->B.size());
  }
  return n;
}

double LoRAAdapterSet::squared_norm() const {
  double s = 0.0;
  for (Module m : kAllModules) {
    if (const auto* f = find(m)) s += f->A.squaredNorm() + f->B.squaredNorm();
  }
  return s;
}

void LoRAAdapterSet::validate(const ToyLM& model) const {
  if (rank < 1) throw ConfigError("adapter rank must be >= 1");
  for (Module m : kAllModules) {
    const auto* f = find(m);
    if (!f) continue;
    int in = model.in_dim(m);
    int out = model.out_dim(m);
    if (rank > std::min(in, out)) {
      throw ConfigError("adapter rank " + std::to_string(rank) + " exceeds min(in, out) for module " +
                        std::string(to_string(m)));
    }
    if (f->A.rows() != in || f->A.cols() != rank || f->B.rows() != rank || f->B.cols() != out) {
      throw ConfigError("adapter shape mismatch for module " + std::string(to_string(m)));
    }
  }
}

std::size_t adapter_parameter_count(const ToyLMConfig& cfg, ModuleSet modules, int rank) {
  std::size_t n = 0;
  auto add = [&](int in, int out) { n += static_cast<std::size_t>(rank) * (in + out); };
  if (modules.contains(Module::a)) add(cfg.embed, cfg.embed);
  if (modules.contains(Module::u)) add(cfg.embed, cfg.hidden);
  if (modules.contains(Module::d)) add(cfg.hidden, cfg.embed);
  return n;
}

int matched_rank(const ToyLMConfig& cfg, ModuleSet modules, std::size_t reference_count) {
  if (modules.empty()) throw ConfigError("module set must not be empty");
  int max_rank = std::numeric_limits<int>::max();
  if (modules.contains(Module::a)) max_rank = std::min(max_rank, cfg.embed);
  if (modules.contains(Module::u)) max_rank = std::min(max_rank, std::min(cfg.embed, cfg.hidden));
  if (modules.contains(Module::d)) max_rank = std::min(max_rank, std::min(cfg.embed, cfg.hidden));
  std::size_t per_rank = adapter_parameter_count(cfg, modules, 1);
  int best = 1;
  std::size_t best_diff = std::numeric_limits<std::size_t>::max();
  for (int r = 1; r <= max_rank; ++r) {
    std::size_t count = per_rank * static_cast<std::size_t>(r);
    std::size_t diff = count > reference_count ? count - reference_count : reference_count - count;
    if (diff < best_diff) {
      best = r;
      best_diff = diff;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Forward / backward

void check_sequence(const ToyLM& model, std::span<const Token> tokens) {
  if (tokens.size() < 2) throw ConfigError("sequence must have at least 2 tokens");
  for (Token t : tokens) {
    if (t < 0 || t >= model.config.vocab) {
      throw ConfigError("token " + std::to_string(t) + " outside vocabulary of size " +
                        std::to_string(model.config.vocab));
    }
  }
}

Matrix embed(const ToyLM& model, std::span<const Token> tokens) {
  Matrix X(static_cast<Eigen::Index>(tokens.size()), model.config.embed);
  for (std::size_t i = 0; i < tokens.size(); ++i) X.row(static_cast<Eigen::Index>(i)) = model.E.row(tokens[i]);
  return X;
}

namespace {

int window_start(int i, int window) { return std::max(0, i - window + 1); }

// Row i is the mean of rows [window_start(i), i] of X, for i < rows.
Matrix window_means(const Matrix& X, int rows, int window) {
  Matrix C(rows, X.cols());
  for (int i = 0; i < rows; ++i) {
    int lo = window_start(i, window);
    C.row(i) = X.middleRows(lo, i - lo + 1).colwise().mean();
  }
  return C;
}

struct Linear {
  Matrix input;         // adapter-path input (masked when dropout is on)
  Matrix projected;     // input * A
};

// y = x W + scale (x .* mask) A B, recording what backward needs.
Matrix adapted(const Matrix& x, const Matrix& W, const LoRAFactor* f, double scale,
               const Matrix* mask, Linear* rec) {
  Matrix y = x * W;
  if (f) {
    Linear local;
    Linear& r = rec ? *rec : local;
    r.input = mask ? Matrix(x.cwiseProduct(*mask)) : x;
    r.projected = r.input * f->A;
    y.noalias() += scale * r.projected * f->B;
  }
  return y;
}

struct Tape {
  Matrix C;
  Linear lin_a, lin_u, lin_d;
  Matrix A1, H, O;
  Matrix logp;
};

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double mx = logits.row(i).maxCoeff();
    double sum = (logits.row(i).array() - mx).exp().sum();
    double lse = mx + std::log(sum);
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

const LoRAFactor* factor(const LoRAAdapterSet* ad, Module m) { return ad ? ad->find(m) : nullptr; }
const Matrix* mask_for(const DropoutMasks* dm, Module m) { return dm ? dm->find(m) : nullptr; }

Matrix head(const ToyLM& model, const LoRAAdapterSet* ad, const Matrix& C,
            const DropoutMasks* dropout, Tape* tape) {
  double s = ad ? ad->scale() : 0.0;
  Matrix A1 = adapted(C, model.W_a, factor(ad, Module::a), s, mask_for(dropout, Module::a),
                      tape ? &tape->lin_a : nullptr);
  Matrix Z = adapted(A1, model.W_u, factor(ad, Module::u), s, mask_for(dropout, Module::u),
                     tape ? &tape->lin_u : nullptr);
  Z.rowwise() += model.b_u;
  Matrix H = Z.array().tanh().matrix();
  Matrix O = adapted(H, model.W_d, factor(ad, Module::d), s, mask_for(dropout, Module::d),
                     tape ? &tape->lin_d : nullptr);
  O += A1;
  Matrix logits = O * model.E.transpose();
  logits.rowwise() += model.b_o;
  Matrix logp = log_softmax_rows(logits);
  if (tape) {
    tape->A1 = std::move(A1);
    tape->H = std::move(H);
    tape->O = std::move(O);
  }
  return logp;
}

std::vector<TokenStat> token_stats(const Matrix& logp, std::span<const Token> tokens) {
  std::vector<TokenStat> stats;
  stats.reserve(static_cast<std::size_t>(logp.rows()));
  for (Eigen::Index i = 0; i < logp.rows(); ++i) {
    double mu = logp.row(i).mean();
    double var = (logp.row(i).array() - mu).square().mean();
    stats.push_back({logp(i, tokens[static_cast<std::size_t>(i) + 1]), mu, std::sqrt(var)});
  }
  return stats;
}

void check_inputs(const ToyLM& model, const LoRAAdapterSet* ad, std::span<const Token> tokens) {
  check_sequence(model, tokens);
  if (ad) ad->validate(model);
}

// dL/dx for y = x W + s (x .* mask) A B, accumulating parameter grads.
Matrix backprop_linear(const Matrix& x, const Matrix& dy, const Matrix& W, const LoRAFactor* f,
                       double s, const Matrix* mask, const Linear& rec, Matrix* dW,
                       LoRAFactor* df) {
  if (dW) *dW = x.transpose() * dy;
  Matrix dx = dy * W.transpose();
  if (f) {
    Matrix dproj = s * dy * f->B.transpose();  // rows x r
    if (df) {
      df->B = s * rec.projected.transpose() * dy;
      df->A = rec.input.transpose() * dproj;
    }
    Matrix dinput = dproj * f->A.transpose();
    if (mask) dinput = dinput.cwiseProduct(*mask);
    dx += dinput;
  }
  return dx;
}

}  // namespace

ForwardResult forward_from_embeddings(const ToyLM& model, const LoRAAdapterSet* adapters,
                                      std::span<const Token> tokens, const Matrix& inputs,
                                      const DropoutMasks* dropout) {
  check_inputs(model, adapters, tokens);
  int m = static_cast<int>(tokens.size()) - 1;
  Matrix C = window_means(inputs, m, model.config.window);
  Matrix logp = head(model, adapters, C, dropout, nullptr);
  ForwardResult out;
  out.tokens = token_stats(logp, tokens);
  out.loss = mean_nll(out.tokens);
  return out;
}

ForwardResult forward_loss(const ToyLM& model, const LoRAAdapterSet* adapters,
                           std::span<const Token> tokens) {
  check_sequence(model, tokens);
  return forward_from_embeddings(model, adapters, tokens, embed(model, tokens));
}

Gradients backward(const ToyLM& model, const LoRAAdapterSet* adapters,
                   std::span<const Token> tokens, const BackwardOptions& opts) {
  check_inputs(model, adapters, tokens);
  const int n = static_cast<int>(tokens.size());
  const int m = n - 1;
  const int w = model.config.window;
  const double s = adapters ? adapters->scale() : 0.0;

  Matrix X = embed(model, tokens);
  Tape tape;
  tape.C = window_means(X, m, w);
  Matrix logp = head(model, adapters, tape.C, opts.dropout, &tape);

  Gradients g;
  g.tokens = token_stats(logp, tokens);
  g.loss = mean_nll(g.tokens);

  // dL/dlogits = (softmax - onehot) / m
  Matrix G = logp.array().exp().matrix();
  for (int i = 0; i < m; ++i) G(i, tokens[static_cast<std::size_t>(i) + 1]) -= 1.0;
  G /= static_cast<double>(m);

  BackboneGrads bb;
  LoRAAdapterSet ad_grads;
  if (adapters) ad_grads = LoRAAdapterSet::zeros_like(*adapters);
  auto df = [&](Module mod) -> LoRAFactor* { return adapters ? ad_grads.find(mod) : nullptr; };
  const bool want_bb = opts.backbone;

  Matrix dO = G * model.E;
  if (want_bb) {
    bb.E = G.transpose() * tape.O;
    bb.b_o = G.colwise().sum();
  }

  Matrix dH = backprop_linear(tape.H, dO, model.W_d, factor(adapters, Module::d), s,
                              mask_for(opts.dropout, Module::d), tape.lin_d,
                              want_bb ? &bb.W_d : nullptr, df(Module::d));
  Matrix dA1 = dO;

  Matrix dZ = dH.cwiseProduct((1.0 - tape.H.array().square()).matrix());
  if (want_bb) bb.b_u = dZ.colwise().sum();
  dA1 += backprop_linear(tape.A1, dZ, model.W_u, factor(adapters, Module::u), s,
                         mask_for(opts.dropout, Module::u), tape.lin_u,
                         want_bb ? &bb.W_u : nullptr, df(Module::u));

  Matrix dC = backprop_linear(tape.C, dA1, model.W_a, factor(adapters, Module::a), s,
                              mask_for(opts.dropout, Module::a), tape.lin_a,
                              want_bb ? &bb.W_a : nullptr, df(Module::a));

  g.input_embeddings = Matrix::Zero(n, model.config.embed);
  for (int i = 0; i < m; ++i) {
    int lo = window_start(i, w);
    double inv = 1.0 / static_cast<double>(i - lo + 1);
    for (int j = lo; j <= i; ++j) g.input_embeddings.row(j) += inv * dC.row(i);
  }

  if (want_bb) {
    for (int j = 0; j < n; ++j) bb.E.row(tokens[static_cast<std::size_t>(j)]) += g.input_embeddings.row(j);
    g.backbone = std::move(bb);
  }
  if (adapters) g.adapters = std::move(ad_grads);
  return g;
}

RowVector next_token_probs(const ToyLM& model, const LoRAAdapterSet* adapters,
                           std::span<const Token> prefix) {
  if (prefix.empty()) throw ConfigError("prefix must not be empty");
  const int w = model.config.window;
  const auto n = static_cast<int>(prefix.size());
  int lo = window_start(n - 1, w);
  Matrix C = Matrix::Zero(1, model.config.embed);
  for (int j = lo; j < n; ++j) {
    Token t = prefix[static_cast<std::size_t>(j)];
    if (t < 0 || t >= model.config.vocab) throw ConfigError("token outside vocabulary");
    C.row(0) += model.E.row(t);
  }
  C /= static_cast<double>(n - lo);
  Matrix logp = head(model, adapters, C, nullptr, nullptr);
  return logp.row(0).array().exp().matrix();
}

ToyLM merge_adapters(const ToyLM& model, const LoRAAdapterSet& adapters) {
  adapters.validate(model);
  ToyLM merged = model;
  for (Module m : kAllModules) {
    if (const auto* f = adapters.find(m)) merged.weight(m) += adapters.scale() * f->A * f->B;
  }
  return merged;
}

Matrix adapter_path(const Matrix& x, const LoRAFactor& factor, double scale, const Matrix* mask) {
  Matrix input = mask ? Matrix(x.cwiseProduct(*mask)) : x;
  return scale * (input * factor.A) * factor.B;
}

}  // namespace leakprobe::toylab
