#include <doctest.h>

#include <cmath>

#include "leakprobe/error.hpp"
#include "leakprobe/random.hpp"
#include "leakprobe/toylab/model.hpp"
#include "leakprobe/toylab/train.hpp"

using namespace leakprobe;
using namespace leakprobe::toylab;

namespace {

ToyLMConfig small_config(std::uint64_t seed) {
  ToyLMConfig c;
  c.vocab = 12;
  c.embed = 5;
  c.hidden = 7;
  c.window = 3;
  c.seed = seed;
  return c;
}

// Adapters with nonzero B so every factor carries gradient signal.
LoRAAdapterSet random_adapters(const ToyLM& m, ModuleSet modules, int rank, std::uint64_t seed) {
  LoRAAdapterSet ad = LoRAAdapterSet::init(m, modules, rank, 2.0 * rank, seed, 0.3);
  Rng rng(derive_seed(seed, 9));
  for (Module mod : kAllModules) {
    if (auto* f = ad.find(mod)) {
      for (Eigen::Index i = 0; i < f->B.size(); ++i) f->B.data()[i] = rng.normal(0.0, 0.3);
    }
  }
  return ad;
}

Sequence random_sequence(int vocab, int n, Rng& rng) {
  Sequence s;
  for (int i = 0; i < n; ++i) s.push_back(static_cast<Token>(rng.uniform_index(static_cast<std::uint64_t>(vocab))));
  return s;
}

double rel_err(double analytic, double numeric) {
  double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

// Max relative error of analytic vs central differences over every entry of `param`.
template <typename Loss>
double fd_check(Matrix& param, const Matrix& analytic, Loss loss) {
  const double h = 1e-5;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < param.size(); ++i) {
    double keep = param.data()[i];
    param.data()[i] = keep + h;
    double up = loss();
    param.data()[i] = keep - h;
    double down = loss();
    param.data()[i] = keep;
    worst = std::max(worst, rel_err(analytic.data()[i], (up - down) / (2 * h)));
  }
  return worst;
}

}  // namespace

TEST_CASE("softmax rows are normalized and loss agrees with token stats") {
  ToyLM m = ToyLM::init(small_config(1));
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Sequence s = random_sequence(12, 2 + static_cast<int>(rng.uniform_index(10)), rng);
    ForwardResult f = forward_loss(m, nullptr, s);
    CHECK(f.tokens.size() == s.size() - 1);
    CHECK(std::abs(f.loss - mean_nll(f.tokens)) < 1e-12);
    for (std::size_t i = 1; i < s.size(); ++i) {
      RowVector p = next_token_probs(m, nullptr, std::span<const Token>(s.data(), i));
      CHECK(std::abs(p.sum() - 1.0) < 1e-12);
      CHECK(std::log(p(s[i])) == doctest::Approx(f.tokens[i - 1].lp).epsilon(1e-10));
    }
  }
}

TEST_CASE("zero model predicts uniformly") {
  ToyLM z = ToyLM::zeros(small_config(0));
  ForwardResult f = forward_loss(z, nullptr, Sequence{1, 2, 3, 4});
  CHECK(f.loss == doctest::Approx(std::log(12.0)).epsilon(1e-14));
  for (const auto& t : f.tokens) CHECK(t.sigma == doctest::Approx(0.0));
}

TEST_CASE("fresh adapters leave the backbone output unchanged") {
  ToyLM m = ToyLM::init(small_config(3));
  LoRAAdapterSet ad = LoRAAdapterSet::init(m, ModuleSet::all(), 2, 4.0, 5);
  Sequence s{0, 5, 3, 11, 2, 7};
  CHECK(forward_loss(m, &ad, s).tokens == forward_loss(m, nullptr, s).tokens);
}

TEST_CASE("sequence checks") {
  ToyLM m = ToyLM::init(small_config(3));
  CHECK_THROWS_AS(forward_loss(m, nullptr, Sequence{1}), ConfigError);
  CHECK_THROWS_AS(forward_loss(m, nullptr, Sequence{1, 12}), ConfigError);
  CHECK_THROWS_AS(forward_loss(m, nullptr, Sequence{-1, 2}), ConfigError);
}

TEST_CASE("adapter gradients match finite differences for every module mask") {
  const std::vector<ModuleSet> masks{ModuleSet::all(), {Module::a}, {Module::u}, {Module::d}, {Module::u, Module::d}};
  for (int sample = 0; sample < 10; ++sample) {
    ToyLM m = ToyLM::init(small_config(100 + static_cast<std::uint64_t>(sample)));
    Rng rng(derive_seed(7, static_cast<std::uint64_t>(sample)));
    Sequence s = random_sequence(12, 8, rng);
    ModuleSet mask = masks[static_cast<std::size_t>(sample) % masks.size()];
    LoRAAdapterSet ad = random_adapters(m, mask, 2, 50 + static_cast<std::uint64_t>(sample));
    Gradients g = backward(m, &ad, s);
    CHECK(g.loss == forward_loss(m, &ad, s).loss);
    REQUIRE(g.adapters);
    auto loss = [&] { return forward_loss(m, &ad, s).loss; };
    for (Module mod : kAllModules) {
      LoRAFactor* f = ad.find(mod);
      if (!f) continue;
      const LoRAFactor* gf = g.adapters->find(mod);
      CHECK(fd_check(f->A, gf->A, loss) < 1e-4);
      CHECK(fd_check(f->B, gf->B, loss) < 1e-4);
    }
  }
}

TEST_CASE("input-embedding and backbone gradients match finite differences") {
  for (int sample = 0; sample < 10; ++sample) {
    ToyLM m = ToyLM::init(small_config(200 + static_cast<std::uint64_t>(sample)));
    Rng rng(derive_seed(8, static_cast<std::uint64_t>(sample)));
    Sequence s = random_sequence(12, 8, rng);
    LoRAAdapterSet ad = random_adapters(m, ModuleSet::all(), 2, 70 + static_cast<std::uint64_t>(sample));
    BackwardOptions opts;
    opts.backbone = true;
    Gradients g = backward(m, &ad, s, opts);

    Matrix inputs = embed(m, s);
    CHECK(fd_check(inputs, g.input_embeddings,
                   [&] { return forward_from_embeddings(m, &ad, s, inputs).loss; }) < 1e-4);

    REQUIRE(g.backbone);
    auto loss = [&] { return forward_loss(m, &ad, s).loss; };
    CHECK(fd_check(m.E, g.backbone->E, loss) < 1e-4);
    CHECK(fd_check(m.W_a, g.backbone->W_a, loss) < 1e-4);
    CHECK(fd_check(m.W_u, g.backbone->W_u, loss) < 1e-4);
    CHECK(fd_check(m.W_d, g.backbone->W_d, loss) < 1e-4);
    Matrix bu = m.b_u, bo = m.b_o;
    auto loss_bu = [&] {
      m.b_u = bu;
      return forward_loss(m, &ad, s).loss;
    };
    CHECK(fd_check(bu, g.backbone->b_u, loss_bu) < 1e-4);
    m.b_u = bu;
    auto loss_bo = [&] {
      m.b_o = bo;
      return forward_loss(m, &ad, s).loss;
    };
    CHECK(fd_check(bo, g.backbone->b_o, loss_bo) < 1e-4);
  }
}

TEST_CASE("gradients under dropout masks match finite differences") {
  ToyLM m = ToyLM::init(small_config(300));
  Rng rng(4);
  Sequence s = random_sequence(12, 8, rng);
  LoRAAdapterSet ad = random_adapters(m, ModuleSet::all(), 2, 11);
  DropoutMasks masks = draw_dropout_masks(m, ad, static_cast<int>(s.size()), 0.3, rng);
  BackwardOptions opts;
  opts.dropout = &masks;
  Gradients g = backward(m, &ad, s, opts);
  auto loss = [&] { return forward_from_embeddings(m, &ad, s, embed(m, s), &masks).loss; };
  CHECK(g.loss == doctest::Approx(loss()).epsilon(1e-14));
  for (Module mod : kAllModules) {
    CHECK(fd_check(ad.find(mod)->A, g.adapters->find(mod)->A, loss) < 1e-4);
    CHECK(fd_check(ad.find(mod)->B, g.adapters->find(mod)->B, loss) < 1e-4);
  }
}

TEST_CASE("merged weights reproduce the adapter path") {
  ToyLM m = ToyLM::init(small_config(9));
  SUBCASE("B = 0 merges to the backbone") {
    LoRAAdapterSet ad = LoRAAdapterSet::init(m, ModuleSet::all(), 3, 6.0, 1);
    ToyLM merged = merge_adapters(m, ad);
    CHECK(merged.W_a == m.W_a);
    CHECK(merged.W_u == m.W_u);
    CHECK(merged.W_d == m.W_d);
  }
  SUBCASE("rank-1 outer product") {
    LoRAAdapterSet ad = LoRAAdapterSet::init(m, {Module::a}, 1, 2.0, 1);
    LoRAFactor& f = *ad.find(Module::a);
    f.A.setZero();
    f.A(0, 0) = 1.0;
    f.B.setZero();
    f.B(0, 2) = 0.5;
    ToyLM merged = merge_adapters(m, ad);
    Matrix expect = m.W_a;
    expect(0, 2) += 2.0 * 1.0 * 0.5;  // (alpha / r) * A B
    CHECK(merged.W_a == expect);
  }
  SUBCASE("dual path on 100 inputs") {
    LoRAAdapterSet ad = random_adapters(m, ModuleSet::all(), 2, 3);
    ToyLM merged = merge_adapters(m, ad);
    Rng rng(12);
    for (int i = 0; i < 100; ++i) {
      Sequence s = random_sequence(12, 2 + static_cast<int>(rng.uniform_index(9)), rng);
      auto a = forward_loss(m, &ad, s);
      auto b = forward_loss(merged, nullptr, s);
      CHECK(std::abs(a.loss - b.loss) < 1e-10);
      for (std::size_t k = 0; k < a.tokens.size(); ++k) CHECK(std::abs(a.tokens[k].lp - b.tokens[k].lp) < 1e-10);
    }
  }
  SUBCASE("shape mismatch") {
    LoRAAdapterSet ad = LoRAAdapterSet::init(m, ModuleSet::all(), 2, 4.0, 1);
    ad.find(Module::u)->A = Matrix::Zero(3, 2);
    CHECK_THROWS_AS(merge_adapters(m, ad), ConfigError);
  }
}

TEST_CASE("inverted dropout preserves the expected adapter-path activation") {
  ToyLM m = ToyLM::init(small_config(1));
  LoRAAdapterSet ad = random_adapters(m, ModuleSet::all(), 2, 1);
  Rng rng(77);
  const int n = 5;
  Matrix x = Matrix::Ones(n - 1, m.config.hidden) + 0.5 * Matrix::Random(n - 1, m.config.hidden).cwiseAbs();
  const LoRAFactor& f = *ad.find(Module::d);
  Matrix clean = adapter_path(x, f, ad.scale(), nullptr);
  for (double eta : {0.1, 0.5}) {
    Matrix sum = Matrix::Zero(clean.rows(), clean.cols());
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
      DropoutMasks dm = draw_dropout_masks(m, ad, n, eta, rng);
      sum += adapter_path(x, f, ad.scale(), dm.find(Module::d));
    }
    Matrix mean = sum / draws;
    CHECK((mean - clean).norm() / clean.norm() < 0.02);
  }
  DropoutMasks none = draw_dropout_masks(m, ad, n, 0.0, rng);
  CHECK(none.find(Module::a)->isOnes());
}

TEST_CASE("parameter matching across module masks") {
  ToyLMConfig c;
  std::size_t full = adapter_parameter_count(c, ModuleSet::all(), 4);
  CHECK(full == 4u * (16 + 16) + 4u * (16 + 32) + 4u * (32 + 16));
  CHECK(matched_rank(c, {Module::a}, full) == 16);
  CHECK(adapter_parameter_count(c, {Module::a}, 16) == full);
  CHECK(matched_rank(c, {Module::u, Module::d}, full) == 5);
  CHECK(matched_rank(c, ModuleSet::all(), full) == 4);
  CHECK(ModuleSet::parse("d,a").str() == "a,d");
  CHECK_THROWS_AS(ModuleSet::parse("a,q"), ConfigError);
  CHECK_THROWS_AS(ModuleSet::parse(""), ConfigError);
}
