#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>

#include "leakprobe/error.hpp"
#include "leakprobe/random.hpp"
#include "leakprobe/toylab/checkpoint.hpp"
#include "leakprobe/toylab/corpus.hpp"
#include "leakprobe/toylab/extract.hpp"
#include "leakprobe/toylab/fixture.hpp"
#include "leakprobe/toylab/perturb.hpp"
#include "leakprobe/toylab/train.hpp"

using namespace leakprobe;
using namespace leakprobe::toylab;

namespace {

// Visit-weighted total variation between empirical bigram rows and the chain.
double bigram_tv(const MarkovChain& c, const Sequence& walk) {
  const int V = c.vocab();
  Matrix counts = Matrix::Zero(V, V);
  for (std::size_t i = 1; i < walk.size(); ++i) counts(walk[i - 1], walk[i]) += 1.0;
  const double total = static_cast<double>(walk.size() - 1);
  double tv = 0.0;
  for (int r = 0; r < V; ++r) {
    double n = counts.row(r).sum();
    if (n == 0) continue;
    tv += 0.5 * (counts.row(r) / total - (n / total) * c.transition.row(r)).cwiseAbs().sum();
  }
  return tv;
}

ToyLM small_model(std::uint64_t seed) {
  ToyLMConfig c;
  c.vocab = 16;
  c.embed = 6;
  c.hidden = 8;
  c.window = 4;
  c.seed = seed;
  return ToyLM::init(c);
}

Corpus small_corpus(std::uint64_t seed, int count) {
  CorpusParams p;
  p.chain.vocab = 16;
  p.chain.cluster_size = 4;
  p.count = count;
  return gen_corpus(seed, p);
}

double hamming(const Sequence& a, const Sequence& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

}  // namespace

TEST_CASE("chain rows are distributions and sources differ") {
  ChainParams p;
  MarkovChain g = make_chain(p, Source::general);
  MarkovChain d = make_chain(p, Source::domain);
  for (int r = 0; r < g.vocab(); ++r) {
    CHECK(std::abs(g.transition.row(r).sum() - 1.0) < 1e-12);
    CHECK(std::abs(d.transition.row(r).sum() - 1.0) < 1e-12);
  }
  CHECK((g.transition - d.transition).cwiseAbs().maxCoeff() > 0.01);
  CHECK(make_chain(p, Source::domain).transition == d.transition);
}

TEST_CASE("bigram frequencies match the chain") {
  ChainParams p;
  Rng rng(5);
  MarkovChain d = make_chain(p, Source::domain);
  CHECK(bigram_tv(d, sample_walk(d, 100000, rng)) < 0.02);
  // General rows spread over the whole vocabulary; a longer walk is needed to
  // get under the same bound.
  MarkovChain g = make_chain(p, Source::general);
  CHECK(bigram_tv(g, sample_walk(g, 1000000, rng)) < 0.02);
}

TEST_CASE("corpus generation is seeded") {
  CorpusParams p;
  p.count = 50;
  Corpus a = gen_corpus(3, p);
  CHECK(a == gen_corpus(3, p));
  CHECK(a != gen_corpus(4, p));
  for (const auto& s : a) {
    CHECK(s.size() >= 4);
    CHECK(s.size() <= 6);
  }
  p.source = Source::general;
  CHECK(gen_corpus(3, p) != a);
}

TEST_CASE("corpus text format") {
  Corpus c{{1, 2, 3}, {10, 0}};
  std::string text = write_corpus(c);
  CHECK(text == "1 2 3\n10 0\n");
  CHECK(read_corpus(text) == c);
  CHECK(read_corpus("  4\t5 \n\n6 7\n") == Corpus{{4, 5}, {6, 7}});
  try {
    read_corpus("1 2\n3 x\n");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  CHECK(parse_source("general") == Source::general);
  CHECK_THROWS_AS(parse_source("web"), ConfigError);
}

TEST_CASE("training is deterministic and reduces the training loss") {
  ToyLM m = small_model(1);
  Corpus data = small_corpus(2, 64);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.lr = 3e-2;
  cfg.seed = 9;
  TrainResult a = train(m, data, nullptr, cfg);
  TrainResult b = train(m, data, nullptr, cfg);
  CHECK(a.adapters.find(Module::u)->B == b.adapters.find(Module::u)->B);
  CHECK(a.log.size() == 5);
  CHECK(a.log.back().ppl_ft < a.log.front().ppl_ft);
  CHECK(a.steps == steps_for(64, 4, 16));
  CHECK(a.log.front().ppl_ft == doctest::Approx(mean_loss(m, nullptr, data)).epsilon(1e-12));
}

TEST_CASE("decoupled weight decay shrinks adapters without data gradient") {
  // A zero backbone with B = 0 yields zero gradients for every adapter
  // matrix, so only the decay acts.
  ToyLMConfig c;
  c.vocab = 8;
  c.embed = 4;
  c.hidden = 4;
  ToyLM z = ToyLM::zeros(c);
  z.E.setZero();
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch = 1;
  cfg.weight_decay = 0.1;
  cfg.seed = 1;
  Corpus data{{1, 2, 3}, {3, 2, 1}, {0, 1, 2}};
  std::vector<double> norms;
  TrainHooks hooks;
  hooks.on_step = [&](std::size_t, const LoRAAdapterSet& ad) { norms.push_back(ad.norm()); };
  LoRAAdapterSet init = init_adapters(z, cfg);
  train(z, data, nullptr, cfg, hooks);
  REQUIRE(norms.size() == 3);
  CHECK(norms[0] < init.norm());
  CHECK(norms[1] < norms[0]);
  CHECK(norms[2] < norms[1]);
  CHECK(norms[0] == doctest::Approx(init.norm() * (1 - cfg.lr * cfg.weight_decay)).epsilon(1e-12));
}

TEST_CASE("DP clipping bounds every per-sample gradient") {
  ToyLM m = small_model(4);
  Corpus data = small_corpus(5, 40);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.lr = 5e-2;
  cfg.seed = 3;
  cfg.dp = DPConfig{1.0, 0.5, 1e-5};
  std::size_t seen = 0;
  double worst = 0;
  TrainHooks hooks;
  hooks.on_clipped_sample = [&](const LoRAAdapterSet& g) {
    ++seen;
    worst = std::max(worst, g.norm());
  };
  train(m, data, nullptr, cfg, hooks);
  CHECK(seen == 80);
  CHECK(worst <= 1.0 + 1e-9);
  CHECK(worst > 0.0);
}

TEST_CASE("loose DP epsilon") {
  double eps0 = std::sqrt(2.0 * std::log(1.25 / 1e-5));
  CHECK(dp_epsilon(1, 1.0, 1e-5) == doctest::Approx(eps0));
  CHECK(dp_epsilon(48, 2.0, 1e-5) == doctest::Approx(48 * eps0 / 2.0));
  double noise = dp_noise_for_epsilon(10.0, 48, 1e-5);
  CHECK(dp_epsilon(48, noise, 1e-5) == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(steps_for(256, 3, 16) == 48);
  CHECK(steps_for(250, 3, 16) == 48);
  CHECK(steps_for(10, 2, 16) == 2);
}

TEST_CASE("pretraining lowers the loss") {
  ToyLM m = small_model(6);
  Corpus data = small_corpus(7, 128);
  PretrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.epochs = 3;
  cfg.seed = 2;
  PretrainResult r = pretrain(m, data, cfg);
  CHECK(r.epoch_loss.size() == 3);
  CHECK(mean_loss(r.model, nullptr, data) < mean_loss(m, nullptr, data));
}

TEST_CASE("neighbors") {
  ToyLM m = small_model(8);
  Sequence x{1, 5, 2, 9, 3, 4};
  Corpus none = make_neighbors(m, nullptr, x, 0, 4, 1);
  CHECK(none.size() == 4);
  for (const auto& n : none) CHECK(n == x);
  Corpus two = make_neighbors(m, nullptr, x, 2, 5, 1);
  CHECK(two.size() == 5);
  for (const auto& n : two) {
    CHECK(n.size() == x.size());
    CHECK(hamming(n, x) <= 2);
    CHECK(hamming(n, x) >= 1);
    CHECK(n[0] == x[0]);
  }
  CHECK(make_neighbors(m, nullptr, x, 2, 5, 1) == two);
  CHECK(make_neighbors(m, nullptr, x, 2, 5, 2) != two);
  CHECK_THROWS_AS(make_neighbors(m, nullptr, x, 6, 1, 1), ConfigError);
}

TEST_CASE("MoPe perturbations") {
  ToyLMConfig c;
  ToyLM m = ToyLM::init(c);
  LoRAAdapterSet ad = LoRAAdapterSet::init(m, ModuleSet::all(), 4, 8.0, 1);
  auto same = mope_perturb(ad, 0.0, 3, 5);
  for (const auto& p : same) CHECK(p.find(Module::a)->A == ad.find(Module::a)->A);

  const double sigma = 0.01;
  auto sets = mope_perturb(ad, sigma, 20, 5);
  std::vector<double> deltas;
  for (const auto& p : sets) {
    for (Module mod : kAllModules) {
      Matrix da = p.find(mod)->A - ad.find(mod)->A;
      Matrix db = p.find(mod)->B - ad.find(mod)->B;
      deltas.insert(deltas.end(), da.data(), da.data() + da.size());
      deltas.insert(deltas.end(), db.data(), db.data() + db.size());
    }
  }
  REQUIRE(deltas.size() >= 10000);
  double mean = std::accumulate(deltas.begin(), deltas.end(), 0.0) / static_cast<double>(deltas.size());
  double var = 0;
  for (double d : deltas) var += (d - mean) * (d - mean);
  double sd = std::sqrt(var / static_cast<double>(deltas.size() - 1));
  CHECK(std::abs(sd - sigma) / sigma < 0.02);
  // Distinct streams per copy.
  CHECK(sets[0].find(Module::a)->A != sets[1].find(Module::a)->A);
}

TEST_CASE("self-prompt reference") {
  ToyLM m = small_model(10);
  Corpus data = small_corpus(11, 64);
  TrainConfig tc;
  tc.epochs = 3;
  tc.lr = 5e-2;
  tc.seed = 4;
  LoRAAdapterSet ft = train(m, data, nullptr, tc).adapters;

  SelfPromptConfig sc;
  sc.train = tc;
  sc.seed = 12;
  sc.n_samples = 0;
  SelfPromptResult empty = build_self_prompt(m, ft, data, sc);
  CHECK(empty.corpus.empty());
  for (Module mod : kAllModules) CHECK(empty.adapters.find(mod)->B.isZero(0.0));
  Sequence probe{1, 2, 3, 4};
  CHECK(forward_loss(m, &empty.adapters, probe).tokens == forward_loss(m, nullptr, probe).tokens);

  sc.n_samples = 400;
  sc.continuation_len = 6;
  SelfPromptResult r = build_self_prompt(m, ft, data, sc);
  CHECK(r.corpus.size() == 400);
  // Continuation token frequencies track the fine-tuned model's average
  // predictive distribution.
  const int V = m.config.vocab;
  std::vector<double> freq(static_cast<std::size_t>(V), 0.0);
  RowVector predicted = RowVector::Zero(V);
  for (const auto& s : r.corpus) {
    for (std::size_t i = static_cast<std::size_t>(sc.prompt_len); i < s.size(); ++i) {
      freq[static_cast<std::size_t>(s[i])] += 1;
      predicted += next_token_probs(m, &ft, std::span<const Token>(s.data(), i));
    }
  }
  auto ranks = [](std::vector<double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t k = 0; k < idx.size(); ++k) r[idx[k]] = static_cast<double>(k);
    return r;
  };
  std::vector<double> pv(predicted.data(), predicted.data() + V);
  auto ra = ranks(freq), rb = ranks(pv);
  double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / V;
  double num = 0, da = 0, db = 0;
  for (int i = 0; i < V; ++i) {
    num += (ra[i] - ma) * (rb[i] - ma);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - ma) * (rb[i] - ma);
  }
  CHECK(num / std::sqrt(da * db) > 0.0);
}

TEST_CASE("extracted traces") {
  ToyLM m = small_model(13);
  Corpus members = small_corpus(14, 12);
  Corpus nonmembers = small_corpus(15, 12);
  TrainConfig tc;
  tc.epochs = 10;
  tc.lr = 5e-2;
  tc.seed = 16;
  LoRAAdapterSet init = init_adapters(m, tc);
  LoRAAdapterSet ft = train(m, members, nullptr, tc).adapters;
  ExtractOptions opts;
  opts.seed = 17;
  auto samples = label_samples(members, nonmembers);

  TraceSet at_init = extract_trace({{Role::target, &m, &init}, {Role::pretrained, &m, nullptr}}, samples, opts);
  CHECK(parse_trace_file(write_trace_file(at_init)) == at_init);
  for (const auto& r : at_init.records) {
    const ModelTrace& t = r.traces.at(Role::target);
    const ModelTrace& p = r.traces.at(Role::pretrained);
    CHECK(t.tokens == p.tokens);
    CHECK(t.loss == p.loss);
    CHECK(t.neighbor_losses == p.neighbor_losses);
    CHECK(t.mope_losses == p.mope_losses);
    CHECK(t.gradnorm_x == p.gradnorm_x);
    CHECK(t.gradnorm_theta.has_value());
    CHECK_FALSE(p.gradnorm_theta.has_value());
  }

  TraceSet after = extract_trace({{Role::target, &m, &ft}, {Role::pretrained, &m, nullptr}}, samples, opts);
  for (std::size_t i = 0; i < members.size(); ++i) {
    CHECK(after.records[i].traces.at(Role::target).loss < at_init.records[i].traces.at(Role::target).loss);
  }

  // Order independence: per-sample randomness is keyed on the sample id.
  auto reversed = samples;
  std::reverse(reversed.begin(), reversed.end());
  TraceSet rev = extract_trace({{Role::target, &m, &ft}, {Role::pretrained, &m, nullptr}}, reversed, opts);
  for (const auto& r : rev.records) {
    auto it = std::find_if(after.records.begin(), after.records.end(),
                           [&](const SampleRecord& x) { return x.sample_id == r.sample_id; });
    CHECK(*it == r);
  }
  CHECK(after.records[0].sample_id == "m0");
  CHECK(after.records[12].sample_id == "n0");
  CHECK(after.records[0].zlib_len == zlib_entropy(sequence_text(members[0])));
}

TEST_CASE("checkpoints round-trip exactly") {
  ToyLM m = small_model(18);
  LoRAAdapterSet ad = LoRAAdapterSet::init(m, {Module::a, Module::d}, 3, 6.0, 2, 0.5);
  auto dir = std::filesystem::temp_directory_path() / "leakprobe_ckpt_test";
  std::filesystem::create_directories(dir);
  save_model((dir / "m.json").string(), m);
  save_adapters((dir / "a.json").string(), ad);
  ToyLM m2 = load_model((dir / "m.json").string());
  LoRAAdapterSet ad2 = load_adapters((dir / "a.json").string());
  CHECK(m2.config == m.config);
  CHECK(m2.E == m.E);
  CHECK(m2.W_u == m.W_u);
  CHECK(m2.b_o == m.b_o);
  CHECK(ad2.modules() == ad.modules());
  CHECK(ad2.find(Module::d)->A == ad.find(Module::d)->A);
  CHECK(ad2.alpha == ad.alpha);
  CHECK_THROWS_AS(model_from_json(nlohmann::ordered_json{{"format", "other"}}), ConfigError);
  CHECK_THROWS_AS(load_model((dir / "missing.json").string()), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("reference fixture: orientation soundness and a positive gap by epoch 10") {
  FixtureConfig fc = FixtureConfig::reference();
  World w = build_world(fc);
  RunResult r = run_finetune(w, [&] {
    TrainConfig t = fc.finetune;
    t.epochs = 10;
    return t;
  }(), RunOptions{{3, 10}, false});
  REQUIRE(r.reports.size() == 2);
  for (const auto& er : r.reports) {
    for (const auto& a : er.report.attacks) {
      INFO("epoch " << er.epoch << " " << a.attack);
      CHECK(a.auc >= 0.5 - 0.03);  // every column is oriented higher => member
    }
  }
  REQUIRE(r.reports[1].report.utility);
  CHECK(r.reports[1].report.utility->gap > 0.0);
}

TEST_CASE("MoPe pairs are antithetic") {
  ToyLM m = ToyLM::init(ToyLMConfig{});
  LoRAAdapterSet ad = LoRAAdapterSet::init(m, ModuleSet::all(), 4, 8.0, 1);
  auto sets = mope_perturb(ad, 0.01, 5, 9);
  REQUIRE(sets.size() == 5);
  for (Module mod : kAllModules) {
    Matrix plus = sets[2].find(mod)->B - ad.find(mod)->B;
    Matrix minus = sets[3].find(mod)->B - ad.find(mod)->B;
    CHECK((plus + minus).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(plus.cwiseAbs().maxCoeff() > 0.0);
  }
  // The unpaired last copy is a fresh draw.
  CHECK((sets[4].find(Module::a)->A - ad.find(Module::a)->A) != (sets[0].find(Module::a)->A - ad.find(Module::a)->A));
}
