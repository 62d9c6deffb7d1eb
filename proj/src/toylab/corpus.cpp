#include "leakprobe/toylab/corpus.hpp"

#include <charconv>
#include <ostream>
#include <sstream>

#include "leakprobe/error.hpp"

namespace leakprobe::toylab {

std::string_view to_string(Source s) { return s == Source::general ? "general" : "domain"; }

Source parse_source(std::string_view s) {
  if (s == "general") return Source::general;
  if (s == "domain") return Source::domain;
  throw ConfigError("unknown corpus source '" + std::string(s) + "' (expected general, domain)");
}

void ChainParams::validate() const {
  if (vocab < 2) throw ConfigError("vocab must be >= 2");
  if (cluster_size < 1 || cluster_size > vocab) throw ConfigError("cluster_size must be in [1, vocab]");
  if (!(concentration > 0.0)) throw ConfigError("concentration must be > 0");
  for (double p : {general_stay, domain_stay}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("stay probability must be in [0, 1]");
  }
}

MarkovChain make_chain(const ChainParams& params, Source source) {
  params.validate();
  const int V = params.vocab;
  Rng rng(params.seed);

  std::vector<int> perm(static_cast<std::size_t>(V));
  for (int i = 0; i < V; ++i) perm[static_cast<std::size_t>(i)] = i;
  rng.shuffle(perm);
  std::vector<int> cluster(static_cast<std::size_t>(V));
  for (int i = 0; i < V; ++i) cluster[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = i / params.cluster_size;

  // Within-cluster weights: Dirichlet(concentration) per cluster.
  std::vector<double> weight(static_cast<std::size_t>(V));
  for (int start = 0; start < V; start += params.cluster_size) {
    int end = std::min(V, start + params.cluster_size);
    double total = 0.0;
    for (int i = start; i < end; ++i) {
      double g = rng.gamma(params.concentration);
      weight[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = g;
      total += g;
    }
    for (int i = start; i < end; ++i) weight[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] /= total;
  }

  const double stay = source == Source::general ? params.general_stay : params.domain_stay;
  MarkovChain chain;
  chain.transition = Matrix::Zero(V, V);
  chain.initial = RowVector::Constant(V, 1.0 / V);
  for (int i = 0; i < V; ++i) {
    int c = cluster[static_cast<std::size_t>(i)];
    int outside = 0;
    for (int j = 0; j < V; ++j) outside += cluster[static_cast<std::size_t>(j)] != c ? 1 : 0;
    double p_stay = outside == 0 ? 1.0 : stay;
    for (int j = 0; j < V; ++j) {
      if (cluster[static_cast<std::size_t>(j)] == c) {
        chain.transition(i, j) = p_stay * weight[static_cast<std::size_t>(j)];
      } else {
        chain.transition(i, j) = (1.0 - p_stay) / outside;
      }
    }
  }
  return chain;
}

void CorpusParams::validate() const {
  chain.validate();
  if (count < 0) throw ConfigError("count must be >= 0");
  if (min_len < 2) throw ConfigError("min_len must be >= 2");
  if (max_len < min_len) throw ConfigError("max_len must be >= min_len");
}

Sequence sample_walk(const MarkovChain& chain, int length, Rng& rng) {
  Sequence seq;
  seq.reserve(static_cast<std::size_t>(length));
  if (length <= 0) return seq;
  seq.push_back(static_cast<Token>(rng.categorical(chain.initial)));
  while (static_cast<int>(seq.size()) < length) {
    seq.push_back(static_cast<Token>(rng.categorical(chain.transition.row(seq.back()))));
  }
  return seq;
}

Corpus gen_corpus(std::uint64_t seed, const CorpusParams& params) {
  params.validate();
  MarkovChain chain = make_chain(params.chain, params.source);
  Rng rng(seed);
  Corpus corpus;
  corpus.reserve(static_cast<std::size_t>(params.count));
  const auto span = static_cast<std::uint64_t>(params.max_len - params.min_len + 1);
  for (int i = 0; i < params.count; ++i) {
    int len = params.min_len + static_cast<int>(rng.uniform_index(span));
    corpus.push_back(sample_walk(chain, len, rng));
  }
  return corpus;
}

std::string sequence_text(const Sequence& seq) {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(seq[i]);
  }
  return out;
}

void write_corpus(std::ostream& out, const Corpus& corpus) {
  for (const auto& seq : corpus) out << sequence_text(seq) << '\n';
}

std::string write_corpus(const Corpus& corpus) {
  std::ostringstream out;
  write_corpus(out, corpus);
  return out.str();
}

Corpus read_corpus(std::string_view text) {
  Corpus corpus;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    Sequence seq;
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
      if (i >= line.size()) break;
      std::size_t j = i;
      while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
      Token t = 0;
      auto [ptr, ec] = std::from_chars(line.data() + i, line.data() + j, t);
      if (ec != std::errc() || ptr != line.data() + j || t < 0) {
        throw ParseError(line_no, "bad token '" + std::string(line.substr(i, j - i)) + "'");
      }
      seq.push_back(t);
      i = j;
    }
    if (!seq.empty()) corpus.push_back(std::move(seq));
  }
  return corpus;
}

}  // namespace leakprobe::toylab
