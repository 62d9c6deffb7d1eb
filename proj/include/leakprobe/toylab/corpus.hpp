#pragma once

// Synthetic token corpora drawn from first-order Markov chains.
//
// The vocabulary is split into clusters. From token t the chain stays inside
// t's cluster with probability `stay`, picking the successor by a fixed
// per-cluster weight vector, and otherwise jumps uniformly to a token outside
// the cluster. The "general" and "domain" sources share the cluster layout and
// weights but use different stay probabilities, so the domain text looks like
// a narrower dialect of the general text.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "leakprobe/random.hpp"
#include "leakprobe/toylab/model.hpp"

namespace leakprobe::toylab {

using Sequence = std::vector<Token>;
using Corpus = std::vector<Sequence>;

enum class Source { general, domain };

std::string_view to_string(Source s);
Source parse_source(std::string_view s);

struct ChainParams {
  int vocab = 64;
  int cluster_size = 16;
  double concentration = 1.0;  // Dirichlet concentration of within-cluster weights
  double general_stay = 0.9;
  double domain_stay = 1.0;
  std::uint64_t seed = 7;      // fixes the transition matrices, not the samples

  void validate() const;
};

struct MarkovChain {
  Matrix transition;  // vocab x vocab, rows sum to 1
  RowVector initial;  // distribution of the first token

  int vocab() const { return static_cast<int>(transition.rows()); }
};

MarkovChain make_chain(const ChainParams& params, Source source);

struct CorpusParams {
  ChainParams chain;
  Source source = Source::domain;
  int count = 256;
  int min_len = 4;
  int max_len = 6;

  void validate() const;
};

/// `count` sequences with lengths uniform in [min_len, max_len].
Corpus gen_corpus(std::uint64_t seed, const CorpusParams& params);

/// One chain walk of `length` tokens.
Sequence sample_walk(const MarkovChain& chain, int length, Rng& rng);

/// One sequence per line, token ids separated by single spaces.
void write_corpus(std::ostream& out, const Corpus& corpus);
std::string write_corpus(const Corpus& corpus);
/// Throws ParseError naming the line for non-integer tokens. Blank lines are skipped.
Corpus read_corpus(std::string_view text);

/// Space-joined token ids; the text that zlib_entropy sees for a toy sample.
std::string sequence_text(const Sequence& seq);

}  // namespace leakprobe::toylab
