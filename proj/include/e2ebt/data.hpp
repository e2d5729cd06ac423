#pragma once

// Corpora, the synthetic language pair used for desk-scale experiments, and
// corpus-level BLEU.

#include "e2ebt/rng.hpp"
#include "e2ebt/vocab.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace e2ebt {

using Sentence = std::vector<int>;

struct SentencePair {
  Sentence source;
  Sentence target;
  bool operator==(const SentencePair&) const = default;
};

struct Corpus {
  Vocabulary vocab;
  std::vector<SentencePair> bilingual;
  std::vector<Sentence> mono_source;
  std::vector<Sentence> mono_target;
};

struct CorpusPaths {
  std::filesystem::path source, target;
  std::filesystem::path mono_source, mono_target;  // optional
};

// Whitespace-tokenized text, one sentence per line. Unknown words map to UNK;
// pairs with a side longer than length_cap are dropped, as are empty lines.
Corpus load_corpus(const CorpusPaths& paths, const Vocabulary& vocab, int length_cap = 50);
std::vector<Sentence> read_sentences(const std::filesystem::path& path, const Vocabulary& vocab);
void write_sentences(const std::filesystem::path& path, const std::vector<Sentence>& sentences,
                     const Vocabulary& vocab);

struct SyntheticTaskSpec {
  int vocab_size = 40;  // words per language
  std::uint64_t permutation_seed = 1;
  int window = 3;  // block size for the local reordering
  int min_length = 4;
  int max_length = 12;
  int bilingual_pairs = 500;
  int monolingual = 5000;  // per side
  int test_pairs = 200;
  int branching = 4;  // likely successors per word in the bigram process

  void validate() const;
};

// The target language is the source with every word substituted through a
// fixed permutation and every block of `window` words reversed.
class SyntheticLanguagePair {
 public:
  explicit SyntheticLanguagePair(const SyntheticTaskSpec& spec);

  const Vocabulary& vocab() const { return vocab_; }
  const SyntheticTaskSpec& spec() const { return spec_; }
  Sentence sample_source(Rng& rng) const;
  Sentence translate(const Sentence& source) const;
  Sentence translate_back(const Sentence& target) const;
  int source_word(int i) const { return Vocabulary::reserved + i; }
  int target_word(int i) const { return Vocabulary::reserved + spec_.vocab_size + i; }
  const std::vector<int>& permutation() const { return permutation_; }

 private:
  SyntheticTaskSpec spec_;
  Vocabulary vocab_;
  std::vector<int> permutation_, inverse_;
  std::vector<std::vector<double>> transitions_;  // row vocab_size is the start distribution
};

// Block reversal; applying it twice restores the input.
Sentence reorder_blocks(const Sentence& s, int window);

struct SyntheticData {
  Corpus train;
  std::vector<SentencePair> test;
};

// Disjoint bilingual, monolingual and test splits drawn from one pool of
// distinct source sentences. Monolingual target sentences are translations of
// source sentences that appear nowhere else.
SyntheticData generate_synthetic_pair(const SyntheticLanguagePair& language, Rng& rng);

struct BleuStats {
  double matches[4] = {0, 0, 0, 0};
  double totals[4] = {0, 0, 0, 0};
  double hypothesis_length = 0;
  double reference_length = 0;
  double precision(int n) const;
  double brevity_penalty() const;
  double score() const;
};

BleuStats bleu_stats(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references);
// Corpus BLEU-4 in [0, 100]. An n-gram order with no match (n >= 2) uses the
// precision floor 1 / (2 * total n-grams); no unigram match gives 0.
double bleu(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references);

}  // namespace e2ebt
