#include "e2ebt/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

namespace e2ebt {

std::vector<Sentence> read_sentences(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<Sentence> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(vocab.encode(line));
  return out;
}

void write_sentences(const std::filesystem::path& path, const std::vector<Sentence>& sentences,
                     const Vocabulary& vocab) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& s : sentences) out << vocab.decode(s) << '\n';
}

Corpus load_corpus(const CorpusPaths& paths, const Vocabulary& vocab, int length_cap) {
  Corpus corpus;
  corpus.vocab = vocab;
  const auto src = read_sentences(paths.source, vocab);
  const auto tgt = read_sentences(paths.target, vocab);
  if (src.size() != tgt.size()) {
    throw std::runtime_error("parallel files differ in line count: " + std::to_string(src.size()) + " vs " +
                             std::to_string(tgt.size()));
  }
  auto fits = [&](const Sentence& s) { return !s.empty() && static_cast<int>(s.size()) <= length_cap; };
  for (std::size_t i = 0; i < src.size(); ++i)
    if (fits(src[i]) && fits(tgt[i])) corpus.bilingual.push_back({src[i], tgt[i]});
  if (!paths.mono_source.empty())
    for (auto& s : read_sentences(paths.mono_source, vocab))
      if (fits(s)) corpus.mono_source.push_back(std::move(s));
  if (!paths.mono_target.empty())
    for (auto& s : read_sentences(paths.mono_target, vocab))
      if (fits(s)) corpus.mono_target.push_back(std::move(s));
  return corpus;
}

void SyntheticTaskSpec::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("synthetic vocab_size must be >= 2");
  if (window < 1) throw std::invalid_argument("reordering window must be >= 1");
  if (min_length < 1 || max_length < min_length) throw std::invalid_argument("bad sentence length range");
  if (bilingual_pairs < 0 || monolingual < 0 || test_pairs < 0) throw std::invalid_argument("negative corpus size");
  if (branching < 1) throw std::invalid_argument("branching must be >= 1");
}

Sentence reorder_blocks(const Sentence& s, int window) {
  Sentence out = s;
  for (std::size_t start = 0; start < out.size(); start += static_cast<std::size_t>(window)) {
    const std::size_t end = std::min(out.size(), start + static_cast<std::size_t>(window));
    std::reverse(out.begin() + static_cast<std::ptrdiff_t>(start), out.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

SyntheticLanguagePair::SyntheticLanguagePair(const SyntheticTaskSpec& spec) : spec_(spec) {
  spec_.validate();
  const int n = spec_.vocab_size;
  for (int i = 0; i < n; ++i) vocab_.add("s" + std::to_string(i));
  for (int i = 0; i < n; ++i) vocab_.add("t" + std::to_string(i));

  Rng rng(spec_.permutation_seed);
  permutation_.resize(static_cast<std::size_t>(n));
  std::iota(permutation_.begin(), permutation_.end(), 0);
  for (int i = n - 1; i > 0; --i) std::swap(permutation_[i], permutation_[rng.below(static_cast<std::uint64_t>(i) + 1)]);
  inverse_.resize(permutation_.size());
  for (int i = 0; i < n; ++i) inverse_[permutation_[i]] = i;

  // Each word has a few likely successors plus a little uniform mass.
  transitions_.assign(static_cast<std::size_t>(n) + 1, std::vector<double>(static_cast<std::size_t>(n), 0.0));
  for (auto& row : transitions_) {
    for (int b = 0; b < spec_.branching; ++b) row[rng.below(static_cast<std::uint64_t>(n))] += 0.5 + rng.uniform();
    double total = 0;
    for (double& w : row) total += (w += 0.05);
    for (double& w : row) w /= total;
  }
}

Sentence SyntheticLanguagePair::sample_source(Rng& rng) const {
  const int n = spec_.vocab_size;
  const int length = spec_.min_length + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec_.max_length - spec_.min_length + 1)));
  Sentence s;
  int prev = n;  // start row
  for (int t = 0; t < length; ++t) {
    const auto& row = transitions_[static_cast<std::size_t>(prev)];
    double u = rng.uniform();
    int next = n - 1;
    for (int j = 0; j < n; ++j) {
      if (u < row[j]) {
        next = j;
        break;
      }
      u -= row[j];
    }
    s.push_back(source_word(next));
    prev = next;
  }
  return s;
}

Sentence SyntheticLanguagePair::translate(const Sentence& source) const {
  Sentence mapped;
  for (int id : source) {
    const int i = id - Vocabulary::reserved;
    if (i < 0 || i >= spec_.vocab_size) throw std::invalid_argument("not a source-language word");
    mapped.push_back(target_word(permutation_[i]));
  }
  return reorder_blocks(mapped, spec_.window);
}

Sentence SyntheticLanguagePair::translate_back(const Sentence& target) const {
  Sentence out;
  for (int id : reorder_blocks(target, spec_.window)) {
    const int i = id - Vocabulary::reserved - spec_.vocab_size;
    if (i < 0 || i >= spec_.vocab_size) throw std::invalid_argument("not a target-language word");
    out.push_back(source_word(inverse_[i]));
  }
  return out;
}

SyntheticData generate_synthetic_pair(const SyntheticLanguagePair& language, Rng& rng) {
  const SyntheticTaskSpec& spec = language.spec();
  const std::size_t needed =
      static_cast<std::size_t>(spec.test_pairs) + spec.bilingual_pairs + 2 * static_cast<std::size_t>(spec.monolingual);
  std::set<Sentence> seen;
  std::vector<Sentence> pool;
  std::size_t attempts = 0;
  while (pool.size() < needed) {
    if (++attempts > 50 * needed + 1000) throw std::runtime_error("synthetic language too small for the requested corpus");
    Sentence s = language.sample_source(rng);
    if (seen.insert(s).second) pool.push_back(std::move(s));
  }
  SyntheticData data;
  data.train.vocab = language.vocab();
  std::size_t at = 0;
  for (int i = 0; i < spec.test_pairs; ++i, ++at) data.test.push_back({pool[at], language.translate(pool[at])});
  for (int i = 0; i < spec.bilingual_pairs; ++i, ++at)
    data.train.bilingual.push_back({pool[at], language.translate(pool[at])});
  for (int i = 0; i < spec.monolingual; ++i, ++at) data.train.mono_source.push_back(pool[at]);
  for (int i = 0; i < spec.monolingual; ++i, ++at) data.train.mono_target.push_back(language.translate(pool[at]));
  return data;
}

double BleuStats::precision(int n) const {
  const double m = matches[n - 1];
  const double t = totals[n - 1];
  if (m > 0) return m / t;
  if (n == 1) return 0.0;
  return 1.0 / (2.0 * std::max(t, 1.0));
}

double BleuStats::brevity_penalty() const {
  if (hypothesis_length <= 0) return 0.0;
  if (hypothesis_length > reference_length) return 1.0;
  return std::exp(1.0 - reference_length / hypothesis_length);
}

double BleuStats::score() const {
  if (matches[0] == 0) return 0.0;
  double log_sum = 0;
  for (int n = 1; n <= 4; ++n) log_sum += std::log(precision(n));
  return 100.0 * brevity_penalty() * std::exp(log_sum / 4.0);
}

BleuStats bleu_stats(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references) {
  if (hypotheses.size() != references.size()) throw std::invalid_argument("bleu: hypothesis and reference counts differ");
  if (hypotheses.empty()) throw std::invalid_argument("bleu: empty corpus");
  BleuStats st;
  for (std::size_t k = 0; k < hypotheses.size(); ++k) {
    const Sentence& h = hypotheses[k];
    const Sentence& r = references[k];
    st.hypothesis_length += static_cast<double>(h.size());
    st.reference_length += static_cast<double>(r.size());
    for (int n = 1; n <= 4; ++n) {
      std::map<Sentence, int> ref_counts, hyp_counts;
      for (std::size_t i = 0; i + n <= r.size(); ++i) ++ref_counts[Sentence(r.begin() + i, r.begin() + i + n)];
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[Sentence(h.begin() + i, h.begin() + i + n)];
      for (const auto& [gram, c] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) st.matches[n - 1] += std::min(c, it->second);
        st.totals[n - 1] += c;
      }
    }
  }
  return st;
}

double bleu(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references) {
  return bleu_stats(hypotheses, references).score();
}

}  // namespace e2ebt
