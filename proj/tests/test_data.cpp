#include "doctest.h"

#include "e2ebt/data.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

using namespace e2ebt;
namespace fs = std::filesystem;

namespace {

// Independent corpus BLEU: clipped counts gathered by scanning every window
// pair, no maps of n-grams.
double bleu_oracle(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs) {
  double match[4] = {0, 0, 0, 0}, total[4] = {0, 0, 0, 0}, hl = 0, rl = 0;
  for (std::size_t k = 0; k < hyps.size(); ++k) {
    const Sentence& h = hyps[k];
    const Sentence& r = refs[k];
    hl += static_cast<double>(h.size());
    rl += static_cast<double>(r.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      if (h.size() < n) continue;
      std::vector<bool> used(r.size() >= n ? r.size() - n + 1 : 0, false);
      for (std::size_t i = 0; i + n <= h.size(); ++i) {
        total[n - 1] += 1;
        for (std::size_t j = 0; j < used.size(); ++j) {
          if (used[j]) continue;
          if (std::equal(h.begin() + i, h.begin() + i + n, r.begin() + j)) {
            used[j] = true;
            match[n - 1] += 1;
            break;
          }
        }
      }
    }
  }
  if (match[0] == 0) return 0.0;
  double log_sum = 0;
  for (int n = 0; n < 4; ++n) {
    const double p = match[n] > 0 ? match[n] / total[n] : 1.0 / (2.0 * std::max(total[n], 1.0));
    log_sum += std::log(p);
  }
  const double bp = hl > rl ? 1.0 : std::exp(1.0 - rl / hl);
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

fs::path write_lines(const std::string& name, const std::vector<std::string>& lines) {
  const fs::path path = fs::temp_directory_path() / name;
  std::ofstream out(path);
  for (const auto& l : lines) out << l << '\n';
  return path;
}

}  // namespace

TEST_CASE("BLEU of identical corpora is 100 and of disjoint ones 0") {
  const std::vector<Sentence> refs{{1, 2, 3, 4, 5}, {6, 7, 8, 9}};
  CHECK(bleu(refs, refs) == doctest::Approx(100.0).epsilon(1e-12));
  CHECK(bleu({{10, 11, 12, 13}, {14, 15, 16}}, refs) == 0.0);
  CHECK_THROWS(bleu({}, {}));
  CHECK_THROWS(bleu({{1}}, {{1}, {2}}));
}

TEST_CASE("BLEU worked example: a b c d e f against a b c d x y") {
  // a..f = 1..6, x = 7, y = 8.
  const std::vector<Sentence> hyp{{1, 2, 3, 4, 5, 6}}, ref{{1, 2, 3, 4, 7, 8}};
  const BleuStats st = bleu_stats(hyp, ref);
  CHECK(st.matches[0] == 4);
  CHECK(st.totals[0] == 6);
  CHECK(st.matches[1] == 3);
  CHECK(st.totals[1] == 5);
  CHECK(st.matches[2] == 2);
  CHECK(st.totals[2] == 4);
  CHECK(st.matches[3] == 1);
  CHECK(st.totals[3] == 3);
  CHECK(st.brevity_penalty() == 1.0);
  const double hand = 100.0 * std::pow((4.0 / 6) * (3.0 / 5) * (2.0 / 4) * (1.0 / 3), 0.25);
  CHECK(bleu(hyp, ref) == doctest::Approx(hand).epsilon(1e-12));
  CHECK(bleu(hyp, ref) == doctest::Approx(bleu_oracle(hyp, ref)).epsilon(1e-12));
}

TEST_CASE("BLEU clips repeated n-grams and penalizes short output") {
  const std::vector<Sentence> hyp{{1, 1, 1, 1}}, ref{{1, 2, 3, 4, 5, 6, 7, 8}};
  const BleuStats st = bleu_stats(hyp, ref);
  CHECK(st.matches[0] == 1);
  CHECK(st.brevity_penalty() == doctest::Approx(std::exp(1.0 - 2.0)));
  CHECK(bleu(hyp, ref) == doctest::Approx(bleu_oracle(hyp, ref)).epsilon(1e-12));
  // Sentences shorter than n contribute no n-grams; the floor keeps the score finite.
  CHECK(bleu({{1, 2}}, {{1, 2}}) == doctest::Approx(bleu_oracle({{1, 2}}, {{1, 2}})).epsilon(1e-12));
}

TEST_CASE("property: BLEU agrees with the oracle, ignores corpus order and drops when an n-gram is corrupted") {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Sentence> hyps, refs;
    const int count = 1 + static_cast<int>(rng.below(5));
    for (int k = 0; k < count; ++k) {
      Sentence r, h;
      const int rn = 1 + static_cast<int>(rng.below(9)), hn = 1 + static_cast<int>(rng.below(9));
      for (int i = 0; i < rn; ++i) r.push_back(4 + static_cast<int>(rng.below(5)));
      for (int i = 0; i < hn; ++i) h.push_back(4 + static_cast<int>(rng.below(5)));
      refs.push_back(r);
      hyps.push_back(h);
    }
    const double score = bleu(hyps, refs);
    CHECK(score == doctest::Approx(bleu_oracle(hyps, refs)).epsilon(1e-10));
    CHECK(score >= 0.0);
    CHECK(score <= 100.0 + 1e-9);

    std::vector<Sentence> h2 = hyps, r2 = refs;
    std::reverse(h2.begin(), h2.end());
    std::reverse(r2.begin(), r2.end());
    CHECK(bleu(h2, r2) == doctest::Approx(score).epsilon(1e-12));
  }
  for (int trial = 0; trial < 200; ++trial) {
    Sentence r;
    const int n = 4 + static_cast<int>(rng.below(8));
    for (int i = 0; i < n; ++i) r.push_back(4 + static_cast<int>(rng.below(6)));
    Sentence h = r;
    const double before = bleu({h}, {r});
    h[rng.below(h.size())] = 99;  // a word the reference never contains
    CHECK(bleu({h}, {r}) <= before);
  }
}

TEST_CASE("reordering is an involution and the substitution a bijection") {
  SyntheticTaskSpec spec;
  spec.vocab_size = 25;
  const SyntheticLanguagePair lang(spec);
  std::vector<int> sorted = lang.permutation();
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 25; ++i) CHECK(sorted[i] == i);
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const Sentence s = lang.sample_source(rng);
    CHECK(static_cast<int>(s.size()) >= spec.min_length);
    CHECK(static_cast<int>(s.size()) <= spec.max_length);
    CHECK(reorder_blocks(reorder_blocks(s, 3), 3) == s);
    CHECK(lang.translate_back(lang.translate(s)) == s);
  }
  CHECK(reorder_blocks({1, 2, 3, 4, 5}, 2) == Sentence{2, 1, 4, 3, 5});
  CHECK_THROWS(lang.translate({lang.target_word(0)}));
}

TEST_CASE("generated splits are disjoint and the oracle translator scores 100") {
  SyntheticTaskSpec spec;
  spec.bilingual_pairs = 60;
  spec.monolingual = 200;
  spec.test_pairs = 40;
  const SyntheticLanguagePair lang(spec);
  Rng rng(8);
  const SyntheticData data = generate_synthetic_pair(lang, rng);
  CHECK(data.train.bilingual.size() == 60);
  CHECK(data.train.mono_source.size() == 200);
  CHECK(data.train.mono_target.size() == 200);
  CHECK(data.test.size() == 40);

  std::set<Sentence> sources;
  for (const auto& p : data.test) sources.insert(p.source);
  for (const auto& p : data.train.bilingual) CHECK(sources.insert(p.source).second);
  for (const auto& s : data.train.mono_source) CHECK(sources.insert(s).second);
  for (const auto& t : data.train.mono_target) CHECK(sources.insert(lang.translate_back(t)).second);

  std::vector<Sentence> hyps, refs;
  for (const auto& p : data.test) {
    CHECK(lang.translate(p.source) == p.target);
    hyps.push_back(lang.translate(p.source));
    refs.push_back(p.target);
  }
  CHECK(bleu(hyps, refs) == doctest::Approx(100.0));

  Rng same(8);
  CHECK(generate_synthetic_pair(lang, same).train.bilingual == data.train.bilingual);
}

TEST_CASE("random tokens score below 1 BLEU on a 100-word language") {
  SyntheticTaskSpec spec;
  spec.vocab_size = 100;
  spec.bilingual_pairs = 0;
  spec.monolingual = 0;
  spec.test_pairs = 300;
  const SyntheticLanguagePair lang(spec);
  Rng rng(9);
  const SyntheticData data = generate_synthetic_pair(lang, rng);
  std::vector<Sentence> hyps, refs;
  for (const auto& p : data.test) {
    Sentence h;
    for (std::size_t i = 0; i < p.target.size(); ++i) h.push_back(lang.target_word(static_cast<int>(rng.below(100))));
    hyps.push_back(h);
    refs.push_back(p.target);
  }
  CHECK(bleu(hyps, refs) < 1.0);
}

TEST_CASE("load_corpus maps unknown words, drops over-length pairs and checks alignment") {
  Vocabulary vocab({"a", "b", "c"});
  std::string long_line;
  for (int i = 0; i < 51; ++i) long_line += "a ";
  std::string fifty;
  for (int i = 0; i < 50; ++i) fifty += "b ";
  const fs::path src = write_lines("e2ebt_src.txt", {"a b", long_line, "c zzz", fifty, ""});
  const fs::path tgt = write_lines("e2ebt_tgt.txt", {"b a", "a", "c", "a", "a"});
  const fs::path mono = write_lines("e2ebt_mono.txt", {"a", long_line, "b c"});
  const Corpus c = load_corpus({src, tgt, mono, {}}, vocab, 50);
  REQUIRE(c.bilingual.size() == 3);
  CHECK(c.bilingual[0].source == Sentence{4, 5});
  CHECK(c.bilingual[1].source == Sentence{6, Vocabulary::unk});
  CHECK(c.bilingual[2].source.size() == 50);
  CHECK(c.mono_source.size() == 2);
  CHECK(c.mono_target.empty());

  const fs::path short_tgt = write_lines("e2ebt_tgt_short.txt", {"a"});
  CHECK_THROWS_WITH(load_corpus({src, short_tgt, {}, {}}, vocab, 50), doctest::Contains("line count"));
  CHECK_THROWS(load_corpus({fs::temp_directory_path() / "e2ebt_missing.txt", tgt, {}, {}}, vocab, 50));
  for (const auto& p : {src, tgt, mono, short_tgt}) fs::remove(p);
}

TEST_CASE("vocabulary files round-trip") {
  Vocabulary v({"x", "y"});
  const fs::path path = fs::temp_directory_path() / "e2ebt_vocab.txt";
  v.save(path);
  CHECK(Vocabulary::load(path) == v);
  fs::remove(path);
}
