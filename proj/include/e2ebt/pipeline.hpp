#pragma once

// Stage plumbing shared by the command-line tool and the experiments: corpus
// directories, single-model checkpoints and BLEU evaluation.
//
// A corpus directory holds vocab.txt, train.{src,tgt}, mono.{src,tgt} and
// test.{src,tgt}.

#include "e2ebt/config.hpp"

namespace e2ebt {

void write_corpus_dir(const std::filesystem::path& dir, const SyntheticData& data);
Corpus load_corpus_dir(const std::filesystem::path& dir, int length_cap);
// Test pairs are read as-is, without the length cap.
std::vector<SentencePair> load_test_pairs(const std::filesystem::path& dir, const Vocabulary& vocab);

ModelDims translation_dims(const RunConfig& config, int vocab);
ModelDims language_model_dims(const RunConfig& config, int vocab);

// Checkpoints holding one model. `tag` records the direction ("st", "ts") or
// the side ("src", "tgt").
void save_translation_model(const std::filesystem::path& path, const TranslationModel& model, const Vocabulary& vocab,
                            const std::string& tag, const std::string& config_text);
TranslationModel load_translation_model(const std::filesystem::path& path, const std::string& tag);
void save_language_model(const std::filesystem::path& path, const LanguageModel& lm, const Vocabulary& vocab,
                         const std::string& tag, const std::string& config_text);
LanguageModel load_language_model(const std::filesystem::path& path, const std::string& tag);

// Rebuilds the translation models stored in a checkpoint written by either
// save_translation_model or a BT run. Missing directions stay empty.
struct TranslationPair {
  Vocabulary vocab;
  std::optional<TranslationModel> st, ts;
};
TranslationPair load_translation_pair(const std::filesystem::path& path);

struct BleuReport {
  double st = 0;
  double ts = 0;
};
double evaluate_direction(const TranslationModel& model, const std::vector<Sentence>& sources,
                          const std::vector<Sentence>& references, int beam);
BleuReport evaluate_pair(const TranslationModel& st, const TranslationModel& ts, std::span<const SentencePair> test,
                         int beam);

// Training-side LM text: monolingual sentences plus the matching side of the
// bilingual corpus.
std::vector<Sentence> language_model_text(const Corpus& corpus, bool source_side);

}  // namespace e2ebt
