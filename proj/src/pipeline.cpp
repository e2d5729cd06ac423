#include "e2ebt/pipeline.hpp"

namespace e2ebt {

void write_corpus_dir(const std::filesystem::path& dir, const SyntheticData& data) {
  std::filesystem::create_directories(dir);
  const Vocabulary& vocab = data.train.vocab;
  vocab.save(dir / "vocab.txt");
  std::vector<Sentence> src, tgt;
  for (const auto& p : data.train.bilingual) {
    src.push_back(p.source);
    tgt.push_back(p.target);
  }
  write_sentences(dir / "train.src", src, vocab);
  write_sentences(dir / "train.tgt", tgt, vocab);
  write_sentences(dir / "mono.src", data.train.mono_source, vocab);
  write_sentences(dir / "mono.tgt", data.train.mono_target, vocab);
  src.clear();
  tgt.clear();
  for (const auto& p : data.test) {
    src.push_back(p.source);
    tgt.push_back(p.target);
  }
  write_sentences(dir / "test.src", src, vocab);
  write_sentences(dir / "test.tgt", tgt, vocab);
}

Corpus load_corpus_dir(const std::filesystem::path& dir, int length_cap) {
  const Vocabulary vocab = Vocabulary::load(dir / "vocab.txt");
  CorpusPaths paths{dir / "train.src", dir / "train.tgt", {}, {}};
  if (std::filesystem::exists(dir / "mono.src")) paths.mono_source = dir / "mono.src";
  if (std::filesystem::exists(dir / "mono.tgt")) paths.mono_target = dir / "mono.tgt";
  return load_corpus(paths, vocab, length_cap);
}

std::vector<SentencePair> load_test_pairs(const std::filesystem::path& dir, const Vocabulary& vocab) {
  const auto src = read_sentences(dir / "test.src", vocab);
  const auto tgt = read_sentences(dir / "test.tgt", vocab);
  if (src.size() != tgt.size()) throw std::runtime_error("test files differ in line count");
  std::vector<SentencePair> out;
  for (std::size_t i = 0; i < src.size(); ++i)
    if (!src[i].empty() && !tgt[i].empty()) out.push_back({src[i], tgt[i]});
  if (out.empty()) throw std::runtime_error("no test pairs in " + dir.string());
  return out;
}

ModelDims translation_dims(const RunConfig& config, int vocab) {
  ModelDims d = config.model;
  d.vocab = vocab;
  d.validate();
  return d;
}

ModelDims language_model_dims(const RunConfig& config, int vocab) {
  ModelDims d = config.lm;
  d.vocab = vocab;
  d.encoder_layers = 0;
  d.validate();
  return d;
}

namespace {

Checkpoint model_checkpoint(const Vocabulary& vocab, const std::string& kind, const std::string& tag,
                            const ModelDims& dims, const std::string& config_text) {
  Checkpoint ckpt;
  ckpt.config = config_text;
  ckpt.vocabulary = vocab.tokens();
  ckpt.blobs["kind"] = kind;
  ckpt.blobs["dims." + tag] = dims_to_string(dims);
  return ckpt;
}

void expect_kind(const Checkpoint& ckpt, const std::string& kind, const std::filesystem::path& path) {
  const auto it = ckpt.blobs.find("kind");
  if (it == ckpt.blobs.end() || it->second != kind)
    throw CheckpointError(path.string() + " does not hold a " + kind + " checkpoint");
}

}  // namespace

void save_translation_model(const std::filesystem::path& path, const TranslationModel& model, const Vocabulary& vocab,
                            const std::string& tag, const std::string& config_text) {
  Checkpoint ckpt = model_checkpoint(vocab, "nmt", tag, model.dims(), config_text);
  add_model(ckpt, tag + ".", model.parameters());
  save_checkpoint(ckpt, path);
}

TranslationModel load_translation_model(const std::filesystem::path& path, const std::string& tag) {
  TranslationPair pair = load_translation_pair(path);
  auto& slot = tag == "st" ? pair.st : pair.ts;
  if (!slot) throw CheckpointError(path.string() + " has no '" + tag + "' model");
  return std::move(*slot);
}

void save_language_model(const std::filesystem::path& path, const LanguageModel& lm, const Vocabulary& vocab,
                         const std::string& tag, const std::string& config_text) {
  Checkpoint ckpt = model_checkpoint(vocab, "lm", tag, lm.dims(), config_text);
  add_model(ckpt, "lm.", lm.parameters());
  save_checkpoint(ckpt, path);
}

LanguageModel load_language_model(const std::filesystem::path& path, const std::string& tag) {
  const Checkpoint ckpt = load_checkpoint(path);
  expect_kind(ckpt, "lm", path);
  Rng unused(0);
  LanguageModel lm(tag, dims_from_string(ckpt.blob("dims." + tag)), unused);
  load_model(ckpt, "lm.", lm.parameters());
  return lm;
}

TranslationPair load_translation_pair(const std::filesystem::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  const auto kind = ckpt.blobs.find("kind");
  if (kind != ckpt.blobs.end() && kind->second != "nmt" && kind->second != "bt")
    throw CheckpointError(path.string() + " holds no translation model");
  TranslationPair out;
  out.vocab = Vocabulary(ckpt.vocabulary);
  Rng unused(0);
  for (const std::string tag : {"st", "ts"}) {
    const auto dims = ckpt.blobs.find("dims." + tag);
    if (dims == ckpt.blobs.end()) continue;
    TranslationModel model(tag, dims_from_string(dims->second), unused);
    load_model(ckpt, tag + ".", model.parameters());
    (tag == "st" ? out.st : out.ts) = std::move(model);
  }
  if (!out.st && !out.ts) throw CheckpointError(path.string() + " holds no translation model");
  return out;
}

double evaluate_direction(const TranslationModel& model, const std::vector<Sentence>& sources,
                          const std::vector<Sentence>& references, int beam) {
  return bleu(translate(model, sources, beam), references);
}

BleuReport evaluate_pair(const TranslationModel& st, const TranslationModel& ts, std::span<const SentencePair> test,
                         int beam) {
  std::vector<Sentence> src, tgt;
  for (const auto& p : test) {
    src.push_back(p.source);
    tgt.push_back(p.target);
  }
  return {evaluate_direction(st, src, tgt, beam), evaluate_direction(ts, tgt, src, beam)};
}

std::vector<Sentence> language_model_text(const Corpus& corpus, bool source_side) {
  std::vector<Sentence> out = source_side ? corpus.mono_source : corpus.mono_target;
  for (const auto& p : corpus.bilingual) out.push_back(source_side ? p.source : p.target);
  return out;
}

}  // namespace e2ebt
