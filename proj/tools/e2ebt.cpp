#include "e2ebt/bench.hpp"
#include "e2ebt/gradcheck.hpp"
#include "e2ebt/pipeline.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>

using namespace e2ebt;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::optional<fs::path> config;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Run config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.sets, "Override a config key (key=value)");
}

RunConfig resolve(const Common& c) { return load_run_config(c.config, c.sets); }

// Distinct initialization stream per model.
Rng init_rng(const RunConfig& config, std::uint64_t stream) { return Rng(config.seed * 1000003ULL + stream); }

void log_progress(const char* stage, long it, real loss, long total) {
  if ((it + 1) % 100 == 0 || it + 1 == total)
    std::cerr << stage << " " << it + 1 << "/" << total << " loss " << std::fixed << std::setprecision(4) << loss
              << std::defaultfloat << "\n";
}

int gen_data(const fs::path& spec_file, const fs::path& out, const std::vector<std::string>& sets) {
  const RunConfig config = load_run_config(spec_file, sets);
  const SyntheticLanguagePair language(config.data);
  Rng rng(config.seed);
  const SyntheticData data = generate_synthetic_pair(language, rng);
  write_corpus_dir(out, data);
  std::cout << "wrote " << data.train.bilingual.size() << " bilingual pairs, " << data.train.mono_source.size() << "+"
            << data.train.mono_target.size() << " monolingual sentences and " << data.test.size()
            << " test pairs to " << out.string() << "\n";
  return 0;
}

int pretrain_lm_cmd(const RunConfig& config, const std::string& side) {
  const Corpus corpus = load_corpus_dir(config.paths.data, config.length_cap);
  const std::vector<Sentence> text = language_model_text(corpus, side == "src");
  Rng init = init_rng(config, side == "src" ? 21 : 22);
  LanguageModel lm(side, language_model_dims(config, corpus.vocab.size()), init);
  const PretrainConfig pc = config.resolved_lm_pretrain();
  pretrain_lm(lm, text, pc, [&](long it, real loss) { log_progress("lm", it, loss, pc.iters); });
  fs::create_directories(config.paths.work);
  save_language_model(config.paths.lm(side), lm, corpus.vocab, side, config.to_text());
  std::cout << "saved " << config.paths.lm(side).string() << "\n";
  return 0;
}

int pretrain_nmt_cmd(const RunConfig& config, const std::string& direction) {
  const Corpus corpus = load_corpus_dir(config.paths.data, config.length_cap);
  const ModelDims dims = translation_dims(config, corpus.vocab.size());
  Rng init_st = init_rng(config, 11), init_ts = init_rng(config, 12);
  std::optional<TranslationModel> st, ts;
  if (direction != "ts") st.emplace("st", dims, init_st);
  if (direction != "st") ts.emplace("ts", dims, init_ts);
  // Joint training starts from the shared embedding the BT stage will use.
  if (st && ts && config.bt.share_embeddings) apply_sep(*st, *ts);
  const PretrainConfig pc = config.resolved_pretrain();
  pretrain_nmt(st ? &*st : nullptr, ts ? &*ts : nullptr, corpus.bilingual, pc,
               [&](long it, real loss) { log_progress("nmt", it, loss, pc.iters); });
  fs::create_directories(config.paths.work);
  for (auto* m : {&st, &ts}) {
    if (!*m) continue;
    const std::string tag = m == &st ? "st" : "ts";
    save_translation_model(config.paths.nmt(tag), **m, corpus.vocab, tag, config.to_text());
    std::cout << "saved " << config.paths.nmt(tag).string() << "\n";
  }
  return 0;
}

// Keeps only records for iterations before `iteration`, so a resumed run
// continues the stream where the checkpoint left it.
void truncate_metrics(const fs::path& path, long iteration) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("iteration")) break;
    if (j["iteration"].get<long>() >= iteration) break;
    keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

void save_bt(const BTTrainer& trainer, const Vocabulary& vocab, const RunConfig& config) {
  Checkpoint ckpt;
  ckpt.config = config.to_text();
  ckpt.vocabulary = vocab.tokens();
  ckpt.blobs["kind"] = "bt";
  trainer.save(ckpt);
  save_checkpoint(ckpt, config.paths.bt());
}

int train_bt_cmd(const RunConfig& config, const std::optional<fs::path>& resume) {
  const Corpus corpus = load_corpus_dir(config.paths.data, config.length_cap);
  const BTConfig bt = config.resolved_bt();
  BTModels models{load_translation_model(config.paths.nmt("st"), "st"),
                  load_translation_model(config.paths.nmt("ts"), "ts"),
                  load_language_model(config.paths.lm("src"), "src"),
                  load_language_model(config.paths.lm("tgt"), "tgt")};
  for (int v : {models.st.dims().vocab, models.ts.dims().vocab, models.lm_source.dims().vocab,
                models.lm_target.dims().vocab})
    if (v != corpus.vocab.size()) throw std::runtime_error("model vocabulary does not match the corpus");
  BTTrainer trainer(std::move(models), bt);
  if (resume) {
    const Checkpoint ckpt = load_checkpoint(*resume);
    if (Vocabulary(ckpt.vocabulary) != corpus.vocab) throw std::runtime_error("checkpoint vocabulary does not match the corpus");
    trainer.load(ckpt);
    std::cerr << "resumed at iteration " << trainer.iteration() << "\n";
  }
  fs::create_directories(config.paths.work);
  const fs::path metrics = config.paths.metrics_file();
  if (!metrics.parent_path().empty()) fs::create_directories(metrics.parent_path());
  if (resume) truncate_metrics(metrics, trainer.iteration());
  std::ofstream log(metrics, resume ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + metrics.string());

  while (trainer.iteration() < bt.max_iters) {
    const long it = trainer.iteration();
    const LossReport report = trainer.step(corpus);
    if (config.log_interval > 0 && it % config.log_interval == 0) {
      log << metrics_record(it, lr_schedule(it, bt.lr, bt.warmup_iters), as_ratio(it, bt), report) << '\n';
      log.flush();
    }
    if ((it + 1) % 100 == 0) std::cerr << "bt " << it + 1 << "/" << bt.max_iters << " total " << report.total << "\n";
    if (config.checkpoint_interval > 0 && trainer.iteration() % config.checkpoint_interval == 0)
      save_bt(trainer, corpus.vocab, config);
  }
  save_bt(trainer, corpus.vocab, config);
  std::cout << "saved " << config.paths.bt().string() << " at iteration " << trainer.iteration() << "\n";
  return 0;
}

int evaluate_cmd(const fs::path& ckpt, const fs::path& test_dir, int beam) {
  if (beam < 1) throw std::invalid_argument("beam width must be >= 1");
  const TranslationPair pair = load_translation_pair(ckpt);
  const std::vector<SentencePair> test = load_test_pairs(test_dir, pair.vocab);
  std::vector<Sentence> src, tgt;
  for (const auto& p : test) {
    src.push_back(p.source);
    tgt.push_back(p.target);
  }
  std::cout << std::fixed << std::setprecision(2);
  if (pair.st) std::cout << "st BLEU " << evaluate_direction(*pair.st, src, tgt, beam) << "\n";
  if (pair.ts) std::cout << "ts BLEU " << evaluate_direction(*pair.ts, tgt, src, beam) << "\n";
  return 0;
}

int gradcheck_cmd(std::uint64_t seed, int points) {
  bool ok = true;
  for (const auto& r : run_gradcheck_suites(seed, points)) {
    std::cout << (r.passed ? "ok   " : "FAIL ") << std::left << std::setw(16) << r.primitive << " points " << r.points
              << " worst rel err " << std::scientific << std::setprecision(2) << r.worst_error << std::defaultfloat
              << "\n";
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"End-to-end back-translation toolkit"};
  app.require_subcommand(1);

  Common common;
  fs::path spec_file, out_dir;
  std::vector<std::string> spec_sets;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic language pair corpus");
  gen->add_option("--spec", spec_file, "Task spec (config file with data.* keys)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--set", spec_sets, "Override a key (key=value)");

  std::string side;
  auto* plm = app.add_subcommand("pretrain-lm", "Train a language model on one side of the corpus");
  add_common(plm, common);
  plm->add_option("--side", side)->required()->check(CLI::IsMember({"src", "tgt"}));

  std::string direction;
  auto* pnmt = app.add_subcommand("pretrain-nmt", "Supervised training on the bilingual corpus");
  add_common(pnmt, common);
  pnmt->add_option("--direction", direction)->required()->check(CLI::IsMember({"st", "ts", "both"}));

  std::optional<fs::path> resume;
  auto* tbt = app.add_subcommand("train-bt", "Back-translation training");
  add_common(tbt, common);
  tbt->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);

  fs::path ckpt, test_dir;
  int beam = 5;
  auto* ev = app.add_subcommand("evaluate", "BLEU of a checkpoint on a test split");
  ev->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("--test", test_dir, "Directory with test.src and test.tgt")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--beam", beam, "Beam width")->capture_default_str();

  std::uint64_t gc_seed = 1;
  int gc_points = 20;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference checks of every primitive");
  gc->add_option("--seed", gc_seed)->capture_default_str();
  gc->add_option("--points", gc_points)->capture_default_str();

  int vocab = 30000, len = 50, batch = 60, repeats = 5;
  std::uint64_t bench_seed = 1;
  auto* bench = app.add_subcommand("bench", "Time CRT against Gumbel-softmax");
  bench->add_option("--vocab", vocab)->capture_default_str();
  bench->add_option("--len", len)->capture_default_str();
  bench->add_option("--batch", batch)->capture_default_str();
  bench->add_option("--repeats", repeats)->capture_default_str();
  bench->add_option("--seed", bench_seed)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return gen_data(spec_file, out_dir, spec_sets);
    if (plm->parsed()) return pretrain_lm_cmd(resolve(common), side);
    if (pnmt->parsed()) return pretrain_nmt_cmd(resolve(common), direction);
    if (tbt->parsed()) return train_bt_cmd(resolve(common), resume);
    if (ev->parsed()) return evaluate_cmd(ckpt, test_dir, beam);
    if (gc->parsed()) return gradcheck_cmd(gc_seed, gc_points);
    if (bench->parsed()) {
      std::cout << bench_reparam(vocab, len, batch, repeats, bench_seed).to_json() << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
