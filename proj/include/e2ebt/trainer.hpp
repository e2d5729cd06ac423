#pragma once

// Iterative back-translation training: optimizer, schedules, the frozen
// evaluating generators, the synthetic-sentence cache and the training step.

#include "e2ebt/checkpoint.hpp"
#include "e2ebt/data.hpp"
#include "e2ebt/decode.hpp"
#include "e2ebt/objectives.hpp"

#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <unordered_map>

namespace e2ebt {

struct AdamConfig {
  real beta1 = 0.9;
  real beta2 = 0.98;
  real eps = 1e-8;
};

struct BTConfig {
  real lambda_x = 0.01;  // gradient scale for latent source sentences
  real lambda_y = 0.01;  // gradient scale for latent target sentences
  real alpha_x = 0.0025;
  real alpha_y = 0.0025;
  int feg_interval = 75;  // 0 disables the frozen evaluating generator
  real as_start_ratio = 0.0;
  real as_end_ratio = 0.5;
  long as_total_iters = 300000;
  real cache_load_prob = 0.0;
  int batch_bilingual = 12;
  int batch_monolingual = 48;  // per language
  real lr = 0.001;
  int warmup_iters = 4000;
  AdamConfig adam;
  long max_iters = 20000;
  std::uint64_t seed = 1;
  bool share_embeddings = true;
  LatentMethod latent_method = LatentMethod::crt;
  real gst_tau = 1.0;

  void validate() const;
};

real as_ratio(long iteration, const BTConfig& config);
// Linear warmup to lr over warmup_iters, then lr * sqrt(warmup / iteration).
real lr_schedule(long iteration, real lr, int warmup_iters);

class Adam {
 public:
  Adam() = default;
  // Parameters shared between lists are updated once.
  Adam(const std::vector<NamedParameters>& groups, AdamConfig config);

  void zero_grad();
  // Applies one update from the accumulated gradients. Parameters and moments
  // are kept on the single-precision grid so checkpoints restore them exactly.
  void step(real lr);
  long steps() const { return steps_; }
  std::size_t parameter_count() const;

  void save(Checkpoint& ckpt, const std::string& prefix) const;
  void load(const Checkpoint& ckpt, const std::string& prefix);

 private:
  AdamConfig config_;
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
  std::vector<Matrix> m_, v_;
  long steps_ = 0;
};

struct FEGState {
  TranslationModel evaluating;
  int iterations_since_copy = 0;
  bool initialized = false;
};

// Copies the learning model into the evaluating snapshot when iteration % k == 0.
void feg_step(FEGState& state, const TranslationModel& learning, long iteration, int k);

class SyntheticCache {
 public:
  struct Entry {
    Sentence ids;
    long stamp = 0;
    bool operator==(const Entry&) const = default;
  };
  const Entry* find(int sentence_id) const;
  void store(int sentence_id, Sentence ids, long stamp);
  std::size_t size() const { return entries_.size(); }

  std::string serialize() const;
  static SyntheticCache deserialize(const std::string& text);
  bool operator==(const SyntheticCache&) const = default;

 private:
  std::map<int, Entry> entries_;
};

// True when a cached latent should be reused. Draws from rng only when an
// entry exists and 0 < probability.
bool use_cached_latent(const SyntheticCache& cache, int sentence_id, real cache_load_prob, Rng& rng);

struct FetchedLatent {
  Sentence ids;
  bool fresh = false;
};
FetchedLatent fetch_latent(SyntheticCache& cache, int sentence_id, const std::function<Sentence()>& generate,
                           real cache_load_prob, long iteration, Rng& rng);

// Makes b use a's embedding matrix.
void apply_sep(TranslationModel& a, TranslationModel& b);

struct BTModels {
  TranslationModel st;  // source -> target
  TranslationModel ts;  // target -> source
  LanguageModel lm_source;
  LanguageModel lm_target;
};

struct TrainBatch {
  std::vector<int> bilingual;    // indices into corpus.bilingual
  std::vector<int> mono_source;  // indices into corpus.mono_source
  std::vector<int> mono_target;  // indices into corpus.mono_target
};

TrainBatch sample_batch(const Corpus& corpus, const BTConfig& config, Rng& rng);

struct NonFiniteLoss : std::runtime_error {
  NonFiniteLoss(const std::string& what, LossReport report) : std::runtime_error(what), report(report) {}
  LossReport report;
};

class BTTrainer {
 public:
  BTTrainer(BTModels models, BTConfig config);

  // Samples a batch and runs one step.
  LossReport step(const Corpus& corpus);
  LossReport train_step(const Corpus& corpus, const TrainBatch& batch);

  long iteration() const { return iteration_; }
  const BTModels& models() const { return models_; }
  BTModels& models() { return models_; }
  const BTConfig& config() const { return config_; }
  const FEGState& feg_st() const { return feg_st_; }
  const FEGState& feg_ts() const { return feg_ts_; }
  const SyntheticCache& cache_source() const { return cache_source_; }
  const SyntheticCache& cache_target() const { return cache_target_; }
  Rng& rng() { return rng_; }
  long fresh_generations() const { return fresh_generations_; }

  void save(Checkpoint& ckpt) const;
  // Restores a state saved by save(); the models must have matching shapes.
  void load(const Checkpoint& ckpt);

 private:
  MonolingualProcess infer_process(const TranslationModel& inference, const std::vector<Sentence>& corpus_side,
                                   const std::vector<int>& indices, SyntheticCache& cache, real lambda, bool need_grad,
                                   const SamplingStrategy& strategy);

  BTModels models_;
  BTConfig config_;
  Adam adam_;
  FEGState feg_st_, feg_ts_;
  SyntheticCache cache_source_, cache_target_;
  Rng rng_;
  long iteration_ = 0;
  long fresh_generations_ = 0;
};

// Metrics line for one iteration.
std::string metrics_record(long iteration, real lr, real as, const LossReport& report);

struct PretrainConfig {
  long iters = 2000;
  int batch = 32;
  real lr = 0.001;
  int warmup_iters = 200;
  AdamConfig adam;
  std::uint64_t seed = 1;
};

using ProgressFn = std::function<void(long iteration, real loss)>;

// Supervised training of one or both directions on the bilingual corpus. With
// both, the two losses are summed into one step.
void pretrain_nmt(TranslationModel* st, TranslationModel* ts, const std::vector<SentencePair>& pairs,
                  const PretrainConfig& config, const ProgressFn& progress = {});
void pretrain_lm(LanguageModel& lm, const std::vector<Sentence>& sentences, const PretrainConfig& config,
                 const ProgressFn& progress = {});

// Checkpoint helpers for models and dims.
void add_model(Checkpoint& ckpt, const std::string& prefix, const NamedParameters& params);
void load_model(const Checkpoint& ckpt, const std::string& prefix, const NamedParameters& params);
std::string dims_to_string(const ModelDims& dims);
ModelDims dims_from_string(const std::string& text);

}  // namespace e2ebt
