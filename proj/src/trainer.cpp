#include "e2ebt/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace e2ebt {

void BTConfig::validate() const {
  auto nonneg = [](real v, const char* name) {
    if (!(v >= 0)) throw std::invalid_argument(std::string(name) + " must be >= 0");
  };
  auto unit = [](real v, const char* name) {
    if (!(v >= 0 && v <= 1)) throw std::invalid_argument(std::string(name) + " must lie in [0, 1]");
  };
  nonneg(lambda_x, "lambda_x");
  nonneg(lambda_y, "lambda_y");
  nonneg(alpha_x, "alpha_x");
  nonneg(alpha_y, "alpha_y");
  unit(as_start_ratio, "as_start_ratio");
  unit(as_end_ratio, "as_end_ratio");
  unit(cache_load_prob, "cache_load_prob");
  if (feg_interval < 0) throw std::invalid_argument("feg_interval must be >= 0");
  if (batch_bilingual < 0 || batch_monolingual < 0) throw std::invalid_argument("batch counts must be >= 0");
  if (batch_bilingual == 0 && batch_monolingual == 0) throw std::invalid_argument("batch is empty");
  if (!(lr > 0)) throw std::invalid_argument("lr must be > 0");
  if (warmup_iters < 0) throw std::invalid_argument("warmup_iters must be >= 0");
  if (!(gst_tau > 0)) throw std::invalid_argument("gst_tau must be > 0");
  if (max_iters < 0) throw std::invalid_argument("max_iters must be >= 0");
}

real as_ratio(long iteration, const BTConfig& config) {
  if (iteration < 0) throw std::invalid_argument("as_ratio: negative iteration");
  if (config.as_total_iters <= 0) return config.as_end_ratio;
  const real t = std::min<real>(1.0, static_cast<real>(iteration) / static_cast<real>(config.as_total_iters));
  return config.as_start_ratio + (config.as_end_ratio - config.as_start_ratio) * t;
}

real lr_schedule(long iteration, real lr, int warmup_iters) {
  if (iteration < 0) throw std::invalid_argument("lr_schedule: negative iteration");
  if (warmup_iters <= 0) return iteration == 0 ? lr : lr / std::sqrt(static_cast<real>(iteration));
  if (iteration < warmup_iters) return lr * static_cast<real>(iteration + 1) / warmup_iters;
  return lr * std::sqrt(static_cast<real>(warmup_iters) / static_cast<real>(iteration));
}

Adam::Adam(const std::vector<NamedParameters>& groups, AdamConfig config) : config_(config) {
  std::unordered_set<const Node*> seen;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (const auto& [name, t] : groups[g]) {
      if (!t.requires_grad() || !seen.insert(t.node()).second) continue;
      names_.push_back(std::to_string(g) + "." + name);
      params_.push_back(t);
      m_.push_back(Matrix::Zero(t.rows(), t.cols()));
      v_.push_back(Matrix::Zero(t.rows(), t.cols()));
    }
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

std::size_t Adam::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& p : params_) n += static_cast<std::size_t>(p.size());
  return n;
}

void Adam::step(real lr) {
  ++steps_;
  const real bc1 = 1 - std::pow(config_.beta1, static_cast<real>(steps_));
  const real bc2 = 1 - std::pow(config_.beta2, static_cast<real>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (p.has_grad()) {
      const Matrix& g = p.node()->grad;
      m_[i] = config_.beta1 * m_[i] + (1 - config_.beta1) * g;
      v_[i] = config_.beta2 * v_[i] + (1 - config_.beta2) * g.cwiseProduct(g);
    } else {
      m_[i] *= config_.beta1;
      v_[i] *= config_.beta2;
    }
    round_to_float(m_[i]);
    round_to_float(v_[i]);
    Matrix& value = p.mutable_value();
    value.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + config_.eps);
    round_to_float(value);
    if (!value.allFinite()) throw std::runtime_error("non-finite parameter after update: " + names_[i]);
  }
}

void Adam::save(Checkpoint& ckpt, const std::string& prefix) const {
  ckpt.blobs[prefix + "steps"] = std::to_string(steps_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ckpt.add_array(prefix + "m." + names_[i], m_[i]);
    ckpt.add_array(prefix + "v." + names_[i], v_[i]);
  }
}

void Adam::load(const Checkpoint& ckpt, const std::string& prefix) {
  steps_ = std::stol(ckpt.blob(prefix + "steps"));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Matrix& m = ckpt.array(prefix + "m." + names_[i]);
    const Matrix& v = ckpt.array(prefix + "v." + names_[i]);
    if (m.rows() != m_[i].rows() || m.cols() != m_[i].cols() || v.rows() != v_[i].rows() || v.cols() != v_[i].cols())
      throw CheckpointError("optimizer state shape mismatch for " + names_[i]);
    m_[i] = m;
    v_[i] = v;
  }
}

void feg_step(FEGState& state, const TranslationModel& learning, long iteration, int k) {
  if (k <= 0) return;
  if (iteration % k == 0 || !state.initialized) {
    state.evaluating = learning.clone(false);
    state.iterations_since_copy = 0;
    state.initialized = true;
  } else {
    state.iterations_since_copy = static_cast<int>((state.iterations_since_copy + 1) % k);
  }
}

const SyntheticCache::Entry* SyntheticCache::find(int sentence_id) const {
  auto it = entries_.find(sentence_id);
  return it == entries_.end() ? nullptr : &it->second;
}

void SyntheticCache::store(int sentence_id, Sentence ids, long stamp) {
  auto it = entries_.find(sentence_id);
  if (it != entries_.end() && stamp < it->second.stamp) throw std::logic_error("cache stamps must not go backwards");
  entries_[sentence_id] = Entry{std::move(ids), stamp};
}

std::string SyntheticCache::serialize() const {
  std::ostringstream out;
  for (const auto& [id, e] : entries_) {
    out << id << ' ' << e.stamp << ' ' << e.ids.size();
    for (int t : e.ids) out << ' ' << t;
    out << '\n';
  }
  return out.str();
}

SyntheticCache SyntheticCache::deserialize(const std::string& text) {
  SyntheticCache cache;
  std::istringstream in(text);
  int id;
  while (in >> id) {
    Entry e;
    std::size_t n;
    if (!(in >> e.stamp >> n)) throw CheckpointError("malformed cache entry");
    e.ids.resize(n);
    for (int& t : e.ids)
      if (!(in >> t)) throw CheckpointError("malformed cache entry");
    cache.entries_[id] = std::move(e);
  }
  return cache;
}

bool use_cached_latent(const SyntheticCache& cache, int sentence_id, real cache_load_prob, Rng& rng) {
  if (cache_load_prob <= 0 || !cache.find(sentence_id)) return false;
  return rng.bernoulli(cache_load_prob);
}

FetchedLatent fetch_latent(SyntheticCache& cache, int sentence_id, const std::function<Sentence()>& generate,
                           real cache_load_prob, long iteration, Rng& rng) {
  if (use_cached_latent(cache, sentence_id, cache_load_prob, rng)) return {cache.find(sentence_id)->ids, false};
  Sentence ids = generate();
  cache.store(sentence_id, ids, iteration);
  return {std::move(ids), true};
}

void apply_sep(TranslationModel& a, TranslationModel& b) {
  if (a.dims().vocab != b.dims().vocab || a.dims().width != b.dims().width)
    throw std::invalid_argument("shared embeddings need identical vocabulary and width");
  b.set_embedding(a.embedding());
}

TrainBatch sample_batch(const Corpus& corpus, const BTConfig& config, Rng& rng) {
  TrainBatch batch;
  auto draw = [&](std::vector<int>& out, std::size_t n, int count) {
    if (n == 0) return;
    for (int i = 0; i < count; ++i) out.push_back(static_cast<int>(rng.below(n)));
  };
  draw(batch.bilingual, corpus.bilingual.size(), config.batch_bilingual);
  draw(batch.mono_source, corpus.mono_source.size(), config.batch_monolingual);
  draw(batch.mono_target, corpus.mono_target.size(), config.batch_monolingual);
  return batch;
}

BTTrainer::BTTrainer(BTModels models, BTConfig config)
    : models_(std::move(models)), config_(config), rng_(config.seed) {
  config_.validate();
  if (config_.share_embeddings && models_.st.embedding().node() != models_.ts.embedding().node())
    apply_sep(models_.st, models_.ts);
  if (!models_.lm_source.frozen()) models_.lm_source.freeze();
  if (!models_.lm_target.frozen()) models_.lm_target.freeze();
  adam_ = Adam({models_.st.parameters(), models_.ts.parameters()}, config_.adam);
}

MonolingualProcess BTTrainer::infer_process(const TranslationModel& inference, const std::vector<Sentence>& corpus_side,
                                            const std::vector<int>& indices, SyntheticCache& cache, real lambda,
                                            bool need_grad, const SamplingStrategy& strategy) {
  MonolingualProcess process;
  if (indices.empty()) return process;
  std::vector<int> fresh, cached;
  for (int idx : indices) {
    if (use_cached_latent(cache, idx, config_.cache_load_prob, rng_)) {
      cached.push_back(idx);
    } else {
      fresh.push_back(idx);
    }
  }
  LatentBatch fresh_latent;
  if (!fresh.empty()) {
    std::vector<Sentence> inputs;
    for (int idx : fresh) inputs.push_back(corpus_side[idx]);
    LatentOptions options;
    options.strategy = strategy;
    options.lambda = lambda;
    options.method = config_.latent_method;
    options.tau = config_.gst_tau;
    if (need_grad) {
      fresh_latent = infer_latent(inference, encoder_input(inputs), options, rng_);
    } else {
      NoGradGuard guard;
      fresh_latent = infer_latent(inference, encoder_input(inputs), options, rng_);
    }
    for (std::size_t i = 0; i < fresh.size(); ++i) cache.store(fresh[i], fresh_latent.token_ids[i], iteration_);
    fresh_generations_ += static_cast<long>(fresh.size());
  }
  LatentBatch cached_latent;
  if (!cached.empty()) {
    std::vector<Sentence> ids;
    for (int idx : cached) ids.push_back(cache.find(idx)->ids);
    cached_latent = latent_from_ids(ids, inference.dims().vocab);
  }
  process.latent = concat_latents(fresh_latent, cached_latent);
  for (int idx : fresh) process.targets.push_back(corpus_side[idx]);
  for (int idx : cached) process.targets.push_back(corpus_side[idx]);
  return process;
}

LossReport BTTrainer::step(const Corpus& corpus) { return train_step(corpus, sample_batch(corpus, config_, rng_)); }

LossReport BTTrainer::train_step(const Corpus& corpus, const TrainBatch& batch) {
  const int k = config_.feg_interval;
  feg_step(feg_st_, models_.st, iteration_, k);
  feg_step(feg_ts_, models_.ts, iteration_, k);
  const SamplingStrategy strategy = SamplingStrategy::mixed(as_ratio(iteration_, config_));

  CompositeBatch cb;
  for (int idx : batch.bilingual) cb.bilingual.push_back(corpus.bilingual.at(static_cast<std::size_t>(idx)));
  // Target monolingual sentences: the target->source model infers a latent
  // source sentence, which the source->target model reconstructs from.
  cb.tst = infer_process(models_.ts, corpus.mono_target, batch.mono_target, cache_target_, config_.lambda_x,
                         config_.lambda_x > 0 || config_.alpha_x > 0, strategy);
  cb.sts = infer_process(models_.st, corpus.mono_source, batch.mono_source, cache_source_, config_.lambda_y,
                         config_.lambda_y > 0 || config_.alpha_y > 0, strategy);

  CompositeModels cm;
  cm.st.learning = &models_.st;
  cm.ts.learning = &models_.ts;
  // With lambda = 0 the evaluating pass would contribute no gradient at all.
  if (k > 0 && config_.lambda_x > 0) cm.st.evaluating = &feg_st_.evaluating;
  if (k > 0 && config_.lambda_y > 0) cm.ts.evaluating = &feg_ts_.evaluating;
  cm.lm_source = &models_.lm_source;
  cm.lm_target = &models_.lm_target;

  const CompositeLoss loss = composite_losses(cb, cm, config_.alpha_x, config_.alpha_y, ForwardMode::training(rng_));
  if (!loss.report.finite()) {
    throw NonFiniteLoss("non-finite loss at iteration " + std::to_string(iteration_), loss.report);
  }
  adam_.zero_grad();
  backward(loss.total);
  adam_.step(lr_schedule(iteration_, config_.lr, config_.warmup_iters));
  ++iteration_;
  return loss.report;
}

void add_model(Checkpoint& ckpt, const std::string& prefix, const NamedParameters& params) {
  for (const auto& [name, t] : params) ckpt.add_array(prefix + name, t.value());
}

void load_model(const Checkpoint& ckpt, const std::string& prefix, const NamedParameters& params) {
  for (const auto& [name, t] : params) {
    const Matrix& m = ckpt.array(prefix + name);
    if (m.rows() != t.rows() || m.cols() != t.cols()) throw CheckpointError("shape mismatch for " + prefix + name);
    Tensor handle = t;
    handle.mutable_value() = m;
  }
}

std::string dims_to_string(const ModelDims& d) {
  std::ostringstream out;
  out.precision(17);
  out << d.vocab << ' ' << d.width << ' ' << d.heads << ' ' << d.ffn << ' ' << d.encoder_layers << ' '
      << d.decoder_layers << ' ' << d.dropout << ' ' << d.max_positions;
  return out.str();
}

ModelDims dims_from_string(const std::string& text) {
  ModelDims d;
  std::istringstream in(text);
  if (!(in >> d.vocab >> d.width >> d.heads >> d.ffn >> d.encoder_layers >> d.decoder_layers >> d.dropout >>
        d.max_positions))
    throw CheckpointError("malformed model dims: " + text);
  d.validate();
  return d;
}

void BTTrainer::save(Checkpoint& ckpt) const {
  ckpt.blobs["bt.iteration"] = std::to_string(iteration_);
  ckpt.blobs["bt.fresh_generations"] = std::to_string(fresh_generations_);
  ckpt.blobs["bt.rng"] = rng_.state();
  ckpt.blobs["bt.cache_source"] = cache_source_.serialize();
  ckpt.blobs["bt.cache_target"] = cache_target_.serialize();
  ckpt.blobs["dims.st"] = dims_to_string(models_.st.dims());
  ckpt.blobs["dims.ts"] = dims_to_string(models_.ts.dims());
  ckpt.blobs["dims.lm_source"] = dims_to_string(models_.lm_source.dims());
  ckpt.blobs["dims.lm_target"] = dims_to_string(models_.lm_target.dims());
  add_model(ckpt, "st.", models_.st.parameters());
  add_model(ckpt, "ts.", models_.ts.parameters());
  add_model(ckpt, "lm_source.", models_.lm_source.parameters());
  add_model(ckpt, "lm_target.", models_.lm_target.parameters());
  for (const auto* feg : {&feg_st_, &feg_ts_}) {
    const std::string tag = feg == &feg_st_ ? "feg_st" : "feg_ts";
    ckpt.blobs["bt." + tag] = feg->initialized ? std::to_string(feg->iterations_since_copy) : "-";
    if (feg->initialized) add_model(ckpt, tag + ".", feg->evaluating.parameters());
  }
  adam_.save(ckpt, "adam.");
}

void BTTrainer::load(const Checkpoint& ckpt) {
  load_model(ckpt, "st.", models_.st.parameters());
  load_model(ckpt, "ts.", models_.ts.parameters());
  if (config_.share_embeddings) load_model(ckpt, "st.", {{"embedding", models_.st.embedding()}});
  load_model(ckpt, "lm_source.", models_.lm_source.parameters());
  load_model(ckpt, "lm_target.", models_.lm_target.parameters());
  for (FEGState* feg : {&feg_st_, &feg_ts_}) {
    const bool st = feg == &feg_st_;
    const std::string tag = st ? "feg_st" : "feg_ts";
    const std::string since = ckpt.blob("bt." + tag);
    feg->initialized = since != "-";
    if (feg->initialized) {
      feg->evaluating = (st ? models_.st : models_.ts).clone(false);
      load_model(ckpt, tag + ".", feg->evaluating.parameters());
      feg->iterations_since_copy = std::stoi(since);
    }
  }
  adam_.load(ckpt, "adam.");
  iteration_ = std::stol(ckpt.blob("bt.iteration"));
  fresh_generations_ = std::stol(ckpt.blob("bt.fresh_generations"));
  rng_.restore(ckpt.blob("bt.rng"));
  cache_source_ = SyntheticCache::deserialize(ckpt.blob("bt.cache_source"));
  cache_target_ = SyntheticCache::deserialize(ckpt.blob("bt.cache_target"));
}

std::string metrics_record(long iteration, real lr, real as, const LossReport& r) {
  nlohmann::ordered_json j;
  j["iteration"] = iteration;
  j["lr"] = lr;
  j["as_ratio"] = as;
  j["bilingual_st"] = r.bilingual_st;
  j["bilingual_ts"] = r.bilingual_ts;
  j["recon_tst"] = r.recon_tst;
  j["kl_tst"] = r.kl_tst;
  j["recon_sts"] = r.recon_sts;
  j["kl_sts"] = r.kl_sts;
  j["total"] = r.total;
  return j.dump();
}

void pretrain_nmt(TranslationModel* st, TranslationModel* ts, const std::vector<SentencePair>& pairs,
                  const PretrainConfig& config, const ProgressFn& progress) {
  if (!st && !ts) throw std::invalid_argument("pretrain_nmt: no model");
  if (pairs.empty()) throw std::invalid_argument("pretrain_nmt: empty corpus");
  std::vector<NamedParameters> groups;
  if (st) groups.push_back(st->parameters());
  if (ts) groups.push_back(ts->parameters());
  Adam adam(groups, config.adam);
  Rng rng(config.seed);
  for (long it = 0; it < config.iters; ++it) {
    std::vector<Sentence> src, tgt;
    for (int b = 0; b < config.batch; ++b) {
      const auto& p = pairs[rng.below(pairs.size())];
      src.push_back(p.source);
      tgt.push_back(p.target);
    }
    const ForwardMode mode = ForwardMode::training(rng);
    Tensor loss;
    if (st) loss = bilingual_loss(*st, src, tgt, mode);
    if (ts) {
      const Tensor l = bilingual_loss(*ts, tgt, src, mode);
      loss = loss.defined() ? add(loss, l) : l;
    }
    adam.zero_grad();
    backward(loss);
    adam.step(lr_schedule(it, config.lr, config.warmup_iters));
    if (progress) progress(it, loss.item());
  }
}

void pretrain_lm(LanguageModel& lm, const std::vector<Sentence>& sentences, const PretrainConfig& config,
                 const ProgressFn& progress) {
  if (sentences.empty()) throw std::invalid_argument("pretrain_lm: empty corpus");
  if (lm.frozen()) throw std::invalid_argument("pretrain_lm: language model is frozen");
  Adam adam({lm.parameters()}, config.adam);
  Rng rng(config.seed);
  for (long it = 0; it < config.iters; ++it) {
    std::vector<Sentence> batch;
    for (int b = 0; b < config.batch; ++b) batch.push_back(sentences[rng.below(sentences.size())]);
    const Tensor loss = language_model_loss(lm, batch, ForwardMode::training(rng));
    adam.zero_grad();
    backward(loss);
    adam.step(lr_schedule(it, config.lr, config.warmup_iters));
    if (progress) progress(it, loss.item());
  }
}

}  // namespace e2ebt
