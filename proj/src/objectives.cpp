#include "e2ebt/objectives.hpp"

#include <cmath>
#include <stdexcept>

namespace e2ebt {

TokenInput encoder_input(const std::vector<Sentence>& sentences) {
  std::vector<Sentence> rows;
  rows.reserve(sentences.size());
  for (const auto& s : sentences) {
    rows.push_back(s);
    rows.back().push_back(Vocabulary::eos);
  }
  return TokenInput::from_ids(rows);
}

TeacherForcing teacher_forcing(const std::vector<Sentence>& sentences) {
  TeacherForcing tf;
  std::vector<Sentence> prefixes;
  prefixes.reserve(sentences.size());
  for (const auto& s : sentences) {
    Sentence p{Vocabulary::bos};
    p.insert(p.end(), s.begin(), s.end());
    prefixes.push_back(std::move(p));
    tf.targets.insert(tf.targets.end(), s.begin(), s.end());
    tf.targets.push_back(Vocabulary::eos);
  }
  tf.prefix = TokenInput::from_ids(prefixes);
  return tf;
}

Tensor token_nll(const Tensor& logits, std::span<const int> targets) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) throw ShapeError("token_nll: target count mismatch");
  int tokens = 0;
  for (int t : targets) tokens += t != Vocabulary::pad;
  if (tokens == 0) throw std::invalid_argument("token_nll: no targets");
  std::vector<real> w(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) w[i] = targets[i] == Vocabulary::pad ? 0.0 : 1.0 / tokens;
  return cross_entropy(logits, targets, w);
}

Tensor bilingual_loss(const TranslationModel& model, const std::vector<Sentence>& sources,
                      const std::vector<Sentence>& targets, const ForwardMode& mode) {
  if (sources.empty()) throw std::invalid_argument("bilingual_loss: empty batch");
  if (sources.size() != targets.size()) throw std::invalid_argument("bilingual_loss: unpaired batch");
  const TokenInput src = encoder_input(sources);
  const TeacherForcing tf = teacher_forcing(targets);
  const Tensor memory = model.encode(src, mode);
  return token_nll(model.decode(memory, src.layout, tf.prefix, mode), tf.targets);
}

Tensor bilingual_loss(const TranslationModel& model, std::span<const SentencePair> pairs, const ForwardMode& mode) {
  std::vector<Sentence> src, tgt;
  for (const auto& p : pairs) {
    src.push_back(p.source);
    tgt.push_back(p.target);
  }
  return bilingual_loss(model, src, tgt, mode);
}

Tensor reconstruction_loss(const TranslationModel& generator, const LatentBatch& latent,
                           const std::vector<Sentence>& targets, const ForwardMode& mode) {
  if (latent.count() != static_cast<int>(targets.size())) throw std::invalid_argument("reconstruction: latent/target count mismatch");
  for (const auto& t : targets)
    if (static_cast<int>(t.size()) + 1 > generator.dims().max_positions)
      throw std::length_error("reconstruction target longer than the model's maximum length");
  const TokenInput src = latent.as_input();
  const TeacherForcing tf = teacher_forcing(targets);
  const Tensor memory = generator.encode(src, mode);
  return token_nll(generator.decode(memory, src.layout, tf.prefix, mode), tf.targets);
}

Tensor kl_to_prior(const LatentBatch& latent, const LanguageModel& lm) {
  if (latent.q.cols() != lm.dims().vocab) throw ShapeError("kl_to_prior: vocabulary size mismatch");
  int rows = 0;
  for (int s = 0; s < latent.count(); ++s)
    if (latent.has_posterior[s]) rows += latent.layout.lengths[s];
  if (rows == 0) return Tensor::scalar(0.0);
  Tensor prior;
  {
    NoGradGuard guard;
    prior = lm_distributions(lm, Tensor::constant(latent.z.value()), latent.layout);
  }
  std::vector<real> w(static_cast<std::size_t>(latent.layout.total()), 0.0);
  for (int s = 0; s < latent.count(); ++s)
    if (latent.has_posterior[s])
      for (int t = 0; t < latent.layout.lengths[s]; ++t) w[latent.layout.offsets[s] + t] = 1.0 / rows;
  return categorical_kl(latent.q, prior, w);
}

Tensor language_model_loss(const LanguageModel& lm, const std::vector<Sentence>& sentences, const ForwardMode& mode) {
  if (sentences.empty()) throw std::invalid_argument("language_model_loss: empty batch");
  const TeacherForcing tf = teacher_forcing(sentences);
  return token_nll(lm.logits(tf.prefix, mode), tf.targets);
}

bool LossReport::finite() const {
  for (real v : {bilingual_st, bilingual_ts, recon_tst, kl_tst, recon_sts, kl_sts, total})
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor generator_reconstruction(const GeneratorPair& generator, const LatentBatch& latent,
                                const std::vector<Sentence>& targets, const ForwardMode& mode) {
  if (!generator.evaluating) return reconstruction_loss(*generator.learning, latent, targets, mode);
  LatentBatch detached = latent;
  detached.z = detach(latent.z);
  const Tensor learn = reconstruction_loss(*generator.learning, detached, targets, mode);
  const Tensor eval = reconstruction_loss(*generator.evaluating, latent, targets, ForwardMode::inference());
  // eval - detach(eval) is exactly zero forward but routes the evaluating
  // model's gradient into the latent.
  return add(learn, sub(eval, detach(eval)));
}

namespace {

struct ProcessTerms {
  Tensor recon;
  Tensor kl;
};

ProcessTerms monolingual_terms(const MonolingualProcess& process, const GeneratorPair& generator,
                               const LanguageModel* lm, const ForwardMode& mode) {
  if (process.empty()) return {Tensor::scalar(0.0), Tensor::scalar(0.0)};
  if (!generator.learning) throw std::invalid_argument("composite: missing generator");
  if (!lm) throw std::invalid_argument("composite: missing language model prior");
  if (process.latent.count() != static_cast<int>(process.targets.size()))
    throw std::invalid_argument("composite: monolingual side without matching latents");
  return {generator_reconstruction(generator, process.latent, process.targets, mode), kl_to_prior(process.latent, *lm)};
}

}  // namespace

CompositeLoss composite_losses(const CompositeBatch& batch, const CompositeModels& models, real alpha_x,
                               real alpha_y, const ForwardMode& mode) {
  if (!(alpha_x >= 0 && alpha_y >= 0)) throw std::invalid_argument("KL coefficients must be >= 0");
  if (batch.bilingual.empty() && batch.tst.empty() && batch.sts.empty())
    throw std::invalid_argument("composite: empty batch");
  Tensor bil_st = Tensor::scalar(0.0), bil_ts = Tensor::scalar(0.0);
  if (!batch.bilingual.empty()) {
    if (!models.st.learning || !models.ts.learning) throw std::invalid_argument("composite: missing translation model");
    std::vector<Sentence> src, tgt;
    for (const auto& p : batch.bilingual) {
      src.push_back(p.source);
      tgt.push_back(p.target);
    }
    bil_st = bilingual_loss(*models.st.learning, src, tgt, mode);
    bil_ts = bilingual_loss(*models.ts.learning, tgt, src, mode);
  }
  // The target-language sentence is rebuilt by the source->target model, and
  // its latent (a source sentence) is scored by the source LM.
  const ProcessTerms tst = monolingual_terms(batch.tst, models.st, models.lm_source, mode);
  const ProcessTerms sts = monolingual_terms(batch.sts, models.ts, models.lm_target, mode);

  CompositeLoss out;
  const Tensor j_t = add(add(bil_st, tst.recon), scale(tst.kl, alpha_x));
  const Tensor j_s = add(add(bil_ts, sts.recon), scale(sts.kl, alpha_y));
  out.total = add(j_t, j_s);
  out.report.bilingual_st = bil_st.item();
  out.report.bilingual_ts = bil_ts.item();
  out.report.recon_tst = tst.recon.item();
  out.report.kl_tst = tst.kl.item();
  out.report.recon_sts = sts.recon.item();
  out.report.kl_sts = sts.kl.item();
  out.report.total = out.total.item();
  return out;
}

}  // namespace e2ebt
