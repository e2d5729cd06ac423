#pragma once

// Loss terms. Every sequence loss is normalized by its token count.
//
// Conventions: the encoder reads a sentence followed by EOS; the decoder reads
// BOS followed by the sentence and predicts the sentence followed by EOS.

#include "e2ebt/data.hpp"
#include "e2ebt/decode.hpp"
#include "e2ebt/model.hpp"

#include <span>
#include <vector>

namespace e2ebt {

TokenInput encoder_input(const std::vector<Sentence>& sentences);

struct TeacherForcing {
  TokenInput prefix;
  std::vector<int> targets;
};
TeacherForcing teacher_forcing(const std::vector<Sentence>& sentences);

// Mean negative log-likelihood of the target ids; PAD targets are ignored.
Tensor token_nll(const Tensor& logits, std::span<const int> targets);

// -log p(targets | sources) with teacher forcing.
Tensor bilingual_loss(const TranslationModel& model, const std::vector<Sentence>& sources,
                      const std::vector<Sentence>& targets, const ForwardMode& mode);
Tensor bilingual_loss(const TranslationModel& model, std::span<const SentencePair> pairs, const ForwardMode& mode);

// -log p(targets | latent) where the latent one-hot rows are the encoder input.
Tensor reconstruction_loss(const TranslationModel& generator, const LatentBatch& latent,
                           const std::vector<Sentence>& targets, const ForwardMode& mode);

// Mean over latent positions that carry a posterior of KL(q_t || prior_t), with
// the prior taken from the frozen language model on the sampled latent prefix.
// The prior receives no gradient; q does.
Tensor kl_to_prior(const LatentBatch& latent, const LanguageModel& lm);

// Next-token cross-entropy of a language model on plain sentences.
Tensor language_model_loss(const LanguageModel& lm, const std::vector<Sentence>& sentences, const ForwardMode& mode);

struct LossReport {
  real bilingual_st = 0;
  real bilingual_ts = 0;
  real recon_tst = 0;
  real kl_tst = 0;
  real recon_sts = 0;
  real kl_sts = 0;
  real total = 0;

  bool finite() const;
  bool operator==(const LossReport&) const = default;
};

// Generator for one monolingual process. With an evaluating copy, the
// reconstruction that reaches the inference model is scored by the frozen copy
// while the learning generator is trained on a detached latent.
struct GeneratorPair {
  const TranslationModel* learning = nullptr;
  const TranslationModel* evaluating = nullptr;
};

// One monolingual process: the latent inferred from each monolingual sentence
// and the sentences to reconstruct (in latent order).
struct MonolingualProcess {
  LatentBatch latent;
  std::vector<Sentence> targets;
  bool empty() const { return targets.empty(); }
};

struct CompositeBatch {
  std::vector<SentencePair> bilingual;
  MonolingualProcess tst;  // target monolingual -> latent source -> target
  MonolingualProcess sts;  // source monolingual -> latent target -> source
};

struct CompositeModels {
  GeneratorPair st;  // generates the target side (theta)
  GeneratorPair ts;  // generates the source side (phi)
  const LanguageModel* lm_source = nullptr;
  const LanguageModel* lm_target = nullptr;
};

struct CompositeLoss {
  Tensor total;
  LossReport report;
};

// total = bilingual_st + recon_tst + alpha_x kl_tst + bilingual_ts + recon_sts + alpha_y kl_sts
CompositeLoss composite_losses(const CompositeBatch& batch, const CompositeModels& models, real alpha_x,
                               real alpha_y, const ForwardMode& mode);

// Reconstruction through a generator pair; the value is the learning pass.
Tensor generator_reconstruction(const GeneratorPair& generator, const LatentBatch& latent,
                                const std::vector<Sentence>& targets, const ForwardMode& mode);

}  // namespace e2ebt
