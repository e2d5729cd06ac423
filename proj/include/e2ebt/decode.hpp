#pragma once

// Autoregressive decoding: an incremental decoder with a key/value cache,
// free-running latent-sentence inference through CRT or Gumbel-softmax, and
// beam search.

#include "e2ebt/model.hpp"
#include "e2ebt/reparam.hpp"

#include <map>
#include <vector>

namespace e2ebt {

// One hypothesis being decoded: which encoder sentence it reads and the cache
// rows of the tokens fed so far.
struct DecodeStream {
  int memory_index = 0;
  std::vector<int> history;
  int position() const { return static_cast<int>(history.size()); }
};

class IncrementalDecoder {
 public:
  IncrementalDecoder(const TranslationModel& model, Tensor memory, SegmentLayout memory_layout,
                     ForwardMode mode = ForwardMode::inference());

  // Feeds one token per stream, as one-hot rows or ids, and returns the
  // next-token logits (one row per stream). Streams are advanced in place.
  Tensor step(std::span<DecodeStream> streams, const Tensor& one_hot, std::span<const int> ids);

  int cached_rows() const { return cached_rows_; }

 private:
  const TranslationModel* model_;
  Tensor memory_;
  SegmentLayout memory_layout_;
  ForwardMode mode_;
  std::vector<Tensor> cross_keys_, cross_values_;
  std::vector<Tensor> self_keys_, self_values_;
  int cached_rows_ = 0;
};

// Next-token logits for the last row of every prefix (full recomputation).
// Each prefix must begin with BOS.
Tensor decode_step(const TranslationModel& model, const Tensor& memory, const SegmentLayout& memory_layout,
                   const TokenInput& prefix);

enum class LatentMethod { crt, gst };

struct LatentOptions {
  SamplingStrategy strategy = SamplingStrategy::greedy();
  real lambda = 0.01;
  LatentMethod method = LatentMethod::crt;
  real tau = 1.0;
  int extra_length = 10;
  int length_cap = 64;

  int max_length(int source_length) const;
};

// Packed latent sentences. Rows are sentence-major and include the EOS step
// when one was produced.
struct LatentBatch {
  Tensor z;  // differentiable one-hot rows
  Tensor q;  // inference-model distribution at each row
  std::vector<std::vector<int>> token_ids;
  SegmentLayout layout;
  real lambda = 0;
  // Per sentence: whether q belongs to a fresh posterior (cached latents have none).
  std::vector<char> has_posterior;

  int count() const { return layout.count(); }
  TokenInput as_input() const { return TokenInput::from_one_hot(z, layout); }
};

// Free-running decode feeding z (not the plain sample) back into the decoder.
// Dropout is off; gradient reaches the model through z when lambda > 0.
LatentBatch infer_latent(const TranslationModel& model, const TokenInput& source, const LatentOptions& options,
                         Rng& rng);

// Latent batch built from stored ids: constant one-hot rows, no posterior.
LatentBatch latent_from_ids(const std::vector<std::vector<int>>& ids, int vocab);

// Sentences of a and then b in one batch.
LatentBatch concat_latents(const LatentBatch& a, const LatentBatch& b);

// Reference greedy decoding by full-prefix recomputation. Output includes EOS
// when produced.
std::vector<std::vector<int>> greedy_decode(const TranslationModel& model, const TokenInput& source,
                                            std::span<const int> max_lengths);

class BeamModel {
 public:
  virtual ~BeamModel() = default;
  virtual int vocab() const = 0;
  // Next-token log-probabilities after each prefix (rows follow prefixes).
  // Prefixes exclude BOS; all prefixes in one call have the same length.
  virtual Matrix next_log_probs(const std::vector<std::vector<int>>& prefixes) = 0;
};

struct BeamHypothesis {
  std::vector<int> tokens;  // ends with EOS unless truncated at max_len
  real log_prob = 0;
  real score() const { return tokens.empty() ? log_prob : log_prob / static_cast<real>(tokens.size()); }
};

// Best hypothesis under length-normalized log-probability. The greedy path is
// always among the candidates.
BeamHypothesis beam_search(BeamModel& model, int width, int max_len);
BeamHypothesis greedy_search(BeamModel& model, int max_len);

// Beam model over one source sentence of a translation model.
class TranslationBeamModel : public BeamModel {
 public:
  TranslationBeamModel(const TranslationModel& model, const std::vector<int>& source);
  int vocab() const override { return model_->dims().vocab; }
  Matrix next_log_probs(const std::vector<std::vector<int>>& prefixes) override;

 private:
  const TranslationModel* model_;
  IncrementalDecoder decoder_;
  // Stream state after feeding BOS and the prefix, by prefix length.
  std::vector<std::map<std::vector<int>, DecodeStream>> states_;
};

std::vector<int> strip_eos(std::vector<int> ids);

// Translates plain sentences (no EOS) with beam search; outputs exclude EOS.
// The length limit per sentence follows LatentOptions defaults.
std::vector<std::vector<int>> translate(const TranslationModel& model, const std::vector<std::vector<int>>& sources,
                                        int beam_width);

}  // namespace e2ebt
