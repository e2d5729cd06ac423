#pragma once

// Pre-norm transformer encoder-decoder translation models and decoder-only
// language models over packed batches. A batch is a stack of sentence rows;
// SegmentLayout records where each sentence starts, and attention masks keep
// sentences from seeing each other.

#include "e2ebt/rng.hpp"
#include "e2ebt/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace e2ebt {

struct ModelDims {
  int vocab = 0;
  int width = 64;
  int heads = 4;
  int ffn = 256;
  int encoder_layers = 2;
  int decoder_layers = 2;
  real dropout = 0.1;
  int max_positions = 128;

  void validate() const;
  bool operator==(const ModelDims&) const = default;
};

struct SegmentLayout {
  std::vector<int> offsets;
  std::vector<int> lengths;

  static SegmentLayout from_lengths(std::span<const int> lengths);
  int count() const { return static_cast<int>(lengths.size()); }
  int total() const { return offsets.empty() ? 0 : offsets.back() + lengths.back(); }
  // Position of every row inside its sentence.
  std::vector<int> positions() const;
};

AttentionMask self_attention_mask(const SegmentLayout& layout, bool causal);
AttentionMask cross_attention_mask(const SegmentLayout& queries, const SegmentLayout& keys);

// Packed token rows, given either as ids or as (differentiable) one-hot rows.
struct TokenInput {
  std::vector<int> ids;
  Tensor one_hot;
  SegmentLayout layout;

  static TokenInput from_ids(const std::vector<std::vector<int>>& sentences);
  static TokenInput from_one_hot(Tensor rows, SegmentLayout layout);
  bool is_one_hot() const { return one_hot.defined(); }
};

// Dropout is active only when train is set.
struct ForwardMode {
  bool train = false;
  Rng* rng = nullptr;

  static ForwardMode inference() { return {}; }
  static ForwardMode training(Rng& rng) { return {true, &rng}; }
};

using NamedParameters = std::vector<std::pair<std::string, Tensor>>;

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out
  Tensor operator()(const Tensor& x) const { return add_row(matmul(x, weight), bias); }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

struct MultiHeadAttention {
  Linear query, key, value, output;
  int heads = 1;
};

struct FeedForward {
  Linear hidden, output;
};

struct EncoderBlock {
  LayerNorm self_norm;
  MultiHeadAttention self_attention;
  LayerNorm ff_norm;
  FeedForward ff;
};

struct DecoderBlock {
  LayerNorm self_norm;
  MultiHeadAttention self_attention;
  bool has_cross = true;
  LayerNorm cross_norm;
  MultiHeadAttention cross_attention;
  LayerNorm ff_norm;
  FeedForward ff;
};

// Sinusoidal position table, rows = positions.
Matrix positional_table(int positions, int width);

class TranslationModel {
 public:
  TranslationModel() = default;
  TranslationModel(std::string direction, ModelDims dims, Rng& init);

  const std::string& direction() const { return direction_; }
  const ModelDims& dims() const { return dims_; }

  // (rows x width) encoder memory.
  Tensor encode(const TokenInput& source, const ForwardMode& mode) const;
  // Teacher-forced logits (rows of prefix x vocab) with causal self-attention.
  Tensor decode(const Tensor& memory, const SegmentLayout& memory_layout, const TokenInput& prefix,
                const ForwardMode& mode) const;

  Tensor embed(const TokenInput& input, const ForwardMode& mode) const;
  Tensor embed_rows(const Tensor& rows_one_hot, std::span<const int> ids, std::span<const int> positions,
                    const ForwardMode& mode) const;

  const Tensor& embedding() const { return embedding_; }
  void set_embedding(Tensor shared) { embedding_ = std::move(shared); }
  const std::vector<DecoderBlock>& decoder_blocks() const { return decoder_; }
  const LayerNorm& decoder_norm() const { return decoder_norm_; }
  const Linear& projection() const { return projection_; }

  NamedParameters parameters() const;
  std::size_t parameter_count() const;
  template <typename Fn>
  void visit_parameters(Fn&& fn);
  // Deep copy with fresh storage; the copy's parameters require grad iff trainable.
  TranslationModel clone(bool trainable) const;

 private:
  std::string direction_;
  ModelDims dims_;
  Matrix positions_;
  Tensor embedding_;
  std::vector<EncoderBlock> encoder_;
  LayerNorm encoder_norm_;
  std::vector<DecoderBlock> decoder_;
  LayerNorm decoder_norm_;
  Linear projection_;
};

class LanguageModel {
 public:
  LanguageModel() = default;
  LanguageModel(std::string side, ModelDims dims, Rng& init);

  const std::string& side() const { return side_; }
  const ModelDims& dims() const { return dims_; }

  // Next-token logits for every row of the (BOS-prefixed) input.
  Tensor logits(const TokenInput& input, const ForwardMode& mode) const;

  // After freezing, no parameter requires grad.
  void freeze();
  bool frozen() const { return frozen_; }

  NamedParameters parameters() const;
  std::size_t parameter_count() const;
  template <typename Fn>
  void visit_parameters(Fn&& fn);

 private:
  std::string side_;
  ModelDims dims_;
  Matrix positions_;
  Tensor embedding_;
  std::vector<DecoderBlock> blocks_;
  LayerNorm norm_;
  Linear projection_;
  bool frozen_ = false;
};

namespace detail {

template <typename Fn>
void visit(const std::string& name, Linear& l, Fn& fn) {
  fn(name + ".weight", l.weight);
  fn(name + ".bias", l.bias);
}

template <typename Fn>
void visit(const std::string& name, LayerNorm& n, Fn& fn) {
  fn(name + ".gain", n.gain);
  fn(name + ".bias", n.bias);
}

template <typename Fn>
void visit(const std::string& name, MultiHeadAttention& a, Fn& fn) {
  visit(name + ".query", a.query, fn);
  visit(name + ".key", a.key, fn);
  visit(name + ".value", a.value, fn);
  visit(name + ".output", a.output, fn);
}

template <typename Fn>
void visit(const std::string& name, FeedForward& f, Fn& fn) {
  visit(name + ".hidden", f.hidden, fn);
  visit(name + ".output", f.output, fn);
}

template <typename Fn>
void visit(const std::string& name, EncoderBlock& b, Fn& fn) {
  visit(name + ".self_norm", b.self_norm, fn);
  visit(name + ".self_attention", b.self_attention, fn);
  visit(name + ".ff_norm", b.ff_norm, fn);
  visit(name + ".ff", b.ff, fn);
}

template <typename Fn>
void visit(const std::string& name, DecoderBlock& b, Fn& fn) {
  visit(name + ".self_norm", b.self_norm, fn);
  visit(name + ".self_attention", b.self_attention, fn);
  if (b.has_cross) {
    visit(name + ".cross_norm", b.cross_norm, fn);
    visit(name + ".cross_attention", b.cross_attention, fn);
  }
  visit(name + ".ff_norm", b.ff_norm, fn);
  visit(name + ".ff", b.ff, fn);
}

}  // namespace detail

template <typename Fn>
void TranslationModel::visit_parameters(Fn&& fn) {
  fn(std::string("embedding"), embedding_);
  for (std::size_t i = 0; i < encoder_.size(); ++i) detail::visit("encoder." + std::to_string(i), encoder_[i], fn);
  detail::visit("encoder.norm", encoder_norm_, fn);
  for (std::size_t i = 0; i < decoder_.size(); ++i) detail::visit("decoder." + std::to_string(i), decoder_[i], fn);
  detail::visit("decoder.norm", decoder_norm_, fn);
  detail::visit("projection", projection_, fn);
}

template <typename Fn>
void LanguageModel::visit_parameters(Fn&& fn) {
  fn(std::string("embedding"), embedding_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) detail::visit("decoder." + std::to_string(i), blocks_[i], fn);
  detail::visit("decoder.norm", norm_, fn);
  detail::visit("projection", projection_, fn);
}

// Per-position distributions p(x_t | x_<t) for each sentence of a packed batch
// of one-hot rows (no BOS, rows in sentence order). One output row per input row.
Tensor lm_distributions(const LanguageModel& lm, const Tensor& sentence_rows, const SegmentLayout& layout);

// FNV-1a hash over names and value bytes, in list order.
std::uint64_t parameter_checksum(const NamedParameters& params);

// Number of distinct parameter entries across the given lists.
std::size_t unique_parameter_count(std::span<const NamedParameters> lists);

// Parameter helpers shared with the trainer.
Tensor attention_block(const MultiHeadAttention& attn, const Tensor& queries_in, const Tensor& keys_in,
                       const AttentionMask& mask);
Tensor feed_forward(const FeedForward& ff, const Tensor& x, const ForwardMode& mode, real dropout_rate);

}  // namespace e2ebt
