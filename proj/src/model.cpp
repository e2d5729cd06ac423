#include "e2ebt/model.hpp"

#include "e2ebt/vocab.hpp"

#include <cmath>
#include <cstring>
#include <unordered_set>

namespace e2ebt {

void ModelDims::validate() const {
  if (vocab < Vocabulary::reserved + 1) throw std::invalid_argument("model vocab must exceed the reserved ids");
  if (width < 1 || heads < 1 || width % heads != 0) throw std::invalid_argument("model width must be a multiple of heads");
  if (ffn < 1) throw std::invalid_argument("ffn width must be positive");
  if (encoder_layers < 0 || decoder_layers < 1) throw std::invalid_argument("bad layer counts");
  if (!(dropout >= 0 && dropout < 1)) throw std::invalid_argument("dropout must lie in [0, 1)");
  if (max_positions < 1) throw std::invalid_argument("max_positions must be positive");
}

SegmentLayout SegmentLayout::from_lengths(std::span<const int> lengths) {
  SegmentLayout layout;
  int at = 0;
  for (int n : lengths) {
    if (n < 1) throw std::invalid_argument("empty sentence in batch");
    layout.offsets.push_back(at);
    layout.lengths.push_back(n);
    at += n;
  }
  return layout;
}

std::vector<int> SegmentLayout::positions() const {
  std::vector<int> pos;
  pos.reserve(static_cast<std::size_t>(total()));
  for (int n : lengths)
    for (int t = 0; t < n; ++t) pos.push_back(t);
  return pos;
}

AttentionMask self_attention_mask(const SegmentLayout& layout, bool causal) {
  AttentionMask mask;
  mask.keys.resize(static_cast<std::size_t>(layout.total()));
  for (int s = 0; s < layout.count(); ++s) {
    const int off = layout.offsets[s];
    const int n = layout.lengths[s];
    for (int t = 0; t < n; ++t) {
      auto& keys = mask.keys[static_cast<std::size_t>(off + t)];
      const int end = causal ? t + 1 : n;
      for (int u = 0; u < end; ++u) keys.push_back(off + u);
    }
  }
  return mask;
}

AttentionMask cross_attention_mask(const SegmentLayout& queries, const SegmentLayout& keys) {
  if (queries.count() != keys.count()) throw ShapeError("cross attention: sentence counts differ");
  AttentionMask mask;
  mask.keys.resize(static_cast<std::size_t>(queries.total()));
  for (int s = 0; s < queries.count(); ++s) {
    std::vector<int> allowed(static_cast<std::size_t>(keys.lengths[s]));
    for (int u = 0; u < keys.lengths[s]; ++u) allowed[static_cast<std::size_t>(u)] = keys.offsets[s] + u;
    for (int t = 0; t < queries.lengths[s]; ++t) mask.keys[static_cast<std::size_t>(queries.offsets[s] + t)] = allowed;
  }
  return mask;
}

TokenInput TokenInput::from_ids(const std::vector<std::vector<int>>& sentences) {
  TokenInput input;
  std::vector<int> lengths;
  for (const auto& s : sentences) {
    lengths.push_back(static_cast<int>(s.size()));
    input.ids.insert(input.ids.end(), s.begin(), s.end());
  }
  input.layout = SegmentLayout::from_lengths(lengths);
  return input;
}

TokenInput TokenInput::from_one_hot(Tensor rows, SegmentLayout layout) {
  if (rows.rows() != layout.total()) throw ShapeError("one-hot rows do not match the layout");
  TokenInput input;
  input.one_hot = std::move(rows);
  input.layout = std::move(layout);
  return input;
}

Matrix positional_table(int positions, int width) {
  Matrix table(positions, width);
  for (int pos = 0; pos < positions; ++pos) {
    for (int i = 0; i < width; i += 2) {
      const real angle = pos / std::pow(10000.0, static_cast<real>(i) / width);
      table(pos, i) = std::sin(angle);
      if (i + 1 < width) table(pos, i + 1) = std::cos(angle);
    }
  }
  return table;
}

namespace {

Tensor init_param(Matrix m) {
  round_to_float(m);
  return Tensor::parameter(std::move(m));
}

Linear make_linear(int in, int out, Rng& rng) {
  const real a = std::sqrt(6.0 / (in + out));
  Matrix w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = (2 * rng.uniform() - 1) * a;
  return {init_param(std::move(w)), init_param(Matrix::Zero(1, out))};
}

LayerNorm make_norm(int width) { return {init_param(Matrix::Ones(1, width)), init_param(Matrix::Zero(1, width))}; }

MultiHeadAttention make_attention(const ModelDims& d, Rng& rng) {
  MultiHeadAttention a;
  a.query = make_linear(d.width, d.width, rng);
  a.key = make_linear(d.width, d.width, rng);
  a.value = make_linear(d.width, d.width, rng);
  a.output = make_linear(d.width, d.width, rng);
  a.heads = d.heads;
  return a;
}

FeedForward make_ff(const ModelDims& d, Rng& rng) {
  return {make_linear(d.width, d.ffn, rng), make_linear(d.ffn, d.width, rng)};
}

EncoderBlock make_encoder_block(const ModelDims& d, Rng& rng) {
  EncoderBlock b;
  b.self_norm = make_norm(d.width);
  b.self_attention = make_attention(d, rng);
  b.ff_norm = make_norm(d.width);
  b.ff = make_ff(d, rng);
  return b;
}

DecoderBlock make_decoder_block(const ModelDims& d, bool cross, Rng& rng) {
  DecoderBlock b;
  b.self_norm = make_norm(d.width);
  b.self_attention = make_attention(d, rng);
  b.has_cross = cross;
  if (cross) {
    b.cross_norm = make_norm(d.width);
    b.cross_attention = make_attention(d, rng);
  }
  b.ff_norm = make_norm(d.width);
  b.ff = make_ff(d, rng);
  return b;
}

Tensor make_embedding(const ModelDims& d, Rng& rng) {
  const real sd = 1.0 / std::sqrt(static_cast<real>(d.width));
  Matrix e(d.vocab, d.width);
  for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = rng.normal(0.0, sd);
  return init_param(std::move(e));
}

Tensor maybe_dropout(const Tensor& x, const ForwardMode& mode, real rate) {
  if (!mode.train || rate == 0) return x;
  if (!mode.rng) throw std::invalid_argument("training forward pass needs an rng");
  return dropout(x, rate, *mode.rng);
}

Tensor embed_tokens(const Tensor& table, const Matrix& positions, const ModelDims& dims, const Tensor& one_hot,
                    std::span<const int> ids, std::span<const int> pos, const ForwardMode& mode) {
  Tensor x;
  if (one_hot.defined()) {
    if (one_hot.cols() != dims.vocab) throw ShapeError("one-hot width differs from the vocabulary");
    x = matmul(one_hot, table);
  } else {
    if (ids.empty()) throw std::invalid_argument("empty input");
    x = embedding(table, ids);
  }
  if (static_cast<Eigen::Index>(pos.size()) != x.rows()) throw ShapeError("position count differs from row count");
  Matrix p(x.rows(), dims.width);
  for (std::size_t i = 0; i < pos.size(); ++i) {
    if (pos[i] < 0 || pos[i] >= dims.max_positions) throw std::out_of_range("position beyond max_positions");
    p.row(static_cast<Eigen::Index>(i)) = positions.row(pos[i]);
  }
  x = add(scale(x, std::sqrt(static_cast<real>(dims.width))), Tensor::constant(std::move(p)));
  return maybe_dropout(x, mode, dims.dropout);
}

Tensor run_decoder_stack(const std::vector<DecoderBlock>& blocks, Tensor x, const AttentionMask& self_mask,
                         const Tensor* memory, const AttentionMask* cross_mask, const ForwardMode& mode,
                         real rate) {
  for (const DecoderBlock& b : blocks) {
    Tensor h = b.self_norm(x);
    x = add(x, maybe_dropout(attention_block(b.self_attention, h, h, self_mask), mode, rate));
    if (b.has_cross) {
      h = b.cross_norm(x);
      x = add(x, maybe_dropout(attention_block(b.cross_attention, h, *memory, *cross_mask), mode, rate));
    }
    x = add(x, maybe_dropout(feed_forward(b.ff, b.ff_norm(x), mode, rate), mode, rate));
  }
  return x;
}

template <typename Model>
NamedParameters collect(const Model& model) {
  NamedParameters out;
  const_cast<Model&>(model).visit_parameters([&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
  return out;
}

std::size_t count(const NamedParameters& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += static_cast<std::size_t>(t.size());
  return n;
}

}  // namespace

Tensor attention_block(const MultiHeadAttention& attn, const Tensor& queries_in, const Tensor& keys_in,
                       const AttentionMask& mask) {
  const Tensor q = attn.query(queries_in);
  const Tensor k = attn.key(keys_in);
  const Tensor v = attn.value(keys_in);
  return attn.output(attention(q, k, v, attn.heads, mask));
}

Tensor feed_forward(const FeedForward& ff, const Tensor& x, const ForwardMode& mode, real dropout_rate) {
  return ff.output(maybe_dropout(relu(ff.hidden(x)), mode, dropout_rate));
}

TranslationModel::TranslationModel(std::string direction, ModelDims dims, Rng& init)
    : direction_(std::move(direction)), dims_(dims) {
  dims_.validate();
  positions_ = positional_table(dims_.max_positions, dims_.width);
  embedding_ = make_embedding(dims_, init);
  for (int i = 0; i < dims_.encoder_layers; ++i) encoder_.push_back(make_encoder_block(dims_, init));
  encoder_norm_ = make_norm(dims_.width);
  for (int i = 0; i < dims_.decoder_layers; ++i) decoder_.push_back(make_decoder_block(dims_, true, init));
  decoder_norm_ = make_norm(dims_.width);
  projection_ = make_linear(dims_.width, dims_.vocab, init);
}

Tensor TranslationModel::embed(const TokenInput& input, const ForwardMode& mode) const {
  const std::vector<int> pos = input.layout.positions();
  return embed_tokens(embedding_, positions_, dims_, input.one_hot, input.ids, pos, mode);
}

Tensor TranslationModel::embed_rows(const Tensor& rows_one_hot, std::span<const int> ids,
                                    std::span<const int> positions, const ForwardMode& mode) const {
  return embed_tokens(embedding_, positions_, dims_, rows_one_hot, ids, positions, mode);
}

Tensor TranslationModel::encode(const TokenInput& source, const ForwardMode& mode) const {
  if (source.layout.total() == 0) throw std::invalid_argument("encode: empty input");
  Tensor x = embed(source, mode);
  const AttentionMask mask = self_attention_mask(source.layout, false);
  for (const EncoderBlock& b : encoder_) {
    const Tensor h = b.self_norm(x);
    x = add(x, maybe_dropout(attention_block(b.self_attention, h, h, mask), mode, dims_.dropout));
    x = add(x, maybe_dropout(feed_forward(b.ff, b.ff_norm(x), mode, dims_.dropout), mode, dims_.dropout));
  }
  return encoder_norm_(x);
}

Tensor TranslationModel::decode(const Tensor& memory, const SegmentLayout& memory_layout, const TokenInput& prefix,
                                const ForwardMode& mode) const {
  if (prefix.layout.total() == 0) throw std::invalid_argument("decode: empty prefix");
  const AttentionMask self_mask = self_attention_mask(prefix.layout, true);
  const AttentionMask cross_mask = cross_attention_mask(prefix.layout, memory_layout);
  const Tensor x = run_decoder_stack(decoder_, embed(prefix, mode), self_mask, &memory, &cross_mask, mode,
                                     dims_.dropout);
  return projection_(decoder_norm_(x));
}

NamedParameters TranslationModel::parameters() const { return collect(*this); }

std::size_t TranslationModel::parameter_count() const { return count(parameters()); }

TranslationModel TranslationModel::clone(bool trainable) const {
  TranslationModel copy = *this;
  copy.visit_parameters([&](const std::string&, Tensor& t) {
    t = trainable ? Tensor::parameter(t.value()) : Tensor::constant(t.value());
  });
  return copy;
}

LanguageModel::LanguageModel(std::string side, ModelDims dims, Rng& init) : side_(std::move(side)), dims_(dims) {
  dims_.validate();
  positions_ = positional_table(dims_.max_positions, dims_.width);
  embedding_ = make_embedding(dims_, init);
  for (int i = 0; i < dims_.decoder_layers; ++i) blocks_.push_back(make_decoder_block(dims_, false, init));
  norm_ = make_norm(dims_.width);
  projection_ = make_linear(dims_.width, dims_.vocab, init);
}

Tensor LanguageModel::logits(const TokenInput& input, const ForwardMode& mode) const {
  if (input.layout.total() == 0) throw std::invalid_argument("language model: empty input");
  const std::vector<int> pos = input.layout.positions();
  const Tensor x0 = embed_tokens(embedding_, positions_, dims_, input.one_hot, input.ids, pos, mode);
  const AttentionMask mask = self_attention_mask(input.layout, true);
  const Tensor x = run_decoder_stack(blocks_, x0, mask, nullptr, nullptr, mode, dims_.dropout);
  return projection_(norm_(x));
}

void LanguageModel::freeze() {
  visit_parameters([](const std::string&, Tensor& t) { t.set_requires_grad(false); });
  frozen_ = true;
}

NamedParameters LanguageModel::parameters() const { return collect(*this); }

std::size_t LanguageModel::parameter_count() const { return count(parameters()); }

Tensor lm_distributions(const LanguageModel& lm, const Tensor& sentence_rows, const SegmentLayout& layout) {
  if (sentence_rows.rows() != layout.total()) throw ShapeError("lm_distributions: rows do not match the layout");
  Matrix bos = Matrix::Zero(1, sentence_rows.cols());
  bos(0, Vocabulary::bos) = 1.0;
  const Tensor parts[] = {sentence_rows, Tensor::constant(std::move(bos))};
  const Tensor all = concat_rows(parts);
  const int bos_row = static_cast<int>(sentence_rows.rows());
  // Shift right: row t of each sentence sees BOS, x_0 .. x_{t-1}.
  std::vector<int> select;
  select.reserve(static_cast<std::size_t>(layout.total()));
  for (int s = 0; s < layout.count(); ++s) {
    select.push_back(bos_row);
    for (int t = 0; t + 1 < layout.lengths[s]; ++t) select.push_back(layout.offsets[s] + t);
  }
  const TokenInput input = TokenInput::from_one_hot(gather_rows(all, select), layout);
  return softmax(lm.logits(input, ForwardMode::inference()));
}

std::uint64_t parameter_checksum(const NamedParameters& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : params) {
    mix(name.data(), name.size());
    mix(t.value().data(), static_cast<std::size_t>(t.size()) * sizeof(real));
  }
  return h;
}

std::size_t unique_parameter_count(std::span<const NamedParameters> lists) {
  std::unordered_set<const Node*> seen;
  std::size_t n = 0;
  for (const auto& list : lists)
    for (const auto& [name, t] : list)
      if (seen.insert(t.node()).second) n += static_cast<std::size_t>(t.size());
  return n;
}

}  // namespace e2ebt
