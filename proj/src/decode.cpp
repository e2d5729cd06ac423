#include "e2ebt/decode.hpp"

#include "e2ebt/vocab.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace e2ebt {

IncrementalDecoder::IncrementalDecoder(const TranslationModel& model, Tensor memory, SegmentLayout memory_layout,
                                       ForwardMode mode)
    : model_(&model), memory_(std::move(memory)), memory_layout_(std::move(memory_layout)), mode_(mode) {
  for (const DecoderBlock& b : model.decoder_blocks()) {
    cross_keys_.push_back(b.cross_attention.key(memory_));
    cross_values_.push_back(b.cross_attention.value(memory_));
  }
  self_keys_.resize(model.decoder_blocks().size());
  self_values_.resize(model.decoder_blocks().size());
}

namespace {

Tensor append_rows(const Tensor& cache, const Tensor& rows) {
  if (!cache.defined()) return rows;
  const Tensor parts[] = {cache, rows};
  return concat_rows(parts);
}

Tensor train_dropout(const Tensor& x, const ForwardMode& mode, real rate) {
  if (!mode.train || rate == 0) return x;
  return dropout(x, rate, *mode.rng);
}

}  // namespace

Tensor IncrementalDecoder::step(std::span<DecodeStream> streams, const Tensor& one_hot, std::span<const int> ids) {
  if (streams.empty()) throw std::invalid_argument("decoder step with no streams");
  const int n = static_cast<int>(streams.size());
  std::vector<int> positions(streams.size());
  for (int i = 0; i < n; ++i) positions[i] = streams[i].position();
  const real rate = model_->dims().dropout;

  Tensor x = model_->embed_rows(one_hot, ids, positions, mode_);
  AttentionMask self_mask, cross_mask;
  self_mask.keys.resize(streams.size());
  cross_mask.keys.resize(streams.size());
  for (int i = 0; i < n; ++i) {
    self_mask.keys[i] = streams[i].history;
    self_mask.keys[i].push_back(cached_rows_ + i);
    const int m = streams[i].memory_index;
    if (m < 0 || m >= memory_layout_.count()) throw std::out_of_range("decode stream reads a missing sentence");
    auto& keys = cross_mask.keys[i];
    keys.resize(static_cast<std::size_t>(memory_layout_.lengths[m]));
    std::iota(keys.begin(), keys.end(), memory_layout_.offsets[m]);
  }

  const auto& blocks = model_->decoder_blocks();
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const DecoderBlock& block = blocks[b];
    Tensor h = block.self_norm(x);
    self_keys_[b] = append_rows(self_keys_[b], block.self_attention.key(h));
    self_values_[b] = append_rows(self_values_[b], block.self_attention.value(h));
    const Tensor q = block.self_attention.query(h);
    x = add(x, train_dropout(block.self_attention.output(attention(q, self_keys_[b], self_values_[b],
                                                                   block.self_attention.heads, self_mask)),
                             mode_, rate));
    h = block.cross_norm(x);
    const Tensor cq = block.cross_attention.query(h);
    x = add(x, train_dropout(block.cross_attention.output(attention(cq, cross_keys_[b], cross_values_[b],
                                                                    block.cross_attention.heads, cross_mask)),
                             mode_, rate));
    x = add(x, train_dropout(feed_forward(block.ff, block.ff_norm(x), mode_, rate), mode_, rate));
  }
  for (int i = 0; i < n; ++i) streams[i].history.push_back(cached_rows_ + i);
  cached_rows_ += n;
  return model_->projection()(model_->decoder_norm()(x));
}

Tensor decode_step(const TranslationModel& model, const Tensor& memory, const SegmentLayout& memory_layout,
                   const TokenInput& prefix) {
  for (int s = 0; s < prefix.layout.count(); ++s) {
    if (prefix.layout.lengths[s] > model.dims().max_positions) throw std::length_error("prefix longer than max length");
    if (!prefix.is_one_hot() && prefix.ids[static_cast<std::size_t>(prefix.layout.offsets[s])] != Vocabulary::bos)
      throw std::invalid_argument("prefix must begin with BOS");
  }
  const Tensor logits = model.decode(memory, memory_layout, prefix, ForwardMode::inference());
  std::vector<int> last;
  for (int s = 0; s < prefix.layout.count(); ++s) last.push_back(prefix.layout.offsets[s] + prefix.layout.lengths[s] - 1);
  return gather_rows(logits, last);
}

int LatentOptions::max_length(int source_length) const {
  return std::max(1, std::min(source_length + extra_length, length_cap));
}

LatentBatch infer_latent(const TranslationModel& model, const TokenInput& source, const LatentOptions& options,
                         Rng& rng) {
  const int count = source.layout.count();
  const Tensor memory = model.encode(source, ForwardMode::inference());
  IncrementalDecoder decoder(model, memory, source.layout);

  std::vector<int> max_len(static_cast<std::size_t>(count));
  for (int s = 0; s < count; ++s) max_len[s] = options.max_length(source.layout.lengths[s]);

  std::vector<DecodeStream> streams(static_cast<std::size_t>(count));
  std::vector<int> sentence(static_cast<std::size_t>(count));
  for (int s = 0; s < count; ++s) streams[s].memory_index = sentence[s] = s;

  LatentBatch out;
  out.lambda = options.lambda;
  out.token_ids.resize(static_cast<std::size_t>(count));
  out.has_posterior.assign(static_cast<std::size_t>(count), 1);

  std::vector<Tensor> z_steps, q_steps;
  // Global row (over all steps) of every emitted token, per sentence.
  std::vector<std::vector<int>> rows(static_cast<std::size_t>(count));
  int emitted = 0;
  Tensor feed;
  std::vector<int> feed_ids(static_cast<std::size_t>(count), Vocabulary::bos);

  while (!streams.empty()) {
    const Tensor logits = decoder.step(streams, feed, feed.defined() ? std::span<const int>() : std::span<const int>(feed_ids));
    Tensor z, q;
    std::vector<int> ids;
    if (options.method == LatentMethod::crt) {
      q = softmax(logits);
      ids = sample_ids(q.value(), options.strategy, rng);
      z = crt(q, ids, options.lambda).z;
    } else {
      GumbelOutput g = gumbel_softmax(logits, options.tau, rng);
      z = g.z;
      q = g.p;
      ids = std::move(g.token_ids);
    }
    z_steps.push_back(z);
    q_steps.push_back(q);

    std::vector<int> keep;
    for (std::size_t i = 0; i < streams.size(); ++i) {
      const int s = sentence[i];
      out.token_ids[s].push_back(ids[i]);
      rows[s].push_back(emitted + static_cast<int>(i));
      const bool done = ids[i] == Vocabulary::eos || static_cast<int>(out.token_ids[s].size()) >= max_len[s];
      if (!done) keep.push_back(static_cast<int>(i));
    }
    emitted += static_cast<int>(streams.size());
    if (keep.size() != streams.size()) {
      std::vector<DecodeStream> next_streams;
      std::vector<int> next_sentence;
      for (int i : keep) {
        next_streams.push_back(std::move(streams[i]));
        next_sentence.push_back(sentence[i]);
      }
      streams = std::move(next_streams);
      sentence = std::move(next_sentence);
      feed = keep.empty() ? Tensor() : gather_rows(z, keep);
    } else {
      feed = z;
    }
  }

  std::vector<int> order, lengths;
  for (int s = 0; s < count; ++s) {
    order.insert(order.end(), rows[s].begin(), rows[s].end());
    lengths.push_back(static_cast<int>(rows[s].size()));
  }
  out.layout = SegmentLayout::from_lengths(lengths);
  out.z = gather_rows(concat_rows(z_steps), order);
  out.q = gather_rows(concat_rows(q_steps), order);
  return out;
}

LatentBatch latent_from_ids(const std::vector<std::vector<int>>& ids, int vocab) {
  LatentBatch out;
  std::vector<int> flat, lengths;
  for (const auto& s : ids) {
    flat.insert(flat.end(), s.begin(), s.end());
    lengths.push_back(static_cast<int>(s.size()));
  }
  out.layout = SegmentLayout::from_lengths(lengths);
  out.z = Tensor::constant(one_hot_rows(flat, vocab));
  out.q = out.z;
  out.token_ids = ids;
  out.has_posterior.assign(ids.size(), 0);
  return out;
}

LatentBatch concat_latents(const LatentBatch& a, const LatentBatch& b) {
  if (a.count() == 0) return b;
  if (b.count() == 0) return a;
  LatentBatch out;
  const Tensor z[] = {a.z, b.z};
  const Tensor q[] = {a.q, b.q};
  out.z = concat_rows(z);
  out.q = concat_rows(q);
  out.token_ids = a.token_ids;
  out.token_ids.insert(out.token_ids.end(), b.token_ids.begin(), b.token_ids.end());
  std::vector<int> lengths = a.layout.lengths;
  lengths.insert(lengths.end(), b.layout.lengths.begin(), b.layout.lengths.end());
  out.layout = SegmentLayout::from_lengths(lengths);
  out.lambda = a.lambda;
  out.has_posterior = a.has_posterior;
  out.has_posterior.insert(out.has_posterior.end(), b.has_posterior.begin(), b.has_posterior.end());
  return out;
}

std::vector<std::vector<int>> greedy_decode(const TranslationModel& model, const TokenInput& source,
                                            std::span<const int> max_lengths) {
  NoGradGuard guard;
  const int count = source.layout.count();
  if (static_cast<int>(max_lengths.size()) != count) throw std::invalid_argument("one max length per sentence");
  const Tensor memory = model.encode(source, ForwardMode::inference());
  std::vector<std::vector<int>> out(static_cast<std::size_t>(count));
  for (int s = 0; s < count; ++s) {
    const std::vector<int> src_ids(source.ids.begin() + source.layout.offsets[s],
                                   source.ids.begin() + source.layout.offsets[s] + source.layout.lengths[s]);
    const int one[] = {source.layout.lengths[s]};
    const SegmentLayout mem_layout = SegmentLayout::from_lengths(one);
    const Tensor mem = gather_rows(memory, [&] {
      std::vector<int> r(static_cast<std::size_t>(source.layout.lengths[s]));
      std::iota(r.begin(), r.end(), source.layout.offsets[s]);
      return r;
    }());
    std::vector<int> prefix{Vocabulary::bos};
    while (static_cast<int>(out[s].size()) < max_lengths[s]) {
      const Tensor logits = decode_step(model, mem, mem_layout, TokenInput::from_ids({prefix}));
      const Matrix& v = logits.value();
      Eigen::Index best = 0;
      for (Eigen::Index j = 1; j < v.cols(); ++j)
        if (v(0, j) > v(0, best)) best = j;
      out[s].push_back(static_cast<int>(best));
      prefix.push_back(static_cast<int>(best));
      if (best == Vocabulary::eos) break;
    }
  }
  return out;
}

namespace {

Matrix log_probs_checked(BeamModel& model, const std::vector<std::vector<int>>& prefixes) {
  Matrix lp = model.next_log_probs(prefixes);
  if (lp.rows() != static_cast<Eigen::Index>(prefixes.size()) || lp.cols() != model.vocab())
    throw ShapeError("beam model returned a wrongly shaped matrix");
  return lp;
}

}  // namespace

BeamHypothesis greedy_search(BeamModel& model, int max_len) {
  BeamHypothesis h;
  while (static_cast<int>(h.tokens.size()) < max_len) {
    const Matrix lp = log_probs_checked(model, {h.tokens});
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < lp.cols(); ++j)
      if (lp(0, j) > lp(0, best)) best = j;
    h.tokens.push_back(static_cast<int>(best));
    h.log_prob += lp(0, best);
    if (best == Vocabulary::eos) break;
  }
  return h;
}

BeamHypothesis beam_search(BeamModel& model, int width, int max_len) {
  if (width < 1) throw std::invalid_argument("beam width must be >= 1");
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  std::vector<BeamHypothesis> finished;
  std::vector<BeamHypothesis> beam(1);
  for (int step = 0; step < max_len && !beam.empty(); ++step) {
    std::vector<std::vector<int>> prefixes;
    for (const auto& h : beam) prefixes.push_back(h.tokens);
    const Matrix lp = log_probs_checked(model, prefixes);

    struct Candidate {
      real log_prob;
      int parent;
      int token;
    };
    std::vector<Candidate> candidates;
    candidates.reserve(static_cast<std::size_t>(lp.size()));
    for (Eigen::Index i = 0; i < lp.rows(); ++i)
      for (Eigen::Index j = 0; j < lp.cols(); ++j)
        candidates.push_back({beam[i].log_prob + lp(i, j), static_cast<int>(i), static_cast<int>(j)});
    // Stable ordering: higher log-probability first, then earlier parent and lower token.
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.log_prob > b.log_prob; });

    // The top `width` candidates survive; those ending in EOS leave the beam.
    std::vector<BeamHypothesis> next;
    for (std::size_t r = 0; r < candidates.size() && static_cast<int>(r) < width; ++r) {
      const Candidate& c = candidates[r];
      BeamHypothesis h{beam[c.parent].tokens, c.log_prob};
      h.tokens.push_back(c.token);
      if (c.token == Vocabulary::eos) {
        finished.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    beam = std::move(next);
    // Log-probabilities only fall and lengths are capped, so a live hypothesis
    // can never score above log_prob / max_len.
    if (!finished.empty() && !beam.empty()) {
      real best_finished = finished.front().score();
      for (const auto& h : finished) best_finished = std::max(best_finished, h.score());
      real best_live = beam.front().log_prob / max_len;
      for (const auto& h : beam) best_live = std::max(best_live, h.log_prob / max_len);
      if (best_finished >= best_live) beam.clear();
    }
  }
  for (auto& h : beam) finished.push_back(std::move(h));
  finished.push_back(greedy_search(model, max_len));

  const BeamHypothesis* best = &finished.front();
  for (const auto& h : finished)
    if (h.score() > best->score()) best = &h;
  return *best;
}

TranslationBeamModel::TranslationBeamModel(const TranslationModel& model, const std::vector<int>& source)
    : model_(&model),
      decoder_(model, [&] {
        NoGradGuard guard;
        return model.encode(TokenInput::from_ids({source}), ForwardMode::inference());
      }(), SegmentLayout::from_lengths(std::vector<int>{static_cast<int>(source.size())})) {}

Matrix TranslationBeamModel::next_log_probs(const std::vector<std::vector<int>>& prefixes) {
  NoGradGuard guard;
  if (prefixes.empty()) return Matrix(0, vocab());
  const std::size_t length = prefixes.front().size();
  if (length == 0) states_.assign(1, {});
  if (states_.size() < length) throw std::logic_error("beam prefixes must grow one token at a time");
  if (states_.size() == length) states_.emplace_back();

  std::vector<DecodeStream> streams;
  std::vector<int> feed;
  for (const auto& p : prefixes) {
    if (p.size() != length) throw std::invalid_argument("beam prefixes differ in length");
    if (length == 0) {
      streams.push_back(DecodeStream{});
      feed.push_back(Vocabulary::bos);
    } else {
      const std::vector<int> parent(p.begin(), p.end() - 1);
      auto it = states_[length - 1].find(parent);
      if (it == states_[length - 1].end()) throw std::logic_error("beam prefix extends an unknown hypothesis");
      streams.push_back(it->second);
      feed.push_back(p.back());
    }
  }
  const Tensor logits = decoder_.step(streams, Tensor(), feed);
  for (std::size_t i = 0; i < prefixes.size(); ++i) states_[length][prefixes[i]] = streams[i];
  return log_softmax(logits).value();
}

std::vector<int> strip_eos(std::vector<int> ids) {
  auto it = std::find(ids.begin(), ids.end(), Vocabulary::eos);
  ids.erase(it, ids.end());
  return ids;
}

std::vector<std::vector<int>> translate(const TranslationModel& model, const std::vector<std::vector<int>>& sources,
                                        int beam_width) {
  NoGradGuard guard;
  const LatentOptions limits;
  std::vector<std::vector<int>> out;
  out.reserve(sources.size());
  for (const auto& s : sources) {
    std::vector<int> input = s;
    input.push_back(Vocabulary::eos);
    TranslationBeamModel bm(model, input);
    out.push_back(strip_eos(beam_search(bm, beam_width, limits.max_length(static_cast<int>(input.size()))).tokens));
  }
  return out;
}

}  // namespace e2ebt
