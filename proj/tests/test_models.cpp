#include "doctest.h"

#include "e2ebt/decode.hpp"
#include "e2ebt/gradcheck.hpp"
#include "e2ebt/vocab.hpp"

#include <cmath>
#include <functional>

using namespace e2ebt;

namespace {

ModelDims tiny_dims(int vocab = 12) {
  ModelDims d;
  d.vocab = vocab;
  d.width = 8;
  d.heads = 2;
  d.ffn = 16;
  d.encoder_layers = 2;
  d.decoder_layers = 2;
  d.dropout = 0.0;
  d.max_positions = 32;
  return d;
}

real max_abs_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("vocabulary reserves special ids and round-trips") {
  Vocabulary v({"a", "b", "<s>"});
  CHECK(v.size() == 6);
  CHECK(v.id("<pad>") == Vocabulary::pad);
  CHECK(v.id("</s>") == Vocabulary::eos);
  CHECK(v.id("zzz") == Vocabulary::unk);
  CHECK(v.encode("a  b zzz") == std::vector<int>{4, 5, Vocabulary::unk});
  CHECK(v.decode({Vocabulary::bos, 4, 5, Vocabulary::eos, 4}) == "a b");
}

TEST_CASE("encode accepts one-hot rows with the same result as ids") {
  Rng init(1);
  TranslationModel m("st", tiny_dims(), init);
  const std::vector<std::vector<int>> sents{{4, 5, 6, 2}, {7, 2}};
  const TokenInput ids = TokenInput::from_ids(sents);
  const TokenInput hot = TokenInput::from_one_hot(Tensor::constant(one_hot_rows(ids.ids, 12)), ids.layout);
  const Tensor a = m.encode(ids, ForwardMode::inference());
  const Tensor b = m.encode(hot, ForwardMode::inference());
  CHECK(a.rows() == 6);
  CHECK(a.cols() == 8);
  CHECK(max_abs_diff(a.value(), b.value()) <= 1e-12);
  CHECK_THROWS(m.encode(TokenInput{}, ForwardMode::inference()));
}

TEST_CASE("packed sentences do not see each other") {
  Rng init(2);
  TranslationModel m("st", tiny_dims(), init);
  const Tensor both = m.encode(TokenInput::from_ids({{4, 5, 2}, {6, 7, 8, 2}}), ForwardMode::inference());
  const Tensor first = m.encode(TokenInput::from_ids({{4, 5, 2}}), ForwardMode::inference());
  const Tensor second = m.encode(TokenInput::from_ids({{6, 7, 8, 2}}), ForwardMode::inference());
  CHECK(max_abs_diff(both.value().topRows(3), first.value()) <= 1e-12);
  CHECK(max_abs_diff(both.value().bottomRows(4), second.value()) <= 1e-12);
}

TEST_CASE("gradient reaches one-hot input rows and matches finite differences") {
  Rng init(3);
  TranslationModel m("st", tiny_dims(), init);
  const Matrix x0 = one_hot_rows(std::vector<int>{4, 9, 2}, 12);
  Rng prng(4);
  Matrix proj(3, 8);
  for (Eigen::Index i = 0; i < proj.size(); ++i) proj.data()[i] = prng.uniform() - 0.5;
  const SegmentLayout layout = SegmentLayout::from_lengths(std::vector<int>{3});
  const ScalarFn f = [&](const std::vector<Tensor>& in) {
    return sum(mul(m.encode(TokenInput::from_one_hot(in[0], layout), ForwardMode::inference()),
                   Tensor::constant(proj)));
  };
  Tensor x = Tensor::parameter(x0);
  backward(f({x}));
  CHECK(x.grad().cwiseAbs().maxCoeff() > 0);
  CHECK(gradient_relative_error(f, {Tensor::parameter(x0)}) <= 1e-4);
}

TEST_CASE("decoder logits are causal, deterministic and vocabulary-sized") {
  Rng init(5);
  TranslationModel m("st", tiny_dims(), init);
  const TokenInput src = TokenInput::from_ids({{4, 5, 6, 2}});
  const Tensor memory = m.encode(src, ForwardMode::inference());
  const Tensor a = m.decode(memory, src.layout, TokenInput::from_ids({{1, 7, 8, 9}}), ForwardMode::inference());
  const Tensor b = m.decode(memory, src.layout, TokenInput::from_ids({{1, 7, 10, 4}}), ForwardMode::inference());
  CHECK(a.cols() == 12);
  CHECK(max_abs_diff(a.value().topRows(2), b.value().topRows(2)) == 0.0);
  CHECK(max_abs_diff(a.value().row(2), b.value().row(2)) > 0.0);
  const Tensor again = m.decode(memory, src.layout, TokenInput::from_ids({{1, 7, 8, 9}}), ForwardMode::inference());
  CHECK(max_abs_diff(a.value(), again.value()) == 0.0);
  const Tensor step = decode_step(m, memory, src.layout, TokenInput::from_ids({{1, 7}}));
  CHECK(step.rows() == 1);
  CHECK(max_abs_diff(step.value(), a.value().row(1)) <= 1e-12);
  CHECK_THROWS(decode_step(m, memory, src.layout, TokenInput::from_ids({{7, 7}})));
}

TEST_CASE("incremental decoding matches full recomputation") {
  Rng init(6);
  TranslationModel m("st", tiny_dims(), init);
  const TokenInput src = TokenInput::from_ids({{4, 5, 6, 2}, {7, 8, 2}});
  const Tensor memory = m.encode(src, ForwardMode::inference());
  const std::vector<std::vector<int>> prefixes{{1, 9, 10, 11}, {1, 4, 4, 5}};
  const Tensor full = m.decode(memory, src.layout, TokenInput::from_ids(prefixes), ForwardMode::inference());
  IncrementalDecoder dec(m, memory, src.layout);
  std::vector<DecodeStream> streams(2);
  streams[1].memory_index = 1;
  for (int t = 0; t < 4; ++t) {
    const std::vector<int> feed{prefixes[0][t], prefixes[1][t]};
    const Tensor logits = dec.step(streams, Tensor(), feed);
    CHECK(max_abs_diff(logits.value().row(0), full.value().row(t)) <= 1e-10);
    CHECK(max_abs_diff(logits.value().row(1), full.value().row(4 + t)) <= 1e-10);
  }
}

TEST_CASE("latent inference at lambda 0 with greedy sampling equals greedy decoding") {
  Rng init(7);
  TranslationModel m("ts", tiny_dims(), init);
  const TokenInput src = TokenInput::from_ids({{4, 5, 6, 2}, {7, 2}, {9, 9, 9, 10, 2}});
  LatentOptions opt;
  opt.lambda = 0;
  Rng rng(1);
  const LatentBatch latent = infer_latent(m, src, opt, rng);
  std::vector<int> max_len;
  for (int n : src.layout.lengths) max_len.push_back(opt.max_length(n));
  CHECK(latent.token_ids == greedy_decode(m, src, max_len));
  CHECK(latent.z.rows() == latent.layout.total());
  for (Eigen::Index i = 0; i < latent.z.rows(); ++i) {
    CHECK(latent.z.value().row(i).sum() == 1.0);
    CHECK(latent.z.value().row(i).maxCoeff() == 1.0);
    CHECK(std::abs(latent.q.value().row(i).sum() - 1.0) < 1e-9);
  }
  for (int s = 0; s < 3; ++s) {
    const auto& ids = latent.token_ids[s];
    CHECK(static_cast<int>(ids.size()) <= max_len[s]);
    if (static_cast<int>(ids.size()) < max_len[s]) CHECK(ids.back() == Vocabulary::eos);
  }
}

TEST_CASE("softmax count over a free-running decode: one per CRT token, two per GST token") {
  Rng init(8);
  TranslationModel m("ts", tiny_dims(), init);
  const TokenInput src = TokenInput::from_ids({{4, 5, 6, 2}, {7, 2}});
  LatentOptions opt;
  opt.strategy = SamplingStrategy::stochastic();
  Rng rng(2);
  SoftmaxCounter crt_counter;
  const LatentBatch a = infer_latent(m, src, opt, rng);
  CHECK(crt_counter.count() == static_cast<std::uint64_t>(a.layout.total()));
  opt.method = LatentMethod::gst;
  SoftmaxCounter gst_counter;
  const LatentBatch b = infer_latent(m, src, opt, rng);
  CHECK(gst_counter.count() == 2 * static_cast<std::uint64_t>(b.layout.total()));
}

TEST_CASE("reconstruction gradient reaches the inference model only when lambda > 0") {
  Rng init(9);
  TranslationModel inference("ts", tiny_dims(), init);
  TranslationModel generator("st", tiny_dims(), init);
  const TokenInput src = TokenInput::from_ids({{4, 5, 6, 2}, {7, 8, 2}});
  for (real lambda : {0.0, 0.01}) {
    for (auto& [name, p] : inference.parameters()) p.zero_grad();
    LatentOptions opt;
    opt.lambda = lambda;
    Rng rng(3);
    const LatentBatch latent = infer_latent(inference, src, opt, rng);
    const Tensor memory = generator.encode(latent.as_input(), ForwardMode::inference());
    const Tensor loss = mean(exp(scale(memory, 0.1)));
    backward(loss);
    real total = 0;
    for (const auto& [name, p] : inference.parameters()) total += p.grad().cwiseAbs().sum();
    if (lambda == 0) {
      CHECK(total == 0.0);
    } else {
      CHECK(total > 0.0);
    }
  }
}

namespace {

// Three tokens, id 2 is EOS; log-probabilities depend on the last token and the length.
class ToyBeamModel : public BeamModel {
 public:
  int vocab() const override { return 3; }
  Matrix next_log_probs(const std::vector<std::vector<int>>& prefixes) override {
    Matrix out(static_cast<Eigen::Index>(prefixes.size()), 3);
    for (std::size_t i = 0; i < prefixes.size(); ++i) {
      const auto& p = prefixes[i];
      const int last = p.empty() ? 3 : p.back();
      RowVector logits(3);
      logits << std::sin(1.3 * last + 0.7 * p.size()), std::cos(0.9 * last - 0.4 * p.size()),
          0.5 * std::sin(2.1 * last + 1.1 * p.size()) - 0.3;
      const real lse = std::log(logits.array().exp().sum());
      out.row(static_cast<Eigen::Index>(i)) = logits.array() - lse;
    }
    return out;
  }
};

void enumerate(ToyBeamModel& m, std::vector<int>& prefix, real lp, int max_len, BeamHypothesis& best) {
  const Matrix next = m.next_log_probs({prefix});
  for (int tok = 0; tok < 3; ++tok) {
    prefix.push_back(tok);
    const real score = lp + next(0, tok);
    if (tok == Vocabulary::eos || static_cast<int>(prefix.size()) == max_len) {
      BeamHypothesis h{prefix, score};
      if (best.tokens.empty() || h.score() > best.score()) best = h;
    } else {
      enumerate(m, prefix, score, max_len, best);
    }
    prefix.pop_back();
  }
}

}  // namespace

TEST_CASE("beam search: width 1 is greedy, wider beams dominate greedy, exhaustive oracle agrees") {
  ToyBeamModel m;
  const BeamHypothesis greedy = greedy_search(m, 4);
  const BeamHypothesis one = beam_search(m, 1, 4);
  CHECK(one.tokens == greedy.tokens);
  for (int w : {2, 3, 5}) CHECK(beam_search(m, w, 4).score() >= greedy.score() - 1e-15);
  BeamHypothesis best;
  std::vector<int> prefix;
  enumerate(m, prefix, 0.0, 4, best);
  const BeamHypothesis wide = beam_search(m, 16, 4);
  CHECK(wide.tokens == best.tokens);
  CHECK(wide.score() == doctest::Approx(best.score()).epsilon(1e-12));
  CHECK_THROWS(beam_search(m, 0, 4));
}

TEST_CASE("translation beam model agrees with greedy decoding at width 1") {
  Rng init(10);
  TranslationModel m("st", tiny_dims(), init);
  const std::vector<int> src{4, 5, 6, 2};
  TranslationBeamModel bm(m, src);
  const BeamHypothesis h = beam_search(bm, 1, 8);
  const std::vector<int> max_len{8};
  CHECK(h.tokens == greedy_decode(m, TokenInput::from_ids({src}), max_len)[0]);
  TranslationBeamModel bm5(m, src);
  CHECK(beam_search(bm5, 5, 8).score() >= h.score() - 1e-12);
}

TEST_CASE("language model distributions: one normalized row per position") {
  Rng init(11);
  LanguageModel lm("src", tiny_dims(), init);
  lm.freeze();
  for (const auto& [name, p] : lm.parameters()) CHECK_FALSE(p.requires_grad());
  const std::vector<int> ids{4, 5, 6, 2, 7, 2};
  const SegmentLayout layout = SegmentLayout::from_lengths(std::vector<int>{4, 2});
  const Tensor d = lm_distributions(lm, Tensor::constant(one_hot_rows(ids, 12)), layout);
  CHECK(d.rows() == 6);
  for (Eigen::Index i = 0; i < d.rows(); ++i) CHECK(std::abs(d.value().row(i).sum() - 1.0) < 1e-6);
  // Row 0 of each sentence is conditioned on BOS alone, so both agree.
  CHECK(max_abs_diff(d.value().row(0), d.value().row(4)) <= 1e-12);
  // Teacher forcing: same as running the LM on the shifted ids.
  const Tensor direct = softmax(lm.logits(TokenInput::from_ids({{1, 4, 5, 6}, {1, 7}}), ForwardMode::inference()));
  CHECK(max_abs_diff(d.value(), direct.value()) <= 1e-12);
}

TEST_CASE("clone copies values into fresh storage") {
  Rng init(12);
  TranslationModel m("st", tiny_dims(), init);
  TranslationModel frozen = m.clone(false);
  CHECK(parameter_checksum(m.parameters()) == parameter_checksum(frozen.parameters()));
  for (const auto& [name, p] : frozen.parameters()) CHECK_FALSE(p.requires_grad());
  m.parameters().front().second.mutable_value()(0, 0) += 1.0;
  CHECK(parameter_checksum(m.parameters()) != parameter_checksum(frozen.parameters()));
  CHECK(m.parameter_count() == frozen.parameter_count());
  const NamedParameters lists[] = {m.parameters(), frozen.parameters()};
  CHECK(unique_parameter_count(lists) == 2 * m.parameter_count());
}

TEST_CASE("parameters start on the single-precision grid") {
  Rng init(13);
  TranslationModel m("st", tiny_dims(), init);
  for (const auto& [name, p] : m.parameters()) {
    const Matrix& v = p.value();
    for (Eigen::Index i = 0; i < v.size(); ++i) CHECK(v.data()[i] == static_cast<real>(static_cast<float>(v.data()[i])));
  }
}
