#include "doctest.h"

#include "e2ebt/objectives.hpp"

#include <cmath>

using namespace e2ebt;

namespace {

ModelDims small_dims(int vocab = 10) {
  ModelDims d;
  d.vocab = vocab;
  d.width = 8;
  d.heads = 2;
  d.ffn = 16;
  d.encoder_layers = 1;
  d.decoder_layers = 1;
  d.dropout = 0.0;
  d.max_positions = 40;
  return d;
}

Tensor find_param(const NamedParameters& params, const std::string& name) {
  for (const auto& [n, t] : params)
    if (n == name) return t;
  throw std::runtime_error("no parameter " + name);
}

Matrix random_distribution(Rng& rng, Eigen::Index r, Eigen::Index c, real floor = 0.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = floor + rng.uniform();
  for (Eigen::Index i = 0; i < r; ++i) m.row(i) /= m.row(i).sum();
  return m;
}

real kl_oracle(const Matrix& q, const Matrix& p, Eigen::Index row) {
  real total = 0;
  for (Eigen::Index j = 0; j < q.cols(); ++j)
    if (q(row, j) > 0) total += q(row, j) * (std::log(q(row, j)) - std::log(p(row, j)));
  return total;
}

struct Fixture {
  Rng init{7};
  TranslationModel st{"st", small_dims(), init};
  TranslationModel ts{"ts", small_dims(), init};
  LanguageModel lm_source{"src", small_dims(), init};
  LanguageModel lm_target{"tgt", small_dims(), init};
  std::vector<Sentence> src{{4, 5, 6}, {5, 7}}, tgt{{8, 9}, {9, 8, 8, 7}};

  CompositeBatch batch(bool with_mono) {
    CompositeBatch b;
    b.bilingual = {{src[0], tgt[0]}, {src[1], tgt[1]}};
    if (with_mono) {
      Rng rng(3);
      LatentOptions opts;
      opts.lambda = 0.01;
      b.tst.latent = infer_latent(ts, encoder_input(tgt), opts, rng);
      b.tst.targets = tgt;
      b.sts.latent = infer_latent(st, encoder_input(src), opts, rng);
      b.sts.targets = src;
    }
    return b;
  }
  CompositeModels models() const { return {{&st, nullptr}, {&ts, nullptr}, &lm_source, &lm_target}; }
};

}  // namespace

TEST_CASE("a model with zero output layer scores every token at ln|V|") {
  Rng init(1);
  TranslationModel m("st", small_dims(10), init);
  find_param(m.parameters(), "projection.weight").mutable_value().setZero();
  find_param(m.parameters(), "projection.bias").mutable_value().setZero();
  const Tensor loss = bilingual_loss(m, {{4, 5}, {6}}, {{7, 8, 9}, {4}}, ForwardMode::inference());
  CHECK(loss.item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("token nll on a hand-worked two-token case") {
  Matrix logits(2, 3);
  logits << 0.0, std::log(3.0), 0.0,  //
      0.0, 0.0, std::log(2.0);
  // Row 0 targets id 1: p = 3/5. Row 1 targets id 2: p = 2/4.
  const Tensor loss = token_nll(Tensor::constant(logits), std::vector<int>{1, 2});
  CHECK(loss.item() == doctest::Approx(-(std::log(0.6) + std::log(0.5)) / 2).epsilon(1e-12));
  // PAD targets do not count.
  const Tensor padded = token_nll(Tensor::constant(logits), std::vector<int>{1, Vocabulary::pad});
  CHECK(padded.item() == doctest::Approx(-std::log(0.6)).epsilon(1e-12));
  CHECK_THROWS(token_nll(Tensor::constant(logits), std::vector<int>{Vocabulary::pad, Vocabulary::pad}));
}

TEST_CASE("categorical KL worked examples") {
  Matrix q(1, 2), p(1, 2);
  q << 1.0, 0.0;
  p << 0.5, 0.5;
  const std::vector<real> w{1.0};
  CHECK(categorical_kl(Tensor::constant(q), Tensor::constant(p), w).item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));

  Rng rng(11);
  const Matrix q5 = random_distribution(rng, 5, 8), p5 = random_distribution(rng, 5, 8);
  const std::vector<real> w5(5, 0.2);
  real direct = 0;
  for (Eigen::Index i = 0; i < 5; ++i) direct += 0.2 * kl_oracle(q5, p5, i);
  CHECK(std::abs(categorical_kl(Tensor::constant(q5), Tensor::constant(p5), w5).item() - direct) <= 1e-10);
}

TEST_CASE("property: KL matches direct summation, is non-negative and vanishes only at equality") {
  Rng rng(12);
  const std::vector<real> w{1.0};
  for (int trial = 0; trial < 1000; ++trial) {
    const Eigen::Index dim = 2 + static_cast<Eigen::Index>(rng.below(30));
    const Matrix q = random_distribution(rng, 1, dim, 1e-3), p = random_distribution(rng, 1, dim, 1e-3);
    const real kl = categorical_kl(Tensor::constant(q), Tensor::constant(p), w).item();
    CHECK(std::abs(kl - kl_oracle(q, p, 0)) <= 1e-10);
    CHECK(kl > 0);
    CHECK(std::abs(categorical_kl(Tensor::constant(q), Tensor::constant(q), w).item()) <= 1e-15);
  }
}

TEST_CASE("KL gradients match their closed forms") {
  Rng rng(13);
  const Matrix qv = random_distribution(rng, 2, 4, 0.1), pv = random_distribution(rng, 2, 4, 0.1);
  Tensor q = Tensor::parameter(qv);
  Tensor p = Tensor::parameter(pv);
  backward(categorical_kl(q, p, std::vector<real>{0.5, 0.25}));
  for (Eigen::Index i = 0; i < 2; ++i) {
    const real w = i == 0 ? 0.5 : 0.25;
    for (Eigen::Index j = 0; j < 4; ++j) {
      CHECK(q.grad()(i, j) == doctest::Approx(w * (std::log(qv(i, j) / pv(i, j)) + 1)).epsilon(1e-12));
      CHECK(p.grad()(i, j) == doctest::Approx(-w * qv(i, j) / pv(i, j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("the language-model prior receives no gradient from the KL term") {
  Fixture f;
  Rng rng(2);
  LatentOptions opts;
  opts.lambda = 0.5;
  const LatentBatch latent = infer_latent(f.ts, encoder_input({{8, 9, 7}}), opts, rng);
  backward(kl_to_prior(latent, f.lm_source));
  for (const auto& [n, t] : f.lm_source.parameters()) CHECK(t.grad().cwiseAbs().maxCoeff() == 0);
  real norm = 0;
  for (const auto& [n, t] : f.ts.parameters()) norm += t.grad().squaredNorm();
  CHECK(norm > 0);
}

TEST_CASE("cached latents carry no KL weight") {
  Fixture f;
  const LatentBatch cached = latent_from_ids({{4, 5, 2}}, 10);
  CHECK(kl_to_prior(cached, f.lm_source).item() == 0.0);
  Rng rng(1);
  const LatentBatch fresh = infer_latent(f.ts, encoder_input({{8, 9}}), LatentOptions{}, rng);
  const real alone = kl_to_prior(fresh, f.lm_source).item();
  CHECK(kl_to_prior(concat_latents(fresh, cached), f.lm_source).item() == doctest::Approx(alone).epsilon(1e-12));
}

TEST_CASE("composite total is the weighted sum of its parts") {
  Fixture f;
  const CompositeBatch b = f.batch(true);
  for (real alpha : {0.0, 0.0025, 0.3}) {
    const LossReport r = composite_losses(b, f.models(), alpha, 2 * alpha, ForwardMode::inference()).report;
    const real expected = r.bilingual_st + r.recon_tst + alpha * r.kl_tst + r.bilingual_ts + r.recon_sts + 2 * alpha * r.kl_sts;
    CHECK(std::abs(r.total - expected) <= 1e-10);
    CHECK(r.finite());
    CHECK(r.kl_tst > 0);
    CHECK(r.recon_sts > 0);
    CHECK(r.bilingual_st == doctest::Approx(bilingual_loss(f.st, f.src, f.tgt, ForwardMode::inference()).item()).epsilon(1e-14));
  }
}

TEST_CASE("composite without monolingual sentences reduces to the bilingual losses") {
  Fixture f;
  const LossReport r = composite_losses(f.batch(false), f.models(), 0.0025, 0.0025, ForwardMode::inference()).report;
  CHECK(r.recon_tst == 0.0);
  CHECK(r.kl_tst == 0.0);
  CHECK(r.recon_sts == 0.0);
  CHECK(r.kl_sts == 0.0);
  CHECK(std::abs(r.total - (r.bilingual_st + r.bilingual_ts)) <= 1e-12);
  CHECK_THROWS(composite_losses(CompositeBatch{}, f.models(), 0, 0, ForwardMode::inference()));
  CHECK_THROWS(composite_losses(f.batch(false), f.models(), -1.0, 0, ForwardMode::inference()));
}

TEST_CASE("frozen evaluating generator partitions the gradient") {
  Fixture f;
  const TranslationModel frozen = f.st.clone(false);
  // Make the learning generator differ from its snapshot.
  for (const auto& [name, t] : f.st.parameters()) {
    Tensor h = t;
    h.mutable_value().array() += 0.01;
  }
  LatentOptions opts;
  opts.lambda = 0.5;
  const std::vector<Sentence> targets{{8, 9}, {9, 8, 8, 7}};

  auto grads = [&](const NamedParameters& params) {
    std::vector<Matrix> out;
    for (const auto& [n, t] : params) out.push_back(t.grad());
    return out;
  };
  auto zero = [&] {
    for (const auto* ps : {&f.st, &f.ts})
      for (const auto& [n, t] : ps->parameters()) Tensor(t).zero_grad();
  };

  // Routed loss.
  Rng rng1(5);
  LatentBatch latent = infer_latent(f.ts, encoder_input(targets), opts, rng1);
  const Tensor routed = generator_reconstruction({&f.st, &frozen}, latent, targets, ForwardMode::inference());
  backward(routed);
  const auto st_routed = grads(f.st.parameters());
  const auto ts_routed = grads(f.ts.parameters());
  zero();

  // The learning generator sees only the detached latent.
  LatentBatch detached = latent;
  detached.z = detach(latent.z);
  const Tensor learn = reconstruction_loss(f.st, detached, targets, ForwardMode::inference());
  CHECK(routed.item() == learn.item());
  backward(learn);
  const auto st_expected = grads(f.st.parameters());
  zero();

  // The inference model's gradient equals that of the frozen copy's loss.
  Rng rng2(5);
  LatentBatch again = infer_latent(f.ts, encoder_input(targets), opts, rng2);
  backward(reconstruction_loss(frozen, again, targets, ForwardMode::inference()));
  const auto ts_expected = grads(f.ts.parameters());
  zero();

  for (std::size_t i = 0; i < st_routed.size(); ++i) CHECK((st_routed[i] - st_expected[i]).cwiseAbs().maxCoeff() <= 1e-14);
  real ts_norm = 0;
  for (std::size_t i = 0; i < ts_routed.size(); ++i) {
    CHECK((ts_routed[i] - ts_expected[i]).cwiseAbs().maxCoeff() <= 1e-14);
    ts_norm += ts_routed[i].squaredNorm();
  }
  CHECK(ts_norm > 0);
  for (const auto& [n, t] : frozen.parameters()) CHECK_FALSE(t.requires_grad());
}
