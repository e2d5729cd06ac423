#include "doctest.h"

#include "e2ebt/trainer.hpp"

#include <cmath>
#include <filesystem>

using namespace e2ebt;

namespace {

constexpr int kVocab = 14;

ModelDims tiny_dims() {
  ModelDims d;
  d.vocab = kVocab;
  d.width = 8;
  d.heads = 2;
  d.ffn = 16;
  d.encoder_layers = 1;
  d.decoder_layers = 1;
  d.dropout = 0.1;
  d.max_positions = 40;
  return d;
}

BTModels tiny_models(std::uint64_t seed = 3) {
  Rng init(seed);
  return {TranslationModel("st", tiny_dims(), init), TranslationModel("ts", tiny_dims(), init),
          LanguageModel("src", tiny_dims(), init), LanguageModel("tgt", tiny_dims(), init)};
}

// Source words 4..8, target words 9..13.
Corpus tiny_corpus() {
  Corpus c;
  Rng rng(99);
  auto sentence = [&](int base) {
    Sentence s;
    const int n = 2 + static_cast<int>(rng.below(4));
    for (int i = 0; i < n; ++i) s.push_back(base + static_cast<int>(rng.below(5)));
    return s;
  };
  for (int i = 0; i < 20; ++i) c.bilingual.push_back({sentence(4), sentence(9)});
  for (int i = 0; i < 30; ++i) c.mono_source.push_back(sentence(4));
  for (int i = 0; i < 30; ++i) c.mono_target.push_back(sentence(9));
  return c;
}

BTConfig tiny_config() {
  BTConfig c;
  c.batch_bilingual = 3;
  c.batch_monolingual = 4;
  c.warmup_iters = 10;
  c.lr = 0.003;
  c.as_total_iters = 40;
  c.max_iters = 40;
  return c;
}

std::vector<Matrix> values(const NamedParameters& params) {
  std::vector<Matrix> out;
  for (const auto& [n, t] : params) out.push_back(t.value());
  return out;
}

}  // namespace

TEST_CASE("as_ratio interpolates linearly and then holds") {
  BTConfig c;
  CHECK(as_ratio(0, c) == 0.0);
  CHECK(as_ratio(150000, c) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(as_ratio(300000, c) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(as_ratio(900000, c) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK_THROWS(as_ratio(-1, c));
}

TEST_CASE("lr_schedule warms up linearly then decays with the inverse square root") {
  CHECK(lr_schedule(0, 0.001, 4000) == doctest::Approx(0.001 / 4000));
  CHECK(lr_schedule(1999, 0.001, 4000) == doctest::Approx(0.0005));
  CHECK(lr_schedule(4000, 0.001, 4000) == doctest::Approx(0.001));
  CHECK(lr_schedule(16000, 0.001, 4000) == doctest::Approx(0.0005));
  real prev = 0;
  for (long i = 0; i < 4000; i += 97) {
    CHECK(lr_schedule(i, 0.001, 4000) > prev);
    prev = lr_schedule(i, 0.001, 4000);
  }
}

TEST_CASE("adam takes a bias-corrected first step of size lr") {
  Matrix x0(1, 2);
  x0 << 1.0, -2.0;
  Tensor x = Tensor::parameter(x0);
  Adam adam({{{"x", x}}}, AdamConfig{});
  backward(sum(mul(x, Tensor::constant(Matrix::Constant(1, 2, 3.0)))));
  adam.step(0.125);
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
  CHECK(x.value()(0, 0) == doctest::Approx(1.0 - 0.125).epsilon(1e-7));
  CHECK(x.value()(0, 1) == doctest::Approx(-2.0 - 0.125).epsilon(1e-7));
  CHECK(adam.steps() == 1);
}

TEST_CASE("adam updates a parameter shared between lists once") {
  Tensor shared = Tensor::parameter(Matrix::Ones(2, 2));
  Tensor other = Tensor::parameter(Matrix::Ones(1, 3));
  Adam adam({{{"a", shared}, {"b", other}}, {{"a", shared}}}, AdamConfig{});
  CHECK(adam.parameter_count() == 7);
}

TEST_CASE("evaluating snapshot is refreshed exactly every k iterations") {
  Rng init(1);
  TranslationModel learning("st", tiny_dims(), init);
  FEGState state;
  const int k = 75;
  std::uint64_t held = 0;
  for (long it = 0; it < 230; ++it) {
    feg_step(state, learning, it, k);
    const std::uint64_t eval_sum = parameter_checksum(state.evaluating.parameters());
    if (it % k == 0) {
      CHECK(eval_sum == parameter_checksum(learning.parameters()));
      CHECK(state.iterations_since_copy == 0);
      held = eval_sum;
    } else {
      CHECK(eval_sum == held);
      CHECK(eval_sum != parameter_checksum(learning.parameters()));
    }
    for (const auto& [n, t] : learning.parameters()) {
      Tensor h = t;
      h.mutable_value()(0, 0) += 0.25;
    }
  }
  for (const auto& [n, t] : state.evaluating.parameters()) CHECK_FALSE(t.requires_grad());
}

TEST_CASE("evaluating snapshot is taken on the first step even off the interval") {
  Rng init(1);
  TranslationModel learning("st", tiny_dims(), init);
  FEGState state;
  feg_step(state, learning, 13, 75);
  CHECK(state.initialized);
  CHECK(parameter_checksum(state.evaluating.parameters()) == parameter_checksum(learning.parameters()));
}

TEST_CASE("fetch_latent follows the cache probability") {
  SyntheticCache cache;
  Rng rng(4);
  int generated = 0;
  auto gen = [&] {
    ++generated;
    return Sentence{4, 5};
  };
  SUBCASE("an empty cache always generates") {
    for (int i = 0; i < 50; ++i) CHECK(fetch_latent(cache, i, gen, 1.0, 0, rng).fresh);
    CHECK(generated == 50);
  }
  SUBCASE("probability zero always generates") {
    fetch_latent(cache, 0, gen, 0.0, 0, rng);
    for (int i = 1; i <= 100; ++i) CHECK(fetch_latent(cache, 0, gen, 0.0, i, rng).fresh);
    CHECK(cache.find(0)->stamp == 100);
  }
  SUBCASE("probability one reuses a warm entry") {
    fetch_latent(cache, 0, gen, 1.0, 0, rng);
    for (int i = 1; i <= 100; ++i) CHECK_FALSE(fetch_latent(cache, 0, gen, 1.0, i, rng).fresh);
    CHECK(generated == 1);
  }
  SUBCASE("probability 0.75 regenerates a quarter of the time") {
    fetch_latent(cache, 0, gen, 0.75, 0, rng);
    generated = 0;
    for (int i = 1; i <= 10000; ++i) fetch_latent(cache, 0, gen, 0.75, i, rng);
    CHECK(std::abs(generated / 10000.0 - 0.25) <= 0.02);
  }
}

TEST_CASE("synthetic cache serializes losslessly and rejects stale stamps") {
  SyntheticCache cache;
  cache.store(3, {4, 5, 2}, 7);
  cache.store(1, {6}, 9);
  CHECK(SyntheticCache::deserialize(cache.serialize()) == cache);
  CHECK_THROWS(cache.store(3, {4}, 6));
}

TEST_CASE("shared embeddings drop one matrix and collect gradient from both models") {
  BTModels m = tiny_models();
  const std::vector<NamedParameters> both{m.st.parameters(), m.ts.parameters()};
  const std::size_t before = unique_parameter_count(both);
  apply_sep(m.st, m.ts);
  const std::vector<NamedParameters> after_lists{m.st.parameters(), m.ts.parameters()};
  CHECK(before - unique_parameter_count(after_lists) == static_cast<std::size_t>(kVocab) * 8);
  CHECK(m.st.embedding().node() == m.ts.embedding().node());

  const ForwardMode mode = ForwardMode::inference();
  backward(bilingual_loss(m.ts, {{9, 10}}, {{4, 5}}, mode));
  const Matrix from_ts = m.st.embedding().grad();
  CHECK(from_ts.cwiseAbs().maxCoeff() > 0);
  backward(bilingual_loss(m.st, {{4, 5}}, {{9, 10}}, mode));
  const Matrix from_both = m.st.embedding().grad();
  CHECK((from_both - from_ts).cwiseAbs().maxCoeff() > 0);
}

TEST_CASE("with lambda = 0 and alpha = 0 the inference model is untouched by reconstruction") {
  BTModels m = tiny_models();
  BTConfig c = tiny_config();
  c.lambda_x = c.lambda_y = 0;
  c.alpha_x = c.alpha_y = 0;
  c.share_embeddings = false;
  c.batch_bilingual = 0;
  const Corpus corpus = tiny_corpus();
  BTTrainer trainer(std::move(m), c);
  const auto ts_before = values(trainer.models().ts.parameters());
  const auto st_before = values(trainer.models().st.parameters());
  Rng rng(8);
  for (int step = 0; step < 100; ++step) {
    TrainBatch batch;
    for (int i = 0; i < 4; ++i) batch.mono_target.push_back(static_cast<int>(rng.below(corpus.mono_target.size())));
    trainer.train_step(corpus, batch);
  }
  const auto ts_after = values(trainer.models().ts.parameters());
  for (std::size_t i = 0; i < ts_before.size(); ++i) CHECK(ts_after[i] == ts_before[i]);
  const auto st_after = values(trainer.models().st.parameters());
  real moved = 0;
  for (std::size_t i = 0; i < st_before.size(); ++i) moved += (st_after[i] - st_before[i]).cwiseAbs().sum();
  CHECK(moved > 0);
}

TEST_CASE("with lambda > 0 reconstruction reaches the inference model") {
  BTModels m = tiny_models();
  BTConfig c = tiny_config();
  c.alpha_x = c.alpha_y = 0;
  c.share_embeddings = false;
  c.batch_bilingual = 0;
  const Corpus corpus = tiny_corpus();
  BTTrainer trainer(std::move(m), c);
  const auto ts_before = values(trainer.models().ts.parameters());
  TrainBatch batch;
  batch.mono_target = {0, 1, 2};
  trainer.train_step(corpus, batch);
  const auto ts_after = values(trainer.models().ts.parameters());
  real moved = 0;
  for (std::size_t i = 0; i < ts_before.size(); ++i) moved += (ts_after[i] - ts_before[i]).cwiseAbs().sum();
  CHECK(moved > 0);
}

TEST_CASE("training steps are deterministic for a fixed seed") {
  const Corpus corpus = tiny_corpus();
  BTTrainer a(tiny_models(), tiny_config()), b(tiny_models(), tiny_config());
  for (int i = 0; i < 15; ++i) CHECK(a.step(corpus) == b.step(corpus));
  CHECK(parameter_checksum(a.models().st.parameters()) == parameter_checksum(b.models().st.parameters()));
}

TEST_CASE("language models stay frozen during BT") {
  const Corpus corpus = tiny_corpus();
  BTTrainer t(tiny_models(), tiny_config());
  const std::uint64_t before = parameter_checksum(t.models().lm_source.parameters());
  for (int i = 0; i < 3; ++i) t.step(corpus);
  CHECK(parameter_checksum(t.models().lm_source.parameters()) == before);
}

TEST_CASE("semi-online training reuses cached latents") {
  const Corpus corpus = tiny_corpus();
  BTConfig c = tiny_config();
  c.cache_load_prob = 1.0;
  BTTrainer t(tiny_models(), c);
  while (t.cache_source().size() + t.cache_target().size() < 60) t.step(corpus);
  // Once every sentence has a cached latent nothing new is generated.
  const long fresh = t.fresh_generations();
  CHECK(fresh < 8 * t.iteration());
  for (int i = 0; i < 10; ++i) t.step(corpus);
  CHECK(t.fresh_generations() == fresh);
}

TEST_CASE("a resumed trainer reproduces the uninterrupted loss stream") {
  const Corpus corpus = tiny_corpus();
  BTConfig c = tiny_config();
  c.cache_load_prob = 0.5;
  c.feg_interval = 4;
  BTTrainer full(tiny_models(), c);
  std::vector<LossReport> expected;
  for (int i = 0; i < 12; ++i) expected.push_back(full.step(corpus));

  BTTrainer first(tiny_models(), c);
  for (int i = 0; i < 6; ++i) first.step(corpus);
  Checkpoint ckpt;
  first.save(ckpt);
  const auto path = std::filesystem::temp_directory_path() / "e2ebt_resume_test.ckpt";
  save_checkpoint(ckpt, path);

  BTTrainer resumed(tiny_models(77), c);
  resumed.load(load_checkpoint(path));
  std::filesystem::remove(path);
  CHECK(resumed.iteration() == 6);
  for (int i = 6; i < 12; ++i) CHECK(resumed.step(corpus) == expected[static_cast<std::size_t>(i)]);
  CHECK(parameter_checksum(resumed.models().st.parameters()) == parameter_checksum(full.models().st.parameters()));
}

TEST_CASE("checkpoints round-trip bit for bit") {
  Checkpoint ckpt;
  ckpt.config = "seed = 4\n";
  ckpt.vocabulary = {"<pad>", "<s>", "</s>", "<unk>", "w\xc3\xa9"};
  ckpt.blobs["note"] = std::string("a\0b", 3);
  Rng rng(5);
  Matrix m(3, 4);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, 1.0);
  round_to_float(m);
  ckpt.add_array("weights", m);
  ckpt.add_array("empty", Matrix(0, 3));
  const auto path = std::filesystem::temp_directory_path() / "e2ebt_roundtrip.ckpt";
  save_checkpoint(ckpt, path);
  const Checkpoint back = load_checkpoint(path);
  CHECK(back.config == ckpt.config);
  CHECK(back.vocabulary == ckpt.vocabulary);
  CHECK(back.blobs == ckpt.blobs);
  CHECK(back.array("weights") == m);
  CHECK(back.array("empty").rows() == 0);
  CHECK(back.array("empty").cols() == 3);

  // Truncated and foreign files are rejected.
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
}

TEST_CASE("metrics records carry every field in order") {
  LossReport r{1, 2, 3, 4, 5, 6, 21};
  CHECK(metrics_record(7, 0.5, 0.25, r) ==
        R"({"iteration":7,"lr":0.5,"as_ratio":0.25,"bilingual_st":1.0,"bilingual_ts":2.0,"recon_tst":3.0,"kl_tst":4.0,"recon_sts":5.0,"kl_sts":6.0,"total":21.0})");
}

TEST_CASE("invalid BT settings are rejected") {
  BTConfig c;
  c.lambda_x = -1;
  CHECK_THROWS(c.validate());
  c = BTConfig{};
  c.cache_load_prob = 1.5;
  CHECK_THROWS(c.validate());
  c = BTConfig{};
  c.batch_bilingual = c.batch_monolingual = 0;
  CHECK_THROWS(BTTrainer(tiny_models(), c));
}
