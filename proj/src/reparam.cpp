#include "e2ebt/reparam.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace e2ebt {

namespace {

void validate_distribution(std::span<const real> p) {
  if (p.empty()) throw InvalidDistribution("empty distribution");
  real total = 0;
  for (real x : p) {
    if (!std::isfinite(x) || x < 0) throw InvalidDistribution("distribution has a negative or non-finite entry");
    total += x;
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw InvalidDistribution("distribution sums to " + std::to_string(total));
  }
}

std::span<const real> row_span(const Matrix& m, Eigen::Index i) {
  return {m.data() + i * m.cols(), static_cast<std::size_t>(m.cols())};
}

int argmax_lowest(std::span<const real> p) {
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

}  // namespace

SamplingStrategy SamplingStrategy::mixed(real ratio) {
  if (!(ratio >= 0 && ratio <= 1)) throw std::invalid_argument("stochastic ratio must lie in [0, 1]");
  return {SamplingKind::mixed, ratio};
}

BinarySample binary_reparam(const Tensor& p, Rng& rng) {
  if (p.size() != 1) throw ShapeError("binary_reparam expects a scalar probability");
  const real prob = p.item();
  if (!(prob >= 0 && prob <= 1)) throw InvalidDistribution("binary_reparam: p outside [0, 1]");
  const int s = rng.bernoulli(prob) ? 1 : 0;
  // c = s(1 - p) + (1 - s)(-p), detached
  const Tensor c = add(scale(add_scalar(scale(p, -1.0), 1.0), s), scale(scale(p, -1.0), 1 - s));
  return {add(p, detach(c)), s};
}

int sample_token(std::span<const real> p, const SamplingStrategy& strategy, Rng& rng) {
  validate_distribution(p);
  bool stochastic = strategy.kind == SamplingKind::stochastic;
  if (strategy.kind == SamplingKind::mixed) stochastic = rng.bernoulli(strategy.stochastic_ratio);
  if (!stochastic) return argmax_lowest(p);
  const real u = rng.uniform();
  real cumulative = 0;
  int last_positive = 0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] <= 0) continue;
    cumulative += p[j];
    last_positive = static_cast<int>(j);
    if (u < cumulative) return static_cast<int>(j);
  }
  return last_positive;
}

std::vector<int> sample_ids(const Matrix& p, const SamplingStrategy& strategy, Rng& rng) {
  std::vector<int> ids(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) ids[i] = sample_token(row_span(p, i), strategy, rng);
  return ids;
}

Matrix sample_tokens(const Matrix& p, const SamplingStrategy& strategy, Rng& rng, std::vector<int>& ids) {
  ids = sample_ids(p, strategy, rng);
  return one_hot_rows(ids, p.cols());
}

Matrix one_hot_rows(std::span<const int> ids, Eigen::Index vocab) {
  Matrix s = Matrix::Zero(static_cast<Eigen::Index>(ids.size()), vocab);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) throw std::out_of_range("one_hot_rows: id out of range");
    s(static_cast<Eigen::Index>(i), ids[i]) = 1.0;
  }
  return s;
}

namespace {

std::vector<int> one_hot_ids(const Tensor& p, const Matrix& s) {
  if (p.rows() != s.rows() || p.cols() != s.cols()) throw ShapeError("crt: sample and distribution differ in shape");
  std::vector<int> ids(static_cast<std::size_t>(s.rows()));
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    int ones = 0;
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      const real x = s(i, j);
      if (x == 1.0) {
        ++ones;
        ids[i] = static_cast<int>(j);
      } else if (x != 0.0) {
        throw InvalidDistribution("crt: sample row is not one-hot");
      }
    }
    if (ones != 1) throw InvalidDistribution("crt: sample row is not one-hot");
  }
  return ids;
}

void check_crt_inputs(const Tensor& p, std::span<const int> ids, real lambda) {
  if (!(lambda >= 0)) throw std::invalid_argument("crt: lambda must be >= 0");
  if (static_cast<Eigen::Index>(ids.size()) != p.rows()) throw ShapeError("crt: one sample per row expected");
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    validate_distribution(row_span(p.value(), i));
    if (ids[i] < 0 || ids[i] >= p.cols()) throw std::out_of_range("crt: sample index out of range");
  }
}

}  // namespace

ReparamOutput crt(const Tensor& p, const Matrix& s, real lambda) {
  const std::vector<int> ids = one_hot_ids(p, s);
  return crt(p, ids, lambda);
}

ReparamOutput crt(const Tensor& p, std::span<const int> ids, real lambda) {
  check_crt_inputs(p, ids, lambda);
  const Matrix& pv = p.value();
  Matrix z(pv.rows(), pv.cols());
  for (Eigen::Index i = 0; i < pv.rows(); ++i) {
    const real* pr = pv.data() + i * pv.cols();
    real* zr = z.data() + i * pv.cols();
    for (Eigen::Index j = 0; j < pv.cols(); ++j) {
      const real lp = lambda * pr[j];
      const real si = j == ids[i] ? 1.0 : 0.0;
      const real c = si * (1.0 - lp) + (1.0 - si) * -lp;
      zr[j] = lp + c;
    }
  }
  return {straight_through(p, std::move(z), lambda), {ids.begin(), ids.end()}, p, lambda};
}

ReparamOutput crt_reference(const Tensor& p, const Matrix& s, real lambda) {
  std::vector<int> ids = one_hot_ids(p, s);
  check_crt_inputs(p, ids, lambda);
  const Tensor sample = Tensor::constant(s);
  const Tensor not_sample = Tensor::constant((1.0 - s.array()).matrix());
  const Tensor scaled = scale(p, lambda);
  const Tensor neg_scaled = scale(scaled, -1.0);
  const Tensor c = add(mul(sample, add_scalar(neg_scaled, 1.0)), mul(not_sample, neg_scaled));
  return {add(scaled, detach(c)), std::move(ids), p, lambda};
}

GumbelOutput gumbel_softmax(const Tensor& logits, real tau, Rng& rng) {
  if (!(tau > 0)) throw std::invalid_argument("gumbel_softmax: tau must be > 0");
  const Tensor log_p = log_softmax(logits);
  Matrix noise(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = -std::log(-std::log(rng.uniform_open()));
  const Tensor soft = softmax(scale(add(log_p, Tensor::constant(std::move(noise))), 1.0 / tau));

  std::vector<int> ids(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < soft.rows(); ++i) ids[i] = argmax_lowest(row_span(soft.value(), i));
  const Tensor z = straight_through(soft, one_hot_rows(ids, logits.cols()));
  return {z, std::move(ids), soft, exp(log_p)};
}

}  // namespace e2ebt
