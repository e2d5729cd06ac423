#pragma once

// Reparameterizations that turn sampled discrete tokens into values carrying a
// gradient path back to the probabilities they were drawn from.

#include "e2ebt/rng.hpp"
#include "e2ebt/tensor.hpp"

#include <span>
#include <stdexcept>
#include <vector>

namespace e2ebt {

struct InvalidDistribution : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

enum class SamplingKind { greedy, stochastic, mixed };

struct SamplingStrategy {
  SamplingKind kind = SamplingKind::greedy;
  real stochastic_ratio = 0;  // used by mixed

  static SamplingStrategy greedy() { return {SamplingKind::greedy, 0}; }
  static SamplingStrategy stochastic() { return {SamplingKind::stochastic, 1}; }
  static SamplingStrategy mixed(real ratio);
};

// Binary straight-through sample: forward value s ~ Bernoulli(p), unit
// derivative with respect to p.
struct BinarySample {
  Tensor z;
  int s = 0;
};

BinarySample binary_reparam(const Tensor& p, Rng& rng);

// Index drawn from the probability row p. Greedy ties go to the lowest index.
int sample_token(std::span<const real> p, const SamplingStrategy& strategy, Rng& rng);

std::vector<int> sample_ids(const Matrix& p, const SamplingStrategy& strategy, Rng& rng);

// One one-hot row per probability row; ids receives the chosen indices.
Matrix sample_tokens(const Matrix& p, const SamplingStrategy& strategy, Rng& rng, std::vector<int>& ids);

Matrix one_hot_rows(std::span<const int> ids, Eigen::Index vocab);

struct ReparamOutput {
  Tensor z;                    // one-hot rows, forward equal to s
  std::vector<int> token_ids;  // argmax of each row of z
  Tensor p;                    // distribution the rows were built from
  real lambda = 1;
};

// Categorical reparameterization with gradient scale lambda:
//   c = s*(1 - lambda p) + (1 - s)*(-lambda p)   (held constant)
//   z = lambda p + c
// so z equals s forward and dL/dp = lambda dL/dz. Any one-hot s is accepted,
// regardless of how it was chosen.
ReparamOutput crt(const Tensor& p, const Matrix& s, real lambda);
// Same, with s given by the index of its one in each row. The forward value is
// computed entrywise in a single node.
ReparamOutput crt(const Tensor& p, std::span<const int> ids, real lambda);
// The formula above spelled out with separate graph operations.
ReparamOutput crt_reference(const Tensor& p, const Matrix& s, real lambda);

struct GumbelOutput {
  Tensor z;                    // hard one-hot rows (straight-through)
  std::vector<int> token_ids;
  Tensor soft;                 // relaxed sample the gradient flows through
  Tensor p;                    // softmax(logits), recovered from the first normalization
};

// Straight-through Gumbel-softmax: two softmax normalizations per row.
GumbelOutput gumbel_softmax(const Tensor& logits, real tau, Rng& rng);

}  // namespace e2ebt
