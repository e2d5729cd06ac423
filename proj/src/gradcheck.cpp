#include "e2ebt/gradcheck.hpp"

#include "e2ebt/rng.hpp"

#include <algorithm>
#include <cmath>

namespace e2ebt {

std::vector<Matrix> numeric_gradient(const ScalarFn& f, const std::vector<Tensor>& inputs, real step) {
  NoGradGuard no_grad;
  std::vector<Matrix> grads;
  grads.reserve(inputs.size());
  for (const Tensor& in : inputs) {
    Tensor t = in;
    Matrix g(t.rows(), t.cols());
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      real& x = t.mutable_value().data()[i];
      const real saved = x;
      x = saved + step;
      const real up = f(inputs).item();
      x = saved - step;
      const real down = f(inputs).item();
      x = saved;
      g.data()[i] = (up - down) / (2 * step);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

real gradient_relative_error(const ScalarFn& f, const std::vector<Tensor>& inputs, real step) {
  for (Tensor t : inputs) t.zero_grad();
  backward(f(inputs));
  const std::vector<Matrix> numeric = numeric_gradient(f, inputs, step);
  real diff = 0, auto_norm = 0, num_norm = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Matrix a = inputs[i].grad();
    diff += (a - numeric[i]).squaredNorm();
    auto_norm += a.squaredNorm();
    num_norm += numeric[i].squaredNorm();
  }
  for (Tensor t : inputs) t.zero_grad();
  const real denom = std::max({std::sqrt(auto_norm), std::sqrt(num_norm), real(1e-12)});
  return std::sqrt(diff) / denom;
}

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, real lo = -1, real hi = 1) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = lo + (hi - lo) * rng.uniform();
  return m;
}

Matrix random_distribution(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Matrix m = random_matrix(rng, r, c, 0.05, 1.0);
  for (Eigen::Index i = 0; i < r; ++i) m.row(i) /= m.row(i).sum();
  return m;
}

// Reduces any output to a scalar through a fixed random projection so that
// every output entry carries a distinct weight.
Tensor project(const Tensor& out, const Matrix& weights) { return sum(mul(out, Tensor::constant(weights))); }

struct Suite {
  std::string name;
  // Builds the inputs and the scalar function for one random point.
  std::function<std::pair<std::vector<Tensor>, ScalarFn>(Rng&)> make;
};

std::vector<Suite> suites() {
  std::vector<Suite> all;
  auto unary = [&all](std::string name, std::function<Tensor(const Tensor&)> op, real lo, real hi) {
    all.push_back({name, [op, lo, hi](Rng& rng) {
                     const Eigen::Index r = 1 + rng.below(4), c = 1 + rng.below(6);
                     Tensor x = Tensor::parameter(random_matrix(rng, r, c, lo, hi));
                     const Tensor probe = op(x);
                     Matrix w = random_matrix(rng, probe.rows(), probe.cols());
                     ScalarFn f = [op, w](const std::vector<Tensor>& in) { return project(op(in[0]), w); };
                     return std::make_pair(std::vector<Tensor>{x}, f);
                   }});
  };
  auto binary = [&all](std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op) {
    all.push_back({name, [op](Rng& rng) {
                     const Eigen::Index r = 1 + rng.below(4), c = 1 + rng.below(6);
                     Tensor a = Tensor::parameter(random_matrix(rng, r, c));
                     Tensor b = Tensor::parameter(random_matrix(rng, r, c));
                     Matrix w = random_matrix(rng, r, c);
                     ScalarFn f = [op, w](const std::vector<Tensor>& in) { return project(op(in[0], in[1]), w); };
                     return std::make_pair(std::vector<Tensor>{a, b}, f);
                   }});
  };

  binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); });
  binary("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); });
  binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); });
  unary("scale", [](const Tensor& x) { return scale(x, -1.7); }, -1, 1);
  unary("add_scalar", [](const Tensor& x) { return add_scalar(x, 0.3); }, -1, 1);
  unary("exp", [](const Tensor& x) { return exp(x); }, -2, 2);
  unary("log", [](const Tensor& x) { return log(x); }, 0.2, 3);
  // Kept away from the kink at zero.
  unary("relu", [](const Tensor& x) { return relu(x); }, 0.05, 1);
  unary("relu_negative", [](const Tensor& x) { return relu(scale(x, -1.0)); }, 0.05, 1);
  unary("sum", [](const Tensor& x) { return sum(x); }, -1, 1);
  unary("mean", [](const Tensor& x) { return mean(x); }, -1, 1);
  unary("softmax", [](const Tensor& x) { return softmax(x); }, -3, 3);
  unary("log_softmax", [](const Tensor& x) { return log_softmax(x); }, -3, 3);

  all.push_back({"add_row", [](Rng& rng) {
                   const Eigen::Index r = 1 + rng.below(4), c = 1 + rng.below(6);
                   Tensor x = Tensor::parameter(random_matrix(rng, r, c));
                   Tensor b = Tensor::parameter(random_matrix(rng, 1, c));
                   Matrix w = random_matrix(rng, r, c);
                   ScalarFn f = [w](const std::vector<Tensor>& in) { return project(add_row(in[0], in[1]), w); };
                   return std::make_pair(std::vector<Tensor>{x, b}, f);
                 }});
  all.push_back({"matmul", [](Rng& rng) {
                   const Eigen::Index n = 1 + rng.below(4), k = 1 + rng.below(5), m = 1 + rng.below(4);
                   Tensor a = Tensor::parameter(random_matrix(rng, n, k));
                   Tensor b = Tensor::parameter(random_matrix(rng, k, m));
                   Matrix w = random_matrix(rng, n, m);
                   ScalarFn f = [w](const std::vector<Tensor>& in) { return project(matmul(in[0], in[1]), w); };
                   return std::make_pair(std::vector<Tensor>{a, b}, f);
                 }});
  all.push_back({"embedding_one_hot_product", [](Rng& rng) {
                   // One-hot rows relaxed to reals, multiplied into an embedding table.
                   const Eigen::Index n = 1 + rng.below(4), v = 2 + rng.below(5), d = 1 + rng.below(4);
                   Matrix onehot = Matrix::Zero(n, v);
                   for (Eigen::Index i = 0; i < n; ++i) onehot(i, static_cast<Eigen::Index>(rng.below(v))) = 1.0;
                   Tensor z = Tensor::parameter(onehot);
                   Tensor table = Tensor::parameter(random_matrix(rng, v, d));
                   Matrix w = random_matrix(rng, n, d);
                   ScalarFn f = [w](const std::vector<Tensor>& in) { return project(matmul(in[0], in[1]), w); };
                   return std::make_pair(std::vector<Tensor>{z, table}, f);
                 }});
  all.push_back({"embedding_lookup", [](Rng& rng) {
                   const Eigen::Index v = 2 + rng.below(6), d = 1 + rng.below(4);
                   std::vector<int> ids(1 + rng.below(6));
                   for (int& id : ids) id = static_cast<int>(rng.below(v));
                   Tensor table = Tensor::parameter(random_matrix(rng, v, d));
                   Matrix w = random_matrix(rng, static_cast<Eigen::Index>(ids.size()), d);
                   ScalarFn f = [w, ids](const std::vector<Tensor>& in) { return project(embedding(in[0], ids), w); };
                   return std::make_pair(std::vector<Tensor>{table}, f);
                 }});
  all.push_back({"concat_rows", [](Rng& rng) {
                   const Eigen::Index c = 1 + rng.below(4);
                   Tensor a = Tensor::parameter(random_matrix(rng, 1 + rng.below(3), c));
                   Tensor b = Tensor::parameter(random_matrix(rng, 1 + rng.below(3), c));
                   Matrix w = random_matrix(rng, a.rows() + b.rows(), c);
                   ScalarFn f = [w](const std::vector<Tensor>& in) {
                     std::vector<Tensor> parts{in[0], in[1]};
                     return project(concat_rows(parts), w);
                   };
                   return std::make_pair(std::vector<Tensor>{a, b}, f);
                 }});
  all.push_back({"layer_norm", [](Rng& rng) {
                   const Eigen::Index r = 1 + rng.below(4), c = 2 + rng.below(6);
                   Tensor x = Tensor::parameter(random_matrix(rng, r, c, -2, 2));
                   Tensor g = Tensor::parameter(random_matrix(rng, 1, c, 0.5, 1.5));
                   Tensor b = Tensor::parameter(random_matrix(rng, 1, c));
                   Matrix w = random_matrix(rng, r, c);
                   ScalarFn f = [w](const std::vector<Tensor>& in) {
                     return project(layer_norm(in[0], in[1], in[2]), w);
                   };
                   return std::make_pair(std::vector<Tensor>{x, g, b}, f);
                 }});
  all.push_back({"masked_attention", [](Rng& rng) {
                   const int heads = 1 + static_cast<int>(rng.below(2));
                   const Eigen::Index d = heads * (1 + static_cast<Eigen::Index>(rng.below(3)));
                   const Eigen::Index n = 1 + rng.below(4), m = 1 + rng.below(4);
                   Tensor q = Tensor::parameter(random_matrix(rng, n, d));
                   Tensor k = Tensor::parameter(random_matrix(rng, m, d));
                   Tensor v = Tensor::parameter(random_matrix(rng, m, d));
                   AttentionMask mask;
                   for (Eigen::Index i = 0; i < n; ++i) {
                     std::vector<int> keys;
                     for (int j = 0; j < m; ++j) {
                       if (j == 0 || rng.bernoulli(0.7)) keys.push_back(j);
                     }
                     mask.keys.push_back(keys);
                   }
                   Matrix w = random_matrix(rng, n, d);
                   ScalarFn f = [w, mask, heads](const std::vector<Tensor>& in) {
                     return project(attention(in[0], in[1], in[2], heads, mask), w);
                   };
                   return std::make_pair(std::vector<Tensor>{q, k, v}, f);
                 }});
  all.push_back({"cross_entropy_prob_target", [](Rng& rng) {
                   const Eigen::Index r = 1 + rng.below(4), c = 2 + rng.below(6);
                   Tensor x = Tensor::parameter(random_matrix(rng, r, c, -2, 2));
                   Tensor t = Tensor::parameter(random_distribution(rng, r, c));
                   std::vector<real> wts(static_cast<std::size_t>(r));
                   for (real& x2 : wts) x2 = rng.uniform();
                   ScalarFn f = [wts](const std::vector<Tensor>& in) { return cross_entropy(in[0], in[1], wts); };
                   return std::make_pair(std::vector<Tensor>{x, t}, f);
                 }});
  all.push_back({"cross_entropy_ids", [](Rng& rng) {
                   const Eigen::Index r = 1 + rng.below(4), c = 2 + rng.below(6);
                   Tensor x = Tensor::parameter(random_matrix(rng, r, c, -2, 2));
                   std::vector<int> ids(static_cast<std::size_t>(r));
                   for (int& id : ids) id = static_cast<int>(rng.below(c));
                   std::vector<real> wts(static_cast<std::size_t>(r));
                   for (real& x2 : wts) x2 = rng.uniform();
                   ScalarFn f = [wts, ids](const std::vector<Tensor>& in) { return cross_entropy(in[0], ids, wts); };
                   return std::make_pair(std::vector<Tensor>{x}, f);
                 }});
  all.push_back({"categorical_kl", [](Rng& rng) {
                   const Eigen::Index r = 1 + rng.below(4), c = 2 + rng.below(6);
                   Tensor q = Tensor::parameter(random_distribution(rng, r, c));
                   Tensor p = Tensor::parameter(random_distribution(rng, r, c));
                   std::vector<real> wts(static_cast<std::size_t>(r));
                   for (real& x2 : wts) x2 = rng.uniform();
                   ScalarFn f = [wts](const std::vector<Tensor>& in) { return categorical_kl(in[0], in[1], wts); };
                   return std::make_pair(std::vector<Tensor>{q, p}, f);
                 }});
  all.push_back({"dropout", [](Rng& rng) {
                   const Eigen::Index r = 1 + rng.below(4), c = 1 + rng.below(6);
                   Tensor x = Tensor::parameter(random_matrix(rng, r, c));
                   Matrix w = random_matrix(rng, r, c);
                   const std::uint64_t seed = rng.next();
                   ScalarFn f = [w, seed](const std::vector<Tensor>& in) {
                     Rng mask_rng(seed);  // same mask on every evaluation
                     return project(dropout(in[0], 0.3, mask_rng), w);
                   };
                   return std::make_pair(std::vector<Tensor>{x}, f);
                 }});
  return all;
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suites(std::uint64_t seed, int points, real tolerance) {
  std::vector<GradCheckResult> results;
  Rng rng(seed);
  for (const Suite& suite : suites()) {
    GradCheckResult result{suite.name, points, 0, true};
    for (int p = 0; p < points; ++p) {
      auto [inputs, f] = suite.make(rng);
      const real err = gradient_relative_error(f, inputs);
      result.worst_error = std::max(result.worst_error, err);
    }
    result.passed = result.worst_error <= tolerance;
    results.push_back(result);
  }
  return results;
}

}  // namespace e2ebt
