#pragma once

// Define-by-run reverse-mode automatic differentiation over dense matrices.
//
// Every value is a row-major matrix; a vector is a 1 x n row. Operations build
// a graph of shared nodes as they run, and backward() walks that graph once in
// reverse topological order. Parameters are leaf nodes with requires_grad set;
// their gradients accumulate across backward calls until zero_grad().

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace e2ebt {

using real = double;
using Matrix = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<real, 1, Eigen::Dynamic>;

class Rng;

struct Node {
  Matrix value;
  Matrix grad;  // empty until the first contribution arrives
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  std::uint64_t visit_mark = 0;

  bool has_grad() const { return grad.size() != 0; }
  Matrix& ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Matrix value);
  static Tensor parameter(Matrix value);
  static Tensor scalar(real value);
  static Tensor row(std::span<const real> values);

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);
  bool has_grad() const { return node_->has_grad(); }
  // Zero matrix of the value's shape when no gradient reached this node.
  Matrix grad() const;
  void zero_grad();

  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  Eigen::Index size() const { return node_->value.size(); }
  real item() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

struct InvalidLogits : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Reverse-mode sweep from a finite scalar. Returns the leaf tensors that
// received gradient.
std::vector<Tensor> backward(const Tensor& loss);

// While alive, operations on this thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Counts softmax normalizations (one per normalized row) performed on the
// current thread since construction. Each thread keeps its own tally.
class SoftmaxCounter {
 public:
  SoftmaxCounter();
  std::uint64_t count() const;

 private:
  std::uint64_t start_;
};

// Allowed key rows for every query row of a masked attention call.
struct AttentionMask {
  std::vector<std::vector<int>> keys;
};

// --- elementwise and linear algebra -------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real factor);
Tensor add_scalar(const Tensor& a, real offset);
// x + row broadcast over the leading (row) dimension.
Tensor add_row(const Tensor& x, const Tensor& row);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Forward identity; the result has no parents and never requires grad.
Tensor detach(const Tensor& a);

// Takes `value` as the forward result and passes grad_scale * gradient to a.
// Equivalent to grad_scale * a + detach(value - grad_scale * a) in one node.
Tensor straight_through(const Tensor& a, Matrix value, real grad_scale = 1.0);

// --- normalization ------------------------------------------------------
Tensor softmax(const Tensor& logits);
Tensor log_softmax(const Tensor& logits);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps = 1e-5);

// --- row selection ------------------------------------------------------
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor gather_rows(const Tensor& x, std::span<const int> rows);
Tensor concat_rows(std::span<const Tensor> parts);

// --- sequence primitives ------------------------------------------------
// Multi-head scaled dot-product attention. q is (n x d); k, v are (m x d);
// query i attends to the key rows listed in mask.keys[i].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                 const AttentionMask& mask);

// sum_i w_i * ( -sum_j target_ij * log softmax(logits)_ij )
Tensor cross_entropy(const Tensor& logits, const Tensor& target, std::span<const real> row_weights);
// Same with one-hot targets given by id; rows with weight 0 are skipped.
Tensor cross_entropy(const Tensor& logits, std::span<const int> target_ids,
                     std::span<const real> row_weights);

// sum_i w_i * sum_j q_ij * log(q_ij / prior_ij), with 0 log 0 = 0.
Tensor categorical_kl(const Tensor& q, const Tensor& prior, std::span<const real> row_weights);

// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, real rate, Rng& rng);

// Rounds every entry to the nearest single-precision value.
void round_to_float(Matrix& m);

}  // namespace e2ebt
