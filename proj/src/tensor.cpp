#include "e2ebt/tensor.hpp"

#include "e2ebt/rng.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <string>

namespace e2ebt {

namespace {

thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_softmax_rows = 0;
std::atomic<std::uint64_t> g_visit_epoch{0};

using BackwardFn = std::function<void(Node&)>;

std::string shape_of(const Matrix& m) {
  return "(" + std::to_string(m.rows()) + " x " + std::to_string(m.cols()) + ")";
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_of(a.value()) + " vs " +
                     shape_of(b.value()));
  }
}

// Wraps a forward value into a node. Parents are kept (in order) only when a
// graph is being recorded and at least one input needs a gradient.
Tensor record(Matrix value, std::initializer_list<Tensor> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (!t_grad_enabled) return Tensor(std::move(node));
  bool needs = false;
  for (const Tensor& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return Tensor(std::move(node));
  node->parents.reserve(inputs.size());
  for (const Tensor& in : inputs) node->parents.push_back(in.shared());
  node->backward = std::move(fn);
  node->requires_grad = true;
  return Tensor(std::move(node));
}

Tensor record_many(Matrix value, std::span<const Tensor> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (!t_grad_enabled) return Tensor(std::move(node));
  bool needs = false;
  for (const Tensor& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return Tensor(std::move(node));
  node->parents.reserve(inputs.size());
  for (const Tensor& in : inputs) node->parents.push_back(in.shared());
  node->backward = std::move(fn);
  node->requires_grad = true;
  return Tensor(std::move(node));
}

Node* grad_target(Node& self, std::size_t i) {
  Node* p = self.parents[i].get();
  return p->requires_grad ? p : nullptr;
}

void check_finite_rows(const Matrix& m, const char* op) {
  if (!m.allFinite()) throw InvalidLogits(std::string(op) + ": non-finite input");
}

}  // namespace

Matrix& Node::ensure_grad() {
  if (!has_grad()) grad = Matrix::Zero(value.rows(), value.cols());
  return grad;
}

Tensor Tensor::constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Tensor(std::move(node));
}

Tensor Tensor::parameter(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(real value) {
  Matrix m(1, 1);
  m(0, 0) = value;
  return constant(std::move(m));
}

Tensor Tensor::row(std::span<const real> values) {
  Matrix m(1, static_cast<Eigen::Index>(values.size()));
  std::copy(values.begin(), values.end(), m.data());
  return constant(std::move(m));
}

void Tensor::set_requires_grad(bool flag) {
  if (!node_->parents.empty()) throw std::logic_error("requires_grad can only be set on leaves");
  node_->requires_grad = flag;
}

Matrix Tensor::grad() const {
  if (node_->has_grad()) return node_->grad;
  return Matrix::Zero(rows(), cols());
}

void Tensor::zero_grad() { node_->grad.resize(0, 0); }

real Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar " + shape_of(value()));
  return value()(0, 0);
}

std::vector<Tensor> backward(const Tensor& loss) {
  if (loss.size() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_of(loss.value()));
  if (!std::isfinite(loss.item())) throw std::domain_error("backward: loss is not finite");
  std::vector<Tensor> leaves;
  if (!loss.requires_grad()) return leaves;

  const std::uint64_t mark = ++g_visit_epoch;
  std::vector<Node*> order;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  loss.node()->visit_mark = mark;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && parent->visit_mark != mark) {
        parent->visit_mark = mark;
        if (parent->parents.empty()) leaves.emplace_back(node->parents[next - 1]);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Node* root = loss.node();
  root->ensure_grad().array() += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->parents.empty()) continue;
    if (node->has_grad() && node->backward) node->backward(*node);
    if (node != root) node->grad.resize(0, 0);
  }
  return leaves;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

SoftmaxCounter::SoftmaxCounter() : start_(t_softmax_rows) {}
std::uint64_t SoftmaxCounter::count() const { return t_softmax_rows - start_; }

// --- elementwise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return record(a.value() + b.value(), {a, b}, [](Node& self) {
    if (Node* p = grad_target(self, 0)) p->ensure_grad() += self.grad;
    if (Node* p = grad_target(self, 1)) p->ensure_grad() += self.grad;
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  return record(a.value() - b.value(), {a, b}, [](Node& self) {
    if (Node* p = grad_target(self, 0)) p->ensure_grad() += self.grad;
    if (Node* p = grad_target(self, 1)) p->ensure_grad() -= self.grad;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  return record(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    const Matrix& av = self.parents[0]->value;
    const Matrix& bv = self.parents[1]->value;
    if (Node* p = grad_target(self, 0)) p->ensure_grad() += self.grad.cwiseProduct(bv);
    if (Node* p = grad_target(self, 1)) p->ensure_grad() += self.grad.cwiseProduct(av);
  });
}

Tensor scale(const Tensor& a, real factor) {
  return record(a.value() * factor, {a}, [factor](Node& self) {
    if (Node* p = grad_target(self, 0)) p->ensure_grad() += self.grad * factor;
  });
}

Tensor add_scalar(const Tensor& a, real offset) {
  return record((a.value().array() + offset).matrix(), {a}, [](Node& self) {
    if (Node* p = grad_target(self, 0)) p->ensure_grad() += self.grad;
  });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != x.cols()) {
    throw ShapeError("add_row: row " + shape_of(row.value()) + " does not match " + shape_of(x.value()));
  }
  Matrix out = x.value();
  out.rowwise() += row.value().row(0);
  return record(std::move(out), {x, row}, [](Node& self) {
    if (Node* p = grad_target(self, 0)) p->ensure_grad() += self.grad;
    if (Node* p = grad_target(self, 1)) p->ensure_grad() += self.grad.colwise().sum();
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_of(a.value()) + " x " + shape_of(b.value()));
  }
  Matrix out = a.value() * b.value();
  return record(std::move(out), {a, b}, [](Node& self) {
    const Matrix& av = self.parents[0]->value;
    const Matrix& bv = self.parents[1]->value;
    if (Node* p = grad_target(self, 0)) p->ensure_grad().noalias() += self.grad * bv.transpose();
    if (Node* p = grad_target(self, 1)) p->ensure_grad().noalias() += av.transpose() * self.grad;
  });
}

Tensor exp(const Tensor& a) {
  Matrix out = a.value().array().exp().matrix();
  return record(std::move(out), {a}, [](Node& self) {
    if (Node* p = grad_target(self, 0)) p->ensure_grad() += self.grad.cwiseProduct(self.value);
  });
}

Tensor log(const Tensor& a) {
  Matrix out = a.value().array().log().matrix();
  return record(std::move(out), {a}, [](Node& self) {
    const Matrix& av = self.parents[0]->value;
    if (Node* p = grad_target(self, 0)) p->ensure_grad() += self.grad.cwiseQuotient(av);
  });
}

Tensor relu(const Tensor& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return record(std::move(out), {a}, [](Node& self) {
    const Matrix& av = self.parents[0]->value;
    if (Node* p = grad_target(self, 0)) {
      p->ensure_grad() += (av.array() > 0.0).select(self.grad, 0.0).matrix();
    }
  });
}

Tensor sum(const Tensor& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return record(std::move(out), {a}, [](Node& self) {
    if (Node* p = grad_target(self, 0)) p->ensure_grad().array() += self.grad(0, 0);
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<real>(a.size()));
}

Tensor detach(const Tensor& a) { return Tensor::constant(a.value()); }

Tensor straight_through(const Tensor& a, Matrix value, real grad_scale) {
  if (a.rows() != value.rows() || a.cols() != value.cols()) {
    throw ShapeError("straight_through: shape mismatch " + shape_of(a.value()) + " vs " + shape_of(value));
  }
  return record(std::move(value), {a}, [grad_scale](Node& self) {
    if (Node* p = grad_target(self, 0)) p->ensure_grad() += grad_scale * self.grad;
  });
}

// --- normalization -------------------------------------------------------

namespace {

Matrix row_softmax(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const real m = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - m).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  check_finite_rows(logits.value(), "softmax");
  t_softmax_rows += static_cast<std::uint64_t>(logits.rows());
  return record(row_softmax(logits.value()), {logits}, [](Node& self) {
    Node* p = grad_target(self, 0);
    if (!p) return;
    const Matrix& y = self.value;
    const Eigen::VectorXd dot = self.grad.cwiseProduct(y).rowwise().sum();
    Matrix& g = p->ensure_grad();
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      g.row(i) += y.row(i).cwiseProduct((self.grad.row(i).array() - dot(i)).matrix());
    }
  });
}

Tensor log_softmax(const Tensor& logits) {
  check_finite_rows(logits.value(), "log_softmax");
  t_softmax_rows += static_cast<std::uint64_t>(logits.rows());
  const Matrix& x = logits.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const real m = x.row(i).maxCoeff();
    const real lse = m + std::log((x.row(i).array() - m).exp().sum());
    out.row(i) = (x.row(i).array() - lse).matrix();
  }
  return record(std::move(out), {logits}, [](Node& self) {
    Node* p = grad_target(self, 0);
    if (!p) return;
    const Eigen::VectorXd total = self.grad.rowwise().sum();
    Matrix& g = p->ensure_grad();
    for (Eigen::Index i = 0; i < self.value.rows(); ++i) {
      g.row(i) += self.grad.row(i) - (self.value.row(i).array().exp() * total(i)).matrix();
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw ShapeError("layer_norm: gain/bias must be 1 x " + std::to_string(d));
  }
  auto xhat = std::make_shared<Matrix>(n, d);
  auto inv_std = std::make_shared<Eigen::VectorXd>(n);
  const Matrix& xv = x.value();
  for (Eigen::Index i = 0; i < n; ++i) {
    const real mu = xv.row(i).mean();
    const real var = (xv.row(i).array() - mu).square().mean();
    (*inv_std)(i) = 1.0 / std::sqrt(var + eps);
    xhat->row(i) = ((xv.row(i).array() - mu) * (*inv_std)(i)).matrix();
  }
  Matrix out = xhat->array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return record(std::move(out), {x, gamma, beta}, [xhat, inv_std](Node& self) {
    const Matrix& g = self.grad;
    const Matrix& gain = self.parents[1]->value;
    if (Node* p = grad_target(self, 1)) p->ensure_grad() += g.cwiseProduct(*xhat).colwise().sum();
    if (Node* p = grad_target(self, 2)) p->ensure_grad() += g.colwise().sum();
    if (Node* p = grad_target(self, 0)) {
      Matrix& gx = p->ensure_grad();
      const real inv_d = 1.0 / static_cast<real>(g.cols());
      for (Eigen::Index i = 0; i < g.rows(); ++i) {
        const RowVector gh = g.row(i).cwiseProduct(gain.row(0));
        const real mean_gh = gh.sum() * inv_d;
        const real mean_ghx = gh.cwiseProduct(xhat->row(i)).sum() * inv_d;
        gx.row(i) += ((gh.array() - mean_gh - xhat->row(i).array() * mean_ghx) * (*inv_std)(i)).matrix();
      }
    }
  });
}

// --- row selection -------------------------------------------------------

Tensor gather_rows(const Tensor& x, std::span<const int> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= x.rows()) {
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[r]) + " outside " +
                              shape_of(x.value()));
    }
    out.row(static_cast<Eigen::Index>(r)) = x.value().row(rows[r]);
  }
  auto index = std::make_shared<std::vector<int>>(rows.begin(), rows.end());
  return record(std::move(out), {x}, [index](Node& self) {
    Node* p = grad_target(self, 0);
    if (!p) return;
    Matrix& g = p->ensure_grad();
    for (std::size_t r = 0; r < index->size(); ++r) {
      g.row((*index)[r]) += self.grad.row(static_cast<Eigen::Index>(r));
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) { return gather_rows(table, ids); }

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  Eigen::Index total = 0;
  const Eigen::Index d = parts.front().cols();
  for (const Tensor& t : parts) {
    if (t.cols() != d) throw ShapeError("concat_rows: column mismatch");
    total += t.rows();
  }
  Matrix out(total, d);
  Eigen::Index at = 0;
  for (const Tensor& t : parts) {
    out.middleRows(at, t.rows()) = t.value();
    at += t.rows();
  }
  return record_many(std::move(out), parts, [](Node& self) {
    Eigen::Index at = 0;
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      const Eigen::Index r = self.parents[i]->value.rows();
      if (Node* p = grad_target(self, i)) p->ensure_grad() += self.grad.middleRows(at, r);
      at += r;
    }
  });
}

// --- attention -----------------------------------------------------------

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                 const AttentionMask& mask) {
  const Eigen::Index n = q.rows();
  const Eigen::Index d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) throw ShapeError("attention: q/k/v mismatch");
  if (heads <= 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  if (static_cast<Eigen::Index>(mask.keys.size()) != n) throw ShapeError("attention: mask rows != queries");
  const int dh = static_cast<int>(d / heads);
  const real inv_sqrt = 1.0 / std::sqrt(static_cast<real>(dh));

  auto keys = std::make_shared<std::vector<std::vector<int>>>(mask.keys);
  auto offsets = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(n) + 1, 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int key : (*keys)[i]) {
      if (key < 0 || key >= k.rows()) throw std::out_of_range("attention: key index out of range");
    }
    (*offsets)[i + 1] = (*offsets)[i] + (*keys)[i].size() * static_cast<std::size_t>(heads);
  }
  auto weights = std::make_shared<std::vector<real>>((*offsets)[n]);

  Matrix out = Matrix::Zero(n, d);
  const real* qd = q.value().data();
  const real* kd = k.value().data();
  const real* vd = v.value().data();
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& ks = (*keys)[i];
    const std::size_t m = ks.size();
    if (m == 0) continue;
    for (int h = 0; h < heads; ++h) {
      real* w = weights->data() + (*offsets)[i] + static_cast<std::size_t>(h) * m;
      const real* qi = qd + i * d + h * dh;
      real best = -std::numeric_limits<real>::infinity();
      for (std::size_t j = 0; j < m; ++j) {
        const real* kj = kd + ks[j] * d + h * dh;
        real s = 0;
        for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
        w[j] = s * inv_sqrt;
        best = std::max(best, w[j]);
      }
      real z = 0;
      for (std::size_t j = 0; j < m; ++j) {
        w[j] = std::exp(w[j] - best);
        z += w[j];
      }
      real* oi = out.data() + i * d + h * dh;
      for (std::size_t j = 0; j < m; ++j) {
        w[j] /= z;
        const real* vj = vd + ks[j] * d + h * dh;
        for (int c = 0; c < dh; ++c) oi[c] += w[j] * vj[c];
      }
    }
  }

  return record(std::move(out), {q, k, v}, [keys, offsets, weights, heads, dh, inv_sqrt](Node& self) {
    const Matrix& qv = self.parents[0]->value;
    const Matrix& kv = self.parents[1]->value;
    const Matrix& vv = self.parents[2]->value;
    Node* pq = grad_target(self, 0);
    Node* pk = grad_target(self, 1);
    Node* pv = grad_target(self, 2);
    real* gq = pq ? pq->ensure_grad().data() : nullptr;
    real* gk = pk ? pk->ensure_grad().data() : nullptr;
    real* gv = pv ? pv->ensure_grad().data() : nullptr;
    const Eigen::Index d = qv.cols();
    std::vector<real> da;
    for (Eigen::Index i = 0; i < qv.rows(); ++i) {
      const auto& ks = (*keys)[i];
      const std::size_t m = ks.size();
      if (m == 0) continue;
      da.resize(m);
      for (int h = 0; h < heads; ++h) {
        const real* w = weights->data() + (*offsets)[i] + static_cast<std::size_t>(h) * m;
        const real* go = self.grad.data() + i * d + h * dh;
        real dot = 0;
        for (std::size_t j = 0; j < m; ++j) {
          const real* vj = vv.data() + ks[j] * d + h * dh;
          real s = 0;
          for (int c = 0; c < dh; ++c) s += go[c] * vj[c];
          da[j] = s;
          dot += w[j] * s;
          if (gv) {
            real* gvj = gv + ks[j] * d + h * dh;
            for (int c = 0; c < dh; ++c) gvj[c] += w[j] * go[c];
          }
        }
        const real* qi = qv.data() + i * d + h * dh;
        for (std::size_t j = 0; j < m; ++j) {
          const real ds = w[j] * (da[j] - dot) * inv_sqrt;
          const real* kj = kv.data() + ks[j] * d + h * dh;
          if (gq) {
            real* gqi = gq + i * d + h * dh;
            for (int c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
          }
          if (gk) {
            real* gkj = gk + ks[j] * d + h * dh;
            for (int c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
          }
        }
      }
    }
  });
}

// --- losses --------------------------------------------------------------

namespace {

std::vector<real> checked_weights(std::span<const real> w, Eigen::Index rows, const char* op) {
  if (static_cast<Eigen::Index>(w.size()) != rows) {
    throw ShapeError(std::string(op) + ": weight count does not match rows");
  }
  return {w.begin(), w.end()};
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, const Tensor& target, std::span<const real> row_weights) {
  require_same_shape(logits, target, "cross_entropy");
  check_finite_rows(logits.value(), "cross_entropy");
  auto w = std::make_shared<std::vector<real>>(checked_weights(row_weights, logits.rows(), "cross_entropy"));
  const Matrix& x = logits.value();
  auto logp = std::make_shared<Matrix>(x.rows(), x.cols());
  real total = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const real m = x.row(i).maxCoeff();
    const real lse = m + std::log((x.row(i).array() - m).exp().sum());
    logp->row(i) = (x.row(i).array() - lse).matrix();
    if ((*w)[i] != 0) total -= (*w)[i] * target.value().row(i).dot(logp->row(i));
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  return record(std::move(out), {logits, target}, [w, logp](Node& self) {
    const real g = self.grad(0, 0);
    const Matrix& t = self.parents[1]->value;
    if (Node* p = grad_target(self, 0)) {
      Matrix& gx = p->ensure_grad();
      for (Eigen::Index i = 0; i < t.rows(); ++i) {
        if ((*w)[i] == 0) continue;
        const real mass = t.row(i).sum();
        gx.row(i) += (g * (*w)[i]) * ((logp->row(i).array().exp() * mass).matrix() - t.row(i));
      }
    }
    if (Node* p = grad_target(self, 1)) {
      Matrix& gt = p->ensure_grad();
      for (Eigen::Index i = 0; i < t.rows(); ++i) gt.row(i) -= (g * (*w)[i]) * logp->row(i);
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> target_ids,
                     std::span<const real> row_weights) {
  const Eigen::Index n = logits.rows();
  if (static_cast<Eigen::Index>(target_ids.size()) != n) throw ShapeError("cross_entropy: id count != rows");
  check_finite_rows(logits.value(), "cross_entropy");
  auto w = std::make_shared<std::vector<real>>(checked_weights(row_weights, n, "cross_entropy"));
  auto ids = std::make_shared<std::vector<int>>(target_ids.begin(), target_ids.end());
  const Matrix& x = logits.value();
  auto lse = std::make_shared<std::vector<real>>(static_cast<std::size_t>(n), 0.0);
  real total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if ((*w)[i] == 0) continue;
    const int id = (*ids)[i];
    if (id < 0 || id >= x.cols()) throw std::out_of_range("cross_entropy: target id out of range");
    const real m = x.row(i).maxCoeff();
    (*lse)[i] = m + std::log((x.row(i).array() - m).exp().sum());
    total += (*w)[i] * ((*lse)[i] - x(i, id));
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  return record(std::move(out), {logits}, [w, ids, lse](Node& self) {
    Node* p = grad_target(self, 0);
    if (!p) return;
    const real g = self.grad(0, 0);
    const Matrix& x = self.parents[0]->value;
    Matrix& gx = p->ensure_grad();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      if ((*w)[i] == 0) continue;
      const real c = g * (*w)[i];
      gx.row(i) += (c * (x.row(i).array() - (*lse)[i]).exp()).matrix();
      gx(i, (*ids)[i]) -= c;
    }
  });
}

Tensor categorical_kl(const Tensor& q, const Tensor& prior, std::span<const real> row_weights) {
  if (q.rows() != prior.rows() || q.cols() != prior.cols()) {
    throw ShapeError("categorical_kl: distribution size mismatch " + shape_of(q.value()) + " vs " +
                     shape_of(prior.value()));
  }
  auto w = std::make_shared<std::vector<real>>(checked_weights(row_weights, q.rows(), "categorical_kl"));
  static constexpr real tiny = std::numeric_limits<real>::min();
  const Matrix& qv = q.value();
  const Matrix& pv = prior.value();
  real total = 0;
  for (Eigen::Index i = 0; i < qv.rows(); ++i) {
    if ((*w)[i] == 0) continue;
    real row = 0;
    for (Eigen::Index j = 0; j < qv.cols(); ++j) {
      const real qi = qv(i, j);
      if (qi > 0) row += qi * (std::log(qi) - std::log(std::max(pv(i, j), tiny)));
    }
    total += (*w)[i] * row;
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  return record(std::move(out), {q, prior}, [w](Node& self) {
    const real g = self.grad(0, 0);
    const Matrix& qv = self.parents[0]->value;
    const Matrix& pv = self.parents[1]->value;
    Node* pq = grad_target(self, 0);
    Node* pp = grad_target(self, 1);
    for (Eigen::Index i = 0; i < qv.rows(); ++i) {
      const real c = g * (*w)[i];
      if (c == 0) continue;
      for (Eigen::Index j = 0; j < qv.cols(); ++j) {
        const real qi = std::max(qv(i, j), tiny);
        const real pi = std::max(pv(i, j), tiny);
        if (pq) pq->ensure_grad()(i, j) += c * (std::log(qi) - std::log(pi) + 1.0);
        if (pp) pp->ensure_grad()(i, j) -= c * qv(i, j) / pi;
      }
    }
  });
}

Tensor dropout(const Tensor& x, real rate, Rng& rng) {
  if (rate <= 0) return x;
  if (rate >= 1) throw std::invalid_argument("dropout rate must be < 1");
  const real keep = 1.0 - rate;
  auto mask = std::make_shared<Matrix>(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask->size(); ++i) {
    mask->data()[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
  }
  return record(x.value().cwiseProduct(*mask), {x}, [mask](Node& self) {
    if (Node* p = grad_target(self, 0)) p->ensure_grad() += self.grad.cwiseProduct(*mask);
  });
}

void round_to_float(Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<real>(static_cast<float>(m.data()[i]));
}

}  // namespace e2ebt
