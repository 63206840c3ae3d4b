#include "semdvc/autograd.hpp"

#include <cmath>
#include <limits>

#include "semdvc/error.hpp"

namespace semdvc::ag {

const Matrix& Var::value() const { return tape_->value(*this); }

Var Tape::constant(Matrix value) {
  nodes_.push_back({std::move(value), Matrix(), false, nullptr});
  return {this, nodes_.size() - 1};
}

Var Tape::leaf(Matrix value) {
  nodes_.push_back({std::move(value), Matrix(), recording_, nullptr});
  return {this, nodes_.size() - 1};
}

Var Tape::push(Matrix value, std::initializer_list<Var> inputs, Backward fn) {
  bool needs = false;
  if (recording_) {
    for (Var v : inputs) needs = needs || nodes_[v.id()].needs_grad;
  }
  nodes_.push_back({std::move(value), Matrix(), needs, needs ? std::move(fn) : nullptr});
  return {this, nodes_.size() - 1};
}

Var Tape::push(Matrix value, const std::vector<Var>& inputs, Backward fn) {
  bool needs = false;
  if (recording_) {
    for (Var v : inputs) needs = needs || nodes_[v.id()].needs_grad;
  }
  nodes_.push_back({std::move(value), Matrix(), needs, needs ? std::move(fn) : nullptr});
  return {this, nodes_.size() - 1};
}

void Tape::accumulate(Var v, const Matrix& delta) {
  Node& n = nodes_[v.id()];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = delta;
  } else {
    n.grad += delta;
  }
}

void Tape::backward(Var root) {
  if (!recording_) throw Error(ErrorKind::kInvalidArgument, "backward on a non-recording tape");
  Node& r = nodes_[root.id()];
  if (r.value.rows() != 1 || r.value.cols() != 1) {
    throw Error(ErrorKind::kInvalidArgument, "backward root must be a 1x1 scalar");
  }
  if (!r.needs_grad) return;
  r.grad = Matrix::Ones(1, 1);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && n.grad.size() != 0) n.backward(*this, n.grad);
  }
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw Error(ErrorKind::kDimensionMismatch, what);
}

}  // namespace

Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  return a.tape()->push(a.value() * b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.needs_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

Var add(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shapes differ");
  return a.tape()->push(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var add_row(Var x, Var row) {
  require(row.rows() == 1 && row.cols() == x.cols(), "add_row: bias must be 1 x cols");
  Matrix out = x.value();
  out.rowwise() += row.value().row(0);
  return x.tape()->push(std::move(out), {x, row}, [x, row](Tape& t, const Matrix& g) {
    t.accumulate(x, g);
    if (t.needs_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

Var scale(Var x, double s) {
  return x.tape()->push(x.value() * s, {x}, [x, s](Tape& t, const Matrix& g) { t.accumulate(x, g * s); });
}

Var relu(Var x) {
  Matrix out = x.value().cwiseMax(0.0);
  return x.tape()->push(std::move(out), {x}, [x](Tape& t, const Matrix& g) {
    t.accumulate(x, (x.value().array() > 0.0).select(g, 0.0));
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Eigen::Index n = x.cols();
  require(gain.rows() == 1 && gain.cols() == n && bias.rows() == 1 && bias.cols() == n,
          "layer_norm: gain and bias must be 1 x cols");
  const Matrix& xv = x.value();
  Eigen::VectorXd mean = xv.rowwise().mean();
  Matrix centered = xv.colwise() - mean;
  Eigen::VectorXd inv =
      ((centered.array().square().rowwise().sum() / static_cast<double>(n)) + eps).rsqrt();
  Matrix xhat = centered.array().colwise() * inv.array();
  Matrix out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return x.tape()->push(std::move(out), {x, gain, bias},
                        [x, gain, bias, xhat = std::move(xhat), inv = std::move(inv), n](Tape& t, const Matrix& g) {
                          if (t.needs_grad(gain)) t.accumulate(gain, (g.array() * xhat.array()).colwise().sum().matrix());
                          if (t.needs_grad(bias)) t.accumulate(bias, g.colwise().sum());
                          if (t.needs_grad(x)) {
                            Matrix dxhat = g.array().rowwise() * gain.value().row(0).array();
                            Eigen::VectorXd m1 = dxhat.rowwise().mean();
                            Eigen::VectorXd m2 = (dxhat.array() * xhat.array()).rowwise().sum() / static_cast<double>(n);
                            Matrix dx = dxhat;
                            dx.colwise() -= m1;
                            dx -= (xhat.array().colwise() * m2.array()).matrix();
                            dx = dx.array().colwise() * inv.array();
                            t.accumulate(x, dx);
                          }
                        });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: nothing to concatenate");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (Var p : parts) {
    require(p.rows() == rows, "concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts.front().tape()->push(std::move(out), parts, [parts](Tape& t, const Matrix& g) {
    Eigen::Index off = 0;
    for (Var p : parts) {
      if (t.needs_grad(p)) t.accumulate(p, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

Var slice_cols(Var x, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= x.cols(), "slice_cols: range outside matrix");
  return x.tape()->push(x.value().middleCols(start, count), {x}, [x, start, count](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(x.rows(), x.cols());
    full.middleCols(start, count) = g;
    t.accumulate(x, full);
  });
}

Var gather_rows(Var table, const std::vector<int>& ids) {
  Matrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) {
      throw Error(ErrorKind::kOutOfRange, "gather_rows: id " + std::to_string(ids[i]) + " outside table");
    }
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  return table.tape()->push(std::move(out), {table}, [table, ids](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(table.rows(), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) d.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(table, d);
  });
}

Matrix softmax_rows(const Matrix& logits, const Mask* mask) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      if (mask && (*mask)(r, c)) continue;
      mx = std::max(mx, logits(r, c));
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw Error(ErrorKind::kInvalidArgument, "attention row " + std::to_string(r) + " has no attendable key");
    }
    double total = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      const double e = (mask && (*mask)(r, c)) ? 0.0 : std::exp(logits(r, c) - mx);
      out(r, c) = e;
      total += e;
    }
    out.row(r) /= total;
  }
  return out;
}

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

Mask causal_mask(Eigen::Index queries, Eigen::Index keys) {
  Mask m(queries, keys);
  for (Eigen::Index r = 0; r < queries; ++r)
    for (Eigen::Index c = 0; c < keys; ++c) m(r, c) = c > r;
  return m;
}

Var attention(Var q, Var k, Var v, const Mask* mask) {
  require(q.cols() == k.cols(), "attention: query and key widths differ");
  require(k.rows() == v.rows(), "attention: key and value row counts differ");
  if (mask) require(mask->rows() == q.rows() && mask->cols() == k.rows(), "attention: mask shape");
  const double s = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix probs = softmax_rows((q.value() * k.value().transpose()) * s, mask);
  Matrix out = probs * v.value();
  return q.tape()->push(std::move(out), {q, k, v}, [q, k, v, s, probs = std::move(probs)](Tape& t, const Matrix& g) {
    if (t.needs_grad(v)) t.accumulate(v, probs.transpose() * g);
    if (!t.needs_grad(q) && !t.needs_grad(k)) return;
    const Matrix dp = g * v.value().transpose();
    const Eigen::VectorXd rowdot = (dp.array() * probs.array()).rowwise().sum();
    Matrix ds = probs.array() * (dp.colwise() - rowdot).array();
    ds *= s;  // masked entries have zero probability, so they carry no gradient
    if (t.needs_grad(q)) t.accumulate(q, ds * k.value());
    if (t.needs_grad(k)) t.accumulate(k, ds.transpose() * q.value());
  });
}

Var dropout(Var x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  Matrix m(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  Matrix out = x.value().cwiseProduct(m);
  return x.tape()->push(std::move(out), {x}, [x, m = std::move(m)](Tape& t, const Matrix& g) {
    t.accumulate(x, g.cwiseProduct(m));
  });
}

Var im2col(Var x, Eigen::Index width) {
  require(width >= 1 && width % 2 == 1, "im2col: width must be odd");
  const Eigen::Index r = width / 2;
  const Eigen::Index n = x.rows();
  const Eigen::Index c = x.cols();
  Matrix out = Matrix::Zero(n, width * c);
  for (Eigen::Index t = 0; t < n; ++t) {
    for (Eigen::Index o = 0; o < width; ++o) {
      const Eigen::Index src = t + o - r;
      if (src >= 0 && src < n) out.block(t, o * c, 1, c) = x.value().row(src);
    }
  }
  return x.tape()->push(std::move(out), {x}, [x, width, r, n, c](Tape& tp, const Matrix& g) {
    Matrix d = Matrix::Zero(n, c);
    for (Eigen::Index t = 0; t < n; ++t) {
      for (Eigen::Index o = 0; o < width; ++o) {
        const Eigen::Index src = t + o - r;
        if (src >= 0 && src < n) d.row(src) += g.block(t, o * c, 1, c);
      }
    }
    tp.accumulate(x, d);
  });
}

Var sum(const std::vector<Var>& scalars) {
  require(!scalars.empty(), "sum: no terms");
  double total = 0.0;
  for (Var s : scalars) {
    require(s.rows() == 1 && s.cols() == 1, "sum: terms must be 1x1");
    total += s.value()(0, 0);
  }
  return scalars.front().tape()->push(Matrix::Constant(1, 1, total), scalars, [scalars](Tape& t, const Matrix& g) {
    for (Var s : scalars) t.accumulate(s, g);
  });
}

Var external_scalar(Var x, double value, Matrix dvalue_dx) {
  require(dvalue_dx.rows() == x.rows() && dvalue_dx.cols() == x.cols(), "external_scalar: gradient shape");
  return x.tape()->push(Matrix::Constant(1, 1, value), {x}, [x, d = std::move(dvalue_dx)](Tape& t, const Matrix& g) {
    t.accumulate(x, d * g(0, 0));
  });
}

Var label_smoothed_kl(Var logits, const std::vector<int>& targets, double smoothing, int pad_id) {
  const Eigen::Index vocab = logits.cols();
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw Error(ErrorKind::kDimensionMismatch, "label_smoothed_kl: one target per logits row");
  }
  if (!(smoothing >= 0.0 && smoothing < 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "label smoothing must be in [0, 1)");
  }
  if (vocab < 3) throw Error(ErrorKind::kInvalidArgument, "label_smoothed_kl: vocabulary too small");
  const Matrix logp = log_softmax_rows(logits.value());
  const double off = smoothing / static_cast<double>(vocab - 2);
  Matrix dlogits = Matrix::Zero(logits.rows(), vocab);
  double total = 0.0;
  std::size_t count = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int tgt = targets[static_cast<std::size_t>(r)];
    if (tgt == pad_id) continue;
    if (tgt < 0 || tgt >= vocab) throw Error(ErrorKind::kOutOfRange, "label_smoothed_kl: target id outside vocabulary");
    ++count;
    for (Eigen::Index c = 0; c < vocab; ++c) {
      double q = 0.0;
      if (c == tgt) q = 1.0 - smoothing;
      else if (c != pad_id) q = off;
      if (q > 0.0) total += q * (std::log(q) - logp(r, c));
      dlogits(r, c) = std::exp(logp(r, c)) - q;
    }
  }
  if (count == 0) throw Error(ErrorKind::kInvalidArgument, "label_smoothed_kl: every target is padding");
  const double n = static_cast<double>(count);
  return external_scalar(logits, total / n, dlogits / n);
}

const Matrix& ParamStore::at(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw Error(ErrorKind::kInvalidArgument, "unknown parameter '" + name + "'");
  return it->second;
}

Matrix& ParamStore::at(const std::string& name) {
  auto it = values_.find(name);
  if (it == values_.end()) throw Error(ErrorKind::kInvalidArgument, "unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, m] : values_) n += static_cast<std::size_t>(m.size());
  return n;
}

Var Binder::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const Matrix& value = params_.at(name);
  Var v = trainable_ ? tape_.leaf(value) : tape_.constant(value);
  bound_.emplace(name, v);
  return v;
}

ParamMap Binder::gradients() const {
  ParamMap out;
  for (const auto& [name, v] : bound_) out.emplace(name, tape_.grad(v));
  return out;
}

void Adam::step(ParamStore& params, const ParamMap& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    Matrix& p = params.at(name);
    auto [mit, m_new] = m_.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
    auto [vit, v_new] = v_.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
    Matrix& m = mit->second;
    Matrix& v = vit->second;
    m = opts_.beta1 * m + (1.0 - opts_.beta1) * g;
    v = opts_.beta2 * v + (1.0 - opts_.beta2) * g.cwiseProduct(g);
    p.array() -= opts_.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + opts_.eps);
  }
}

Matrix xavier(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> u(-limit, limit);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = u(rng);
  return m;
}

void accumulate(ParamMap& a, const ParamMap& b, double scale) {
  for (const auto& [name, g] : b) {
    auto it = a.find(name);
    if (it == a.end()) a.emplace(name, g * scale);
    else it->second += g * scale;
  }
}

}  // namespace semdvc::ag
