#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace semdvc::ag {

using Matrix = Eigen::MatrixXd;
// true marks a blocked (query, key) pair.
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records a computation as it runs and replays it backwards. With
// recording off it is a plain evaluator: no closures, no gradients.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  Var constant(Matrix value);
  Var leaf(Matrix value);  // differentiable input

  // For op implementations: the node needs a gradient iff recording and
  // some input needs one; fn is dropped otherwise.
  Var push(Matrix value, std::initializer_list<Var> inputs, Backward fn);
  Var push(Matrix value, const std::vector<Var>& inputs, Backward fn);

  const Matrix& value(Var v) const { return nodes_[v.id()].value; }
  bool needs_grad(Var v) const { return nodes_[v.id()].needs_grad; }
  void accumulate(Var v, const Matrix& delta);

  // Seeds d(root)/d(root) = 1 for a 1x1 root and runs every backward step.
  void backward(Var root);
  // Zero matrix when nothing flowed into v.
  Matrix grad(Var v) const;

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Backward backward;
  };

  bool recording_;
  std::deque<Node> nodes_;
};

// --- ops ---------------------------------------------------------------
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var add_row(Var x, Var row);  // broadcast a 1 x n row over every row of x
Var scale(Var x, double s);
Var relu(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-6);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var x, Eigen::Index start, Eigen::Index count);
Var gather_rows(Var table, const std::vector<int>& ids);
// softmax(q k^T / sqrt(d_k) + mask) v with d_k = q.cols().
Var attention(Var q, Var k, Var v, const Mask* mask = nullptr);
Var dropout(Var x, double rate, std::mt19937_64& rng);
// Zero-padded sliding windows: row t = [x(t - r), ..., x(t + r)], width = 2r + 1.
Var im2col(Var x, Eigen::Index width);
Var sum(const std::vector<Var>& scalars);
// A scalar whose value and gradient w.r.t. x were computed elsewhere.
Var external_scalar(Var x, double value, Matrix dvalue_dx);

// Row-wise label-smoothed KL divergence (see transformer.hpp).
Var label_smoothed_kl(Var logits, const std::vector<int>& targets, double smoothing, int pad_id);

// --- plain evaluators shared with the ops ------------------------------
Matrix softmax_rows(const Matrix& logits, const Mask* mask = nullptr);
Matrix log_softmax_rows(const Matrix& logits);
Mask causal_mask(Eigen::Index queries, Eigen::Index keys);

// --- parameters --------------------------------------------------------
using ParamMap = std::map<std::string, Matrix>;

// Named parameter blocks in deterministic (sorted) order.
class ParamStore {
 public:
  void set(const std::string& name, Matrix value) { values_[name] = std::move(value); }
  bool contains(const std::string& name) const { return values_.count(name) != 0; }
  const Matrix& at(const std::string& name) const;
  Matrix& at(const std::string& name);
  const ParamMap& values() const { return values_; }
  ParamMap& values() { return values_; }
  std::size_t num_scalars() const;

 private:
  ParamMap values_;
};

// Binds parameters onto a tape on first use, then hands back the same Var.
class Binder {
 public:
  Binder(Tape& tape, const ParamStore& params, bool trainable)
      : tape_(tape), params_(params), trainable_(trainable) {}

  Var operator()(const std::string& name);
  Tape& tape() { return tape_; }
  ParamMap gradients() const;  // only bound parameters

 private:
  Tape& tape_;
  const ParamStore& params_;
  bool trainable_;
  std::map<std::string, Var> bound_;
};

struct AdamOptions {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamOptions opts) : opts_(opts) {}
  // Parameters without a gradient entry are left untouched.
  void step(ParamStore& params, const ParamMap& grads);
  const AdamOptions& options() const { return opts_; }

 private:
  AdamOptions opts_;
  std::uint64_t t_ = 0;
  ParamMap m_;
  ParamMap v_;
};

// Xavier-uniform initialization.
Matrix xavier(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng);

// Adds b into a (creating entries as needed).
void accumulate(ParamMap& a, const ParamMap& b, double scale = 1.0);

}  // namespace semdvc::ag
