#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
// A Tape records primitive applications in topological order; backward()
// walks the records once in reverse. Tensors are cheap value handles; the
// payload is shared.

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "stagin/common.hpp"

namespace stagin::ad {

using Scalar = double;
using Shape = std::vector<int>;

struct ShapeMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NotScalar : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

struct Tensor {
  std::shared_ptr<std::vector<Scalar>> values;
  Shape shape;
  Tape* tape = nullptr;  // null for constants off the tape
  int node = -1;

  Tensor() = default;

  static Tensor constant(Shape s, std::vector<Scalar> v);
  static Tensor zeros(Shape s);
  static Tensor full(Shape s, Scalar fill);
  static Tensor scalar(Scalar v) { return constant({1}, {v}); }

  int64_t size() const { return values ? static_cast<int64_t>(values->size()) : 0; }
  bool on_tape() const { return tape != nullptr && node >= 0; }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  Scalar* data() { return values->data(); }
  const Scalar* data() const { return values->data(); }
  Scalar item() const;
};

// Backward rule: receives the adjoint of this node's output and
// accumulates into parent adjoints via Tape::grad_buffer.
using BackwardFn = std::function<void(const Scalar* gout, Tape& tape)>;

class Tape {
 public:
  // Leaf with gradient tracking (model parameters, grad_check points).
  Tensor leaf(Shape shape, std::vector<Scalar> init);

  // Record an interior node. Returns its id.
  int emit(int64_t out_size, std::vector<int> parents, BackwardFn back);

  // Adjoint accumulation buffer for node `id`, zero-initialised on demand.
  Scalar* grad_buffer(int id);
  bool has_grad(int id) const { return !grads_[static_cast<size_t>(id)].empty(); }

  // Reverse sweep from a scalar tensor recorded on this tape.
  // Every node is visited at most once; leaves off the path keep zero.
  void backward(const Tensor& loss);

  // Gradient of `t` after backward(); zeros if the node was not reached.
  std::vector<Scalar> grad_of(const Tensor& t) const;

  size_t num_nodes() const { return nodes_.size(); }

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

 private:
  struct Node {
    int64_t size;
    std::vector<int> parents;
    BackwardFn back;  // empty for leaves
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<Scalar>> grads_;
};

// Running statistics owned by a batchnorm call site. Updated in train
// mode, read in eval mode. Serialised with the model.
struct BnState {
  std::vector<Scalar> running_mean;
  std::vector<Scalar> running_var;

  explicit BnState(int channels = 0)
      : running_mean(static_cast<size_t>(channels), 0.0),
        running_var(static_cast<size_t>(channels), 1.0) {}
  int channels() const { return static_cast<int>(running_mean.size()); }
};

// ---- primitives -----------------------------------------------------------

// matmul covers {m,k}x{k,n} -> {m,n}, {m,k}x{k} -> {m}, {k}x{k,n} -> {n}.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);            // same shape
Tensor sub(const Tensor& a, const Tensor& b);            // same shape
Tensor add_row_broadcast(const Tensor& m, const Tensor& b);  // b over rows: y[i,j]=m[i,j]+b[j]
Tensor add_col_broadcast(const Tensor& m, const Tensor& b);  // b over cols: y[i,j]=m[i,j]+b[i]
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor concat_last_dim(const std::vector<Tensor>& parts);  // rank-1 parts
Tensor concat_cols(const std::vector<Tensor>& parts);      // rank-2, same row count
Tensor slice_cols(const Tensor& a, int c0, int c1);
Tensor stack_rows(const std::vector<Tensor>& rows);        // rank-1 rows -> {T,n}
Tensor reshape(const Tensor& a, Shape s);                  // same element count
Tensor reduce_sum(const Tensor& a, int axis);              // rank-2, axis 0 or 1
Tensor reduce_mean(const Tensor& a, int axis);
Tensor reduce_sum_all(const Tensor& a);                    // -> {1}
Tensor reduce_mean_all(const Tensor& a);                   // -> {1}
Tensor scale(const Tensor& a, Scalar c);
Tensor add_const(const Tensor& a, Scalar c);
Tensor mul_scalar(const Tensor& a, const Tensor& s);       // s has shape {1}
Tensor div_scalar(const Tensor& a, const Tensor& s);       // s has shape {1}
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh_t(const Tensor& a);
Tensor softmax_last_dim(const Tensor& a);
Tensor layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias);  // rank-2, per row
Tensor batchnorm_cols(const Tensor& a, const Tensor& gamma, const Tensor& beta, BnState& state,
                      bool train, Scalar momentum = 0.1, Scalar eps = 1e-5);
Tensor dropout(const Tensor& a, Scalar p, bool train, Rng& rng);
Tensor cross_entropy_with_logits(const Tensor& logits, int label);  // rank-1 logits
Tensor frobenius_norm(const Tensor& a);
Tensor elementwise_max_reduce(const Tensor& a);

// ---- verification rig ------------------------------------------------------

// f builds a scalar loss from leaves it creates on the given tape from
// `point`. Returns max over coordinates of
// |analytic - central difference| / max(1, |analytic|).
using GradCheckFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;
double grad_check(const GradCheckFn& f, const std::vector<Tensor>& point, double eps = 1e-5);

}  // namespace stagin::ad
