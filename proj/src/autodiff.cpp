#include "stagin/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace stagin::ad {

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "{";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "}";
  return os.str();
}

static void check_shape(bool ok, const std::string& op, const Shape& a, const Shape& b) {
  if (!ok)
    throw ShapeMismatch(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

Tensor Tensor::constant(Shape s, std::vector<Scalar> v) {
  if (static_cast<int64_t>(v.size()) != numel(s))
    throw ShapeMismatch("Tensor::constant: payload size does not match " + shape_str(s));
  Tensor t;
  t.shape = std::move(s);
  t.values = std::make_shared<std::vector<Scalar>>(std::move(v));
  return t;
}

Tensor Tensor::zeros(Shape s) {
  Tensor t;
  int64_t n = numel(s);
  t.shape = std::move(s);
  t.values = std::make_shared<std::vector<Scalar>>(static_cast<size_t>(n), 0.0);
  return t;
}

Tensor Tensor::full(Shape s, Scalar fill) {
  Tensor t = zeros(std::move(s));
  std::fill(t.values->begin(), t.values->end(), fill);
  return t;
}

Scalar Tensor::item() const {
  if (size() != 1) throw NotScalar("Tensor::item: tensor has " + shape_str(shape));
  return (*values)[0];
}

Tensor Tape::leaf(Shape shape, std::vector<Scalar> init) {
  Tensor t = Tensor::constant(std::move(shape), std::move(init));
  t.tape = this;
  t.node = emit(t.size(), {}, nullptr);
  return t;
}

int Tape::emit(int64_t out_size, std::vector<int> parents, BackwardFn back) {
  nodes_.push_back(Node{out_size, std::move(parents), std::move(back)});
  return static_cast<int>(nodes_.size()) - 1;
}

Scalar* Tape::grad_buffer(int id) {
  auto& g = grads_[static_cast<size_t>(id)];
  if (g.empty()) g.assign(static_cast<size_t>(nodes_[static_cast<size_t>(id)].size), 0.0);
  return g.data();
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) throw NotScalar("backward: loss has shape " + shape_str(loss.shape));
  if (loss.tape != this || loss.node < 0)
    throw std::runtime_error("backward: loss is not recorded on this tape");
  grads_.assign(nodes_.size(), {});
  grad_buffer(loss.node)[0] = 1.0;
  for (int id = loss.node; id >= 0; --id) {
    auto& node = nodes_[static_cast<size_t>(id)];
    if (!node.back) continue;
    auto& g = grads_[static_cast<size_t>(id)];
    if (g.empty()) continue;
    node.back(g.data(), *this);
  }
}

std::vector<Scalar> Tape::grad_of(const Tensor& t) const {
  if (t.tape != this || t.node < 0)
    throw std::runtime_error("grad_of: tensor is not recorded on this tape");
  const auto& g = grads_[static_cast<size_t>(t.node)];
  if (g.empty()) return std::vector<Scalar>(static_cast<size_t>(t.size()), 0.0);
  return g;
}

// ---- helpers ---------------------------------------------------------------

namespace {

Tape* tape_of(std::initializer_list<const Tensor*> ts) {
  Tape* tp = nullptr;
  for (const Tensor* t : ts) {
    if (t->on_tape()) {
      if (tp && tp != t->tape)
        throw std::runtime_error("primitive: operands recorded on different tapes");
      tp = t->tape;
    }
  }
  return tp;
}

Tensor make_result(Tape* tp, Shape shape, std::vector<Scalar> vals, std::vector<int> parents,
                   BackwardFn back) {
  Tensor out = Tensor::constant(std::move(shape), std::move(vals));
  if (tp) {
    out.tape = tp;
    out.node = tp->emit(out.size(), std::move(parents), std::move(back));
  }
  return out;
}

// C[m,n] (+)= op(A) * op(B) with optional transposes; plain ikj loops.
void gemm(bool ta, bool tb, int m, int n, int k, const Scalar* a, const Scalar* b, Scalar* c,
          bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    Scalar* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      Scalar av = ta ? a[static_cast<size_t>(p) * m + i] : a[static_cast<size_t>(i) * k + p];
      if (av == 0.0) continue;
      const Scalar* brow = tb ? nullptr : b + static_cast<size_t>(p) * n;
      if (!tb) {
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (int j = 0; j < n; ++j) crow[j] += av * b[static_cast<size_t>(j) * k + p];
      }
    }
  }
}

std::vector<int> live_parents(std::initializer_list<const Tensor*> ts) {
  std::vector<int> p;
  for (const Tensor* t : ts)
    if (t->on_tape()) p.push_back(t->node);
  return p;
}

// Elementwise unary op with pointwise derivative computed from input/output.
template <typename FwdF, typename DerF>
Tensor unary_pointwise(const Tensor& a, FwdF fwd, DerF der, const char* /*name*/) {
  Tape* tp = tape_of({&a});
  int64_t n = a.size();
  std::vector<Scalar> y(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) y[static_cast<size_t>(i)] = fwd((*a.values)[static_cast<size_t>(i)]);
  auto yv = std::make_shared<std::vector<Scalar>>(std::move(y));
  BackwardFn back;
  if (tp) {
    auto av = a.values;
    int an = a.node;
    back = [av, yv, an, n, der](const Scalar* g, Tape& t) {
      Scalar* ga = t.grad_buffer(an);
      for (int64_t i = 0; i < n; ++i)
        ga[i] += g[i] * der((*av)[static_cast<size_t>(i)], (*yv)[static_cast<size_t>(i)]);
    };
  }
  Tensor out;
  out.shape = a.shape;
  out.values = yv;
  if (tp) {
    out.tape = tp;
    out.node = tp->emit(n, live_parents({&a}), std::move(back));
  }
  return out;
}

}  // namespace

// ---- binary / structural ---------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  // Normalise to 2-D, remembering which operands were vectors.
  bool avec = a.rank() == 1, bvec = b.rank() == 1;
  int m, k, k2, n;
  if (!avec && !bvec) {
    check_shape(a.rank() == 2 && b.rank() == 2, "matmul", a.shape, b.shape);
    m = a.dim(0); k = a.dim(1); k2 = b.dim(0); n = b.dim(1);
  } else if (!avec && bvec) {
    m = a.dim(0); k = a.dim(1); k2 = b.dim(0); n = 1;
  } else if (avec && !bvec) {
    m = 1; k = a.dim(0); k2 = b.dim(0); n = b.dim(1);
  } else {
    throw ShapeMismatch("matmul: at least one operand must be rank 2, got " +
                        shape_str(a.shape) + " and " + shape_str(b.shape));
  }
  check_shape(k == k2, "matmul", a.shape, b.shape);
  std::vector<Scalar> y(static_cast<size_t>(m) * n);
  gemm(false, false, m, n, k, a.data(), b.data(), y.data(), false);
  Shape out_shape = avec ? Shape{n} : (bvec ? Shape{m} : Shape{m, n});
  Tape* tp = tape_of({&a, &b});
  BackwardFn back;
  if (tp) {
    auto av = a.values; auto bv = b.values;
    int an = a.on_tape() ? a.node : -1;
    int bn = b.on_tape() ? b.node : -1;
    back = [av, bv, an, bn, m, n, k](const Scalar* g, Tape& t) {
      if (an >= 0) gemm(false, true, m, k, n, g, bv->data(), t.grad_buffer(an), true);   // dA = G Bᵀ
      if (bn >= 0) gemm(true, false, k, n, m, av->data(), g, t.grad_buffer(bn), true);   // dB = Aᵀ G
    };
  }
  return make_result(tp, std::move(out_shape), std::move(y), live_parents({&a, &b}), std::move(back));
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_shape(a.shape == b.shape, "add", a.shape, b.shape);
  int64_t n = a.size();
  std::vector<Scalar> y(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    y[static_cast<size_t>(i)] = (*a.values)[static_cast<size_t>(i)] + (*b.values)[static_cast<size_t>(i)];
  Tape* tp = tape_of({&a, &b});
  BackwardFn back;
  if (tp) {
    int an = a.on_tape() ? a.node : -1;
    int bn = b.on_tape() ? b.node : -1;
    back = [an, bn, n](const Scalar* g, Tape& t) {
      if (an >= 0) {
        Scalar* ga = t.grad_buffer(an);
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bn >= 0) {
        Scalar* gb = t.grad_buffer(bn);
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    };
  }
  return make_result(tp, a.shape, std::move(y), live_parents({&a, &b}), std::move(back));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_shape(a.shape == b.shape, "sub", a.shape, b.shape);
  int64_t n = a.size();
  std::vector<Scalar> y(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    y[static_cast<size_t>(i)] = (*a.values)[static_cast<size_t>(i)] - (*b.values)[static_cast<size_t>(i)];
  Tape* tp = tape_of({&a, &b});
  BackwardFn back;
  if (tp) {
    int an = a.on_tape() ? a.node : -1;
    int bn = b.on_tape() ? b.node : -1;
    back = [an, bn, n](const Scalar* g, Tape& t) {
      if (an >= 0) {
        Scalar* ga = t.grad_buffer(an);
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bn >= 0) {
        Scalar* gb = t.grad_buffer(bn);
        for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
      }
    };
  }
  return make_result(tp, a.shape, std::move(y), live_parents({&a, &b}), std::move(back));
}

Tensor add_row_broadcast(const Tensor& m, const Tensor& b) {
  check_shape(m.rank() == 2 && b.rank() == 1 && b.dim(0) == m.dim(1), "add_row_broadcast",
              m.shape, b.shape);
  int r = m.dim(0), c = m.dim(1);
  std::vector<Scalar> y(static_cast<size_t>(r) * c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      y[static_cast<size_t>(i) * c + j] = (*m.values)[static_cast<size_t>(i) * c + j] + (*b.values)[static_cast<size_t>(j)];
  Tape* tp = tape_of({&m, &b});
  BackwardFn back;
  if (tp) {
    int mn = m.on_tape() ? m.node : -1;
    int bn = b.on_tape() ? b.node : -1;
    back = [mn, bn, r, c](const Scalar* g, Tape& t) {
      if (mn >= 0) {
        Scalar* gm = t.grad_buffer(mn);
        for (int64_t i = 0; i < static_cast<int64_t>(r) * c; ++i) gm[i] += g[i];
      }
      if (bn >= 0) {
        Scalar* gb = t.grad_buffer(bn);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) gb[j] += g[static_cast<size_t>(i) * c + j];
      }
    };
  }
  return make_result(tp, m.shape, std::move(y), live_parents({&m, &b}), std::move(back));
}

Tensor add_col_broadcast(const Tensor& m, const Tensor& b) {
  check_shape(m.rank() == 2 && b.rank() == 1 && b.dim(0) == m.dim(0), "add_col_broadcast",
              m.shape, b.shape);
  int r = m.dim(0), c = m.dim(1);
  std::vector<Scalar> y(static_cast<size_t>(r) * c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      y[static_cast<size_t>(i) * c + j] = (*m.values)[static_cast<size_t>(i) * c + j] + (*b.values)[static_cast<size_t>(i)];
  Tape* tp = tape_of({&m, &b});
  BackwardFn back;
  if (tp) {
    int mn = m.on_tape() ? m.node : -1;
    int bn = b.on_tape() ? b.node : -1;
    back = [mn, bn, r, c](const Scalar* g, Tape& t) {
      if (mn >= 0) {
        Scalar* gm = t.grad_buffer(mn);
        for (int64_t i = 0; i < static_cast<int64_t>(r) * c; ++i) gm[i] += g[i];
      }
      if (bn >= 0) {
        Scalar* gb = t.grad_buffer(bn);
        for (int i = 0; i < r; ++i) {
          Scalar s = 0.0;
          for (int j = 0; j < c; ++j) s += g[static_cast<size_t>(i) * c + j];
          gb[i] += s;
        }
      }
    };
  }
  return make_result(tp, m.shape, std::move(y), live_parents({&m, &b}), std::move(back));
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  check_shape(a.shape == b.shape, "hadamard", a.shape, b.shape);
  int64_t n = a.size();
  std::vector<Scalar> y(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    y[static_cast<size_t>(i)] = (*a.values)[static_cast<size_t>(i)] * (*b.values)[static_cast<size_t>(i)];
  Tape* tp = tape_of({&a, &b});
  BackwardFn back;
  if (tp) {
    auto av = a.values; auto bv = b.values;
    int an = a.on_tape() ? a.node : -1;
    int bn = b.on_tape() ? b.node : -1;
    back = [av, bv, an, bn, n](const Scalar* g, Tape& t) {
      if (an >= 0) {
        Scalar* ga = t.grad_buffer(an);
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * (*bv)[static_cast<size_t>(i)];
      }
      if (bn >= 0) {
        Scalar* gb = t.grad_buffer(bn);
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * (*av)[static_cast<size_t>(i)];
      }
    };
  }
  return make_result(tp, a.shape, std::move(y), live_parents({&a, &b}), std::move(back));
}

Tensor transpose(const Tensor& a) {
  check_shape(a.rank() == 2, "transpose", a.shape, a.shape);
  int r = a.dim(0), c = a.dim(1);
  std::vector<Scalar> y(static_cast<size_t>(r) * c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) y[static_cast<size_t>(j) * r + i] = (*a.values)[static_cast<size_t>(i) * c + j];
  Tape* tp = tape_of({&a});
  BackwardFn back;
  if (tp) {
    int an = a.node;
    back = [an, r, c](const Scalar* g, Tape& t) {
      Scalar* ga = t.grad_buffer(an);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) ga[static_cast<size_t>(i) * c + j] += g[static_cast<size_t>(j) * r + i];
    };
  }
  return make_result(tp, {c, r}, std::move(y), live_parents({&a}), std::move(back));
}

Tensor concat_last_dim(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_last_dim: no parts");
  int64_t total = 0;
  for (const auto& p : parts) {
    check_shape(p.rank() == 1, "concat_last_dim", p.shape, p.shape);
    total += p.size();
  }
  std::vector<Scalar> y;
  y.reserve(static_cast<size_t>(total));
  for (const auto& p : parts) y.insert(y.end(), p.values->begin(), p.values->end());
  Tape* tp = nullptr;
  for (const auto& p : parts)
    if (p.on_tape()) tp = p.tape;
  BackwardFn back;
  std::vector<int> parents;
  if (tp) {
    std::vector<std::pair<int, int64_t>> segs;  // (node, length), node -1 for constants
    for (const auto& p : parts) {
      segs.emplace_back(p.on_tape() ? p.node : -1, p.size());
      if (p.on_tape()) parents.push_back(p.node);
    }
    back = [segs](const Scalar* g, Tape& t) {
      int64_t off = 0;
      for (auto [node, len] : segs) {
        if (node >= 0) {
          Scalar* gp = t.grad_buffer(node);
          for (int64_t i = 0; i < len; ++i) gp[i] += g[off + i];
        }
        off += len;
      }
    };
  }
  return make_result(tp, {static_cast<int>(total)}, std::move(y), std::move(parents), std::move(back));
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols: no parts");
  int rows = parts.front().dim(0);
  int cols = 0;
  for (const auto& p : parts) {
    check_shape(p.rank() == 2 && p.dim(0) == rows, "concat_cols", parts.front().shape, p.shape);
    cols += p.dim(1);
  }
  std::vector<Scalar> y(static_cast<size_t>(rows) * cols);
  int coff = 0;
  for (const auto& p : parts) {
    int pc = p.dim(1);
    for (int i = 0; i < rows; ++i)
      std::memcpy(&y[static_cast<size_t>(i) * cols + coff], &(*p.values)[static_cast<size_t>(i) * pc],
                  sizeof(Scalar) * static_cast<size_t>(pc));
    coff += pc;
  }
  Tape* tp = nullptr;
  for (const auto& p : parts)
    if (p.on_tape()) tp = p.tape;
  BackwardFn back;
  std::vector<int> parents;
  if (tp) {
    std::vector<std::pair<int, int>> segs;  // (node, width)
    for (const auto& p : parts) {
      segs.emplace_back(p.on_tape() ? p.node : -1, p.dim(1));
      if (p.on_tape()) parents.push_back(p.node);
    }
    back = [segs, rows, cols](const Scalar* g, Tape& t) {
      int off = 0;
      for (auto [node, w] : segs) {
        if (node >= 0) {
          Scalar* gp = t.grad_buffer(node);
          for (int i = 0; i < rows; ++i)
            for (int j = 0; j < w; ++j)
              gp[static_cast<size_t>(i) * w + j] += g[static_cast<size_t>(i) * cols + off + j];
        }
        off += w;
      }
    };
  }
  return make_result(tp, {rows, cols}, std::move(y), std::move(parents), std::move(back));
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
  check_shape(a.rank() == 2 && 0 <= c0 && c0 < c1 && c1 <= a.dim(1), "slice_cols", a.shape,
              {c0, c1});
  int r = a.dim(0), c = a.dim(1), w = c1 - c0;
  std::vector<Scalar> y(static_cast<size_t>(r) * w);
  for (int i = 0; i < r; ++i)
    std::memcpy(&y[static_cast<size_t>(i) * w], &(*a.values)[static_cast<size_t>(i) * c + c0],
                sizeof(Scalar) * static_cast<size_t>(w));
  Tape* tp = tape_of({&a});
  BackwardFn back;
  if (tp) {
    int an = a.node;
    back = [an, r, c, c0, w](const Scalar* g, Tape& t) {
      Scalar* ga = t.grad_buffer(an);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j) ga[static_cast<size_t>(i) * c + c0 + j] += g[static_cast<size_t>(i) * w + j];
    };
  }
  return make_result(tp, {r, w}, std::move(y), live_parents({&a}), std::move(back));
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ShapeMismatch("stack_rows: no rows");
  int n = rows.front().dim(0);
  for (const auto& rt : rows)
    check_shape(rt.rank() == 1 && rt.dim(0) == n, "stack_rows", rows.front().shape, rt.shape);
  int T = static_cast<int>(rows.size());
  std::vector<Scalar> y(static_cast<size_t>(T) * n);
  for (int i = 0; i < T; ++i)
    std::memcpy(&y[static_cast<size_t>(i) * n], rows[static_cast<size_t>(i)].data(),
                sizeof(Scalar) * static_cast<size_t>(n));
  Tape* tp = nullptr;
  for (const auto& rt : rows)
    if (rt.on_tape()) tp = rt.tape;
  BackwardFn back;
  std::vector<int> parents;
  if (tp) {
    std::vector<int> nodes;
    for (const auto& rt : rows) {
      nodes.push_back(rt.on_tape() ? rt.node : -1);
      if (rt.on_tape()) parents.push_back(rt.node);
    }
    back = [nodes, n](const Scalar* g, Tape& t) {
      for (size_t i = 0; i < nodes.size(); ++i) {
        if (nodes[i] < 0) continue;
        Scalar* gp = t.grad_buffer(nodes[i]);
        for (int j = 0; j < n; ++j) gp[j] += g[i * static_cast<size_t>(n) + j];
      }
    };
  }
  return make_result(tp, {T, n}, std::move(y), std::move(parents), std::move(back));
}

Tensor reshape(const Tensor& a, Shape s) {
  check_shape(numel(s) == a.size(), "reshape", a.shape, s);
  std::vector<Scalar> y(*a.values);
  Tape* tp = tape_of({&a});
  BackwardFn back;
  if (tp) {
    int an = a.node;
    int64_t n = a.size();
    back = [an, n](const Scalar* g, Tape& t) {
      Scalar* ga = t.grad_buffer(an);
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
    };
  }
  return make_result(tp, std::move(s), std::move(y), live_parents({&a}), std::move(back));
}

// ---- reductions ------------------------------------------------------------

Tensor reduce_sum(const Tensor& a, int axis) {
  check_shape(a.rank() == 2 && (axis == 0 || axis == 1), "reduce_sum", a.shape, {axis});
  int r = a.dim(0), c = a.dim(1);
  int out_n = axis == 0 ? c : r;
  std::vector<Scalar> y(static_cast<size_t>(out_n), 0.0);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      y[static_cast<size_t>(axis == 0 ? j : i)] += (*a.values)[static_cast<size_t>(i) * c + j];
  Tape* tp = tape_of({&a});
  BackwardFn back;
  if (tp) {
    int an = a.node;
    back = [an, r, c, axis](const Scalar* g, Tape& t) {
      Scalar* ga = t.grad_buffer(an);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) ga[static_cast<size_t>(i) * c + j] += g[axis == 0 ? j : i];
    };
  }
  return make_result(tp, {out_n}, std::move(y), live_parents({&a}), std::move(back));
}

Tensor reduce_mean(const Tensor& a, int axis) {
  int denom = axis == 0 ? a.dim(0) : a.dim(1);
  return scale(reduce_sum(a, axis), 1.0 / denom);
}

Tensor reduce_sum_all(const Tensor& a) {
  int64_t n = a.size();
  Scalar s = std::accumulate(a.values->begin(), a.values->end(), 0.0);
  Tape* tp = tape_of({&a});
  BackwardFn back;
  if (tp) {
    int an = a.node;
    back = [an, n](const Scalar* g, Tape& t) {
      Scalar* ga = t.grad_buffer(an);
      for (int64_t i = 0; i < n; ++i) ga[i] += g[0];
    };
  }
  return make_result(tp, {1}, {s}, live_parents({&a}), std::move(back));
}

Tensor reduce_mean_all(const Tensor& a) { return scale(reduce_sum_all(a), 1.0 / a.size()); }

// ---- scalar arithmetic -----------------------------------------------------

Tensor scale(const Tensor& a, Scalar cf) {
  return unary_pointwise(a, [cf](Scalar x) { return cf * x; },
                         [cf](Scalar, Scalar) { return cf; }, "scale");
}

Tensor add_const(const Tensor& a, Scalar cf) {
  return unary_pointwise(a, [cf](Scalar x) { return x + cf; },
                         [](Scalar, Scalar) { return 1.0; }, "add_const");
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  check_shape(s.size() == 1, "mul_scalar", a.shape, s.shape);
  Scalar sv = (*s.values)[0];
  int64_t n = a.size();
  std::vector<Scalar> y(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) y[static_cast<size_t>(i)] = sv * (*a.values)[static_cast<size_t>(i)];
  Tape* tp = tape_of({&a, &s});
  BackwardFn back;
  if (tp) {
    auto av = a.values;
    int an = a.on_tape() ? a.node : -1;
    int sn = s.on_tape() ? s.node : -1;
    back = [av, an, sn, sv, n](const Scalar* g, Tape& t) {
      if (an >= 0) {
        Scalar* ga = t.grad_buffer(an);
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * sv;
      }
      if (sn >= 0) {
        Scalar acc = 0.0;
        for (int64_t i = 0; i < n; ++i) acc += g[i] * (*av)[static_cast<size_t>(i)];
        t.grad_buffer(sn)[0] += acc;
      }
    };
  }
  return make_result(tp, a.shape, std::move(y), live_parents({&a, &s}), std::move(back));
}

Tensor div_scalar(const Tensor& a, const Tensor& s) {
  check_shape(s.size() == 1, "div_scalar", a.shape, s.shape);
  Scalar sv = (*s.values)[0];
  int64_t n = a.size();
  std::vector<Scalar> y(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) y[static_cast<size_t>(i)] = (*a.values)[static_cast<size_t>(i)] / sv;
  Tape* tp = tape_of({&a, &s});
  BackwardFn back;
  if (tp) {
    auto av = a.values;
    int an = a.on_tape() ? a.node : -1;
    int sn = s.on_tape() ? s.node : -1;
    back = [av, an, sn, sv, n](const Scalar* g, Tape& t) {
      if (an >= 0) {
        Scalar* ga = t.grad_buffer(an);
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] / sv;
      }
      if (sn >= 0) {
        Scalar acc = 0.0;
        for (int64_t i = 0; i < n; ++i) acc += g[i] * (*av)[static_cast<size_t>(i)];
        t.grad_buffer(sn)[0] -= acc / (sv * sv);
      }
    };
  }
  return make_result(tp, a.shape, std::move(y), live_parents({&a, &s}), std::move(back));
}

// ---- nonlinearities --------------------------------------------------------

Tensor gelu(const Tensor& a) {
  // exact (erf) form: x·Φ(x); derivative Φ(x) + x·φ(x)
  constexpr Scalar inv_sqrt2 = 0.70710678118654752440;
  constexpr Scalar inv_sqrt2pi = 0.39894228040143267794;
  return unary_pointwise(
      a, [](Scalar x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](Scalar x, Scalar) {
        Scalar cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        Scalar pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      },
      "gelu");
}

Tensor sigmoid(const Tensor& a) {
  return unary_pointwise(
      a,
      [](Scalar x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](Scalar, Scalar y) { return y * (1.0 - y); }, "sigmoid");
}

Tensor tanh_t(const Tensor& a) {
  return unary_pointwise(a, [](Scalar x) { return std::tanh(x); },
                         [](Scalar, Scalar y) { return 1.0 - y * y; }, "tanh");
}

Tensor softmax_last_dim(const Tensor& a) {
  check_shape(a.rank() == 1 || a.rank() == 2, "softmax_last_dim", a.shape, a.shape);
  int rows = a.rank() == 2 ? a.dim(0) : 1;
  int cols = a.rank() == 2 ? a.dim(1) : a.dim(0);
  std::vector<Scalar> y(static_cast<size_t>(rows) * cols);
  for (int i = 0; i < rows; ++i) {
    const Scalar* xr = a.data() + static_cast<size_t>(i) * cols;
    Scalar* yr = y.data() + static_cast<size_t>(i) * cols;
    Scalar mx = *std::max_element(xr, xr + cols);
    Scalar z = 0.0;
    for (int j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    for (int j = 0; j < cols; ++j) yr[j] /= z;
  }
  auto yv = std::make_shared<std::vector<Scalar>>(std::move(y));
  Tape* tp = tape_of({&a});
  Tensor out;
  out.shape = a.shape;
  out.values = yv;
  if (tp) {
    int an = a.node;
    BackwardFn back = [an, yv, rows, cols](const Scalar* g, Tape& t) {
      Scalar* ga = t.grad_buffer(an);
      for (int i = 0; i < rows; ++i) {
        const Scalar* yr = yv->data() + static_cast<size_t>(i) * cols;
        const Scalar* gr = g + static_cast<size_t>(i) * cols;
        Scalar dot = 0.0;
        for (int j = 0; j < cols; ++j) dot += gr[j] * yr[j];
        Scalar* gar = ga + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) gar[j] += (gr[j] - dot) * yr[j];
      }
    };
    out.tape = tp;
    out.node = tp->emit(out.size(), live_parents({&a}), std::move(back));
  }
  return out;
}

// ---- normalisation ---------------------------------------------------------

Tensor layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias) {
  check_shape(a.rank() == 2, "layernorm", a.shape, a.shape);
  int r = a.dim(0), c = a.dim(1);
  check_shape(gain.rank() == 1 && gain.dim(0) == c && bias.rank() == 1 && bias.dim(0) == c,
              "layernorm", a.shape, gain.shape);
  constexpr Scalar eps = 1e-5;
  std::vector<Scalar> y(static_cast<size_t>(r) * c);
  auto xhat = std::make_shared<std::vector<Scalar>>(static_cast<size_t>(r) * c);
  auto inv_std = std::make_shared<std::vector<Scalar>>(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    const Scalar* xr = a.data() + static_cast<size_t>(i) * c;
    Scalar mu = 0.0;
    for (int j = 0; j < c; ++j) mu += xr[j];
    mu /= c;
    Scalar var = 0.0;
    for (int j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= c;
    Scalar is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(i)] = is;
    for (int j = 0; j < c; ++j) {
      Scalar xh = (xr[j] - mu) * is;
      (*xhat)[static_cast<size_t>(i) * c + j] = xh;
      y[static_cast<size_t>(i) * c + j] = (*gain.values)[static_cast<size_t>(j)] * xh + (*bias.values)[static_cast<size_t>(j)];
    }
  }
  Tape* tp = tape_of({&a, &gain, &bias});
  BackwardFn back;
  if (tp) {
    auto gv = gain.values;
    int an = a.on_tape() ? a.node : -1;
    int gn = gain.on_tape() ? gain.node : -1;
    int bn = bias.on_tape() ? bias.node : -1;
    back = [an, gn, bn, gv, xhat, inv_std, r, c](const Scalar* g, Tape& t) {
      for (int i = 0; i < r; ++i) {
        const Scalar* gr = g + static_cast<size_t>(i) * c;
        const Scalar* xh = xhat->data() + static_cast<size_t>(i) * c;
        if (gn >= 0) {
          Scalar* gg = t.grad_buffer(gn);
          for (int j = 0; j < c; ++j) gg[j] += gr[j] * xh[j];
        }
        if (bn >= 0) {
          Scalar* gb = t.grad_buffer(bn);
          for (int j = 0; j < c; ++j) gb[j] += gr[j];
        }
        if (an >= 0) {
          // dL/dx = is/c * (c*dxh - sum(dxh) - xh * sum(dxh*xh)), dxh = g*gain
          Scalar s1 = 0.0, s2 = 0.0;
          for (int j = 0; j < c; ++j) {
            Scalar dxh = gr[j] * (*gv)[static_cast<size_t>(j)];
            s1 += dxh;
            s2 += dxh * xh[j];
          }
          Scalar is = (*inv_std)[static_cast<size_t>(i)];
          Scalar* ga = t.grad_buffer(an) + static_cast<size_t>(i) * c;
          for (int j = 0; j < c; ++j) {
            Scalar dxh = gr[j] * (*gv)[static_cast<size_t>(j)];
            ga[j] += is * (dxh - (s1 + xh[j] * s2) / c);
          }
        }
      }
    };
  }
  return make_result(tp, a.shape, std::move(y), live_parents({&a, &gain, &bias}), std::move(back));
}

Tensor batchnorm_cols(const Tensor& a, const Tensor& gamma, const Tensor& beta, BnState& state,
                      bool train, Scalar momentum, Scalar eps) {
  check_shape(a.rank() == 2, "batchnorm_cols", a.shape, a.shape);
  int d = a.dim(0), m = a.dim(1);
  check_shape(gamma.rank() == 1 && gamma.dim(0) == d && beta.rank() == 1 && beta.dim(0) == d,
              "batchnorm_cols", a.shape, gamma.shape);
  check_shape(state.channels() == d, "batchnorm_cols", a.shape,
              {state.channels()});
  std::vector<Scalar> y(static_cast<size_t>(d) * m);
  auto xhat = std::make_shared<std::vector<Scalar>>(static_cast<size_t>(d) * m);
  auto inv_std = std::make_shared<std::vector<Scalar>>(static_cast<size_t>(d));
  for (int i = 0; i < d; ++i) {
    const Scalar* xr = a.data() + static_cast<size_t>(i) * m;
    Scalar mu, var;
    if (train) {
      mu = 0.0;
      for (int j = 0; j < m; ++j) mu += xr[j];
      mu /= m;
      var = 0.0;
      for (int j = 0; j < m; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var /= m;  // biased, used for normalisation
      Scalar unbiased = m > 1 ? var * m / (m - 1) : var;
      state.running_mean[static_cast<size_t>(i)] =
          (1.0 - momentum) * state.running_mean[static_cast<size_t>(i)] + momentum * mu;
      state.running_var[static_cast<size_t>(i)] =
          (1.0 - momentum) * state.running_var[static_cast<size_t>(i)] + momentum * unbiased;
    } else {
      mu = state.running_mean[static_cast<size_t>(i)];
      var = state.running_var[static_cast<size_t>(i)];
    }
    Scalar is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(i)] = is;
    for (int j = 0; j < m; ++j) {
      Scalar xh = (xr[j] - mu) * is;
      (*xhat)[static_cast<size_t>(i) * m + j] = xh;
      y[static_cast<size_t>(i) * m + j] = (*gamma.values)[static_cast<size_t>(i)] * xh + (*beta.values)[static_cast<size_t>(i)];
    }
  }
  Tape* tp = tape_of({&a, &gamma, &beta});
  BackwardFn back;
  if (tp) {
    auto gv = gamma.values;
    int an = a.on_tape() ? a.node : -1;
    int gn = gamma.on_tape() ? gamma.node : -1;
    int bn = beta.on_tape() ? beta.node : -1;
    back = [an, gn, bn, gv, xhat, inv_std, d, m, train](const Scalar* g, Tape& t) {
      for (int i = 0; i < d; ++i) {
        const Scalar* gr = g + static_cast<size_t>(i) * m;
        const Scalar* xh = xhat->data() + static_cast<size_t>(i) * m;
        if (gn >= 0) {
          Scalar s = 0.0;
          for (int j = 0; j < m; ++j) s += gr[j] * xh[j];
          t.grad_buffer(gn)[i] += s;
        }
        if (bn >= 0) {
          Scalar s = 0.0;
          for (int j = 0; j < m; ++j) s += gr[j];
          t.grad_buffer(bn)[i] += s;
        }
        if (an >= 0) {
          Scalar is = (*inv_std)[static_cast<size_t>(i)];
          Scalar gm = (*gv)[static_cast<size_t>(i)];
          Scalar* ga = t.grad_buffer(an) + static_cast<size_t>(i) * m;
          if (train) {
            Scalar s1 = 0.0, s2 = 0.0;
            for (int j = 0; j < m; ++j) {
              s1 += gr[j];
              s2 += gr[j] * xh[j];
            }
            for (int j = 0; j < m; ++j)
              ga[j] += gm * is * (gr[j] - (s1 + xh[j] * s2) / m);
          } else {
            // frozen statistics: affine in the input
            for (int j = 0; j < m; ++j) ga[j] += gm * is * gr[j];
          }
        }
      }
    };
  }
  return make_result(tp, a.shape, std::move(y), live_parents({&a, &gamma, &beta}), std::move(back));
}

// ---- stochastic / loss -----------------------------------------------------

Tensor dropout(const Tensor& a, Scalar p, bool train, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0,1)");
  if (!train || p == 0.0) {
    // identity in eval mode, but still pass gradients through
    return scale(a, 1.0);
  }
  int64_t n = a.size();
  Scalar keep = 1.0 - p;
  auto mask = std::make_shared<std::vector<Scalar>>(static_cast<size_t>(n));
  std::vector<Scalar> y(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    Scalar mi = rng.u01() < p ? 0.0 : 1.0 / keep;  // inverted scaling
    (*mask)[static_cast<size_t>(i)] = mi;
    y[static_cast<size_t>(i)] = (*a.values)[static_cast<size_t>(i)] * mi;
  }
  Tape* tp = tape_of({&a});
  BackwardFn back;
  if (tp) {
    int an = a.node;
    back = [an, mask, n](const Scalar* g, Tape& t) {
      Scalar* ga = t.grad_buffer(an);
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * (*mask)[static_cast<size_t>(i)];
    };
  }
  return make_result(tp, a.shape, std::move(y), live_parents({&a}), std::move(back));
}

Tensor cross_entropy_with_logits(const Tensor& logits, int label) {
  check_shape(logits.rank() == 1, "cross_entropy_with_logits", logits.shape, logits.shape);
  int c = logits.dim(0);
  if (label < 0 || label >= c)
    throw std::invalid_argument("cross_entropy_with_logits: label out of range");
  const Scalar* x = logits.data();
  Scalar mx = *std::max_element(x, x + c);
  Scalar z = 0.0;
  for (int j = 0; j < c; ++j) z += std::exp(x[j] - mx);
  Scalar loss = std::log(z) + mx - x[label];
  auto prob = std::make_shared<std::vector<Scalar>>(static_cast<size_t>(c));
  for (int j = 0; j < c; ++j) (*prob)[static_cast<size_t>(j)] = std::exp(x[j] - mx) / z;
  Tape* tp = tape_of({&logits});
  BackwardFn back;
  if (tp) {
    int ln = logits.node;
    back = [ln, prob, label, c](const Scalar* g, Tape& t) {
      Scalar* gl = t.grad_buffer(ln);
      for (int j = 0; j < c; ++j)
        gl[j] += g[0] * ((*prob)[static_cast<size_t>(j)] - (j == label ? 1.0 : 0.0));
    };
  }
  return make_result(tp, {1}, {loss}, live_parents({&logits}), std::move(back));
}

Tensor frobenius_norm(const Tensor& a) {
  Scalar ss = 0.0;
  for (Scalar v : *a.values) ss += v * v;
  Scalar norm = std::sqrt(ss);
  Tape* tp = tape_of({&a});
  BackwardFn back;
  if (tp) {
    auto av = a.values;
    int an = a.node;
    int64_t n = a.size();
    back = [an, av, norm, n](const Scalar* g, Tape& t) {
      if (norm == 0.0) return;  // subgradient 0 at the origin
      Scalar* ga = t.grad_buffer(an);
      for (int64_t i = 0; i < n; ++i) ga[i] += g[0] * (*av)[static_cast<size_t>(i)] / norm;
    };
  }
  return make_result(tp, {1}, {norm}, live_parents({&a}), std::move(back));
}

Tensor elementwise_max_reduce(const Tensor& a) {
  if (a.size() == 0) throw ShapeMismatch("elementwise_max_reduce: empty tensor");
  int64_t arg = 0;
  Scalar best = (*a.values)[0];
  for (int64_t i = 1; i < a.size(); ++i) {
    if ((*a.values)[static_cast<size_t>(i)] > best) {
      best = (*a.values)[static_cast<size_t>(i)];
      arg = i;
    }
  }
  Tape* tp = tape_of({&a});
  BackwardFn back;
  if (tp) {
    int an = a.node;
    back = [an, arg](const Scalar* g, Tape& t) { t.grad_buffer(an)[arg] += g[0]; };
  }
  return make_result(tp, {1}, {best}, live_parents({&a}), std::move(back));
}

// ---- finite-difference verification ----------------------------------------

double grad_check(const GradCheckFn& f, const std::vector<Tensor>& point, double eps) {
  if (eps < 1e-7 || eps > 1e-3) throw std::invalid_argument("grad_check: eps out of [1e-7,1e-3]");
  // analytic gradients
  Tape tape;
  std::vector<Tensor> leaves;
  leaves.reserve(point.size());
  for (const auto& p : point) leaves.push_back(tape.leaf(p.shape, *p.values));
  Tensor loss = f(tape, leaves);
  if (loss.size() != 1) throw NotScalar("grad_check: f must return a scalar");
  tape.backward(loss);
  std::vector<std::vector<Scalar>> analytic;
  for (const auto& l : leaves) analytic.push_back(tape.grad_of(l));

  auto eval_at = [&](const std::vector<Tensor>& pt) -> Scalar {
    Tape t2;
    std::vector<Tensor> ls;
    ls.reserve(pt.size());
    for (const auto& p : pt) ls.push_back(t2.leaf(p.shape, *p.values));
    return f(t2, ls).item();
  };

  double max_err = 0.0;
  std::vector<Tensor> work;
  work.reserve(point.size());
  for (const auto& p : point) work.push_back(Tensor::constant(p.shape, *p.values));
  for (size_t ti = 0; ti < work.size(); ++ti) {
    auto& vals = *work[ti].values;
    for (size_t i = 0; i < vals.size(); ++i) {
      Scalar keep = vals[i];
      vals[i] = keep + eps;
      Scalar fp = eval_at(work);
      vals[i] = keep - eps;
      Scalar fm = eval_at(work);
      vals[i] = keep;
      Scalar fd = (fp - fm) / (2.0 * eps);
      Scalar an = analytic[ti][i];
      double err = std::abs(an - fd) / std::max(1.0, std::abs(an));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace stagin::ad
