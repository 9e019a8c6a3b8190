#include "imo/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "imo/errors.hpp"

namespace imo::ad {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::MatMulNT: return "matmul_nt";
    case OpKind::Transpose: return "transpose";
    case OpKind::Reshape: return "reshape";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Abs: return "abs";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::LayerNorm: return "layernorm";
    case OpKind::Gather: return "gather";
    case OpKind::Concat: return "concat";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Cosine: return "cosine";
    case OpKind::UnitStep: return "unit_step";
  }
  return "?";
}

double long_tailed_factor(double t) {
  const double a = std::fabs(t);
  if (a <= 0.4) return 2.0 - 4.0 * a;
  if (a <= 1.0) return 0.4;
  return 0.0;
}

double clipped_ste_factor(double t) { return std::fabs(t) <= 1.0 ? 1.0 : 0.0; }

double surrogate_factor(Surrogate s, double t) {
  return s == Surrogate::LongTailed ? long_tailed_factor(t) : clipped_ste_factor(t);
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) {
  slots_.push_back(Slot{std::move(value), {}, false, nullptr, nullptr});
  return Var(this, static_cast<int>(slots_.size() - 1));
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  slots_.push_back(Slot{std::move(value), {}, requires_grad && record_, nullptr, nullptr});
  return Var(this, static_cast<int>(slots_.size() - 1));
}

Var Tape::param(Parameter& p) {
  const bool rg = p.trainable && record_;
  if (rg && p.grad.shape != p.value.shape) p.zero_grad();
  // The slot borrows the parameter value; it must outlive the tape unchanged.
  slots_.push_back(Slot{Tensor(Shape{0}), {}, rg, rg ? &p : nullptr, &p.value});
  return Var(this, static_cast<int>(slots_.size() - 1));
}

Tensor Tape::grad(Var v) const {
  const Slot& s = slots_.at(v.id());
  if (s.param) return s.param->grad;
  if (s.grad.empty()) return Tensor(s.get().shape, 0.0);
  return Tensor(s.get().shape, s.grad);
}

Var Tape::record(OpKind kind, std::vector<int> inputs, Tensor out, BackwardFn fn) {
  if (!out.all_finite()) {
    throw ContractError(std::string(op_name(kind)) + " produced a non-finite value");
  }
  bool rg = false;
  if (record_) {
    for (int id : inputs) rg = rg || slots_[id].requires_grad;
  }
  slots_.push_back(Slot{std::move(out), {}, rg, nullptr, nullptr});
  const int out_id = static_cast<int>(slots_.size() - 1);
  if (rg) nodes_.push_back(Node{kind, std::move(inputs), out_id, std::move(fn)});
  return Var(this, out_id);
}

double* Tape::grad_ptr(int id) {
  Slot& s = slots_[id];
  if (!s.requires_grad) return nullptr;
  if (s.param) return s.param->grad.data.data();
  if (s.grad.empty()) s.grad.assign(s.get().size(), 0.0);
  return s.grad.data();
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw UsageError("backward: loss does not belong to this tape");
  if (consumed_) throw UsageError("backward: tape already consumed; re-run the forward pass");
  if (!record_) throw UsageError("backward: tape was created without recording");
  const Slot& ls = slots_.at(loss.id());
  if (ls.get().size() != 1) {
    throw UsageError("backward: loss must be scalar, got shape " + shape_string(ls.get().shape));
  }
  if (!ls.requires_grad) throw UsageError("backward: loss was not produced by recorded ops");
  consumed_ = true;
  grad_ptr(loss.id())[0] += 1.0;
  visits_.assign(nodes_.size(), 0);
  for (std::size_t k = nodes_.size(); k-- > 0;) {
    const Node& n = nodes_[k];
    ++visits_[k];
    if (slots_[n.output].grad.empty()) continue;
    n.backward(*this, n);
  }
}

// ---------------------------------------------------------------------------
// Kernels: row-major, accumulate into C.

namespace {

// C[n x m] += A[n x k] * B[k x m]
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = c + i * m;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[n x m] += A[n x k] * B[m x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* bj = b + j * k;
      double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      std::size_t p = 0;
      for (; p + 4 <= k; p += 4) {
        s0 += ai[p] * bj[p];
        s1 += ai[p + 1] * bj[p + 1];
        s2 += ai[p + 2] * bj[p + 2];
        s3 += ai[p + 3] * bj[p + 3];
      }
      for (; p < k; ++p) s0 += ai[p] * bj[p];
      c[i * m + j] += (s0 + s1) + (s2 + s3);
    }
  }
}

// C[n x m] += A[k x n]^T * B[k x m]
void gemm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * n;
    const double* bp = b + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c + i * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

Tape* common_tape(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw UsageError("op on an empty Var");
    if (t && v.tape() != t) throw UsageError("op mixes Vars from different tapes");
    t = v.tape();
  }
  return t;
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ContractError(std::string(op) + ": expected rank-2 operand, got " +
                        shape_string(t.shape));
  }
}

/// Size of `b` for broadcasting against `a`, or throws.
std::size_t broadcast_size(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape == b.shape || b.size() == 1) return b.size();
  if (b.rank() <= a.rank() && std::equal(b.shape.rbegin(), b.shape.rend(), a.shape.rbegin())) {
    return b.size();
  }
  throw ContractError(std::string(op) + ": shape mismatch " + shape_string(a.shape) + " vs " +
                      shape_string(b.shape));
}

template <typename F, typename G>
Var unary(Var a, OpKind kind, F forward, G derivative) {
  Tape* t = common_tape({a});
  const Tensor& x = a.value();
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = forward(x.data[i]);
  return t->record(kind, {a.id()}, std::move(out), [derivative](Tape& tp, const Tape::Node& n) {
    double* gx = tp.grad_ptr(n.inputs[0]);
    if (!gx) return;
    const auto& g = tp.out_grad(n);
    const Tensor& x = tp.value(n.inputs[0]);
    const Tensor& y = tp.value(n.output);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * derivative(x.data[i], y.data[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Ops

Var matmul(Var a, Var b) {
  Tape* t = common_tape({a, b});
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_rank2(x, "matmul");
  require_rank2(y, "matmul");
  if (x.shape[1] != y.shape[0]) {
    throw ContractError("matmul: shape mismatch " + shape_string(x.shape) + " vs " +
                        shape_string(y.shape));
  }
  const std::size_t n = x.shape[0], k = x.shape[1], m = y.shape[1];
  Tensor out(Shape{n, m});
  gemm_nn(x.data.data(), y.data.data(), out.data.data(), n, k, m);
  return t->record(OpKind::MatMul, {a.id(), b.id()}, std::move(out),
                   [n, k, m](Tape& tp, const Tape::Node& nd) {
                     const double* g = tp.out_grad(nd).data();
                     if (double* ga = tp.grad_ptr(nd.inputs[0])) {
                       gemm_nt(g, tp.value(nd.inputs[1]).data.data(), ga, n, m, k);
                     }
                     if (double* gb = tp.grad_ptr(nd.inputs[1])) {
                       gemm_tn(tp.value(nd.inputs[0]).data.data(), g, gb, k, n, m);
                     }
                   });
}

Var matmul_nt(Var a, Var b) {
  Tape* t = common_tape({a, b});
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_rank2(x, "matmul_nt");
  require_rank2(y, "matmul_nt");
  if (x.shape[1] != y.shape[1]) {
    throw ContractError("matmul_nt: shape mismatch " + shape_string(x.shape) + " vs " +
                        shape_string(y.shape));
  }
  const std::size_t n = x.shape[0], k = x.shape[1], m = y.shape[0];
  Tensor out(Shape{n, m});
  gemm_nt(x.data.data(), y.data.data(), out.data.data(), n, k, m);
  return t->record(OpKind::MatMulNT, {a.id(), b.id()}, std::move(out),
                   [n, k, m](Tape& tp, const Tape::Node& nd) {
                     const double* g = tp.out_grad(nd).data();
                     if (double* ga = tp.grad_ptr(nd.inputs[0])) {
                       gemm_nn(g, tp.value(nd.inputs[1]).data.data(), ga, n, m, k);
                     }
                     if (double* gb = tp.grad_ptr(nd.inputs[1])) {
                       gemm_tn(g, tp.value(nd.inputs[0]).data.data(), gb, m, n, k);
                     }
                   });
}

Var transpose(Var a) {
  Tape* t = common_tape({a});
  const Tensor& x = a.value();
  require_rank2(x, "transpose");
  const std::size_t r = x.shape[0], c = x.shape[1];
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = x.data[i * c + j];
  return t->record(OpKind::Transpose, {a.id()}, std::move(out),
                   [r, c](Tape& tp, const Tape::Node& nd) {
                     double* gx = tp.grad_ptr(nd.inputs[0]);
                     if (!gx) return;
                     const auto& g = tp.out_grad(nd);
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
                   });
}

Var reshape(Var a, Shape shape) {
  Tape* t = common_tape({a});
  const Tensor& x = a.value();
  if (shape_size(shape) != x.size()) {
    throw ContractError("reshape: cannot view " + shape_string(x.shape) + " as " +
                        shape_string(shape));
  }
  Tensor out(std::move(shape), x.data);
  return t->record(OpKind::Reshape, {a.id()}, std::move(out), [](Tape& tp, const Tape::Node& nd) {
    double* gx = tp.grad_ptr(nd.inputs[0]);
    if (!gx) return;
    const auto& g = tp.out_grad(nd);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var add(Var a, Var b) {
  Tape* t = common_tape({a, b});
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const std::size_t nb = broadcast_size(x, y, "add");
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] + y.data[i % nb];
  return t->record(OpKind::Add, {a.id(), b.id()}, std::move(out),
                   [nb](Tape& tp, const Tape::Node& nd) {
                     const auto& g = tp.out_grad(nd);
                     if (double* ga = tp.grad_ptr(nd.inputs[0]))
                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                     if (double* gb = tp.grad_ptr(nd.inputs[1]))
                       for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i];
                   });
}

Var sub(Var a, Var b) {
  Tape* t = common_tape({a, b});
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const std::size_t nb = broadcast_size(x, y, "sub");
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] - y.data[i % nb];
  return t->record(OpKind::Sub, {a.id(), b.id()}, std::move(out),
                   [nb](Tape& tp, const Tape::Node& nd) {
                     const auto& g = tp.out_grad(nd);
                     if (double* ga = tp.grad_ptr(nd.inputs[0]))
                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                     if (double* gb = tp.grad_ptr(nd.inputs[1]))
                       for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] -= g[i];
                   });
}

Var mul(Var a, Var b) {
  Tape* t = common_tape({a, b});
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const std::size_t nb = broadcast_size(x, y, "mul");
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] * y.data[i % nb];
  return t->record(OpKind::Mul, {a.id(), b.id()}, std::move(out),
                   [nb](Tape& tp, const Tape::Node& nd) {
                     const auto& g = tp.out_grad(nd);
                     const Tensor& x = tp.value(nd.inputs[0]);
                     const Tensor& y = tp.value(nd.inputs[1]);
                     if (double* ga = tp.grad_ptr(nd.inputs[0]))
                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y.data[i % nb];
                     if (double* gb = tp.grad_ptr(nd.inputs[1]))
                       for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i] * x.data[i];
                   });
}

Var scale(Var a, double c) {
  return unary(a, OpKind::Scale, [c](double x) { return c * x; },
               [c](double, double) { return c; });
}

Var exp(Var a) {
  return unary(a, OpKind::Exp, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Var log(Var a) {
  for (double v : a.value().data) {
    if (!(v > 0.0)) throw ContractError("log: non-positive input " + std::to_string(v));
  }
  return unary(a, OpKind::Log, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Var relu(Var a) {
  return unary(a, OpKind::Relu, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
  return unary(a, OpKind::Sigmoid, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}

Var abs(Var a) {
  return unary(a, OpKind::Abs, [](double x) { return std::fabs(x); },
               [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var unit_step(Var t, Surrogate s) {
  return unary(t, OpKind::UnitStep, [](double x) { return x >= 0.0 ? 1.0 : 0.0; },
               [s](double x, double) { return surrogate_factor(s, x); });
}

Var softmax(Var a) {
  Tape* t = common_tape({a});
  const Tensor& x = a.value();
  const std::size_t n = x.last_dim();
  if (n == 0 || x.size() == 0) throw ContractError("softmax: empty last axis");
  const std::size_t rows = x.outer();
  Tensor out(x.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data.data() + r * n;
    double* yr = out.data.data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yr[j] /= z;
  }
  return t->record(OpKind::Softmax, {a.id()}, std::move(out),
                   [rows, n](Tape& tp, const Tape::Node& nd) {
                     double* gx = tp.grad_ptr(nd.inputs[0]);
                     if (!gx) return;
                     const auto& g = tp.out_grad(nd);
                     const Tensor& y = tp.value(nd.output);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double dot = 0.0;
                       for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y.data[r * n + j];
                       for (std::size_t j = 0; j < n; ++j)
                         gx[r * n + j] += y.data[r * n + j] * (g[r * n + j] - dot);
                     }
                   });
}

Var log_softmax(Var a) {
  Tape* t = common_tape({a});
  const Tensor& x = a.value();
  const std::size_t n = x.last_dim();
  if (n == 0 || x.size() == 0) throw ContractError("log_softmax: empty last axis");
  const std::size_t rows = x.outer();
  Tensor out(x.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data.data() + r * n;
    double* yr = out.data.data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(xr[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) yr[j] = xr[j] - lse;
  }
  return t->record(OpKind::LogSoftmax, {a.id()}, std::move(out),
                   [rows, n](Tape& tp, const Tape::Node& nd) {
                     double* gx = tp.grad_ptr(nd.inputs[0]);
                     if (!gx) return;
                     const auto& g = tp.out_grad(nd);
                     const Tensor& y = tp.value(nd.output);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double gs = 0.0;
                       for (std::size_t j = 0; j < n; ++j) gs += g[r * n + j];
                       for (std::size_t j = 0; j < n; ++j)
                         gx[r * n + j] += g[r * n + j] - std::exp(y.data[r * n + j]) * gs;
                     }
                   });
}

Var layernorm(Var x, Var gamma, Var beta, double eps) {
  Tape* t = common_tape({x, gamma, beta});
  const Tensor& in = x.value();
  const std::size_t n = in.last_dim();
  if (n == 0 || in.size() == 0) throw ContractError("layernorm: empty last axis");
  if (gamma.value().size() != n || beta.value().size() != n) {
    throw ContractError("layernorm: shape mismatch " + shape_string(in.shape) + " vs " +
                        shape_string(gamma.value().shape));
  }
  const std::size_t rows = in.outer();
  const Tensor& gm = gamma.value();
  const Tensor& bt = beta.value();
  Tensor out(in.shape);
  std::vector<double> xhat(in.size());
  std::vector<double> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in.data.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    inv[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xr[j] - mu) * inv[r];
      xhat[r * n + j] = h;
      out.data[r * n + j] = h * gm.data[j] + bt.data[j];
    }
  }
  return t->record(
      OpKind::LayerNorm, {x.id(), gamma.id(), beta.id()}, std::move(out),
      [rows, n, xhat = std::move(xhat), inv = std::move(inv)](Tape& tp, const Tape::Node& nd) {
        const auto& g = tp.out_grad(nd);
        const Tensor& gm = tp.value(nd.inputs[1]);
        if (double* gg = tp.grad_ptr(nd.inputs[1]))
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % n] += g[i] * xhat[i];
        if (double* gb = tp.grad_ptr(nd.inputs[2]))
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
        double* gx = tp.grad_ptr(nd.inputs[0]);
        if (!gx) return;
        const double dn = static_cast<double>(n);
        for (std::size_t r = 0; r < rows; ++r) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double gh = g[r * n + j] * gm.data[j];
            s1 += gh;
            s2 += gh * xhat[r * n + j];
          }
          for (std::size_t j = 0; j < n; ++j) {
            const double gh = g[r * n + j] * gm.data[j];
            gx[r * n + j] += inv[r] / dn * (dn * gh - s1 - xhat[r * n + j] * s2);
          }
        }
      });
}

Var gather(Var table, const std::vector<int>& ids) {
  Tape* t = common_tape({table});
  const Tensor& tb = table.value();
  require_rank2(tb, "gather");
  const std::size_t rows = tb.shape[0], d = tb.shape[1];
  Tensor out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw InputError("gather: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(rows) + " rows");
    }
    std::copy_n(tb.data.data() + ids[i] * d, d, out.data.data() + i * d);
  }
  return t->record(OpKind::Gather, {table.id()}, std::move(out),
                   [ids, d](Tape& tp, const Tape::Node& nd) {
                     double* gt = tp.grad_ptr(nd.inputs[0]);
                     if (!gt) return;
                     const auto& g = tp.out_grad(nd);
                     for (std::size_t i = 0; i < ids.size(); ++i)
                       for (std::size_t j = 0; j < d; ++j) gt[ids[i] * d + j] += g[i * d + j];
                   });
}

Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat: no operands");
  Tape* t = parts.front().tape();
  const Shape& s0 = parts.front().value().shape;
  if (s0.empty()) throw ContractError("concat: scalar operand; reshape to [1] first");
  const Shape lead(s0.begin(), s0.end() - 1);
  const std::size_t rows = shape_size(lead);
  std::vector<std::size_t> widths;
  std::vector<int> ids;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.tape() != t) throw UsageError("concat: operands from different tapes");
    const Shape& s = p.value().shape;
    if (s.empty() || Shape(s.begin(), s.end() - 1) != lead) {
      throw ContractError("concat: shape mismatch " + shape_string(s0) + " vs " +
                          shape_string(s));
    }
    widths.push_back(s.back());
    ids.push_back(p.id());
    total += s.back();
  }
  Shape os = lead;
  os.push_back(total);
  Tensor out(os);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data.data() + r * widths[k], widths[k], out.data.data() + r * total + off);
    off += widths[k];
  }
  return t->record(OpKind::Concat, ids, std::move(out),
                   [rows, widths, total](Tape& tp, const Tape::Node& nd) {
                     const auto& g = tp.out_grad(nd);
                     std::size_t off = 0;
                     for (std::size_t k = 0; k < widths.size(); ++k) {
                       if (double* gp = tp.grad_ptr(nd.inputs[k])) {
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < widths[k]; ++j)
                             gp[r * widths[k] + j] += g[r * total + off + j];
                       }
                       off += widths[k];
                     }
                   });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  Tape* t = common_tape({a});
  const Tensor& x = a.value();
  const std::size_t n = x.last_dim();
  if (x.rank() == 0 || begin + count > n) {
    throw ContractError("slice_cols: [" + std::to_string(begin) + ", " +
                        std::to_string(begin + count) + ") outside " + shape_string(x.shape));
  }
  const std::size_t rows = x.outer();
  Shape os = x.shape;
  os.back() = count;
  Tensor out(os);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data.data() + r * n + begin, count, out.data.data() + r * count);
  return t->record(OpKind::SliceCols, {a.id()}, std::move(out),
                   [rows, n, begin, count](Tape& tp, const Tape::Node& nd) {
                     double* gx = tp.grad_ptr(nd.inputs[0]);
                     if (!gx) return;
                     const auto& g = tp.out_grad(nd);
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t j = 0; j < count; ++j)
                         gx[r * n + begin + j] += g[r * count + j];
                   });
}

Var sum(Var a) {
  Tape* t = common_tape({a});
  double s = 0.0;
  for (double v : a.value().data) s += v;
  return t->record(OpKind::Sum, {a.id()}, Tensor::scalar(s), [](Tape& tp, const Tape::Node& nd) {
    double* gx = tp.grad_ptr(nd.inputs[0]);
    if (!gx) return;
    const double g = tp.out_grad(nd)[0];
    const std::size_t n = tp.value(nd.inputs[0]).size();
    for (std::size_t i = 0; i < n; ++i) gx[i] += g;
  });
}

Var mean(Var a) {
  Tape* t = common_tape({a});
  const Tensor& x = a.value();
  if (x.size() == 0) throw ContractError("mean: empty tensor");
  double s = 0.0;
  for (double v : x.data) s += v;
  const double n = static_cast<double>(x.size());
  return t->record(OpKind::Mean, {a.id()}, Tensor::scalar(s / n),
                   [n](Tape& tp, const Tape::Node& nd) {
                     double* gx = tp.grad_ptr(nd.inputs[0]);
                     if (!gx) return;
                     const double g = tp.out_grad(nd)[0] / n;
                     const std::size_t sz = tp.value(nd.inputs[0]).size();
                     for (std::size_t i = 0; i < sz; ++i) gx[i] += g;
                   });
}

Var cosine(Var a, Var b) {
  Tape* t = common_tape({a, b});
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.size() != y.size()) {
    throw ContractError("cosine: shape mismatch " + shape_string(x.shape) + " vs " +
                        shape_string(y.shape));
  }
  double dot = 0.0, nx = 0.0, ny = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dot += x.data[i] * y.data[i];
    nx += x.data[i] * x.data[i];
    ny += y.data[i] * y.data[i];
  }
  if (nx == 0.0 || ny == 0.0) return t->constant(Tensor::scalar(0.0));
  nx = std::sqrt(nx);
  ny = std::sqrt(ny);
  const double c = dot / (nx * ny);
  return t->record(OpKind::Cosine, {a.id(), b.id()}, Tensor::scalar(c),
                   [nx, ny, c](Tape& tp, const Tape::Node& nd) {
                     const double g = tp.out_grad(nd)[0];
                     const Tensor& x = tp.value(nd.inputs[0]);
                     const Tensor& y = tp.value(nd.inputs[1]);
                     if (double* ga = tp.grad_ptr(nd.inputs[0]))
                       for (std::size_t i = 0; i < x.size(); ++i)
                         ga[i] += g * (y.data[i] / (nx * ny) - c * x.data[i] / (nx * nx));
                     if (double* gb = tp.grad_ptr(nd.inputs[1]))
                       for (std::size_t i = 0; i < y.size(); ++i)
                         gb[i] += g * (x.data[i] / (nx * ny) - c * y.data[i] / (ny * ny));
                   });
}

}  // namespace imo::ad
