#include "clipmap/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "clipmap/errors.hpp"
#include "clipmap/kernels.hpp"

namespace clipmap::ad {

using kernels::Trans;

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Tensor& param) {
  Node n;
  n.value = param;
  n.value.drop_grad();
  n.requires_grad = param.requires_grad();
  if (n.requires_grad) n.param = &param;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.value.drop_grad();
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (std::size_t i : inputs) n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
  if (n.requires_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Real* Tape::grad_sink(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (n.grad.size() != n.value.numel()) n.grad.assign(n.value.numel(), Real(0));
  return n.grad.data();
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw ContractError("backward: loss is not recorded on this tape");
  if (backward_done_) throw ContractError("backward: tape already consumed; record a fresh tape");
  if (loss.value().numel() != 1)
    throw ContractError("backward: root must be a scalar, got shape " + shape_str(loss.shape()));
  backward_done_ = true;
  if (!nodes_[loss.id()].requires_grad) return;
  grad_sink(loss.id())[0] = Real(1);
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad) continue;
    if (n.param) {
      // Leaves the loss does not reach still end up with a (zero) gradient.
      auto g = n.param->ensure_grad();
      if (!n.grad.empty())
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
  }
}

namespace {

Tape& same_tape(Var a, Var b, const char* op) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape())
    throw ContractError(std::string(op) + ": operands must live on the same tape");
  return *a.tape();
}

Tape& tape_of(Var a, const char* op) {
  if (!a.valid()) throw ContractError(std::string(op) + ": invalid Var");
  return *a.tape();
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

void accumulate(Real* dst, std::span<const Real> src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor c({a.rows(), b.cols()});
  kernels::gemm(Trans::No, Trans::No, a.rows(), b.cols(), a.cols(), a.data().data(), b.data().data(),
                c.data().data(), true);
  return c;
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul");
  const std::size_t ia = a.id(), ib = b.id();
  Tensor out = matmul(a.value(), b.value());
  const std::size_t m = a.value().rows(), k = a.value().cols(), n = b.value().cols();
  return t.record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& tp, std::size_t self) {
    const Real* dc = tp.out_grad(self).data();
    if (Real* da = tp.grad_sink(ia)) kernels::gemm(Trans::No, Trans::Yes, m, k, n, dc, tp.value(ib).data().data(), da, true);
    if (Real* db = tp.grad_sink(ib)) kernels::gemm(Trans::Yes, Trans::No, k, n, m, tp.value(ia).data().data(), dc, db, true);
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul_nt");
  require_matrix(a.value(), "matmul_nt");
  require_matrix(b.value(), "matmul_nt");
  const std::size_t m = a.value().rows(), k = a.value().cols(), n = b.value().rows();
  if (b.value().cols() != k)
    throw DimensionError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  Tensor out({m, n});
  kernels::gemm(Trans::No, Trans::Yes, m, n, k, a.value().data().data(), b.value().data().data(), out.data().data(),
                true);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& tp, std::size_t self) {
    const Real* dc = tp.out_grad(self).data();
    if (Real* da = tp.grad_sink(ia)) kernels::gemm(Trans::No, Trans::No, m, k, n, dc, tp.value(ib).data().data(), da, true);
    if (Real* db = tp.grad_sink(ib)) kernels::gemm(Trans::Yes, Trans::No, n, k, m, dc, tp.value(ia).data().data(), db, true);
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a, "transpose");
  require_matrix(a.value(), "transpose");
  const std::size_t ia = a.id(), r = a.value().rows(), c = a.value().cols();
  return t.record(a.value().transposed(), {ia}, [ia, r, c](Tape& tp, std::size_t self) {
    Real* da = tp.grad_sink(ia);
    auto g = tp.out_grad(self);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) da[i * c + j] += g[j * r + i];
  });
}

Var linear(Var x, Var w, Var bias) {
  Tape& t = same_tape(x, w, "linear");
  require_matrix(x.value(), "linear");
  require_matrix(w.value(), "linear");
  const std::size_t n = x.value().rows(), in = x.value().cols(), out_dim = w.value().rows();
  if (w.value().cols() != in)
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  Tensor out({n, out_dim});
  if (bias.valid()) {
    if (bias.tape() != &t) throw ContractError("linear: bias on another tape");
    if (bias.value().numel() != out_dim)
      throw DimensionError("linear: bias " + shape_str(bias.shape()) + " vs weight " + shape_str(w.shape()));
    const Real* b = bias.value().data().data();
    for (std::size_t i = 0; i < n; ++i) std::copy(b, b + out_dim, out.data().data() + i * out_dim);
  }
  kernels::gemm(Trans::No, Trans::Yes, n, out_dim, in, x.value().data().data(), w.value().data().data(),
                out.data().data(), true);
  std::vector<std::size_t> inputs{x.id(), w.id()};
  if (bias.valid()) inputs.push_back(bias.id());
  const std::size_t ix = x.id(), iw = w.id();
  const std::size_t ib = bias.valid() ? bias.id() : std::numeric_limits<std::size_t>::max();
  return t.record(std::move(out), std::move(inputs), [=](Tape& tp, std::size_t self) {
    const Real* dy = tp.out_grad(self).data();
    if (Real* dx = tp.grad_sink(ix)) kernels::gemm(Trans::No, Trans::No, n, in, out_dim, dy, tp.value(iw).data().data(), dx, true);
    if (Real* dw = tp.grad_sink(iw)) kernels::gemm(Trans::Yes, Trans::No, out_dim, in, n, dy, tp.value(ix).data().data(), dw, true);
    if (ib != std::numeric_limits<std::size_t>::max())
      if (Real* db = tp.grad_sink(ib))
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < out_dim; ++j) db[j] += dy[i * out_dim + j];
  });
}

namespace {

Var elementwise2(Var a, Var b, const char* op, Real sign_b, bool product) {
  Tape& t = same_tape(a, b, op);
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  const auto av = a.value().data(), bv = b.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = product ? av[i] * bv[i] : av[i] + sign_b * bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [=](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    if (Real* da = tp.grad_sink(ia)) {
      if (product) {
        auto bv2 = tp.value(ib).data();
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv2[i];
      } else {
        accumulate(da, g);
      }
    }
    if (Real* db = tp.grad_sink(ib)) {
      if (product) {
        auto av2 = tp.value(ia).data();
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av2[i];
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += sign_b * g[i];
      }
    }
  });
}

}  // namespace

Var add(Var a, Var b) { return elementwise2(a, b, "add", Real(1), false); }
Var sub(Var a, Var b) { return elementwise2(a, b, "sub", Real(-1), false); }
Var mul(Var a, Var b) { return elementwise2(a, b, "mul", Real(0), true); }

Var scale(Var a, Real s) {
  Tape& t = tape_of(a, "scale");
  Tensor out = a.value();
  for (Real& v : out.data()) v *= s;
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia}, [ia, s](Tape& tp, std::size_t self) {
    Real* da = tp.grad_sink(ia);
    auto g = tp.out_grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += s * g[i];
  });
}

Var scale_by(Var a, Var s) {
  Tape& t = same_tape(a, s, "scale_by");
  if (s.value().numel() != 1) throw DimensionError("scale_by: factor must be scalar, got " + shape_str(s.shape()));
  const Real sv = s.value()[0];
  Tensor out = a.value();
  for (Real& v : out.data()) v *= sv;
  const std::size_t ia = a.id(), is = s.id();
  return t.record(std::move(out), {ia, is}, [ia, is](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    const Real sv2 = tp.value(is)[0];
    if (Real* da = tp.grad_sink(ia))
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += sv2 * g[i];
    if (Real* ds = tp.grad_sink(is)) {
      auto av = tp.value(ia).data();
      Real acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      ds[0] += acc;
    }
  });
}

Var add_periodic_rows(Var x, Var p) {
  Tape& t = same_tape(x, p, "add_periodic_rows");
  require_matrix(x.value(), "add_periodic_rows");
  require_matrix(p.value(), "add_periodic_rows");
  const std::size_t n = x.value().rows(), d = x.value().cols(), period = p.value().rows();
  if (p.value().cols() != d || n % period != 0)
    throw DimensionError("add_periodic_rows: " + shape_str(x.shape()) + " vs " + shape_str(p.shape()));
  Tensor out = x.value();
  const auto pv = p.value().data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] += pv[(r % period) * d + j];
  const std::size_t ix = x.id(), ip = p.id();
  return t.record(std::move(out), {ix, ip}, [=](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    accumulate(tp.grad_sink(ix), g);
    if (Real* dp = tp.grad_sink(ip))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) dp[(r % period) * d + j] += g[r * d + j];
  });
}

namespace {
// tanh-approximated GELU: 0.5·x·(1 + tanh(c0·(x + c1·x³))).
constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;
}  // namespace

namespace {

// tanh through one exp; absolute error stays within a few ulps of 1, which is
// what 1 + tanh(u) needs, and it is several times cheaper than std::tanh.
inline Real fast_tanh(Real u) {
  const Real e = std::exp(Real(-2) * std::abs(u));
  return std::copysign((Real(1) - e) / (Real(1) + e), u);
}

}  // namespace

Var gelu(Var x) {
  Tape& t = tape_of(x, "gelu");
  Tensor out(x.shape());
  auto th = std::make_shared<std::vector<Real>>(out.numel());
  const auto xv = x.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const Real v = xv[i];
    (*th)[i] = fast_tanh(Real(kGeluC0) * (v + Real(kGeluC1) * v * v * v));
    out[i] = Real(0.5) * v * (Real(1) + (*th)[i]);
  }
  const std::size_t ix = x.id();
  return t.record(std::move(out), {ix}, [ix, th](Tape& tp, std::size_t self) {
    Real* dx = tp.grad_sink(ix);
    auto g = tp.out_grad(self);
    auto xv2 = tp.value(ix).data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Real v = xv2[i], h = (*th)[i];
      const Real dinner = Real(kGeluC0) * (Real(1) + Real(3 * kGeluC1) * v * v);
      dx[i] += g[i] * (Real(0.5) * (Real(1) + h) + Real(0.5) * v * (Real(1) - h * h) * dinner);
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, Real eps) {
  Tape& t = same_tape(x, gamma, "layer_norm");
  if (beta.tape() != &t) throw ContractError("layer_norm: beta on another tape");
  if (!(eps > 0)) throw ContractError("layer_norm: eps must be positive");
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = xv.shape().back(), n = xv.numel() / d;
  if (gamma.value().numel() != d || beta.value().numel() != d)
    throw DimensionError("layer_norm: affine " + shape_str(gamma.shape()) + " vs input " + shape_str(xv.shape()));
  Tensor out(xv.shape());
  auto xhat = std::make_shared<std::vector<Real>>(xv.numel());
  auto rstd = std::make_shared<std::vector<Real>>(n);
  const auto gv = gamma.value().data(), bv = beta.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    const Real* row = xv.data().data() + r * d;
    Real mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= Real(d);
    Real var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= Real(d);
    const Real rs = Real(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const Real h = (row[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return t.record(std::move(out), {ix, ig, ib}, [=](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    const auto gv2 = tp.value(ig).data();
    Real* dx = tp.grad_sink(ix);
    Real* dg = tp.grad_sink(ig);
    Real* db = tp.grad_sink(ib);
    for (std::size_t r = 0; r < n; ++r) {
      const Real* gr = g.data() + r * d;
      const Real* hr = xhat->data() + r * d;
      if (dg)
        for (std::size_t j = 0; j < d; ++j) dg[j] += gr[j] * hr[j];
      if (db)
        for (std::size_t j = 0; j < d; ++j) db[j] += gr[j];
      if (dx) {
        Real m1 = 0, m2 = 0;
        for (std::size_t j = 0; j < d; ++j) {
          const Real dh = gr[j] * gv2[j];
          m1 += dh;
          m2 += dh * hr[j];
        }
        m1 /= Real(d);
        m2 /= Real(d);
        for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += (*rstd)[r] * (gr[j] * gv2[j] - m1 - hr[j] * m2);
      }
    }
  });
}

Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t heads, bool causal) {
  Tape& t = same_tape(q, k, "attention");
  if (v.tape() != &t) throw ContractError("attention: v on another tape");
  require_matrix(q.value(), "attention");
  if (k.shape() != q.shape() || v.shape() != q.shape())
    throw DimensionError("attention: q/k/v shapes differ");
  const std::size_t rows = q.value().rows(), width = q.value().cols();
  if (batch == 0 || rows % batch != 0) throw DimensionError("attention: rows not divisible by batch");
  if (heads == 0 || width % heads != 0) throw DimensionError("attention: width not divisible by heads");
  const std::size_t seq = rows / batch;
  Tensor out(q.shape());
  auto probs = std::make_shared<std::vector<Real>>(batch * heads * seq * seq);
  kernels::attention_forward(q.value().data().data(), k.value().data().data(), v.value().data().data(),
                             out.data().data(), probs->data(), batch, seq, width, heads, causal);
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return t.record(std::move(out), {iq, ik, iv}, [=](Tape& tp, std::size_t self) {
    kernels::attention_backward(tp.value(iq).data().data(), tp.value(ik).data().data(), tp.value(iv).data().data(),
                                probs->data(), tp.out_grad(self).data(), tp.grad_sink(iq), tp.grad_sink(ik),
                                tp.grad_sink(iv), batch, seq, width, heads);
  });
}

Var gather_rows(Var table, std::vector<std::size_t> rows) {
  Tape& t = tape_of(table, "gather_rows");
  require_matrix(table.value(), "gather_rows");
  const std::size_t n = table.value().rows(), d = table.value().cols();
  Tensor out({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n)
      throw InputError("gather_rows: index " + std::to_string(rows[r]) + " out of range for " + std::to_string(n) +
                       " rows");
    std::copy_n(table.value().data().data() + rows[r] * d, d, out.data().data() + r * d);
  }
  const std::size_t it = table.id();
  return t.record(std::move(out), {it}, [it, d, rows = std::move(rows)](Tape& tp, std::size_t self) {
    Real* dt = tp.grad_sink(it);
    auto g = tp.out_grad(self);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) dt[rows[r] * d + j] += g[r * d + j];
  });
}

Var prepend_rows(Var x, Var row, std::size_t group) {
  Tape& t = same_tape(x, row, "prepend_rows");
  require_matrix(x.value(), "prepend_rows");
  const std::size_t n = x.value().rows(), d = x.value().cols();
  if (row.value().numel() != d || group == 0 || n % group != 0)
    throw DimensionError("prepend_rows: " + shape_str(x.shape()) + " with row " + shape_str(row.shape()));
  const std::size_t groups = n / group;
  Tensor out({groups * (group + 1), d});
  const Real* xv = x.value().data().data();
  const Real* rv = row.value().data().data();
  for (std::size_t gi = 0; gi < groups; ++gi) {
    Real* dst = out.data().data() + gi * (group + 1) * d;
    std::copy_n(rv, d, dst);
    std::copy_n(xv + gi * group * d, group * d, dst + d);
  }
  const std::size_t ix = x.id(), ir = row.id();
  return t.record(std::move(out), {ix, ir}, [=](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    Real* dx = tp.grad_sink(ix);
    Real* dr = tp.grad_sink(ir);
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const Real* src = g.data() + gi * (group + 1) * d;
      if (dr)
        for (std::size_t j = 0; j < d; ++j) dr[j] += src[j];
      if (dx)
        for (std::size_t j = 0; j < group * d; ++j) dx[gi * group * d + j] += src[d + j];
    }
  });
}

Var l2_normalize_rows(Var x) {
  Tape& t = tape_of(x, "l2_normalize_rows");
  require_matrix(x.value(), "l2_normalize_rows");
  const std::size_t n = x.value().rows(), d = x.value().cols();
  Tensor out(x.shape());
  auto norms = std::make_shared<std::vector<Real>>(n);
  for (std::size_t r = 0; r < n; ++r) {
    const Real* row = x.value().data().data() + r * d;
    Real s = 0;
    for (std::size_t j = 0; j < d; ++j) s += row[j] * row[j];
    const Real nrm = std::max(std::sqrt(s), std::numeric_limits<Real>::min());
    (*norms)[r] = nrm;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = row[j] / nrm;
  }
  const std::size_t ix = x.id();
  return t.record(std::move(out), {ix}, [=](Tape& tp, std::size_t self) {
    Real* dx = tp.grad_sink(ix);
    auto g = tp.out_grad(self);
    const auto y = tp.value(self).data();
    for (std::size_t r = 0; r < n; ++r) {
      Real dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += y[r * d + j] * g[r * d + j];
      for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) / (*norms)[r];
    }
  });
}

Var exp_clamped(Var s, Real cap) {
  Tape& t = tape_of(s, "exp_clamped");
  if (s.value().numel() != 1) throw DimensionError("exp_clamped: expects a scalar");
  const Real e = std::exp(s.value()[0]);
  const bool clamped = !(e < cap);
  const std::size_t is = s.id();
  return t.record(Tensor::scalar(clamped ? cap : e), {is}, [is, clamped, e](Tape& tp, std::size_t self) {
    if (!clamped) tp.grad_sink(is)[0] += tp.out_grad(self)[0] * e;
  });
}

Var sum(Var x) {
  Tape& t = tape_of(x, "sum");
  Real s = 0;
  for (Real v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  return t.record(Tensor::scalar(s), {ix}, [ix](Tape& tp, std::size_t self) {
    Real* dx = tp.grad_sink(ix);
    const Real g = tp.out_grad(self)[0];
    const std::size_t n = tp.value(ix).numel();
    for (std::size_t i = 0; i < n; ++i) dx[i] += g;
  });
}

Var mean(Var x) { return scale(sum(x), Real(1) / Real(x.value().numel())); }

Tensor softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows");
  const std::size_t n = x.rows(), d = x.cols();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const Real* row = x.data().data() + r * d;
    const Real mx = *std::max_element(row, row + d);
    Real z = 0;
    for (std::size_t j = 0; j < d; ++j) z += (out[r * d + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] /= z;
  }
  return out;
}

Var softmax_rows(Var x) {
  Tape& t = tape_of(x, "softmax_rows");
  Tensor out = softmax_rows(x.value());
  const std::size_t ix = x.id(), n = out.rows(), d = out.cols();
  return t.record(std::move(out), {ix}, [=](Tape& tp, std::size_t self) {
    Real* dx = tp.grad_sink(ix);
    auto g = tp.out_grad(self);
    const auto p = tp.value(self).data();
    for (std::size_t r = 0; r < n; ++r) {
      Real dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * p[r * d + j];
      for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += p[r * d + j] * (g[r * d + j] - dot);
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tape& t = tape_of(x, "reshape");
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return t.record(std::move(out), {ix}, [ix](Tape& tp, std::size_t self) {
    accumulate(tp.grad_sink(ix), tp.out_grad(self));
  });
}

Var stack_flat(const std::vector<Var>& blocks) {
  if (blocks.empty()) throw DimensionError("stack_flat: no blocks");
  Tape& t = tape_of(blocks.front(), "stack_flat");
  const Shape& first = blocks.front().shape();
  const std::size_t m = blocks.front().value().numel();
  Tensor out({blocks.size(), m});
  std::vector<std::size_t> ids;
  ids.reserve(blocks.size());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (blocks[i].tape() != &t) throw ContractError("stack_flat: blocks on different tapes");
    if (blocks[i].shape() != first)
      throw DimensionError("stack_flat: block " + std::to_string(i) + " has shape " + shape_str(blocks[i].shape()) +
                           ", expected " + shape_str(first));
    std::copy_n(blocks[i].value().data().data(), m, out.data().data() + i * m);
    ids.push_back(blocks[i].id());
  }
  return t.record(std::move(out), ids, [ids, m](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (Real* d = tp.grad_sink(ids[i]))
        for (std::size_t j = 0; j < m; ++j) d[j] += g[i * m + j];
  });
}

Var take_row(Var x, std::size_t row, Shape shape) {
  Tape& t = tape_of(x, "take_row");
  require_matrix(x.value(), "take_row");
  const std::size_t m = x.value().cols();
  if (row >= x.value().rows() || shape_numel(shape) != m)
    throw DimensionError("take_row: row " + std::to_string(row) + " of " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  std::vector<Real> data(x.value().data().begin() + static_cast<std::ptrdiff_t>(row * m),
                         x.value().data().begin() + static_cast<std::ptrdiff_t>((row + 1) * m));
  const std::size_t ix = x.id();
  return t.record(Tensor(std::move(shape), std::move(data)), {ix}, [ix, row, m](Tape& tp, std::size_t self) {
    Real* dx = tp.grad_sink(ix);
    auto g = tp.out_grad(self);
    for (std::size_t j = 0; j < m; ++j) dx[row * m + j] += g[j];
  });
}

namespace {

// Row-wise log-sum-exp and softmax, shared by both cross-entropies.
void log_softmax_stats(const Tensor& logits, std::vector<Real>& probs, std::vector<Real>& lse) {
  const std::size_t n = logits.rows(), d = logits.cols();
  probs.resize(n * d);
  lse.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const Real* row = logits.data().data() + r * d;
    const Real mx = *std::max_element(row, row + d);
    Real z = 0;
    for (std::size_t j = 0; j < d; ++j) z += (probs[r * d + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < d; ++j) probs[r * d + j] /= z;
    lse[r] = mx + std::log(z);
  }
}

}  // namespace

Var cross_entropy_soft(Var logits, const Tensor& target_probs) {
  Tape& t = tape_of(logits, "cross_entropy_soft");
  require_matrix(logits.value(), "cross_entropy_soft");
  if (target_probs.shape() != logits.shape())
    throw DimensionError("cross_entropy_soft: logits " + shape_str(logits.shape()) + " vs targets " +
                         shape_str(target_probs.shape()));
  const std::size_t n = logits.value().rows(), d = logits.value().cols();
  for (std::size_t r = 0; r < n; ++r) {
    Real s = 0;
    for (std::size_t j = 0; j < d; ++j) s += target_probs[r * d + j];
    if (std::abs(s - Real(1)) > 1e-9)
      throw ContractError("cross_entropy_soft: target row " + std::to_string(r) + " sums to " + std::to_string(s));
  }
  auto probs = std::make_shared<std::vector<Real>>();
  std::vector<Real> lse;
  log_softmax_stats(logits.value(), *probs, lse);
  Real loss = 0;
  const auto lv = logits.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    Real row = 0;
    for (std::size_t j = 0; j < d; ++j) row -= target_probs[r * d + j] * (lv[r * d + j] - lse[r]);
    loss += row;
  }
  loss /= Real(n);
  const std::size_t il = logits.id();
  return t.record(Tensor::scalar(loss), {il}, [=, target = target_probs](Tape& tp, std::size_t self) {
    Real* dl = tp.grad_sink(il);
    const Real g = tp.out_grad(self)[0] / Real(n);
    for (std::size_t i = 0; i < n * d; ++i) dl[i] += g * ((*probs)[i] - target[i]);
  });
}

Var cross_entropy_labels(Var logits, std::span<const std::size_t> labels) {
  Tape& t = tape_of(logits, "cross_entropy_labels");
  require_matrix(logits.value(), "cross_entropy_labels");
  const std::size_t n = logits.value().rows(), d = logits.value().cols();
  if (labels.size() != n) throw DimensionError("cross_entropy_labels: label count differs from rows");
  for (std::size_t y : labels)
    if (y >= d) throw InputError("cross_entropy_labels: label out of range");
  auto probs = std::make_shared<std::vector<Real>>();
  std::vector<Real> lse;
  log_softmax_stats(logits.value(), *probs, lse);
  Real loss = 0;
  for (std::size_t r = 0; r < n; ++r) loss += lse[r] - logits.value()[r * d + labels[r]];
  loss /= Real(n);
  const std::size_t il = logits.id();
  std::vector<std::size_t> ys(labels.begin(), labels.end());
  return t.record(Tensor::scalar(loss), {il}, [=, ys = std::move(ys)](Tape& tp, std::size_t self) {
    Real* dl = tp.grad_sink(il);
    const Real g = tp.out_grad(self)[0] / Real(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) dl[r * d + j] += g * ((*probs)[r * d + j] - (j == ys[r] ? Real(1) : Real(0)));
  });
}

}  // namespace clipmap::ad
