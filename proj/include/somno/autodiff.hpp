#pragma once

#include <cmath>
#include <functional>
#include <memory>

#include "somno/common.hpp"
#include "somno/tensor.hpp"

// Reverse-mode automatic differentiation over dense tensors. A Tape records
// the forward graph; backward() replays it in reverse creation order. Every
// op's gradient is hand-derived and covered by finite-difference tests.
namespace somno::ad {

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;
};

template <class T>
class Tape {
 public:
  struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    std::function<void(Tape&)> back;
    bool requires_grad = false;
  };

  Var<T> leaf(Tensor<T> value, bool requires_grad) {
    Node n;
    n.val = std::move(value);
    n.requires_grad = requires_grad && grad_enabled_;
    if (n.requires_grad) n.grad = Tensor<T>(n.val.shape);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  // With gradients disabled, leaves never require grad, so no backward
  // closures are recorded and no grad buffers allocated (inference mode).
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  int add(Tensor<T> value, bool requires_grad) {
    Node n;
    n.val = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.grad = Tensor<T>(n.val.shape);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void set_back(int id, std::function<void(Tape&)> fn) { nodes_[static_cast<std::size_t>(id)].back = std::move(fn); }

  Tensor<T>& val(int id) { return nodes_[static_cast<std::size_t>(id)].val; }
  const Tensor<T>& val(int id) const { return nodes_[static_cast<std::size_t>(id)].val; }
  Tensor<T>& grad(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  void backward(Var<T> loss) {
    auto& l = nodes_[static_cast<std::size_t>(loss.id)];
    if (l.val.numel() != 1) throw std::logic_error("backward: loss must be scalar");
    if (!l.requires_grad) throw std::logic_error("backward: loss does not require grad");
    l.grad.data[0] = T(1);
    for (int i = loss.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.requires_grad && n.back) n.back(*this);
    }
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

// ---------------------------------------------------------------------------
// op helpers
// ---------------------------------------------------------------------------
namespace detail {

template <class T>
bool wants_grad(Var<T> v) {
  return v.tape->requires_grad(v.id);
}

template <class T>
void check_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw std::logic_error("op: operands on different tapes");
}

}  // namespace detail

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  Tape<T>& t = *a.tape;
  const auto& A = t.val(a.id);
  const auto& B = t.val(b.id);
  if (!A.same_shape(B)) throw std::invalid_argument("add: shape mismatch");
  Tensor<T> out(A.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data[i] = A.data[i] + B.data[i];
  const bool rg = detail::wants_grad(a) || detail::wants_grad(b);
  const int id = t.add(std::move(out), rg);
  if (rg) {
    t.set_back(id, [=](Tape<T>& tp) {
      const auto& g = tp.grad(id);
      if (tp.requires_grad(a.id)) {
        auto& ga = tp.grad(a.id);
        for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
      }
      if (tp.requires_grad(b.id)) {
        auto& gb = tp.grad(b.id);
        for (std::size_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i];
      }
    });
  }
  return {&t, id};
}

template <class T>
Var<T> scale(Var<T> a, T k) {
  Tape<T>& t = *a.tape;
  const auto& A = t.val(a.id);
  Tensor<T> out(A.shape);
  for (std::size_t i = 0; i < A.numel(); ++i) out.data[i] = k * A.data[i];
  const bool rg = detail::wants_grad(a);
  const int id = t.add(std::move(out), rg);
  if (rg) {
    t.set_back(id, [=](Tape<T>& tp) {
      const auto& g = tp.grad(id);
      auto& ga = tp.grad(a.id);
      for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += k * g.data[i];
    });
  }
  return {&t, id};
}

template <class T>
Var<T> relu(Var<T> a) {
  Tape<T>& t = *a.tape;
  const auto& A = t.val(a.id);
  Tensor<T> out(A.shape);
  for (std::size_t i = 0; i < A.numel(); ++i) out.data[i] = A.data[i] > T(0) ? A.data[i] : T(0);
  const bool rg = detail::wants_grad(a);
  const int id = t.add(std::move(out), rg);
  if (rg) {
    t.set_back(id, [=](Tape<T>& tp) {
      const auto& g = tp.grad(id);
      const auto& x = tp.val(a.id);
      auto& ga = tp.grad(a.id);
      for (std::size_t i = 0; i < g.numel(); ++i)
        if (x.data[i] > T(0)) ga.data[i] += g.data[i];
    });
  }
  return {&t, id};
}

// y[m,o] = sum_d x[m,d] W[o,d] + b[o]; W is [Dout, Din] row-major so both
// operands stream contiguously.
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  detail::check_same_tape(x, w);
  detail::check_same_tape(x, b);
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x.id);
  const auto& W = t.val(w.id);
  const auto& Bv = t.val(b.id);
  if (X.rank() != 2 || W.rank() != 2) throw std::invalid_argument("linear: need rank-2 inputs");
  const std::size_t m = X.dim(0), din = X.dim(1), dout = W.dim(0);
  if (W.dim(1) != din || Bv.numel() != dout) throw std::invalid_argument("linear: shape mismatch");
  Tensor<T> out({m, dout});
  {
    const T* xp = X.ptr();
    const T* wp = W.ptr();
    const T* bp = Bv.ptr();
    T* op = out.ptr();
    parallel_for(m, [&](std::size_t r0, std::size_t r1) {
      for (std::size_t r = r0; r < r1; ++r) {
        const T* xr = xp + r * din;
        T* orow = op + r * dout;
        for (std::size_t o = 0; o < dout; ++o) {
          const T* wr = wp + o * din;
          T acc = bp[o];
          for (std::size_t d = 0; d < din; ++d) acc += xr[d] * wr[d];
          orow[o] = acc;
        }
      }
    });
  }
  const bool rg = detail::wants_grad(x) || detail::wants_grad(w) || detail::wants_grad(b);
  const int id = t.add(std::move(out), rg);
  if (rg) {
    t.set_back(id, [=](Tape<T>& tp) {
      const auto& g = tp.grad(id);
      const auto& X2 = tp.val(x.id);
      const auto& W2 = tp.val(w.id);
      const T* gp = g.ptr();
      if (tp.requires_grad(x.id)) {
        auto& gx = tp.grad(x.id);
        T* gxp = gx.ptr();
        const T* wp = W2.ptr();
        parallel_for(m, [&](std::size_t r0, std::size_t r1) {
          for (std::size_t r = r0; r < r1; ++r) {
            const T* gr = gp + r * dout;
            T* gxr = gxp + r * din;
            for (std::size_t o = 0; o < dout; ++o) {
              const T go = gr[o];
              if (go == T(0)) continue;
              const T* wr = wp + o * din;
              for (std::size_t d = 0; d < din; ++d) gxr[d] += go * wr[d];
            }
          }
        });
      }
      if (tp.requires_grad(w.id)) {
        auto& gw = tp.grad(w.id);
        T* gwp = gw.ptr();
        const T* xp = X2.ptr();
        parallel_for(dout, [&](std::size_t o0, std::size_t o1) {
          for (std::size_t o = o0; o < o1; ++o) {
            T* gwr = gwp + o * din;
            for (std::size_t r = 0; r < m; ++r) {
              const T go = gp[r * dout + o];
              if (go == T(0)) continue;
              const T* xr = xp + r * din;
              for (std::size_t d = 0; d < din; ++d) gwr[d] += go * xr[d];
            }
          }
        });
      }
      if (tp.requires_grad(b.id)) {
        auto& gb = tp.grad(b.id);
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t o = 0; o < dout; ++o) gb.data[o] += gp[r * dout + o];
      }
    });
  }
  return {&t, id};
}

// Batched matmul. transpose_b=false: C[i] = A[i] (m,k) * B[i] (k,n).
// transpose_b=true:  C[i] = A[i] (m,k) * B[i]^T with B[i] (n,k).
template <class T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b) {
  detail::check_same_tape(a, b);
  Tape<T>& t = *a.tape;
  const auto& A = t.val(a.id);
  const auto& B = t.val(b.id);
  if (A.rank() != 3 || B.rank() != 3 || A.dim(0) != B.dim(0))
    throw std::invalid_argument("bmm: need rank-3 with equal batch");
  const std::size_t nb = A.dim(0), m = A.dim(1), k = A.dim(2);
  const std::size_t n = transpose_b ? B.dim(1) : B.dim(2);
  if ((transpose_b ? B.dim(2) : B.dim(1)) != k) throw std::invalid_argument("bmm: inner dim mismatch");
  Tensor<T> out({nb, m, n});
  {
    const T* ap = A.ptr();
    const T* bp = B.ptr();
    T* op = out.ptr();
    parallel_for(nb * m, [&](std::size_t r0, std::size_t r1) {
      for (std::size_t rr = r0; rr < r1; ++rr) {
        const std::size_t bi = rr / m, i = rr % m;
        const T* arow = ap + (bi * m + i) * k;
        T* orow = op + (bi * m + i) * n;
        if (transpose_b) {
          const T* bmat = bp + bi * n * k;
          for (std::size_t j = 0; j < n; ++j) {
            const T* brow = bmat + j * k;
            T acc = T(0);
            for (std::size_t d = 0; d < k; ++d) acc += arow[d] * brow[d];
            orow[j] = acc;
          }
        } else {
          const T* bmat = bp + bi * k * n;
          for (std::size_t j = 0; j < n; ++j) orow[j] = T(0);
          for (std::size_t d = 0; d < k; ++d) {
            const T av = arow[d];
            if (av == T(0)) continue;
            const T* brow = bmat + d * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
          }
        }
      }
    });
  }
  const bool rg = detail::wants_grad(a) || detail::wants_grad(b);
  const int id = t.add(std::move(out), rg);
  if (rg) {
    t.set_back(id, [=](Tape<T>& tp) {
      const auto& g = tp.grad(id);
      const auto& A2 = tp.val(a.id);
      const auto& B2 = tp.val(b.id);
      const T* gp = g.ptr();
      const T* bp = B2.ptr();
      const T* ap = A2.ptr();
      if (tp.requires_grad(a.id)) {
        auto& ga = tp.grad(a.id);
        T* gap = ga.ptr();
        parallel_for(nb * m, [&](std::size_t r0, std::size_t r1) {
          for (std::size_t rr = r0; rr < r1; ++rr) {
            const std::size_t bi = rr / m, i = rr % m;
            const T* grow = gp + (bi * m + i) * n;
            T* garow = gap + (bi * m + i) * k;
            if (transpose_b) {
              // dA = g * B  (g: m x n, B: n x k)
              const T* bmat = bp + bi * n * k;
              for (std::size_t j = 0; j < n; ++j) {
                const T gv = grow[j];
                if (gv == T(0)) continue;
                const T* brow = bmat + j * k;
                for (std::size_t d = 0; d < k; ++d) garow[d] += gv * brow[d];
              }
            } else {
              // dA = g * B^T
              const T* bmat = bp + bi * k * n;
              for (std::size_t d = 0; d < k; ++d) {
                const T* brow = bmat + d * n;
                T acc = T(0);
                for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                garow[d] += acc;
              }
            }
          }
        });
      }
      if (tp.requires_grad(b.id)) {
        auto& gb = tp.grad(b.id);
        T* gbp = gb.ptr();
        if (transpose_b) {
          // dB[j,d] = sum_i g[i,j] A[i,d]   (B: n x k)
          parallel_for(nb * n, [&](std::size_t r0, std::size_t r1) {
            for (std::size_t rr = r0; rr < r1; ++rr) {
              const std::size_t bi = rr / n, j = rr % n;
              T* gbrow = gbp + (bi * n + j) * k;
              const T* gmat = gp + bi * m * n;
              const T* amat = ap + bi * m * k;
              for (std::size_t i = 0; i < m; ++i) {
                const T gv = gmat[i * n + j];
                if (gv == T(0)) continue;
                const T* arow = amat + i * k;
                for (std::size_t d = 0; d < k; ++d) gbrow[d] += gv * arow[d];
              }
            }
          });
        } else {
          // dB[d,j] = sum_i A[i,d] g[i,j]   (B: k x n)
          parallel_for(nb * k, [&](std::size_t r0, std::size_t r1) {
            for (std::size_t rr = r0; rr < r1; ++rr) {
              const std::size_t bi = rr / k, d = rr % k;
              T* gbrow = gbp + (bi * k + d) * n;
              const T* gmat = gp + bi * m * n;
              const T* amat = ap + bi * m * k;
              for (std::size_t i = 0; i < m; ++i) {
                const T av = amat[i * k + d];
                if (av == T(0)) continue;
                const T* grow = gmat + i * n;
                for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
              }
            }
          });
        }
      }
    });
  }
  return {&t, id};
}

// 1-D convolution, x [B, Cin, L], w [Cout, Cin, K], bias [Cout].
template <class T>
Var<T> conv1d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad) {
  detail::check_same_tape(x, w);
  detail::check_same_tape(x, b);
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x.id);
  const auto& W = t.val(w.id);
  const auto& Bv = t.val(b.id);
  if (X.rank() != 3 || W.rank() != 3) throw std::invalid_argument("conv1d: need rank-3 x and w");
  const std::size_t nb = X.dim(0), cin = X.dim(1), len = X.dim(2);
  const std::size_t cout = W.dim(0), kw = W.dim(2);
  if (W.dim(1) != cin || Bv.numel() != cout) throw std::invalid_argument("conv1d: shape mismatch");
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv1d: bad stride/pad");
  const std::size_t lout =
      (len + 2 * static_cast<std::size_t>(pad) - kw) / static_cast<std::size_t>(stride) + 1;
  Tensor<T> out({nb, cout, lout});
  {
    const T* xp = X.ptr();
    const T* wp = W.ptr();
    const T* bp = Bv.ptr();
    T* op = out.ptr();
    parallel_for(nb * cout, [&](std::size_t r0, std::size_t r1) {
      for (std::size_t rr = r0; rr < r1; ++rr) {
        const std::size_t bi = rr / cout, co = rr % cout;
        T* orow = op + (bi * cout + co) * lout;
        for (std::size_t o = 0; o < lout; ++o) orow[o] = bp[co];
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const T* xrow = xp + (bi * cin + ci) * len;
          const T* wrow = wp + (co * cin + ci) * kw;
          for (std::size_t o = 0; o < lout; ++o) {
            const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(o) * stride - pad;
            T acc = T(0);
            for (std::size_t k = 0; k < kw; ++k) {
              const std::ptrdiff_t i = base + static_cast<std::ptrdiff_t>(k);
              if (i >= 0 && i < static_cast<std::ptrdiff_t>(len)) acc += wrow[k] * xrow[i];
            }
            orow[o] += acc;
          }
        }
      }
    });
  }
  const bool rg = detail::wants_grad(x) || detail::wants_grad(w) || detail::wants_grad(b);
  const int id = t.add(std::move(out), rg);
  if (rg) {
    t.set_back(id, [=](Tape<T>& tp) {
      const auto& g = tp.grad(id);
      const auto& X2 = tp.val(x.id);
      const auto& W2 = tp.val(w.id);
      const T* gp = g.ptr();
      if (tp.requires_grad(x.id)) {
        auto& gx = tp.grad(x.id);
        T* gxp = gx.ptr();
        const T* wp = W2.ptr();
        parallel_for(nb, [&](std::size_t b0, std::size_t b1) {
          for (std::size_t bi = b0; bi < b1; ++bi) {
            for (std::size_t co = 0; co < cout; ++co) {
              const T* grow = gp + (bi * cout + co) * lout;
              for (std::size_t ci = 0; ci < cin; ++ci) {
                T* gxrow = gxp + (bi * cin + ci) * len;
                const T* wrow = wp + (co * cin + ci) * kw;
                for (std::size_t o = 0; o < lout; ++o) {
                  const T gv = grow[o];
                  if (gv == T(0)) continue;
                  const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(o) * stride - pad;
                  for (std::size_t k = 0; k < kw; ++k) {
                    const std::ptrdiff_t i = base + static_cast<std::ptrdiff_t>(k);
                    if (i >= 0 && i < static_cast<std::ptrdiff_t>(len)) gxrow[i] += gv * wrow[k];
                  }
                }
              }
            }
          }
        });
      }
      if (tp.requires_grad(w.id)) {
        auto& gw = tp.grad(w.id);
        T* gwp = gw.ptr();
        const T* xp = X2.ptr();
        parallel_for(cout, [&](std::size_t c0, std::size_t c1) {
          for (std::size_t co = c0; co < c1; ++co) {
            for (std::size_t bi = 0; bi < nb; ++bi) {
              const T* grow = gp + (bi * cout + co) * lout;
              for (std::size_t ci = 0; ci < cin; ++ci) {
                const T* xrow = xp + (bi * cin + ci) * len;
                T* gwrow = gwp + (co * cin + ci) * kw;
                for (std::size_t o = 0; o < lout; ++o) {
                  const T gv = grow[o];
                  if (gv == T(0)) continue;
                  const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(o) * stride - pad;
                  for (std::size_t k = 0; k < kw; ++k) {
                    const std::ptrdiff_t i = base + static_cast<std::ptrdiff_t>(k);
                    if (i >= 0 && i < static_cast<std::ptrdiff_t>(len)) gwrow[k] += gv * xrow[i];
                  }
                }
              }
            }
          }
        });
      }
      if (tp.requires_grad(b.id)) {
        auto& gb = tp.grad(b.id);
        for (std::size_t bi = 0; bi < nb; ++bi)
          for (std::size_t co = 0; co < cout; ++co) {
            const T* grow = gp + (bi * cout + co) * lout;
            T acc = T(0);
            for (std::size_t o = 0; o < lout; ++o) acc += grow[o];
            gb.data[co] += acc;
          }
      }
    });
  }
  return {&t, id};
}

// Batch normalization over (batch, length) per channel, x [B, C, L].
// Training mode normalizes with batch statistics and updates the provided
// running stats in place (momentum update, unbiased running variance).
// Eval mode normalizes with the running stats and leaves them untouched.
template <class T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>* run_mean, Tensor<T>* run_var,
                 bool train, T momentum = T(0.1), T eps = T(1e-5)) {
  detail::check_same_tape(x, gamma);
  detail::check_same_tape(x, beta);
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x.id);
  if (X.rank() != 3) throw std::invalid_argument("batchnorm: need rank-3 input");
  const std::size_t nb = X.dim(0), ch = X.dim(1), len = X.dim(2);
  const auto& G = t.val(gamma.id);
  const auto& Bt = t.val(beta.id);
  if (G.numel() != ch || Bt.numel() != ch || run_mean->numel() != ch || run_var->numel() != ch)
    throw std::invalid_argument("batchnorm: channel mismatch");
  const std::size_t cnt = nb * len;

  auto mean = std::make_shared<std::vector<T>>(ch, T(0));
  auto istd = std::make_shared<std::vector<T>>(ch, T(0));
  if (train) {
    for (std::size_t c = 0; c < ch; ++c) {
      T m = T(0);
      for (std::size_t bi = 0; bi < nb; ++bi) {
        const T* row = X.ptr() + (bi * ch + c) * len;
        for (std::size_t l = 0; l < len; ++l) m += row[l];
      }
      m /= static_cast<T>(cnt);
      T v = T(0);
      for (std::size_t bi = 0; bi < nb; ++bi) {
        const T* row = X.ptr() + (bi * ch + c) * len;
        for (std::size_t l = 0; l < len; ++l) v += (row[l] - m) * (row[l] - m);
      }
      v /= static_cast<T>(cnt);
      (*mean)[c] = m;
      (*istd)[c] = T(1) / std::sqrt(v + eps);
      const T unbiased = cnt > 1 ? v * static_cast<T>(cnt) / static_cast<T>(cnt - 1) : v;
      run_mean->data[c] = (T(1) - momentum) * run_mean->data[c] + momentum * m;
      run_var->data[c] = (T(1) - momentum) * run_var->data[c] + momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < ch; ++c) {
      (*mean)[c] = run_mean->data[c];
      (*istd)[c] = T(1) / std::sqrt(run_var->data[c] + eps);
    }
  }

  Tensor<T> out(X.shape);
  auto xhat = std::make_shared<Tensor<T>>(X.shape);
  {
    const T* xp = X.ptr();
    const T* gp = G.ptr();
    const T* bp = Bt.ptr();
    T* op = out.ptr();
    T* hp = xhat->ptr();
    parallel_for(nb * ch, [&](std::size_t r0, std::size_t r1) {
      for (std::size_t rr = r0; rr < r1; ++rr) {
        const std::size_t c = rr % ch;
        const T m = (*mean)[c], is = (*istd)[c], ga = gp[c], be = bp[c];
        const T* xrow = xp + rr * len;
        T* orow = op + rr * len;
        T* hrow = hp + rr * len;
        for (std::size_t l = 0; l < len; ++l) {
          const T h = (xrow[l] - m) * is;
          hrow[l] = h;
          orow[l] = ga * h + be;
        }
      }
    });
  }
  const bool rg = detail::wants_grad(x) || detail::wants_grad(gamma) || detail::wants_grad(beta);
  const int id = t.add(std::move(out), rg);
  if (rg) {
    t.set_back(id, [=](Tape<T>& tp) {
      const auto& g = tp.grad(id);
      const auto& G2 = tp.val(gamma.id);
      const T* gp = g.ptr();
      const T* hp = xhat->ptr();
      // per-channel reductions
      std::vector<T> sum_g(ch, T(0)), sum_gh(ch, T(0));
      for (std::size_t rr = 0; rr < nb * ch; ++rr) {
        const std::size_t c = rr % ch;
        const T* grow = gp + rr * len;
        const T* hrow = hp + rr * len;
        T sg = T(0), sgh = T(0);
        for (std::size_t l = 0; l < len; ++l) {
          sg += grow[l];
          sgh += grow[l] * hrow[l];
        }
        sum_g[c] += sg;
        sum_gh[c] += sgh;
      }
      if (tp.requires_grad(gamma.id)) {
        auto& gg = tp.grad(gamma.id);
        for (std::size_t c = 0; c < ch; ++c) gg.data[c] += sum_gh[c];
      }
      if (tp.requires_grad(beta.id)) {
        auto& gb = tp.grad(beta.id);
        for (std::size_t c = 0; c < ch; ++c) gb.data[c] += sum_g[c];
      }
      if (tp.requires_grad(x.id)) {
        auto& gx = tp.grad(x.id);
        T* gxp = gx.ptr();
        const T* gammap = G2.ptr();
        parallel_for(nb * ch, [&](std::size_t r0, std::size_t r1) {
          for (std::size_t rr = r0; rr < r1; ++rr) {
            const std::size_t c = rr % ch;
            const T ga = gammap[c], is = (*istd)[c];
            const T* grow = gp + rr * len;
            const T* hrow = hp + rr * len;
            T* gxrow = gxp + rr * len;
            if (train) {
              const T inv_n = T(1) / static_cast<T>(cnt);
              for (std::size_t l = 0; l < len; ++l) {
                gxrow[l] += ga * is * (grow[l] - inv_n * sum_g[c] - hrow[l] * inv_n * sum_gh[c]);
              }
            } else {
              for (std::size_t l = 0; l < len; ++l) gxrow[l] += ga * is * grow[l];
            }
          }
        });
      }
    });
  }
  return {&t, id};
}

// Layer normalization over the last dimension of a rank-2 input [M, D].
template <class T>
Var<T> layernorm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  detail::check_same_tape(x, gain);
  detail::check_same_tape(x, bias);
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x.id);
  if (X.rank() != 2) throw std::invalid_argument("layernorm: need rank-2 input");
  const std::size_t m = X.dim(0), d = X.dim(1);
  const auto& G = t.val(gain.id);
  const auto& Bv = t.val(bias.id);
  if (G.numel() != d || Bv.numel() != d) throw std::invalid_argument("layernorm: dim mismatch");

  Tensor<T> out(X.shape);
  auto xhat = std::make_shared<Tensor<T>>(X.shape);
  auto istd = std::make_shared<std::vector<T>>(m, T(0));
  {
    const T* xp = X.ptr();
    const T* gp = G.ptr();
    const T* bp = Bv.ptr();
    T* op = out.ptr();
    T* hp = xhat->ptr();
    parallel_for(m, [&](std::size_t r0, std::size_t r1) {
      for (std::size_t r = r0; r < r1; ++r) {
        const T* xr = xp + r * d;
        T mu = T(0);
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<T>(d);
        T var = T(0);
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + eps);
        (*istd)[r] = is;
        T* hr = hp + r * d;
        T* orow = op + r * d;
        for (std::size_t j = 0; j < d; ++j) {
          const T h = (xr[j] - mu) * is;
          hr[j] = h;
          orow[j] = gp[j] * h + bp[j];
        }
      }
    });
  }
  const bool rg = detail::wants_grad(x) || detail::wants_grad(gain) || detail::wants_grad(bias);
  const int id = t.add(std::move(out), rg);
  if (rg) {
    t.set_back(id, [=](Tape<T>& tp) {
      const auto& g = tp.grad(id);
      const auto& G2 = tp.val(gain.id);
      const T* gp = g.ptr();
      const T* hp = xhat->ptr();
      const T* gainp = G2.ptr();
      if (tp.requires_grad(gain.id) || tp.requires_grad(bias.id)) {
        auto& gg = tp.grad(gain.id);
        auto& gb = tp.grad(bias.id);
        for (std::size_t r = 0; r < m; ++r) {
          const T* gr = gp + r * d;
          const T* hr = hp + r * d;
          for (std::size_t j = 0; j < d; ++j) {
            gg.data[j] += gr[j] * hr[j];
            gb.data[j] += gr[j];
          }
        }
      }
      if (tp.requires_grad(x.id)) {
        auto& gx = tp.grad(x.id);
        T* gxp = gx.ptr();
        parallel_for(m, [&](std::size_t r0, std::size_t r1) {
          for (std::size_t r = r0; r < r1; ++r) {
            const T* gr = gp + r * d;
            const T* hr = hp + r * d;
            T* gxr = gxp + r * d;
            T sum_dh = T(0), sum_dhh = T(0);
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = gr[j] * gainp[j];
              sum_dh += dh;
              sum_dhh += dh * hr[j];
            }
            const T is = (*istd)[r];
            const T inv_d = T(1) / static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = gr[j] * gainp[j];
              gxr[j] += is * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dhh);
            }
          }
        });
      }
    });
  }
  return {&t, id};
}

// Row-wise softmax over the last dimension of [M, D].
template <class T>
Var<T> softmax_rows(Var<T> x) {
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x.id);
  if (X.rank() < 2) throw std::invalid_argument("softmax_rows: need rank >= 2");
  const std::size_t d = X.shape.back();
  const std::size_t m = X.numel() / d;
  Tensor<T> out(X.shape);
  {
    const T* xp = X.ptr();
    T* op = out.ptr();
    parallel_for(m, [&](std::size_t r0, std::size_t r1) {
      for (std::size_t r = r0; r < r1; ++r) {
        const T* xr = xp + r * d;
        T* orow = op + r * d;
        T mx = xr[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < d; ++j) {
          const T e = std::exp(xr[j] - mx);
          orow[j] = e;
          sum += e;
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < d; ++j) orow[j] *= inv;
      }
    });
  }
  const bool rg = detail::wants_grad(x);
  const int id = t.add(std::move(out), rg);
  if (rg) {
    t.set_back(id, [=](Tape<T>& tp) {
      const auto& g = tp.grad(id);
      const auto& y = tp.val(id);
      auto& gx = tp.grad(x.id);
      const T* gp = g.ptr();
      const T* yp = y.ptr();
      T* gxp = gx.ptr();
      parallel_for(m, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r) {
          const T* gr = gp + r * d;
          const T* yr = yp + r * d;
          T* gxr = gxp + r * d;
          T dot = T(0);
          for (std::size_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
          for (std::size_t j = 0; j < d; ++j) gxr[j] += yr[j] * (gr[j] - dot);
        }
      });
    });
  }
  return {&t, id};
}

// Mean over the last dimension: [B, C, L] -> [B, C].
template <class T>
Var<T> global_avg_pool(Var<T> x) {
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x.id);
  if (X.rank() != 3) throw std::invalid_argument("global_avg_pool: need rank-3 input");
  const std::size_t nb = X.dim(0), ch = X.dim(1), len = X.dim(2);
  Tensor<T> out({nb, ch});
  const T inv = T(1) / static_cast<T>(len);
  for (std::size_t r = 0; r < nb * ch; ++r) {
    const T* xr = X.ptr() + r * len;
    T acc = T(0);
    for (std::size_t l = 0; l < len; ++l) acc += xr[l];
    out.data[r] = acc * inv;
  }
  const bool rg = detail::wants_grad(x);
  const int id = t.add(std::move(out), rg);
  if (rg) {
    t.set_back(id, [=](Tape<T>& tp) {
      const auto& g = tp.grad(id);
      auto& gx = tp.grad(x.id);
      for (std::size_t r = 0; r < nb * ch; ++r) {
        const T gv = g.data[r] * inv;
        T* gxr = gx.ptr() + r * len;
        for (std::size_t l = 0; l < len; ++l) gxr[l] += gv;
      }
    });
  }
  return {&t, id};
}

template <class T>
Var<T> reshape(Var<T> x, Shape target) {
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x.id);
  if (numel_of(target) != X.numel()) throw std::invalid_argument("reshape: numel mismatch");
  Tensor<T> out(std::move(target), X.data);
  const bool rg = detail::wants_grad(x);
  const int id = t.add(std::move(out), rg);
  if (rg) {
    t.set_back(id, [=](Tape<T>& tp) {
      const auto& g = tp.grad(id);
      auto& gx = tp.grad(x.id);
      for (std::size_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
    });
  }
  return {&t, id};
}

// [B*N, D] -> [B*H, N, dk] head split for attention.
template <class T>
Var<T> split_heads(Var<T> x, std::size_t batch, std::size_t seq, std::size_t heads, std::size_t dk) {
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x.id);
  if (X.rank() != 2 || X.dim(0) != batch * seq || X.dim(1) != heads * dk)
    throw std::invalid_argument("split_heads: shape mismatch");
  Tensor<T> out({batch * heads, seq, dk});
  const T* xp = X.ptr();
  T* op = out.ptr();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t n = 0; n < seq; ++n)
      for (std::size_t h = 0; h < heads; ++h) {
        const T* src = xp + (b * seq + n) * heads * dk + h * dk;
        T* dst = op + ((b * heads + h) * seq + n) * dk;
        for (std::size_t d = 0; d < dk; ++d) dst[d] = src[d];
      }
  const bool rg = detail::wants_grad(x);
  const int id = t.add(std::move(out), rg);
  if (rg) {
    t.set_back(id, [=](Tape<T>& tp) {
      const auto& g = tp.grad(id);
      auto& gx = tp.grad(x.id);
      const T* gp = g.ptr();
      T* gxp = gx.ptr();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t n = 0; n < seq; ++n)
          for (std::size_t h = 0; h < heads; ++h) {
            T* dst = gxp + (b * seq + n) * heads * dk + h * dk;
            const T* src = gp + ((b * heads + h) * seq + n) * dk;
            for (std::size_t d = 0; d < dk; ++d) dst[d] += src[d];
          }
    });
  }
  return {&t, id};
}

// [B*H, N, dk] -> [B*N, D] inverse of split_heads.
template <class T>
Var<T> merge_heads(Var<T> x, std::size_t batch, std::size_t seq, std::size_t heads, std::size_t dk) {
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x.id);
  if (X.rank() != 3 || X.dim(0) != batch * heads || X.dim(1) != seq || X.dim(2) != dk)
    throw std::invalid_argument("merge_heads: shape mismatch");
  Tensor<T> out({batch * seq, heads * dk});
  const T* xp = X.ptr();
  T* op = out.ptr();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t n = 0; n < seq; ++n) {
        const T* src = xp + ((b * heads + h) * seq + n) * dk;
        T* dst = op + (b * seq + n) * heads * dk + h * dk;
        for (std::size_t d = 0; d < dk; ++d) dst[d] = src[d];
      }
  const bool rg = detail::wants_grad(x);
  const int id = t.add(std::move(out), rg);
  if (rg) {
    t.set_back(id, [=](Tape<T>& tp) {
      const auto& g = tp.grad(id);
      auto& gx = tp.grad(x.id);
      const T* gp = g.ptr();
      T* gxp = gx.ptr();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t n = 0; n < seq; ++n) {
            T* dst = gxp + ((b * heads + h) * seq + n) * dk;
            const T* src = gp + (b * seq + n) * heads * dk + h * dk;
            for (std::size_t d = 0; d < dk; ++d) dst[d] += src[d];
          }
    });
  }
  return {&t, id};
}

template <class T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  Tape<T>& t = *a.tape;
  const auto& A = t.val(a.id);
  const auto& B = t.val(b.id);
  if (A.rank() != 2 || B.rank() != 2 || A.dim(0) != B.dim(0))
    throw std::invalid_argument("concat_cols: shape mismatch");
  const std::size_t m = A.dim(0), d1 = A.dim(1), d2 = B.dim(1);
  Tensor<T> out({m, d1 + d2});
  for (std::size_t r = 0; r < m; ++r) {
    T* orow = out.ptr() + r * (d1 + d2);
    const T* ar = A.ptr() + r * d1;
    const T* br = B.ptr() + r * d2;
    for (std::size_t j = 0; j < d1; ++j) orow[j] = ar[j];
    for (std::size_t j = 0; j < d2; ++j) orow[d1 + j] = br[j];
  }
  const bool rg = detail::wants_grad(a) || detail::wants_grad(b);
  const int id = t.add(std::move(out), rg);
  if (rg) {
    t.set_back(id, [=](Tape<T>& tp) {
      const auto& g = tp.grad(id);
      const T* gp = g.ptr();
      if (tp.requires_grad(a.id)) {
        auto& ga = tp.grad(a.id);
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < d1; ++j) ga.data[r * d1 + j] += gp[r * (d1 + d2) + j];
      }
      if (tp.requires_grad(b.id)) {
        auto& gb = tp.grad(b.id);
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < d2; ++j) gb.data[r * d2 + j] += gp[r * (d1 + d2) + d1 + j];
      }
    });
  }
  return {&t, id};
}

// x [M, D] plus a row vector [D] broadcast over rows.
template <class T>
Var<T> add_rowvec(Var<T> x, Var<T> v) {
  detail::check_same_tape(x, v);
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x.id);
  const auto& V = t.val(v.id);
  if (X.rank() != 2 || V.numel() != X.dim(1)) throw std::invalid_argument("add_rowvec: shape mismatch");
  const std::size_t m = X.dim(0), d = X.dim(1);
  Tensor<T> out(X.shape);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < d; ++j) out.data[r * d + j] = X.data[r * d + j] + V.data[j];
  const bool rg = detail::wants_grad(x) || detail::wants_grad(v);
  const int id = t.add(std::move(out), rg);
  if (rg) {
    t.set_back(id, [=](Tape<T>& tp) {
      const auto& g = tp.grad(id);
      if (tp.requires_grad(x.id)) {
        auto& gx = tp.grad(x.id);
        for (std::size_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
      }
      if (tp.requires_grad(v.id)) {
        auto& gv = tp.grad(v.id);
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < d; ++j) gv.data[j] += g.data[r * d + j];
      }
    });
  }
  return {&t, id};
}

// Inverted dropout with a saved mask; identity in eval mode or at p == 0.
template <class T>
Var<T> dropout(Var<T> x, T p, Rng& rng, bool train) {
  if (!train || p <= T(0)) return x;
  if (p >= T(1)) throw std::invalid_argument("dropout: p must be < 1");
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x.id);
  auto mask = std::make_shared<std::vector<T>>(X.numel());
  const T keep_scale = T(1) / (T(1) - p);
  for (std::size_t i = 0; i < X.numel(); ++i)
    (*mask)[i] = rng.uniform() >= static_cast<double>(p) ? keep_scale : T(0);
  Tensor<T> out(X.shape);
  for (std::size_t i = 0; i < X.numel(); ++i) out.data[i] = X.data[i] * (*mask)[i];
  const bool rg = detail::wants_grad(x);
  const int id = t.add(std::move(out), rg);
  if (rg) {
    t.set_back(id, [=](Tape<T>& tp) {
      const auto& g = tp.grad(id);
      auto& gx = tp.grad(x.id);
      for (std::size_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i] * (*mask)[i];
    });
  }
  return {&t, id};
}

// Masked mean cross-entropy over logits [M, C]; fused log-softmax keeps the
// gradient exact and stable.
template <class T>
Var<T> cross_entropy_logits(Var<T> logits, const std::vector<int>& labels,
                            const std::vector<std::uint8_t>& mask) {
  Tape<T>& t = *logits.tape;
  const auto& L = t.val(logits.id);
  if (L.rank() != 2) throw std::invalid_argument("cross_entropy: need rank-2 logits");
  const std::size_t m = L.dim(0), c = L.dim(1);
  if (labels.size() != m || mask.size() != m)
    throw std::invalid_argument("cross_entropy: labels/mask length mismatch");
  std::size_t kept = 0;
  for (auto v : mask) kept += v ? 1 : 0;
  if (kept == 0) throw std::invalid_argument("cross_entropy: all epochs masked out");

  auto probs = std::make_shared<Tensor<T>>(Shape{m, c});
  T total = T(0);
  for (std::size_t r = 0; r < m; ++r) {
    const T* lr = L.ptr() + r * c;
    T mx = lr[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, lr[j]);
    T sum = T(0);
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(lr[j] - mx);
    const T lse = std::log(sum) + mx;
    T* pr = probs->ptr() + r * c;
    for (std::size_t j = 0; j < c; ++j) pr[j] = std::exp(lr[j] - lse);
    if (mask[r]) {
      const int y = labels[r];
      if (y < 0 || static_cast<std::size_t>(y) >= c)
        throw std::invalid_argument("cross_entropy: label out of range");
      total += lse - lr[y];
    }
  }
  Tensor<T> out({1});
  out.data[0] = total / static_cast<T>(kept);
  const bool rg = detail::wants_grad(logits);
  const int id = t.add(std::move(out), rg);
  if (rg) {
    t.set_back(id, [=](Tape<T>& tp) {
      const T go = tp.grad(id).data[0] / static_cast<T>(kept);
      auto& gl = tp.grad(logits.id);
      for (std::size_t r = 0; r < m; ++r) {
        if (!mask[r]) continue;
        const T* pr = probs->ptr() + r * c;
        T* gr = gl.ptr() + r * c;
        for (std::size_t j = 0; j < c; ++j) gr[j] += go * pr[j];
        gr[labels[r]] -= go;
      }
    });
  }
  return {&t, id};
}

// Scalar projection sum_i x_i w_i against a fixed tensor. Gives tests a
// non-uniform upstream gradient (a plain mean would zero out softmax grads).
template <class T>
Var<T> weighted_sum(Var<T> x, std::shared_ptr<Tensor<T>> w) {
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x.id);
  if (w->numel() != X.numel()) throw std::invalid_argument("weighted_sum: size mismatch");
  Tensor<T> out({1});
  T acc = T(0);
  for (std::size_t i = 0; i < X.numel(); ++i) acc += X.data[i] * w->data[i];
  out.data[0] = acc;
  const bool rg = detail::wants_grad(x);
  const int id = t.add(std::move(out), rg);
  if (rg) {
    t.set_back(id, [=](Tape<T>& tp) {
      const T go = tp.grad(id).data[0];
      auto& gx = tp.grad(x.id);
      for (std::size_t i = 0; i < gx.numel(); ++i) gx.data[i] += go * w->data[i];
    });
  }
  return {&t, id};
}

template <class T>
Var<T> mean_all(Var<T> x) {
  Tape<T>& t = *x.tape;
  const auto& X = t.val(x.id);
  Tensor<T> out({1});
  T acc = T(0);
  for (std::size_t i = 0; i < X.numel(); ++i) acc += X.data[i];
  const T inv = T(1) / static_cast<T>(X.numel());
  out.data[0] = acc * inv;
  const bool rg = detail::wants_grad(x);
  const int id = t.add(std::move(out), rg);
  if (rg) {
    t.set_back(id, [=](Tape<T>& tp) {
      const T gv = tp.grad(id).data[0] * inv;
      auto& gx = tp.grad(x.id);
      for (std::size_t i = 0; i < gx.numel(); ++i) gx.data[i] += gv;
    });
  }
  return {&t, id};
}

template <class T>
void check_finite(const Tensor<T>& v, const std::string& where) {
  for (const T x : v.data) {
    if (!std::isfinite(static_cast<double>(x)))
      throw std::runtime_error("non-finite value in " + where);
  }
}

}  // namespace somno::ad
