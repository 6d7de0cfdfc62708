#include "itsr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "itsr/errors.hpp"
#include "itsr/kernels.hpp"

namespace itsr::inline ITSR_ABI {
namespace {

using ImplPtr = std::shared_ptr<detail::TensorImpl>;

bool tracked(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

void record(std::string_view op, const Tensor& out, std::function<void()> fn) {
  out.impl()->requires_grad = true;
  active_tape()->record(op, out.impl(), std::move(fn));
}

Tensor checked(Tensor out, std::string_view op) {
  if (!out.all_finite()) {
    throw DomainError(std::string(op) + " produced a non-finite value");
  }
  return out;
}

void require_matrix(const Tensor& t, std::string_view op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + " expects a matrix, got " +
                     shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) +
                     " and " + shape_string(b.shape()) + " differ");
  }
}

std::size_t rows_of(const Tensor& t) { return t.rank() == 1 ? 1 : t.dim(0); }
std::size_t cols_of(const Tensor& t) { return t.shape().back(); }

}  // namespace

// --- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ for " +
                     shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  Tensor out({m, n});
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  if (tracked({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    record("matmul", out, [ai, bi, oi, m, k, n] {
      if (ai->requires_grad) {
        kernels::gemm_nt(oi->grad.data(), bi->data.data(), ai->grad_buffer(), m,
                         n, k);
      }
      if (bi->requires_grad) {
        kernels::gemm_tn(ai->data.data(), oi->grad.data(), bi->grad_buffer(), k,
                         m, n);
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  if (tracked({&a})) {
    ImplPtr ai = a.impl(), oi = out.impl();
    record("transpose", out, [ai, oi, m, n] {
      Real* g = ai->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += oi->grad[j * m + i];
    });
  }
  return out;
}

// --- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  if (tracked({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    record("add", out, [ai, bi, oi] {
      for (auto* in : {ai.get(), bi.get()}) {
        if (!in->requires_grad) continue;
        Real* g = in->grad_buffer();
        for (std::size_t i = 0; i < oi->grad.size(); ++i) g[i] += oi->grad[i];
      }
    });
  }
  return checked(out, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
  if (tracked({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    record("sub", out, [ai, bi, oi] {
      if (ai->requires_grad) {
        Real* g = ai->grad_buffer();
        for (std::size_t i = 0; i < oi->grad.size(); ++i) g[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        Real* g = bi->grad_buffer();
        for (std::size_t i = 0; i < oi->grad.size(); ++i) g[i] -= oi->grad[i];
      }
    });
  }
  return checked(out, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  if (tracked({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    record("mul", out, [ai, bi, oi] {
      if (ai->requires_grad) {
        Real* g = ai->grad_buffer();
        for (std::size_t i = 0; i < oi->grad.size(); ++i)
          g[i] += oi->grad[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        Real* g = bi->grad_buffer();
        for (std::size_t i = 0; i < oi->grad.size(); ++i)
          g[i] += oi->grad[i] * ai->data[i];
      }
    });
  }
  return checked(out, "mul");
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = cols_of(x);
  if (bias.numel() != n) {
    throw ShapeError("add_bias: bias " + shape_string(bias.shape()) +
                     " does not match " + shape_string(x.shape()));
  }
  const std::size_t m = x.numel() / n;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + bias[j];
  if (tracked({&x, &bias})) {
    ImplPtr xi = x.impl(), bi = bias.impl(), oi = out.impl();
    record("add_bias", out, [xi, bi, oi, m, n] {
      if (xi->requires_grad) {
        Real* g = xi->grad_buffer();
        for (std::size_t i = 0; i < m * n; ++i) g[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        Real* g = bi->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += oi->grad[i * n + j];
      }
    });
  }
  return checked(out, "add_bias");
}

Tensor scale(const Tensor& x, Real c) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * c;
  if (tracked({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record("scale", out, [xi, oi, c] {
      Real* g = xi->grad_buffer();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) g[i] += oi->grad[i] * c;
    });
  }
  return checked(out, "scale");
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) {
    throw ShapeError("mul_scalar: factor must have one element, got " +
                     shape_string(s.shape()));
  }
  const Real factor = s[0];
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * factor;
  if (tracked({&x, &s})) {
    ImplPtr xi = x.impl(), si = s.impl(), oi = out.impl();
    record("mul_scalar", out, [xi, si, oi] {
      if (xi->requires_grad) {
        Real* g = xi->grad_buffer();
        for (std::size_t i = 0; i < oi->grad.size(); ++i)
          g[i] += oi->grad[i] * si->data[0];
      }
      if (si->requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < oi->grad.size(); ++i)
          acc += static_cast<double>(oi->grad[i]) * xi->data[i];
        si->grad_buffer()[0] += static_cast<Real>(acc);
      }
    });
  }
  return checked(out, "mul_scalar");
}

Tensor exp(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = std::exp(x[i]);
  if (tracked({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record("exp", out, [xi, oi] {
      Real* g = xi->grad_buffer();
      for (std::size_t i = 0; i < oi->grad.size(); ++i)
        g[i] += oi->grad[i] * oi->data[i];
    });
  }
  return checked(out, "exp");
}

Tensor tanh(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = std::tanh(x[i]);
  if (tracked({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record("tanh", out, [xi, oi] {
      Real* g = xi->grad_buffer();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) {
        const Real y = oi->data[i];
        g[i] += oi->grad[i] * (Real(1) - y * y);
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0 ? x[i] : Real(0);
  if (tracked({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record("relu", out, [xi, oi] {
      Real* g = xi->grad_buffer();
      for (std::size_t i = 0; i < oi->grad.size(); ++i)
        if (xi->data[i] > 0) g[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double rate, Rng& rng, Mode mode) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1), got " +
                      std::to_string(rate));
  }
  if (mode == Mode::Eval || rate == 0.0) return x;
  const Real keep_scale = static_cast<Real>(1.0 / (1.0 - rate));
  std::vector<Real> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() < rate ? Real(0) : keep_scale;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * mask[i];
  if (tracked({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record("dropout", out, [xi, oi, mask = std::move(mask)] {
      Real* g = xi->grad_buffer();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) g[i] += oi->grad[i] * mask[i];
    });
  }
  return out;
}

// --- reductions -----------------------------------------------------------

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (Real v : x.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<Real>(acc));
  if (tracked({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record("sum", out, [xi, oi] {
      Real* g = xi->grad_buffer();
      for (std::size_t i = 0; i < xi->data.size(); ++i) g[i] += oi->grad[0];
    });
  }
  return checked(out, "sum");
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), Real(1) / static_cast<Real>(x.numel()));
}

Tensor softmax_rows(const Tensor& x) {
  const std::size_t n = cols_of(x), m = x.numel() / n;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const Real* row = x.data().data() + i * n;
    Real* y = out.data().data() + i * n;
    const Real mx = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(row[j] - mx);
      total += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] = static_cast<Real>(y[j] / total);
  }
  if (tracked({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record("softmax_rows", out, [xi, oi, m, n] {
      Real* g = xi->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        const Real* y = oi->data.data() + i * n;
        const Real* dy = oi->grad.data() + i * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(y[j]) * dy[j];
        for (std::size_t j = 0; j < n; ++j)
          g[i * n + j] += y[j] * static_cast<Real>(dy[j] - dot);
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  Real eps) {
  const std::size_t n = cols_of(x), m = x.numel() / n;
  if (gain.numel() != n || bias.numel() != n) {
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(n) +
                     " entries");
  }
  Tensor out(x.shape());
  std::vector<Real> xhat(x.numel());
  std::vector<Real> rstd(m);
  for (std::size_t i = 0; i < m; ++i) {
    const Real* row = x.data().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double r = 1.0 / std::sqrt(var + static_cast<double>(eps));
    rstd[i] = static_cast<Real>(r);
    for (std::size_t j = 0; j < n; ++j) {
      const Real h = static_cast<Real>((row[j] - mu) * r);
      xhat[i * n + j] = h;
      out[i * n + j] = h * gain[j] + bias[j];
    }
  }
  if (tracked({&x, &gain, &bias})) {
    ImplPtr xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
    record("layer_norm", out,
           [xi, gi, bi, oi, m, n, xhat = std::move(xhat), rstd = std::move(rstd)] {
             const Real* dy = oi->grad.data();
             if (gi->requires_grad) {
               Real* g = gi->grad_buffer();
               for (std::size_t i = 0; i < m; ++i)
                 for (std::size_t j = 0; j < n; ++j)
                   g[j] += dy[i * n + j] * xhat[i * n + j];
             }
             if (bi->requires_grad) {
               Real* g = bi->grad_buffer();
               for (std::size_t i = 0; i < m; ++i)
                 for (std::size_t j = 0; j < n; ++j) g[j] += dy[i * n + j];
             }
             if (xi->requires_grad) {
               Real* g = xi->grad_buffer();
               for (std::size_t i = 0; i < m; ++i) {
                 double mean_d = 0.0, mean_dx = 0.0;
                 for (std::size_t j = 0; j < n; ++j) {
                   const double d = static_cast<double>(dy[i * n + j]) * gi->data[j];
                   mean_d += d;
                   mean_dx += d * xhat[i * n + j];
                 }
                 mean_d /= static_cast<double>(n);
                 mean_dx /= static_cast<double>(n);
                 for (std::size_t j = 0; j < n; ++j) {
                   const double d = static_cast<double>(dy[i * n + j]) * gi->data[j];
                   g[i * n + j] += static_cast<Real>(
                       rstd[i] * (d - mean_d - xhat[i * n + j] * mean_dx));
                 }
               }
             }
           });
  }
  return checked(out, "layer_norm");
}

BatchNorm::BatchNorm(std::size_t channels)
    : gamma({channels}, Real(1)),
      beta({channels}, Real(0)),
      running_mean(channels, Real(0)),
      running_var(channels, Real(1)) {}

Tensor batch_norm(const Tensor& x, BatchNorm& bn, Mode mode) {
  require_matrix(x, "batch_norm");
  const std::size_t rows = x.dim(0), c = x.dim(1);
  if (c != bn.channels()) {
    throw ShapeError("batch_norm: " + std::to_string(bn.channels()) +
                     " channels configured, input " + shape_string(x.shape()));
  }
  Tensor out(x.shape());
  if (mode == Mode::Eval) {
    if (bn.batches_seen == 0) {
      throw StateError("batch_norm: eval mode needs running statistics");
    }
    std::vector<Real> inv(c);
    for (std::size_t j = 0; j < c; ++j)
      inv[j] = Real(1) / std::sqrt(bn.running_var[j] + bn.eps);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < c; ++j)
        out.at(i, j) =
            (x.at(i, j) - bn.running_mean[j]) * inv[j] * bn.gamma[j] + bn.beta[j];
    if (tracked({&x, &bn.gamma, &bn.beta})) {
      ImplPtr xi = x.impl(), gi = bn.gamma.impl(), bi = bn.beta.impl(),
              oi = out.impl();
      std::vector<Real> mu = bn.running_mean;
      record("batch_norm", out, [xi, gi, bi, oi, rows, c, inv, mu] {
        const Real* dy = oi->grad.data();
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            const Real d = dy[i * c + j];
            if (xi->requires_grad) xi->grad_buffer()[i * c + j] += d * inv[j] * gi->data[j];
            if (gi->requires_grad)
              gi->grad_buffer()[j] += d * (xi->data[i * c + j] - mu[j]) * inv[j];
            if (bi->requires_grad) bi->grad_buffer()[j] += d;
          }
        }
      });
    }
    return checked(out, "batch_norm");
  }

  std::vector<double> mu(c, 0.0), var(c, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < c; ++j) mu[j] += x.at(i, j);
  for (auto& v : mu) v /= static_cast<double>(rows);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = x.at(i, j) - mu[j];
      var[j] += d * d;
    }
  for (auto& v : var) v /= static_cast<double>(rows);

  std::vector<Real> rstd(c);
  std::vector<Real> xhat(x.numel());
  for (std::size_t j = 0; j < c; ++j)
    rstd[j] = static_cast<Real>(1.0 / std::sqrt(var[j] + static_cast<double>(bn.eps)));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const Real h = static_cast<Real>((x.at(i, j) - mu[j]) * rstd[j]);
      xhat[i * c + j] = h;
      out.at(i, j) = h * bn.gamma[j] + bn.beta[j];
    }
  for (std::size_t j = 0; j < c; ++j) {
    bn.running_mean[j] = (Real(1) - bn.momentum) * bn.running_mean[j] +
                         bn.momentum * static_cast<Real>(mu[j]);
    bn.running_var[j] = (Real(1) - bn.momentum) * bn.running_var[j] +
                        bn.momentum * static_cast<Real>(var[j]);
  }
  ++bn.batches_seen;

  if (tracked({&x, &bn.gamma, &bn.beta})) {
    ImplPtr xi = x.impl(), gi = bn.gamma.impl(), bi = bn.beta.impl(),
            oi = out.impl();
    record("batch_norm", out,
           [xi, gi, bi, oi, rows, c, xhat = std::move(xhat), rstd = std::move(rstd)] {
             const Real* dy = oi->grad.data();
             std::vector<double> sum_d(c, 0.0), sum_dx(c, 0.0), sum_dy(c, 0.0),
                 sum_dyx(c, 0.0);
             for (std::size_t i = 0; i < rows; ++i)
               for (std::size_t j = 0; j < c; ++j) {
                 const double g = dy[i * c + j];
                 sum_dy[j] += g;
                 sum_dyx[j] += g * xhat[i * c + j];
               }
             if (gi->requires_grad) {
               Real* g = gi->grad_buffer();
               for (std::size_t j = 0; j < c; ++j) g[j] += static_cast<Real>(sum_dyx[j]);
             }
             if (bi->requires_grad) {
               Real* g = bi->grad_buffer();
               for (std::size_t j = 0; j < c; ++j) g[j] += static_cast<Real>(sum_dy[j]);
             }
             if (xi->requires_grad) {
               Real* g = xi->grad_buffer();
               const double inv_n = 1.0 / static_cast<double>(rows);
               for (std::size_t i = 0; i < rows; ++i)
                 for (std::size_t j = 0; j < c; ++j) {
                   const double gam = gi->data[j];
                   const double d = dy[i * c + j] * gam;
                   const double md = sum_dy[j] * gam * inv_n;
                   const double mdx = sum_dyx[j] * gam * inv_n;
                   g[i * c + j] +=
                       static_cast<Real>(rstd[j] * (d - md - xhat[i * c + j] * mdx));
                 }
             }
           });
  }
  return checked(out, "batch_norm");
}

// --- sequence ops ---------------------------------------------------------

Tensor conv1d_tokens(const Tensor& x, const Tensor& kernels, std::size_t padding,
                     std::size_t tokens_per_seq) {
  require_matrix(x, "conv1d_tokens");
  if (kernels.rank() != 3) {
    throw ShapeError("conv1d_tokens: kernels must be [c_out x c_in x k], got " +
                     shape_string(kernels.shape()));
  }
  const std::size_t c_out = kernels.dim(0), c_in = kernels.dim(1),
                    width = kernels.dim(2);
  const std::size_t T = tokens_per_seq;
  if (T < 1 || x.dim(0) % T != 0) {
    throw ShapeError("conv1d_tokens: " + std::to_string(x.dim(0)) +
                     " rows are not a whole number of " + std::to_string(T) +
                     "-token sequences");
  }
  if (x.dim(1) != c_in) {
    throw ShapeError("conv1d_tokens: input " + shape_string(x.shape()) +
                     " vs kernels " + shape_string(kernels.shape()));
  }
  if (T + 2 * padding < width) {
    throw ShapeError("conv1d_tokens: kernel wider than padded sequence");
  }
  const std::size_t T_out = T + 2 * padding - width + 1;
  const std::size_t G = x.dim(0) / T;
  Tensor out({G * T_out, c_out});
  const Real* xd = x.data().data();
  const Real* w = kernels.data().data();
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t t = 0; t < T_out; ++t)
      for (std::size_t o = 0; o < c_out; ++o) {
        Real acc = 0;
        for (std::size_t j = 0; j < width; ++j) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) -
                                     static_cast<std::ptrdiff_t>(padding);
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
          const Real* xr = xd + (g * T + static_cast<std::size_t>(src)) * c_in;
          for (std::size_t c = 0; c < c_in; ++c)
            acc += w[(o * c_in + c) * width + j] * xr[c];
        }
        out.at(g * T_out + t, o) = acc;
      }
  if (tracked({&x, &kernels})) {
    ImplPtr xi = x.impl(), wi = kernels.impl(), oi = out.impl();
    record("conv1d_tokens", out,
           [xi, wi, oi, G, T, T_out, c_in, c_out, width, padding] {
             const Real* dy = oi->grad.data();
             Real* gx = xi->requires_grad ? xi->grad_buffer() : nullptr;
             Real* gw = wi->requires_grad ? wi->grad_buffer() : nullptr;
             for (std::size_t g = 0; g < G; ++g)
               for (std::size_t t = 0; t < T_out; ++t)
                 for (std::size_t o = 0; o < c_out; ++o) {
                   const Real d = dy[(g * T_out + t) * c_out + o];
                   if (d == Real(0)) continue;
                   for (std::size_t j = 0; j < width; ++j) {
                     const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) -
                                                static_cast<std::ptrdiff_t>(padding);
                     if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
                     const std::size_t row = g * T + static_cast<std::size_t>(src);
                     for (std::size_t c = 0; c < c_in; ++c) {
                       const std::size_t widx = (o * c_in + c) * width + j;
                       if (gx) gx[row * c_in + c] += d * wi->data[widx];
                       if (gw) gw[widx] += d * xi->data[row * c_in + c];
                     }
                   }
                 }
           });
  }
  return checked(out, "conv1d_tokens");
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  const std::size_t p = cols_of(a), q = cols_of(b);
  const std::size_t m = a.numel() / p;
  if (b.numel() / q != m || a.rank() != b.rank()) {
    throw ShapeError("concat_cols: row counts differ for " +
                     shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  Shape shape = a.shape();
  shape.back() = p + q;
  Tensor out(shape);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(a.data().data() + i * p, p, out.data().data() + i * (p + q));
    std::copy_n(b.data().data() + i * q, q, out.data().data() + i * (p + q) + p);
  }
  if (tracked({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    record("concat_cols", out, [ai, bi, oi, m, p, q] {
      for (std::size_t i = 0; i < m; ++i) {
        const Real* dy = oi->grad.data() + i * (p + q);
        if (ai->requires_grad) {
          Real* g = ai->grad_buffer() + i * p;
          for (std::size_t j = 0; j < p; ++j) g[j] += dy[j];
        }
        if (bi->requires_grad) {
          Real* g = bi->grad_buffer() + i * q;
          for (std::size_t j = 0; j < q; ++j) g[j] += dy[p + j];
        }
      }
    });
  }
  return out;
}

Tensor stack_rows(std::span<const Tensor> rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no rows");
  const std::size_t n = rows.front().numel();
  std::vector<Real> values;
  values.reserve(rows.size() * n);
  bool any_grad = false;
  for (const auto& r : rows) {
    if (r.numel() != n) {
      throw ShapeError("stack_rows: rows of " + std::to_string(n) + " and " +
                       std::to_string(r.numel()) + " values");
    }
    values.insert(values.end(), r.data().begin(), r.data().end());
    any_grad = any_grad || r.requires_grad();
  }
  Tensor out({rows.size(), n}, std::move(values));
  if (active_tape() && any_grad) {
    std::vector<ImplPtr> ins;
    for (const auto& r : rows) ins.push_back(r.impl());
    ImplPtr oi = out.impl();
    record("stack_rows", out, [ins = std::move(ins), oi, n] {
      for (std::size_t i = 0; i < ins.size(); ++i) {
        if (!ins[i]->requires_grad) continue;
        Real* g = ins[i]->grad_buffer();
        for (std::size_t j = 0; j < n; ++j) g[j] += oi->grad[i * n + j];
      }
    });
  }
  return out;
}

Tensor segment_mean(const Tensor& x, std::span<const std::size_t> offsets) {
  require_matrix(x, "segment_mean");
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != x.dim(0)) {
    throw ShapeError("segment_mean: offsets must run from 0 to the row count");
  }
  const std::size_t c = x.dim(1), G = offsets.size() - 1;
  Tensor out({G, c});
  for (std::size_t g = 0; g < G; ++g) {
    if (offsets[g + 1] <= offsets[g]) throw ShapeError("segment_mean: empty segment");
    const double inv = 1.0 / static_cast<double>(offsets[g + 1] - offsets[g]);
    for (std::size_t j = 0; j < c; ++j) {
      double acc = 0.0;
      for (std::size_t r = offsets[g]; r < offsets[g + 1]; ++r) acc += x.at(r, j);
      out.at(g, j) = static_cast<Real>(acc * inv);
    }
  }
  if (tracked({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    std::vector<std::size_t> offs(offsets.begin(), offsets.end());
    record("segment_mean", out, [xi, oi, offs = std::move(offs), c, G] {
      Real* g = xi->grad_buffer();
      for (std::size_t s = 0; s < G; ++s) {
        const Real inv = Real(1) / static_cast<Real>(offs[s + 1] - offs[s]);
        for (std::size_t r = offs[s]; r < offs[s + 1]; ++r)
          for (std::size_t j = 0; j < c; ++j) g[r * c + j] += oi->grad[s * c + j] * inv;
      }
    });
  }
  return out;
}

Tensor mean_pool_tokens(const Tensor& x, std::size_t tokens_per_seq) {
  require_matrix(x, "mean_pool_tokens");
  if (tokens_per_seq == 0 || x.dim(0) % tokens_per_seq != 0) {
    throw ShapeError("mean_pool_tokens: " + std::to_string(x.dim(0)) +
                     " rows do not split into " + std::to_string(tokens_per_seq) +
                     "-token sequences");
  }
  std::vector<std::size_t> offsets;
  for (std::size_t r = 0; r <= x.dim(0); r += tokens_per_seq) offsets.push_back(r);
  return segment_mean(x, offsets);
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  require_matrix(table, "gather_rows");
  if (indices.empty()) throw ShapeError("gather_rows: no indices");
  const std::size_t V = table.dim(0), d = table.dim(1);
  Tensor out({indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= V) throw ShapeError("gather_rows: index out of range");
    std::copy_n(table.data().data() + indices[i] * d, d, out.data().data() + i * d);
  }
  if (tracked({&table})) {
    ImplPtr ti = table.impl(), oi = out.impl();
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    record("gather_rows", out, [ti, oi, idx = std::move(idx), d] {
      Real* g = ti->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += oi->grad[i * d + j];
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  Tensor out = x.reshaped(std::move(shape));
  if (tracked({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record("reshape", out, [xi, oi] {
      Real* g = xi->grad_buffer();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) g[i] += oi->grad[i];
    });
  }
  return out;
}

// --- similarity and loss --------------------------------------------------

Tensor l2_normalize_rows(const Tensor& x) {
  const std::size_t n = cols_of(x), m = rows_of(x);
  Tensor out(x.shape());
  std::vector<Real> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double norm =
        kernels::l2_norm(std::span<const Real>(x.data().data() + i * n, n));
    if (!(norm > 0.0)) {
      throw DomainError("zero-norm feature row " + std::to_string(i));
    }
    norms[i] = static_cast<Real>(norm);
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = static_cast<Real>(x[i * n + j] / norm);
  }
  if (tracked({&x})) {
    ImplPtr xi = x.impl(), oi = out.impl();
    record("l2_normalize_rows", out, [xi, oi, norms = std::move(norms), m, n] {
      Real* g = xi->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        const Real* y = oi->data.data() + i * n;
        const Real* dy = oi->grad.data() + i * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(y[j]) * dy[j];
        for (std::size_t j = 0; j < n; ++j)
          g[i * n + j] += static_cast<Real>((dy[j] - y[j] * dot) / norms[i]);
      }
    });
  }
  return out;
}

Tensor diagonal_cross_entropy(const Tensor& logits) {
  require_matrix(logits, "diagonal_cross_entropy");
  const std::size_t b = logits.dim(0);
  if (logits.dim(1) != b) {
    throw ShapeError("diagonal_cross_entropy: logits must be square, got " +
                     shape_string(logits.shape()));
  }
  std::vector<Real> probs(b * b);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const Real* row = logits.data().data() + i * b;
    const double mx = *std::max_element(row, row + b);
    double z = 0.0;
    for (std::size_t j = 0; j < b; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[i];
    for (std::size_t j = 0; j < b; ++j)
      probs[i * b + j] = static_cast<Real>(std::exp(row[j] - lse));
  }
  Tensor out = Tensor::scalar(static_cast<Real>(total / static_cast<double>(b)));
  if (tracked({&logits})) {
    ImplPtr li = logits.impl(), oi = out.impl();
    record("diagonal_cross_entropy", out, [li, oi, probs = std::move(probs), b] {
      Real* g = li->grad_buffer();
      const Real up = oi->grad[0] / static_cast<Real>(b);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j)
          g[i * b + j] += up * (probs[i * b + j] - (i == j ? Real(1) : Real(0)));
    });
  }
  return checked(out, "diagonal_cross_entropy");
}

// --- attention ------------------------------------------------------------

Tensor cross_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  require_matrix(q, "cross_attention");
  require_matrix(k, "cross_attention");
  require_matrix(v, "cross_attention");
  if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
    throw ShapeError("cross_attention: Q " + shape_string(q.shape()) + ", K " +
                     shape_string(k.shape()) + ", V " + shape_string(v.shape()));
  }
  const Real inv_sqrt_d = Real(1) / std::sqrt(static_cast<Real>(q.dim(1)));
  Tensor weights = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_d));
  return matmul(weights, v);
}

Tensor block_cross_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                             std::size_t heads, std::size_t q_tokens,
                             std::size_t kv_tokens) {
  require_matrix(q, "block_cross_attention");
  require_matrix(k, "block_cross_attention");
  require_matrix(v, "block_cross_attention");
  const std::size_t width = q.dim(1);
  if (heads == 0 || width % heads != 0 || k.dim(1) != width || v.dim(1) != width) {
    throw ShapeError("block_cross_attention: widths Q " + shape_string(q.shape()) +
                     ", K " + shape_string(k.shape()) + ", V " +
                     shape_string(v.shape()) + " with " + std::to_string(heads) +
                     " heads");
  }
  if (q_tokens == 0 || kv_tokens == 0 || q.dim(0) % q_tokens != 0 ||
      k.dim(0) != v.dim(0) || k.dim(0) % kv_tokens != 0 ||
      q.dim(0) / q_tokens != k.dim(0) / kv_tokens) {
    throw ShapeError("block_cross_attention: sequence counts disagree");
  }
  const std::size_t G = q.dim(0) / q_tokens, d = width / heads;
  const std::size_t Tq = q_tokens, Tk = kv_tokens;
  const Real inv_sqrt_d = Real(1) / std::sqrt(static_cast<Real>(d));
  // attention weights, [G][heads][Tq][Tk]
  std::vector<Real> weights(G * heads * Tq * Tk);
  Tensor out({G * Tq, width});
  const Real* qd = q.data().data();
  const Real* kd = k.data().data();
  const Real* vd = v.data().data();
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t h = 0; h < heads; ++h) {
      Real* A = weights.data() + (g * heads + h) * Tq * Tk;
      for (std::size_t i = 0; i < Tq; ++i) {
        const Real* qi = qd + (g * Tq + i) * width + h * d;
        Real* a = A + i * Tk;
        for (std::size_t j = 0; j < Tk; ++j) {
          const Real* kj = kd + (g * Tk + j) * width + h * d;
          Real dot = 0;
          for (std::size_t c = 0; c < d; ++c) dot += qi[c] * kj[c];
          a[j] = dot * inv_sqrt_d;
        }
        const Real mx = *std::max_element(a, a + Tk);
        double z = 0.0;
        for (std::size_t j = 0; j < Tk; ++j) {
          a[j] = std::exp(a[j] - mx);
          z += a[j];
        }
        for (std::size_t j = 0; j < Tk; ++j) a[j] = static_cast<Real>(a[j] / z);
        Real* oi = out.data().data() + (g * Tq + i) * width + h * d;
        for (std::size_t j = 0; j < Tk; ++j) {
          const Real* vj = vd + (g * Tk + j) * width + h * d;
          for (std::size_t c = 0; c < d; ++c) oi[c] += a[j] * vj[c];
        }
      }
    }
  if (tracked({&q, &k, &v})) {
    ImplPtr qi = q.impl(), ki = k.impl(), vi = v.impl(), oi = out.impl();
    record("block_cross_attention", out,
           [qi, ki, vi, oi, weights = std::move(weights), G, heads, Tq, Tk, d,
            width, inv_sqrt_d] {
             Real* gq = qi->requires_grad ? qi->grad_buffer() : nullptr;
             Real* gk = ki->requires_grad ? ki->grad_buffer() : nullptr;
             Real* gv = vi->requires_grad ? vi->grad_buffer() : nullptr;
             std::vector<Real> dA(Tk);
             for (std::size_t g = 0; g < G; ++g)
               for (std::size_t h = 0; h < heads; ++h) {
                 const Real* A = weights.data() + (g * heads + h) * Tq * Tk;
                 for (std::size_t i = 0; i < Tq; ++i) {
                   const Real* dO = oi->grad.data() + (g * Tq + i) * width + h * d;
                   const Real* a = A + i * Tk;
                   double dot = 0.0;
                   for (std::size_t j = 0; j < Tk; ++j) {
                     const std::size_t vrow = (g * Tk + j) * width + h * d;
                     Real s = 0;
                     for (std::size_t c = 0; c < d; ++c) {
                       s += dO[c] * vi->data[vrow + c];
                       if (gv) gv[vrow + c] += a[j] * dO[c];
                     }
                     dA[j] = s;
                     dot += static_cast<double>(s) * a[j];
                   }
                   const std::size_t qrow = (g * Tq + i) * width + h * d;
                   for (std::size_t j = 0; j < Tk; ++j) {
                     const Real dz = a[j] * static_cast<Real>(dA[j] - dot) * inv_sqrt_d;
                     if (dz == Real(0)) continue;
                     const std::size_t krow = (g * Tk + j) * width + h * d;
                     for (std::size_t c = 0; c < d; ++c) {
                       if (gq) gq[qrow + c] += dz * ki->data[krow + c];
                       if (gk) gk[krow + c] += dz * qi->data[qrow + c];
                     }
                   }
                 }
               }
           });
  }
  return checked(out, "block_cross_attention");
}

}  // namespace itsr
