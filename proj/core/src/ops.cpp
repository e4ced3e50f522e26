#include "attune/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "attune/errors.hpp"

ATTUNE_NAMESPACE_BEGIN

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

template <class F, class G>
Var unary(Var a, const char* op, F forward, G derivative) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = forward(x[i]);
  return a.graph().record(std::move(out), {a},
                          [derivative](BackwardContext& ctx) {
                            const Tensor& g = ctx.grad_output();
                            const Tensor& x = ctx.input(0);
                            const Tensor& y = ctx.output();
                            Tensor& dx = ctx.input_grad(0);
                            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * derivative(x[i], y[i]);
                          },
                          op);
}

struct ConvDims {
  std::size_t n, c, h, w, o, kh, kw, oh, ow;
};

ConvDims conv_dims(const Tensor& x, const Tensor& k, const Tensor& b) {
  const bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3) throw DimensionError("conv2d_valid: input must be [C,H,W] or [N,C,H,W]");
  if (k.rank() != 4) throw DimensionError("conv2d_valid: kernels must be [O,C,kh,kw]");
  ConvDims d{};
  d.n = batched ? x.dim(0) : 1;
  d.c = x.dim(batched ? 1 : 0);
  d.h = x.dim(batched ? 2 : 1);
  d.w = x.dim(batched ? 3 : 2);
  d.o = k.dim(0);
  d.kh = k.dim(2);
  d.kw = k.dim(3);
  if (k.dim(1) != d.c) {
    throw DimensionError("conv2d_valid: kernel channels " + std::to_string(k.dim(1)) + " != input channels " +
                         std::to_string(d.c));
  }
  if (d.kh > d.h || d.kw > d.w) throw DimensionError("conv2d_valid: kernel larger than input");
  if (b.rank() != 1 || b.dim(0) != d.o) throw DimensionError("conv2d_valid: bias must be [O]");
  d.oh = d.h - d.kh + 1;
  d.ow = d.w - d.kw + 1;
  return d;
}

}  // namespace

Real softplus(Real x) { return std::max(x, Real(0)) + std::log1p(std::exp(-std::abs(x))); }

Real sigmoid(Real x) {
  if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& y = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  return a.graph().record(std::move(out), {a, b},
                          [](BackwardContext& ctx) {
                            const Tensor& g = ctx.grad_output();
                            for (std::size_t k = 0; k < 2; ++k) {
                              if (!ctx.needs_grad(k)) continue;
                              Tensor& d = ctx.input_grad(k);
                              for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                            }
                          },
                          "add");
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const Tensor& y = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  return a.graph().record(std::move(out), {a, b},
                          [](BackwardContext& ctx) {
                            const Tensor& g = ctx.grad_output();
                            if (ctx.needs_grad(0)) {
                              Tensor& d = ctx.input_grad(0);
                              for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                            }
                            if (ctx.needs_grad(1)) {
                              Tensor& d = ctx.input_grad(1);
                              for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
                            }
                          },
                          "sub");
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& y = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  return a.graph().record(std::move(out), {a, b},
                          [](BackwardContext& ctx) {
                            const Tensor& g = ctx.grad_output();
                            const Tensor& x0 = ctx.input(0);
                            const Tensor& x1 = ctx.input(1);
                            if (ctx.needs_grad(0)) {
                              Tensor& d = ctx.input_grad(0);
                              for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * x1[i];
                            }
                            if (ctx.needs_grad(1)) {
                              Tensor& d = ctx.input_grad(1);
                              for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * x0[i];
                            }
                          },
                          "mul");
}

Var scale(Var a, Real factor) {
  return unary(a, "scale", [factor](Real x) { return x * factor; }, [factor](Real, Real) { return factor; });
}

Var add_scalar(Var a, Real offset) {
  return unary(a, "add_scalar", [offset](Real x) { return x + offset; }, [](Real, Real) { return Real(1); });
}

Var square(Var a) {
  return unary(a, "square", [](Real x) { return x * x; }, [](Real x, Real) { return Real(2) * x; });
}

Var sqrt(Var a) {
  for (Real v : a.value().values()) {
    if (!(v > 0)) throw NumericError("sqrt: argument must be positive");
  }
  return unary(a, "sqrt", [](Real x) { return std::sqrt(x); }, [](Real, Real y) { return Real(0.5) / y; });
}

Var log(Var a) {
  for (Real v : a.value().values()) {
    if (!(v > 0)) throw NumericError("log: argument must be positive");
  }
  return unary(a, "log", [](Real x) { return std::log(x); }, [](Real x, Real) { return Real(1) / x; });
}

Var exp(Var a) {
  return unary(a, "exp", [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

Var relu(Var a) {
  return unary(a, "relu", [](Real x) { return x > 0 ? x : Real(0); },
               [](Real x, Real) { return x > 0 ? Real(1) : Real(0); });
}

Var softplus(Var a) {
  return unary(a, "softplus", [](Real x) { return softplus(x); }, [](Real x, Real) { return sigmoid(x); });
}

Var sum(Var a) {
  double acc = 0;
  for (Real v : a.value().values()) acc += v;
  return a.graph().record(Tensor::scalar(static_cast<Real>(acc)), {a},
                          [](BackwardContext& ctx) {
                            const Real g = ctx.grad_output()[0];
                            Tensor& d = ctx.input_grad(0);
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g;
                          },
                          "sum");
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  double acc = 0;
  for (Real v : a.value().values()) acc += v;
  return a.graph().record(Tensor::scalar(static_cast<Real>(acc / static_cast<double>(n))), {a},
                          [n](BackwardContext& ctx) {
                            const Real g = ctx.grad_output()[0] / static_cast<Real>(n);
                            Tensor& d = ctx.input_grad(0);
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g;
                          },
                          "mean");
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.graph().record(std::move(out), {a},
                          [](BackwardContext& ctx) {
                            const Tensor& g = ctx.grad_output();
                            Tensor& d = ctx.input_grad(0);
                            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                          },
                          "reshape");
}

Var flatten(Var a) {
  const Shape& s = a.shape();
  if (s.size() < 2) throw DimensionError("flatten: need a leading batch axis");
  return reshape(a, Shape{s[0], a.value().size() / s[0]});
}

namespace {

// Convolution as a matrix product over im2col columns. Columns cover
// kConvTile output positions at a time, drawn from consecutive samples; row q
// of a column block is kernel tap q = (c*kh + a)*kw + b.
constexpr std::size_t kConvTile = 512;

std::size_t samples_per_tile(const ConvDims& d) {
  return std::max<std::size_t>(1, kConvTile / (d.oh * d.ow));
}

void im2col(const Real* x, const ConvDims& d, std::size_t n0, std::size_t nb, Real* col) {
  const std::size_t in_plane = d.h * d.w;
  const std::size_t out_plane = d.oh * d.ow;
  const std::size_t cols = nb * out_plane;
  for (std::size_t c = 0; c < d.c; ++c) {
    for (std::size_t a = 0; a < d.kh; ++a) {
      for (std::size_t b = 0; b < d.kw; ++b) {
        Real* row = col + ((c * d.kh + a) * d.kw + b) * cols;
        for (std::size_t n = 0; n < nb; ++n) {
          const Real* xin = x + ((n0 + n) * d.c + c) * in_plane;
          for (std::size_t i = 0; i < d.oh; ++i) {
            std::copy_n(xin + (i + a) * d.w + b, d.ow, row + n * out_plane + i * d.ow);
          }
        }
      }
    }
  }
}

// acc[o][p] for OB output channels: bias first, then the taps in (c, a, b)
// order, one product at a time, so every output matches a naive loop.
template <std::size_t OB>
void conv_block(const Real* kern, const Real* bias, const Real* col, std::size_t ksize, std::size_t cols, Real* acc) {
  constexpr std::size_t kP = 32;
  std::size_t p0 = 0;
  for (; p0 + kP <= cols; p0 += kP) {
    Real r[OB][kP];
    for (std::size_t o = 0; o < OB; ++o) {
      for (std::size_t p = 0; p < kP; ++p) r[o][p] = bias[o];
    }
    for (std::size_t q = 0; q < ksize; ++q) {
      const Real* row = col + q * cols + p0;
      for (std::size_t o = 0; o < OB; ++o) {
        const Real kv = kern[o * ksize + q];
        for (std::size_t p = 0; p < kP; ++p) r[o][p] += row[p] * kv;
      }
    }
    for (std::size_t o = 0; o < OB; ++o) std::copy_n(r[o], kP, acc + o * cols + p0);
  }
  for (; p0 < cols; ++p0) {
    for (std::size_t o = 0; o < OB; ++o) {
      Real r = bias[o];
      for (std::size_t q = 0; q < ksize; ++q) r += col[q * cols + p0] * kern[o * ksize + q];
      acc[o * cols + p0] = r;
    }
  }
}

// dk[o][q] += sum_p g[o][p] * col[q][p] for OB output channels.
template <std::size_t OB>
void kernel_grad_block(const Real* g, const Real* col, std::size_t ksize, std::size_t cols, Real* dk) {
  constexpr std::size_t kLanes = 16;
  for (std::size_t q = 0; q < ksize; ++q) {
    const Real* row = col + q * cols;
    Real lane[OB][kLanes] = {};
    std::size_t p = 0;
    for (; p + kLanes <= cols; p += kLanes) {
      for (std::size_t o = 0; o < OB; ++o) {
        for (std::size_t l = 0; l < kLanes; ++l) lane[o][l] += g[o * cols + p + l] * row[p + l];
      }
    }
    for (std::size_t o = 0; o < OB; ++o) {
      Real acc = 0;
      for (std::size_t pp = p; pp < cols; ++pp) acc += g[o * cols + pp] * row[pp];
      for (Real v : lane[o]) acc += v;
      dk[o * ksize + q] += acc;
    }
  }
}

// Calls f.template operator()<OB>(o) over output channels in blocks of 8, 4,
// 2 and 1.
template <class F>
void for_output_blocks(std::size_t outputs, F&& f) {
  std::size_t o = 0;
  for (; o + 8 <= outputs; o += 8) f.template operator()<8>(o);
  for (; o + 4 <= outputs; o += 4) f.template operator()<4>(o);
  for (; o + 2 <= outputs; o += 2) f.template operator()<2>(o);
  for (; o < outputs; ++o) f.template operator()<1>(o);
}

// Sum with 16 independent lanes so the loop vectorises without reassociation
// flags.
Real dot(const Real* x, const Real* y, std::size_t len) {
  constexpr std::size_t kLanes = 16;
  Real lane[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= len; i += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) lane[l] += x[i + l] * y[i + l];
  }
  Real acc = 0;
  for (; i < len; ++i) acc += x[i] * y[i];
  for (Real v : lane) acc += v;
  return acc;
}

}  // namespace

Var conv2d_valid(Var input, Var kernels, Var bias) {
  const Tensor& x = input.value();
  const Tensor& k = kernels.value();
  const Tensor& b = bias.value();
  const ConvDims d = conv_dims(x, k, b);

  Shape out_shape = x.rank() == 4 ? Shape{d.n, d.o, d.oh, d.ow} : Shape{d.o, d.oh, d.ow};
  Tensor out(out_shape);
  const std::size_t out_plane = d.oh * d.ow;
  const std::size_t ksize = d.c * d.kh * d.kw;
  const std::size_t per_tile = samples_per_tile(d);
  std::vector<Real> col(ksize * per_tile * out_plane);
  std::vector<Real> acc(d.o * per_tile * out_plane);

  for (std::size_t n0 = 0; n0 < d.n; n0 += per_tile) {
    const std::size_t nb = std::min(per_tile, d.n - n0);
    const std::size_t cols = nb * out_plane;
    im2col(x.data(), d, n0, nb, col.data());
    for_output_blocks(d.o, [&]<std::size_t OB>(std::size_t o) {
      conv_block<OB>(k.data() + o * ksize, b.data() + o, col.data(), ksize, cols, acc.data() + o * cols);
    });
    for (std::size_t oo = 0; oo < d.o; ++oo) {
      for (std::size_t n = 0; n < nb; ++n) {
        std::copy_n(acc.data() + oo * cols + n * out_plane, out_plane, out.data() + ((n0 + n) * d.o + oo) * out_plane);
      }
    }
  }

  return input.graph().record(
      std::move(out), {input, kernels, bias},
      [d, out_plane, ksize, per_tile](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        const Tensor& x = ctx.input(0);
        const Tensor& k = ctx.input(1);
        const bool want_x = ctx.needs_grad(0);
        const bool want_k = ctx.needs_grad(1);
        if (ctx.needs_grad(2)) {
          Tensor& db = ctx.input_grad(2);
          for (std::size_t n = 0; n < d.n; ++n) {
            for (std::size_t o = 0; o < d.o; ++o) {
              const Real* gy = g.data() + (n * d.o + o) * out_plane;
              Real acc = 0;
              for (std::size_t i = 0; i < out_plane; ++i) acc += gy[i];
              db[o] += acc;
            }
          }
        }
        if (!want_x && !want_k) return;

        std::vector<Real> col(ksize * per_tile * out_plane);
        std::vector<Real> gt(d.o * per_tile * out_plane);
        std::vector<Real> dcol;
        std::vector<Real> kt;
        const Real zero_bias[8] = {};
        if (want_x) {
          dcol.resize(col.size());
          kt.resize(k.size());
          for (std::size_t o = 0; o < d.o; ++o) {
            for (std::size_t q = 0; q < ksize; ++q) kt[q * d.o + o] = k[o * ksize + q];
          }
        }
        const std::size_t in_plane = d.h * d.w;
        for (std::size_t n0 = 0; n0 < d.n; n0 += per_tile) {
          const std::size_t nb = std::min(per_tile, d.n - n0);
          const std::size_t cols = nb * out_plane;
          for (std::size_t o = 0; o < d.o; ++o) {
            for (std::size_t n = 0; n < nb; ++n) {
              std::copy_n(g.data() + ((n0 + n) * d.o + o) * out_plane, out_plane, gt.data() + o * cols + n * out_plane);
            }
          }
          if (want_k) {
            Tensor& dk = ctx.input_grad(1);
            im2col(x.data(), d, n0, nb, col.data());
            for_output_blocks(d.o, [&]<std::size_t OB>(std::size_t o) {
              kernel_grad_block<OB>(gt.data() + o * cols, col.data(), ksize, cols, dk.data() + o * ksize);
            });
          }
          if (want_x) {
            // dcol = K^T g: the forward product with the roles of taps and
            // output channels swapped and a zero bias.
            for_output_blocks(ksize, [&]<std::size_t QB>(std::size_t q) {
              conv_block<QB>(kt.data() + q * d.o, zero_bias, gt.data(), d.o, cols, dcol.data() + q * cols);
            });
            Tensor& dx = ctx.input_grad(0);
            for (std::size_t c = 0; c < d.c; ++c) {
              for (std::size_t a = 0; a < d.kh; ++a) {
                for (std::size_t bb = 0; bb < d.kw; ++bb) {
                  const Real* row = dcol.data() + ((c * d.kh + a) * d.kw + bb) * cols;
                  for (std::size_t n = 0; n < nb; ++n) {
                    Real* dxin = dx.data() + ((n0 + n) * d.c + c) * in_plane;
                    for (std::size_t i = 0; i < d.oh; ++i) {
                      Real* dr = dxin + (i + a) * d.w + bb;
                      const Real* src = row + n * out_plane + i * d.ow;
                      for (std::size_t j = 0; j < d.ow; ++j) dr[j] += src[j];
                    }
                  }
                }
              }
            }
          }
        }
      },
      "conv2d_valid");
}

Var max_pool2(Var input) {
  const Tensor& x = input.value();
  if (x.rank() != 3 && x.rank() != 4) throw DimensionError("max_pool2: input must be rank 3 or 4");
  const std::size_t h = x.dim(x.rank() - 2);
  const std::size_t w = x.dim(x.rank() - 1);
  if (h % 2 != 0 || w % 2 != 0) {
    throw DimensionError("max_pool2: extents must be even, got " + shape_to_string(x.shape()));
  }
  const std::size_t planes = x.size() / (h * w);
  const std::size_t oh = h / 2;
  const std::size_t ow = w / 2;
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = oh;
  out_shape[out_shape.size() - 1] = ow;
  Tensor out(out_shape);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const Real* xp = x.data() + p * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = (2 * i) * w + 2 * j;
        Real best_v = xp[best];
        const std::size_t cand[3] = {(2 * i) * w + 2 * j + 1, (2 * i + 1) * w + 2 * j, (2 * i + 1) * w + 2 * j + 1};
        for (std::size_t c : cand) {
          if (xp[c] > best_v) {
            best_v = xp[c];
            best = c;
          }
        }
        const std::size_t o = (p * oh + i) * ow + j;
        out[o] = best_v;
        argmax[o] = p * h * w + best;
      }
    }
  }
  return input.graph().record(std::move(out), {input},
                              [argmax = std::move(argmax)](BackwardContext& ctx) {
                                const Tensor& g = ctx.grad_output();
                                Tensor& dx = ctx.input_grad(0);
                                for (std::size_t o = 0; o < g.size(); ++o) dx[argmax[o]] += g[o];
                              },
                              "max_pool2");
}

Var affine(Var x, Var weight, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1) {
    throw DimensionError("affine: expected x [N,in], weight [in,out], bias [out]");
  }
  const std::size_t n = xv.dim(0);
  const std::size_t in = xv.dim(1);
  const std::size_t outf = wv.dim(1);
  if (wv.dim(0) != in || bv.dim(0) != outf) {
    throw DimensionError("affine: shape mismatch x " + shape_to_string(xv.shape()) + ", weight " +
                         shape_to_string(wv.shape()) + ", bias " + shape_to_string(bv.shape()));
  }
  Tensor out(Shape{n, outf});
  for (std::size_t r = 0; r < n; ++r) {
    Real* y = out.data() + r * outf;
    std::copy(bv.data(), bv.data() + outf, y);
    const Real* xr = xv.data() + r * in;
    for (std::size_t k = 0; k < in; ++k) {
      const Real xk = xr[k];
      const Real* wr = wv.data() + k * outf;
      for (std::size_t j = 0; j < outf; ++j) y[j] += xk * wr[j];
    }
  }
  return x.graph().record(
      std::move(out), {x, weight, bias},
      [n, in, outf](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        const Tensor& xv = ctx.input(0);
        const Tensor& wv = ctx.input(1);
        if (ctx.needs_grad(0)) {
          Tensor& dx = ctx.input_grad(0);
          for (std::size_t r = 0; r < n; ++r) {
            const Real* gr = g.data() + r * outf;
            for (std::size_t k = 0; k < in; ++k) {
              const Real* wr = wv.data() + k * outf;
              dx[r * in + k] += dot(gr, wr, outf);
            }
          }
        }
        if (ctx.needs_grad(1)) {
          Tensor& dw = ctx.input_grad(1);
          for (std::size_t r = 0; r < n; ++r) {
            const Real* gr = g.data() + r * outf;
            const Real* xr = xv.data() + r * in;
            for (std::size_t k = 0; k < in; ++k) {
              const Real xk = xr[k];
              if (xk == 0) continue;
              Real* dwr = dw.data() + k * outf;
              for (std::size_t j = 0; j < outf; ++j) dwr[j] += xk * gr[j];
            }
          }
        }
        if (ctx.needs_grad(2)) {
          Tensor& db = ctx.input_grad(2);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < outf; ++j) db[j] += g[r * outf + j];
          }
        }
      },
      "affine");
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 2) throw DimensionError("softmax_cross_entropy: logits must be [N,K]");
  const std::size_t n = z.dim(0);
  const std::size_t k = z.dim(1);
  if (labels.size() != n) throw DimensionError("softmax_cross_entropy: label count != batch size");
  Tensor probs = softmax_rows(z);
  double total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= k) throw ContractError("softmax_cross_entropy: label out of range");
    const Real* zr = z.data() + r * k;
    const Real m = *std::max_element(zr, zr + k);
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(zr[j] - m));
    total += std::log(s) - static_cast<double>(zr[y] - m);
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.graph().record(Tensor::scalar(static_cast<Real>(total)), {logits},
                               [probs = std::move(probs), ys = std::move(ys), k](BackwardContext& ctx) {
                                 const Real g = ctx.grad_output()[0];
                                 Tensor& dz = ctx.input_grad(0);
                                 for (std::size_t r = 0; r < ys.size(); ++r) {
                                   for (std::size_t j = 0; j < k; ++j) {
                                     const Real target = static_cast<int>(j) == ys[r] ? Real(1) : Real(0);
                                     dz[r * k + j] += g * (probs[r * k + j] - target);
                                   }
                                 }
                               },
                               "softmax_cross_entropy");
}

Var lrt_sample(Var gamma, Var delta, const Tensor& eps) {
  const Tensor& gv = gamma.value();
  const Tensor& dv = delta.value();
  require_same_shape(gv, dv, "lrt_sample");
  require_same_shape(gv, eps, "lrt_sample");
  Tensor out(gv.shape());
  for (std::size_t i = 0; i < gv.size(); ++i) {
    if (!(dv[i] > 0)) throw NumericError("lrt_sample: delta must be positive");
    out[i] = gv[i] + std::sqrt(dv[i]) * eps[i];
  }
  return gamma.graph().record(std::move(out), {gamma, delta},
                              [eps](BackwardContext& ctx) {
                                const Tensor& g = ctx.grad_output();
                                if (ctx.needs_grad(0)) {
                                  Tensor& d = ctx.input_grad(0);
                                  for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                                }
                                if (ctx.needs_grad(1)) {
                                  const Tensor& dv = ctx.input(1);
                                  Tensor& d = ctx.input_grad(1);
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    d[i] += g[i] * eps[i] / (Real(2) * std::sqrt(dv[i]));
                                  }
                                }
                              },
                              "lrt_sample");
}

Var clamp_zero(Var x, std::span<const std::size_t> positions) {
  Tensor out = x.value();
  for (std::size_t p : positions) {
    if (p >= out.size()) throw ContractError("clamp_zero: position out of range");
    out[p] = 0;
  }
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  return x.graph().record(std::move(out), {x},
                          [pos = std::move(pos)](BackwardContext& ctx) {
                            Tensor g = ctx.grad_output();
                            for (std::size_t p : pos) g[p] = 0;
                            Tensor& d = ctx.input_grad(0);
                            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                          },
                          "clamp_zero");
}

Var gather(Var x, std::span<const std::size_t> positions) {
  if (positions.empty()) throw ContractError("gather: positions must be nonempty");
  const Tensor& xv = x.value();
  Tensor out(Shape{positions.size()});
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] >= xv.size()) throw ContractError("gather: position out of range");
    out[i] = xv[positions[i]];
  }
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  return x.graph().record(std::move(out), {x},
                          [pos = std::move(pos)](BackwardContext& ctx) {
                            const Tensor& g = ctx.grad_output();
                            Tensor& d = ctx.input_grad(0);
                            for (std::size_t i = 0; i < pos.size(); ++i) d[pos[i]] += g[i];
                          },
                          "gather");
}

Var gaussian_logpdf_at_zero(Var gamma, Var delta, Real delta_floor) {
  const Tensor& gv = gamma.value();
  const Tensor& dv = delta.value();
  require_same_shape(gv, dv, "gaussian_logpdf_at_zero");
  constexpr Real two_pi = Real(2) * std::numbers::pi_v<Real>;
  Tensor out(gv.shape());
  for (std::size_t i = 0; i < gv.size(); ++i) {
    const Real d = std::max(dv[i], delta_floor);
    out[i] = Real(-0.5) * std::log(two_pi * d) - gv[i] * gv[i] / (Real(2) * d);
  }
  return gamma.graph().record(std::move(out), {gamma, delta},
                              [delta_floor](BackwardContext& ctx) {
                                const Tensor& g = ctx.grad_output();
                                const Tensor& gv = ctx.input(0);
                                const Tensor& dv = ctx.input(1);
                                if (ctx.needs_grad(0)) {
                                  Tensor& d = ctx.input_grad(0);
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    d[i] -= g[i] * gv[i] / std::max(dv[i], delta_floor);
                                  }
                                }
                                if (ctx.needs_grad(1)) {
                                  Tensor& d = ctx.input_grad(1);
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    if (dv[i] < delta_floor) continue;
                                    const Real dd = dv[i];
                                    d[i] += g[i] * (Real(-0.5) / dd + gv[i] * gv[i] / (Real(2) * dd * dd));
                                  }
                                }
                              },
                              "gaussian_logpdf_at_zero");
}

Var kl_to_prior(Var mu, Var raw_sigma, Real prior_std) {
  if (!(prior_std > 0)) throw ContractError("kl_to_prior: prior std must be positive");
  const Tensor& m = mu.value();
  const Tensor& r = raw_sigma.value();
  require_same_shape(m, r, "kl_to_prior");
  const double s2 = static_cast<double>(prior_std) * prior_std;
  const double log_s = std::log(static_cast<double>(prior_std));
  double total = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double sigma = softplus(r[i]);
    const double mui = m[i];
    total += log_s - std::log(sigma) + (sigma * sigma + mui * mui) / (2 * s2) - 0.5;
  }
  if (!std::isfinite(total)) throw NumericError("kl_to_prior: non-finite divergence");
  return mu.graph().record(Tensor::scalar(static_cast<Real>(total)), {mu, raw_sigma},
                           [s2](BackwardContext& ctx) {
                             const Real g = ctx.grad_output()[0];
                             const Tensor& m = ctx.input(0);
                             const Tensor& r = ctx.input(1);
                             const Real inv_s2 = static_cast<Real>(1 / s2);
                             if (ctx.needs_grad(0)) {
                               Tensor& d = ctx.input_grad(0);
                               for (std::size_t i = 0; i < m.size(); ++i) d[i] += g * m[i] * inv_s2;
                             }
                             if (ctx.needs_grad(1)) {
                               Tensor& d = ctx.input_grad(1);
                               for (std::size_t i = 0; i < r.size(); ++i) {
                                 const Real sigma = softplus(r[i]);
                                 d[i] += g * (sigma * inv_s2 - Real(1) / sigma) * sigmoid(r[i]);
                               }
                             }
                           },
                           "kl_to_prior");
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax_rows: expected [N,K]");
  const std::size_t n = logits.dim(0);
  const std::size_t k = logits.dim(1);
  Tensor out(logits.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const Real* z = logits.data() + r * k;
    Real* p = out.data() + r * k;
    const Real m = *std::max_element(z, z + k);
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(z[j] - m));
    for (std::size_t j = 0; j < k; ++j) p[j] = static_cast<Real>(std::exp(static_cast<double>(z[j] - m)) / s);
  }
  return out;
}

ATTUNE_NAMESPACE_END
