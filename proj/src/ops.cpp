#include "card/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "card/error.hpp"

namespace card::ops {

namespace {

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// Visits every element of `shape` in row-major order, handing out the flat
// output index and the offsets of two operands addressed through their own
// strides (0 on broadcast axes).
template <class F>
void walk2(const Shape& shape, const std::vector<std::size_t>& sa,
           const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = numel(shape);
  if (n == 0) return;
  const std::size_t r = shape.size();
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  const std::size_t inner = shape[r - 1];
  const std::size_t sai = sa[r - 1];
  const std::size_t sbi = sb[r - 1];
  for (std::size_t o = 0; o < n; o += inner) {
    for (std::size_t k = 0; k < inner; ++k) f(o + k, ia + k * sai, ib + k * sbi);
    for (std::size_t ax = r - 1; ax-- > 0;) {
      ++idx[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < shape[ax]) break;
      ia -= sa[ax] * shape[ax];
      ib -= sb[ax] * shape[ax];
      idx[ax] = 0;
    }
  }
}

// Strides of `in` when indexed by positions of the (broadcast) shape `out`.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  const auto in_strides = contiguous_strides(in);
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    strides[offset + i] = in[i] == 1 ? 0 : in_strides[i];
  }
  return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> sa;
  std::vector<std::size_t> sb;
};

BroadcastPlan plan_for(const Shape& a, const Shape& b) {
  BroadcastPlan p;
  p.out = broadcast_shape(a, b);
  p.sa = broadcast_strides(a, p.out);
  p.sb = broadcast_strides(b, p.out);
  return p;
}

template <class F, class GA, class GB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, F f, GA ga, GB gb) {
  BroadcastPlan plan = plan_for(a.shape(), b.shape());
  std::vector<double> out(numel(plan.out));
  const auto A = a.data();
  const auto B = b.data();
  walk2(plan.out, plan.sa, plan.sb,
        [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = f(A[i], B[j]); });
  Shape shape = plan.out;
  return make_op(name, std::move(shape), std::move(out), {a, b},
                 [plan = std::move(plan), ga, gb](Node& self) {
                   Node& pa = *self.parents[0];
                   Node& pb = *self.parents[1];
                   const auto& g = self.grad;
                   if (pa.requires_grad) {
                     auto& da = pa.grad_buffer();
                     walk2(plan.out, plan.sa, plan.sb,
                           [&](std::size_t o, std::size_t i, std::size_t j) {
                             da[i] += ga(pa.data[i], pb.data[j], self.data[o], g[o]);
                           });
                   }
                   if (pb.requires_grad) {
                     auto& db = pb.grad_buffer();
                     walk2(plan.out, plan.sa, plan.sb,
                           [&](std::size_t o, std::size_t i, std::size_t j) {
                             db[j] += gb(pa.data[i], pb.data[j], self.data[o], g[o]);
                           });
                   }
                 });
}

// df(x, y, g) returns the input adjoint given input x, output y, upstream g.
template <class F, class DF>
Tensor unary(const char* name, const Tensor& x, F f, DF df) {
  const auto X = x.data();
  std::vector<double> out(X.size());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = f(X[i]);
  return make_op(name, x.shape(), std::move(out), {x}, [df](Node& self) {
    Node& p = *self.parents[0];
    auto& dx = p.grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += df(p.data[i], self.data[i], self.grad[i]);
  });
}

Tensor reduce(const char* name, const Tensor& x, std::vector<std::size_t> axes,
              bool keepdims, bool average) {
  const Shape& in = x.shape();
  std::vector<bool> reduced(in.size(), false);
  for (auto a : axes) {
    if (a >= in.size()) {
      throw ShapeError(std::string(name) + ": axis " + std::to_string(a) +
                       " out of range for " + shape_string(in));
    }
    reduced[a] = true;
  }
  Shape kept;
  Shape out_shape;
  for (std::size_t i = 0; i < in.size(); ++i) {
    kept.push_back(reduced[i] ? 1 : in[i]);
    if (!reduced[i]) out_shape.push_back(in[i]);
    else if (keepdims) out_shape.push_back(1);
  }
  std::size_t count = 1;
  for (std::size_t i = 0; i < in.size(); ++i)
    if (reduced[i]) count *= in[i];
  const double scale = average ? 1.0 / static_cast<double>(count) : 1.0;

  const auto in_strides = contiguous_strides(in);
  auto out_strides = broadcast_strides(kept, in);
  for (std::size_t i = 0; i < in.size(); ++i)
    if (reduced[i]) out_strides[i] = 0;

  std::vector<double> out(numel(kept), 0.0);
  const auto X = x.data();
  walk2(in, in_strides, out_strides,
        [&](std::size_t, std::size_t i, std::size_t o) { out[o] += X[i]; });
  if (average)
    for (auto& v : out) v *= scale;

  return make_op(name, std::move(out_shape), std::move(out), {x},
                 [in, in_strides, out_strides, scale](Node& self) {
                   auto& dx = self.parents[0]->grad_buffer();
                   const auto& g = self.grad;
                   walk2(in, in_strides, out_strides,
                         [&](std::size_t, std::size_t i, std::size_t o) { dx[i] += g[o] * scale; });
                 });
}

void require_finite(std::span<const double> v, const char* where) {
  for (double d : v) {
    if (!std::isfinite(d)) throw NumericError(std::string(where) + ": non-finite input");
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis, const char* where) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(where) + ": axis " + std::to_string(axis) +
                     " out of range for " + shape_string(s));
  }
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

// Rank-3 inputs are treated as a batch of one.
struct Nhwc {
  std::size_t n, h, w, c;
  bool batched;
};

Nhwc as_nhwc(const Tensor& x, const char* where) {
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2), false};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), true};
  throw ShapeError(std::string(where) + ": expected HxWxC or NxHxWxC, got " +
                   shape_string(x.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double, double g) { return g; },
      [](double, double, double, double g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double, double g) { return g; },
      [](double, double, double, double g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double, double g) { return g * y; },
      [](double x, double, double, double g) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double, double g) { return g / y; },
      [](double x, double y, double, double g) { return -g * x / (y * y); });
}

Tensor neg(const Tensor& x) {
  return unary(
      "neg", x, [](double v) { return -v; }, [](double, double, double g) { return -g; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(
      "add_scalar", x, [s](double v) { return v + s; },
      [](double, double, double g) { return g; });
}

Tensor mul_scalar(const Tensor& x, double s) {
  return unary(
      "mul_scalar", x, [s](double v) { return v * s; },
      [s](double, double, double g) { return g * s; });
}

Tensor pow_scalar(const Tensor& x, double p) {
  return unary(
      "pow_scalar", x, [p](double v) { return std::pow(v, p); },
      [p](double v, double, double g) { return g * p * std::pow(v, p - 1.0); });
}

Tensor square(const Tensor& x) {
  return unary(
      "square", x, [](double v) { return v * v; },
      [](double v, double, double g) { return 2.0 * v * g; });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); },
      [](double, double y, double g) { return g * y; });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](double v) { return std::log(v); },
      [](double v, double, double g) { return g / v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      "abs", x, [](double v) { return std::abs(v); },
      [](double v, double, double g) { return v > 0 ? g : (v < 0 ? -g : 0.0); });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double, double g) { return v > 0 ? g : 0.0; });
}

Tensor hinge(const Tensor& x, double threshold) {
  return unary(
      "hinge", x, [threshold](double v) { return v > threshold ? v - threshold : 0.0; },
      [threshold](double v, double, double g) { return v > threshold ? g : 0.0; });
}

Tensor sum(const Tensor& x, std::vector<std::size_t> axes, bool keepdims) {
  return reduce("sum", x, std::move(axes), keepdims, false);
}

Tensor mean(const Tensor& x, std::vector<std::size_t> axes, bool keepdims) {
  return reduce("mean", x, std::move(axes), keepdims, true);
}

Tensor sum_all(const Tensor& x) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return reduce("sum", x, std::move(axes), false, false);
}

Tensor mean_all(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean_all of empty tensor");
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return reduce("mean", x, std::move(axes), false, true);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_op("reshape", std::move(shape), std::move(out), {x}, [](Node& self) {
    auto& dx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, std::vector<std::size_t> perm) {
  const Shape& in = x.shape();
  if (perm.size() != in.size()) {
    throw ShapeError("permute rank mismatch for " + shape_string(in));
  }
  std::vector<bool> used(in.size(), false);
  for (auto p : perm) {
    if (p >= in.size() || used[p]) throw ShapeError("permute: invalid permutation");
    used[p] = true;
  }
  const auto in_strides = contiguous_strides(in);
  Shape out_shape(in.size());
  std::vector<std::size_t> src_strides(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    out_shape[i] = in[perm[i]];
    src_strides[i] = in_strides[perm[i]];
  }
  const auto out_strides = contiguous_strides(out_shape);
  std::vector<double> out(x.size());
  const auto X = x.data();
  walk2(out_shape, out_strides, src_strides,
        [&](std::size_t o, std::size_t, std::size_t i) { out[o] = X[i]; });
  return make_op("permute", out_shape, std::move(out), {x},
                 [out_shape, out_strides, src_strides](Node& self) {
                   auto& dx = self.parents[0]->grad_buffer();
                   walk2(out_shape, out_strides, src_strides,
                         [&](std::size_t o, std::size_t, std::size_t i) { dx[i] += self.grad[o]; });
                 });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose expects a matrix, got " + shape_string(x.shape()));
  return permute(x, {1, 0});
}

Tensor broadcast_to(const Tensor& x, Shape shape) {
  if (broadcast_shape(x.shape(), shape) != shape) {
    throw ShapeError("cannot broadcast " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  const auto src = broadcast_strides(x.shape(), shape);
  const auto dst = contiguous_strides(shape);
  std::vector<double> out(numel(shape));
  const auto X = x.data();
  walk2(shape, dst, src, [&](std::size_t o, std::size_t, std::size_t i) { out[o] = X[i]; });
  return make_op("broadcast_to", shape, std::move(out), {x}, [shape, dst, src](Node& self) {
    auto& dx = self.parents[0]->grad_buffer();
    walk2(shape, dst, src, [&](std::size_t o, std::size_t, std::size_t i) { dx[i] += self.grad[o]; });
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shape mismatch: " + shape_string(a.shape()) + " . " +
                     shape_string(b.shape()));
  }
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  return reshape(bmm(reshape(a, {1, M, K}), reshape(b, {1, K, N})), {M, N});
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  const bool ok = a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) &&
                  a.dim(2) == (transpose_b ? b.dim(2) : b.dim(1));
  if (!ok) {
    throw ShapeError(std::string("bmm shape mismatch: ") + shape_string(a.shape()) + " . " +
                     shape_string(b.shape()) + (transpose_b ? "^T" : ""));
  }
  const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2);
  const std::size_t N = transpose_b ? b.dim(1) : b.dim(2);
  MacCounter::add(static_cast<std::uint64_t>(B) * M * K * N);
  const double* A = a.data().data();
  const double* Bd = b.data().data();
  std::vector<double> out(B * M * N, 0.0);
  for (std::size_t bi = 0; bi < B; ++bi) {
    const double* ab = A + bi * M * K;
    const double* bb = Bd + bi * K * N;
    double* ob = out.data() + bi * M * N;
    for (std::size_t m = 0; m < M; ++m) {
      double* orow = ob + m * N;
      if (transpose_b) {
        for (std::size_t n = 0; n < N; ++n) {
          double acc = 0.0;
          for (std::size_t k = 0; k < K; ++k) acc += ab[m * K + k] * bb[n * K + k];
          orow[n] = acc;
        }
      } else {
        for (std::size_t k = 0; k < K; ++k) {
          const double av = ab[m * K + k];
          const double* brow = bb + k * N;
          for (std::size_t n = 0; n < N; ++n) orow[n] += av * brow[n];
        }
      }
    }
  }
  return make_op("bmm", {B, M, N}, std::move(out), {a, b},
                 [B, M, K, N, transpose_b](Node& self) {
                   Node& pa = *self.parents[0];
                   Node& pb = *self.parents[1];
                   const double* g = self.grad.data();
                   const double* A = pa.data.data();
                   const double* Bd = pb.data.data();
                   double* da = pa.requires_grad ? pa.grad_buffer().data() : nullptr;
                   double* db = pb.requires_grad ? pb.grad_buffer().data() : nullptr;
                   for (std::size_t bi = 0; bi < B; ++bi) {
                     const double* gb = g + bi * M * N;
                     const double* ab = A + bi * M * K;
                     const double* bb = Bd + bi * K * N;
                     for (std::size_t m = 0; m < M; ++m) {
                       for (std::size_t n = 0; n < N; ++n) {
                         const double gv = gb[m * N + n];
                         if (gv == 0.0) continue;
                         for (std::size_t k = 0; k < K; ++k) {
                           const std::size_t bidx = transpose_b ? n * K + k : k * N + n;
                           if (da) da[bi * M * K + m * K + k] += gv * bb[bidx];
                           if (db) db[bi * K * N + bidx] += gv * ab[m * K + k];
                         }
                       }
                     }
                   }
                 });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis, "softmax");
  const auto X = x.data();
  for (double v : X) {
    if (std::isnan(v)) throw NumericError("softmax: NaN input");
  }
  std::vector<double> out(X.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.len; ++k) mx = std::max(mx, X[base + k * s.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) {
        const double e = std::exp(X[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] /= total;
    }
  }
  return make_op("softmax", x.shape(), std::move(out), {x}, [s](Node& self) {
    auto& dx = self.parents[0]->grad_buffer();
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t i = base + k * s.inner;
          dot += g[i] * y[i];
        }
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t i = base + k * s.inner;
          dx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis, "log_softmax");
  const auto X = x.data();
  require_finite(X, "log_softmax");
  std::vector<double> out(X.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.len; ++k) mx = std::max(mx, X[base + k * s.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) total += std::exp(X[base + k * s.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] = X[base + k * s.inner] - lse;
    }
  }
  return make_op("log_softmax", x.shape(), std::move(out), {x}, [s](Node& self) {
    auto& dx = self.parents[0]->grad_buffer();
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double gsum = 0.0;
        for (std::size_t k = 0; k < s.len; ++k) gsum += g[base + k * s.inner];
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t i = base + k * s.inner;
          dx[i] += g[i] - std::exp(y[i]) * gsum;
        }
      }
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dOptions opt) {
  const Nhwc d = as_nhwc(x, "conv2d");
  if (w.rank() != 4 || w.dim(0) != w.dim(1) || w.dim(0) % 2 == 0) {
    throw ShapeError("conv2d: weight must be k x k x Cin/g x Cout with odd k, got " +
                     shape_string(w.shape()));
  }
  if (opt.groups == 0 || d.c % opt.groups != 0 || w.dim(3) % opt.groups != 0) {
    throw ShapeError("conv2d: invalid group count " + std::to_string(opt.groups) + " for Cin=" +
                     std::to_string(d.c) + ", Cout=" + std::to_string(w.dim(3)));
  }
  if (w.dim(2) != d.c / opt.groups) {
    throw ShapeError("conv2d: weight " + shape_string(w.shape()) + " does not match input " +
                     shape_string(x.shape()) + " with groups=" + std::to_string(opt.groups));
  }
  if (opt.stride == 0 || opt.dilation == 0) throw ShapeError("conv2d: stride/dilation must be >= 1");

  struct Geometry {
    std::size_t n, h, w, cin, k, cout, oh, ow, stride, dil, groups, cig, cog;
    long pad_t, pad_l;
  } G{};
  G.n = d.n;
  G.h = d.h;
  G.w = d.w;
  G.cin = d.c;
  G.k = w.dim(0);
  G.cout = w.dim(3);
  G.stride = opt.stride;
  G.dil = opt.dilation;
  G.groups = opt.groups;
  G.cig = d.c / opt.groups;
  G.cog = G.cout / opt.groups;
  G.oh = (G.h + G.stride - 1) / G.stride;
  G.ow = (G.w + G.stride - 1) / G.stride;
  const long eff = static_cast<long>((G.k - 1) * G.dil + 1);
  const long pad_h = std::max<long>(static_cast<long>((G.oh - 1) * G.stride) + eff - static_cast<long>(G.h), 0);
  const long pad_w = std::max<long>(static_cast<long>((G.ow - 1) * G.stride) + eff - static_cast<long>(G.w), 0);
  G.pad_t = pad_h / 2;
  G.pad_l = pad_w / 2;

  // Calls f(x_offset, w_row_offset, out_offset) for every in-bounds tap; the
  // weight row spans the group's output channels.
  auto for_each_tap = [](const Geometry& g, auto&& f) {
    for (std::size_t n = 0; n < g.n; ++n) {
      for (std::size_t oy = 0; oy < g.oh; ++oy) {
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
          const std::size_t obase = ((n * g.oh + oy) * g.ow + ox) * g.cout;
          for (std::size_t ky = 0; ky < g.k; ++ky) {
            const long iy = static_cast<long>(oy * g.stride) - g.pad_t + static_cast<long>(ky * g.dil);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            for (std::size_t kx = 0; kx < g.k; ++kx) {
              const long ix = static_cast<long>(ox * g.stride) - g.pad_l + static_cast<long>(kx * g.dil);
              if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
              const std::size_t xbase = ((n * g.h + static_cast<std::size_t>(iy)) * g.w +
                                         static_cast<std::size_t>(ix)) * g.cin;
              const std::size_t wbase = (ky * g.k + kx) * g.cig * g.cout;
              for (std::size_t gr = 0; gr < g.groups; ++gr) {
                for (std::size_t ci = 0; ci < g.cig; ++ci) {
                  f(xbase + gr * g.cig + ci, wbase + ci * g.cout + gr * g.cog, obase + gr * g.cog);
                }
              }
            }
          }
        }
      }
    }
  };

  const double* X = x.data().data();
  const double* W = w.data().data();
  std::vector<double> out(G.n * G.oh * G.ow * G.cout, 0.0);
  double* O = out.data();
  const std::size_t cog = G.cog;
  for_each_tap(G, [&](std::size_t xi, std::size_t wi, std::size_t oi) {
    const double xv = X[xi];
    if (xv == 0.0) return;
    const double* wr = W + wi;
    double* orow = O + oi;
    for (std::size_t co = 0; co < cog; ++co) orow[co] += xv * wr[co];
  });

  Shape shape = d.batched ? Shape{G.n, G.oh, G.ow, G.cout} : Shape{G.oh, G.ow, G.cout};
  return make_op("conv2d", std::move(shape), std::move(out), {x, w},
                 [G, for_each_tap](Node& self) {
                   Node& px = *self.parents[0];
                   Node& pw = *self.parents[1];
                   const double* g = self.grad.data();
                   const double* X = px.data.data();
                   const double* W = pw.data.data();
                   double* dx = px.requires_grad ? px.grad_buffer().data() : nullptr;
                   double* dw = pw.requires_grad ? pw.grad_buffer().data() : nullptr;
                   const std::size_t cog = G.cog;
                   for_each_tap(G, [&](std::size_t xi, std::size_t wi, std::size_t oi) {
                     const double* grow = g + oi;
                     if (dx) {
                       const double* wr = W + wi;
                       double acc = 0.0;
                       for (std::size_t co = 0; co < cog; ++co) acc += grow[co] * wr[co];
                       dx[xi] += acc;
                     }
                     if (dw) {
                       const double xv = X[xi];
                       double* dwr = dw + wi;
                       for (std::size_t co = 0; co < cog; ++co) dwr[co] += xv * grow[co];
                     }
                   });
                 });
}

namespace {

struct Taps {
  std::vector<std::size_t> i0, i1;
  std::vector<double> w0, w1;
};

Taps interpolation_taps(std::size_t in, std::size_t out) {
  Taps t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.w0.resize(out);
  t.w1.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::size_t>(std::floor(src));
    double frac = src - static_cast<double>(lo);
    if (lo >= in - 1) {
      lo = in - 1;
      frac = 0.0;
    }
    t.i0[o] = lo;
    t.i1[o] = std::min(lo + 1, in - 1);
    t.w0[o] = 1.0 - frac;
    t.w1[o] = frac;
  }
  return t;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  const Nhwc d = as_nhwc(x, "bilinear_resize");
  if (out_h == 0 || out_w == 0) {
    throw ShapeError("bilinear_resize: zero target extent " + std::to_string(out_h) + "x" +
                     std::to_string(out_w));
  }
  if (d.h == 0 || d.w == 0) throw ShapeError("bilinear_resize: empty input");
  const Taps ty = interpolation_taps(d.h, out_h);
  const Taps tx = interpolation_taps(d.w, out_w);
  const double* X = x.data().data();
  std::vector<double> out(d.n * out_h * out_w * d.c);
  auto at = [&](std::size_t n, std::size_t yy, std::size_t xx) { return ((n * d.h + yy) * d.w + xx) * d.c; };
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const double* p00 = X + at(n, ty.i0[oy], tx.i0[ox]);
        const double* p01 = X + at(n, ty.i0[oy], tx.i1[ox]);
        const double* p10 = X + at(n, ty.i1[oy], tx.i0[ox]);
        const double* p11 = X + at(n, ty.i1[oy], tx.i1[ox]);
        double* o = out.data() + ((n * out_h + oy) * out_w + ox) * d.c;
        const double wy0 = ty.w0[oy], wy1 = ty.w1[oy], wx0 = tx.w0[ox], wx1 = tx.w1[ox];
        for (std::size_t c = 0; c < d.c; ++c) {
          o[c] = wy0 * (wx0 * p00[c] + wx1 * p01[c]) + wy1 * (wx0 * p10[c] + wx1 * p11[c]);
        }
      }
    }
  }
  Shape shape = d.batched ? Shape{d.n, out_h, out_w, d.c} : Shape{out_h, out_w, d.c};
  return make_op("bilinear_resize", std::move(shape), std::move(out), {x},
                 [d, ty, tx, out_h, out_w](Node& self) {
                   auto& dx = self.parents[0]->grad_buffer();
                   const double* g = self.grad.data();
                   auto at = [&](std::size_t n, std::size_t yy, std::size_t xx) {
                     return ((n * d.h + yy) * d.w + xx) * d.c;
                   };
                   for (std::size_t n = 0; n < d.n; ++n) {
                     for (std::size_t oy = 0; oy < out_h; ++oy) {
                       for (std::size_t ox = 0; ox < out_w; ++ox) {
                         const double* gr = g + ((n * out_h + oy) * out_w + ox) * d.c;
                         const double w00 = ty.w0[oy] * tx.w0[ox], w01 = ty.w0[oy] * tx.w1[ox];
                         const double w10 = ty.w1[oy] * tx.w0[ox], w11 = ty.w1[oy] * tx.w1[ox];
                         double* d00 = dx.data() + at(n, ty.i0[oy], tx.i0[ox]);
                         double* d01 = dx.data() + at(n, ty.i0[oy], tx.i1[ox]);
                         double* d10 = dx.data() + at(n, ty.i1[oy], tx.i0[ox]);
                         double* d11 = dx.data() + at(n, ty.i1[oy], tx.i1[ox]);
                         for (std::size_t c = 0; c < d.c; ++c) {
                           d00[c] += w00 * gr[c];
                           d01[c] += w01 * gr[c];
                           d10[c] += w10 * gr[c];
                           d11[c] += w11 * gr[c];
                         }
                       }
                     }
                   }
                 });
}

Tensor stop_gradient(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_op("stop_gradient", x.shape(), std::move(out), {}, nullptr);
}

Tensor concat(std::span<const Tensor> xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat of nothing");
  const Shape& first = xs[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& t : xs) {
    bool ok = t.rank() == first.size();
    for (std::size_t i = 0; ok && i < first.size(); ++i)
      if (i != axis && t.dim(i) != first[i]) ok = false;
    if (!ok) {
      throw ShapeError("concat: incompatible shapes " + shape_string(first) + " and " +
                       shape_string(t.shape()));
    }
    out_shape[axis] += t.dim(axis);
  }
  const AxisSplit s = split_at(out_shape, axis, "concat");
  std::vector<std::size_t> chunk;
  for (const auto& t : xs) chunk.push_back(t.dim(axis) * s.inner);
  const std::size_t row = s.len * s.inner;
  std::vector<double> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < xs.size(); ++p) {
    const auto X = xs[p].data();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(X.begin() + o * chunk[p], chunk[p], out.begin() + o * row + offset);
    offset += chunk[p];
  }
  std::vector<Tensor> parents(xs.begin(), xs.end());
  return make_op("concat", std::move(out_shape), std::move(out), std::move(parents),
                 [chunk, row, outer = s.outer](Node& self) {
                   std::size_t offset = 0;
                   for (std::size_t p = 0; p < chunk.size(); ++p) {
                     Node& parent = *self.parents[p];
                     if (parent.requires_grad) {
                       auto& dx = parent.grad_buffer();
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t k = 0; k < chunk[p]; ++k)
                           dx[o * chunk[p] + k] += self.grad[o * row + offset + k];
                     }
                     offset += chunk[p];
                   }
                 });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisSplit s = split_at(x.shape(), axis, "slice");
  if (begin > end || end > s.len) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of range for " + shape_string(x.shape()));
  }
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return index_select(x, axis, idx);
}

Tensor index_select(const Tensor& x, std::size_t axis, std::span<const std::size_t> indices) {
  const AxisSplit s = split_at(x.shape(), axis, "index_select");
  for (auto i : indices) {
    if (i >= s.len) throw ShapeError("index_select: index out of range for " + shape_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = indices.size();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const auto X = x.data();
  std::vector<double> out(numel(out_shape));
  const std::size_t m = idx.size();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < m; ++k)
      std::copy_n(X.begin() + (o * s.len + idx[k]) * s.inner, s.inner,
                  out.begin() + (o * m + k) * s.inner);
  return make_op("index_select", std::move(out_shape), std::move(out), {x},
                 [s, idx](Node& self) {
                   auto& dx = self.parents[0]->grad_buffer();
                   const std::size_t m = idx.size();
                   for (std::size_t o = 0; o < s.outer; ++o)
                     for (std::size_t k = 0; k < m; ++k)
                       for (std::size_t i = 0; i < s.inner; ++i)
                         dx[(o * s.len + idx[k]) * s.inner + i] += self.grad[(o * m + k) * s.inner + i];
                 });
}

Tensor global_avg_pool(const Tensor& x) {
  const Nhwc d = as_nhwc(x, "global_avg_pool");
  return d.batched ? mean(x, {1, 2}, true) : mean(x, {0, 1}, true);
}

Tensor one_hot(std::span<const int> labels, std::size_t num_classes, int ignore_value) {
  std::vector<double> out(labels.size() * num_classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int l = labels[i];
    if (l == ignore_value) continue;
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
      throw ShapeError("one_hot: label " + std::to_string(l) + " outside [0, " +
                       std::to_string(num_classes) + ")");
    }
    out[i * num_classes + static_cast<std::size_t>(l)] = 1.0;
  }
  return make_op("one_hot", {labels.size(), num_classes}, std::move(out), {}, nullptr);
}

}  // namespace card::ops
