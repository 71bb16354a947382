#include "tsrm/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "tsrm/error.hpp"

namespace tsrm {

real compensated_sum(std::span<const real> values) {
  double sum = 0.0;
  double comp = 0.0;
  for (real v : values) {
    const double x = v;
    const double t = sum + x;
    if (std::abs(sum) >= std::abs(x)) {
      comp += (sum - t) + x;
    } else {
      comp += (x - t) + sum;
    }
    sum = t;
  }
  return static_cast<real>(sum + comp);
}

}  // namespace tsrm

namespace tsrm::ops {
namespace {

using RowMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

enum class Kind { kAdd, kSub, kMul, kDiv };

// Number of times b repeats inside a; throws if shapes are not broadcastable.
std::size_t broadcast_repeats(const Shape& a, const Shape& b, const char* op) {
  const std::size_t nb = numel(b);
  if (a == b) return 1;
  if (nb == 1) return numel(a);
  if (b.size() <= a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin())) return numel(a) / nb;
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
}

Var binary(const Var& a, const Var& b, Kind kind, const char* name) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  broadcast_repeats(av.shape(), bv.shape(), name);
  const std::size_t n = av.size();
  const std::size_t nb = bv.size();
  Tensor out(av.shape());
  const real* x = av.ptr();
  const real* y = bv.ptr();
  real* o = out.ptr();
  switch (kind) {
    case Kind::kAdd:
      for (std::size_t i = 0; i < n; ++i) o[i] = x[i] + y[i % nb];
      break;
    case Kind::kSub:
      for (std::size_t i = 0; i < n; ++i) o[i] = x[i] - y[i % nb];
      break;
    case Kind::kMul:
      for (std::size_t i = 0; i < n; ++i) o[i] = x[i] * y[i % nb];
      break;
    case Kind::kDiv:
      for (std::size_t j = 0; j < nb; ++j) {
        if (y[j] == 0) throw NumericError("division by exact zero");
      }
      for (std::size_t i = 0; i < n; ++i) o[i] = x[i] / y[i % nb];
      break;
  }
  return a.tape().record(std::move(out), {a, b}, [a, b, kind, n, nb](const Tensor& g, Tape& tape) {
    const real* gp = g.ptr();
    const real* x = a.value().ptr();
    const real* y = b.value().ptr();
    if (Tensor* da = tape.grad_sink(a)) {
      real* d = da->ptr();
      switch (kind) {
        case Kind::kAdd:
        case Kind::kSub:
          for (std::size_t i = 0; i < n; ++i) d[i] += gp[i];
          break;
        case Kind::kMul:
          for (std::size_t i = 0; i < n; ++i) d[i] += gp[i] * y[i % nb];
          break;
        case Kind::kDiv:
          for (std::size_t i = 0; i < n; ++i) d[i] += gp[i] / y[i % nb];
          break;
      }
    }
    if (Tensor* db = tape.grad_sink(b)) {
      real* d = db->ptr();
      switch (kind) {
        case Kind::kAdd:
          for (std::size_t i = 0; i < n; ++i) d[i % nb] += gp[i];
          break;
        case Kind::kSub:
          for (std::size_t i = 0; i < n; ++i) d[i % nb] -= gp[i];
          break;
        case Kind::kMul:
          for (std::size_t i = 0; i < n; ++i) d[i % nb] += gp[i] * x[i];
          break;
        case Kind::kDiv:
          for (std::size_t i = 0; i < n; ++i) {
            const real yi = y[i % nb];
            d[i % nb] -= gp[i] * x[i] / (yi * yi);
          }
          break;
      }
    }
  });
}

template <typename F, typename D>
Var unary(const Var& a, F f, D df) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return a.tape().record(std::move(out), {a}, [a, df](const Tensor& g, Tape& tape) {
    if (Tensor* da = tape.grad_sink(a)) {
      const Tensor& x = a.value();
      for (std::size_t i = 0; i < x.size(); ++i) (*da)[i] += g[i] * df(x[i]);
    }
  });
}

std::size_t prod(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t p = 1;
  for (std::size_t i = from; i < to; ++i) p *= s[i];
  return p;
}

}  // namespace

Var add(const Var& a, const Var& b) { return binary(a, b, Kind::kAdd, "add"); }
Var sub(const Var& a, const Var& b) { return binary(a, b, Kind::kSub, "sub"); }
Var mul(const Var& a, const Var& b) { return binary(a, b, Kind::kMul, "mul"); }
Var div(const Var& a, const Var& b) { return binary(a, b, Kind::kDiv, "div"); }

Var add(const Var& a, real b) {
  return unary(a, [b](real x) { return x + b; }, [](real) { return real(1); });
}

Var mul(const Var& a, real b) {
  return unary(a, [b](real x) { return x * b; }, [b](real) { return b; });
}

Var abs(const Var& a) {
  return unary(
      a, [](real x) { return std::abs(x); },
      [](real x) { return x > 0 ? real(1) : (x < 0 ? real(-1) : real(0)); });
}

Var square(const Var& a) {
  return unary(a, [](real x) { return x * x; }, [](real x) { return 2 * x; });
}

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(as) + " and " + shape_str(bs));
  }
  const bool shared_b = bs.size() == 2 && as.size() > 2;
  if (!shared_b && (as.size() != bs.size() || !std::equal(as.begin(), as.end() - 2, bs.begin()))) {
    throw DimensionError("matmul leading dimensions differ: " + shape_str(as) + " vs " + shape_str(bs));
  }
  const std::size_t ar = as[as.size() - 2], ac = as.back();
  const std::size_t br = bs[bs.size() - 2], bc = bs.back();
  const std::size_t m = ta ? ac : ar, k = ta ? ar : ac;
  const std::size_t kb = tb ? bc : br, n = tb ? br : bc;
  if (k != kb) {
    throw DimensionError("matmul inner dimensions differ: " + shape_str(as) + (ta ? "^T" : "") + " vs " +
                         shape_str(bs) + (tb ? "^T" : ""));
  }
  const std::size_t batch = prod(as, 0, as.size() - 2);
  Shape out_shape(as.begin(), as.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out(out_shape);
  const std::size_t a_stride = ar * ac, b_stride = shared_b ? 0 : br * bc, o_stride = m * n;

  const real* ap = a.value().ptr();
  const real* bp = b.value().ptr();
  if (shared_b && !ta) {
    CMapMat A(ap, batch * ar, ac);
    CMapMat B(bp, br, bc);
    MapMat O(out.ptr(), batch * m, n);
    if (tb) {
      O.noalias() = A * B.transpose();
    } else {
      O.noalias() = A * B;
    }
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      CMapMat A(ap + i * a_stride, ar, ac);
      CMapMat B(bp + i * b_stride, br, bc);
      MapMat O(out.ptr() + i * o_stride, m, n);
      if (ta && tb) {
        O.noalias() = A.transpose() * B.transpose();
      } else if (ta) {
        O.noalias() = A.transpose() * B;
      } else if (tb) {
        O.noalias() = A * B.transpose();
      } else {
        O.noalias() = A * B;
      }
    }
  }

  return a.tape().record(std::move(out), {a, b}, [=](const Tensor& g, Tape& tape) {
    Tensor* da = tape.grad_sink(a);
    Tensor* db = tape.grad_sink(b);
    const real* ap = a.value().ptr();
    const real* bp = b.value().ptr();
    if (shared_b && !ta) {
      CMapMat A(ap, batch * ar, ac);
      CMapMat B(bp, br, bc);
      CMapMat G(g.ptr(), batch * m, n);
      if (da) {
        MapMat dA(da->ptr(), batch * ar, ac);
        if (tb) {
          dA.noalias() += G * B;
        } else {
          dA.noalias() += G * B.transpose();
        }
      }
      if (db) {
        MapMat dB(db->ptr(), br, bc);
        if (tb) {
          dB.noalias() += G.transpose() * A;
        } else {
          dB.noalias() += A.transpose() * G;
        }
      }
      return;
    }
    for (std::size_t i = 0; i < batch; ++i) {
      CMapMat A(ap + i * a_stride, ar, ac);
      CMapMat B(bp + i * b_stride, br, bc);
      CMapMat G(g.ptr() + i * o_stride, m, n);
      if (da) {
        MapMat dA(da->ptr() + i * a_stride, ar, ac);
        if (ta && tb) {
          dA.noalias() += B.transpose() * G.transpose();
        } else if (ta) {
          dA.noalias() += B * G.transpose();
        } else if (tb) {
          dA.noalias() += G * B;
        } else {
          dA.noalias() += G * B.transpose();
        }
      }
      if (db) {
        MapMat dB(db->ptr() + i * b_stride, br, bc);
        if (ta && tb) {
          dB.noalias() += G.transpose() * A.transpose();
        } else if (ta) {
          dB.noalias() += A * G;
        } else if (tb) {
          dB.noalias() += G.transpose() * A;
        } else {
          dB.noalias() += A.transpose() * G;
        }
      }
    }
  });
}

Var linear(const Var& x, const Var& w) {
  if (w.shape().size() != 2 || x.shape().back() != w.shape()[0]) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  return matmul(x, w);
}

Var linear(const Var& x, const Var& w, const Var& bias) {
  Var y = linear(x, w);
  if (bias.shape() != Shape{w.shape()[1]}) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  return add(y, bias);
}

Var sum(const Var& a) {
  Tensor out = Tensor::scalar(compensated_sum(a.value().data()));
  return a.tape().record(std::move(out), {a}, [a](const Tensor& g, Tape& tape) {
    if (Tensor* da = tape.grad_sink(a)) {
      for (auto& v : da->data()) v += g[0];
    }
  });
}

Var mean(const Var& a) {
  const real n = static_cast<real>(a.value().size());
  Tensor out = Tensor::scalar(compensated_sum(a.value().data()) / n);
  return a.tape().record(std::move(out), {a}, [a, n](const Tensor& g, Tape& tape) {
    if (Tensor* da = tape.grad_sink(a)) {
      for (auto& v : da->data()) v += g[0] / n;
    }
  });
}

namespace {

Var reduce_axis(const Var& a, std::size_t axis, bool average) {
  const Shape& s = a.shape();
  if (axis >= s.size()) {
    throw DimensionError("reduction axis " + std::to_string(axis) + " invalid for " + shape_str(s));
  }
  const std::size_t outer = prod(s, 0, axis), n = s[axis], inner = prod(s, axis + 1, s.size());
  Shape os;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) os.push_back(s[i]);
  }
  if (os.empty()) os.push_back(1);
  Tensor out(os);
  const real* x = a.value().ptr();
  const real scale = average ? real(1) / static_cast<real>(n) : real(1);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += x[(o * n + k) * inner + j];
      out[o * inner + j] = static_cast<real>(acc) * scale;
    }
  }
  return a.tape().record(std::move(out), {a}, [=](const Tensor& g, Tape& tape) {
    if (Tensor* da = tape.grad_sink(a)) {
      real* d = da->ptr();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < n; ++k) {
          for (std::size_t j = 0; j < inner; ++j) d[(o * n + k) * inner + j] += g[o * inner + j] * scale;
        }
      }
    }
  });
}

}  // namespace

Var sum(const Var& a, std::size_t axis) { return reduce_axis(a, axis, false); }
Var mean(const Var& a, std::size_t axis) { return reduce_axis(a, axis, true); }

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  if (parts.size() == 1) return parts.front();
  const Shape& s0 = parts.front().shape();
  if (axis >= s0.size()) throw DimensionError("concat axis out of range for " + shape_str(s0));
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
    if (!ok) throw DimensionError("concat shape mismatch: " + shape_str(s0) + " vs " + shape_str(s));
    lens.push_back(s[axis]);
    total += s[axis];
  }
  const std::size_t outer = prod(s0, 0, axis), inner = prod(s0, axis + 1, s0.size());
  Shape os = s0;
  os[axis] = total;
  Tensor out(os);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const real* src = parts[p].value().ptr();
    const std::size_t block = lens[p] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(src + o * block, src + (o + 1) * block, out.ptr() + o * total * inner + offset * inner);
    }
    offset += lens[p];
  }
  return parts.front().tape().record(std::move(out), parts, [=](const Tensor& g, Tape& tape) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const std::size_t block = lens[p] * inner;
      if (Tensor* dp = tape.grad_sink(parts[p])) {
        for (std::size_t o = 0; o < outer; ++o) {
          const real* src = g.ptr() + o * total * inner + off * inner;
          real* dst = dp->ptr() + o * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
      off += lens[p];
    }
  });
}

std::vector<Var> split(const Var& a, const std::vector<std::size_t>& sizes, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw DimensionError("split axis out of range for " + shape_str(s));
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (total != s[axis]) {
    throw DimensionError("split sizes sum to " + std::to_string(total) + " but axis has length " +
                         std::to_string(s[axis]) + " in " + shape_str(s));
  }
  if (sizes.size() == 1) return {a};
  const std::size_t outer = prod(s, 0, axis), inner = prod(s, axis + 1, s.size());
  std::vector<Var> out;
  std::size_t offset = 0;
  for (std::size_t len : sizes) {
    Shape ps = s;
    ps[axis] = len;
    Tensor part(ps);
    const std::size_t block = len * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      const real* src = a.value().ptr() + o * total * inner + offset * inner;
      std::copy(src, src + block, part.ptr() + o * block);
    }
    out.push_back(a.tape().record(std::move(part), {a}, [=](const Tensor& g, Tape& tape) {
      if (Tensor* da = tape.grad_sink(a)) {
        for (std::size_t o = 0; o < outer; ++o) {
          real* dst = da->ptr() + o * total * inner + offset * inner;
          const real* src = g.ptr() + o * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
    }));
    offset += len;
  }
  return out;
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(out), {a}, [a](const Tensor& g, Tape& tape) {
    if (Tensor* da = tape.grad_sink(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
    }
  });
}

namespace {

// For each flat output index, the flat input index it reads from.
std::vector<std::size_t> permute_index(const Shape& in, const std::vector<std::size_t>& perm) {
  const std::size_t r = in.size();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * in[i + 1];
  Shape out(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out[i] = in[perm[i]];
    stride[i] = in_strides[perm[i]];
  }
  std::vector<std::size_t> map(numel(in));
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < map.size(); ++flat) {
    map[flat] = src;
    for (std::size_t ax = r; ax-- > 0;) {
      ++counter[ax];
      src += stride[ax];
      if (counter[ax] < out[ax]) break;
      src -= stride[ax] * out[ax];
      counter[ax] = 0;
    }
  }
  return map;
}

}  // namespace

Var permute(const Var& a, const std::vector<std::size_t>& perm) {
  const Shape& s = a.shape();
  if (perm.size() != s.size()) throw DimensionError("permutation rank mismatch for " + shape_str(s));
  std::vector<bool> seen(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || seen[p]) throw DimensionError("invalid permutation for " + shape_str(s));
    seen[p] = true;
  }
  Shape os(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) os[i] = s[perm[i]];
  auto map = std::make_shared<std::vector<std::size_t>>(permute_index(s, perm));
  Tensor out(os);
  const real* x = a.value().ptr();
  for (std::size_t i = 0; i < map->size(); ++i) out[i] = x[(*map)[i]];
  return a.tape().record(std::move(out), {a}, [a, map](const Tensor& g, Tape& tape) {
    if (Tensor* da = tape.grad_sink(a)) {
      for (std::size_t i = 0; i < map->size(); ++i) (*da)[(*map)[i]] += g[i];
    }
  });
}

Var detach(const Var& a) { return a.tape().constant(a.value()); }

}  // namespace tsrm::ops
