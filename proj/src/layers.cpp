#include "tsrm/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>

#include "tsrm/error.hpp"
#include "tsrm/ops.hpp"

namespace tsrm {
namespace {

using RowMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

std::size_t rows_of(const Shape& s) { return numel(s) / s.back(); }

}  // namespace

void Conv1DSpec::validate() const {
  if (kernel_size == 0 || dilation == 0 || groups == 0 || in_channels == 0 || out_channels == 0) {
    throw ConfigError("conv spec fields must be positive");
  }
  if (in_channels % groups != 0 || out_channels % groups != 0) {
    throw ConfigError("conv groups " + std::to_string(groups) + " must divide channels " +
                      std::to_string(in_channels) + "/" + std::to_string(out_channels));
  }
}

std::size_t conv1d_out_len(std::size_t length, const Conv1DSpec& spec) {
  const std::size_t field = spec.receptive_field();
  if (spec.kernel_size == 0 || spec.dilation == 0) throw ConfigError("conv kernel and dilation must be positive");
  if (field > length) {
    throw ConfigError("conv receptive field exceeds sequence: T=" + std::to_string(length) +
                      ", kernel=" + std::to_string(spec.kernel_size) + ", dilation=" + std::to_string(spec.dilation));
  }
  return (length - field) / spec.effective_stride() + 1;
}

std::size_t transposed_natural_len(std::size_t positions, const Conv1DSpec& spec) {
  return (positions - 1) * spec.effective_stride() + spec.receptive_field();
}

std::string to_string(AttentionKind kind) { return kind == AttentionKind::kVanilla ? "vanilla" : "entmax15"; }

AttentionKind attention_kind_from_string(const std::string& s) {
  if (s == "vanilla" || s == "classic") return AttentionKind::kVanilla;
  if (s == "entmax15" || s == "sparse") return AttentionKind::kEntmax15;
  throw ConfigError("unknown attention kind '" + s + "' (expected vanilla or entmax15)");
}

bool RevINStats::any_fallback() const {
  return std::any_of(fallback.begin(), fallback.end(), [](bool b) { return b; });
}

namespace nn {

Var conv1d(const Var& x, const Var& weight, const Var& bias, const Conv1DSpec& spec) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 3 || ws.size() != 3) {
    throw DimensionError("conv1d expects x [n,T,C] and weight [out,in/g,k], got " + shape_str(xs) + " and " +
                         shape_str(ws));
  }
  const std::size_t groups = spec.groups;
  const std::size_t n = xs[0], len = xs[1], cin = xs[2];
  const std::size_t cout = ws[0], cin_g = ws[1], ks = ws[2];
  if (ks != spec.kernel_size || cin_g * groups != cin || cout % groups != 0 || bias.shape() != Shape{cout}) {
    throw DimensionError("conv1d weight " + shape_str(ws) + " / bias " + shape_str(bias.shape()) +
                         " incompatible with input " + shape_str(xs) + " and groups " + std::to_string(groups));
  }
  const std::size_t cout_g = cout / groups;
  const std::size_t positions = conv1d_out_len(len, spec);
  const std::size_t stride = spec.effective_stride(), dil = spec.dilation;
  const std::size_t rows = n * positions;

  // Column matrix for one group: [rows, ks * cin_g].
  auto im2col = [=](const real* xp, std::size_t g, RowMat& col) {
    col.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(ks * cin_g));
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t p = 0; p < positions; ++p) {
        real* dst = col.data() + (b * positions + p) * ks * cin_g;
        for (std::size_t k = 0; k < ks; ++k) {
          const real* src = xp + (b * len + p * stride + k * dil) * cin + g * cin_g;
          std::copy(src, src + cin_g, dst + k * cin_g);
        }
      }
    }
  };
  auto group_weight = [=](const real* wp, std::size_t g) {
    RowMat wg(static_cast<Eigen::Index>(ks * cin_g), static_cast<Eigen::Index>(cout_g));
    for (std::size_t o = 0; o < cout_g; ++o) {
      for (std::size_t c = 0; c < cin_g; ++c) {
        for (std::size_t k = 0; k < ks; ++k) wg(k * cin_g + c, o) = wp[((g * cout_g + o) * cin_g + c) * ks + k];
      }
    }
    return wg;
  };

  Tensor out({n, positions, cout});
  RowMat col;
  for (std::size_t g = 0; g < groups; ++g) {
    im2col(x.value().ptr(), g, col);
    StridedMap o(out.ptr() + g * cout_g, rows, cout_g, Eigen::OuterStride<>(cout));
    o.noalias() = col * group_weight(weight.value().ptr(), g);
  }
  const real* bp = bias.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < cout; ++o) out[r * cout + o] += bp[o];
  }

  return x.tape().record(std::move(out), {x, weight, bias}, [=](const Tensor& grad, Tape& tape) {
    Tensor* dx = tape.grad_sink(x);
    Tensor* dw = tape.grad_sink(weight);
    Tensor* db = tape.grad_sink(bias);
    RowMat col;
    for (std::size_t g = 0; g < groups; ++g) {
      CStridedMap G(grad.ptr() + g * cout_g, rows, cout_g, Eigen::OuterStride<>(cout));
      if (dw) {
        im2col(x.value().ptr(), g, col);
        RowMat dwg = col.transpose() * G;
        real* wp = dw->ptr();
        for (std::size_t o = 0; o < cout_g; ++o) {
          for (std::size_t c = 0; c < cin_g; ++c) {
            for (std::size_t k = 0; k < ks; ++k) wp[((g * cout_g + o) * cin_g + c) * ks + k] += dwg(k * cin_g + c, o);
          }
        }
      }
      if (dx) {
        RowMat dcol = G * group_weight(weight.value().ptr(), g).transpose();
        real* xp = dx->ptr();
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t p = 0; p < positions; ++p) {
            const real* src = dcol.data() + (b * positions + p) * ks * cin_g;
            for (std::size_t k = 0; k < ks; ++k) {
              real* dst = xp + (b * len + p * stride + k * dil) * cin + g * cin_g;
              for (std::size_t c = 0; c < cin_g; ++c) dst[c] += src[k * cin_g + c];
            }
          }
        }
      }
    }
    if (db) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < cout; ++o) (*db)[o] += grad[r * cout + o];
      }
    }
  });
}

namespace {

Var conv_transpose_impl(const Var& r, const Var& weight, const Var* bias, const Conv1DSpec& spec,
                        std::size_t target_len) {
  const Shape& rs = r.shape();
  const Shape& ws = weight.shape();
  if (rs.size() != 3 || ws.size() != 3) {
    throw DimensionError("conv_transpose1d expects r [n,D,C] and weight [in,out/g,k], got " + shape_str(rs) +
                         " and " + shape_str(ws));
  }
  const std::size_t groups = spec.groups;
  const std::size_t n = rs[0], positions = rs[1], cin = rs[2];
  const std::size_t out_g = ws[1], ks = ws[2];
  const std::size_t cout = out_g * groups;
  if (ws[0] != cin || ks != spec.kernel_size || cin % groups != 0 || (bias && bias->shape() != Shape{cout})) {
    throw DimensionError("conv_transpose1d weight " + shape_str(ws) + " incompatible with input " + shape_str(rs));
  }
  const std::size_t in_g = cin / groups;
  const std::size_t natural = transposed_natural_len(positions, spec);
  if (natural > target_len) {
    throw ConfigError("transposed conv natural length " + std::to_string(natural) + " exceeds target " +
                      std::to_string(target_len));
  }
  const std::size_t stride = spec.effective_stride(), dil = spec.dilation;
  const std::size_t rows = n * positions;

  auto group_weight = [=](const real* wp, std::size_t g) {
    RowMat wg(static_cast<Eigen::Index>(in_g), static_cast<Eigen::Index>(ks * out_g));
    for (std::size_t i = 0; i < in_g; ++i) {
      for (std::size_t o = 0; o < out_g; ++o) {
        for (std::size_t k = 0; k < ks; ++k) wg(i, k * out_g + o) = wp[((g * in_g + i) * out_g + o) * ks + k];
      }
    }
    return wg;
  };

  Tensor out({n, target_len, cout});
  for (std::size_t g = 0; g < groups; ++g) {
    CStridedMap R(r.value().ptr() + g * in_g, rows, in_g, Eigen::OuterStride<>(cin));
    RowMat cols = R * group_weight(weight.value().ptr(), g);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t p = 0; p < positions; ++p) {
        const real* src = cols.data() + (b * positions + p) * ks * out_g;
        for (std::size_t k = 0; k < ks; ++k) {
          real* dst = out.ptr() + (b * target_len + p * stride + k * dil) * cout + g * out_g;
          for (std::size_t o = 0; o < out_g; ++o) dst[o] += src[k * out_g + o];
        }
      }
    }
  }
  if (bias) {
    const real* bp = bias->value().ptr();
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t t = 0; t < natural; ++t) {
        for (std::size_t o = 0; o < cout; ++o) out[(b * target_len + t) * cout + o] += bp[o];
      }
    }
  }

  std::vector<Var> inputs{r, weight};
  if (bias) inputs.push_back(*bias);
  const Var bias_var = bias ? *bias : Var();
  const bool has_bias = bias != nullptr;
  return r.tape().record(std::move(out), inputs, [=](const Tensor& grad, Tape& tape) {
    Tensor* dr = tape.grad_sink(r);
    Tensor* dw = tape.grad_sink(weight);
    RowMat dcols(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(ks * out_g));
    for (std::size_t g = 0; g < groups; ++g) {
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t p = 0; p < positions; ++p) {
          real* dst = dcols.data() + (b * positions + p) * ks * out_g;
          for (std::size_t k = 0; k < ks; ++k) {
            const real* src = grad.ptr() + (b * target_len + p * stride + k * dil) * cout + g * out_g;
            std::copy(src, src + out_g, dst + k * out_g);
          }
        }
      }
      if (dr) {
        StridedMap dR(dr->ptr() + g * in_g, rows, in_g, Eigen::OuterStride<>(cin));
        dR.noalias() += dcols * group_weight(weight.value().ptr(), g).transpose();
      }
      if (dw) {
        CStridedMap R(r.value().ptr() + g * in_g, rows, in_g, Eigen::OuterStride<>(cin));
        RowMat dwg = R.transpose() * dcols;
        real* wp = dw->ptr();
        for (std::size_t i = 0; i < in_g; ++i) {
          for (std::size_t o = 0; o < out_g; ++o) {
            for (std::size_t k = 0; k < ks; ++k) wp[((g * in_g + i) * out_g + o) * ks + k] += dwg(i, k * out_g + o);
          }
        }
      }
    }
    if (has_bias) {
      if (Tensor* db = tape.grad_sink(bias_var)) {
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t t = 0; t < natural; ++t) {
            for (std::size_t o = 0; o < cout; ++o) (*db)[o] += grad[(b * target_len + t) * cout + o];
          }
        }
      }
    }
  });
}

}  // namespace

Var conv_transpose1d(const Var& r, const Var& weight, const Var& bias, const Conv1DSpec& spec,
                     std::size_t target_len) {
  return conv_transpose_impl(r, weight, &bias, spec, target_len);
}

Var conv_transpose1d(const Var& r, const Var& weight, const Conv1DSpec& spec, std::size_t target_len) {
  return conv_transpose_impl(r, weight, nullptr, spec, target_len);
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, real eps) {
  const Shape& s = x.shape();
  const std::size_t d = s.back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm affine shape mismatch for input " + shape_str(s));
  }
  const std::size_t rows = rows_of(s);
  auto xhat = std::make_shared<std::vector<real>>(x.value().size());
  auto inv_std = std::make_shared<std::vector<real>>(rows);
  Tensor out(s);
  const real* xp = x.value().ptr();
  const real* gp = gamma.value().ptr();
  const real* bp = beta.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const real* row = xp + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const real inv = static_cast<real>(1.0 / std::sqrt(var + eps));
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const real xh = static_cast<real>(row[j] - mu) * inv;
      (*xhat)[r * d + j] = xh;
      out[r * d + j] = gp[j] * xh + bp[j];
    }
  }
  return x.tape().record(std::move(out), {x, gamma, beta}, [=](const Tensor& g, Tape& tape) {
    Tensor* dx = tape.grad_sink(x);
    Tensor* dg = tape.grad_sink(gamma);
    Tensor* db = tape.grad_sink(beta);
    const real* gam = gamma.value().ptr();
    for (std::size_t r = 0; r < rows; ++r) {
      const real* gr = g.ptr() + r * d;
      const real* xh = xhat->data() + r * d;
      if (dg || db) {
        for (std::size_t j = 0; j < d; ++j) {
          if (dg) (*dg)[j] += gr[j] * xh[j];
          if (db) (*db)[j] += gr[j];
        }
      }
      if (dx) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dxh = gr[j] * gam[j];
          m1 += dxh;
          m2 += dxh * xh[j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        const real inv = (*inv_std)[r];
        for (std::size_t j = 0; j < d; ++j) {
          (*dx)[r * d + j] += inv * static_cast<real>(gr[j] * gam[j] - m1 - xh[j] * m2);
        }
      }
    }
  });
}

Var gelu(const Var& x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const real v = xv[i];
    out[i] = v * real(0.5) * (real(1) + std::erf(v / std::numbers::sqrt2_v<real>));
  }
  return x.tape().record(std::move(out), {x}, [x](const Tensor& g, Tape& tape) {
    if (Tensor* dx = tape.grad_sink(x)) {
      const Tensor& xv = x.value();
      const real inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<real> / std::numbers::sqrt2_v<real>;
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const real v = xv[i];
        const real cdf = real(0.5) * (real(1) + std::erf(v / std::numbers::sqrt2_v<real>));
        const real pdf = inv_sqrt_2pi * std::exp(real(-0.5) * v * v);
        (*dx)[i] += g[i] * (cdf + v * pdf);
      }
    }
  });
}

Var dropout(const Var& x, real p, bool training, Rng& rng) {
  if (!(p >= 0 && p < 1)) throw ConfigError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  if (!training || p == 0) return x;
  const real scale = real(1) / (real(1) - p);
  auto keep = std::make_shared<std::vector<real>>(x.value().size());
  Tensor out(x.shape());
  for (std::size_t i = 0; i < keep->size(); ++i) {
    (*keep)[i] = rng.uniform() < p ? real(0) : scale;
    out[i] = x.value()[i] * (*keep)[i];
  }
  return x.tape().record(std::move(out), {x}, [x, keep](const Tensor& g, Tape& tape) {
    if (Tensor* dx = tape.grad_sink(x)) {
      for (std::size_t i = 0; i < keep->size(); ++i) (*dx)[i] += g[i] * (*keep)[i];
    }
  });
}

std::vector<real> entmax15(std::span<const real> logits) {
  const std::size_t n = logits.size();
  std::vector<real> out(n, 0);
  if (n == 0) return out;
  const real mx = *std::max_element(logits.begin(), logits.end());
  std::vector<real> z(n);
  for (std::size_t i = 0; i < n; ++i) z[i] = (logits[i] - mx) / 2;
  std::vector<real> sorted = z;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());

  double cum = 0.0, cum_sq = 0.0;
  real tau_star = sorted[0] - 1;
  for (std::size_t k = 1; k <= n; ++k) {
    const double v = sorted[k - 1];
    cum += v;
    cum_sq += v * v;
    const double mean = cum / static_cast<double>(k);
    const double mean_sq = cum_sq / static_cast<double>(k);
    const double ss = static_cast<double>(k) * (mean_sq - mean * mean);
    const double delta = std::max(0.0, (1.0 - ss) / static_cast<double>(k));
    const double tau = mean - std::sqrt(delta);
    if (tau <= v) tau_star = static_cast<real>(tau);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const real t = std::max(real(0), z[i] - tau_star);
    out[i] = t * t;
  }
  return out;
}

Var softmax_last(const Var& x) {
  const Shape& s = x.shape();
  const std::size_t d = s.back(), rows = rows_of(s);
  auto probs = std::make_shared<Tensor>(s);
  for (std::size_t r = 0; r < rows; ++r) {
    const real* row = x.value().ptr() + r * d;
    real* o = probs->ptr() + r * d;
    const real mx = *std::max_element(row, row + d);
    real total = 0;
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = std::exp(row[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < d; ++j) o[j] /= total;
  }
  Tensor out = *probs;
  return x.tape().record(std::move(out), {x}, [x, probs, d, rows](const Tensor& g, Tape& tape) {
    if (Tensor* dx = tape.grad_sink(x)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const real* y = probs->ptr() + r * d;
        const real* gr = g.ptr() + r * d;
        real dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += gr[j] * y[j];
        for (std::size_t j = 0; j < d; ++j) (*dx)[r * d + j] += y[j] * (gr[j] - dot);
      }
    }
  });
}

Var entmax15_last(const Var& x) {
  const Shape& s = x.shape();
  const std::size_t d = s.back(), rows = rows_of(s);
  auto probs = std::make_shared<Tensor>(s);
  for (std::size_t r = 0; r < rows; ++r) {
    auto y = entmax15(std::span<const real>(x.value().ptr() + r * d, d));
    std::copy(y.begin(), y.end(), probs->ptr() + r * d);
  }
  Tensor out = *probs;
  return x.tape().record(std::move(out), {x}, [x, probs, d, rows](const Tensor& g, Tape& tape) {
    if (Tensor* dx = tape.grad_sink(x)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const real* y = probs->ptr() + r * d;
        const real* gr = g.ptr() + r * d;
        real num = 0, den = 0;
        for (std::size_t j = 0; j < d; ++j) {
          const real sq = std::sqrt(y[j]);
          num += gr[j] * sq;
          den += sq;
        }
        const real q = num / den;
        for (std::size_t j = 0; j < d; ++j) {
          const real sq = std::sqrt(y[j]);
          (*dx)[r * d + j] += sq * (gr[j] - q);
        }
      }
    }
  });
}

std::pair<Var, RevINStats> revin_normalize(const Var& x, const Tensor* mask, const Var& gamma, const Var& beta,
                                           real eps) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw DimensionError("revin_normalize expects [n, T], got " + shape_str(s));
  if (mask && mask->shape() != s) {
    throw DimensionError("revin mask " + shape_str(mask->shape()) + " does not match " + shape_str(s));
  }
  const std::size_t rows = s[0], len = s[1];
  const std::size_t channels = gamma.value().size();
  if (beta.value().size() != channels || rows % channels != 0) {
    throw DimensionError("revin affine size " + std::to_string(channels) + " incompatible with " + shape_str(s));
  }
  RevINStats stats{Tensor({rows}), Tensor({rows}), std::vector<bool>(rows, false)};
  const real* xp = x.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 0; t < len; ++t) {
      if (mask && (*mask)[r * len + t] != 0) continue;
      sum += xp[r * len + t];
      ++count;
    }
    if (count == 0) {
      stats.mean[r] = 0;
      stats.stdev[r] = 1;
      stats.fallback[r] = true;
      continue;
    }
    const double mu = sum / static_cast<double>(count);
    double var = 0.0;
    for (std::size_t t = 0; t < len; ++t) {
      if (mask && (*mask)[r * len + t] != 0) continue;
      const double dv = xp[r * len + t] - mu;
      var += dv * dv;
    }
    var /= static_cast<double>(count);
    stats.mean[r] = static_cast<real>(mu);
    stats.stdev[r] = static_cast<real>(std::sqrt(var + eps));
  }

  Tensor out(s);
  const real* gp = gamma.value().ptr();
  const real* bp = beta.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t c = r % channels;
    for (std::size_t t = 0; t < len; ++t) {
      out[r * len + t] = (xp[r * len + t] - stats.mean[r]) / stats.stdev[r] * gp[c] + bp[c];
    }
  }
  const Tensor mean = stats.mean, stdev = stats.stdev;
  Var y = x.tape().record(std::move(out), {x, gamma, beta}, [=](const Tensor& g, Tape& tape) {
    Tensor* dx = tape.grad_sink(x);
    Tensor* dg = tape.grad_sink(gamma);
    Tensor* db = tape.grad_sink(beta);
    const real* xp = x.value().ptr();
    const real* gam = gamma.value().ptr();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t c = r % channels;
      for (std::size_t t = 0; t < len; ++t) {
        const real gv = g[r * len + t];
        if (dx) (*dx)[r * len + t] += gv * gam[c] / stdev[r];
        if (dg) (*dg)[c] += gv * (xp[r * len + t] - mean[r]) / stdev[r];
        if (db) (*db)[c] += gv;
      }
    }
  });
  return {y, std::move(stats)};
}

Var revin_denormalize(const Var& y, const RevINStats& stats, const Var& gamma, const Var& beta, real eps) {
  const Shape& s = y.shape();
  if (s.size() != 2 || s[0] != stats.mean.size()) {
    throw DimensionError("revin_denormalize input " + shape_str(s) + " does not match stored statistics");
  }
  const std::size_t rows = s[0], len = s[1];
  const std::size_t channels = gamma.value().size();
  const real guard = eps * eps;
  Tensor out(s);
  const real* yp = y.value().ptr();
  const real* gp = gamma.value().ptr();
  const real* bp = beta.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t c = r % channels;
    for (std::size_t t = 0; t < len; ++t) {
      out[r * len + t] = (yp[r * len + t] - bp[c]) / (gp[c] + guard) * stats.stdev[r] + stats.mean[r];
    }
  }
  const Tensor stdev = stats.stdev;
  return y.tape().record(std::move(out), {y, gamma, beta}, [=](const Tensor& g, Tape& tape) {
    Tensor* dy = tape.grad_sink(y);
    Tensor* dg = tape.grad_sink(gamma);
    Tensor* db = tape.grad_sink(beta);
    const real* yp = y.value().ptr();
    const real* gam = gamma.value().ptr();
    const real* bet = beta.value().ptr();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t c = r % channels;
      const real denom = gam[c] + guard;
      for (std::size_t t = 0; t < len; ++t) {
        const real gv = g[r * len + t] * stdev[r];
        if (dy) (*dy)[r * len + t] += gv / denom;
        if (db) (*db)[c] -= gv / denom;
        if (dg) (*dg)[c] -= gv * (yp[r * len + t] - bet[c]) / (denom * denom);
      }
    }
  });
}

}  // namespace nn

Tensor positional_encoding(std::size_t length, std::size_t d) {
  if (d == 0 || d % 2 != 0) throw ConfigError("positional encoding needs an even dimension, got " + std::to_string(d));
  Tensor pe({length, d});
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t k = 0; k < d / 2; ++k) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * k) / static_cast<double>(d));
      const double angle = static_cast<double>(t) * freq;
      pe[t * d + 2 * k] = static_cast<real>(std::sin(angle));
      pe[t * d + 2 * k + 1] = static_cast<real>(std::cos(angle));
    }
  }
  return pe;
}

void kaiming_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<real>(rng.uniform(-bound, bound));
}

Linear::Linear(std::string name, std::size_t in, std::size_t out, bool with_bias_)
    : weight(name + ".weight", Tensor({in, out})), bias(name + ".bias", Tensor({out})), with_bias(with_bias_) {}

void Linear::init(Rng& rng) {
  const std::size_t fan_in = weight.value.shape()[0];
  kaiming_uniform(weight.value, fan_in, rng);
  if (with_bias) kaiming_uniform(bias.value, fan_in, rng);
}

Var Linear::forward(Tape& tape, const Var& x) {
  if (with_bias) return ops::linear(x, tape.param(weight), tape.param(bias));
  return ops::linear(x, tape.param(weight));
}

std::vector<Parameter*> Linear::parameters() {
  if (with_bias) return {&weight, &bias};
  return {&weight};
}

Conv1d::Conv1d(std::string name, Conv1DSpec s)
    : spec(s),
      weight(name + ".weight", Tensor({s.out_channels, s.in_channels / s.groups, s.kernel_size})),
      bias(name + ".bias", Tensor({s.out_channels})) {
  spec.validate();
}

void Conv1d::init(Rng& rng) {
  const std::size_t fan_in = spec.in_channels / spec.groups * spec.kernel_size;
  kaiming_uniform(weight.value, fan_in, rng);
  kaiming_uniform(bias.value, fan_in, rng);
}

Var Conv1d::forward(Tape& tape, const Var& x) {
  return nn::conv1d(x, tape.param(weight), tape.param(bias), spec);
}

std::vector<Parameter*> Conv1d::parameters() { return {&weight, &bias}; }

ConvTranspose1d::ConvTranspose1d(std::string name, Conv1DSpec s)
    : spec(s),
      weight(name + ".weight", Tensor({s.out_channels, s.in_channels / s.groups, s.kernel_size})),
      bias(name + ".bias", Tensor({s.in_channels})) {
  spec.validate();
}

void ConvTranspose1d::init(Rng& rng) {
  const std::size_t fan_in = spec.in_channels / spec.groups * spec.kernel_size;
  kaiming_uniform(weight.value, fan_in, rng);
  kaiming_uniform(bias.value, fan_in, rng);
}

Var ConvTranspose1d::forward(Tape& tape, const Var& r, std::size_t target_len) {
  return nn::conv_transpose1d(r, tape.param(weight), tape.param(bias), spec, target_len);
}

std::vector<Parameter*> ConvTranspose1d::parameters() { return {&weight, &bias}; }

LayerNorm::LayerNorm(std::string name, std::size_t d)
    : gamma(name + ".gamma", Tensor::ones({d})), beta(name + ".beta", Tensor::zeros({d})) {}

Var LayerNorm::forward(Tape& tape, const Var& x) {
  return nn::layer_norm(x, tape.param(gamma), tape.param(beta));
}

std::vector<Parameter*> LayerNorm::parameters() { return {&gamma, &beta}; }

MultiHeadAttention::MultiHeadAttention(std::string name, std::size_t d_, std::size_t heads_, AttentionKind kind_)
    : d(d_),
      heads(heads_),
      kind(kind_),
      wq(name + ".wq", Tensor({d_, d_})),
      wk(name + ".wk", Tensor({d_, d_})),
      wv(name + ".wv", Tensor({d_, d_})),
      wo(name + ".wo", Tensor({d_, d_})) {
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention dimension " + std::to_string(d) + " not divisible by heads " +
                      std::to_string(heads));
  }
}

void MultiHeadAttention::init(Rng& rng) {
  for (Parameter* p : parameters()) kaiming_uniform(p->value, d, rng);
}

AttentionOutput MultiHeadAttention::forward(Tape& tape, const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[2] != d) throw DimensionError("attention expects [n, L, " + std::to_string(d) + "]");
  const std::size_t n = s[0], len = s[1], dh = d / heads;
  auto split_heads = [&](const Var& v) {
    return ops::permute(ops::reshape(v, {n, len, heads, dh}), {0, 2, 1, 3});
  };
  Var q = split_heads(ops::linear(x, tape.param(wq)));
  Var k = split_heads(ops::linear(x, tape.param(wk)));
  Var v = split_heads(ops::linear(x, tape.param(wv)));
  Var scores = ops::mul(ops::matmul(q, k, false, true), real(1) / std::sqrt(static_cast<real>(dh)));
  Var attn = kind == AttentionKind::kVanilla ? nn::softmax_last(scores) : nn::entmax15_last(scores);
  Var ctx = ops::matmul(attn, v);
  Var merged = ops::reshape(ops::permute(ctx, {0, 2, 1, 3}), {n, len, d});
  return {ops::linear(merged, tape.param(wo)), attn.value()};
}

std::vector<Parameter*> MultiHeadAttention::parameters() { return {&wq, &wk, &wv, &wo}; }

RevIN::RevIN(std::string name, std::size_t channels)
    : gamma(name + ".gamma", Tensor::ones({channels})), beta(name + ".beta", Tensor::zeros({channels})) {}

std::pair<Var, RevINStats> RevIN::normalize(Tape& tape, const Var& x, const Tensor* mask) {
  return nn::revin_normalize(x, mask, tape.param(gamma), tape.param(beta), eps);
}

Var RevIN::denormalize(Tape& tape, const Var& y, const RevINStats& stats) {
  return nn::revin_denormalize(y, stats, tape.param(gamma), tape.param(beta), eps);
}

std::vector<Parameter*> RevIN::parameters() { return {&gamma, &beta}; }

}  // namespace tsrm
