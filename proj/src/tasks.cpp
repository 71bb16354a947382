#include "tsrm/tasks.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "tsrm/error.hpp"
#include "tsrm/ops.hpp"

namespace tsrm {

std::string to_string(Task task) { return task == Task::kForecast ? "forecast" : "impute"; }

Task task_from_string(const std::string& s) {
  if (s == "forecast") return Task::kForecast;
  if (s == "impute" || s == "imputation") return Task::kImpute;
  throw ConfigError("unknown task '" + s + "' (expected forecast or impute)");
}

namespace {

void require_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw DimensionError(std::string(what) + ": " + shape_str(a) + " vs " + shape_str(b));
}

Var l1_plus_l2(const Var& e) { return ops::mean(ops::add(ops::abs(e), ops::square(e))); }

}  // namespace

Var forecast_loss(const Var& yhat, const Var& y) {
  require_same(yhat.shape(), y.shape(), "forecast_loss");
  return l1_plus_l2(ops::sub(yhat, y));
}

Var imputation_loss(const Var& yhat, const Var& y, const Tensor& mask, double rm, bool single_rm_weighting) {
  require_same(yhat.shape(), y.shape(), "imputation_loss");
  require_same(yhat.shape(), mask.shape(), "imputation_loss mask");
  if (!(rm > 0.0 && rm < 1.0)) throw ConfigError("missing ratio must lie in (0, 1), got " + std::to_string(rm));
  Tape& tape = yhat.tape();
  Tensor keep(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) keep[i] = mask[i] != 0 ? 0 : 1;
  Var e = ops::sub(yhat, y);
  Var lm = ops::mul(l1_plus_l2(ops::mul(e, tape.constant(mask))), static_cast<real>(1.0 / rm));
  Var lu = ops::mul(l1_plus_l2(ops::mul(e, tape.constant(keep))), static_cast<real>(1.0 / (1.0 - rm)));
  if (!single_rm_weighting) lm = ops::mul(lm, static_cast<real>(1.0 / rm));
  return ops::add(lm, lu);
}

double MaskSet::realized_ratio() const {
  double masked = 0;
  for (auto v : m.data()) masked += v;
  return masked / static_cast<double>(m.size());
}

namespace {

// Partial Fisher-Yates over [0, n): the first k slots become the chosen cells.
void mark_cells(std::span<real> out, double rm, Rng& rng) {
  const std::size_t n = out.size();
  const auto k = static_cast<std::size_t>(std::llround(static_cast<double>(n) * rm));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.below(n - i);
    std::swap(idx[i], idx[j]);
    out[idx[i]] = 1;
  }
}

}  // namespace

MaskSet generate_mask(std::size_t length, std::size_t features, double rm, std::uint64_t seed) {
  Rng rng(seed);
  MaskSet set{sample_mask({length, features}, rm, rng), rm, seed};
  return set;
}

Tensor sample_mask(const Shape& shape, double rm, Rng& rng) {
  if (!(rm > 0.0 && rm < 1.0)) throw ConfigError("missing ratio must lie in (0, 1), got " + std::to_string(rm));
  if (shape.size() < 2) throw DimensionError("mask shape needs [.., T, F], got " + shape_str(shape));
  Tensor m(shape, 0);
  const std::size_t slice = shape[shape.size() - 2] * shape.back();
  for (std::size_t off = 0; off < m.size(); off += slice) mark_cells(m.data().subspan(off, slice), rm, rng);
  return m;
}

Tensor apply_mask(const Tensor& x, const Tensor& mask, real sentinel) {
  require_same(x.shape(), mask.shape(), "apply_mask");
  Tensor out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (mask[i] != 0) out[i] = sentinel;
  }
  return out;
}

std::string EvalRecord::csv_header() { return "split,setting,epoch,mse,mae,count,config_hash"; }

std::string EvalRecord::csv_row() const {
  std::ostringstream os;
  os.precision(17);
  os << split << ',' << setting << ',' << epoch << ',' << mse << ',' << mae << ',' << count << ',' << config_hash;
  return os.str();
}

nlohmann::ordered_json EvalRecord::to_json() const {
  return {{"split", split}, {"setting", setting}, {"epoch", epoch},           {"mse", mse},
          {"mae", mae},     {"count", count},     {"config_hash", config_hash}};
}

void MetricAccumulator::add(const Tensor& yhat, const Tensor& y, const Tensor* mask) {
  require_same(yhat.shape(), y.shape(), "metrics");
  if (mask) require_same(yhat.shape(), mask->shape(), "metrics mask");
  // Kahan sums keep pooled metrics stable over large evaluation sets.
  auto kahan = [](double& sum, double& c, double v) {
    const double t = v - c;
    const double s = sum + t;
    c = (s - sum) - t;
    sum = s;
  };
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (mask && (*mask)[i] == 0) continue;
    const double e = static_cast<double>(yhat[i]) - static_cast<double>(y[i]);
    kahan(se_, se_c_, e * e);
    kahan(ae_, ae_c_, std::abs(e));
    ++count_;
  }
}

EvalRecord MetricAccumulator::result() const {
  if (count_ == 0) throw ContractError("metrics over an empty cell set");
  EvalRecord r;
  r.mse = se_ / static_cast<double>(count_);
  r.mae = ae_ / static_cast<double>(count_);
  r.count = count_;
  return r;
}

EvalRecord metrics(const Tensor& yhat, const Tensor& y, const Tensor* mask) {
  MetricAccumulator acc;
  acc.add(yhat, y, mask);
  return acc.result();
}

EvalRecord average(const std::vector<EvalRecord>& rows) {
  if (rows.empty()) throw ContractError("cannot average zero evaluation rows");
  EvalRecord avg = rows.front();
  avg.mse = avg.mae = 0;
  avg.count = 0;
  for (const auto& r : rows) {
    avg.mse += r.mse;
    avg.mae += r.mae;
    avg.count += r.count;
  }
  avg.mse /= static_cast<double>(rows.size());
  avg.mae /= static_cast<double>(rows.size());
  avg.setting = "AVG";
  return avg;
}

}  // namespace tsrm
