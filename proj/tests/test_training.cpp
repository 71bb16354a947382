#include <cmath>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "support/gradcheck.hpp"
#include "tsrm/checkpoint.hpp"
#include "tsrm/error.hpp"
#include "tsrm/training.hpp"

using namespace tsrm;
using tsrm::testing::random_tensor;

namespace {

SeriesDataset small_sine(std::size_t length = 200, std::uint64_t seed = 5) {
  SineSpec spec;
  spec.length = length;
  spec.seed = seed;
  spec.noise = 0.05;
  SeriesDataset ds = synthetic_sine(spec);
  SplitSpec split;
  split.train = length * 6 / 10;
  split.val = length * 2 / 10;
  split_and_standardize(ds, split);
  return ds;
}

ModelConfig small_model(std::size_t horizon = 12) {
  ModelConfig cfg;
  cfg.num_layers = 1;
  cfg.heads = 2;
  cfg.d_model = 8;
  cfg.conv_specs = {Conv1DSpec{3, 1}, Conv1DSpec{4, 2}};
  cfg.lookback = 24;
  cfg.horizon = horizon;
  cfg.features = 2;
  cfg.dropout = 0;
  return cfg;
}

TrainConfig small_train(std::size_t epochs = 3) {
  TrainConfig tc;
  tc.max_epochs = epochs;
  tc.batch_size = 8;
  tc.lr = 3e-3;
  tc.seed = 9;
  return tc;
}

}  // namespace

TEST_CASE("adam") {
  Parameter p("p", Tensor::from({3}, {1, -2, 0.5}));
  p.grad = Tensor::zeros({3});
  Adam zero({&p});
  zero.step(0.1);
  CHECK(p.value == Tensor::from({3}, {1, -2, 0.5}));

  Parameter s("s", Tensor::from({1}, {0.0}));
  Adam first({&s});
  s.grad = Tensor::from({1}, {1.0});
  first.step(0.01);
  // m_hat / sqrt(v_hat) = 1, so the move equals lr up to eps.
  CHECK(std::abs(s.value[0] + 0.01) < 1e-9);
  s.grad = Tensor::from({1}, {1.0});
  first.step(0.01);
  CHECK(s.value[0] < -0.01);

  Parameter neg("n", Tensor::from({1}, {0.0}));
  Adam twice({&neg});
  for (int i = 0; i < 2; ++i) {
    const double before = neg.value[0];
    neg.grad = Tensor::from({1}, {-3.0});
    twice.step(0.1);
    CHECK(neg.value[0] > before);
  }

  Parameter missing("m", Tensor::from({1}, {0.0}));
  Adam bad({&missing});
  CHECK_THROWS_AS(bad.step(0.1), ContractError);

  Parameter frozen("f", Tensor::from({1}, {2.0}));
  frozen.trainable = false;
  Adam skip({&frozen});
  CHECK_NOTHROW(skip.step(0.1));
  CHECK(frozen.value[0] == 2.0);
}

TEST_CASE("gradient clipping bounds the global norm") {
  Rng rng(300);
  Parameter a("a", Tensor({4})), b("b", Tensor({3}));
  a.grad = random_tensor({4}, rng, 10);
  b.grad = random_tensor({3}, rng, 10);
  const double before = clip_grad_norm({&a, &b}, 0.5);
  CHECK(before > 0.5);
  CHECK(grad_norm({&a, &b}) <= 0.5 + 1e-12);
  const double small = clip_grad_norm({&a, &b}, 100);
  CHECK(small == doctest::Approx(grad_norm({&a, &b})));
}

TEST_CASE("plateau scheduler") {
  PlateauScheduler improving(1e-3, 2, 0.1);
  for (double v : {1.0, 0.9, 0.8, 0.7, 0.6}) CHECK(improving.step(v) == 1e-3);

  PlateauScheduler flat(1e-3, 2, 0.1);
  flat.step(1.0);
  flat.step(1.0);
  flat.step(1.0);
  CHECK(flat.decays() == 1);
  CHECK(flat.lr() == doctest::Approx(1e-4));

  Rng rng(301);
  PlateauScheduler noisy(1.0, 2, 0.5);
  double prev = noisy.lr();
  for (int i = 0; i < 100; ++i) {
    const double lr = noisy.step(rng.uniform());
    CHECK(lr <= prev);
    prev = lr;
  }
  PlateauScheduler nan(1.0, 1, 0.5);
  nan.step(1.0);
  CHECK(nan.step(std::numeric_limits<double>::quiet_NaN()) == 0.5);
}

TEST_CASE("early stopping") {
  EarlyStopper a(0.01, 3);
  CHECK_FALSE(a.step(1.0));
  CHECK_FALSE(a.step(0.985));
  CHECK(a.best() == 0.985);
  CHECK_FALSE(a.step(0.970));
  CHECK(a.best() == 0.970);

  EarlyStopper b(0.01, 3);
  CHECK_FALSE(b.step(1.0));
  CHECK_FALSE(b.step(0.995));
  CHECK_FALSE(b.step(0.995));
  CHECK(b.step(0.995));
  CHECK(b.best() == 1.0);

  EarlyStopper c(0.01, 3);
  c.step(1.0);
  CHECK_FALSE(c.step(std::numeric_limits<double>::quiet_NaN()));
  CHECK(c.saw_non_finite());
  CHECK(c.since_improvement() == 1);
}

TEST_CASE("train config JSON") {
  TrainConfig tc = small_train();
  tc.clip_norm = 1.5;
  tc.single_rm_weighting = true;
  TrainConfig back = train_config_from_json(nlohmann::json::parse(to_json(tc).dump()));
  CHECK(to_json(back) == to_json(tc));
  auto j = nlohmann::json::parse(to_json(tc).dump());
  j["learning_rate"] = 1;
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
  TrainConfig bad;
  bad.plateau_factor = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("zero learning rate leaves parameters untouched") {
  SeriesDataset ds = small_sine();
  TsrmModel model(small_model());
  Rng rng(302);
  model.init(rng);
  auto before = parameter_values(model);
  TrainConfig tc = small_train(1);
  tc.lr = 0;
  train(model, ds, Task::kForecast, tc);
  CHECK(parameter_values(model) == before);
}

TEST_CASE("training loss decreases on a small sine task") {
  SeriesDataset ds = small_sine();
  TsrmModel model(small_model());
  Rng rng(303);
  model.init(rng);
  TrainResult r = train(model, ds, Task::kForecast, small_train(3));
  REQUIRE(r.history.epochs.size() == 3);
  CHECK(r.history.epochs[1].train_loss < r.history.epochs[0].train_loss);
  CHECK(r.history.epochs[2].train_loss < r.history.epochs[1].train_loss);

  double best = std::numeric_limits<double>::infinity();
  for (const auto& e : r.history.epochs) best = std::min(best, e.val_mse);
  CHECK(r.best_val_mse == best);
  EvalRecord again = evaluate(model, ds, Split::kVal, Task::kForecast, eval_options(small_train()));
  CHECK(std::abs(again.mse - best) < 1e-9);
}

TEST_CASE("imputation training runs and evaluates masked cells") {
  SeriesDataset ds = small_sine();
  TsrmModel model(small_model(24));
  Rng rng(304);
  model.init(rng);
  TrainConfig tc = small_train(2);
  TrainResult r = train(model, ds, Task::kImpute, tc);
  CHECK(r.history.epochs.size() == 2);
  EvalRecord rec = evaluate(model, ds, Split::kTest, Task::kImpute, eval_options(tc));
  const std::size_t windows = window_starts(ds, Split::kTest, 24, 24, Task::kImpute).size();
  CHECK(rec.count == windows * 12);  // round(24 * 2 * 0.25) cells per window
  CHECK(window_mask(7, 24, 2, 0.25, 1) == window_mask(7, 24, 2, 0.25, 1));
  CHECK_FALSE(window_mask(7, 24, 2, 0.25, 1) == window_mask(8, 24, 2, 0.25, 1));

  TsrmModel forecast(small_model(12));
  CHECK_THROWS_AS(train(forecast, ds, Task::kImpute, tc), ConfigError);
}

TEST_CASE("identical seeds give identical histories and checkpoints") {
  SeriesDataset ds = small_sine();
  auto run = [&] {
    ModelConfig mc = small_model();
    mc.dropout = 0.1;
    TsrmModel model(mc);
    Rng rng(305);
    model.init(rng);
    TrainResult r = train(model, ds, Task::kForecast, small_train(2));
    std::ostringstream ckpt;
    write_checkpoint(ckpt, model, {{"epoch", r.best_epoch}});
    return std::make_pair(r.history.to_csv(false), ckpt.str());
  };
  auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  CHECK(a.first.rfind("epoch,train_loss,val_mse,val_mae,lr\n", 0) == 0);
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  SeriesDataset ds = small_sine();
  TsrmModel model(small_model());
  Rng rng(306);
  model.init(rng);
  model.head.bias.value[0] = std::numeric_limits<real>::infinity();
  try {
    train(model, ds, Task::kForecast, small_train(1));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("batch 0") != std::string::npos);
    CHECK(msg.find("lr") != std::string::npos);
    CHECK(msg.find("grad norm") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip") {
  Rng rng(307);
  ModelConfig mc = small_model();
  mc.attention = AttentionKind::kEntmax15;
  TsrmModel model(mc);
  model.init(rng);
  std::stringstream buf;
  write_checkpoint(buf, model, {{"note", "x"}});
  Checkpoint ck = read_checkpoint(buf);
  CHECK(to_json(ck.config) == to_json(mc));
  CHECK(ck.meta["note"] == "x");
  TsrmModel back = restore_model(ck);
  Tensor x = random_tensor({2, 24, 2}, rng);
  Tape t1(false), t2(false);
  CHECK(model.forward(t1, x, {}).output.value() == back.forward(t2, x, {}).output.value());

  std::string bytes = buf.str();
  CHECK(bytes.substr(0, 8) == "TSRMCKPT");
  std::istringstream corrupt("NOTACKPT" + bytes.substr(8));
  CHECK_THROWS_AS(read_checkpoint(corrupt), DataError);
  std::istringstream truncated(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(read_checkpoint(truncated), DataError);

  ModelConfig other = small_model();
  other.d_model = 16;
  TsrmModel wrong(other);
  CHECK_THROWS_AS(load_into(wrong, ck), ConfigError);
}

TEST_CASE("baselines") {
  SeriesDataset ds = small_sine(400);
  EvalRecord lv = last_value_baseline(ds, Split::kTest, 24, 12);
  CHECK(lv.mse > 0);
  EvalRecord mf = mean_fill_baseline(ds, Split::kTest, 24, 0.25, 1);
  CHECK(mf.mse > 0);
  CHECK(mf.count == window_starts(ds, Split::kTest, 24, 24, Task::kImpute).size() * 12);
}
