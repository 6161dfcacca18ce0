#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mdlm/errors.hpp"
#include "mdlm/trainer.hpp"
#include "test_support.hpp"

using namespace mdlm;
using namespace mdlm::testing;

TEST_CASE("linear schedule decays to zero") {
  CHECK(linear_schedule(1e-3, 0, 100) == 1e-3);
  CHECK(linear_schedule(1e-3, 50, 100) == doctest::Approx(5e-4));
  CHECK(linear_schedule(1e-3, 100, 100) == 0.0);
  CHECK(linear_schedule(1e-3, 150, 100) == 0.0);
}

TEST_CASE("global-norm clipping") {
  std::vector<Tensor<double>> g{Tensor<double>({2}, {3.0, 0.0}), Tensor<double>({1}, {4.0})};
  CHECK(clip_global_norm(g, 10.0) == doctest::Approx(5.0));
  CHECK(g[0][0] == 3.0);
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g[0][0] == doctest::Approx(0.6));
  CHECK(g[1][0] == doctest::Approx(0.8));
}

TEST_CASE("AdamW step against a hand computation") {
  TrainConfig cfg;
  cfg.weight_decay = 0.1;
  cfg.max_grad_norm = 100.0;
  std::vector<Var<double>> p{Var<double>::parameter(Tensor<double>({2}, {1.0, -2.0}))};
  OptimizerState st;
  const double lr = 0.1;
  double x[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
  const double grads[3][2] = {{0.5, -0.25}, {0.1, 0.3}, {-0.4, 0.0}};
  for (int s = 0; s < 3; ++s) {
    std::vector<Tensor<double>> g{Tensor<double>({2}, {grads[s][0], grads[s][1]})};
    adam_step(p, g, st, cfg, lr);
    const double bc1 = 1 - std::pow(0.9, s + 1), bc2 = 1 - std::pow(0.999, s + 1);
    for (int i = 0; i < 2; ++i) {
      x[i] *= 1 - lr * 0.1;
      m[i] = 0.9 * m[i] + 0.1 * grads[s][i];
      v[i] = 0.999 * v[i] + 0.001 * grads[s][i] * grads[s][i];
      x[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + 1e-8);
      CHECK(p[0].value()[i] == doctest::Approx(x[i]).epsilon(1e-12));
    }
  }
  CHECK(st.step == 3);
}

TEST_CASE("zero gradient without decay leaves parameters unchanged") {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  std::vector<Var<double>> p{Var<double>::parameter(Tensor<double>({3}, {1.0, 2.0, 3.0}))};
  std::vector<Tensor<double>> g{Tensor<double>({3})};
  OptimizerState st;
  CHECK(adam_step(p, g, st, cfg, 1e-2) == 0.0);
  CHECK(p[0].value()[0] == 1.0);
  CHECK(p[0].value()[2] == 3.0);
}

TEST_CASE("config validation and JSON") {
  TrainConfig c;
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig();
  c.objective.kind = ObjectiveKind::kLift;
  c.objective_learning_rates["lift"] = 5e-4;
  CHECK(c.base_learning_rate() == 5e-4);
  const auto back = TrainConfig::from_json(c.to_json());
  CHECK(back.objective.kind == ObjectiveKind::kLift);
  CHECK(back.base_learning_rate() == 5e-4);
  CHECK_THROWS_AS(TrainConfig::from_json({{"momentum", 0.9}}), ConfigError);
}

TEST_CASE("step count: ceil over batches and accumulation") {
  TrainConfig c;
  c.batch_size = 4;
  c.grad_accum_steps = 2;
  c.epochs = 3;
  CHECK(total_optimizer_steps(c, 10) == 6);  // 3 micro-batches -> 2 steps per epoch
  CHECK(total_optimizer_steps(c, 8) == 3);
}

namespace {

struct Run {
  ToyData data = toy_data(Task::kCopy, 12, 4);
  TrainConfig cfg;
  Run() {
    cfg.batch_size = 4;
    cfg.grad_accum_steps = 2;
    cfg.epochs = 3;
    cfg.learning_rate = 1e-2;
    cfg.seed = 17;
    cfg.objective.kind = ObjectiveKind::kLift;
  }
  Denoiser fresh() const {
    auto mc = tiny_model_config(data.vocab.size(), 8, 1);
    mc.dropout_rate = 0.1;
    return Denoiser(mc, 3);
  }
};

bool same_params(const Denoiser& a, const Denoiser& b) {
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    if (a.parameters()[i].var.value().data() != b.parameters()[i].var.value().data()) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("training is deterministic under a fixed seed") {
  Run r;
  Denoiser a = r.fresh(), b = r.fresh();
  const auto ra = train(r.cfg, r.data.seqs, special_ids(r.data.vocab), a);
  const auto rb = train(r.cfg, r.data.seqs, special_ids(r.data.vocab), b);
  CHECK(same_params(a, b));
  CHECK(ra.manifest.records.size() == 6);
  CHECK_FALSE(same_params(a, r.fresh()));
  // Three micro-batches per epoch: groups of two then one, two passes each.
  for (std::size_t i = 0; i < ra.manifest.records.size(); ++i) {
    CHECK(std::isfinite(ra.manifest.records[i].loss));
    CHECK(ra.manifest.records[i].forward_passes == (i % 2 == 0 ? 4u : 2u));
  }
}

TEST_CASE("resume from a mid-run checkpoint is bit-identical") {
  Run r;
  const auto ids = special_ids(r.data.vocab);
  Denoiser full = r.fresh();
  const auto full_run = train(r.cfg, r.data.seqs, ids, full);

  for (std::int64_t stop : {1, 2, 4}) {
    Denoiser first = r.fresh();
    TrainOptions o1;
    o1.stop_after_step = stop;
    const auto partial = train(r.cfg, r.data.seqs, ids, first, o1);
    CHECK(partial.state.step == stop);
    // Through serialization, as a real resume would go.
    const Checkpoint ck = deserialize_checkpoint(serialize_checkpoint(partial.checkpoint));
    Denoiser second = r.fresh();
    TrainOptions o2;
    o2.resume = &ck;
    const auto rest = train(r.cfg, r.data.seqs, ids, second, o2);
    CHECK_MESSAGE(same_params(second, full), "stop after " << stop);
    CHECK(rest.state.step == full_run.state.step);
    CHECK(rest.checkpoint.optimizer == full_run.checkpoint.optimizer);
  }
}

TEST_CASE("run directory outputs") {
  Run r;
  r.cfg.checkpoint_every = 2;
  const auto dir = std::filesystem::temp_directory_path() / "mdlm_trainer_test";
  std::filesystem::remove_all(dir);
  Denoiser m = r.fresh();
  TrainOptions o;
  o.out_dir = dir;
  train(r.cfg, r.data.seqs, special_ids(r.data.vocab), m, o);
  CHECK(std::filesystem::exists(dir / "manifest.json"));
  CHECK(std::filesystem::exists(dir / "checkpoints" / "final.ckpt"));
  CHECK(std::filesystem::exists(dir / "checkpoints" / "step_0000002.ckpt"));
  std::ifstream steps(dir / "steps.jsonl");
  int lines = 0;
  for (std::string line; std::getline(steps, line);) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("regime"));
    ++lines;
  }
  CHECK(lines == 6);
  std::ifstream epochs(dir / "epochs.csv");
  int rows = 0;
  for (std::string line; std::getline(epochs, line);) ++rows;
  CHECK(rows == 4);  // header + 3 epochs
  const Denoiser loaded = model_from_checkpoint(load_checkpoint(dir / "checkpoints" / "final.ckpt"));
  CHECK(same_params(loaded, m));
  std::filesystem::remove_all(dir);
}

TEST_CASE("out-of-vocabulary ids are rejected") {
  Run r;
  auto seqs = r.data.seqs;
  seqs[0].ids[0] = 999;
  Denoiser m = r.fresh();
  CHECK_THROWS_AS(train(r.cfg, seqs, special_ids(r.data.vocab), m), MismatchError);
}
