#include "mdlm/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "mdlm/errors.hpp"

namespace mdlm {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
    throw ConfigError("beta1 and beta2 must lie in (0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (!(max_grad_norm > 0.0)) throw ConfigError("max_grad_norm must be positive");
  if (grad_accum_steps < 1) throw ConfigError("grad_accum_steps must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be positive");
  for (const auto& [name, lr] : objective_learning_rates) {
    parse_objective(name);
    if (!(lr > 0.0)) throw ConfigError("learning rate for " + name + " must be positive");
  }
  objective.validate();
}

double TrainConfig::base_learning_rate() const {
  const auto it = objective_learning_rates.find(objective_name(objective.kind));
  return it == objective_learning_rates.end() ? learning_rate : it->second;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate},
          {"beta1", beta1},
          {"beta2", beta2},
          {"adam_eps", adam_eps},
          {"weight_decay", weight_decay},
          {"max_grad_norm", max_grad_norm},
          {"grad_accum_steps", grad_accum_steps},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"seed", seed},
          {"checkpoint_every", checkpoint_every},
          {"objective", objective.to_json()},
          {"objective_learning_rates", objective_learning_rates}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "learning_rate") c.learning_rate = value.get<double>();
    else if (key == "beta1") c.beta1 = value.get<double>();
    else if (key == "beta2") c.beta2 = value.get<double>();
    else if (key == "adam_eps") c.adam_eps = value.get<double>();
    else if (key == "weight_decay") c.weight_decay = value.get<double>();
    else if (key == "max_grad_norm") c.max_grad_norm = value.get<double>();
    else if (key == "grad_accum_steps") c.grad_accum_steps = value.get<int>();
    else if (key == "batch_size") c.batch_size = value.get<int>();
    else if (key == "epochs") c.epochs = value.get<int>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "checkpoint_every") c.checkpoint_every = value.get<int>();
    else if (key == "objective") c.objective = ObjectiveSpec::from_json(value, c.objective);
    else if (key == "objective_learning_rates")
      c.objective_learning_rates = value.get<std::map<std::string, double>>();
    else throw ConfigError("unknown key train." + key);
  }
  c.validate();
  return c;
}

double linear_schedule(double base_lr, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return 0.0;
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * std::max(0.0, frac);
}

double clip_global_norm(std::span<Tensor<double>> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.data().squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& g : grads) g.data() *= scale;
  }
  return norm;
}

double adam_step(std::span<Var<double>> params, std::span<Tensor<double>> grads,
                 OptimizerState& state, const TrainConfig& config, double learning_rate) {
  if (params.size() != grads.size()) throw ContractError("adam_step: params/grads count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape()) {
      throw ContractError("adam_step: gradient shape " + shape_string(grads[i].shape()) +
                          " does not match parameter " + shape_string(params[i].shape()));
    }
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.shape());
      state.second_moment.emplace_back(p.shape());
    }
  } else if (state.first_moment.size() != params.size()) {
    throw ContractError("adam_step: optimizer state does not match parameters");
  }
  const double norm = clip_global_norm(grads, config.max_grad_norm);
  ++state.step;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  const double step_size = learning_rate / bc1;
  const double sqrt_bc2 = std::sqrt(bc2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first_moment[i].data();
    auto& v = state.second_moment[i].data();
    const auto& g = grads[i].data();
    auto& p = params[i].mutable_value().data();
    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseProduct(g);
    p *= 1.0 - learning_rate * config.weight_decay;
    p.array() -= step_size * m.array() / (v.array().sqrt() / sqrt_bc2 + config.adam_eps);
  }
  return norm;
}

nlohmann::json StepRecord::to_json() const {
  return {{"step", step},
          {"epoch", epoch},
          {"t", t_mean},
          {"rho", rho_mean},
          {"regime", {{"bottom", regime_counts[0]}, {"vanilla", regime_counts[1]}, {"top", regime_counts[2]}}},
          {"loss", loss},
          {"grad_norm", grad_norm},
          {"lr", learning_rate},
          {"examples", examples},
          {"skipped_examples", skipped_examples},
          {"skipped", skipped},
          {"forward_passes", forward_passes}};
}

nlohmann::json TrainerState::to_json() const {
  return {{"epoch", epoch}, {"micro_batch", micro_batch}, {"step", step}, {"rng", rng_states}};
}

TrainerState TrainerState::from_json(const nlohmann::json& j) {
  try {
    TrainerState s;
    s.epoch = j.at("epoch").get<int>();
    s.micro_batch = j.at("micro_batch").get<int>();
    s.step = j.at("step").get<std::int64_t>();
    s.rng_states = j.at("rng").get<std::vector<std::string>>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed trainer state: ") + e.what());
  }
}

nlohmann::json RunManifest::to_json() const {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : records) recs.push_back(r.to_json());
  std::ostringstream vh, ch;
  vh << std::hex << std::setw(16) << std::setfill('0') << vocab_hash;
  ch << std::hex << std::setw(16) << std::setfill('0') << corpus_hash;
  return {{"config", config},
          {"vocab_hash", vh.str()},
          {"corpus_hash", ch.str()},
          {"code_version", code_version},
          {"records", recs}};
}

std::int64_t total_optimizer_steps(const TrainConfig& config, std::size_t dataset_size) {
  const std::int64_t micro = (static_cast<std::int64_t>(dataset_size) + config.batch_size - 1) /
                             config.batch_size;
  const std::int64_t per_epoch = (micro + config.grad_accum_steps - 1) / config.grad_accum_steps;
  return per_epoch * config.epochs;
}

namespace {

struct EpochSummary {
  int steps = 0;
  int skipped = 0;
  double loss_sum = 0.0;
  double norm_sum = 0.0;
};

void append_epoch_csv(const std::filesystem::path& path, int epoch, const EpochSummary& s) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream os(path, std::ios::app);
  if (!os) throw IoError("cannot write " + path.string());
  if (fresh) os << "epoch,steps,skipped_steps,mean_loss,mean_grad_norm\n";
  const int counted = s.steps - s.skipped;
  os << epoch << ',' << s.steps << ',' << s.skipped << ','
     << std::setprecision(17) << (counted ? s.loss_sum / counted : 0.0) << ','
     << (counted ? s.norm_sum / counted : 0.0) << '\n';
}

}  // namespace

TrainResult train(const TrainConfig& config, std::span<const TokenSequence> data, SpecialIds ids,
                  Denoiser& model, const TrainOptions& options) {
  config.validate();
  if (data.empty()) throw IngestionError("training corpus is empty");
  for (const auto& seq : data) {
    for (int id : seq.ids) {
      if (id < 0 || id >= model.config().vocab_size) {
        throw MismatchError("corpus token id " + std::to_string(id) +
                            " is outside the model vocabulary");
      }
    }
  }

  RngStreams rngs(config.seed);
  TrainerState state;
  OptimizerState optimizer;
  if (options.resume) {
    const Checkpoint& ck = *options.resume;
    if (!(ck.config == model.config())) throw MismatchError("checkpoint model config differs");
    auto& params = model.parameters();
    if (ck.tensors.size() != params.size()) throw CheckpointError("checkpoint parameter count differs");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (ck.names[i] != params[i].name || ck.tensors[i].shape() != params[i].var.shape()) {
        throw CheckpointError("checkpoint tensor " + ck.names[i] + " does not match the model");
      }
      params[i].var.mutable_value() = ck.tensors[i];
    }
    optimizer = ck.optimizer;
    state = TrainerState::from_json(nlohmann::json::parse(ck.trainer_state));
    rngs.set_states(state.rng_states);
  }

  const std::int64_t total_steps = total_optimizer_steps(config, data.size());
  const std::uint64_t order_seed = derive_seed(config.seed, "data_order");
  const double base_lr = config.base_learning_rate();
  std::vector<Var<double>> params = model.parameter_vars();

  TrainResult result;
  result.manifest.config = options.manifest_config.is_null() ? config.to_json() : options.manifest_config;
  result.manifest.vocab_hash = options.vocab_hash;
  result.manifest.corpus_hash = options.corpus_hash;

  std::ofstream step_log;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir / "checkpoints");
    step_log.open(*options.out_dir / "steps.jsonl", options.resume ? std::ios::app : std::ios::trunc);
    if (!step_log) throw IoError("cannot open step log in " + options.out_dir->string());
    if (!options.resume) std::filesystem::remove(*options.out_dir / "epochs.csv");
  }

  auto snapshot = [&]() {
    state.rng_states = rngs.states();
    return make_checkpoint(model, optimizer, state.to_json().dump());
  };

  const ObjectiveContext ctx{ids, true, &rngs.dropout};
  bool stopped = false;
  while (state.epoch < config.epochs && !stopped) {
    const auto batches = make_batches(data, config.batch_size, order_seed, ids.pad_id, state.epoch);
    EpochSummary summary;
    while (state.micro_batch < static_cast<int>(batches.size())) {
      const int group_end =
          std::min<int>(static_cast<int>(batches.size()), state.micro_batch + config.grad_accum_steps);
      model.zero_grad();
      const auto passes_before = model.forward_passes();
      StepRecord rec;
      rec.epoch = state.epoch;
      double loss_sum = 0.0;
      int counted = 0;
      for (int mb = state.micro_batch; mb < group_end; ++mb) {
        const Batch& batch = batches[mb];
        std::vector<TimestepDraw> draws;
        draws.reserve(batch.sequences.size());
        for (std::size_t i = 0; i < batch.sequences.size(); ++i) {
          draws.push_back(sample_timestep(config.objective.rho, rngs.timestep, rngs.rho,
                                          config.objective.t_min));
          rec.t_mean += draws.back().t;
          rec.rho_mean += draws.back().rho;
        }
        const LossValue lv = compute_objective(model, batch.sequences, draws, config.objective,
                                               rngs.masking, rngs.selection, ctx);
        for (const auto& e : lv.examples) {
          if (e.has_regime) ++rec.regime_counts[static_cast<int>(e.regime)];
        }
        rec.examples += static_cast<int>(lv.examples.size());
        rec.skipped_examples += lv.skipped;
        if (lv.counted > 0) {
          backward(lv.total);
          loss_sum += lv.total.value().item();
          counted += lv.counted;
        }
      }
      state.micro_batch = group_end;
      rec.t_mean /= rec.examples;
      rec.rho_mean /= rec.examples;
      rec.step = state.step;
      rec.learning_rate = linear_schedule(base_lr, state.step, total_steps);

      if (counted == 0) {
        rec.skipped = true;
      } else {
        rec.loss = loss_sum / counted;
        std::vector<Tensor<double>> grads;
        grads.reserve(params.size());
        bool finite = std::isfinite(rec.loss);
        for (const auto& p : params) {
          grads.push_back(p.grad());
          grads.back().data() /= static_cast<double>(counted);
          finite = finite && grads.back().all_finite();
        }
        if (!finite) {
          rec.grad_norm = std::numeric_limits<double>::quiet_NaN();
          if (step_log) step_log << rec.to_json().dump() << '\n' << std::flush;
          throw NumericError("non-finite loss or gradient at step " + std::to_string(state.step) +
                             " (loss " + std::to_string(rec.loss) + ")");
        }
        rec.grad_norm = adam_step(params, grads, optimizer, config, rec.learning_rate);
      }
      rec.forward_passes = model.forward_passes() - passes_before;
      ++state.step;

      ++summary.steps;
      if (rec.skipped) {
        ++summary.skipped;
      } else {
        summary.loss_sum += rec.loss;
        summary.norm_sum += rec.grad_norm;
      }
      result.manifest.records.push_back(rec);
      if (step_log) step_log << rec.to_json().dump() << '\n';
      if (options.on_step) options.on_step(rec);
      if (options.out_dir && state.step % config.checkpoint_every == 0) {
        std::ostringstream name;
        name << "step_" << std::setw(7) << std::setfill('0') << state.step << ".ckpt";
        save_checkpoint(*options.out_dir / "checkpoints" / name.str(), snapshot());
      }
      if (options.stop_after_step >= 0 && state.step >= options.stop_after_step) {
        stopped = true;
        break;
      }
    }
    if (options.out_dir) append_epoch_csv(*options.out_dir / "epochs.csv", state.epoch, summary);
    if (!stopped) {
      ++state.epoch;
      state.micro_batch = 0;
    }
  }

  result.checkpoint = snapshot();
  result.state = state;
  if (options.out_dir) {
    save_checkpoint(*options.out_dir / "checkpoints" / "final.ckpt", result.checkpoint);
    std::ofstream os(*options.out_dir / "manifest.json");
    if (!os) throw IoError("cannot write manifest");
    os << result.manifest.to_json().dump(2) << '\n';
  }
  return result;
}

}  // namespace mdlm
