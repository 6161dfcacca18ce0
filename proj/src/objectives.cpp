#include "mdlm/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mdlm/errors.hpp"

namespace mdlm {

std::string objective_name(ObjectiveKind kind) {
  switch (kind) {
    case ObjectiveKind::kVanilla: return "vanilla";
    case ObjectiveKind::kLift: return "lift";
    case ObjectiveKind::kLiftA: return "lift_a";
    case ObjectiveKind::kTopK: return "top_k";
    case ObjectiveKind::kBottomK: return "bottom_k";
    case ObjectiveKind::kRandom2: return "random2";
    case ObjectiveKind::kRandom3: return "random3";
    case ObjectiveKind::kGift: return "gift";
    case ObjectiveKind::kCart: return "cart";
  }
  throw ConfigError("unknown objective");
}

ObjectiveKind parse_objective(std::string_view name) {
  for (auto kind : {ObjectiveKind::kVanilla, ObjectiveKind::kLift, ObjectiveKind::kLiftA,
                    ObjectiveKind::kTopK, ObjectiveKind::kBottomK, ObjectiveKind::kRandom2,
                    ObjectiveKind::kRandom3, ObjectiveKind::kGift, ObjectiveKind::kCart}) {
    if (objective_name(kind) == name) return kind;
  }
  throw ConfigError("unknown objective kind '" + std::string(name) + "'");
}

std::string regime_name(Regime regime) {
  switch (regime) {
    case Regime::kBottom: return "bottom";
    case Regime::kVanilla: return "vanilla";
    case Regime::kTop: return "top";
  }
  return "?";
}

bool uses_selection(ObjectiveKind kind) {
  switch (kind) {
    case ObjectiveKind::kLift:
    case ObjectiveKind::kLiftA:
    case ObjectiveKind::kTopK:
    case ObjectiveKind::kBottomK:
    case ObjectiveKind::kRandom2:
    case ObjectiveKind::kRandom3: return true;
    default: return false;
  }
}

void ObjectiveSpec::validate() const {
  if (H < 2) throw ConfigError("H must be >= 2, got " + std::to_string(H));
  if (cart_window < 1) throw ConfigError("cart_window must be positive");
  if (!std::isfinite(gift_exponent) || gift_exponent < 0.0) {
    throw ConfigError("gift_exponent must be a finite non-negative number");
  }
  if (!(t_min > 0.0 && t_min < 1.0)) throw ConfigError("t_min must lie in (0, 1)");
  rho.validate();
}

nlohmann::json ObjectiveSpec::to_json() const {
  return {{"kind", objective_name(kind)}, {"H", H},
          {"rho", rho.to_json()},         {"cart_window", cart_window},
          {"gift_exponent", gift_exponent}, {"t_min", t_min}};
}

ObjectiveSpec ObjectiveSpec::from_json(const nlohmann::json& j, ObjectiveSpec s) {
  for (const auto& [key, value] : j.items()) {
    if (key == "kind") s.kind = parse_objective(value.get<std::string>());
    else if (key == "H") s.H = value.get<int>();
    else if (key == "rho") s.rho = RhoStrategy::from_json(value);
    else if (key == "cart_window") s.cart_window = value.get<int>();
    else if (key == "gift_exponent") s.gift_exponent = value.get<double>();
    else if (key == "t_min") s.t_min = value.get<double>();
    else throw ConfigError("unknown key train.objective." + key);
  }
  s.validate();
  return s;
}

Regime regime_for(double t, int H) {
  if (H < 2) throw ConfigError("H must be >= 2");
  const double lower = 1.0 / H;
  const double upper = 1.0 - 1.0 / H;
  if (t < lower) return Regime::kBottom;
  if (t < upper) return Regime::kVanilla;
  return Regime::kTop;
}

int selection_budget(double t, int response_len, std::size_t candidates) {
  const auto k = static_cast<long long>(std::floor(t * response_len));
  return static_cast<int>(std::clamp<long long>(k, 0, static_cast<long long>(candidates)));
}

SelectionResult select_in_regime(Regime regime, std::span<const int> candidates,
                                 std::span<const double> confidences, double t, double rho,
                                 int response_len, RngStream& rng) {
  if (candidates.size() != confidences.size()) {
    throw ContractError("select_subset: one confidence per candidate required");
  }
  SelectionResult out;
  out.regime = regime;
  out.K = selection_budget(t, response_len, candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) out.confidences[candidates[i]] = confidences[i];

  if (regime == Regime::kVanilla) {
    const double keep = t / (t + rho);
    for (int pos : candidates) {
      if (rng.bernoulli(keep)) out.selected.push_back(pos);
    }
  } else {
    std::vector<std::size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const bool top = regime == Regime::kTop;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (confidences[a] != confidences[b]) {
        return top ? confidences[a] > confidences[b] : confidences[a] < confidences[b];
      }
      return candidates[a] < candidates[b];
    });
    for (int i = 0; i < out.K; ++i) out.selected.push_back(candidates[order[i]]);
  }
  std::sort(out.selected.begin(), out.selected.end());
  return out;
}

SelectionResult select_subset(std::span<const int> candidates, std::span<const double> confidences,
                              double t, int H, int response_len, RngStream& rng, double rho) {
  return select_in_regime(regime_for(t, H), candidates, confidences, t, rho, response_len, rng);
}

std::vector<double> gift_mask_probabilities(std::span<const double> entropies, double t,
                                            double exponent) {
  const std::size_t n = entropies.size();
  std::vector<double> q(n, t);
  if (n == 0) return q;
  std::vector<double> score(n);
  for (std::size_t i = 0; i < n; ++i) score[i] = std::pow(std::max(0.0, entropies[i]), exponent);
  const double target = t * static_cast<double>(n);
  std::vector<bool> capped(n, false);
  // Raise the scale until the uncapped mass absorbs what the capped
  // positions cannot; at most n rounds.
  for (std::size_t round = 0; round <= n; ++round) {
    double free_score = 0.0;
    std::size_t n_capped = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (capped[i]) ++n_capped;
      else free_score += score[i];
    }
    const double remaining = target - static_cast<double>(n_capped);
    if (free_score <= 0.0) {
      // Nothing left to scale: spread the remainder evenly over zero-score slots.
      std::size_t open = 0;
      for (std::size_t i = 0; i < n; ++i) open += capped[i] ? 0 : 1;
      for (std::size_t i = 0; i < n; ++i) {
        q[i] = capped[i] ? 1.0 : (open ? std::clamp(remaining / open, 0.0, 1.0) : 0.0);
      }
      return q;
    }
    const double scale = remaining / free_score;
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (capped[i]) {
        q[i] = 1.0;
        continue;
      }
      q[i] = scale * score[i];
      if (q[i] > 1.0) {
        capped[i] = true;
        changed = true;
      }
    }
    if (!changed) return q;
  }
  return q;
}

std::map<int, double> cart_weights(const CorruptedSequence& corrupted, const TokenSequence& clean,
                                   int window, int mask_id, int pad_id) {
  if (window < 1) throw ConfigError("cart window must be positive");
  std::map<int, double> out;
  const int len = clean.length();
  for (int pos : corrupted.mask_set) {
    int realizable = 0, unmasked = 0;
    for (int j = std::max(0, pos - window); j <= std::min(len - 1, pos + window); ++j) {
      if (j == pos || clean.ids[j] == pad_id) continue;
      ++realizable;
      if (corrupted.ids[j] != mask_id) ++unmasked;
    }
    out[pos] = realizable ? static_cast<double>(unmasked) / realizable : 0.0;
  }
  return out;
}

Var<double> weighted_nll(const Var<double>& log_probs, std::span<const int> targets,
                         std::span<const double> weights) {
  const Index rows = log_probs.value().rows();
  if (static_cast<Index>(targets.size()) != rows || static_cast<Index>(weights.size()) != rows) {
    throw ShapeError("weighted_nll: targets/weights do not match " +
                     shape_string(log_probs.shape()));
  }
  std::vector<Index> idx(rows);
  Shape row_shape(log_probs.shape().begin(), log_probs.shape().end() - 1);
  Tensor<double> w(row_shape);
  for (Index r = 0; r < rows; ++r) {
    idx[r] = weights[r] != 0.0 ? targets[r] : 0;
    w[r] = -weights[r];
  }
  return sum(mul(gather(log_probs, std::span<const Index>(idx)),
                 Var<double>::constant(std::move(w))));
}

Var<double> supervised_loss(const Denoiser& model, std::span<const int> input_ids, int batch,
                            int seq_len, std::span<const int> targets,
                            std::span<const double> weights, const ObjectiveContext& ctx) {
  const auto log_probs =
      model.forward(input_ids, batch, seq_len, ForwardOptions{ctx.train, ctx.dropout_rng, ctx.ids.pad_id});
  return weighted_nll(log_probs, targets, weights);
}

namespace {

std::vector<int> flatten(const std::vector<std::vector<int>>& rows) {
  std::vector<int> out;
  for (const auto& r : rows) out.insert(out.end(), r.begin(), r.end());
  return out;
}

// No-grad evaluation-mode forward over probe inputs.
Tensor<double> probe_forward(const Denoiser& model, const std::vector<std::vector<int>>& probes,
                             int seq_len, int pad_id) {
  NoGradGuard no_grad;
  const auto ids = flatten(probes);
  return model.forward(ids, static_cast<int>(probes.size()), seq_len,
                       ForwardOptions{false, nullptr, pad_id})
      .value();
}

Regime regime_of(ObjectiveKind kind, double t, int H, RngStream& selection) {
  switch (kind) {
    case ObjectiveKind::kLift:
    case ObjectiveKind::kLiftA: return regime_for(t, H);
    case ObjectiveKind::kTopK: return Regime::kTop;
    case ObjectiveKind::kBottomK: return Regime::kBottom;
    case ObjectiveKind::kRandom2: return selection.below(2) == 0 ? Regime::kTop : Regime::kBottom;
    case ObjectiveKind::kRandom3: {
      static constexpr Regime kChoices[] = {Regime::kTop, Regime::kBottom, Regime::kVanilla};
      return kChoices[selection.below(3)];
    }
    default: throw ContractError("objective has no selection regime");
  }
}

}  // namespace

LossValue compute_objective(const Denoiser& model, std::span<const TokenSequence> batch,
                            std::span<const TimestepDraw> draws, const ObjectiveSpec& spec,
                            RngStream& masking, RngStream& selection, const ObjectiveContext& ctx) {
  spec.validate();
  if (batch.empty()) throw ContractError("compute_objective: empty batch");
  if (draws.size() != batch.size()) throw ContractError("compute_objective: one draw per example");
  const int B = static_cast<int>(batch.size());
  const int T = batch.front().length();
  for (const auto& s : batch) {
    if (s.length() != T) throw ShapeError("compute_objective: batch is not padded to one length");
  }
  const int mask_id = ctx.ids.mask_id;

  LossValue out;
  out.examples.resize(B);
  for (int i = 0; i < B; ++i) {
    const double t = draws[i].t;
    if (!(t > 0.0 && t <= 1.0)) throw ContractError("diffusion time must lie in (0, 1]");
    if (draws[i].rho < 0.0 || draws[i].rho > 1.0 - t + 1e-12) {
      throw ContractError("secondary ratio must lie in [0, 1 - t]");
    }
    out.examples[i].t = t;
    out.examples[i].rho = draws[i].rho;
  }

  std::vector<CorruptedSequence> probes(B);
  Var<double> shared_pass;  // lift_a: probe and loss share one pass

  switch (spec.kind) {
    case ObjectiveKind::kVanilla:
    case ObjectiveKind::kCart: {
      for (int i = 0; i < B; ++i) {
        auto& e = out.examples[i];
        const auto x = corrupt(batch[i], e.t, mask_id, masking);
        e.input_ids = x.ids;
        e.supervised = x.mask_set;
        e.weight = 1.0 / e.t;
        if (spec.kind == ObjectiveKind::kCart) {
          e.position_weights = cart_weights(x, batch[i], spec.cart_window, mask_id, ctx.ids.pad_id);
        } else {
          for (int pos : e.supervised) e.position_weights[pos] = 1.0;
        }
      }
      break;
    }
    case ObjectiveKind::kGift: {
      std::vector<std::vector<int>> probe_ids(B);
      for (int i = 0; i < B; ++i) {
        probes[i] = fully_masked(batch[i], mask_id);
        probe_ids[i] = probes[i].ids;
      }
      const Tensor<double> lp = probe_forward(model, probe_ids, T, ctx.ids.pad_id);
      const auto lpm = lp.matrix();
      for (int i = 0; i < B; ++i) {
        auto& e = out.examples[i];
        const auto& clean = batch[i];
        std::vector<double> entropy(clean.response_len);
        for (int r = 0; r < clean.response_len; ++r) {
          const auto row = lpm.row(static_cast<Index>(i) * T + clean.response_begin() + r);
          entropy[r] = -(row.array().exp() * row.array()).sum();
        }
        const auto q = gift_mask_probabilities(entropy, e.t, spec.gift_exponent);
        const auto x = corrupt_with_probabilities(clean, q, mask_id, masking, e.t);
        e.probe_ids = probes[i].ids;
        e.candidates = probes[i].mask_set;
        e.input_ids = x.ids;
        e.supervised = x.mask_set;
        e.weight = 1.0 / e.t;
        for (int pos : e.supervised) e.position_weights[pos] = 1.0;
      }
      break;
    }
    default: {
      // Probe at t + rho, confidences, selection.
      std::vector<std::vector<int>> probe_ids(B);
      for (int i = 0; i < B; ++i) {
        const double rate = std::min(1.0, out.examples[i].t + out.examples[i].rho);
        probes[i] = corrupt(batch[i], rate, mask_id, masking);
        probe_ids[i] = probes[i].ids;
      }
      Tensor<double> lp;
      if (spec.kind == ObjectiveKind::kLiftA) {
        const auto ids = flatten(probe_ids);
        shared_pass = model.forward(ids, B, T, ForwardOptions{ctx.train, ctx.dropout_rng, ctx.ids.pad_id});
        lp = shared_pass.value();
      } else {
        lp = probe_forward(model, probe_ids, T, ctx.ids.pad_id);
      }
      const auto lpm = lp.matrix();
      for (int i = 0; i < B; ++i) {
        auto& e = out.examples[i];
        const auto& clean = batch[i];
        const auto& cand = probes[i].mask_set;
        std::vector<double> conf(cand.size());
        for (std::size_t c = 0; c < cand.size(); ++c) {
          conf[c] = std::exp(lpm(static_cast<Index>(i) * T + cand[c], clean.ids[cand[c]]));
        }
        const Regime regime = regime_of(spec.kind, e.t, spec.H, selection);
        auto sel = select_in_regime(regime, cand, conf, e.t, e.rho, clean.response_len, selection);
        e.has_regime = true;
        e.regime = regime;
        e.K = sel.K;
        e.probe_ids = probes[i].ids;
        e.candidates = cand;
        e.confidences = std::move(sel.confidences);
        e.supervised = std::move(sel.selected);
        for (int pos : e.supervised) e.position_weights[pos] = 1.0;
        if (spec.kind == ObjectiveKind::kLiftA) {
          e.input_ids = probes[i].ids;
          e.weight = 1.0 / (e.t + e.rho);
        } else {
          std::vector<int> restore;
          std::set_difference(cand.begin(), cand.end(), e.supervised.begin(), e.supervised.end(),
                              std::back_inserter(restore));
          e.input_ids = unmask_positions(probes[i], clean, restore).ids;
          e.weight = 1.0 / e.t;
        }
      }
      break;
    }
  }

  // Loss stage.
  std::vector<int> inputs, targets;
  std::vector<double> weights(static_cast<std::size_t>(B) * T, 0.0);
  inputs.reserve(weights.size());
  targets.reserve(weights.size());
  for (int i = 0; i < B; ++i) {
    auto& e = out.examples[i];
    e.skipped = e.supervised.empty();
    inputs.insert(inputs.end(), e.input_ids.begin(), e.input_ids.end());
    targets.insert(targets.end(), batch[i].ids.begin(), batch[i].ids.end());
    if (e.skipped) continue;
    for (int pos : e.supervised) {
      weights[static_cast<std::size_t>(i) * T + pos] = e.weight * e.position_weights.at(pos);
    }
  }
  const Var<double> log_probs =
      shared_pass.defined()
          ? shared_pass
          : model.forward(inputs, B, T, ForwardOptions{ctx.train, ctx.dropout_rng, ctx.ids.pad_id});
  out.total = weighted_nll(log_probs, targets, weights);

  const auto lpm = log_probs.value().matrix();
  for (int i = 0; i < B; ++i) {
    auto& e = out.examples[i];
    if (e.skipped) {
      ++out.skipped;
      continue;
    }
    ++out.counted;
    double acc = 0.0;
    for (int pos : e.supervised) {
      const double nll = -lpm(static_cast<Index>(i) * T + pos, batch[i].ids[pos]);
      e.nll[pos] = nll;
      acc += e.position_weights.at(pos) * nll;
    }
    e.loss = e.weight * acc;
  }
  out.mean = out.counted > 0 ? scalar_scale(out.total, 1.0 / out.counted)
                             : Var<double>::constant(Tensor<double>::Scalar0(0.0));
  return out;
}

namespace {
LossValue single(const Denoiser& model, const TokenSequence& clean, TimestepDraw draw,
                 const ObjectiveSpec& spec, RngStream& masking, RngStream& selection,
                 const ObjectiveContext& ctx) {
  return compute_objective(model, std::span<const TokenSequence>(&clean, 1),
                           std::span<const TimestepDraw>(&draw, 1), spec, masking, selection, ctx);
}
}  // namespace

LossValue nelbo_vanilla(const Denoiser& model, const TokenSequence& clean, double t,
                        RngStream& masking, const ObjectiveContext& ctx) {
  RngStream unused;
  return single(model, clean, {t, 0.0}, ObjectiveSpec{}, masking, unused, ctx);
}

LossValue loss_lift(const Denoiser& model, const TokenSequence& clean, TimestepDraw draw, int H,
                    RngStream& masking, RngStream& selection, const ObjectiveContext& ctx) {
  ObjectiveSpec spec;
  spec.kind = ObjectiveKind::kLift;
  spec.H = H;
  return single(model, clean, draw, spec, masking, selection, ctx);
}

LossValue loss_lift_a(const Denoiser& model, const TokenSequence& clean, TimestepDraw draw, int H,
                      RngStream& masking, RngStream& selection, const ObjectiveContext& ctx) {
  ObjectiveSpec spec;
  spec.kind = ObjectiveKind::kLiftA;
  spec.H = H;
  return single(model, clean, draw, spec, masking, selection, ctx);
}

LossValue loss_ablation(ObjectiveKind kind, const Denoiser& model, const TokenSequence& clean,
                        TimestepDraw draw, RngStream& masking, RngStream& selection,
                        const ObjectiveContext& ctx) {
  if (kind != ObjectiveKind::kTopK && kind != ObjectiveKind::kBottomK &&
      kind != ObjectiveKind::kRandom2 && kind != ObjectiveKind::kRandom3) {
    throw ConfigError("loss_ablation: not an ablation objective");
  }
  ObjectiveSpec spec;
  spec.kind = kind;
  return single(model, clean, draw, spec, masking, selection, ctx);
}

LossValue loss_gift(const Denoiser& model, const TokenSequence& clean, double t, RngStream& masking,
                    const ObjectiveContext& ctx, double exponent) {
  ObjectiveSpec spec;
  spec.kind = ObjectiveKind::kGift;
  spec.gift_exponent = exponent;
  RngStream unused;
  return single(model, clean, {t, 0.0}, spec, masking, unused, ctx);
}

LossValue loss_cart(const Denoiser& model, const TokenSequence& clean, double t, RngStream& masking,
                    const ObjectiveContext& ctx, int window) {
  ObjectiveSpec spec;
  spec.kind = ObjectiveKind::kCart;
  spec.cart_window = window;
  RngStream unused;
  return single(model, clean, {t, 0.0}, spec, masking, unused, ctx);
}

}  // namespace mdlm
