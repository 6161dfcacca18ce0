#pragma once

// Training objectives over a batch of clean sequences.
//
// Every objective ends in the same weighted masked cross-entropy,
//     loss_i = w_i * sum_{k in S_i} c_k * -log p(x0_k | input_i)
// and differs in how the loss input, the supervised set S_i, the example
// weight w_i and the per-position weights c_k are built:
//
//   vanilla   input x_t, S = M_t, w = 1/t, c = 1
//   lift      probe x_{t+rho}; S from select_subset on probe confidences;
//             input x_t = probe with M_{t+rho} \ S restored; w = 1/t
//   lift_a    one pass on x_{t+rho}; S as lift; w = 1/(t+rho)
//   top_k, bottom_k, random2, random3
//             as lift with the regime fixed or drawn per step
//   gift      probe x_1; mask with q_k ~ entropy_k^e scaled so that
//             sum q_k = t * response_len; S = realized mask; w = 1/t
//   cart      input x_t, S = M_t, w = 1/t, c_k = fraction of unmasked
//             non-padding neighbours within +-window
//
// The batch loss is the mean of loss_i over examples whose S is non-empty;
// examples with an empty S are counted as skipped.

#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdlm/denoiser.hpp"
#include "mdlm/diffusion.hpp"

namespace mdlm {

enum class ObjectiveKind { kVanilla, kLift, kLiftA, kTopK, kBottomK, kRandom2, kRandom3, kGift, kCart };
enum class Regime { kBottom, kVanilla, kTop };

std::string objective_name(ObjectiveKind kind);
ObjectiveKind parse_objective(std::string_view name);
std::string regime_name(Regime regime);

// Objectives that run a confidence probe before the loss pass.
bool uses_selection(ObjectiveKind kind);

struct ObjectiveSpec {
  ObjectiveKind kind = ObjectiveKind::kVanilla;
  int H = 3;
  RhoStrategy rho;
  int cart_window = 8;
  double gift_exponent = 0.5;
  double t_min = kDefaultTMin;

  void validate() const;
  nlohmann::json to_json() const;
  static ObjectiveSpec from_json(const nlohmann::json& j, ObjectiveSpec base);
  static ObjectiveSpec from_json(const nlohmann::json& j) { return from_json(j, ObjectiveSpec()); }
};

// t < 1/H: bottom; 1/H <= t < 1 - 1/H: vanilla; t >= 1 - 1/H: top.
Regime regime_for(double t, int H);

// K = floor(t * response_len), clamped to [0, candidates].
int selection_budget(double t, int response_len, std::size_t candidates);

struct SelectionResult {
  std::vector<int> selected;  // ascending positions
  Regime regime = Regime::kVanilla;
  int K = 0;
  std::map<int, double> confidences;
};

// Top/bottom regimes take the K highest/lowest confidences, ties going to
// the lower position. The vanilla regime keeps each candidate independently
// with probability t / (t + rho), which is masking at rate t restricted to
// the probe's mask set, and returns every candidate when rho = 0.
SelectionResult select_in_regime(Regime regime, std::span<const int> candidates,
                                 std::span<const double> confidences, double t, double rho,
                                 int response_len, RngStream& rng);
SelectionResult select_subset(std::span<const int> candidates, std::span<const double> confidences,
                              double t, int H, int response_len, RngStream& rng, double rho = 0.0);

// Water-filled masking probabilities proportional to entropy^exponent with
// sum equal to t * n (capped at 1 each).
std::vector<double> gift_mask_probabilities(std::span<const double> entropies, double t,
                                            double exponent);

// Per masked position: unmasked fraction of its realizable neighbourhood.
std::map<int, double> cart_weights(const CorruptedSequence& corrupted, const TokenSequence& clean,
                                   int window, int mask_id, int pad_id);

// -sum_rows weight[r] * log_probs[r, target[r]] over a [B, T, V] tensor.
// Rows with zero weight never touch their target.
Var<double> weighted_nll(const Var<double>& log_probs, std::span<const int> targets,
                         std::span<const double> weights);

struct ExampleLoss {
  double t = 0.0;
  double rho = 0.0;
  double weight = 0.0;  // 1/t, or 1/(t+rho) for lift_a
  bool has_regime = false;
  Regime regime = Regime::kVanilla;
  int K = 0;
  bool skipped = false;
  std::vector<int> probe_ids;   // x_{t+rho} or x_1 when a probe is used
  std::vector<int> candidates;  // probe mask set
  std::map<int, double> confidences;
  std::vector<int> input_ids;   // loss-pass input
  std::vector<int> supervised;  // S
  std::map<int, double> position_weights;
  std::map<int, double> nll;    // -log p at supervised positions
  double loss = 0.0;            // weight * sum position_weight * nll
};

struct LossValue {
  Var<double> total;  // sum of non-skipped example losses
  Var<double> mean;   // total / counted, or 0 when every example was skipped
  std::vector<ExampleLoss> examples;
  int counted = 0;
  int skipped = 0;

  double value() const { return mean.value().item(); }
};

struct ObjectiveContext {
  SpecialIds ids;
  bool train = true;               // loss pass in training mode
  RngStream* dropout_rng = nullptr;
};

// Sequences must share one length (see pad_to_common_length).
LossValue compute_objective(const Denoiser& model, std::span<const TokenSequence> batch,
                            std::span<const TimestepDraw> draws, const ObjectiveSpec& spec,
                            RngStream& masking, RngStream& selection, const ObjectiveContext& ctx);

// Forward on `input_ids` then weighted_nll; the loss stage shared by every
// objective.
Var<double> supervised_loss(const Denoiser& model, std::span<const int> input_ids, int batch,
                            int seq_len, std::span<const int> targets,
                            std::span<const double> weights, const ObjectiveContext& ctx);

// Single-example forms.
LossValue nelbo_vanilla(const Denoiser& model, const TokenSequence& clean, double t,
                        RngStream& masking, const ObjectiveContext& ctx);
LossValue loss_lift(const Denoiser& model, const TokenSequence& clean, TimestepDraw draw, int H,
                    RngStream& masking, RngStream& selection, const ObjectiveContext& ctx);
LossValue loss_lift_a(const Denoiser& model, const TokenSequence& clean, TimestepDraw draw, int H,
                      RngStream& masking, RngStream& selection, const ObjectiveContext& ctx);
LossValue loss_ablation(ObjectiveKind kind, const Denoiser& model, const TokenSequence& clean,
                        TimestepDraw draw, RngStream& masking, RngStream& selection,
                        const ObjectiveContext& ctx);
LossValue loss_gift(const Denoiser& model, const TokenSequence& clean, double t, RngStream& masking,
                    const ObjectiveContext& ctx, double exponent = 0.5);
LossValue loss_cart(const Denoiser& model, const TokenSequence& clean, double t, RngStream& masking,
                    const ObjectiveContext& ctx, int window = 8);

}  // namespace mdlm
