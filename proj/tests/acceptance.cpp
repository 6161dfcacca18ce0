// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mdlm/analysis.hpp"
#include "mdlm/errors.hpp"
#include "mdlm/objectives.hpp"
#include "mdlm/run_config.hpp"
#include "mdlm/sampler.hpp"
#include "mdlm/trainer.hpp"
#include "test_support.hpp"

using namespace mdlm;
using namespace mdlm::testing;

namespace {

// Tolerances and budgets.
constexpr double kEquivalenceRelTol = 1e-12;
constexpr double kScalarOracleRelTol = 1e-10;
constexpr double kGradRelTol = 1e-4;
constexpr double kGradStep = 1e-6;
constexpr int kGradDirections = 20;
constexpr double kSigmas = 3.0;
constexpr double kTrainAccuracy = 0.90;
constexpr double kMonteCarloTol = 0.02;
// Held-out prompts are few, so each is masked many times.
constexpr int kTrendSamplesPerExample = 200;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

double rel(double a, double b) { return rel_error(a, b); }

// A small model with weights large enough that confidences are well spread.
Denoiser spread_model(int vocab, int d_model, int layers, int max_len, std::uint64_t seed, double scale) {
  auto mc = tiny_model_config(vocab, d_model, layers, 2);
  mc.max_seq_len = max_len;
  Denoiser m(mc, seed);
  RngStream rng(seed, "spread");
  for (auto& p : m.parameters()) p.var.mutable_value().data() += random_tensor(p.var.shape(), rng, scale).data();
  return m;
}

// ---------------------------------------------------------------- 1
Outcome vanilla_equivalence() {
  const auto data = toy_data(Task::kAdditionCot, 64, 1);
  const Denoiser model = spread_model(data.vocab.size(), 16, 1, 64, 2, 0.2);
  const ObjectiveContext ctx{special_ids(data.vocab), false, nullptr};
  RngStream times(3), picks(4);
  double worst = 0.0;
  const int steps = 1000, batch = 4;
  for (int s = 0; s < steps; ++s) {
    std::vector<TokenSequence> b;
    std::vector<TimestepDraw> draws;
    for (int i = 0; i < batch; ++i) {
      b.push_back(data.seqs[picks.below(data.seqs.size())]);
      draws.push_back({times.uniform(kDefaultTMin, 1.0), 0.0});
    }
    std::vector<double> totals;
    for (auto kind : {ObjectiveKind::kVanilla, ObjectiveKind::kLift, ObjectiveKind::kLiftA}) {
      ObjectiveSpec spec;
      spec.kind = kind;
      spec.H = 1000000;
      RngStream masking(1000 + s), selection(5000 + s);
      totals.push_back(compute_objective(model, b, draws, spec, masking, selection, ctx).total.value().item());
    }
    worst = std::max({worst, rel(totals[1], totals[0]), rel(totals[2], totals[0])});
  }
  return {worst <= kEquivalenceRelTol, std::to_string(steps) + " steps, worst rel err " + fmt("%.2e", worst)};
}

// ---------------------------------------------------------------- 2
Outcome selection_oracle() {
  RngStream rng(21);
  const int instances = 10000;
  int mismatches = 0, with_ties = 0, clamped = 0;
  const int Hs[] = {2, 3, 4, 5, 10, 1000000};
  for (int n = 0; n < instances; ++n) {
    const int R = 1 + static_cast<int>(rng.below(40));
    const int P = static_cast<int>(rng.below(6));
    std::vector<int> cand;
    const double density = rng.uniform();
    for (int p = P; p < P + R; ++p) {
      if (rng.uniform() < density) cand.push_back(p);
    }
    // Coarse levels force ties.
    const int levels = rng.bernoulli(0.5) ? 2 + static_cast<int>(rng.below(4)) : 0;
    std::vector<double> conf(cand.size());
    for (auto& c : conf) c = levels ? static_cast<double>(rng.below(levels)) / levels : rng.uniform();
    const int H = Hs[rng.below(std::size(Hs))];
    double t = rng.uniform(kDefaultTMin, 1.0);
    if (rng.bernoulli(0.1)) t = rng.bernoulli(0.5) ? 1.0 / H : 1.0 - 1.0 / H;

    // Oracle: regime by threshold, K by floor, full sort on (confidence, position).
    std::vector<int> expected;
    const int K = std::clamp(static_cast<int>(std::floor(t * R)), 0, static_cast<int>(cand.size()));
    if (t >= 1.0 / H && t < 1.0 - 1.0 / H) {
      expected = cand;
    } else {
      const bool top = t >= 1.0 - 1.0 / H;
      std::vector<std::pair<double, int>> keyed;
      for (std::size_t i = 0; i < cand.size(); ++i) keyed.push_back({top ? -conf[i] : conf[i], cand[i]});
      std::sort(keyed.begin(), keyed.end());
      for (int i = 0; i < K; ++i) expected.push_back(keyed[i].second);
      std::sort(expected.begin(), expected.end());
      std::set<double> distinct(conf.begin(), conf.end());
      if (distinct.size() < conf.size()) ++with_ties;
      if (static_cast<int>(std::floor(t * R)) > static_cast<int>(cand.size())) ++clamped;
    }
    RngStream unused(0);
    if (select_subset(cand, conf, t, H, R, unused).selected != expected) ++mismatches;
  }
  return {mismatches == 0, std::to_string(instances) + " instances (" + std::to_string(with_ties) +
                               " top/bottom with ties, " + std::to_string(clamped) + " K-clamped), " +
                               std::to_string(mismatches) + " mismatches"};
}

// ---------------------------------------------------------------- 3
// Straight-line scalar denoiser over the model's stored weights.
struct ScalarNet {
  int V, D, H, L;
  std::map<std::string, std::vector<double>> w;

  explicit ScalarNet(const Denoiser& m)
      : V(m.config().vocab_size), D(m.config().d_model), H(m.config().n_heads), L(m.config().n_layers) {
    for (const auto& p : m.parameters()) {
      const auto& t = p.var.value();
      w[p.name] = std::vector<double>(t.data().data(), t.data().data() + t.size());
    }
  }

  const std::vector<double>& at(const std::string& name) const { return w.at(name); }

  std::vector<double> layer_norm(const std::vector<double>& x, const std::string& g, const std::string& b) const {
    double mu = 0.0;
    for (double v : x) mu += v;
    mu /= D;
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= D;
    std::vector<double> y(D);
    for (int i = 0; i < D; ++i) y[i] = (x[i] - mu) / std::sqrt(var + 1e-5) * at(g)[i] + at(b)[i];
    return y;
  }

  // y = x W + b for W stored row-major [in, out].
  std::vector<double> affine(const std::vector<double>& x, const std::string& W, const std::string& b,
                             int out) const {
    std::vector<double> y(at(b));
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (int j = 0; j < out; ++j) y[j] += x[i] * at(W)[i * out + j];
    }
    return y;
  }

  // Log-probabilities per position.
  std::vector<std::vector<double>> forward(const std::vector<int>& ids) const {
    const int T = static_cast<int>(ids.size()), Dh = D / H;
    std::vector<std::vector<double>> x(T, std::vector<double>(D));
    for (int p = 0; p < T; ++p) {
      for (int i = 0; i < D; ++i) x[p][i] = at("tok_emb")[ids[p] * D + i] + at("pos_emb")[p * D + i];
    }
    for (int l = 0; l < L; ++l) {
      const std::string pre = "block" + std::to_string(l) + ".";
      std::vector<std::vector<double>> q(T), k(T), v(T);
      for (int p = 0; p < T; ++p) {
        const auto h = layer_norm(x[p], pre + "ln1.gamma", pre + "ln1.beta");
        q[p] = affine(h, pre + "attn.wq", pre + "attn.bq", D);
        k[p] = affine(h, pre + "attn.wk", pre + "attn.bk", D);
        v[p] = affine(h, pre + "attn.wv", pre + "attn.bv", D);
      }
      for (int p = 0; p < T; ++p) {
        std::vector<double> ctx(D, 0.0);
        for (int hh = 0; hh < H; ++hh) {
          std::vector<double> s(T);
          double mx = -1e300;
          for (int j = 0; j < T; ++j) {
            double dot = 0.0;
            for (int e = 0; e < Dh; ++e) dot += q[p][hh * Dh + e] * k[j][hh * Dh + e];
            s[j] = dot / std::sqrt(static_cast<double>(Dh));
            mx = std::max(mx, s[j]);
          }
          double z = 0.0;
          for (auto& sj : s) z += (sj = std::exp(sj - mx));
          for (int j = 0; j < T; ++j) {
            for (int e = 0; e < Dh; ++e) ctx[hh * Dh + e] += s[j] / z * v[j][hh * Dh + e];
          }
        }
        const auto o = affine(ctx, pre + "attn.wo", pre + "attn.bo", D);
        for (int i = 0; i < D; ++i) x[p][i] += o[i];
      }
      for (int p = 0; p < T; ++p) {
        auto a = affine(layer_norm(x[p], pre + "ln2.gamma", pre + "ln2.beta"), pre + "mlp.w1", pre + "mlp.b1", 4 * D);
        for (auto& ai : a) ai = 0.5 * ai * (1.0 + std::erf(ai / std::sqrt(2.0)));
        const auto m = affine(a, pre + "mlp.w2", pre + "mlp.b2", D);
        for (int i = 0; i < D; ++i) x[p][i] += m[i];
      }
    }
    std::vector<std::vector<double>> out(T);
    for (int p = 0; p < T; ++p) {
      auto logits = affine(layer_norm(x[p], "lnf.gamma", "lnf.beta"), "head.w", "head.b", V);
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double g : logits) z += std::exp(g - mx);
      for (auto& g : logits) g = g - mx - std::log(z);
      out[p] = logits;
    }
    return out;
  }
};

// Probe, select, remask, score. Returns {lift, lift_a}.
std::pair<double, double> scalar_lift(const ScalarNet& net, const TokenSequence& clean, double t, double rho,
                                      int H, int mask_id, std::uint64_t mseed, std::uint64_t sseed) {
  RngStream masking(mseed), selection(sseed);
  const int R = clean.response_len, P = clean.prompt_len;
  const double rate = std::min(1.0, t + rho);
  std::vector<int> probe = clean.ids, M;
  for (int p = P; p < P + R; ++p) {
    if (masking.uniform() < rate) {
      probe[p] = mask_id;
      M.push_back(p);
    }
  }
  const auto lp_probe = net.forward(probe);
  std::map<int, double> conf;
  for (int p : M) conf[p] = std::exp(lp_probe[p][clean.ids[p]]);

  const bool bottom = t < 1.0 / H, top = t >= 1.0 - 1.0 / H;
  std::set<int> S;
  if (!bottom && !top) {
    for (int p : M) {
      if (selection.uniform() < t / (t + rho)) S.insert(p);
    }
  } else {
    int K = static_cast<int>(std::floor(t * R));
    K = std::max(0, std::min(K, static_cast<int>(M.size())));
    // Repeated extreme search; ties to the lower position.
    for (int n = 0; n < K; ++n) {
      int best = -1;
      for (int p : M) {
        if (S.count(p)) continue;
        if (best < 0 || (top ? conf[p] > conf[best] : conf[p] < conf[best])) best = p;
      }
      S.insert(best);
    }
  }
  if (S.empty()) return {0.0, 0.0};
  std::vector<int> input = probe;
  for (int p : M) {
    if (!S.count(p)) input[p] = clean.ids[p];
  }
  const auto lp = net.forward(input);
  double lift = 0.0, lift_a = 0.0;
  for (int p : S) {
    lift -= lp[p][clean.ids[p]];
    lift_a -= lp_probe[p][clean.ids[p]];
  }
  return {lift / t, lift_a / (t + rho)};
}

Outcome scalar_oracle() {
  RngStream rng(31);
  double worst = 0.0;
  int nonzero = 0;
  const int instances = 100;
  for (int n = 0; n < instances; ++n) {
    const int V = 4 + static_cast<int>(rng.below(3));
    const int T = 2 + static_cast<int>(rng.below(7));
    const int P = static_cast<int>(rng.below(T));
    const int mask_id = V - 1;
    TokenSequence clean;
    for (int i = 0; i < T; ++i) clean.ids.push_back(static_cast<int>(rng.below(V - 1)));
    clean.prompt_len = P;
    clean.response_len = T - P;
    const Denoiser model = spread_model(V, 8, 1 + static_cast<int>(rng.below(2)), 8, 100 + n, 0.5);
    const ScalarNet net(model);
    const double t = rng.uniform(kDefaultTMin, 1.0);
    const double rho = rng.uniform(0.0, 1.0 - t);
    const int H = 2 + static_cast<int>(rng.below(4));
    const std::uint64_t ms = rng(), ss = rng();
    const ObjectiveContext ctx{{mask_id, -1}, false, nullptr};
    RngStream m1(ms), s1(ss), m2(ms), s2(ss);
    const double lib_lift = loss_lift(model, clean, {t, rho}, H, m1, s1, ctx).total.value().item();
    const double lib_lift_a = loss_lift_a(model, clean, {t, rho}, H, m2, s2, ctx).total.value().item();
    const auto [o_lift, o_lift_a] = scalar_lift(net, clean, t, rho, H, mask_id, ms, ss);
    if (o_lift != 0.0) ++nonzero;
    worst = std::max({worst, rel(lib_lift, o_lift), rel(lib_lift_a, o_lift_a)});
  }
  return {worst <= kScalarOracleRelTol, std::to_string(instances) + " instances (" + std::to_string(nonzero) +
                                            " with nonempty S), worst rel err " + fmt("%.2e", worst)};
}

// ---------------------------------------------------------------- 4
Outcome gradient_checks() {
  using V = Var<double>;
  RngStream rng(41);
  std::vector<std::pair<std::string, double>> results;
  auto check = [&](const std::string& name, const std::function<V()>& f, std::vector<V> params) {
    results.push_back({name, check_gradients(f, params, rng, kGradDirections, kGradStep).worst_rel_error});
  };
  V a = V::parameter(random_tensor({3, 4}, rng));
  V b = V::parameter(random_tensor({4}, rng));
  V c = V::parameter(random_tensor({3, 1}, rng));
  V x3 = V::parameter(random_tensor({2, 3, 4}, rng));
  V w3 = V::constant(random_tensor({2, 3, 4}, rng));
  V w34 = V::constant(random_tensor({3, 4}, rng));
  check("add", [&] { return sum(mul(add(a, b), w34)); }, {a, b});
  check("sub", [&] { return sum(mul(sub(a, c), w34)); }, {a, c});
  check("mul", [&] { return sum(mul(a, c)); }, {a, c});
  check("broadcast", [&] { return sum(mul(broadcast(b, {2, 3, 4}), w3)); }, {b});
  check("scalar_scale", [&] { return sum(mul(scalar_scale(a, -1.7), w34)); }, {a});
  check("gelu", [&] { return sum(mul(gelu(scalar_scale(a, 2.0)), w34)); }, {a});
  check("reshape", [&] { return sum(mul(reshape(x3, {6, 4}), reshape(w3, {6, 4}))); }, {x3});
  check("permute", [&] { return sum(mul(permute(x3, {2, 0, 1}), permute(w3, {2, 0, 1}))); }, {x3});
  check("transpose", [&] { return sum(mul(transpose(x3), transpose(w3))); }, {x3});
  V m1 = V::parameter(random_tensor({2, 3, 5}, rng));
  V m2 = V::parameter(random_tensor({5, 4}, rng));
  V m3 = V::parameter(random_tensor({2, 5, 4}, rng));
  check("matmul", [&] { return sum(mul(matmul(m1, m2), w3)); }, {m1, m2});
  check("matmul_batched", [&] { return sum(mul(matmul(m1, m3), w3)); }, {m1, m3});
  V table = V::parameter(random_tensor({6, 4}, rng));
  const std::vector<int> ids{0, 5, 5, 2, 1, 3};
  check("embedding_lookup", [&] { return sum(mul(embedding_lookup(table, ids, {2, 3}), w3)); }, {table});
  const std::vector<Index> idx{1, 0, 3, 3, 2, 0};
  V w23 = V::constant(random_tensor({2, 3}, rng));
  check("gather", [&] { return sum(mul(gather(x3, idx), w23)); }, {x3});
  V gamma = V::parameter(random_tensor({4}, rng));
  V beta = V::parameter(random_tensor({4}, rng));
  check("layer_norm", [&] { return sum(mul(layer_norm(a, gamma, beta), w34)); }, {a, gamma, beta});
  check("softmax", [&] { return sum(mul(softmax(scalar_scale(a, 3.0)), w34)); }, {a});
  check("log_softmax", [&] { return sum(mul(log_softmax(scalar_scale(a, 3.0)), w34)); }, {a});
  check("sum", [&] { return sum(mul(a, a)); }, {a});
  const Tensor<double> mask({3, 4}, {1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 1, 0});
  check("masked_mean", [&] { return masked_mean(mul(a, w34), mask); }, {a});
  check("dropout", [&] {
    RngStream d(7);  // same mask on every evaluation
    return sum(mul(dropout(a, 0.3, d), w34));
  }, {a});

  // Full objectives through the denoiser.
  const auto data = toy_data(Task::kAdditionCot, 4, 2);
  const Denoiser model = spread_model(data.vocab.size(), 8, 1, 64, 3, 0.3);
  const ObjectiveContext ctx{special_ids(data.vocab), false, nullptr};
  for (auto [name, kind] : {std::pair{"lift", ObjectiveKind::kLift}, std::pair{"lift_a", ObjectiveKind::kLiftA}}) {
    const std::vector<TokenSequence> batch(data.seqs.begin(), data.seqs.end());
    const std::vector<TimestepDraw> draws{{0.1, 0.2}, {0.5, 0.3}, {0.9, 0.05}, {0.4, 0.1}};
    ObjectiveSpec spec;
    spec.kind = kind;
    check(std::string("loss_") + name, [&] {
      RngStream masking(11), selection(12);
      return compute_objective(model, batch, draws, spec, masking, selection, ctx).total;
    }, model.parameter_vars());
  }
  double worst = 0.0;
  std::string worst_name;
  for (const auto& [n, e] : results) {
    if (e >= worst) {
      worst = e;
      worst_name = n;
    }
  }
  return {worst < kGradRelTol, std::to_string(results.size()) + " checks x " + std::to_string(kGradDirections) +
                                   " directions, worst " + fmt("%.2e", worst) + " (" + worst_name + ")"};
}

// ---------------------------------------------------------------- 5
Outcome masking_statistics() {
  std::ostringstream detail;
  bool ok = true;
  TokenSequence clean;
  clean.ids.assign(100, 1);
  clean.response_len = 100;
  for (double r : {0.1, 0.5, 0.9}) {
    RngStream rng(51);
    const long trials = 100000;
    long masked = 0;
    for (long i = 0; i < trials / clean.response_len; ++i) masked += corrupt(clean, r, 0, rng).mask_set.size();
    const double z = (static_cast<double>(masked) / trials - r) / std::sqrt(r * (1 - r) / trials);
    ok = ok && std::abs(z) <= kSigmas;
    detail << "r=" << r << " z=" << fmt("%+.2f", z) << "; ";
  }
  // GIFT: probabilities from the entropies of a fully masked probe.
  const auto data = toy_data(Task::kAdditionCot, 1, 5);
  const Denoiser model = spread_model(data.vocab.size(), 16, 1, 64, 5, 0.5);
  const auto& seq = data.seqs[0];
  const auto ids = special_ids(data.vocab);
  const auto probe = fully_masked(seq, ids.mask_id);
  const auto lp = model.forward(probe.ids, 1, seq.length()).value().matrix();
  std::vector<double> entropy(seq.response_len);
  for (int r = 0; r < seq.response_len; ++r) {
    const auto row = lp.row(seq.response_begin() + r);
    entropy[r] = -(row.array().exp() * row.array()).sum();
  }
  // One test on the deviation pooled over the draws of t; the worst single
  // draw is reported but not gated, since five 3-sigma tests would fail by
  // chance about once in seventy runs.
  RngStream times(52);
  double worst_z = 0.0, pooled_dev = 0.0, pooled_var = 0.0;
  const int draws = 5;
  for (int d = 0; d < draws; ++d) {
    const double t = times.uniform(kDefaultTMin, 1.0);
    const auto q = gift_mask_probabilities(entropy, t, 0.5);
    double var = 0.0;
    for (double qi : q) var += qi * (1 - qi);
    const int reps = 100000 / seq.response_len;
    RngStream rng(53 + d);
    long masked = 0;
    for (int i = 0; i < reps; ++i) masked += corrupt_with_probabilities(seq, q, ids.mask_id, rng, t).mask_set.size();
    const double expected = t * seq.response_len * reps;
    pooled_dev += masked - expected;
    pooled_var += var * reps;
    if (var > 0) worst_z = std::max(worst_z, std::abs(masked - expected) / std::sqrt(var * reps));
  }
  const double pooled_z = pooled_var > 0 ? pooled_dev / std::sqrt(pooled_var) : (pooled_dev == 0 ? 0.0 : INFINITY);
  ok = ok && std::abs(pooled_z) <= kSigmas;
  detail << "GIFT pooled z=" << fmt("%+.2f", pooled_z) << " over " << draws << " draws of t (worst single "
         << fmt("%.2f", worst_z) << ")";
  return {ok, detail.str()};
}

// ---------------------------------------------------------------- 6
std::vector<Tensor<double>> grads_of(Denoiser& model) {
  std::vector<Tensor<double>> g;
  for (const auto& p : model.parameters()) g.push_back(p.var.grad());
  return g;
}

Outcome gating() {
  const auto data = toy_data(Task::kAdditionCot, 32, 6);
  Denoiser model = spread_model(data.vocab.size(), 16, 1, 64, 6, 0.3);
  const auto ids = special_ids(data.vocab);
  const ObjectiveContext ctx{ids, false, nullptr};
  RngStream rng(61);
  int violations = 0, perturbed_positions = 0;
  const int steps = 100;
  for (int s = 0; s < steps; ++s) {
    const auto& clean = data.seqs[rng.below(data.seqs.size())];
    const double t = rng.uniform(kDefaultTMin, 1.0);
    const TimestepDraw draw{t, rng.uniform(0.0, 1.0 - t)};
    RngStream masking(rng()), selection(rng());
    const bool lift_a = s % 2 == 1;
    const auto lv = lift_a ? loss_lift_a(model, clean, draw, 3, masking, selection, ctx)
                           : loss_lift(model, clean, draw, 3, masking, selection, ctx);
    const auto& e = lv.examples.front();
    const int T = clean.length();
    std::vector<double> weights(T, 0.0);
    for (int p : e.supervised) weights[p] = e.weight * e.position_weights.at(p);

    auto run = [&](const std::vector<int>& targets) {
      model.zero_grad();
      const auto loss = supervised_loss(model, e.input_ids, 1, T, targets, weights, ctx);
      backward(loss);
      return std::pair{loss.value().item(), grads_of(model)};
    };
    const auto [l0, g0] = run(clean.ids);
    auto other = clean.ids;
    for (int p = 0; p < T; ++p) {
      if (std::binary_search(e.supervised.begin(), e.supervised.end(), p)) continue;
      other[p] = (other[p] + 1 + static_cast<int>(rng.below(data.vocab.size() - 1))) % data.vocab.size();
      ++perturbed_positions;
    }
    const auto [l1, g1] = run(other);
    bool same = l0 == l1 && l0 == lv.total.value().item();
    for (std::size_t i = 0; i < g0.size(); ++i) same = same && g0[i].data() == g1[i].data();
    if (!same) ++violations;
  }
  return {violations == 0, std::to_string(steps) + " LIFT/LIFT-A steps, " + std::to_string(perturbed_positions) +
                               " perturbed targets, " + std::to_string(violations) + " differences"};
}

// ---------------------------------------------------------------- 7
struct TrainedRun {
  Vocabulary vocab;
  std::vector<TextExample> eval_text;
  std::optional<Denoiser> model;
  double accuracy = 0.0;
  double seconds = 0.0;
};

std::unique_ptr<TrainedRun> train_and_eval(const RunConfig& base, ObjectiveKind kind) {
  RunConfig cfg = base;
  cfg.train.objective.kind = kind;
  cfg.train.objective.H = 3;
  const auto start = std::chrono::steady_clock::now();
  const auto split = make_corpus(cfg);
  auto run = std::make_unique<TrainedRun>();
  TrainedRun& out = *run;
  out.eval_text = split.eval;
  out.vocab = build_vocabulary(split.train, cfg.corpus.tokenization);
  cfg.model.vocab_size = out.vocab.size();
  out.model.emplace(cfg.model, derive_seed(cfg.seed, "model"));
  const auto data = encode_corpus(out.vocab, split.train);
  train(cfg.train, data, special_ids(out.vocab), *out.model);
  const std::vector<int> k1{1};
  out.accuracy = evaluate(*out.model, out.vocab, split.eval, cfg.decode, k1, derive_seed(cfg.seed, "eval"),
                          cfg.threads)
                     .accuracy;
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return run;
}

std::unique_ptr<TrainedRun> g_vanilla;

Outcome training_capability() {
  const RunConfig cfg;
  g_vanilla = train_and_eval(cfg, ObjectiveKind::kVanilla);
  const auto lift = train_and_eval(cfg, ObjectiveKind::kLift);
  const bool ok = g_vanilla->accuracy >= kTrainAccuracy && lift->accuracy >= kTrainAccuracy;
  return {ok, "addition_cot " + std::to_string(cfg.corpus.train_size) + "/" + std::to_string(cfg.corpus.eval_size) +
                  ": vanilla " + fmt("%.3f", g_vanilla->accuracy) + " (" + fmt("%.0fs", g_vanilla->seconds) +
                  "), lift H=3 " + fmt("%.3f", lift->accuracy) + " (" + fmt("%.0fs", lift->seconds) + ")"};
}

// ---------------------------------------------------------------- 8
Outcome confidence_trend() {
  const RunConfig cfg;
  if (!g_vanilla) g_vanilla = train_and_eval(cfg, ObjectiveKind::kVanilla);
  BinGrid grid(make_grid(cfg.analysis, g_vanilla->vocab));
  RngStream rng(cfg.seed, "analysis");
  // Unseen prompts, as a model meets new data; the training set is memorized.
  collect(*g_vanilla->model, g_vanilla->vocab, encode_corpus(g_vanilla->vocab, g_vanilla->eval_text),
          kTrendSamplesPerExample, rng, [&](const ConfidenceRecord& r) { grid.add(r); });

  std::vector<double> means;
  for (int t = 0; t < grid.num_time_bins(); ++t) {
    const auto m = grid.time_marginal(t);
    if (m.confidence.count() > 0) means.push_back(m.confidence.mean());
  }
  int inversions = 0;
  for (std::size_t i = 1; i < means.size(); ++i) inversions += means[i] > means[i - 1];

  const int last_t = grid.num_time_bins() - 1;
  int lo = -1, hi = -1;
  for (int f = 0; f < grid.num_freq_bins(); ++f) {
    if (grid.cell(f, last_t).confidence.count() == 0) continue;
    if (lo < 0) lo = f;
    hi = f;
  }
  const bool freq_ok = lo >= 0 && lo != hi &&
                       grid.cell(lo, last_t).confidence.mean() < grid.cell(hi, last_t).confidence.mean();
  std::ostringstream d;
  d << "time-bin means";
  for (double m : means) d << ' ' << fmt("%.3f", m);
  d << "; " << inversions << " inversions";
  if (lo >= 0) {
    d << "; largest-t bin: lowest-freq " << fmt("%.3f", grid.cell(lo, last_t).confidence.mean()) << " vs highest-freq "
      << fmt("%.3f", grid.cell(hi, last_t).confidence.mean());
  }
  return {inversions <= 1 && freq_ok, d.str()};
}

// ---------------------------------------------------------------- 9
Outcome pass_at_k_estimator() {
  double worst_exact = 0.0;
  for (int n = 1; n <= 8; ++n) {
    for (int c = 0; c <= n; ++c) {
      for (int k = 1; k <= n; ++k) {
        long hit = 0, all = 0;
        for (unsigned m = 0; m < (1u << n); ++m) {
          if (std::popcount(m) != k) continue;
          ++all;
          hit += (m & ((1u << c) - 1u)) != 0;
        }
        worst_exact = std::max(worst_exact, std::abs(pass_at_k(n, c, k) - static_cast<double>(hit) / all));
      }
    }
  }
  RngStream rng(91);
  double worst_mc = 0.0;
  for (int c : {1, 4, 8}) {
    for (int k : {8, 16}) {
      const int n = 16, resamples = 10000;
      int hit = 0;
      std::vector<int> idx(n);
      for (int r = 0; r < resamples; ++r) {
        std::iota(idx.begin(), idx.end(), 0);
        bool any = false;
        for (int i = 0; i < k; ++i) {
          std::swap(idx[i], idx[i + rng.below(n - i)]);
          any = any || idx[i] < c;
        }
        hit += any;
      }
      worst_mc = std::max(worst_mc, std::abs(pass_at_k(n, c, k) - static_cast<double>(hit) / resamples));
    }
  }
  return {worst_exact < 1e-12 && worst_mc <= kMonteCarloTol,
          "exhaustive worst " + fmt("%.1e", worst_exact) + ", Monte Carlo worst " + fmt("%.4f", worst_mc)};
}

// ---------------------------------------------------------------- 10
Outcome determinism_resume() {
  const auto data = toy_data(Task::kAdditionCot, 400, 10);
  const auto ids = special_ids(data.vocab);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.epochs = 10;  // 50 steps per epoch
  cfg.seed = 101;
  cfg.learning_rate = 3e-3;
  cfg.objective.kind = ObjectiveKind::kLift;
  auto mc = tiny_model_config(data.vocab.size(), 16, 1);
  mc.dropout_rate = 0.1;

  auto curve = [](const TrainResult& r) {
    std::vector<double> c;
    for (const auto& rec : r.manifest.records) c.push_back(rec.loss);
    return c;
  };
  auto params_equal = [](const Denoiser& a, const Denoiser& b) {
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
      if (a.parameters()[i].var.value().data() != b.parameters()[i].var.value().data()) return false;
    }
    return true;
  };
  Denoiser a(mc, 1), b(mc, 1);
  const auto ra = train(cfg, data.seqs, ids, a);
  const auto rb = train(cfg, data.seqs, ids, b);
  const bool repeat = curve(ra) == curve(rb) && params_equal(a, b);

  const std::int64_t stop = 233;
  Denoiser c(mc, 1);
  TrainOptions o1;
  o1.stop_after_step = stop;
  const auto first = train(cfg, data.seqs, ids, c, o1);
  const auto path = std::filesystem::temp_directory_path() / "mdlm_acceptance_resume.ckpt";
  save_checkpoint(path, first.checkpoint);
  const Checkpoint ck = load_checkpoint(path);
  std::filesystem::remove(path);
  Denoiser d(mc, 99);  // different init: everything must come from the checkpoint
  TrainOptions o2;
  o2.resume = &ck;
  const auto second = train(cfg, data.seqs, ids, d, o2);
  auto joined = curve(first);
  const auto tail = curve(second);
  joined.insert(joined.end(), tail.begin(), tail.end());
  const bool resumed = joined == curve(ra) && params_equal(d, a) && second.checkpoint.optimizer == ra.checkpoint.optimizer;
  return {repeat && resumed && ra.state.step == 500,
          std::to_string(ra.state.step) + " steps; repeat " + (repeat ? "identical" : "DIFFERS") +
              "; resume at " + std::to_string(stop) + " " + (resumed ? "identical" : "DIFFERS")};
}

// ---------------------------------------------------------------- 11
Outcome forward_accounting() {
  const auto data = toy_data(Task::kAdditionCot, 48, 11);
  std::map<std::string, std::set<std::uint64_t>> seen;
  for (auto kind : {ObjectiveKind::kVanilla, ObjectiveKind::kLift, ObjectiveKind::kLiftA}) {
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.epochs = 2;
    cfg.objective.kind = kind;
    Denoiser m(tiny_model_config(data.vocab.size(), 8, 1), 1);
    TrainOptions o;
    o.on_step = [&](const StepRecord& r) { seen[objective_name(kind)].insert(r.forward_passes); };
    train(cfg, data.seqs, special_ids(data.vocab), m, o);
  }
  const bool ok = seen["lift"] == std::set<std::uint64_t>{2} && seen["lift_a"] == std::set<std::uint64_t>{1} &&
                  seen["vanilla"] == std::set<std::uint64_t>{1};
  auto show = [&](const std::string& k) {
    std::string s;
    for (auto v : seen[k]) s += (s.empty() ? "" : ",") + std::to_string(v);
    return s;
  };
  return {ok, "passes per micro-step: vanilla {" + show("vanilla") + "}, lift {" + show("lift") + "}, lift_a {" +
                  show("lift_a") + "}"};
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  Outcome (*run)();
};

}  // namespace

int main(int argc, char** argv) {
  const Criterion criteria[] = {
      {1, "vanilla equivalence", 60, vanilla_equivalence},
      {2, "selection oracle", 10, selection_oracle},
      {3, "scalar LIFT oracle", 30, scalar_oracle},
      {4, "gradient correctness", 120, gradient_checks},
      {5, "masking statistics", 10, masking_statistics},
      {6, "gating and zero gradient", 60, gating},
      {7, "training capability", 1800, training_capability},
      {8, "confidence trend", 300, confidence_trend},
      {9, "pass@k estimator", 10, pass_at_k_estimator},
      {10, "determinism and resume", 300, determinism_resume},
      {11, "forward-pass accounting", 60, forward_accounting},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  // ctest hides the output of passing tests, so keep a copy on disk.
  std::FILE* log = std::fopen("acceptance_report.txt", "w");
  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs <= c.budget_seconds;
    const bool pass = o.pass && in_time;
    failed += !pass;
    char line[2048];
    std::snprintf(line, sizeof(line), "[%s] %2d %-26s %s (%.1fs, budget %.0fs%s)\n", pass ? "PASS" : "FAIL", c.id,
                  c.name, o.detail.c_str(), secs, c.budget_seconds, in_time ? "" : ", OVER BUDGET");
    std::fputs(line, stdout);
    std::fflush(stdout);
    if (log) {
      std::fputs(line, log);
      std::fflush(log);
    }
  }
  if (log) std::fclose(log);
  return failed == 0 ? 0 : 1;
}
