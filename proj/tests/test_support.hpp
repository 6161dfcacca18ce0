#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mdlm/autodiff.hpp"
#include "mdlm/corpus.hpp"
#include "mdlm/denoiser.hpp"
#include "mdlm/rng.hpp"

namespace mdlm::testing {

inline Tensor<double> random_tensor(const Shape& shape, RngStream& rng, double scale = 1.0) {
  Tensor<double> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = scale * (2.0 * rng.uniform() - 1.0);
  return t;
}

struct GradCheck {
  double worst_rel_error = 0.0;
  int directions = 0;
};

// Central differences of `f` along random unit directions in the joint
// parameter space, compared with the autodiff directional derivative.
inline GradCheck check_gradients(const std::function<Var<double>()>& f, std::vector<Var<double>> params,
                                 RngStream& rng, int directions = 20, double h = 1e-6) {
  for (auto& p : params) p.zero_grad();
  const Var<double> loss = f();
  const auto grads = gradients(loss, std::span<Var<double>>(params));
  GradCheck out;
  for (int d = 0; d < directions; ++d) {
    std::vector<Tensor<double>> dir;
    double norm = 0.0;
    for (const auto& p : params) {
      dir.push_back(random_tensor(p.shape(), rng));
      norm += dir.back().data().squaredNorm();
    }
    norm = std::sqrt(norm);
    double analytic = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      dir[i].data() /= norm;
      analytic += grads[i].data().dot(dir[i].data());
    }
    auto shifted = [&](double s) {
      std::vector<Tensor<double>> saved;
      for (std::size_t i = 0; i < params.size(); ++i) {
        saved.push_back(params[i].value());
        params[i].mutable_value().data() += s * dir[i].data();
      }
      NoGradGuard no_grad;
      const double v = f().value().item();
      for (std::size_t i = 0; i < params.size(); ++i) params[i].mutable_value() = saved[i];
      return v;
    };
    const double numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
    const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    out.worst_rel_error = std::max(out.worst_rel_error, std::abs(analytic - numeric) / scale);
    ++out.directions;
  }
  return out;
}

// Small corpus and vocabulary over one synthetic task.
struct ToyData {
  std::vector<TextExample> text;
  Vocabulary vocab;
  std::vector<TokenSequence> seqs;
};

inline ToyData toy_data(Task task, int count, std::uint64_t seed) {
  ToyData d;
  d.text = generate_synthetic(task, count, seed);
  d.vocab = build_vocabulary(d.text, Tokenization::kChar);
  d.seqs = encode_corpus(d.vocab, d.text);
  return d;
}

inline ModelConfig tiny_model_config(int vocab_size, int d_model = 16, int n_layers = 1,
                                     int n_heads = 2) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.d_model = d_model;
  c.n_layers = n_layers;
  c.n_heads = n_heads;
  c.max_seq_len = 64;
  return c;
}

inline double rel_error(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

}  // namespace mdlm::testing
