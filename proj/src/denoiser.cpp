#include "mdlm/denoiser.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

#include "mdlm/errors.hpp"

namespace mdlm {

void ModelConfig::validate() const {
  if (vocab_size < 1 || d_model < 1 || n_heads < 1 || n_layers < 0 || max_seq_len < 1) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ConfigError("dropout_rate must lie in [0, 1)");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"d_model", d_model},         {"n_heads", n_heads},
          {"n_layers", n_layers},     {"max_seq_len", max_seq_len}, {"dropout_rate", dropout_rate}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j, ModelConfig c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "vocab_size") c.vocab_size = value.get<int>();
    else if (key == "d_model") c.d_model = value.get<int>();
    else if (key == "n_heads") c.n_heads = value.get<int>();
    else if (key == "n_layers") c.n_layers = value.get<int>();
    else if (key == "max_seq_len") c.max_seq_len = value.get<int>();
    else if (key == "dropout_rate") c.dropout_rate = value.get<double>();
    else throw ConfigError("unknown key model." + key);
  }
  return c;
}

std::int64_t parameter_count(const ModelConfig& c) {
  const std::int64_t V = c.vocab_size, D = c.d_model, T = c.max_seq_len, L = c.n_layers;
  return V * D + T * D + L * (12 * D * D + 13 * D) + 2 * D + D * V + V;
}

namespace {

template <typename Scalar>
Tensor<Scalar> normal_init(Shape shape, double stddev, RngStream& rng) {
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); i += 2) {
    // Box-Muller; u1 in (0, 1].
    const double u1 = 1.0 - rng.uniform();
    const double u2 = rng.uniform();
    const double r = std::sqrt(-2.0 * std::log(u1)) * stddev;
    t[i] = static_cast<Scalar>(r * std::cos(2.0 * std::numbers::pi * u2));
    if (i + 1 < t.size()) t[i + 1] = static_cast<Scalar>(r * std::sin(2.0 * std::numbers::pi * u2));
  }
  return t;
}

}  // namespace

template <typename Scalar>
BasicDenoiser<Scalar>::BasicDenoiser(const ModelConfig& config, std::uint64_t init_seed)
    : config_(config) {
  config_.validate();
  RngStream rng(init_seed, "init");
  const Index V = config_.vocab_size, D = config_.d_model, T = config_.max_seq_len;
  constexpr double kStd = 0.02;
  auto add = [&](std::string name, Tensor<Scalar> value) {
    params_.push_back({std::move(name), Var<Scalar>::parameter(std::move(value))});
  };
  auto ones = [](Index n) { return Tensor<Scalar>::Constant({n}, Scalar(1)); };
  auto zeros = [](Index n) { return Tensor<Scalar>::Zeros({n}); };

  add("tok_emb", normal_init<Scalar>({V, D}, kStd, rng));
  add("pos_emb", normal_init<Scalar>({T, D}, kStd, rng));
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    add(p + "ln1.gamma", ones(D));
    add(p + "ln1.beta", zeros(D));
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      add(p + "attn." + w, normal_init<Scalar>({D, D}, kStd, rng));
      add(p + "attn.b" + std::string(w + 1), zeros(D));
    }
    add(p + "ln2.gamma", ones(D));
    add(p + "ln2.beta", zeros(D));
    add(p + "mlp.w1", normal_init<Scalar>({D, 4 * D}, kStd, rng));
    add(p + "mlp.b1", zeros(4 * D));
    add(p + "mlp.w2", normal_init<Scalar>({4 * D, D}, kStd, rng));
    add(p + "mlp.b2", zeros(D));
  }
  add("lnf.gamma", ones(D));
  add("lnf.beta", zeros(D));
  add("head.w", normal_init<Scalar>({D, V}, kStd, rng));
  add("head.b", zeros(V));
  rebuild_views();
}

template <typename Scalar>
BasicDenoiser<Scalar>::BasicDenoiser(const BasicDenoiser& other) : config_(other.config_) {
  for (const auto& p : other.params_) {
    params_.push_back({p.name, Var<Scalar>::parameter(p.var.value())});
  }
  rebuild_views();
}

template <typename Scalar>
void BasicDenoiser<Scalar>::rebuild_views() {
  std::size_t i = 0;
  auto next = [&]() -> Var<Scalar> { return params_.at(i++).var; };
  tok_emb_ = next();
  pos_emb_ = next();
  blocks_.clear();
  for (int l = 0; l < config_.n_layers; ++l) {
    Block b;
    b.ln1_g = next();
    b.ln1_b = next();
    b.wq = next();
    b.bq = next();
    b.wk = next();
    b.bk = next();
    b.wv = next();
    b.bv = next();
    b.wo = next();
    b.bo = next();
    b.ln2_g = next();
    b.ln2_b = next();
    b.w1 = next();
    b.b1 = next();
    b.w2 = next();
    b.b2 = next();
    blocks_.push_back(std::move(b));
  }
  lnf_g_ = next();
  lnf_b_ = next();
  head_w_ = next();
  head_b_ = next();
}

template <typename Scalar>
std::vector<Var<Scalar>> BasicDenoiser<Scalar>::parameter_vars() const {
  std::vector<Var<Scalar>> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.var);
  return out;
}

template <typename Scalar>
Var<Scalar>& BasicDenoiser<Scalar>::parameter(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p.var;
  }
  throw ContractError("no parameter named " + name);
}

template <typename Scalar>
std::int64_t BasicDenoiser<Scalar>::num_parameters() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.var.value().size();
  return n;
}

template <typename Scalar>
void BasicDenoiser<Scalar>::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

template <typename Scalar>
Var<Scalar> BasicDenoiser<Scalar>::forward(std::span<const int> ids, int batch, int seq_len,
                                           const ForwardOptions& options) const {
  if (batch < 1 || seq_len < 1 || static_cast<Index>(ids.size()) != Index(batch) * seq_len) {
    throw ShapeError("forward: ids length " + std::to_string(ids.size()) + " is not batch " +
                     std::to_string(batch) + " x seq_len " + std::to_string(seq_len));
  }
  if (seq_len > config_.max_seq_len) {
    throw InputError("sequence length " + std::to_string(seq_len) + " exceeds max_seq_len " +
                     std::to_string(config_.max_seq_len));
  }
  ++forward_passes_;
  const Index B = batch, T = seq_len, D = config_.d_model, H = config_.n_heads, Dh = D / H;
  const bool drop = options.train && config_.dropout_rate > 0.0;
  if (drop && options.dropout_rng == nullptr) {
    throw ContractError("training-mode forward with dropout needs a dropout RNG");
  }
  const Scalar rate = static_cast<Scalar>(config_.dropout_rate);
  auto maybe_dropout = [&](const Var<Scalar>& x) {
    return drop ? dropout(x, rate, *options.dropout_rng) : x;
  };

  std::vector<int> positions(T);
  std::iota(positions.begin(), positions.end(), 0);
  Var<Scalar> x = embedding_lookup(tok_emb_, ids, {B, T}) +
                  embedding_lookup(pos_emb_, std::span<const int>(positions), {T});
  x = maybe_dropout(x);

  Var<Scalar> key_bias;
  if (options.pad_id >= 0) {
    Tensor<Scalar> bias({B, 1, 1, T});
    bool any = false;
    for (Index i = 0; i < B * T; ++i) {
      if (ids[i] == options.pad_id) {
        bias[i] = Scalar(-1e9);
        any = true;
      }
    }
    if (any) key_bias = Var<Scalar>::constant(std::move(bias));
  }

  const Scalar attn_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(Dh));
  auto heads = [&](const Var<Scalar>& v) {  // [B,T,D] -> [B,H,T,Dh]
    return permute(reshape(v, {B, T, H, Dh}), {0, 2, 1, 3});
  };
  for (const Block& blk : blocks_) {
    const Var<Scalar> h = layer_norm(x, blk.ln1_g, blk.ln1_b);
    const Var<Scalar> q = heads(matmul(h, blk.wq) + blk.bq);
    const Var<Scalar> k = heads(matmul(h, blk.wk) + blk.bk);
    const Var<Scalar> v = heads(matmul(h, blk.wv) + blk.bv);
    Var<Scalar> scores = scalar_scale(matmul(q, transpose(k)), attn_scale);
    if (key_bias.defined()) scores = scores + key_bias;
    const Var<Scalar> attn = maybe_dropout(softmax(scores));
    const Var<Scalar> ctx = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {B, T, D});
    x = x + maybe_dropout(matmul(ctx, blk.wo) + blk.bo);

    const Var<Scalar> h2 = layer_norm(x, blk.ln2_g, blk.ln2_b);
    const Var<Scalar> mlp = matmul(gelu(matmul(h2, blk.w1) + blk.b1), blk.w2) + blk.b2;
    x = x + maybe_dropout(mlp);
  }
  const Var<Scalar> logits = matmul(layer_norm(x, lnf_g_, lnf_b_), head_w_) + head_b_;
  return log_softmax(logits);
}

template <typename Scalar>
Var<Scalar> BasicDenoiser<Scalar>::forward(std::span<const CorruptedSequence> batch,
                                           const ForwardOptions& options) const {
  if (batch.empty()) throw ShapeError("forward: empty batch");
  const std::size_t len = batch.front().ids.size();
  std::vector<int> ids;
  ids.reserve(batch.size() * len);
  for (const auto& s : batch) {
    if (s.ids.size() != len) throw ShapeError("forward: batch sequences differ in length");
    ids.insert(ids.end(), s.ids.begin(), s.ids.end());
  }
  return forward(ids, static_cast<int>(batch.size()), static_cast<int>(len), options);
}

template class BasicDenoiser<double>;
template class BasicDenoiser<float>;

std::map<int, double> confidence(const Denoiser& model, const CorruptedSequence& corrupted,
                                 const TokenSequence& clean, std::span<const int> positions,
                                 int pad_id) {
  for (int pos : positions) {
    if (!std::binary_search(corrupted.mask_set.begin(), corrupted.mask_set.end(), pos)) {
      throw ContractError("confidence requested at unmasked position " + std::to_string(pos));
    }
  }
  NoGradGuard no_grad;
  const auto log_probs = model.forward(std::span<const CorruptedSequence>(&corrupted, 1),
                                       ForwardOptions{false, nullptr, pad_id});
  const auto lp = log_probs.value().matrix();
  std::map<int, double> out;
  for (int pos : positions) out[pos] = std::exp(lp(pos, clean.ids[pos]));
  return out;
}

std::map<int, double> confidence(const Denoiser& model, const CorruptedSequence& corrupted,
                                 const TokenSequence& clean, int pad_id) {
  return confidence(model, corrupted, clean, corrupted.mask_set, pad_id);
}

}  // namespace mdlm
