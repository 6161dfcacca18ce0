#include "mdlm/sampler.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include "mdlm/errors.hpp"

namespace mdlm {

std::string remask_name(RemaskStrategy strategy) {
  return strategy == RemaskStrategy::kConfidence ? "confidence" : "random";
}

RemaskStrategy parse_remask(std::string_view name) {
  if (name == "confidence") return RemaskStrategy::kConfidence;
  if (name == "random") return RemaskStrategy::kRandom;
  throw ConfigError("unknown remask strategy '" + std::string(name) + "'");
}

void DecodeConfig::validate() const {
  if (gen_len < 1) throw ConfigError("decode.gen_len must be positive");
  if (steps < 1) throw ConfigError("decode.steps must be positive");
  if (tokens_per_step < 1) throw ConfigError("decode.tokens_per_step must be positive");
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
    throw ConfigError("decode.temperature must be a finite non-negative number");
  }
  if (static_cast<std::int64_t>(steps) * tokens_per_step < gen_len) {
    throw ConfigError("decode.steps * decode.tokens_per_step (" +
                      std::to_string(static_cast<std::int64_t>(steps) * tokens_per_step) +
                      ") must be at least gen_len (" + std::to_string(gen_len) + ")");
  }
}

nlohmann::json DecodeConfig::to_json() const {
  return {{"gen_len", gen_len},
          {"steps", steps},
          {"tokens_per_step", tokens_per_step},
          {"temperature", temperature},
          {"remask_strategy", remask_name(remask)}};
}

DecodeConfig DecodeConfig::from_json(const nlohmann::json& j, DecodeConfig c) {
  if (!j.is_object()) throw ConfigError("decode section must be an object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "gen_len") c.gen_len = value.get<int>();
      else if (key == "steps") c.steps = value.get<int>();
      else if (key == "tokens_per_step") c.tokens_per_step = value.get<int>();
      else if (key == "temperature") c.temperature = value.get<double>();
      else if (key == "remask_strategy") c.remask = parse_remask(value.get<std::string>());
      else throw ConfigError("unknown key decode." + key);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("decode." + key + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

std::vector<TokenSequence> generate_batch(const Denoiser& model,
                                          std::span<const std::vector<int>> prompts,
                                          const DecodeConfig& config, SpecialIds ids,
                                          RngStream& rng, const StepObserver& observer) {
  config.validate();
  if (prompts.empty()) return {};
  const int P = static_cast<int>(prompts.front().size());
  for (const auto& p : prompts) {
    if (static_cast<int>(p.size()) != P) throw ContractError("generate_batch: prompt lengths differ");
  }
  const int G = config.gen_len;
  const int L = P + G;
  if (L > model.config().max_seq_len) {
    throw InputError("prompt of " + std::to_string(P) + " tokens plus gen_len " + std::to_string(G) +
                     " exceeds max_seq_len " + std::to_string(model.config().max_seq_len));
  }
  const int B = static_cast<int>(prompts.size());
  const int V = model.config().vocab_size;
  std::vector<int> seq(static_cast<std::size_t>(B) * L, ids.mask_id);
  for (int b = 0; b < B; ++b) {
    std::copy(prompts[b].begin(), prompts[b].end(), seq.begin() + static_cast<std::ptrdiff_t>(b) * L);
  }

  NoGradGuard no_grad;
  std::vector<double> weights(V);
  int remaining = G;
  for (int step = 0; remaining > 0; ++step) {
    const Tensor<double> lp =
        model.forward(seq, B, L, ForwardOptions{false, nullptr, ids.pad_id}).value();
    const int commit = std::min(config.tokens_per_step, remaining);
    for (int b = 0; b < B; ++b) {
      int* row = seq.data() + static_cast<std::ptrdiff_t>(b) * L;
      // Candidate token and its model probability for every masked position.
      std::vector<int> masked, choice;
      std::vector<double> conf;
      for (int pos = P; pos < L; ++pos) {
        if (row[pos] != ids.mask_id) continue;
        const double* logp = lp.raw() + (static_cast<std::ptrdiff_t>(b) * L + pos) * V;
        int tok = -1;
        if (config.temperature == 0.0) {
          for (int v = 0; v < V; ++v) {
            if (v == ids.mask_id || v == ids.pad_id) continue;
            if (tok < 0 || logp[v] > logp[tok]) tok = v;
          }
        } else {
          double hi = -std::numeric_limits<double>::infinity();
          for (int v = 0; v < V; ++v) {
            if (v != ids.mask_id && v != ids.pad_id) hi = std::max(hi, logp[v] / config.temperature);
          }
          double total = 0.0;
          for (int v = 0; v < V; ++v) {
            weights[v] = (v == ids.mask_id || v == ids.pad_id)
                             ? 0.0
                             : std::exp(logp[v] / config.temperature - hi);
            total += weights[v];
          }
          double u = rng.uniform() * total;
          for (int v = 0; v < V; ++v) {
            if (weights[v] == 0.0) continue;
            tok = v;
            u -= weights[v];
            if (u < 0.0) break;
          }
        }
        masked.push_back(pos);
        choice.push_back(tok);
        conf.push_back(std::exp(logp[tok]));
      }
      std::vector<int> order(masked.size());
      std::iota(order.begin(), order.end(), 0);
      if (config.remask == RemaskStrategy::kConfidence) {
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int c) { return conf[a] > conf[c]; });
      } else {
        for (int i = 0; i < commit; ++i) {
          std::swap(order[i], order[i + rng.below(order.size() - i)]);
        }
      }
      for (int i = 0; i < commit; ++i) row[masked[order[i]]] = choice[order[i]];
    }
    remaining -= commit;
    if (observer) observer(step, seq);
  }

  std::vector<TokenSequence> out(B);
  for (int b = 0; b < B; ++b) {
    out[b].ids.assign(seq.begin() + static_cast<std::ptrdiff_t>(b) * L,
                      seq.begin() + static_cast<std::ptrdiff_t>(b + 1) * L);
    out[b].prompt_len = P;
    out[b].response_len = G;
  }
  return out;
}

TokenSequence generate(const Denoiser& model, std::span<const int> prompt, const DecodeConfig& config,
                       SpecialIds ids, RngStream& rng, const StepObserver& observer) {
  const std::vector<int> p(prompt.begin(), prompt.end());
  return generate_batch(model, std::span<const std::vector<int>>(&p, 1), config, ids, rng, observer)
      .front();
}

double pass_at_k(int n, int c, int k) {
  if (n < 1 || c < 0 || c > n || k < 1 || k > n) {
    throw ContractError("pass_at_k requires 0 <= c <= n and 1 <= k <= n (got n=" +
                        std::to_string(n) + ", c=" + std::to_string(c) + ", k=" + std::to_string(k) +
                        ")");
  }
  if (n - c < k) return 1.0;
  // C(n-c, k) / C(n, k) = prod_{i=n-c+1}^{n} (1 - k/i)
  double log_ratio = 0.0;
  for (int i = n - c + 1; i <= n; ++i) log_ratio += std::log1p(-static_cast<double>(k) / i);
  return 1.0 - std::exp(log_ratio);
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : records) {
    recs.push_back({{"prompt", r.prompt},
                    {"canonical", r.canonical},
                    {"generations", r.generations},
                    {"correct", r.correct},
                    {"num_correct", r.num_correct}});
  }
  nlohmann::json pass = nlohmann::json::object(), avg = nlohmann::json::object();
  for (const auto& [k, v] : pass_at_k) pass[std::to_string(k)] = v;
  for (const auto& [k, v] : avg_at_k) avg[std::to_string(k)] = v;
  return {{"samples_per_prompt", samples_per_prompt},
          {"accuracy", accuracy},
          {"pass_at_k", pass},
          {"avg_at_k", avg},
          {"records", recs}};
}

std::string EvalReport::csv_header() { return "label,seed,prompts,samples,accuracy,metric,k,value"; }

std::string EvalReport::csv_row(const std::string& label, std::uint64_t seed) const {
  // One line per metric so the column set does not depend on k_list.
  std::ostringstream os;
  os << std::setprecision(10);
  auto line = [&](const char* metric, int k, double v) {
    if (os.tellp() > 0) os << '\n';
    os << label << ',' << seed << ',' << records.size() << ',' << samples_per_prompt << ','
       << accuracy << ',' << metric << ',' << k << ',' << v;
  };
  for (const auto& [k, v] : pass_at_k) line("pass", k, v);
  for (const auto& [k, v] : avg_at_k) line("avg", k, v);
  return os.str();
}

EvalReport evaluate(const Denoiser& model, const Vocabulary& vocab,
                    std::span<const TextExample> eval_set, const DecodeConfig& config,
                    std::span<const int> k_list, std::uint64_t seed, int threads) {
  config.validate();
  if (k_list.empty()) throw ConfigError("k_list must not be empty");
  for (int k : k_list) {
    if (k < 1) throw ConfigError("every k in k_list must be positive");
  }
  const int n = *std::max_element(k_list.begin(), k_list.end());
  if (n > 1 && config.temperature == 0.0) {
    throw ConfigError("sampling " + std::to_string(n) +
                      " generations per prompt needs temperature > 0");
  }
  if (vocab.size() != model.config().vocab_size) {
    throw MismatchError("vocabulary size " + std::to_string(vocab.size()) +
                        " differs from model vocab_size " +
                        std::to_string(model.config().vocab_size));
  }
  const SpecialIds ids = special_ids(vocab);

  EvalReport report;
  report.samples_per_prompt = n;
  report.records.resize(eval_set.size());
  std::vector<std::vector<int>> prompts(eval_set.size());
  for (std::size_t i = 0; i < eval_set.size(); ++i) {
    prompts[i] = vocab.encode(eval_set[i].prompt);
    report.records[i].prompt = eval_set[i].prompt;
    report.records[i].canonical = canonical_answer(eval_set[i]);
    report.records[i].generations.resize(n);
    report.records[i].correct.resize(n);
  }

  // Chunks of equal-length prompts in first-appearance order.
  constexpr std::size_t kChunk = 64;
  std::map<std::size_t, std::vector<std::size_t>> by_len;
  for (std::size_t i = 0; i < prompts.size(); ++i) by_len[prompts[i].size()].push_back(i);
  std::vector<std::vector<std::size_t>> chunks;
  for (const auto& [len, members] : by_len) {
    for (std::size_t s = 0; s < members.size(); s += kChunk) {
      chunks.emplace_back(members.begin() + s,
                          members.begin() + std::min(members.size(), s + kChunk));
    }
  }

  auto run_chunk = [&](std::size_t c) {
    const auto& members = chunks[c];
    std::vector<std::vector<int>> batch;
    for (auto i : members) batch.push_back(prompts[i]);
    for (int s = 0; s < n; ++s) {
      RngStream rng(seed, "eval:" + std::to_string(c) + ":" + std::to_string(s));
      const auto outs = generate_batch(model, batch, config, ids, rng);
      for (std::size_t m = 0; m < members.size(); ++m) {
        const auto& o = outs[m];
        const std::span<const int> resp(o.ids.data() + o.prompt_len, o.response_len);
        std::string text = vocab.decode(resp);
        auto& rec = report.records[members[m]];
        rec.correct[s] = is_correct(eval_set[members[m]], text);
        rec.generations[s] = std::move(text);
      }
    }
  };

  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(chunks.size())));
  if (workers == 1) {
    for (std::size_t c = 0; c < chunks.size(); ++c) run_chunk(c);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t c = next++; c < chunks.size(); c = next++) run_chunk(c);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  double first = 0.0;
  for (auto& rec : report.records) {
    rec.num_correct = static_cast<int>(std::count(rec.correct.begin(), rec.correct.end(), true));
    first += rec.correct.front() ? 1.0 : 0.0;
  }
  const double P = std::max<std::size_t>(1, report.records.size());
  report.accuracy = first / P;
  for (int k : k_list) {
    double pass = 0.0, avg = 0.0;
    for (const auto& rec : report.records) {
      pass += pass_at_k(n, rec.num_correct, k);
      avg += static_cast<double>(rec.num_correct) / n;
    }
    report.pass_at_k[k] = pass / P;
    report.avg_at_k[k] = avg / P;
  }
  return report;
}

}  // namespace mdlm
