#include "mdlm/run_config.hpp"

#include <algorithm>
#include <fstream>

#include "mdlm/errors.hpp"

namespace mdlm {

namespace {

template <typename T>
T get_field(const nlohmann::json& value, const std::string& key) {
  try {
    return value.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

void require_object(const nlohmann::json& j, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + " must be a JSON object");
}

}  // namespace

void CorpusConfig::validate() const {
  if (train_size < 1) throw ConfigError("corpus.train_size must be positive");
  if (eval_size < 0) throw ConfigError("corpus.eval_size must be non-negative");
  if (max_len < 2) throw ConfigError("corpus.max_len must be at least 2");
  if (synthetic.addition_digits < 1 || synthetic.addition_digits > 9) {
    throw ConfigError("corpus.addition_digits must lie in [1, 9]");
  }
  if (synthetic.copy_min_len < 1 || synthetic.copy_max_len < synthetic.copy_min_len) {
    throw ConfigError("corpus.copy_min_len/copy_max_len must satisfy 1 <= min <= max");
  }
}

nlohmann::json CorpusConfig::to_json() const {
  return {{"task", task_name(task)},
          {"train_size", train_size},
          {"eval_size", eval_size},
          {"tokenization", tokenization_name(tokenization)},
          {"addition_digits", synthetic.addition_digits},
          {"copy_min_len", synthetic.copy_min_len},
          {"copy_max_len", synthetic.copy_max_len},
          {"max_len", max_len}};
}

CorpusConfig CorpusConfig::from_json(const nlohmann::json& j, CorpusConfig c) {
  require_object(j, "corpus");
  for (const auto& [key, value] : j.items()) {
    const std::string k = "corpus." + key;
    if (key == "task") c.task = parse_task(get_field<std::string>(value, k));
    else if (key == "train_size") c.train_size = get_field<int>(value, k);
    else if (key == "eval_size") c.eval_size = get_field<int>(value, k);
    else if (key == "tokenization") c.tokenization = parse_tokenization(get_field<std::string>(value, k));
    else if (key == "addition_digits") c.synthetic.addition_digits = get_field<int>(value, k);
    else if (key == "copy_min_len") c.synthetic.copy_min_len = get_field<int>(value, k);
    else if (key == "copy_max_len") c.synthetic.copy_max_len = get_field<int>(value, k);
    else if (key == "max_len") c.max_len = get_field<int>(value, k);
    else throw ConfigError("unknown key " + k);
  }
  c.validate();
  return c;
}

void AnalysisConfig::validate() const {
  if (samples_per_example < 1) throw ConfigError("analysis.samples_per_example must be positive");
  if (time_bins < 1) throw ConfigError("analysis.time_bins must be positive");
  if (freq_binning != "log" && freq_binning != "decade") {
    throw ConfigError("analysis.freq_binning must be \"log\" or \"decade\"");
  }
  if (freq_bins < 2) throw ConfigError("analysis.freq_bins must be at least 2");
  if (top_tokens < 0) throw ConfigError("analysis.top_tokens must be non-negative");
  if (max_examples < 0) throw ConfigError("analysis.max_examples must be non-negative");
}

nlohmann::json AnalysisConfig::to_json() const {
  return {{"samples_per_example", samples_per_example},
          {"time_bins", time_bins},
          {"freq_binning", freq_binning},
          {"freq_bins", freq_bins},
          {"top_tokens", top_tokens},
          {"max_examples", max_examples}};
}

AnalysisConfig AnalysisConfig::from_json(const nlohmann::json& j, AnalysisConfig c) {
  require_object(j, "analysis");
  for (const auto& [key, value] : j.items()) {
    const std::string k = "analysis." + key;
    if (key == "samples_per_example") c.samples_per_example = get_field<int>(value, k);
    else if (key == "time_bins") c.time_bins = get_field<int>(value, k);
    else if (key == "freq_binning") c.freq_binning = get_field<std::string>(value, k);
    else if (key == "freq_bins") c.freq_bins = get_field<int>(value, k);
    else if (key == "top_tokens") c.top_tokens = get_field<int>(value, k);
    else if (key == "max_examples") c.max_examples = get_field<int>(value, k);
    else throw ConfigError("unknown key " + k);
  }
  c.validate();
  return c;
}

RunConfig::RunConfig() {
  model.vocab_size = 0;
  const int width = synthetic_response_width(corpus.task, corpus.synthetic);
  decode.gen_len = width;
  decode.steps = (width + decode.tokens_per_step - 1) / decode.tokens_per_step;
}

void RunConfig::set_seed(std::uint64_t s) {
  seed = s;
  train.seed = s;
}

void RunConfig::validate() const {
  if (threads < 1) throw ConfigError("threads must be positive");
  corpus.validate();
  if (model.vocab_size != 0) model.validate();
  train.validate();
  decode.validate();
  analysis.validate();
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json t = train.to_json();
  t.erase("seed");
  return {{"seed", seed},
          {"threads", threads},
          {"corpus", corpus.to_json()},
          {"model", model.to_json()},
          {"train", t},
          {"decode", decode.to_json()},
          {"analysis", analysis.to_json()}};
}

namespace {

RunConfig parse_run_config(const nlohmann::json& j) {
  require_object(j, "config");
  RunConfig c;
  const nlohmann::json empty = nlohmann::json::object();
  for (const auto& [key, value] : j.items()) {
    if (key != "seed" && key != "threads" && key != "corpus" && key != "model" && key != "train" &&
        key != "decode" && key != "analysis") {
      throw ConfigError("unknown key " + key);
    }
  }
  if (j.contains("seed")) c.seed = get_field<std::uint64_t>(j["seed"], "seed");
  if (j.contains("threads")) c.threads = get_field<int>(j["threads"], "threads");
  c.corpus = CorpusConfig::from_json(j.value("corpus", empty), c.corpus);

  if (j.contains("model")) {
    require_object(j["model"], "model");
    // vocab_size 0 is allowed here and resolved from the vocabulary later.
    nlohmann::json m = j["model"];
    const int vocab = m.contains("vocab_size") ? get_field<int>(m["vocab_size"], "model.vocab_size") : 0;
    if (vocab < 0) throw ConfigError("model.vocab_size must be non-negative");
    m["vocab_size"] = vocab == 0 ? 2 : vocab;
    c.model = ModelConfig::from_json(m, c.model);
    c.model.vocab_size = vocab;
  }

  const nlohmann::json& tj = j.value("train", empty);
  require_object(tj, "train");
  if (tj.contains("seed")) throw ConfigError("train.seed is not configurable; use the top-level seed");
  c.train = TrainConfig::from_json(tj, c.train);
  c.train.seed = c.seed;

  const nlohmann::json& dj = j.value("decode", empty);
  require_object(dj, "decode");
  DecodeConfig base = c.decode;
  const int width = synthetic_response_width(c.corpus.task, c.corpus.synthetic);
  if (!dj.contains("gen_len")) base.gen_len = width;
  const int tps = dj.contains("tokens_per_step")
                      ? get_field<int>(dj["tokens_per_step"], "decode.tokens_per_step")
                      : base.tokens_per_step;
  if (!dj.contains("steps") && tps > 0) {
    const int len = dj.contains("gen_len") ? get_field<int>(dj["gen_len"], "decode.gen_len") : base.gen_len;
    base.steps = std::max(1, (len + tps - 1) / tps);
  }
  c.decode = DecodeConfig::from_json(dj, base);

  c.analysis = AnalysisConfig::from_json(j.value("analysis", empty), c.analysis);
  c.validate();
  return c;
}

}  // namespace

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  try {
    return parse_run_config(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config value: ") + e.what());
  }
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

CorpusSplit make_corpus(const RunConfig& cfg) {
  auto split = generate_split(cfg.corpus.task, cfg.corpus.train_size, cfg.corpus.eval_size,
                              derive_seed(cfg.seed, "corpus"), cfg.corpus.synthetic);
  split.train = filter_by_length(split.train, cfg.corpus.tokenization, cfg.corpus.max_len);
  split.eval = filter_by_length(split.eval, cfg.corpus.tokenization, cfg.corpus.max_len);
  if (split.train.empty()) throw IngestionError("no training example fits corpus.max_len");
  return split;
}

GridSpec make_grid(const AnalysisConfig& cfg, const Vocabulary& vocab) {
  GridSpec spec;
  spec.time_edges = GridSpec::default_time_edges(cfg.time_bins);
  if (cfg.freq_binning == "decade") {
    spec.freq_edges = GridSpec::decade_edges();
    return spec;
  }
  std::int64_t lo = 0, hi = 0;
  for (auto f : vocab.frequency()) {
    if (f <= 0) continue;
    lo = lo == 0 ? f : std::min(lo, f);
    hi = std::max(hi, f);
  }
  if (hi <= lo) throw IngestionError("need at least two distinct token frequencies for log bins");
  spec.freq_edges = GridSpec::log_edges(static_cast<double>(lo), static_cast<double>(hi), cfg.freq_bins);
  return spec;
}

}  // namespace mdlm
