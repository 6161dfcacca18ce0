#include "mdlm/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "mdlm/errors.hpp"
#include "mdlm/rng.hpp"

namespace mdlm {

Task parse_task(std::string_view name) {
  if (name == "copy") return Task::kCopy;
  if (name == "reverse") return Task::kReverse;
  if (name == "addition_cot") return Task::kAdditionCot;
  if (name == "mini_countdown") return Task::kMiniCountdown;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

std::string task_name(Task task) {
  switch (task) {
    case Task::kCopy: return "copy";
    case Task::kReverse: return "reverse";
    case Task::kAdditionCot: return "addition_cot";
    case Task::kMiniCountdown: return "mini_countdown";
  }
  throw ConfigError("unknown task");
}

Tokenization parse_tokenization(std::string_view name) {
  if (name == "char") return Tokenization::kChar;
  if (name == "whitespace") return Tokenization::kWhitespace;
  throw ConfigError("unknown tokenization '" + std::string(name) + "'");
}

std::string tokenization_name(Tokenization tokenization) {
  return tokenization == Tokenization::kChar ? "char" : "whitespace";
}

// ---------------------------------------------------------------------------
// Synthetic tasks

namespace {

std::string fill_to(std::string s, int width) {
  if (static_cast<int>(s.size()) < width) s.append(width - s.size(), kFillChar);
  return s;
}

std::string random_word(RngStream& rng, int min_len, int max_len) {
  const int len = min_len + static_cast<int>(rng.below(max_len - min_len + 1));
  std::string s;
  for (int i = 0; i < len; ++i) s.push_back(static_cast<char>('a' + rng.below(26)));
  return s;
}

std::string zero_pad(long long value, int digits) {
  std::string s = std::to_string(value);
  if (static_cast<int>(s.size()) < digits) s.insert(0, digits - s.size(), '0');
  return s;
}

// Column-wise addition trace, least significant digit first:
//   "d+d+c=ss;" per column, then "=>answer".
TextExample addition_example(RngStream& rng, int digits) {
  long long limit = 1;
  for (int i = 0; i < digits; ++i) limit *= 10;
  const long long a = static_cast<long long>(rng.below(limit));
  const long long b = static_cast<long long>(rng.below(limit));
  const std::string sa = zero_pad(a, digits), sb = zero_pad(b, digits);
  std::string response;
  int carry = 0;
  for (int col = digits - 1; col >= 0; --col) {
    const int da = sa[col] - '0', db = sb[col] - '0';
    const int s = da + db + carry;
    response += std::to_string(da) + "+" + std::to_string(db) + "+" + std::to_string(carry) +
                "=" + zero_pad(s, 2) + ";";
    carry = s / 10;
  }
  response += "=>" + std::to_string(a + b);
  return {sa + "+" + sb + "=", response, Task::kAdditionCot};
}

// Three digits 1..9 combined with two of {+,-,*}; the prompt lists the
// digits in ascending order and the target.
TextExample countdown_example(RngStream& rng) {
  static constexpr char kOps[] = {'+', '-', '*'};
  for (;;) {
    int n[3];
    for (int& v : n) v = 1 + static_cast<int>(rng.below(9));
    std::string expr;
    expr += static_cast<char>('0' + n[0]);
    expr += kOps[rng.below(3)];
    expr += static_cast<char>('0' + n[1]);
    expr += kOps[rng.below(3)];
    expr += static_cast<char>('0' + n[2]);
    const auto value = evaluate_expression(expr);
    if (!value || *value < 0) continue;
    int sorted[3] = {n[0], n[1], n[2]};
    std::sort(std::begin(sorted), std::end(sorted));
    std::string prompt;
    for (int i = 0; i < 3; ++i) {
      if (i) prompt += ',';
      prompt += static_cast<char>('0' + sorted[i]);
    }
    prompt += "->" + std::to_string(*value) + ":";
    return {prompt, expr + "=>" + std::to_string(*value), Task::kMiniCountdown};
  }
}

}  // namespace

int synthetic_response_width(Task task, const SyntheticOptions& options) {
  switch (task) {
    case Task::kCopy:
    case Task::kReverse: return options.copy_max_len;
    case Task::kAdditionCot: return options.addition_digits * 9 + 2 + options.addition_digits + 1;
    case Task::kMiniCountdown: return 5 + 2 + 3;
  }
  throw ConfigError("unknown task");
}

std::vector<TextExample> generate_synthetic(Task task, int count, std::uint64_t seed,
                                            const SyntheticOptions& options) {
  if (count < 1) throw ConfigError("synthetic example count must be >= 1");
  if (options.addition_digits < 1 || options.addition_digits > 9 || options.copy_min_len < 1 ||
      options.copy_max_len < options.copy_min_len) {
    throw ConfigError("invalid synthetic task options");
  }
  RngStream rng(seed, "synthetic:" + task_name(task));
  const int width = synthetic_response_width(task, options);
  std::vector<TextExample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    TextExample ex;
    switch (task) {
      case Task::kCopy: {
        const std::string w = random_word(rng, options.copy_min_len, options.copy_max_len);
        ex = {w, w, task};
        break;
      }
      case Task::kReverse: {
        const std::string w = random_word(rng, options.copy_min_len, options.copy_max_len);
        ex = {w, std::string(w.rbegin(), w.rend()), task};
        break;
      }
      case Task::kAdditionCot: ex = addition_example(rng, options.addition_digits); break;
      case Task::kMiniCountdown: ex = countdown_example(rng); break;
    }
    ex.response = fill_to(std::move(ex.response), width);
    out.push_back(std::move(ex));
  }
  return out;
}

CorpusSplit generate_split(Task task, int train_count, int eval_count, std::uint64_t seed,
                           const SyntheticOptions& options) {
  if (train_count < 1 || eval_count < 0) throw ConfigError("invalid train/eval sizes");
  // The stream is prefix-stable, so a larger pool extends a smaller one.
  for (std::int64_t pool_size = 2 * (train_count + eval_count);; pool_size *= 2) {
    if (pool_size > 64 * static_cast<std::int64_t>(train_count + eval_count)) {
      throw IngestionError("task " + task_name(task) + " has too few distinct prompts for " +
                           std::to_string(eval_count) + " held-out examples");
    }
    const auto pool = generate_synthetic(task, static_cast<int>(pool_size), seed, options);
    CorpusSplit split;
    std::set<std::string> held_out;
    for (const auto& ex : pool) {
      if (static_cast<int>(split.eval.size()) < eval_count) {
        if (held_out.insert(ex.prompt).second) split.eval.push_back(ex);
      } else if (!held_out.count(ex.prompt)) {
        split.train.push_back(ex);
        if (static_cast<int>(split.train.size()) == train_count) return split;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Tokenization and vocabulary

std::vector<std::string> tokenize(std::string_view text, Tokenization tokenization) {
  std::vector<std::string> out;
  if (tokenization == Tokenization::kChar) {
    out.reserve(text.size());
    for (char c : text) out.emplace_back(1, c);
    return out;
  }
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string detokenize(std::span<const std::string> tokens, Tokenization tokenization) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokenization == Tokenization::kWhitespace && i) out += ' ';
    out += tokens[i];
  }
  return out;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens, std::vector<std::int64_t> frequency,
                       Tokenization tokenization)
    : tokens_(std::move(tokens)), frequency_(std::move(frequency)), tokenization_(tokenization) {
  if (frequency_.size() != tokens_.size()) {
    throw IngestionError("vocabulary frequency table does not match token list");
  }
  std::set<std::string> seen;
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!seen.insert(tokens_[i]).second) {
      throw IngestionError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
    if (frequency_[i] < 0) throw IngestionError("negative token frequency");
    if (tokens_[i] == kMaskToken) mask_id_ = static_cast<int>(i);
    if (tokens_[i] == kPadToken) pad_id_ = static_cast<int>(i);
  }
  if (mask_id_ < 0 || pad_id_ < 0) {
    throw IngestionError("vocabulary lacks [MASK] or [PAD]");
  }
}

int Vocabulary::lookup(std::string_view token) const {
  const auto it = std::find(tokens_.begin(), tokens_.end(), token);
  if (it == tokens_.end()) throw InputError("token '" + std::string(token) + "' not in vocabulary");
  return static_cast<int>(it - tokens_.begin());
}

bool Vocabulary::contains(std::string_view token) const {
  return std::find(tokens_.begin(), tokens_.end(), token) != tokens_.end();
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& tok : tokenize(text, tokenization_)) ids.push_back(lookup(tok));
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::vector<std::string> toks;
  toks.reserve(ids.size());
  for (int id : ids) toks.push_back(token(id));
  return detokenize(toks, tokenization_);
}

nlohmann::json Vocabulary::to_json() const {
  return {{"version", kFormatVersion},
          {"tokenization", tokenization_name(tokenization_)},
          {"tokens", tokens_},
          {"mask_id", mask_id_},
          {"pad_id", pad_id_},
          {"frequency", frequency_}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != kFormatVersion) {
      throw IngestionError("unsupported vocabulary version " + j.at("version").dump());
    }
    Vocabulary v(j.at("tokens").get<std::vector<std::string>>(),
                 j.at("frequency").get<std::vector<std::int64_t>>(),
                 parse_tokenization(j.value("tokenization", std::string("char"))));
    if (v.mask_id_ != j.at("mask_id").get<int>() || v.pad_id_ != j.at("pad_id").get<int>()) {
      throw IngestionError("vocabulary mask_id/pad_id disagree with token list");
    }
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(std::string("malformed vocabulary: ") + e.what());
  }
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << to_json().dump(2) << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError("malformed vocabulary file " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::uint64_t Vocabulary::hash() const { return fnv1a64(to_json().dump()); }

namespace {
Vocabulary vocabulary_from_counts(const std::set<std::string>& seen,
                                  const std::map<std::string, std::int64_t>& counts,
                                  Tokenization tokenization) {
  std::vector<std::string> tokens;
  std::vector<std::int64_t> freq;
  for (const auto& tok : seen) {
    if (tok == kMaskToken || tok == kPadToken) continue;
    tokens.push_back(tok);
    const auto it = counts.find(tok);
    freq.push_back(it == counts.end() ? 0 : it->second);
  }
  tokens.emplace_back(kMaskToken);
  freq.push_back(0);
  tokens.emplace_back(kPadToken);
  freq.push_back(0);
  return Vocabulary(std::move(tokens), std::move(freq), tokenization);
}
}  // namespace

Vocabulary build_vocabulary(std::span<const TextExample> corpus, Tokenization tokenization) {
  if (corpus.empty()) throw IngestionError("cannot build a vocabulary from an empty corpus");
  std::set<std::string> seen;
  std::map<std::string, std::int64_t> counts;
  for (const auto& ex : corpus) {
    for (auto& tok : tokenize(ex.prompt, tokenization)) seen.insert(std::move(tok));
    for (auto& tok : tokenize(ex.response, tokenization)) {
      ++counts[tok];
      seen.insert(std::move(tok));
    }
  }
  return vocabulary_from_counts(seen, counts, tokenization);
}

Vocabulary build_vocabulary(std::span<const std::string> documents, Tokenization tokenization) {
  std::vector<TextExample> corpus;
  corpus.reserve(documents.size());
  for (const auto& d : documents) corpus.push_back({"", d, std::nullopt});
  return build_vocabulary(corpus, tokenization);
}

// ---------------------------------------------------------------------------
// Sequences and batches

TokenSequence encode_example(const Vocabulary& vocab, const TextExample& example) {
  TokenSequence seq;
  seq.ids = vocab.encode(example.prompt);
  seq.prompt_len = static_cast<int>(seq.ids.size());
  const auto response = vocab.encode(example.response);
  if (response.empty()) throw IngestionError("example has an empty response");
  seq.ids.insert(seq.ids.end(), response.begin(), response.end());
  seq.response_len = static_cast<int>(response.size());
  validate_sequence(seq, vocab);
  return seq;
}

std::vector<TokenSequence> encode_corpus(const Vocabulary& vocab,
                                         std::span<const TextExample> examples) {
  std::vector<TokenSequence> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(encode_example(vocab, ex));
  return out;
}

void validate_sequence(const TokenSequence& seq, const Vocabulary& vocab) {
  if (seq.prompt_len < 0 || seq.response_len < 1 || seq.response_end() > seq.length()) {
    throw ContractError("token sequence spans are inconsistent");
  }
  for (int i = 0; i < seq.length(); ++i) {
    const int id = seq.ids[i];
    if (id < 0 || id >= vocab.size()) throw ContractError("token id out of range");
    if (id == vocab.mask_id()) throw ContractError("clean sequence contains [MASK]");
    const bool is_pad = id == vocab.pad_id();
    if (is_pad != (i >= seq.response_end())) {
      throw ContractError("padding must appear exactly as the suffix after the response");
    }
  }
}

std::vector<TextExample> filter_by_length(std::span<const TextExample> examples,
                                          Tokenization tokenization, int max_len) {
  std::vector<TextExample> out;
  for (const auto& ex : examples) {
    const auto n = tokenize(ex.prompt, tokenization).size() + tokenize(ex.response, tokenization).size();
    if (static_cast<int>(n) < max_len) out.push_back(ex);
  }
  return out;
}

std::vector<TokenSequence> pad_to_common_length(std::vector<TokenSequence> seqs, int pad_id) {
  std::size_t len = 0;
  for (const auto& s : seqs) len = std::max(len, s.ids.size());
  for (auto& s : seqs) s.ids.resize(len, pad_id);
  return seqs;
}

std::vector<Batch> make_batches(std::span<const TokenSequence> data, int batch_size,
                                std::uint64_t shuffle_seed, int pad_id, int epoch) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (data.empty()) throw IngestionError("cannot batch an empty dataset");
  const std::uint64_t seed = derive_seed(shuffle_seed, "epoch:" + std::to_string(epoch));
  RngStream rng(seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    Batch b;
    b.seed = seed;
    const std::size_t end = std::min(order.size(), start + batch_size);
    for (std::size_t i = start; i < end; ++i) {
      b.indices.push_back(order[i]);
      b.sequences.push_back(data[order[i]]);
    }
    b.sequences = pad_to_common_length(std::move(b.sequences), pad_id);
    batches.push_back(std::move(b));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Files

std::vector<TextExample> read_corpus_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read corpus " + path.string());
  std::vector<TextExample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TextExample ex{j.at("prompt").get<std::string>(), j.at("response").get<std::string>(),
                     std::nullopt};
      if (j.contains("task")) ex.task = parse_task(j.at("task").get<std::string>());
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw IngestionError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

namespace {
nlohmann::json example_json(const TextExample& ex) {
  nlohmann::json j = {{"prompt", ex.prompt}, {"response", ex.response}};
  if (ex.task) j["task"] = task_name(*ex.task);
  return j;
}
}  // namespace

void write_corpus_jsonl(const std::filesystem::path& path, std::span<const TextExample> examples) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write corpus " + path.string());
  for (const auto& ex : examples) os << example_json(ex).dump() << '\n';
}

std::uint64_t corpus_hash(std::span<const TextExample> examples) {
  std::uint64_t h = fnv1a64("");
  for (const auto& ex : examples) h = fnv1a64(example_json(ex).dump() + "\n", h);
  return h;
}

// ---------------------------------------------------------------------------
// Answers

std::string extract_answer(std::string_view response) {
  const auto arrow = response.rfind("=>");
  std::string_view tail = arrow == std::string_view::npos ? response : response.substr(arrow + 2);
  const auto fill = tail.find(kFillChar);
  if (fill != std::string_view::npos) tail = tail.substr(0, fill);
  return std::string(tail);
}

std::string canonical_answer(const TextExample& example) { return extract_answer(example.response); }

std::optional<long long> evaluate_expression(std::string_view expr) {
  // Sum of signed products.
  std::size_t i = 0;
  auto number = [&]() -> std::optional<long long> {
    if (i >= expr.size() || !std::isdigit(static_cast<unsigned char>(expr[i]))) return std::nullopt;
    long long v = 0;
    while (i < expr.size() && std::isdigit(static_cast<unsigned char>(expr[i]))) {
      v = v * 10 + (expr[i++] - '0');
      if (v > 1'000'000'000LL) return std::nullopt;
    }
    return v;
  };
  long long total = 0;
  long long sign = 1;
  auto term = number();
  if (!term) return std::nullopt;
  long long product = *term;
  while (i < expr.size()) {
    const char op = expr[i++];
    auto next = number();
    if (!next) return std::nullopt;
    if (op == '*') {
      product *= *next;
    } else if (op == '+' || op == '-') {
      total += sign * product;
      sign = op == '+' ? 1 : -1;
      product = *next;
    } else {
      return std::nullopt;
    }
  }
  return total + sign * product;
}

namespace {
bool countdown_correct(const TextExample& reference, std::string_view generated) {
  const auto arrow = reference.prompt.find("->");
  const auto colon = reference.prompt.find(':', arrow == std::string::npos ? 0 : arrow);
  if (arrow == std::string::npos || colon == std::string::npos) return false;
  std::multiset<char> allowed;
  for (char c : reference.prompt.substr(0, arrow)) {
    if (std::isdigit(static_cast<unsigned char>(c))) allowed.insert(c);
  }
  const long long target = std::stoll(reference.prompt.substr(arrow + 2, colon - arrow - 2));
  const auto gen_arrow = generated.find("=>");
  const std::string_view expr = generated.substr(0, gen_arrow);
  std::multiset<char> used;
  for (char c : expr) {
    if (std::isdigit(static_cast<unsigned char>(c))) used.insert(c);
  }
  const auto value = evaluate_expression(expr);
  return value && *value == target && used == allowed;
}
}  // namespace

bool is_correct(const TextExample& reference, std::string_view generated_response) {
  if (reference.task == Task::kMiniCountdown) return countdown_correct(reference, generated_response);
  return extract_answer(generated_response) == canonical_answer(reference);
}

}  // namespace mdlm
