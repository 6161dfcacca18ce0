#pragma once

// SFT corpora: synthetic task generation, JSON-lines ingestion, vocabulary
// construction with response-token frequencies, and padded batching.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace mdlm {

enum class Task { kCopy, kReverse, kAdditionCot, kMiniCountdown };
enum class Tokenization { kChar, kWhitespace };

Task parse_task(std::string_view name);
std::string task_name(Task task);
Tokenization parse_tokenization(std::string_view name);
std::string tokenization_name(Tokenization tokenization);

// A clean prompt/response pair before tokenization.
struct TextExample {
  std::string prompt;
  std::string response;
  std::optional<Task> task;

  bool operator==(const TextExample&) const = default;
};

// Synthetic responses are right-filled with this character to a per-task
// fixed width, so every example of a task has the same response length.
inline constexpr char kFillChar = '#';

struct SyntheticOptions {
  int addition_digits = 2;
  int copy_min_len = 3;
  int copy_max_len = 8;
};

std::vector<TextExample> generate_synthetic(Task task, int count, std::uint64_t seed,
                                            const SyntheticOptions& options = {});

struct CorpusSplit {
  std::vector<TextExample> train;
  std::vector<TextExample> eval;
};

// Eval takes the first `eval_count` distinct prompts of the seeded stream;
// train takes the following examples whose prompt is not in eval.
CorpusSplit generate_split(Task task, int train_count, int eval_count, std::uint64_t seed,
                           const SyntheticOptions& options = {});

// Fixed response width emitted by generate_synthetic for `task`.
int synthetic_response_width(Task task, const SyntheticOptions& options = {});

std::vector<std::string> tokenize(std::string_view text, Tokenization tokenization);
std::string detokenize(std::span<const std::string> tokens, Tokenization tokenization);

inline constexpr const char* kMaskToken = "[MASK]";
inline constexpr const char* kPadToken = "[PAD]";

class Vocabulary {
 public:
  static constexpr int kFormatVersion = 1;

  Vocabulary() = default;
  Vocabulary(std::vector<std::string> tokens, std::vector<std::int64_t> frequency,
             Tokenization tokenization);

  int size() const { return static_cast<int>(tokens_.size()); }
  int mask_id() const { return mask_id_; }
  int pad_id() const { return pad_id_; }
  Tokenization tokenization() const { return tokenization_; }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<std::int64_t>& frequency() const { return frequency_; }
  std::int64_t frequency(int id) const { return frequency_.at(id); }

  // Throws InputError for unknown tokens.
  int lookup(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(int id) const { return tokens_.at(id); }

  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  std::uint64_t hash() const;

 private:
  std::vector<std::string> tokens_;
  std::vector<std::int64_t> frequency_;
  Tokenization tokenization_ = Tokenization::kChar;
  int mask_id_ = -1;
  int pad_id_ = -1;
};

// Tokens cover prompts and responses; frequencies count response tokens.
// Throws IngestionError on an empty corpus.
Vocabulary build_vocabulary(std::span<const TextExample> corpus, Tokenization tokenization);
// Plain documents are counted as responses with an empty prompt.
Vocabulary build_vocabulary(std::span<const std::string> documents, Tokenization tokenization);

struct TokenSequence {
  std::vector<int> ids;
  int prompt_len = 0;
  int response_len = 0;

  int length() const { return static_cast<int>(ids.size()); }
  int response_begin() const { return prompt_len; }
  int response_end() const { return prompt_len + response_len; }
  bool is_response(int pos) const { return pos >= prompt_len && pos < response_end(); }

  bool operator==(const TokenSequence&) const = default;
};

TokenSequence encode_example(const Vocabulary& vocab, const TextExample& example);
std::vector<TokenSequence> encode_corpus(const Vocabulary& vocab,
                                         std::span<const TextExample> examples);

// Checks the TokenSequence invariants against `vocab`; throws ContractError.
void validate_sequence(const TokenSequence& seq, const Vocabulary& vocab);

// Keeps examples whose combined token count is below `max_len`.
std::vector<TextExample> filter_by_length(std::span<const TextExample> examples,
                                          Tokenization tokenization, int max_len);

struct Batch {
  std::vector<TokenSequence> sequences;
  std::vector<std::size_t> indices;  // positions in the source data
  std::uint64_t seed = 0;

  int length() const { return sequences.empty() ? 0 : sequences.front().length(); }
  int size() const { return static_cast<int>(sequences.size()); }
};

// Right-pads every sequence to the longest one.
std::vector<TokenSequence> pad_to_common_length(std::vector<TokenSequence> seqs, int pad_id);

// One epoch of batches in a seeded order. The final partial batch is kept.
std::vector<Batch> make_batches(std::span<const TokenSequence> data, int batch_size,
                                std::uint64_t shuffle_seed, int pad_id, int epoch = 0);

// JSON lines: {"prompt": ..., "response": ...} with an optional "task".
std::vector<TextExample> read_corpus_jsonl(const std::filesystem::path& path);
void write_corpus_jsonl(const std::filesystem::path& path, std::span<const TextExample> examples);
std::uint64_t corpus_hash(std::span<const TextExample> examples);

// Final answer of a response: the text after the last "=>" if present,
// otherwise the whole response, truncated at the first fill character.
std::string extract_answer(std::string_view response);
// Canonical answer of a reference example.
std::string canonical_answer(const TextExample& example);
// Grades a generated response against the reference example. Countdown
// responses are verified arithmetically; other tasks compare answers.
bool is_correct(const TextExample& reference, std::string_view generated_response);

// Evaluates a +,-,* expression over non-negative integers with the usual
// precedence. Returns nullopt on malformed input.
std::optional<long long> evaluate_expression(std::string_view expr);

}  // namespace mdlm
