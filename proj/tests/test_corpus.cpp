#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "mdlm/corpus.hpp"
#include "mdlm/errors.hpp"

using namespace mdlm;

TEST_CASE("addition trace: columns least significant first") {
  const auto ex = generate_synthetic(Task::kAdditionCot, 50, 11);
  for (const auto& e : ex) {
    REQUIRE(e.prompt.size() == 6);
    CHECK(e.prompt[2] == '+');
    CHECK(e.prompt[5] == '=');
    CHECK(static_cast<int>(e.response.size()) == synthetic_response_width(Task::kAdditionCot));
    const int a = std::stoi(e.prompt.substr(0, 2)), b = std::stoi(e.prompt.substr(3, 2));
    CHECK(canonical_answer(e) == std::to_string(a + b));
    // Units column first: "a1+b1+0=ss;"
    const int units = (a % 10) + (b % 10);
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%d+%d+0=%02d;", a % 10, b % 10, units);
    CHECK(e.response.rfind(buf, 0) == 0);
  }
}

TEST_CASE("hand-written addition example") {
  const TextExample ex{"47+85=", "7+5+0=12;4+8+1=13;=>132", Task::kAdditionCot};
  CHECK(extract_answer(ex.response) == "132");
  CHECK(is_correct(ex, "garbage=>132##"));
  CHECK_FALSE(is_correct(ex, "=>131"));
  CHECK_FALSE(is_correct(ex, ""));
}

TEST_CASE("countdown examples are solvable and verified arithmetically") {
  const auto ex = generate_synthetic(Task::kMiniCountdown, 100, 5);
  for (const auto& e : ex) {
    CHECK(is_correct(e, e.response));
    CHECK(static_cast<int>(e.response.size()) == synthetic_response_width(Task::kMiniCountdown));
  }
  const TextExample ref{"2,3,4->14:", "2+3*4=>14", Task::kMiniCountdown};
  CHECK(is_correct(ref, "3*4+2=>14"));      // different order, same digits
  CHECK_FALSE(is_correct(ref, "2*3+8=>14"));  // wrong digits
  CHECK_FALSE(is_correct(ref, "2+3+4=>14"));  // wrong value
  CHECK_FALSE(is_correct(ref, "2+*3=>14"));   // malformed
}

TEST_CASE("evaluate_expression precedence") {
  CHECK(evaluate_expression("2+3*4") == 14);
  CHECK(evaluate_expression("9-2*5") == -1);
  CHECK(evaluate_expression("7*8-6") == 50);
  CHECK_FALSE(evaluate_expression("3+").has_value());
  CHECK_FALSE(evaluate_expression("a").has_value());
}

TEST_CASE("copy and reverse tasks") {
  for (const auto& e : generate_synthetic(Task::kCopy, 20, 1)) CHECK(canonical_answer(e) == e.prompt);
  for (const auto& e : generate_synthetic(Task::kReverse, 20, 1)) {
    CHECK(canonical_answer(e) == std::string(e.prompt.rbegin(), e.prompt.rend()));
  }
}

TEST_CASE("synthetic generation is seeded") {
  CHECK(generate_synthetic(Task::kAdditionCot, 30, 4) == generate_synthetic(Task::kAdditionCot, 30, 4));
  CHECK(generate_synthetic(Task::kAdditionCot, 30, 4) != generate_synthetic(Task::kAdditionCot, 30, 5));
  CHECK_THROWS_AS(generate_synthetic(Task::kAdditionCot, 0, 1), ConfigError);
}

TEST_CASE("train/eval split keeps eval prompts out of train") {
  const auto split = generate_split(Task::kAdditionCot, 500, 100, 9);
  CHECK(split.train.size() == 500);
  CHECK(split.eval.size() == 100);
  std::set<std::string> eval_prompts;
  for (const auto& e : split.eval) eval_prompts.insert(e.prompt);
  CHECK(eval_prompts.size() == 100);
  for (const auto& e : split.train) CHECK(eval_prompts.count(e.prompt) == 0);
  // One-digit addition has only 100 prompts.
  SyntheticOptions one;
  one.addition_digits = 1;
  CHECK_THROWS_AS(generate_split(Task::kAdditionCot, 10, 200, 1, one), IngestionError);
}

TEST_CASE("vocabulary: ordering, specials, frequencies, round trip") {
  const std::vector<TextExample> corpus{{"ab", "bba", std::nullopt}, {"c", "b", std::nullopt}};
  const auto v = build_vocabulary(corpus, Tokenization::kChar);
  CHECK(v.tokens() == std::vector<std::string>{"a", "b", "c", kMaskToken, kPadToken});
  CHECK(v.mask_id() == 3);
  CHECK(v.pad_id() == 4);
  CHECK(v.frequency(v.lookup("b")) == 3);
  CHECK(v.frequency(v.lookup("a")) == 1);
  CHECK(v.frequency(v.lookup("c")) == 0);  // prompt only
  CHECK(v.frequency(v.mask_id()) == 0);
  CHECK_THROWS_AS(v.lookup("z"), InputError);
  CHECK(v.decode(v.encode("cab")) == "cab");

  const auto again = Vocabulary::from_json(v.to_json());
  CHECK(again.tokens() == v.tokens());
  CHECK(again.frequency() == v.frequency());
  CHECK(again.hash() == v.hash());

  const std::vector<TextExample> none;
  CHECK_THROWS_AS(build_vocabulary(none, Tokenization::kChar), IngestionError);
}

TEST_CASE("whitespace tokenization") {
  const auto toks = tokenize("the  cat\tsat", Tokenization::kWhitespace);
  CHECK(toks == std::vector<std::string>{"the", "cat", "sat"});
  CHECK(detokenize(toks, Tokenization::kWhitespace) == "the cat sat");
  const std::vector<std::string> docs{"a b a", "b c"};
  const auto v = build_vocabulary(docs, Tokenization::kWhitespace);
  CHECK(v.frequency(v.lookup("a")) == 2);
}

TEST_CASE("encoded sequences mark the response span") {
  const std::vector<TextExample> corpus{{"12+34=", "x", std::nullopt}};
  const auto v = build_vocabulary(corpus, Tokenization::kChar);
  const auto s = encode_example(v, corpus[0]);
  CHECK(s.prompt_len == 6);
  CHECK(s.response_len == 1);
  CHECK(s.is_response(6));
  CHECK_FALSE(s.is_response(5));
  validate_sequence(s, v);
  TokenSequence bad = s;
  bad.response_len = 3;
  CHECK_THROWS_AS(validate_sequence(bad, v), ContractError);
  bad = s;
  bad.ids[6] = v.mask_id();
  CHECK_THROWS_AS(validate_sequence(bad, v), ContractError);
}

TEST_CASE("batches: seeded order, padding, final partial batch") {
  const auto text = generate_synthetic(Task::kCopy, 10, 2);
  const auto v = build_vocabulary(text, Tokenization::kChar);
  const auto seqs = encode_corpus(v, text);
  const auto b1 = make_batches(seqs, 4, 7, v.pad_id(), 0);
  const auto b2 = make_batches(seqs, 4, 7, v.pad_id(), 0);
  const auto b3 = make_batches(seqs, 4, 7, v.pad_id(), 1);
  REQUIRE(b1.size() == 3);
  CHECK(b1.back().size() == 2);
  CHECK(b1[0].indices == b2[0].indices);
  std::vector<std::size_t> all1, all3;
  for (const auto& b : b1) all1.insert(all1.end(), b.indices.begin(), b.indices.end());
  for (const auto& b : b3) all3.insert(all3.end(), b.indices.begin(), b.indices.end());
  CHECK(all1 != all3);
  std::sort(all1.begin(), all1.end());
  for (std::size_t i = 0; i < all1.size(); ++i) CHECK(all1[i] == i);
  for (const auto& b : b1) {
    for (std::size_t i = 0; i < b.sequences.size(); ++i) {
      const auto& s = b.sequences[i];
      CHECK(s.length() == b.length());
      const auto& orig = seqs[b.indices[i]];
      CHECK(std::equal(orig.ids.begin(), orig.ids.end(), s.ids.begin()));
      for (int p = orig.length(); p < s.length(); ++p) CHECK(s.ids[p] == v.pad_id());
      CHECK(s.response_len == orig.response_len);
    }
  }
}

TEST_CASE("length filter drops sequences at or above max_len") {
  const std::vector<TextExample> ex{{"ab", "cd", std::nullopt}, {"abc", "de", std::nullopt}};
  const auto kept = filter_by_length(ex, Tokenization::kChar, 5);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].prompt == "ab");
}

TEST_CASE("JSONL round trip and hashing") {
  const auto ex = generate_synthetic(Task::kMiniCountdown, 5, 3);
  const auto path = std::filesystem::temp_directory_path() / "mdlm_corpus_test.jsonl";
  write_corpus_jsonl(path, ex);
  CHECK(read_corpus_jsonl(path) == ex);
  CHECK(corpus_hash(ex) == corpus_hash(read_corpus_jsonl(path)));
  auto changed = ex;
  changed[0].response += "x";
  CHECK(corpus_hash(changed) != corpus_hash(ex));
  {
    std::ofstream os(path);
    os << "{\"prompt\": \"a\"}\n";
  }
  CHECK_THROWS_AS(read_corpus_jsonl(path), IngestionError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_corpus_jsonl(path), IoError);
}
