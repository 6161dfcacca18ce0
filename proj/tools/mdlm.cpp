// mdlm: corpus generation, training, decoding, evaluation and confidence
// analysis for masked diffusion language models.
//
// Every subcommand writes under --out. Failures print one JSON line
//   {"error": "<kind>", "message": "..."}
// to stderr and exit with the code of that error kind.

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "mdlm/analysis.hpp"
#include "mdlm/checkpoint.hpp"
#include "mdlm/errors.hpp"
#include "mdlm/run_config.hpp"
#include "mdlm/sampler.hpp"
#include "mdlm/trainer.hpp"

namespace fs = std::filesystem;
using namespace mdlm;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  std::optional<int> threads;
  // train
  std::optional<std::string> objective;
  std::optional<int> H;
  std::optional<std::string> rho_kind;
  std::optional<double> rho_k;
  std::optional<int> epochs;
  std::optional<double> lr;
  // decode / eval
  std::optional<int> gen_len;
  std::optional<int> steps;
  std::optional<int> tokens_per_step;
  std::optional<double> temperature;
  std::vector<int> k_list;
  // inputs
  std::string data;
  std::string run;
  std::string checkpoint;
  std::string vocab;
  std::string corpus;
  std::string resume;
  std::vector<std::string> prompts;
};

// Flags override the file, which overrides the defaults.
RunConfig effective_config(const Flags& f) {
  nlohmann::json j = nlohmann::json::object();
  if (!f.config.empty()) {
    std::ifstream is(f.config);
    if (!is) throw IoError("cannot read config " + f.config);
    try {
      j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config " + f.config + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
  }
  if (f.seed) j["seed"] = *f.seed;
  if (f.threads) j["threads"] = *f.threads;
  auto& obj = j["train"]["objective"];
  if (f.objective) obj["kind"] = *f.objective;
  if (f.H) obj["H"] = *f.H;
  if (f.rho_kind) obj["rho"]["kind"] = *f.rho_kind;
  if (f.rho_k) obj["rho"]["k"] = *f.rho_k;
  if (obj.is_null()) j["train"].erase("objective");
  if (f.epochs) j["train"]["epochs"] = *f.epochs;
  if (f.lr) j["train"]["learning_rate"] = *f.lr;
  if (j["train"].is_null()) j.erase("train");
  if (f.gen_len) j["decode"]["gen_len"] = *f.gen_len;
  if (f.steps) j["decode"]["steps"] = *f.steps;
  if (f.tokens_per_step) j["decode"]["tokens_per_step"] = *f.tokens_per_step;
  if (f.temperature) j["decode"]["temperature"] = *f.temperature;
  return RunConfig::from_json(j);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) throw IoError(what + " not found: " + path.string());
}

fs::path resolve(const std::string& explicit_path, const std::string& run, const fs::path& rel,
                 const std::string& what) {
  fs::path p;
  if (!explicit_path.empty()) p = explicit_path;
  else if (!run.empty()) p = fs::path(run) / rel;
  else throw ConfigError(what + " not given (pass it directly or via --run)");
  require_file(p, what);
  return p;
}

std::vector<TextExample> load_corpus(const fs::path& path) {
  require_file(path, "corpus");
  auto examples = read_corpus_jsonl(path);
  if (examples.empty()) throw IngestionError("corpus " + path.string() + " has no examples");
  return examples;
}

Denoiser load_model(const fs::path& ckpt_path, const Vocabulary& vocab) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  if (ck.config.vocab_size != vocab.size()) {
    throw MismatchError("checkpoint vocab_size " + std::to_string(ck.config.vocab_size) +
                        " does not match vocabulary of " + std::to_string(vocab.size()) + " tokens");
  }
  return model_from_checkpoint(ck);
}

int cmd_show_config(const Flags& f) {
  std::cout << effective_config(f).to_json().dump(2) << '\n';
  return 0;
}

int cmd_gen_corpus(const Flags& f) {
  const RunConfig cfg = effective_config(f);
  const fs::path out(f.out);
  fs::create_directories(out);
  const auto split = make_corpus(cfg);
  write_corpus_jsonl(out / "train.jsonl", split.train);
  write_corpus_jsonl(out / "eval.jsonl", split.eval);
  write_json(out / "config.json", cfg.to_json());
  std::cout << nlohmann::json{{"train", split.train.size()},
                              {"eval", split.eval.size()},
                              {"corpus_hash", corpus_hash(split.train)},
                              {"out", out.string()}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_build_vocab(const Flags& f) {
  const RunConfig cfg = effective_config(f);
  const fs::path corpus_path = !f.corpus.empty() ? fs::path(f.corpus)
                               : !f.data.empty() ? fs::path(f.data) / "train.jsonl"
                                                 : throw ConfigError("build-vocab needs --corpus or --data");
  const auto examples = load_corpus(corpus_path);
  const Vocabulary vocab = build_vocabulary(examples, cfg.corpus.tokenization);
  const fs::path out(f.out);
  fs::create_directories(out);
  vocab.save(out / "vocab.json");
  std::cout << nlohmann::json{{"tokens", vocab.size()}, {"vocab_hash", vocab.hash()}}.dump() << '\n';
  return 0;
}

int cmd_train(const Flags& f) {
  RunConfig cfg = effective_config(f);
  const fs::path out(f.out);

  std::vector<TextExample> train_text;
  Vocabulary vocab;
  if (!f.data.empty()) {
    train_text = load_corpus(fs::path(f.data) / "train.jsonl");
    const fs::path vocab_path = fs::path(f.data) / "vocab.json";
    vocab = fs::exists(vocab_path) ? Vocabulary::load(vocab_path)
                                   : build_vocabulary(train_text, cfg.corpus.tokenization);
  } else {
    const auto split = make_corpus(cfg);
    train_text = split.train;
    vocab = build_vocabulary(train_text, cfg.corpus.tokenization);
    fs::create_directories(out);
    write_corpus_jsonl(out / "train.jsonl", split.train);
    write_corpus_jsonl(out / "eval.jsonl", split.eval);
  }
  if (cfg.model.vocab_size == 0) cfg.model.vocab_size = vocab.size();
  if (cfg.model.vocab_size != vocab.size()) {
    throw MismatchError("model.vocab_size " + std::to_string(cfg.model.vocab_size) +
                        " does not match vocabulary of " + std::to_string(vocab.size()) + " tokens");
  }
  cfg.model.validate();

  auto data = encode_corpus(vocab, train_text);
  int longest = 0;
  for (const auto& s : data) longest = std::max(longest, s.length());
  if (longest > cfg.model.max_seq_len) {
    throw ConfigError("longest training sequence (" + std::to_string(longest) +
                      ") exceeds model.max_seq_len");
  }

  std::optional<Checkpoint> resume;
  if (!f.resume.empty()) {
    require_file(f.resume, "resume checkpoint");
    resume = load_checkpoint(f.resume);
  }
  fs::create_directories(out);
  vocab.save(out / "vocab.json");
  write_json(out / "config.json", cfg.to_json());

  Denoiser model(cfg.model, derive_seed(cfg.seed, "model"));
  TrainOptions opts;
  opts.out_dir = out;
  opts.resume = resume ? &*resume : nullptr;
  opts.manifest_config = cfg.to_json();
  opts.vocab_hash = vocab.hash();
  opts.corpus_hash = corpus_hash(train_text);
  const auto total = total_optimizer_steps(cfg.train, data.size());
  opts.on_step = [&](const StepRecord& r) {
    if ((r.step + 1) % 50 == 0 || r.step + 1 == total) {
      std::cerr << "step " << r.step + 1 << "/" << total << " epoch " << r.epoch << " loss "
                << r.loss << " lr " << r.learning_rate << '\n';
    }
  };
  const auto result = train(cfg.train, data, special_ids(vocab), model, opts);
  std::cout << nlohmann::json{{"steps", result.state.step},
                              {"final_loss", result.manifest.records.empty()
                                                 ? 0.0
                                                 : result.manifest.records.back().loss},
                              {"checkpoint", (out / "checkpoints" / "final.ckpt").string()}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_generate(const Flags& f) {
  const RunConfig cfg = effective_config(f);
  const Vocabulary vocab = Vocabulary::load(resolve(f.vocab, f.run, "vocab.json", "vocabulary"));
  const Denoiser model =
      load_model(resolve(f.checkpoint, f.run, "checkpoints/final.ckpt", "checkpoint"), vocab);
  if (f.prompts.empty()) throw ConfigError("generate needs at least one --prompt");
  RngStream rng(cfg.seed, "generate");
  for (const auto& p : f.prompts) {
    const auto ids = vocab.encode(p);
    const auto seq = generate(model, ids, cfg.decode, special_ids(vocab), rng);
    const std::span<const int> resp(seq.ids.data() + seq.prompt_len, seq.response_len);
    const std::string text = vocab.decode(resp);
    std::cout << nlohmann::json{{"prompt", p}, {"response", text}, {"answer", extract_answer(text)}}
                     .dump()
              << '\n';
  }
  return 0;
}

int cmd_eval(const Flags& f) {
  RunConfig cfg = effective_config(f);
  const Vocabulary vocab = Vocabulary::load(resolve(f.vocab, f.run, "vocab.json", "vocabulary"));
  const Denoiser model =
      load_model(resolve(f.checkpoint, f.run, "checkpoints/final.ckpt", "checkpoint"), vocab);
  const auto eval_set = load_corpus(resolve(f.corpus, f.run, "eval.jsonl", "eval corpus"));
  const std::vector<int> ks = f.k_list.empty() ? std::vector<int>{1} : f.k_list;
  const auto report = evaluate(model, vocab, eval_set, cfg.decode, ks,
                               derive_seed(cfg.seed, "eval"), cfg.threads);
  const fs::path out(f.out);
  fs::create_directories(out);
  nlohmann::json j = report.to_json();
  j["config"] = cfg.to_json();
  write_json(out / "eval.json", j);
  {
    std::ofstream os(out / "eval.csv");
    if (!os) throw IoError("cannot write eval.csv");
    os << EvalReport::csv_header() << '\n'
       << report.csv_row(objective_name(cfg.train.objective.kind), cfg.seed) << '\n';
  }
  nlohmann::json summary{{"accuracy", report.accuracy}, {"prompts", report.records.size()}};
  for (const auto& [k, v] : report.pass_at_k) summary["pass@" + std::to_string(k)] = v;
  for (const auto& [k, v] : report.avg_at_k) summary["avg@" + std::to_string(k)] = v;
  std::cout << summary.dump() << '\n';
  return 0;
}

int cmd_analyze(const Flags& f) {
  const RunConfig cfg = effective_config(f);
  const auto examples = load_corpus(resolve(f.corpus, f.run, "train.jsonl", "corpus"));
  const Vocabulary vocab = Vocabulary::load(resolve(f.vocab, f.run, "vocab.json", "vocabulary"));
  const Denoiser model =
      load_model(resolve(f.checkpoint, f.run, "checkpoints/final.ckpt", "checkpoint"), vocab);
  auto data = encode_corpus(vocab, examples);
  if (cfg.analysis.max_examples > 0 && static_cast<int>(data.size()) > cfg.analysis.max_examples) {
    data.resize(cfg.analysis.max_examples);
  }

  BinGrid grid(make_grid(cfg.analysis, vocab));
  RngStream rng(cfg.seed, "analysis");
  collect(model, vocab, data, cfg.analysis.samples_per_example, rng,
          [&](const ConfidenceRecord& r) { grid.add(r); });
  const auto art = report(grid, cfg.analysis.top_tokens, fs::path(f.out), &vocab);
  for (const auto& w : art.warnings) {
    std::cerr << nlohmann::json{{"warning", w}}.dump() << '\n';
  }
  std::cout << nlohmann::json{{"records", grid.total_count()},
                              {"cells", art.cells_csv.string()},
                              {"chart", art.chart_svg.string()}}
                   .dump()
            << '\n';
  return 0;
}

int fail(ErrorKind kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", error_kind_name(kind)}, {"message", message}}.dump() << '\n';
  return static_cast<int>(kind);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked diffusion language model toolkit"};
  app.require_subcommand(1);
  Flags f;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "JSON run configuration");
    sub->add_option("--seed", f.seed, "Root seed for every random stream");
    sub->add_option("--out", f.out, "Output directory");
    sub->add_option("--threads", f.threads, "Worker threads");
  };
  auto add_train = [&](CLI::App* sub) {
    sub->add_option("--objective", f.objective, "vanilla, lift, lift_a, top_k, bottom_k, random2, random3, gift, cart");
    sub->add_option("--H", f.H, "Regime threshold parameter");
    sub->add_option("--rho-kind", f.rho_kind, "uniform, fixed or truncated_uniform");
    sub->add_option("--rho-k", f.rho_k, "Parameter of the fixed and truncated rho strategies");
    sub->add_option("--epochs", f.epochs);
    sub->add_option("--lr", f.lr, "Base learning rate");
  };
  auto add_decode = [&](CLI::App* sub) {
    sub->add_option("--gen-len", f.gen_len);
    sub->add_option("--steps", f.steps);
    sub->add_option("--tokens-per-step", f.tokens_per_step);
    sub->add_option("--temperature", f.temperature);
  };
  auto add_model_inputs = [&](CLI::App* sub) {
    sub->add_option("--run", f.run, "Training run directory (supplies checkpoint and vocabulary)");
    sub->add_option("--checkpoint", f.checkpoint);
    sub->add_option("--vocab", f.vocab);
  };

  auto* gen_corpus = app.add_subcommand("gen-corpus", "Generate a synthetic train/eval corpus");
  add_common(gen_corpus);
  auto* build_vocab = app.add_subcommand("build-vocab", "Build a vocabulary from a corpus");
  add_common(build_vocab);
  build_vocab->add_option("--corpus", f.corpus, "Corpus JSONL");
  build_vocab->add_option("--data", f.data, "Directory holding train.jsonl");
  auto* train_cmd = app.add_subcommand("train", "Train a denoiser");
  add_common(train_cmd);
  add_train(train_cmd);
  train_cmd->add_option("--data", f.data, "Directory with train.jsonl (and optionally vocab.json)");
  train_cmd->add_option("--resume", f.resume, "Checkpoint to resume from");
  auto* generate_cmd = app.add_subcommand("generate", "Decode responses for prompts");
  add_common(generate_cmd);
  add_decode(generate_cmd);
  add_model_inputs(generate_cmd);
  generate_cmd->add_option("--prompt", f.prompts, "Prompt text (repeatable)");
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate exact match and pass@k");
  add_common(eval_cmd);
  add_decode(eval_cmd);
  add_model_inputs(eval_cmd);
  eval_cmd->add_option("--corpus", f.corpus, "Eval corpus JSONL (default <run>/eval.jsonl)");
  eval_cmd->add_option("--k-list", f.k_list, "Values of k for pass@k and avg@k")->delimiter(',');
  auto* analyze_cmd = app.add_subcommand("analyze", "Confidence vs frequency and time analysis");
  add_common(analyze_cmd);
  add_model_inputs(analyze_cmd);
  analyze_cmd->add_option("--corpus", f.corpus, "Corpus JSONL (default <run>/train.jsonl)");
  auto* show_config = app.add_subcommand("show-config", "Print the fully defaulted configuration");
  add_common(show_config);
  add_train(show_config);
  add_decode(show_config);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(ErrorKind::kConfig, e.what());
  }

  try {
    if (*gen_corpus) return cmd_gen_corpus(f);
    if (*build_vocab) return cmd_build_vocab(f);
    if (*train_cmd) return cmd_train(f);
    if (*generate_cmd) return cmd_generate(f);
    if (*eval_cmd) return cmd_eval(f);
    if (*analyze_cmd) return cmd_analyze(f);
    if (*show_config) return cmd_show_config(f);
  } catch (const Error& e) {
    return fail(e.kind(), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(ErrorKind::kConfig, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(ErrorKind::kIo, e.what());
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", "internal"}, {"message", e.what()}}.dump() << '\n';
    return 1;
  }
  return 0;
}
