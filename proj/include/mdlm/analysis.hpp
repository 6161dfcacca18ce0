#pragma once

// Confidence-vs-frequency study. Response tokens are masked at random times,
// the probability the model assigns to the true token is recorded, and the
// records are binned by token frequency and log diffusion time.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mdlm/corpus.hpp"
#include "mdlm/denoiser.hpp"

namespace mdlm {

struct ConfidenceRecord {
  int token_id = 0;
  std::int64_t frequency = 0;
  double t = 0.0;
  double confidence = 0.0;
};

// Streams one record per masked response position. Each example gets
// `samples_per_example` draws of t ~ U[t_min, 1); forward passes run in
// evaluation mode, batched over equal-length sequences.
void collect(const Denoiser& model, const Vocabulary& vocab, std::span<const TokenSequence> corpus,
             int samples_per_example, RngStream& rng,
             const std::function<void(const ConfidenceRecord&)>& sink, double t_min = kDefaultTMin);
std::vector<ConfidenceRecord> collect(const Denoiser& model, const Vocabulary& vocab,
                                      std::span<const TokenSequence> corpus,
                                      int samples_per_example, RngStream& rng,
                                      double t_min = kDefaultTMin);

// Single-pass mean and population variance (Welford), mergeable (Chan et al.).
class RunningStats {
 public:
  void add(double x);
  void merge(const RunningStats& other);
  std::int64_t count() const { return n_; }
  double mean() const { return mean_; }
  double variance() const { return n_ > 0 ? m2_ / static_cast<double>(n_) : 0.0; }

 private:
  std::int64_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

// Bin i covers [edges[i], edges[i+1]); values below the first edge fall in
// the first bin and values at or above the last edge in the last one.
struct GridSpec {
  std::vector<double> freq_edges;
  std::vector<double> time_edges;

  void validate() const;

  // 1, 10, ..., 10^max_decade, +inf.
  static std::vector<double> decade_edges(int max_decade = 5);
  // `bins` geometrically spaced bins over [lo, hi], the last closed at hi.
  static std::vector<double> log_edges(double lo, double hi, int bins);
  // 0, then `bins` log-spaced bins over [2^-2, 2^-1/4], then 1.
  static std::vector<double> default_time_edges(int bins = 8);
  static GridSpec defaults(int time_bins = 8);
};

struct CellStats {
  RunningStats confidence;
  double frequency_sum = 0.0;

  void add(double frequency, double confidence);
  void merge(const CellStats& other);
  double mean_frequency() const;
};

struct TokenStats {
  std::int64_t frequency = 0;
  RunningStats confidence;
};

class BinGrid {
 public:
  explicit BinGrid(GridSpec spec);

  // Throws InputError on a record with frequency < 1 or confidence outside
  // [0, 1].
  void add(const ConfidenceRecord& record);
  void merge(const BinGrid& other);

  const GridSpec& spec() const { return spec_; }
  int num_freq_bins() const { return static_cast<int>(spec_.freq_edges.size()) - 1; }
  int num_time_bins() const { return static_cast<int>(spec_.time_edges.size()) - 1; }
  int freq_bin(double frequency) const;
  int time_bin(double t) const;

  const CellStats& cell(int freq_bin, int time_bin) const;
  CellStats freq_marginal(int freq_bin) const;
  CellStats time_marginal(int time_bin) const;
  std::int64_t total_count() const;
  const std::map<int, TokenStats>& tokens() const { return tokens_; }

 private:
  GridSpec spec_;
  std::vector<CellStats> cells_;  // freq-major
  std::map<int, TokenStats> tokens_;
};

BinGrid bin(std::span<const ConfidenceRecord> records, const GridSpec& spec);

struct ReportArtifacts {
  std::filesystem::path cells_csv;
  std::filesystem::path marginal_csv;
  std::filesystem::path time_csv;
  std::filesystem::path chart_svg;
  std::filesystem::path tokens_txt;
  std::vector<std::string> warnings;
};

// Writes cells.csv, marginal.csv, time_bins.csv, confidence.svg and
// tokens.txt under `out_dir`. `vocab` supplies token strings for the token
// lists (ids are printed when it is null).
ReportArtifacts report(const BinGrid& grid, int top_tokens_per_bin,
                       const std::filesystem::path& out_dir, const Vocabulary* vocab = nullptr);

std::string render_svg(const BinGrid& grid);

}  // namespace mdlm
