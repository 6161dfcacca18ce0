#include "mdlm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "mdlm/errors.hpp"

namespace mdlm {

void collect(const Denoiser& model, const Vocabulary& vocab, std::span<const TokenSequence> corpus,
             int samples_per_example, RngStream& rng,
             const std::function<void(const ConfidenceRecord&)>& sink, double t_min) {
  if (vocab.size() != model.config().vocab_size) {
    throw MismatchError("vocabulary size " + std::to_string(vocab.size()) +
                        " differs from model vocab_size " +
                        std::to_string(model.config().vocab_size));
  }
  if (samples_per_example < 1) throw ConfigError("samples_per_example must be positive");
  if (!(t_min >= 0.0 && t_min < 1.0)) throw ConfigError("t_min must lie in [0, 1)");
  const int V = vocab.size();
  constexpr std::size_t kChunk = 64;

  struct Item {
    const TokenSequence* clean;
    CorruptedSequence corrupted;
  };
  std::vector<Item> pending;
  auto flush = [&] {
    // Forward each run of equal-length sequences as one batch.
    std::stable_sort(pending.begin(), pending.end(), [](const Item& a, const Item& b) {
      return a.clean->length() < b.clean->length();
    });
    std::size_t begin = 0;
    while (begin < pending.size()) {
      std::size_t end = begin;
      const int L = pending[begin].clean->length();
      std::vector<int> ids;
      while (end < pending.size() && pending[end].clean->length() == L) {
        ids.insert(ids.end(), pending[end].corrupted.ids.begin(), pending[end].corrupted.ids.end());
        ++end;
      }
      NoGradGuard no_grad;
      const Tensor<double> lp = model
                                    .forward(ids, static_cast<int>(end - begin), L,
                                             ForwardOptions{false, nullptr, vocab.pad_id()})
                                    .value();
      for (std::size_t b = begin; b < end; ++b) {
        const Item& item = pending[b];
        for (int pos : item.corrupted.mask_set) {
          const int tok = item.clean->ids[pos];
          const double logp = lp.raw()[(static_cast<std::ptrdiff_t>(b - begin) * L + pos) * V + tok];
          sink(ConfidenceRecord{tok, vocab.frequency(tok), item.corrupted.source_t, std::exp(logp)});
        }
      }
      begin = end;
    }
    pending.clear();
  };

  for (const auto& seq : corpus) {
    for (int s = 0; s < samples_per_example; ++s) {
      const double t = rng.uniform(t_min, 1.0);
      pending.push_back(Item{&seq, corrupt(seq, t, vocab.mask_id(), rng)});
    }
    if (pending.size() >= kChunk) flush();
  }
  flush();
}

std::vector<ConfidenceRecord> collect(const Denoiser& model, const Vocabulary& vocab,
                                      std::span<const TokenSequence> corpus,
                                      int samples_per_example, RngStream& rng, double t_min) {
  std::vector<ConfidenceRecord> out;
  collect(model, vocab, corpus, samples_per_example, rng,
          [&](const ConfidenceRecord& r) { out.push_back(r); }, t_min);
  return out;
}

void RunningStats::add(double x) {
  ++n_;
  const double delta = x - mean_;
  mean_ += delta / static_cast<double>(n_);
  m2_ += delta * (x - mean_);
}

void RunningStats::merge(const RunningStats& other) {
  if (other.n_ == 0) return;
  if (n_ == 0) {
    *this = other;
    return;
  }
  const double na = static_cast<double>(n_), nb = static_cast<double>(other.n_);
  const double n = na + nb;
  const double delta = other.mean_ - mean_;
  mean_ += delta * nb / n;
  m2_ += other.m2_ + delta * delta * na * nb / n;
  n_ += other.n_;
}

namespace {

void check_edges(const std::vector<double>& edges, const char* what) {
  if (edges.size() < 3) {
    throw ConfigError(std::string(what) + " needs at least 2 bins (3 edges)");
  }
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (!(edges[i] > edges[i - 1])) {
      throw ConfigError(std::string(what) + " edges must be strictly increasing");
    }
  }
}

int locate(const std::vector<double>& edges, double x) {
  const int bins = static_cast<int>(edges.size()) - 1;
  const auto it = std::upper_bound(edges.begin(), edges.end(), x);
  const int idx = static_cast<int>(it - edges.begin()) - 1;
  return std::clamp(idx, 0, bins - 1);
}

}  // namespace

void GridSpec::validate() const {
  check_edges(freq_edges, "frequency grid");
  check_edges(time_edges, "time grid");
}

std::vector<double> GridSpec::decade_edges(int max_decade) {
  if (max_decade < 1) throw ConfigError("max_decade must be at least 1");
  std::vector<double> e;
  for (int d = 0; d <= max_decade; ++d) e.push_back(std::pow(10.0, d));
  e.push_back(std::numeric_limits<double>::infinity());
  return e;
}

std::vector<double> GridSpec::log_edges(double lo, double hi, int bins) {
  if (!(lo > 0.0) || !(hi > lo) || bins < 1) {
    throw ConfigError("log_edges needs 0 < lo < hi and bins >= 1");
  }
  std::vector<double> e;
  const double a = std::log(lo), b = std::log(hi);
  for (int i = 0; i < bins; ++i) e.push_back(std::exp(a + (b - a) * i / bins));
  // The top edge sits just above hi so hi itself lands in the last bin.
  e.push_back(std::nextafter(hi, std::numeric_limits<double>::infinity()));
  return e;
}

std::vector<double> GridSpec::default_time_edges(int bins) {
  if (bins < 1) throw ConfigError("time bins must be positive");
  std::vector<double> e{0.0};
  for (int i = 0; i <= bins; ++i) e.push_back(std::exp2(-2.0 + 1.75 * i / bins));
  e.push_back(1.0);
  return e;
}

GridSpec GridSpec::defaults(int time_bins) {
  return GridSpec{decade_edges(), default_time_edges(time_bins)};
}

void CellStats::add(double frequency, double confidence_value) {
  confidence.add(confidence_value);
  frequency_sum += frequency;
}

void CellStats::merge(const CellStats& other) {
  confidence.merge(other.confidence);
  frequency_sum += other.frequency_sum;
}

double CellStats::mean_frequency() const {
  return confidence.count() ? frequency_sum / static_cast<double>(confidence.count()) : 0.0;
}

BinGrid::BinGrid(GridSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  cells_.resize(static_cast<std::size_t>(num_freq_bins()) * num_time_bins());
}

int BinGrid::freq_bin(double frequency) const { return locate(spec_.freq_edges, frequency); }
int BinGrid::time_bin(double t) const { return locate(spec_.time_edges, t); }

void BinGrid::add(const ConfidenceRecord& r) {
  if (r.frequency < 1) {
    throw InputError("record for token " + std::to_string(r.token_id) + " has frequency " +
                     std::to_string(r.frequency) + "; only tokens seen in the corpus can be binned");
  }
  if (!(r.confidence >= 0.0 && r.confidence <= 1.0)) {
    throw InputError("record for token " + std::to_string(r.token_id) + " has confidence " +
                     std::to_string(r.confidence) + " outside [0, 1]");
  }
  const int f = freq_bin(static_cast<double>(r.frequency));
  const int t = time_bin(r.t);
  cells_[static_cast<std::size_t>(f) * num_time_bins() + t].add(static_cast<double>(r.frequency),
                                                                 r.confidence);
  auto& tok = tokens_[r.token_id];
  tok.frequency = r.frequency;
  tok.confidence.add(r.confidence);
}

void BinGrid::merge(const BinGrid& other) {
  if (other.spec_.freq_edges != spec_.freq_edges || other.spec_.time_edges != spec_.time_edges) {
    throw ContractError("cannot merge grids with different edges");
  }
  for (std::size_t i = 0; i < cells_.size(); ++i) cells_[i].merge(other.cells_[i]);
  for (const auto& [id, stats] : other.tokens_) {
    auto& tok = tokens_[id];
    tok.frequency = stats.frequency;
    tok.confidence.merge(stats.confidence);
  }
}

const CellStats& BinGrid::cell(int f, int t) const {
  if (f < 0 || f >= num_freq_bins() || t < 0 || t >= num_time_bins()) {
    throw ContractError("cell index out of range");
  }
  return cells_[static_cast<std::size_t>(f) * num_time_bins() + t];
}

CellStats BinGrid::freq_marginal(int f) const {
  CellStats s;
  for (int t = 0; t < num_time_bins(); ++t) s.merge(cell(f, t));
  return s;
}

CellStats BinGrid::time_marginal(int t) const {
  CellStats s;
  for (int f = 0; f < num_freq_bins(); ++f) s.merge(cell(f, t));
  return s;
}

std::int64_t BinGrid::total_count() const {
  std::int64_t n = 0;
  for (const auto& c : cells_) n += c.confidence.count();
  return n;
}

BinGrid bin(std::span<const ConfidenceRecord> records, const GridSpec& spec) {
  BinGrid grid(spec);
  for (const auto& r : records) grid.add(r);
  return grid;
}

namespace {

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt_edge(double x) {
  if (std::isinf(x)) return "inf";
  std::ostringstream os;
  os << std::setprecision(10) << x;
  return os.str();
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p);
  if (!os) throw IoError("cannot write " + p.string());
  os << std::setprecision(12);
  return os;
}

}  // namespace

std::string render_svg(const BinGrid& grid) {
  constexpr double W = 640, H = 400, ML = 60, MR = 150, MT = 30, MB = 50;
  const double pw = W - ML - MR, ph = H - MT - MB;

  double fmin = std::numeric_limits<double>::infinity(), fmax = 0.0;
  for (int f = 0; f < grid.num_freq_bins(); ++f) {
    for (int t = 0; t < grid.num_time_bins(); ++t) {
      const auto& c = grid.cell(f, t);
      if (c.confidence.count() == 0) continue;
      fmin = std::min(fmin, c.mean_frequency());
      fmax = std::max(fmax, c.mean_frequency());
    }
  }
  const bool empty = fmax == 0.0;
  double lx0 = empty ? 0.0 : std::log10(fmin), lx1 = empty ? 1.0 : std::log10(fmax);
  if (lx1 - lx0 < 1e-9) {
    lx0 -= 0.5;
    lx1 += 0.5;
  }
  auto sx = [&](double f) { return ML + pw * (std::log10(f) - lx0) / (lx1 - lx0); };
  auto sy = [&](double c) { return MT + ph * (1.0 - c); };

  std::ostringstream os;
  os << std::setprecision(6);
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" viewBox=\"0 0 " << W << ' ' << H << "\">\n"
     << "<rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n"
     << "<g stroke=\"black\" stroke-width=\"1\">\n"
     << "<line x1=\"" << ML << "\" y1=\"" << MT + ph << "\" x2=\"" << ML + pw << "\" y2=\"" << MT + ph
     << "\"/>\n"
     << "<line x1=\"" << ML << "\" y1=\"" << MT << "\" x2=\"" << ML << "\" y2=\"" << MT + ph << "\"/>\n"
     << "</g>\n"
     << "<g font-family=\"sans-serif\" font-size=\"11\">\n"
     << "<text x=\"" << ML + pw / 2 << "\" y=\"" << H - 12
     << "\" text-anchor=\"middle\">mean token frequency (log scale)</text>\n"
     << "<text x=\"14\" y=\"" << MT + ph / 2 << "\" transform=\"rotate(-90 14 " << MT + ph / 2
     << ")\" text-anchor=\"middle\">mean confidence</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double c = i / 4.0;
    os << "<text x=\"" << ML - 6 << "\" y=\"" << sy(c) + 4 << "\" text-anchor=\"end\">" << c
       << "</text>\n";
  }
  for (int d = static_cast<int>(std::ceil(lx0)); d <= static_cast<int>(std::floor(lx1)); ++d) {
    os << "<text x=\"" << sx(std::pow(10.0, d)) << "\" y=\"" << MT + ph + 16
       << "\" text-anchor=\"middle\">1e" << d << "</text>\n";
  }
  if (empty) {
    os << "<text x=\"" << ML + pw / 2 << "\" y=\"" << MT + ph / 2
       << "\" text-anchor=\"middle\">no records</text>\n";
  }
  os << "</g>\n";

  int line = 0;
  const int nt = grid.num_time_bins();
  for (int t = 0; t < nt; ++t) {
    std::ostringstream pts;
    pts << std::setprecision(6);
    bool any = false;
    for (int f = 0; f < grid.num_freq_bins(); ++f) {
      const auto& c = grid.cell(f, t);
      if (c.confidence.count() == 0) continue;
      if (any) pts << ' ';
      pts << sx(c.mean_frequency()) << ',' << sy(c.confidence.mean());
      any = true;
    }
    if (!any) continue;
    // Hue runs from blue (small t) to red (large t).
    const int hue = nt > 1 ? 240 - 240 * t / (nt - 1) : 0;
    const auto& e = grid.spec().time_edges;
    os << "<polyline fill=\"none\" stroke=\"hsl(" << hue << ",70%,45%)\" stroke-width=\"2\" points=\""
       << pts.str() << "\"/>\n";
    os << "<text font-family=\"sans-serif\" font-size=\"10\" x=\"" << ML + pw + 10 << "\" y=\""
       << MT + 12 + 14 * line++ << "\" fill=\"hsl(" << hue << ",70%,45%)\">t in ["
       << xml_escape(fmt_edge(e[t])) << ", " << xml_escape(fmt_edge(e[t + 1])) << ")</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

ReportArtifacts report(const BinGrid& grid, int top_tokens_per_bin,
                       const std::filesystem::path& out_dir, const Vocabulary* vocab) {
  if (top_tokens_per_bin < 0) throw ConfigError("top_tokens_per_bin must be non-negative");
  std::filesystem::create_directories(out_dir);
  ReportArtifacts art{out_dir / "cells.csv", out_dir / "marginal.csv", out_dir / "time_bins.csv",
                      out_dir / "confidence.svg", out_dir / "tokens.txt", {}};
  if (grid.total_count() == 0) art.warnings.push_back("grid is empty: no confidence records");
  const auto& fe = grid.spec().freq_edges;
  const auto& te = grid.spec().time_edges;

  {
    auto os = open_out(art.cells_csv);
    os << "freq_bin_lo,freq_bin_hi,t_bin_lo,t_bin_hi,count,mean_conf,var_conf\n";
    for (int f = 0; f < grid.num_freq_bins(); ++f) {
      for (int t = 0; t < grid.num_time_bins(); ++t) {
        const auto& c = grid.cell(f, t).confidence;
        if (c.count() == 0) continue;
        os << fmt_edge(fe[f]) << ',' << fmt_edge(fe[f + 1]) << ',' << fmt_edge(te[t]) << ','
           << fmt_edge(te[t + 1]) << ',' << c.count() << ',' << c.mean() << ',' << c.variance()
           << '\n';
      }
    }
  }
  {
    auto os = open_out(art.marginal_csv);
    os << "freq_bin_lo,freq_bin_hi,mean_freq,count,mean_conf,var_conf\n";
    for (int f = 0; f < grid.num_freq_bins(); ++f) {
      const auto m = grid.freq_marginal(f);
      if (m.confidence.count() == 0) continue;
      os << fmt_edge(fe[f]) << ',' << fmt_edge(fe[f + 1]) << ',' << m.mean_frequency() << ','
         << m.confidence.count() << ',' << m.confidence.mean() << ',' << m.confidence.variance()
         << '\n';
    }
  }
  {
    auto os = open_out(art.time_csv);
    os << "t_bin_lo,t_bin_hi,count,mean_conf,var_conf\n";
    for (int t = 0; t < grid.num_time_bins(); ++t) {
      const auto m = grid.time_marginal(t);
      if (m.confidence.count() == 0) continue;
      os << fmt_edge(te[t]) << ',' << fmt_edge(te[t + 1]) << ',' << m.confidence.count() << ','
         << m.confidence.mean() << ',' << m.confidence.variance() << '\n';
    }
  }
  {
    auto os = open_out(art.chart_svg);
    os << render_svg(grid);
  }
  {
    auto os = open_out(art.tokens_txt);
    for (const auto& w : art.warnings) os << "# warning: " << w << '\n';
    for (int f = 0; f < grid.num_freq_bins(); ++f) {
      std::vector<std::pair<int, const TokenStats*>> members;
      for (const auto& [id, s] : grid.tokens()) {
        if (grid.freq_bin(static_cast<double>(s.frequency)) == f) members.emplace_back(id, &s);
      }
      if (members.empty()) continue;
      // Most frequent first, ties by id.
      std::stable_sort(members.begin(), members.end(), [](const auto& a, const auto& b) {
        return a.second->frequency > b.second->frequency;
      });
      os << "[" << fmt_edge(fe[f]) << ", " << fmt_edge(fe[f + 1]) << ") " << members.size()
         << " tokens\n";
      const int shown = std::min<int>(top_tokens_per_bin, static_cast<int>(members.size()));
      for (int i = 0; i < shown; ++i) {
        const auto& [id, s] = members[i];
        std::string name = vocab && id >= 0 && id < vocab->size() ? vocab->token(id)
                                                                  : "#" + std::to_string(id);
        os << "  " << std::quoted(name) << " freq=" << s->frequency
           << " mean_conf=" << s->confidence.mean() << " n=" << s->confidence.count() << '\n';
      }
    }
  }
  return art;
}

}  // namespace mdlm
