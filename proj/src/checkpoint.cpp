#include "mdlm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mdlm/errors.hpp"
#include "mdlm/rng.hpp"

namespace mdlm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'D', 'L', 'M', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  template <typename T>
  void put(T v) {
    buf_.append(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void str(const std::string& s) {
    put<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  void doubles(const Tensor<double>& t) {
    bytes(t.raw(), static_cast<std::size_t>(t.size()) * sizeof(double));
  }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(const std::string& buf) : buf_(buf) {}
  template <typename T>
  T get() {
    T v;
    take(&v, sizeof(T));
    return v;
  }
  void take(void* p, std::size_t n) {
    if (pos_ + n > buf_.size()) throw CheckpointError("truncated checkpoint");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::string str() {
    const auto n = get<std::uint64_t>();
    if (n > buf_.size() - pos_) throw CheckpointError("truncated checkpoint string");
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void doubles(Tensor<double>& t) { take(t.raw(), static_cast<std::size_t>(t.size()) * sizeof(double)); }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace

bool OptimizerState::operator==(const OptimizerState& other) const {
  auto same = [](const std::vector<Tensor<double>>& a, const std::vector<Tensor<double>>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].shape() != b[i].shape() ||
          std::memcmp(a[i].raw(), b[i].raw(), a[i].size() * sizeof(double)) != 0) {
        return false;
      }
    }
    return true;
  };
  return step == other.step && same(first_moment, other.first_moment) &&
         same(second_moment, other.second_moment);
}

Checkpoint make_checkpoint(const Denoiser& model, const OptimizerState& optimizer,
                           std::string trainer_state) {
  Checkpoint ck;
  ck.config = model.config();
  for (const auto& p : model.parameters()) {
    ck.names.push_back(p.name);
    ck.tensors.push_back(p.var.value());
  }
  ck.optimizer = optimizer;
  ck.trainer_state = std::move(trainer_state);
  return ck;
}

Denoiser model_from_checkpoint(const Checkpoint& ck) {
  Denoiser model(ck.config, 0);
  auto& params = model.parameters();
  if (params.size() != ck.tensors.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(ck.tensors.size()) +
                          " tensors, model expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != ck.names[i] || params[i].var.shape() != ck.tensors[i].shape()) {
      throw CheckpointError("checkpoint tensor " + ck.names[i] + " does not match parameter " +
                            params[i].name);
    }
    params[i].var.mutable_value() = ck.tensors[i];
  }
  return model;
}

std::string serialize_checkpoint(const Checkpoint& ck) {
  if (ck.names.size() != ck.tensors.size()) throw CheckpointError("names/tensors mismatch");
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.put<std::uint32_t>(Checkpoint::kFormatVersion);
  w.put<std::uint32_t>(ck.config.vocab_size);
  w.put<std::uint32_t>(ck.config.d_model);
  w.put<std::uint32_t>(ck.config.n_heads);
  w.put<std::uint32_t>(ck.config.n_layers);
  w.put<std::uint32_t>(ck.config.max_seq_len);
  w.put<double>(ck.config.dropout_rate);
  w.put<std::uint64_t>(ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.names[i].size()));
    w.bytes(ck.names[i].data(), ck.names[i].size());
    w.put<std::uint32_t>(ck.tensors[i].rank());
    for (Index d : ck.tensors[i].shape()) w.put<std::uint64_t>(d);
    w.doubles(ck.tensors[i]);
  }
  const auto& opt = ck.optimizer;
  const bool has_moments = !opt.first_moment.empty();
  if (has_moments && (opt.first_moment.size() != ck.tensors.size() ||
                      opt.second_moment.size() != ck.tensors.size())) {
    throw CheckpointError("optimizer moments do not match parameters");
  }
  w.put<std::int64_t>(opt.step);
  w.put<std::uint8_t>(has_moments ? 1 : 0);
  if (has_moments) {
    for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
      if (opt.first_moment[i].shape() != ck.tensors[i].shape() ||
          opt.second_moment[i].shape() != ck.tensors[i].shape()) {
        throw CheckpointError("optimizer moment shape mismatch for " + ck.names[i]);
      }
      w.doubles(opt.first_moment[i]);
      w.doubles(opt.second_moment[i]);
    }
  }
  w.str(ck.trainer_state);
  w.put<std::uint64_t>(fnv1a64(w.buffer()));
  return std::move(w.buffer());
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) + sizeof(std::uint64_t) ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint file");
  }
  const std::string body = bytes.substr(0, bytes.size() - sizeof(std::uint64_t));
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), sizeof(stored));
  if (stored != fnv1a64(body)) throw CheckpointError("checkpoint checksum mismatch");

  Reader r(body);
  char magic[8];
  r.take(magic, sizeof(magic));
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint::kFormatVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.config.vocab_size = static_cast<int>(r.get<std::uint32_t>());
  ck.config.d_model = static_cast<int>(r.get<std::uint32_t>());
  ck.config.n_heads = static_cast<int>(r.get<std::uint32_t>());
  ck.config.n_layers = static_cast<int>(r.get<std::uint32_t>());
  ck.config.max_seq_len = static_cast<int>(r.get<std::uint32_t>());
  ck.config.dropout_rate = r.get<double>();
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name(name_len, '\0');
    r.take(name.data(), name_len);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw CheckpointError("implausible tensor rank in checkpoint");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<Index>(r.get<std::uint64_t>());
    if (shape_numel(shape) * sizeof(double) > body.size()) {
      throw CheckpointError("tensor " + name + " larger than checkpoint");
    }
    Tensor<double> t(shape);
    r.doubles(t);
    ck.names.push_back(std::move(name));
    ck.tensors.push_back(std::move(t));
  }
  ck.optimizer.step = r.get<std::int64_t>();
  if (r.get<std::uint8_t>()) {
    for (const auto& t : ck.tensors) {
      Tensor<double> m(t.shape()), v(t.shape());
      r.doubles(m);
      r.doubles(v);
      ck.optimizer.first_moment.push_back(std::move(m));
      ck.optimizer.second_moment.push_back(std::move(v));
    }
  }
  ck.trainer_state = r.str();
  if (r.pos() != body.size()) throw CheckpointError("trailing bytes in checkpoint");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw CheckpointError("cannot write checkpoint " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw CheckpointError("failed writing checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot move checkpoint into place: " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace mdlm
