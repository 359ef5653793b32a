#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "czsl/train.hpp"

namespace czsl {

inline constexpr char kCheckpointMagic[4] = {'T', 'R', 'K', 'A'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Ordered named tensors plus a JSON config snapshot.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::vector<NamedTensor> tensors;
  nlohmann::json config;
};

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  template <class U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  const std::vector<unsigned char>& data() const { return out_; }

 private:
  std::vector<unsigned char> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> data) : data_(std::move(data)) {}

  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) throw FormatError(std::string("truncated checkpoint while reading ") + what, pos_);
  }
  template <class U>
  U le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(data_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(le<std::uint64_t>(what)); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::vector<unsigned char> data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.le<std::uint32_t>(ck.version);
  w.le<std::uint64_t>(ck.tensors.size());
  for (const auto& [name, t] : ck.tensors) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.le<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.le<std::uint64_t>(d);
    for (double v : t.values) w.f64(v);
  }
  const std::string blob = ck.config.dump();
  w.le<std::uint64_t>(blob.size());
  w.bytes(blob.data(), blob.size());
  return w.data();
}

inline Checkpoint decode_checkpoint(std::vector<unsigned char> bytes) {
  detail::ByteReader r(std::move(bytes));
  if (r.str(4, "magic") != std::string(kCheckpointMagic, 4)) throw FormatError("bad magic (expected TRKA)", 0);
  Checkpoint ck;
  const std::size_t version_at = r.pos();
  ck.version = r.le<std::uint32_t>("version");
  if (ck.version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(ck.version), version_at);
  const auto count = r.le<std::uint64_t>("tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor nt;
    const auto len = r.le<std::uint32_t>("name length");
    nt.name = r.str(len, "tensor name");
    const std::size_t rank_at = r.pos();
    const auto rank = r.le<std::uint32_t>("rank");
    if (rank == 0 || rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank), rank_at);
    std::vector<std::size_t> shape;
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::size_t dim_at = r.pos();
      const auto d = r.le<std::uint64_t>("dimension");
      if (d == 0 || d > (std::uint64_t{1} << 32)) throw FormatError("implausible dimension", dim_at);
      shape.push_back(static_cast<std::size_t>(d));
      n *= static_cast<std::size_t>(d);
    }
    r.need(n * 8, "tensor values");
    std::vector<double> values(n);
    for (double& v : values) v = r.f64("tensor values");
    nt.tensor = Tensor(std::move(shape), std::move(values));
    ck.tensors.push_back(std::move(nt));
  }
  const auto blob_len = r.le<std::uint64_t>("config length");
  const std::size_t blob_at = r.pos();
  const std::string blob = r.str(blob_len, "config blob");
  ck.config = nlohmann::json::parse(blob, nullptr, false);
  if (ck.config.is_discarded()) throw FormatError("malformed config blob", blob_at);
  if (!r.done()) throw FormatError("trailing bytes after config blob", r.pos());
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("cannot write checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(std::move(bytes));
}

/// Snapshot of a trained model: every parameter in creation order, the run
/// config and the primitive names it was trained on.
inline Checkpoint make_checkpoint(const Model& model, const RunConfig& cfg, const SplitManifest& manifest) {
  Checkpoint ck;
  for (const auto& p : model.parameters().all()) {
    Tensor t = p.var.tensor();
    t.grad.reset();
    ck.tensors.push_back({p.name, std::move(t)});
  }
  ck.config = {{"run", to_json(cfg)}, {"states", manifest.states}, {"objects", manifest.objects}};
  return ck;
}

struct RestoredModel {
  RunConfig config;
  std::vector<std::string> states, objects;
  std::unique_ptr<Model> model;
};

inline RestoredModel restore_model(const Checkpoint& ck) {
  RestoredModel r;
  try {
    r.config = config_from_json(ck.config.at("run"));
    r.states = ck.config.at("states").get<std::vector<std::string>>();
    r.objects = ck.config.at("objects").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint config snapshot is incomplete: ") + e.what());
  }
  r.model = build_model(r.config, r.states.size(), r.objects.size());
  auto& store = r.model->parameters();
  if (store.all().size() != ck.tensors.size())
    throw ConfigError("checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, model expects " +
                      std::to_string(store.all().size()));
  for (const auto& [name, t] : ck.tensors) {
    auto& p = store.at(name);
    if (p.var.tensor().shape != t.shape)
      throw ConfigError("shape mismatch for '" + name + "': checkpoint " + Tensor::describe(t.shape) + ", model " +
                        Tensor::describe(p.var.tensor().shape));
    p.var.values() = t.values;
  }
  return r;
}

/// Throws ConfigError unless the manifest's primitives match the checkpoint.
inline void require_same_label_space(const RestoredModel& r, const SplitManifest& m) {
  if (r.states != m.states || r.objects != m.objects)
    throw ConfigError("manifest primitives do not match the checkpoint's label space");
}

}  // namespace czsl
