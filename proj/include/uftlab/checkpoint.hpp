// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>

#include "uftlab/error.hpp"
#include "uftlab/model.hpp"
#include "uftlab/tensor.hpp"

namespace uftlab {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "UFTLABCK";

/// Self-describing binary container: a kind tag, string metadata and named
/// tensors. Integers and doubles are stored little-endian.
///
///   magic[8] | u32 version | str kind | u32 n_meta {str key, str value}
///            | u32 n_tensors {str name, u32 rank, u64 dims[rank], f64 values}
///
/// where str is a u32 byte count followed by the bytes.
struct Container {
  std::string kind;
  std::map<std::string, std::string> meta;
  std::map<std::string, Tensor> tensors;

  friend bool operator==(const Container&, const Container&) = default;
};

namespace detail {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

class Writer {
 public:
  template <typename T>
  void put(T v) {
    v = to_little(v);
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void put_string(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  void put_raw(std::string_view s) { out_.append(s); }
  [[nodiscard]] std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return to_little(v);
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string_view get_raw(std::size_t n) {
    need(n);
    const auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  [[nodiscard]] bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw IoError("checkpoint truncated");
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const Container& c) {
  detail::Writer w;
  w.put_raw(kCheckpointMagic);
  w.put(kCheckpointFormatVersion);
  w.put_string(c.kind);
  w.put(static_cast<std::uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    w.put_string(k);
    w.put_string(v);
  }
  w.put(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    w.put_string(name);
    w.put(static_cast<std::uint32_t>(t.rank()));
    for (const auto d : t.shape()) w.put(static_cast<std::uint64_t>(d));
    for (const double v : t.data()) w.put(v);
  }
  return w.take();
}

inline Container deserialize(std::string_view bytes) {
  detail::Reader r(bytes);
  if (r.get_raw(kCheckpointMagic.size()) != kCheckpointMagic) throw IoError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointFormatVersion) {
    throw IoError("unsupported checkpoint format version " + std::to_string(version));
  }
  Container c;
  c.kind = r.get_string();
  const auto n_meta = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.get_string();
    c.meta.emplace(std::move(k), r.get_string());
  }
  const auto n_tensors = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw IoError("tensor '" + name + "' has implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    const std::size_t n = shape_size(shape);
    if (n > bytes.size() / sizeof(double)) throw IoError("tensor '" + name + "' larger than file");
    std::vector<double> values(n);
    for (auto& v : values) v = r.get<double>();
    c.tensors.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw IoError("trailing bytes after checkpoint");
  return c;
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void save_container(const std::filesystem::path& path, const Container& c) { write_file(path, serialize(c)); }
inline Container load_container(const std::filesystem::path& path) { return deserialize(read_file(path)); }

namespace detail {

inline std::size_t meta_size(const Container& c, const std::string& key) {
  const auto it = c.meta.find(key);
  if (it == c.meta.end()) throw IoError("checkpoint missing '" + key + "'");
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw IoError("checkpoint field '" + key + "' is not an integer");
  }
}

}  // namespace detail

inline Container to_container(const Transformer& net, bool frozen) {
  Container c;
  c.kind = "model";
  const ModelConfig& cfg = net.config();
  c.meta["layers"] = std::to_string(cfg.layers);
  c.meta["heads"] = std::to_string(cfg.heads);
  c.meta["model_dim"] = std::to_string(cfg.model_dim);
  c.meta["context_length"] = std::to_string(cfg.context_length);
  c.meta["vocab_size"] = std::to_string(cfg.vocab_size);
  c.meta["mlp_ratio"] = std::to_string(cfg.mlp_ratio);
  c.meta["lora_rank"] = cfg.lora_rank ? std::to_string(*cfg.lora_rank) : "";
  c.meta["frozen"] = frozen ? "1" : "0";
  std::string names;
  for (const auto& n : net.trainable()) {
    if (!names.empty()) names += ',';
    names += n;
  }
  c.meta["trainable"] = names;
  c.tensors = net.params();
  return c;
}

struct LoadedModel {
  Transformer network;
  bool frozen = false;
};

inline LoadedModel from_container(const Container& c) {
  if (c.kind != "model") throw IoError("checkpoint holds '" + c.kind + "', expected a model");
  ModelConfig cfg;
  cfg.layers = detail::meta_size(c, "layers");
  cfg.heads = detail::meta_size(c, "heads");
  cfg.model_dim = detail::meta_size(c, "model_dim");
  cfg.context_length = detail::meta_size(c, "context_length");
  cfg.vocab_size = detail::meta_size(c, "vocab_size");
  cfg.mlp_ratio = detail::meta_size(c, "mlp_ratio");
  if (const auto it = c.meta.find("lora_rank"); it != c.meta.end() && !it->second.empty()) {
    cfg.lora_rank = detail::meta_size(c, "lora_rank");
  }
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw IoError(std::string("checkpoint config invalid: ") + e.what());
  }

  // Shapes must agree with the config; adapters and a reward head are optional extras.
  const Transformer expected = Transformer::zeros(cfg);
  for (const auto& [name, t] : expected.params()) {
    const auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw IoError("checkpoint missing tensor '" + name + "'");
    if (it->second.shape() != t.shape()) throw IoError("tensor '" + name + "' has wrong shape");
  }

  LoadedModel out;
  out.network = expected;
  for (const auto& [name, t] : c.tensors) out.network.set_param(name, t, false);
  std::set<std::string> trainable;
  if (const auto it = c.meta.find("trainable"); it != c.meta.end()) {
    std::string_view rest = it->second;
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      trainable.emplace(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
  }
  try {
    out.network.set_trainable(std::move(trainable));
  } catch (const Error& e) {
    throw IoError(std::string("checkpoint trainable list invalid: ") + e.what());
  }
  out.frozen = c.meta.contains("frozen") && c.meta.at("frozen") == "1";
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const PolicyModel& model) {
  save_container(path, to_container(model.network(), false));
}

inline void save_checkpoint(const std::filesystem::path& path, const ReferenceModel& model) {
  save_container(path, to_container(model.network(), true));
}

inline PolicyModel load_policy(const std::filesystem::path& path) {
  return PolicyModel(from_container(load_container(path)).network);
}

inline ReferenceModel load_reference(const std::filesystem::path& path) {
  return ReferenceModel(from_container(load_container(path)).network);
}

}  // namespace uftlab
