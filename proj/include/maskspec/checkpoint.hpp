#pragma once

#include <array>
#include <type_traits>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskspec/common.hpp"
#include "maskspec/model.hpp"
#include "maskspec/optim.hpp"

namespace maskspec {

enum class CheckpointErrc {
  io,
  bad_magic,
  bad_version,
  truncated,
  bad_crc,
  dtype_mismatch,
  shape_mismatch,
  missing_tensor,
};

class checkpoint_error : public std::runtime_error {
 public:
  checkpoint_error(CheckpointErrc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  CheckpointErrc code() const { return code_; }

 private:
  CheckpointErrc code_;
};

namespace detail {

inline const std::array<std::uint32_t, 256>& crc32_table() {
  static const std::array<std::uint32_t, 256> table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  return table;
}

inline std::uint32_t crc32(const unsigned char* data, std::size_t len,
                           std::uint32_t crc = 0xFFFFFFFFu) {
  const auto& table = crc32_table();
  for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc;
}

inline std::uint32_t crc32_finish(std::uint32_t crc) { return crc ^ 0xFFFFFFFFu; }

template <typename T>
constexpr std::uint8_t dtype_tag() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 1 : 2;
}

inline const char* dtype_name(std::uint8_t tag) { return tag == 1 ? "float32" : "float64"; }

struct ByteWriter {
  std::vector<unsigned char> bytes;

  void raw(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    bytes.insert(bytes.end(), c, c + n);
  }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u16(std::uint16_t v) { raw(&v, 2); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
};

struct ByteReader {
  const unsigned char* p;
  std::size_t len;
  std::size_t pos{0};

  void need(std::size_t n) const {
    if (pos + n > len) throw checkpoint_error(CheckpointErrc::truncated, "checkpoint truncated");
  }
  void raw(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, p + pos, n);
    pos += n;
  }
  std::uint8_t u8() { std::uint8_t v; raw(&v, 1); return v; }
  std::uint16_t u16() { std::uint16_t v; raw(&v, 2); return v; }
  std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }
  std::uint64_t u64() { std::uint64_t v; raw(&v, 8); return v; }
};

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'M', 'S', 'K', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Raw checkpoint contents: metadata plus named tensors in file order.
struct CheckpointSummaryEntry {
  std::string name;
  std::uint8_t dtype_tag;
  std::vector<long> shape;
  long count;
};

template <typename T>
struct RawCheckpoint {
  nlohmann::json metadata;
  std::vector<std::string> names;
  std::vector<std::vector<long>> shapes;
  std::vector<std::vector<T>> values;

  long find(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return static_cast<long>(i);
    }
    return -1;
  }
};

/// Serializes every named parameter (and optionally the optimizer moments)
/// to `path`. The write is atomic: a temporary file is renamed into place.
///
/// Layout, all little-endian: magic "MSKS", u32 version, u64 metadata length,
/// metadata JSON, u32 tensor count, then per tensor u16 name length, name,
/// u8 dtype tag (1 = float32, 2 = float64), u8 rank, u64 dims, raw payload;
/// a CRC-32 of everything preceding it closes the file.
template <typename T>
void save_checkpoint(const std::string& path, const ModelParams<T>& model,
                     const AdamW<std::type_identity_t<T>>* optimizer = nullptr,
                     nlohmann::json metadata = {}) {
  metadata["scale_config"] = {
      {"depth", model.encoder_cfg.depth},   {"heads", model.encoder_cfg.heads},
      {"emb", model.encoder_cfg.emb},       {"ffn", model.encoder_cfg.ffn},
      {"patch_dim", model.encoder_cfg.patch_dim},
  };
  metadata["decoder_config"] = {
      {"depth", model.decoder_cfg.depth}, {"heads", model.decoder_cfg.heads},
      {"emb", model.decoder_cfg.emb},     {"ffn", model.decoder_cfg.ffn},
      {"out_dim", model.decoder_cfg.out_dim},
  };
  metadata["with_decoder"] = model.with_decoder;
  metadata["num_classes"] = model.num_classes;
  metadata["dtype"] = detail::dtype_name(detail::dtype_tag<T>());
  if (optimizer) metadata["optimizer_step"] = optimizer->step_count();

  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  const std::string meta = metadata.dump();
  w.u64(meta.size());
  w.raw(meta.data(), meta.size());

  std::vector<std::pair<std::string, const std::vector<T>*>> tensors;
  std::vector<std::vector<long>> shapes;
  for (const auto& p : model.params) {
    tensors.push_back({p.name, &p.tensor.values()});
    shapes.push_back(p.tensor.shape());
  }
  if (optimizer) {
    for (auto& [name, values] : optimizer->moment_tensors()) {
      tensors.push_back({name, values});
      shapes.push_back({static_cast<long>(values->size())});
    }
  }

  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& [name, values] = tensors[i];
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name.data(), name.size());
    w.u8(detail::dtype_tag<T>());
    w.u8(static_cast<std::uint8_t>(shapes[i].size()));
    for (const long d : shapes[i]) w.u64(static_cast<std::uint64_t>(d));
    w.raw(values->data(), values->size() * sizeof(T));
  }
  w.u32(detail::crc32_finish(detail::crc32(w.bytes.data(), w.bytes.size())));

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw checkpoint_error(CheckpointErrc::io, "cannot write checkpoint: " + path);
    out.write(reinterpret_cast<const char*>(w.bytes.data()),
              static_cast<std::streamsize>(w.bytes.size()));
    if (!out) throw checkpoint_error(CheckpointErrc::io, "short write: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw checkpoint_error(CheckpointErrc::io, "cannot rename " + tmp + " to " + path);
}

namespace detail {

inline std::vector<unsigned char> read_and_verify(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw checkpoint_error(CheckpointErrc::io, "cannot open checkpoint: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12) throw checkpoint_error(CheckpointErrc::truncated, "checkpoint too small: " + path);
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw checkpoint_error(CheckpointErrc::bad_magic, "bad magic bytes: " + path);
  }
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kCheckpointVersion) {
    throw checkpoint_error(CheckpointErrc::bad_version,
                           "unsupported checkpoint version " + std::to_string(version));
  }
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  const std::uint32_t actual = crc32_finish(crc32(bytes.data(), bytes.size() - 4));
  if (stored != actual) {
    throw checkpoint_error(CheckpointErrc::bad_crc, "checkpoint CRC mismatch: " + path);
  }
  return bytes;
}

}  // namespace detail

/// Dtype-agnostic listing of checkpoint contents.
inline std::pair<nlohmann::json, std::vector<CheckpointSummaryEntry>> read_checkpoint_summary(
    const std::string& path) {
  const std::vector<unsigned char> bytes = detail::read_and_verify(path);
  detail::ByteReader r{bytes.data(), bytes.size() - 4, 8};
  const std::uint64_t meta_len = r.u64();
  r.need(meta_len);
  nlohmann::json metadata = nlohmann::json::parse(
      std::string(reinterpret_cast<const char*>(bytes.data()) + r.pos, meta_len));
  r.pos += meta_len;

  std::vector<CheckpointSummaryEntry> entries;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointSummaryEntry e;
    const std::uint16_t name_len = r.u16();
    e.name.resize(name_len);
    r.raw(e.name.data(), name_len);
    e.dtype_tag = r.u8();
    const std::uint8_t rank = r.u8();
    e.count = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      e.shape.push_back(static_cast<long>(r.u64()));
      e.count *= e.shape.back();
    }
    r.pos += static_cast<std::size_t>(e.count) * (e.dtype_tag == 1 ? 4 : 8);
    if (r.pos > r.len) throw checkpoint_error(CheckpointErrc::truncated, "checkpoint truncated");
    entries.push_back(std::move(e));
  }
  return {std::move(metadata), std::move(entries)};
}

template <typename T>
RawCheckpoint<T> read_checkpoint(const std::string& path) {
  const std::vector<unsigned char> bytes = detail::read_and_verify(path);
  detail::ByteReader r{bytes.data(), bytes.size() - 4, 8};
  RawCheckpoint<T> ck;
  const std::uint64_t meta_len = r.u64();
  r.need(meta_len);
  ck.metadata = nlohmann::json::parse(
      std::string(reinterpret_cast<const char*>(bytes.data()) + r.pos, meta_len));
  r.pos += meta_len;

  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16();
    std::string name(name_len, '\0');
    r.raw(name.data(), name_len);
    const std::uint8_t tag = r.u8();
    if (tag != detail::dtype_tag<T>()) {
      throw checkpoint_error(CheckpointErrc::dtype_mismatch,
                             "tensor " + name + " has dtype " + detail::dtype_name(tag));
    }
    const std::uint8_t rank = r.u8();
    std::vector<long> shape;
    long n = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      shape.push_back(static_cast<long>(r.u64()));
      n *= shape.back();
    }
    std::vector<T> values(static_cast<std::size_t>(n));
    r.raw(values.data(), values.size() * sizeof(T));
    ck.names.push_back(std::move(name));
    ck.shapes.push_back(std::move(shape));
    ck.values.push_back(std::move(values));
  }
  return ck;
}

/// Restores parameters into a freshly built model with the expected
/// architecture. When `encoder_only` is set, decoder-side tensors
/// (decoder.*, enc2dec.*, mask_token) are allowed to be absent; anything
/// else missing, or any shape disagreement, is an error naming the tensor.
template <typename T>
void load_into_model(const RawCheckpoint<T>& ck, ModelParams<T>& model, bool encoder_only = false,
                     bool allow_fresh_head = false) {
  for (auto& p : model.params) {
    const bool decoder_side = p.name.starts_with("decoder.") || p.name.starts_with("enc2dec.") ||
                              p.name == "mask_token";
    const bool head_side = p.name.starts_with("head.");
    const long i = ck.find(p.name);
    if (i < 0) {
      if ((encoder_only && decoder_side) || (allow_fresh_head && head_side)) continue;
      throw checkpoint_error(CheckpointErrc::missing_tensor, "checkpoint lacks tensor " + p.name);
    }
    if (ck.shapes[i] != p.tensor.shape()) {
      throw checkpoint_error(CheckpointErrc::shape_mismatch,
                             "tensor " + p.name + " has mismatched shape in checkpoint");
    }
    p.tensor.values_mut() = ck.values[i];
  }
}

/// Builds the model described by a checkpoint's metadata and loads it.
template <typename T>
ModelParams<T> load_model_checkpoint(const std::string& path, bool encoder_only = false,
                                     long override_num_classes = -1) {
  const RawCheckpoint<T> ck = read_checkpoint<T>(path);
  EncoderConfig enc;
  const auto& sc = ck.metadata.at("scale_config");
  enc.depth = sc.at("depth").template get<long>();
  enc.heads = sc.at("heads").template get<long>();
  enc.emb = sc.at("emb").template get<long>();
  enc.ffn = sc.at("ffn").template get<long>();
  enc.patch_dim = sc.at("patch_dim").template get<long>();
  DecoderConfig dec;
  const auto& dc = ck.metadata.at("decoder_config");
  dec.depth = dc.at("depth").template get<long>();
  dec.heads = dc.at("heads").template get<long>();
  dec.emb = dc.at("emb").template get<long>();
  dec.ffn = dc.at("ffn").template get<long>();
  dec.out_dim = dc.at("out_dim").template get<long>();
  const bool with_decoder = !encoder_only && ck.metadata.value("with_decoder", false);
  long num_classes = ck.metadata.value("num_classes", 0l);
  if (override_num_classes >= 0) num_classes = override_num_classes;

  Rng rng(0);
  ModelParams<T> model = ModelParams<T>::create(enc, with_decoder, num_classes, rng, dec);
  load_into_model(ck, model, encoder_only);
  return model;
}

}  // namespace maskspec
