#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "maskspec/common.hpp"
#include "maskspec/patch.hpp"
#include "maskspec/rng.hpp"
#include "maskspec/tensor.hpp"

namespace maskspec {

enum class ModelScale { tiny, small, base };

inline ModelScale scale_from_string(const std::string& s) {
  if (s == "tiny") return ModelScale::tiny;
  if (s == "small") return ModelScale::small;
  if (s == "base") return ModelScale::base;
  throw input_error("unknown model scale: " + s);
}

inline const char* scale_to_string(ModelScale s) {
  switch (s) {
    case ModelScale::tiny: return "tiny";
    case ModelScale::small: return "small";
    default: return "base";
  }
}

struct EncoderConfig {
  long depth{12};
  long heads{12};
  long emb{768};
  long ffn{3072};
  long patch_dim{256};
};

/// One shared decoder shape is used for every encoder scale.
struct DecoderConfig {
  long depth{8};
  long heads{16};
  long emb{512};
  long ffn{2048};
  long out_dim{256};
};

inline EncoderConfig encoder_config_for(ModelScale scale) {
  switch (scale) {
    case ModelScale::tiny: return {12, 3, 192, 768, 256};
    case ModelScale::small: return {12, 6, 384, 1536, 256};
    default: return {12, 12, 768, 3072, 256};
  }
}

namespace detail {

inline void check_encoder_config(const EncoderConfig& c) {
  if (c.depth <= 0 || c.heads <= 0 || c.emb <= 0 || c.ffn <= 0 || c.patch_dim <= 0) {
    throw contract_error("encoder config dimensions must be positive");
  }
  if (c.emb % c.heads != 0) throw contract_error("embedding dim must be divisible by head count");
}

inline void check_decoder_config(const DecoderConfig& c) {
  if (c.depth <= 0 || c.heads <= 0 || c.emb <= 0 || c.ffn <= 0 || c.out_dim <= 0) {
    throw contract_error("decoder config dimensions must be positive");
  }
  if (c.emb % c.heads != 0) throw contract_error("embedding dim must be divisible by head count");
}

}  // namespace detail

/// The single source of truth for parameter names and shapes. Registration
/// order is also initialization and serialization order.
inline std::vector<std::pair<std::string, std::vector<long>>> enumerate_param_shapes(
    const EncoderConfig& enc, bool with_decoder, const DecoderConfig& dec, long num_classes) {
  detail::check_encoder_config(enc);
  std::vector<std::pair<std::string, std::vector<long>>> out;
  auto block_params = [&out](const std::string& prefix, long emb, long ffn) {
    out.push_back({prefix + ".ln1.gamma", {emb}});
    out.push_back({prefix + ".ln1.beta", {emb}});
    out.push_back({prefix + ".attn.wq", {emb, emb}});
    out.push_back({prefix + ".attn.bq", {emb}});
    out.push_back({prefix + ".attn.wk", {emb, emb}});
    out.push_back({prefix + ".attn.bk", {emb}});
    out.push_back({prefix + ".attn.wv", {emb, emb}});
    out.push_back({prefix + ".attn.bv", {emb}});
    out.push_back({prefix + ".attn.wo", {emb, emb}});
    out.push_back({prefix + ".attn.bo", {emb}});
    out.push_back({prefix + ".ln2.gamma", {emb}});
    out.push_back({prefix + ".ln2.beta", {emb}});
    out.push_back({prefix + ".ffn.w1", {emb, ffn}});
    out.push_back({prefix + ".ffn.b1", {ffn}});
    out.push_back({prefix + ".ffn.w2", {ffn, emb}});
    out.push_back({prefix + ".ffn.b2", {emb}});
  };

  out.push_back({"patch_embed.weight", {enc.patch_dim, enc.emb}});
  out.push_back({"patch_embed.bias", {enc.emb}});
  for (long b = 0; b < enc.depth; ++b) block_params("encoder.block" + std::to_string(b), enc.emb, enc.ffn);
  out.push_back({"encoder.ln_final.gamma", {enc.emb}});
  out.push_back({"encoder.ln_final.beta", {enc.emb}});

  if (with_decoder) {
    detail::check_decoder_config(dec);
    out.push_back({"enc2dec.weight", {enc.emb, dec.emb}});
    out.push_back({"enc2dec.bias", {dec.emb}});
    out.push_back({"mask_token", {dec.emb}});
    for (long b = 0; b < dec.depth; ++b) block_params("decoder.block" + std::to_string(b), dec.emb, dec.ffn);
    out.push_back({"decoder.ln_final.gamma", {dec.emb}});
    out.push_back({"decoder.ln_final.beta", {dec.emb}});
    out.push_back({"decoder.out.weight", {dec.emb, dec.out_dim}});
    out.push_back({"decoder.out.bias", {dec.out_dim}});
  }
  if (num_classes > 0) {
    out.push_back({"head.weight", {enc.emb, num_classes}});
    out.push_back({"head.bias", {num_classes}});
  }
  return out;
}

/// Exact count of scalar learnables for a configuration. The classifier head
/// is excluded; pass with_decoder=true to include the reconstruction stack.
inline long param_count(const EncoderConfig& enc, bool with_decoder,
                        const DecoderConfig& dec = DecoderConfig{}) {
  long total = 0;
  for (const auto& [name, shape] : enumerate_param_shapes(enc, with_decoder, dec, 0)) {
    long n = 1;
    for (const long d : shape) n *= d;
    total += n;
  }
  return total;
}

inline long param_count(ModelScale scale, bool with_decoder) {
  return param_count(encoder_config_for(scale), with_decoder);
}

/// All learnable tensors of one model plus its architecture description.
/// Weight matrices start truncated-normal (std 0.02), biases and norm betas
/// at zero, norm gammas at one.
template <typename T>
struct ModelParams {
  EncoderConfig encoder_cfg;
  DecoderConfig decoder_cfg;
  bool with_decoder{false};
  long num_classes{0};  // 0 = no classifier head

  std::vector<Parameter<T>> params;
  std::unordered_map<std::string, std::size_t> index;

  static ModelParams create(const EncoderConfig& enc, bool with_decoder, long num_classes,
                            Rng& rng, const DecoderConfig& dec = DecoderConfig{}) {
    ModelParams m;
    m.encoder_cfg = enc;
    m.decoder_cfg = dec;
    m.with_decoder = with_decoder;
    m.num_classes = num_classes;
    for (auto& [name, shape] : enumerate_param_shapes(enc, with_decoder, dec, num_classes)) {
      long n = 1;
      for (const long d : shape) n *= d;
      std::vector<T> data(static_cast<std::size_t>(n), T(0));
      const bool is_gamma = name.ends_with("gamma");
      const bool is_vector_bias = shape.size() == 1 && !is_gamma && name != "mask_token";
      if (is_gamma) {
        std::fill(data.begin(), data.end(), T(1));
      } else if (!is_vector_bias) {
        for (auto& v : data) v = static_cast<T>(rng.trunc_normal(0.02));
      }
      m.index.emplace(name, m.params.size());
      m.params.emplace_back(name, shape, std::move(data));
    }
    return m;
  }

  static ModelParams create(ModelScale scale, bool with_decoder, long num_classes, Rng& rng) {
    return create(encoder_config_for(scale), with_decoder, num_classes, rng);
  }

  const Tensor<T>& at(const std::string& name) const {
    const auto it = index.find(name);
    if (it == index.end()) throw contract_error("unknown parameter: " + name);
    return params[it->second].tensor;
  }

  bool has(const std::string& name) const { return index.contains(name); }

  long total_params() const {
    long n = 0;
    for (const auto& p : params) n += p.size();
    return n;
  }

  void zero_grads() {
    for (auto& p : params) p.tensor.zero_grad();
  }
};

/// Classic interleaved sine/cosine position table:
/// pe(pos, 2i) = sin(pos / 10000^(2i/d)), pe(pos, 2i+1) = cos(same).
template <typename T>
Matrix<T> sinusoidal_pos_encoding(long positions, long dim) {
  if (positions <= 0 || dim <= 0 || dim % 2 != 0) {
    throw contract_error("sinusoidal_pos_encoding: need positive n and even dim");
  }
  Matrix<T> pe(positions, dim);
  for (long pos = 0; pos < positions; ++pos) {
    for (long i = 0; i < dim / 2; ++i) {
      const double rate = std::pow(10000.0, 2.0 * i / dim);
      pe(pos, 2 * i) = static_cast<T>(std::sin(pos / rate));
      pe(pos, 2 * i + 1) = static_cast<T>(std::cos(pos / rate));
    }
  }
  return pe;
}

/// Affine projection of flattened patches into the embedding space.
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& patches, const ModelParams<T>& model) {
  if (patches.cols() != model.encoder_cfg.patch_dim) {
    throw contract_error("patch_embed: patch vectors must have length patch_dim");
  }
  return add_row_vector(matmul(patches, model.at("patch_embed.weight")),
                        model.at("patch_embed.bias"));
}

namespace detail {

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& x, long heads, const ModelParams<T>& model,
                               const std::string& prefix) {
  const long d = x.shape()[1];
  const long head_dim = d / heads;
  const Tensor<T> q = add_row_vector(matmul(x, model.at(prefix + ".wq")), model.at(prefix + ".bq"));
  const Tensor<T> k = add_row_vector(matmul(x, model.at(prefix + ".wk")), model.at(prefix + ".bk"));
  const Tensor<T> v = add_row_vector(matmul(x, model.at(prefix + ".wv")), model.at(prefix + ".bv"));
  const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)));
  std::vector<Tensor<T>> ctx;
  ctx.reserve(heads);
  for (long h = 0; h < heads; ++h) {
    const Tensor<T> qh = slice_cols(q, h * head_dim, head_dim);
    const Tensor<T> kh = slice_cols(k, h * head_dim, head_dim);
    const Tensor<T> vh = slice_cols(v, h * head_dim, head_dim);
    const Tensor<T> scores = matmul(qh, kh, false, true, inv_sqrt_dh);
    ctx.push_back(matmul(softmax_rows(scores), vh));
  }
  return add_row_vector(matmul(concat_cols(ctx), model.at(prefix + ".wo")),
                        model.at(prefix + ".bo"));
}

/// Pre-norm transformer stack: x += MHA(LN(x)); x += FFN(LN(x)); final LN.
template <typename T>
Tensor<T> transformer_stack(Tensor<T> x, long depth, long heads, const ModelParams<T>& model,
                            const std::string& prefix) {
  for (long b = 0; b < depth; ++b) {
    const std::string bp = prefix + ".block" + std::to_string(b);
    const Tensor<T> h1 = layer_norm(x, model.at(bp + ".ln1.gamma"), model.at(bp + ".ln1.beta"));
    x = add(x, multi_head_attention(h1, heads, model, bp + ".attn"));
    const Tensor<T> h2 = layer_norm(x, model.at(bp + ".ln2.gamma"), model.at(bp + ".ln2.beta"));
    const Tensor<T> f =
        add_row_vector(matmul(gelu(add_row_vector(matmul(h2, model.at(bp + ".ffn.w1")),
                                                  model.at(bp + ".ffn.b1"))),
                              model.at(bp + ".ffn.w2")),
                       model.at(bp + ".ffn.b2"));
    x = add(x, f);
  }
  return layer_norm(x, model.at(prefix + ".ln_final.gamma"), model.at(prefix + ".ln_final.beta"));
}

}  // namespace detail

/// Encoder over embedded tokens. Position information is expected to have
/// been added to the patch pixels before embedding, so this map is
/// permutation-equivariant in its rows.
template <typename T>
Tensor<T> encoder_forward(const Tensor<T>& tokens, const ModelParams<T>& model) {
  if (tokens.rows() < 1 || tokens.cols() != model.encoder_cfg.emb) {
    throw contract_error("encoder_forward: tokens must be m x emb with m >= 1");
  }
  return detail::transformer_stack(tokens, model.encoder_cfg.depth, model.encoder_cfg.heads, model,
                                   "encoder");
}

/// Decoder over the full-length sequence (mask tokens and decoder positions
/// already inserted); emits one reconstructed patch per row.
template <typename T>
Tensor<T> decoder_forward(const Tensor<T>& full_seq, const ModelParams<T>& model) {
  if (!model.with_decoder) throw contract_error("decoder_forward: model has no decoder");
  if (full_seq.cols() != model.decoder_cfg.emb) {
    throw contract_error("decoder_forward: sequence dim must equal decoder emb");
  }
  const Tensor<T> h = detail::transformer_stack(full_seq, model.decoder_cfg.depth,
                                                model.decoder_cfg.heads, model, "decoder");
  return add_row_vector(matmul(h, model.at("decoder.out.weight")), model.at("decoder.out.bias"));
}

/// Projects encoder output into the decoder embedding space.
template <typename T>
Tensor<T> encoder_to_decoder(const Tensor<T>& encoded, const ModelParams<T>& model) {
  return add_row_vector(matmul(encoded, model.at("enc2dec.weight")), model.at("enc2dec.bias"));
}

/// Mean-pool over tokens, then an affine map to class logits (1 x classes).
template <typename T>
Tensor<T> classifier_forward(const Tensor<T>& tokens, const ModelParams<T>& model) {
  if (model.num_classes <= 0) throw contract_error("classifier_forward: model has no head");
  const Tensor<T> pooled = mean_over_rows(tokens);
  return add_row_vector(matmul(pooled, model.at("head.weight")), model.at("head.bias"));
}

/// Output of the full masked-autoencoder forward pass.
template <typename T>
struct MaskedForward {
  Tensor<T> reconstruction;       // n x out_dim, every position decoded
  Tensor<T> masked_reconstruction;  // N x out_dim, rows ordered by masked_idx
};

/// Full pretraining path for one clip: embed the surviving (position-tagged)
/// patches, encode, project, scatter mask tokens, add decoder positions,
/// decode.
template <typename T>
MaskedForward<T> masked_autoencoder_forward(const Matrix<T>& patches_with_positions,
                                            const MaskPlan& plan, const ModelParams<T>& model,
                                            const Matrix<T>& decoder_positions) {
  if (patches_with_positions.rows != plan.n) {
    throw contract_error("masked_autoencoder_forward: patch count does not match plan");
  }
  if (decoder_positions.rows != plan.n || decoder_positions.cols != model.decoder_cfg.emb) {
    throw contract_error("masked_autoencoder_forward: bad decoder position table");
  }
  Matrix<T> survivors(plan.survivor_count(), patches_with_positions.cols);
  for (long i = 0; i < plan.survivor_count(); ++i) {
    std::copy_n(patches_with_positions.row(plan.survivor_idx[i]), patches_with_positions.cols,
                survivors.row(i));
  }
  const Tensor<T> tokens = patch_embed(Tensor<T>::constant(survivors), model);
  const Tensor<T> encoded = encoder_forward(tokens, model);
  const Tensor<T> projected = encoder_to_decoder(encoded, model);
  const Tensor<T> full = scatter_with_mask_token(projected, plan, model.at("mask_token"));
  const Tensor<T> dec_in = add(full, Tensor<T>::constant(decoder_positions));
  MaskedForward<T> out;
  out.reconstruction = decoder_forward(dec_in, model);
  out.masked_reconstruction = gather_rows(out.reconstruction, plan.masked_idx);
  return out;
}

}  // namespace maskspec
