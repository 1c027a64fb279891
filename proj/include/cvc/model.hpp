#pragma once

#include <optional>

#include "cvc/blocks.hpp"
#include "cvc/patches.hpp"

namespace cvc {

enum class DecoderVariant { kCross, kCat };

const char* to_string(DecoderVariant v);
DecoderVariant variant_from_string(const std::string& s);

struct ModelConfig {
  int64_t image_size = 224;
  int64_t patch = 16;
  int64_t enc_depth = 12;
  int64_t enc_dim = 768;
  int enc_heads = 12;
  int64_t dec_depth = 8;
  int64_t dec_dim = 512;
  int dec_heads = 16;
  DecoderVariant variant = DecoderVariant::kCross;
  double mask_ratio = 0.9;
  bool normalized_targets = true;

  int64_t grid() const { return image_size / patch; }
  int64_t n_tokens() const { return grid() * grid(); }
  int64_t token_len() const { return patch * patch * 3; }

  void validate() const;
  bool operator==(const ModelConfig&) const = default;

  // Equality of everything that determines parameter shapes; masking ratio
  // and target normalization are training-time knobs.
  bool same_architecture(const ModelConfig& o) const {
    return image_size == o.image_size && patch == o.patch &&
           enc_depth == o.enc_depth && enc_dim == o.enc_dim &&
           enc_heads == o.enc_heads && dec_depth == o.dec_depth &&
           dec_dim == o.dec_dim && dec_heads == o.dec_heads && variant == o.variant;
  }

  // Small configuration that keeps every invariant while running in seconds.
  static ModelConfig tiny();
};

// The full two-view completion network: Siamese encoder, decoder (cross or
// concatenated variant), mask token and pixel prediction head.
template <typename T>
class Model {
 public:
  using Value = typename Graph<T>::Value;

  static Model create(const ModelConfig& cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  // Patch-embed + position codes + encoder blocks + final norm over the
  // visible tokens only (all tokens when visible == nullptr). The same
  // parameter tensors encode both views.
  Value encode(Graph<T>& g, const Tensor<T>& tokens,
               const std::vector<int64_t>* visible) const;

  // Project both streams to the decoder width, splat the first stream into a
  // full-length sequence around the mask token, add decoder position codes
  // and run the decoder blocks. Returns post-norm features for all N
  // first-view positions; full_out receives the whole 2N sequence for the
  // concatenated variant.
  Value decode_features(Graph<T>& g, Value enc1, const MaskSpec& mask,
                        Value enc2, Value* full_out = nullptr) const;

  // Pixel prediction head: [N, dec_dim] -> [N, P*P*3].
  Value predict_pixels(Graph<T>& g, Value features) const;

  // Full reconstruction forward pass (no parameter updates).
  Tensor<T> reconstruct(const PatchSet<T>& view1, const MaskSpec& mask,
                        const PatchSet<T>& view2) const;

  // Monocular trick: encode once, feed the encoding as both streams, no
  // masking. Returns pre-head decoder features [N, dec_dim].
  Tensor<T> mono_dup_features(const PatchSet<T>& ps) const;

  const Tensor<T>& encoder_pos() const { return enc_pos_; }
  const Tensor<T>& decoder_pos() const { return dec_pos_; }
  Param<T>& mask_token() { return *mask_token_; }
  const Param<T>& mask_token() const { return *mask_token_; }
  const LinearParams<T>& head() const { return head_; }
  const LayerNormParams<T>& decoder_norm() const { return dec_norm_; }

  // structure handles (tests poke at these)
  LinearParams<T> patch_embed_;
  std::vector<EncoderBlockParams<T>> enc_blocks_;
  LayerNormParams<T> enc_norm_;
  LinearParams<T> enc2dec_;
  std::vector<CrossBlockParams<T>> dec_cross_;
  std::vector<EncoderBlockParams<T>> dec_cat_;
  ViewEmbeddings<T> view_emb_;

 private:
  Model() = default;

  ModelConfig cfg_;
  ParamSet<T> params_;
  Param<T>* mask_token_ = nullptr;
  LayerNormParams<T> dec_norm_;
  LinearParams<T> head_;
  Tensor<T> enc_pos_;  // [N, enc_dim]
  Tensor<T> dec_pos_;  // [N, dec_dim]
};

// Mean over masked tokens of per-element squared error (the squared-norm
// reconstruction objective divided by the constant token length).
template <typename T>
typename Graph<T>::Value pretrain_loss(Graph<T>& g, typename Graph<T>::Value pred,
                                       const PatchSet<T>& target,
                                       const MaskSpec& mask, bool normalized);

// One full pre-training step on a single pair: mask, forward, backward,
// schedule-aware optimizer update. Returns the loss.
template <typename T>
double pretrain_step(Model<T>& model, AdamW<T>& optim, const Image& view1,
                     const Image& view2, uint64_t mask_seed);

// Gradient accumulation over a batch of pairs followed by one update.
// mask seed per element is derived from (seed_base, index).
template <typename T>
double pretrain_batch_step(Model<T>& model, AdamW<T>& optim,
                           const std::vector<const Image*>& v1,
                           const std::vector<const Image*>& v2,
                           uint64_t seed_base);

// Forward-only loss of a pair under a given mask (no update).
template <typename T>
double eval_pair_loss(const Model<T>& model, const Image& view1,
                      const Image& view2, const MaskSpec& mask);

// ---- closed-form accounting ----

// Counted additions and multiplications as separate operations; matrix
// product terms only (attention projections, scores, averaging, output
// projection, feed-forward).
int64_t flops_encoder_layer(int64_t n_tokens, int64_t dim);
int64_t flops_cross_layer(int64_t n_tokens, int64_t dim);
int64_t flops_cat_layer(int64_t n_tokens, int64_t dim);
int64_t flops_encoder(const ModelConfig& cfg);  // L * encoder layer at N
int64_t flops_decoder(const ModelConfig& cfg);  // L' * variant layer at N
int64_t flops_total(const ModelConfig& cfg);

int64_t count_params_encoder(const ModelConfig& cfg);
int64_t count_params_decoder(const ModelConfig& cfg);
int64_t count_params_total(const ModelConfig& cfg);

// ---- checkpoints ----
// File layout: one-line JSON header (config, format version, tensor manifest
// with relative offsets), zero-padded to a 64-byte boundary, then raw
// little-endian float32 tensor payloads, each 64-byte aligned.

template <typename T>
void checkpoint_save_sets(const ModelConfig& cfg,
                          const std::vector<const ParamSet<T>*>& sets,
                          const std::string& path, AdamW<T>* optim = nullptr);

// Loads into existing parameter sets; shapes must match or a DataError naming
// the offending tensor is thrown. Returns the stored optimizer step count if
// optimizer state was present and loaded.
template <typename T>
std::optional<int64_t> checkpoint_load_sets(const ModelConfig& cfg,
                                            const std::vector<ParamSet<T>*>& sets,
                                            const std::string& path,
                                            AdamW<T>* optim = nullptr);

template <typename T>
void checkpoint_save(const Model<T>& model, const std::string& path,
                     AdamW<T>* optim = nullptr);

template <typename T>
std::optional<int64_t> checkpoint_load(Model<T>& model, const std::string& path,
                                       AdamW<T>* optim = nullptr);

// Reads just the config header.
ModelConfig checkpoint_peek_config(const std::string& path);

}  // namespace cvc
