#include "cvc/model.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace cvc {

const char* to_string(DecoderVariant v) {
  return v == DecoderVariant::kCross ? "cross" : "cat";
}

DecoderVariant variant_from_string(const std::string& s) {
  if (s == "cross") return DecoderVariant::kCross;
  if (s == "cat") return DecoderVariant::kCat;
  throw ConfigError("unknown decoder variant: " + s + " (expected cross|cat)");
}

void ModelConfig::validate() const {
  if (image_size <= 0 || patch <= 0 || image_size % patch != 0)
    throw ConfigError("image size must be a positive multiple of patch size");
  if (enc_depth <= 0 || dec_depth <= 0) throw ConfigError("depths must be positive");
  if (enc_heads <= 0 || enc_dim % enc_heads != 0)
    throw ConfigError("encoder dim not divisible by heads");
  if (dec_heads <= 0 || dec_dim % dec_heads != 0)
    throw ConfigError("decoder dim not divisible by heads");
  if (enc_dim % 4 != 0 || dec_dim % 4 != 0)
    throw ConfigError("embedding dims must be divisible by 4 for position codes");
  if (mask_ratio < 0.0 || mask_ratio > 1.0)
    throw ConfigError("masking ratio outside [0,1]");
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.image_size = 64;
  c.patch = 8;
  c.enc_depth = 4;
  c.enc_dim = 64;
  c.enc_heads = 4;
  c.dec_depth = 2;
  c.dec_dim = 48;
  c.dec_heads = 4;
  return c;
}

template <typename T>
Model<T> Model<T>::create(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg_ = cfg;
  Init<T> init(derive_seed(seed, "init", 0));
  auto& ps = m.params_;
  m.patch_embed_ =
      LinearParams<T>::create(ps, "patch_embed", cfg.token_len(), cfg.enc_dim, init);
  for (int64_t i = 0; i < cfg.enc_depth; ++i)
    m.enc_blocks_.push_back(EncoderBlockParams<T>::create(
        ps, "enc.block" + std::to_string(i), cfg.enc_dim, cfg.enc_heads, init));
  m.enc_norm_ = LayerNormParams<T>::create(ps, "enc.norm", cfg.enc_dim, init);
  m.enc2dec_ = LinearParams<T>::create(ps, "enc2dec", cfg.enc_dim, cfg.dec_dim, init);
  m.mask_token_ = &ps.create("dec.mask_token", init.trunc_normal({cfg.dec_dim}));
  if (cfg.variant == DecoderVariant::kCross) {
    for (int64_t i = 0; i < cfg.dec_depth; ++i)
      m.dec_cross_.push_back(CrossBlockParams<T>::create(
          ps, "dec.block" + std::to_string(i), cfg.dec_dim, cfg.dec_heads, init));
  } else {
    m.view_emb_ = ViewEmbeddings<T>::create(ps, "dec.view", cfg.dec_dim, init);
    for (int64_t i = 0; i < cfg.dec_depth; ++i)
      m.dec_cat_.push_back(EncoderBlockParams<T>::create(
          ps, "dec.block" + std::to_string(i), cfg.dec_dim, cfg.dec_heads, init));
  }
  m.dec_norm_ = LayerNormParams<T>::create(ps, "dec.norm", cfg.dec_dim, init);
  m.head_ = LinearParams<T>::create(ps, "head", cfg.dec_dim, cfg.token_len(), init);
  m.enc_pos_ = pos_embed_2d<T>(cfg.grid(), cfg.grid(), cfg.enc_dim);
  m.dec_pos_ = pos_embed_2d<T>(cfg.grid(), cfg.grid(), cfg.dec_dim);
  return m;
}

template <typename T>
typename Graph<T>::Value Model<T>::encode(Graph<T>& g, const Tensor<T>& tokens,
                                          const std::vector<int64_t>* visible) const {
  check_dim(tokens.rows() == cfg_.n_tokens() && tokens.cols() == cfg_.token_len(),
            "encode: token set does not match model config");
  Value x = g.constant(tokens);
  Value pos = g.constant(enc_pos_);
  if (visible) {
    if (visible->empty()) throw DataError("encode: zero visible tokens");
    x = g.select_rows(x, *visible);
    pos = g.select_rows(pos, *visible);
  }
  x = g.add(patch_embed_.forward(g, x), pos);
  for (const auto& b : enc_blocks_) x = b.forward(g, x);
  return enc_norm_.forward(g, x);
}

template <typename T>
typename Graph<T>::Value Model<T>::decode_features(Graph<T>& g, Value enc1,
                                                   const MaskSpec& mask, Value enc2,
                                                   Value* full_out) const {
  const int64_t n = cfg_.n_tokens();
  check_dim(static_cast<int64_t>(mask.mask.size()) == n,
            "decode: mask length != token count");
  check_dim(g.val(enc1).rows() == mask.n_visible(),
            "decode: visible stream length != mask visible count");
  Value f1 = enc2dec_.forward(g, enc1);
  Value f2 = enc2dec_.forward(g, enc2);
  // splat the compacted visible stream back to full length; masked slots get
  // the mask token
  std::vector<int64_t> keep(static_cast<size_t>(n), -1);
  int64_t slot = 0;
  for (int64_t i = 0; i < n; ++i)
    if (!mask.mask[i]) keep[i] = slot++;
  Value pos = g.constant(dec_pos_);
  Value s1 = g.add(g.scatter_rows(f1, keep, g.param(*mask_token_), n), pos);
  Value s2 = g.add(f2, pos);
  if (cfg_.variant == DecoderVariant::kCross) {
    for (const auto& b : dec_cross_) s1 = b.forward(g, s1, s2);
    Value out = dec_norm_.forward(g, s1);
    if (full_out) *full_out = out;
    return out;
  }
  Value full{};
  cat_stack_forward(g, s1, s2, view_emb_, dec_cat_, &full);
  Value full_normed = dec_norm_.forward(g, full);
  if (full_out) *full_out = full_normed;
  return g.slice_rows(full_normed, 0, n);
}

template <typename T>
typename Graph<T>::Value Model<T>::predict_pixels(Graph<T>& g, Value features) const {
  return head_.forward(g, features);
}

template <typename T>
Tensor<T> Model<T>::reconstruct(const PatchSet<T>& view1, const MaskSpec& mask,
                                const PatchSet<T>& view2) const {
  Graph<T> g;
  auto vis = mask.visible_indices();
  Value enc1 = encode(g, view1.tokens, &vis);
  Value enc2 = encode(g, view2.tokens, nullptr);
  Value feats = decode_features(g, enc1, mask, enc2);
  Value pred = predict_pixels(g, feats);
  return g.val(pred);
}

template <typename T>
Tensor<T> Model<T>::mono_dup_features(const PatchSet<T>& ps) const {
  Graph<T> g;
  Value enc = encode(g, ps.tokens, nullptr);
  MaskSpec none = sample_mask(cfg_.n_tokens(), 0.0, 0);
  Value feats = decode_features(g, enc, none, enc);
  return g.val(feats);
}

template <typename T>
typename Graph<T>::Value pretrain_loss(Graph<T>& g, typename Graph<T>::Value pred,
                                       const PatchSet<T>& target,
                                       const MaskSpec& mask, bool normalized) {
  const Tensor<T>& tgt =
      normalized ? normalize_targets(target).tokens : target.tokens;
  return g.masked_mean_sq_err(pred, tgt, mask.mask);
}

namespace {

template <typename T>
double run_pair(Model<T>& model, const Image& view1, const Image& view2,
                uint64_t mask_seed, double loss_scale) {
  const ModelConfig& cfg = model.config();
  auto ps1 = patchify<T>(view1, cfg.patch);
  auto ps2 = patchify<T>(view2, cfg.patch);
  MaskSpec mask = sample_mask(cfg.n_tokens(), cfg.mask_ratio, mask_seed);
  Graph<T> g;
  auto vis = mask.visible_indices();
  auto enc1 = model.encode(g, ps1.tokens, &vis);
  auto enc2 = model.encode(g, ps2.tokens, nullptr);
  auto feats = model.decode_features(g, enc1, mask, enc2);
  auto pred = model.predict_pixels(g, feats);
  auto loss = pretrain_loss(g, pred, ps1, mask, cfg.normalized_targets);
  auto scaled = loss_scale == 1.0 ? loss : g.scale(loss, static_cast<T>(loss_scale));
  const double loss_val = static_cast<double>(g.val(loss).scalar());
  if (!std::isfinite(loss_val)) throw NumericError("pre-training loss is non-finite");
  g.backward(scaled);
  return loss_val;
}

template <typename T>
void check_grads_finite(ParamSet<T>& params) {
  for (auto& p : params)
    if (!p->grad.all_finite())
      throw NumericError("non-finite gradient in " + p->name);
}

}  // namespace

template <typename T>
double pretrain_step(Model<T>& model, AdamW<T>& optim, const Image& view1,
                     const Image& view2, uint64_t mask_seed) {
  model.params().zero_grad();
  const double loss = run_pair(model, view1, view2, mask_seed, 1.0);
  check_grads_finite(model.params());
  optim.step_scheduled();
  return loss;
}

template <typename T>
double pretrain_batch_step(Model<T>& model, AdamW<T>& optim,
                           const std::vector<const Image*>& v1,
                           const std::vector<const Image*>& v2,
                           uint64_t seed_base) {
  check_dim(!v1.empty() && v1.size() == v2.size(), "batch views mismatch");
  model.params().zero_grad();
  const double scale = 1.0 / static_cast<double>(v1.size());
  double mean_loss = 0.0;
  for (size_t i = 0; i < v1.size(); ++i)
    mean_loss += scale * run_pair(model, *v1[i], *v2[i],
                                  derive_seed(seed_base, "mask", i), scale);
  check_grads_finite(model.params());
  optim.step_scheduled();
  return mean_loss;
}

template <typename T>
double eval_pair_loss(const Model<T>& model, const Image& view1,
                      const Image& view2, const MaskSpec& mask) {
  const ModelConfig& cfg = model.config();
  auto ps1 = patchify<T>(view1, cfg.patch);
  auto ps2 = patchify<T>(view2, cfg.patch);
  Graph<T> g;
  auto vis = mask.visible_indices();
  auto enc1 = model.encode(g, ps1.tokens, &vis);
  auto enc2 = model.encode(g, ps2.tokens, nullptr);
  auto feats = model.decode_features(g, enc1, mask, enc2);
  auto pred = model.predict_pixels(g, feats);
  auto loss = pretrain_loss(g, pred, ps1, mask, cfg.normalized_targets);
  return static_cast<double>(g.val(loss).scalar());
}

// ---- closed-form accounting ----

int64_t flops_encoder_layer(int64_t n, int64_t d) {
  // kqv 3nd^2, scores dn^2, avg dn^2, out nd^2, ff 4nd^2 + 4nd^2
  return 2 * (12 * n * d * d + 2 * d * n * n);
}

int64_t flops_cross_layer(int64_t n, int64_t d) {
  // self + cross attention (each kqv 3nd^2, scores dn^2, avg dn^2, out nd^2)
  // + feed-forward
  return 2 * (16 * n * d * d + 4 * d * n * n);
}

int64_t flops_cat_layer(int64_t n, int64_t d) {
  // encoder-layer terms over the concatenated 2n-token sequence
  return flops_encoder_layer(2 * n, d);
}

int64_t flops_encoder(const ModelConfig& cfg) {
  return cfg.enc_depth * flops_encoder_layer(cfg.n_tokens(), cfg.enc_dim);
}

int64_t flops_decoder(const ModelConfig& cfg) {
  const int64_t n = cfg.n_tokens();
  return cfg.dec_depth * (cfg.variant == DecoderVariant::kCross
                              ? flops_cross_layer(n, cfg.dec_dim)
                              : flops_cat_layer(n, cfg.dec_dim));
}

int64_t flops_total(const ModelConfig& cfg) {
  return flops_encoder(cfg) + flops_decoder(cfg);
}

namespace {
int64_t linear_params(int64_t din, int64_t dout) { return din * dout + dout; }
int64_t mlp_params(int64_t d) { return linear_params(d, 4 * d) + linear_params(4 * d, d); }
int64_t attn_params(int64_t d) { return 4 * linear_params(d, d); }
}  // namespace

int64_t count_params_encoder(const ModelConfig& cfg) {
  const int64_t d = cfg.enc_dim;
  const int64_t block = 2 * d + attn_params(d) + 2 * d + mlp_params(d);
  return linear_params(cfg.token_len(), d) + cfg.enc_depth * block + 2 * d;
}

int64_t count_params_decoder(const ModelConfig& cfg) {
  const int64_t d = cfg.dec_dim;
  int64_t block;
  int64_t extra = 0;
  if (cfg.variant == DecoderVariant::kCross) {
    block = 4 * 2 * d + 2 * attn_params(d) + mlp_params(d);
  } else {
    block = 2 * 2 * d + attn_params(d) + mlp_params(d);
    extra = 2 * d;  // view embeddings
  }
  return linear_params(cfg.enc_dim, d) + d /*mask token*/ + cfg.dec_depth * block +
         extra + 2 * d /*final norm*/ + linear_params(d, cfg.token_len());
}

int64_t count_params_total(const ModelConfig& cfg) {
  return count_params_encoder(cfg) + count_params_decoder(cfg);
}

// ---- checkpoints ----

namespace {

constexpr int kCheckpointVersion = 1;

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"image_size", c.image_size}, {"patch", c.patch},
          {"enc_depth", c.enc_depth},   {"enc_dim", c.enc_dim},
          {"enc_heads", c.enc_heads},   {"dec_depth", c.dec_depth},
          {"dec_dim", c.dec_dim},       {"dec_heads", c.dec_heads},
          {"variant", to_string(c.variant)}, {"mask_ratio", c.mask_ratio},
          {"normalized_targets", c.normalized_targets}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.image_size = j.at("image_size").get<int64_t>();
  c.patch = j.at("patch").get<int64_t>();
  c.enc_depth = j.at("enc_depth").get<int64_t>();
  c.enc_dim = j.at("enc_dim").get<int64_t>();
  c.enc_heads = j.at("enc_heads").get<int>();
  c.dec_depth = j.at("dec_depth").get<int64_t>();
  c.dec_dim = j.at("dec_dim").get<int64_t>();
  c.dec_heads = j.at("dec_heads").get<int>();
  c.variant = variant_from_string(j.at("variant").get<std::string>());
  c.mask_ratio = j.at("mask_ratio").get<double>();
  c.normalized_targets = j.at("normalized_targets").get<bool>();
  return c;
}

int64_t align64(int64_t x) { return (x + 63) & ~int64_t(63); }

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> tensor_list(
    const std::vector<const ParamSet<T>*>& sets, AdamW<T>* optim) {
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  for (const ParamSet<T>* set : sets)
    for (const auto& p : *set) out.emplace_back(p->name, &p->value);
  if (optim) {
    for (auto& s : optim->slots()) {
      out.emplace_back("optim." + s.param->name + ".m", &s.m);
      out.emplace_back("optim." + s.param->name + ".v", &s.v);
    }
  }
  return out;
}

}  // namespace

template <typename T>
void checkpoint_save_sets(const ModelConfig& cfg,
                          const std::vector<const ParamSet<T>*>& sets,
                          const std::string& path, AdamW<T>* optim) {
  auto tensors = tensor_list(sets, optim);
  nlohmann::json manifest = nlohmann::json::array();
  int64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    offset = align64(offset);
    manifest.push_back({{"name", name}, {"shape", t->shape}, {"offset", offset}});
    offset += t->numel() * static_cast<int64_t>(sizeof(float));
  }
  nlohmann::json header = {{"format_version", kCheckpointVersion},
                           {"config", config_to_json(cfg)},
                           {"tensors", manifest}};
  if (optim) header["optim_step"] = optim->step_count();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint: " + path);
  std::string h = header.dump();
  f << h << '\n';
  const int64_t base = align64(static_cast<int64_t>(h.size()) + 1);
  for (int64_t i = static_cast<int64_t>(h.size()) + 1; i < base; ++i) f.put('\0');
  int64_t pos = 0;
  for (const auto& [name, t] : tensors) {
    const int64_t aligned = align64(pos);
    for (; pos < aligned; ++pos) f.put('\0');
    std::vector<float> raw(t->data.size());
    for (size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<float>(t->data[i]);
    f.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(raw.size() * sizeof(float)));
    pos += static_cast<int64_t>(raw.size() * sizeof(float));
  }
  if (!f) throw DataError("checkpoint write failed: " + path);
}

ModelConfig checkpoint_peek_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError("checkpoint missing header: " + path);
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded()) throw DataError("checkpoint header is not valid JSON: " + path);
  if (header.at("format_version").get<int>() != kCheckpointVersion)
    throw DataError("unsupported checkpoint format version in " + path);
  return config_from_json(header.at("config"));
}

template <typename T>
std::optional<int64_t> checkpoint_load_sets(const ModelConfig& cfg,
                                            const std::vector<ParamSet<T>*>& sets,
                                            const std::string& path, AdamW<T>* optim) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError("checkpoint missing header: " + path);
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded()) throw DataError("checkpoint header is not valid JSON: " + path);
  if (header.at("format_version").get<int>() != kCheckpointVersion)
    throw DataError("unsupported checkpoint format version in " + path);
  if (!config_from_json(header.at("config")).same_architecture(cfg))
    throw DataError("checkpoint architecture does not match model config: " + path);
  const int64_t base = align64(static_cast<int64_t>(line.size()) + 1);

  std::unordered_map<std::string, std::pair<std::vector<int64_t>, int64_t>> entries;
  for (const auto& e : header.at("tensors")) {
    entries[e.at("name").get<std::string>()] = {
        e.at("shape").get<std::vector<int64_t>>(), e.at("offset").get<int64_t>()};
  }
  auto load_into = [&](const std::string& name, Tensor<T>& dst) {
    auto it = entries.find(name);
    if (it == entries.end())
      throw DataError("checkpoint missing tensor '" + name + "' in " + path);
    if (it->second.first != dst.shape)
      throw DataError("checkpoint shape mismatch for tensor '" + name + "' in " + path);
    f.clear();
    f.seekg(base + it->second.second);
    std::vector<float> raw(dst.data.size());
    f.read(reinterpret_cast<char*>(raw.data()),
           static_cast<std::streamsize>(raw.size() * sizeof(float)));
    if (f.gcount() != static_cast<std::streamsize>(raw.size() * sizeof(float)))
      throw DataError("checkpoint truncated at tensor '" + name + "' in " + path);
    for (size_t i = 0; i < raw.size(); ++i) dst.data[i] = static_cast<T>(raw[i]);
  };
  for (ParamSet<T>* set : sets)
    for (auto& p : *set) load_into(p->name, p->value);
  if (optim && header.contains("optim_step")) {
    for (auto& s : optim->slots()) {
      load_into("optim." + s.param->name + ".m", s.m);
      load_into("optim." + s.param->name + ".v", s.v);
    }
    const int64_t step = header.at("optim_step").get<int64_t>();
    optim->set_step_count(step);
    return step;
  }
  return std::nullopt;
}

template <typename T>
void checkpoint_save(const Model<T>& model, const std::string& path, AdamW<T>* optim) {
  checkpoint_save_sets<T>(model.config(), {&model.params()}, path, optim);
}

template <typename T>
std::optional<int64_t> checkpoint_load(Model<T>& model, const std::string& path,
                                       AdamW<T>* optim) {
  return checkpoint_load_sets<T>(model.config(), {&model.params()}, path, optim);
}

template class Model<float>;
template class Model<double>;
template typename Graph<float>::Value pretrain_loss<float>(
    Graph<float>&, typename Graph<float>::Value, const PatchSet<float>&,
    const MaskSpec&, bool);
template typename Graph<double>::Value pretrain_loss<double>(
    Graph<double>&, typename Graph<double>::Value, const PatchSet<double>&,
    const MaskSpec&, bool);
template double pretrain_step<float>(Model<float>&, AdamW<float>&, const Image&,
                                     const Image&, uint64_t);
template double pretrain_step<double>(Model<double>&, AdamW<double>&, const Image&,
                                      const Image&, uint64_t);
template double pretrain_batch_step<float>(Model<float>&, AdamW<float>&,
                                           const std::vector<const Image*>&,
                                           const std::vector<const Image*>&, uint64_t);
template double pretrain_batch_step<double>(Model<double>&, AdamW<double>&,
                                            const std::vector<const Image*>&,
                                            const std::vector<const Image*>&, uint64_t);
template double eval_pair_loss<float>(const Model<float>&, const Image&, const Image&,
                                      const MaskSpec&);
template double eval_pair_loss<double>(const Model<double>&, const Image&, const Image&,
                                       const MaskSpec&);
template void checkpoint_save_sets<float>(const ModelConfig&,
                                          const std::vector<const ParamSet<float>*>&,
                                          const std::string&, AdamW<float>*);
template void checkpoint_save_sets<double>(const ModelConfig&,
                                           const std::vector<const ParamSet<double>*>&,
                                           const std::string&, AdamW<double>*);
template std::optional<int64_t> checkpoint_load_sets<float>(
    const ModelConfig&, const std::vector<ParamSet<float>*>&, const std::string&,
    AdamW<float>*);
template std::optional<int64_t> checkpoint_load_sets<double>(
    const ModelConfig&, const std::vector<ParamSet<double>*>&, const std::string&,
    AdamW<double>*);
template void checkpoint_save<float>(const Model<float>&, const std::string&, AdamW<float>*);
template void checkpoint_save<double>(const Model<double>&, const std::string&, AdamW<double>*);
template std::optional<int64_t> checkpoint_load<float>(Model<float>&, const std::string&,
                                                       AdamW<float>*);
template std::optional<int64_t> checkpoint_load<double>(Model<double>&, const std::string&,
                                                        AdamW<double>*);

}  // namespace cvc
