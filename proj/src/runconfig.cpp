#include "cvc/runconfig.hpp"

#include <fstream>
#include <sstream>

namespace cvc {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  size_t b = s.find_last_not_of(" \t\r\n");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int64_t out = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer for " + key + ": '" + v + "'");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    uint64_t out = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: bad unsigned integer for " + key + ": '" + v + "'");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: bad number for " + key + ": '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: bad boolean for " + key + ": '" + v + "'");
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = {
      "image_size",    "patch",          "enc_depth",      "enc_dim",
      "enc_heads",     "dec_depth",      "dec_dim",        "dec_heads",
      "decoder_variant", "mask_ratio",   "normalized_targets",
      "base_lr",       "warmup_lr",      "weight_decay",   "beta1",
      "beta2",         "batch_size",     "epochs",         "warmup_epochs",
      "steps",         "warmup_steps",   "seed",           "data_manifest",
      "data_dir",      "init_checkpoint", "resume",        "checkpoint_every",
      "swap_views",    "covis_tau"};
  return k;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  if (key == "image_size") model.image_size = parse_int(key, v);
  else if (key == "patch") model.patch = parse_int(key, v);
  else if (key == "enc_depth") model.enc_depth = parse_int(key, v);
  else if (key == "enc_dim") model.enc_dim = parse_int(key, v);
  else if (key == "enc_heads") model.enc_heads = static_cast<int>(parse_int(key, v));
  else if (key == "dec_depth") model.dec_depth = parse_int(key, v);
  else if (key == "dec_dim") model.dec_dim = parse_int(key, v);
  else if (key == "dec_heads") model.dec_heads = static_cast<int>(parse_int(key, v));
  else if (key == "decoder_variant") model.variant = variant_from_string(v);
  else if (key == "mask_ratio") model.mask_ratio = parse_double(key, v);
  else if (key == "normalized_targets") model.normalized_targets = parse_bool(key, v);
  else if (key == "base_lr") base_lr = parse_double(key, v);
  else if (key == "warmup_lr") warmup_lr = parse_double(key, v);
  else if (key == "weight_decay") weight_decay = parse_double(key, v);
  else if (key == "beta1") beta1 = parse_double(key, v);
  else if (key == "beta2") beta2 = parse_double(key, v);
  else if (key == "batch_size") batch_size = parse_int(key, v);
  else if (key == "epochs") epochs = parse_int(key, v);
  else if (key == "warmup_epochs") warmup_epochs = parse_int(key, v);
  else if (key == "steps") steps = parse_int(key, v);
  else if (key == "warmup_steps") warmup_steps = parse_int(key, v);
  else if (key == "seed") seed = parse_u64(key, v);
  else if (key == "data_manifest") data_manifest = v;
  else if (key == "data_dir") data_dir = v;
  else if (key == "init_checkpoint") init_checkpoint = v;
  else if (key == "resume") resume = v;
  else if (key == "checkpoint_every") checkpoint_every = parse_int(key, v);
  else if (key == "swap_views") swap_views = parse_bool(key, v);
  else if (key == "covis_tau") covis_tau = parse_double(key, v);
  else throw ConfigError("config: unknown key '" + key + "'");
}

std::string RunConfig::get(const std::string& key) const {
  if (key == "image_size") return std::to_string(model.image_size);
  if (key == "patch") return std::to_string(model.patch);
  if (key == "enc_depth") return std::to_string(model.enc_depth);
  if (key == "enc_dim") return std::to_string(model.enc_dim);
  if (key == "enc_heads") return std::to_string(model.enc_heads);
  if (key == "dec_depth") return std::to_string(model.dec_depth);
  if (key == "dec_dim") return std::to_string(model.dec_dim);
  if (key == "dec_heads") return std::to_string(model.dec_heads);
  if (key == "decoder_variant") return to_string(model.variant);
  if (key == "mask_ratio") return fmt_double(model.mask_ratio);
  if (key == "normalized_targets") return model.normalized_targets ? "true" : "false";
  if (key == "base_lr") return fmt_double(base_lr);
  if (key == "warmup_lr") return fmt_double(warmup_lr);
  if (key == "weight_decay") return fmt_double(weight_decay);
  if (key == "beta1") return fmt_double(beta1);
  if (key == "beta2") return fmt_double(beta2);
  if (key == "batch_size") return std::to_string(batch_size);
  if (key == "epochs") return std::to_string(epochs);
  if (key == "warmup_epochs") return std::to_string(warmup_epochs);
  if (key == "steps") return std::to_string(steps);
  if (key == "warmup_steps") return std::to_string(warmup_steps);
  if (key == "seed") return std::to_string(seed);
  if (key == "data_manifest") return data_manifest;
  if (key == "data_dir") return data_dir;
  if (key == "init_checkpoint") return init_checkpoint;
  if (key == "resume") return resume;
  if (key == "checkpoint_every") return std::to_string(checkpoint_every);
  if (key == "swap_views") return swap_views ? "true" : "false";
  if (key == "covis_tau") return fmt_double(covis_tau);
  throw ConfigError("config: unknown key '" + key + "'");
}

void RunConfig::validate() const {
  model.validate();
  if (base_lr <= 0) throw ConfigError("config: base_lr must be > 0");
  if (warmup_lr < 0) throw ConfigError("config: warmup_lr must be >= 0");
  if (weight_decay < 0) throw ConfigError("config: weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
    throw ConfigError("config: betas must lie in [0,1)");
  if (batch_size <= 0) throw ConfigError("config: batch_size must be > 0");
  if (epochs <= 0 && steps <= 0)
    throw ConfigError("config: need epochs > 0 or steps > 0");
  if (checkpoint_every < 0) throw ConfigError("config: checkpoint_every must be >= 0");
  if (covis_tau <= 0) throw ConfigError("config: covis_tau must be > 0");
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  for (const auto& k : keys()) os << k << "=" << get(k) << "\n";
  return os.str();
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  int64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) +
                        " is not key=value: '" + line + "'");
    cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::stringstream buf;
  buf << f.rdbuf();
  return from_text(buf.str());
}

void RunConfig::write_file(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write config file: " + path);
  f << to_text();
}

}  // namespace cvc
