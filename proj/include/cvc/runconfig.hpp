#pragma once

#include <map>

#include "cvc/model.hpp"

namespace cvc {

// Plain-text run configuration (key=value lines, '#' comments). Every run
// writes its fully resolved configuration next to its outputs so a run is
// reproducible from that one file.
struct RunConfig {
  ModelConfig model;

  // optimization
  double base_lr = 1.5e-4;
  double warmup_lr = 1e-6;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  int64_t batch_size = 4;
  int64_t epochs = 400;
  int64_t warmup_epochs = 40;
  int64_t steps = 0;          // when > 0, overrides epochs
  int64_t warmup_steps = -1;  // when >= 0, overrides warmup_epochs

  // run plumbing
  uint64_t seed = 0;
  std::string data_manifest;    // pretrain: pair manifest (json-lines)
  std::string data_dir;         // finetune-flow: triplet directory
  std::string init_checkpoint;  // optional warm start (model weights only)
  std::string resume;           // optional checkpoint with optimizer state
  int64_t checkpoint_every = 0;  // steps between checkpoints; 0 = final only
  bool swap_views = true;        // role-swap augmentation for pairs
  double covis_tau = 0.02;

  // Set one key from its string form; unknown keys are a ConfigError.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  // All keys in serialization order.
  static const std::vector<std::string>& keys();

  void validate() const;
  std::string to_text() const;

  static RunConfig from_file(const std::string& path);
  static RunConfig from_text(const std::string& text);
  void write_file(const std::string& path) const;
};

}  // namespace cvc
