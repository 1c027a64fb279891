#pragma once

#include "cvc/heads.hpp"
#include "cvc/runconfig.hpp"

namespace cvc {

// Command implementations behind the CLI / C API. All filesystem-facing
// errors carry the offending path. Output directories are never reused
// silently: an existing non-empty directory requires force.

void prepare_out_dir(const std::string& path, bool force);

struct PretrainResult {
  int64_t steps_run = 0;
  double first_loss = 0;
  double final_loss = 0;
  std::string checkpoint_path;
  std::string loss_csv_path;
};
PretrainResult run_pretrain(const RunConfig& cfg, const std::string& out_dir, bool force);

struct ReconstructResult {
  std::string reference_ppm, masked_ppm, prediction_ppm, target_ppm;
  double masked_loss = 0;
};
ReconstructResult run_reconstruct(const std::string& checkpoint,
                                  const std::string& view1_ppm,
                                  const std::string& view2_ppm, uint64_t seed,
                                  const std::string& out_dir, bool force);

struct CovisResultFiles {
  std::string manifest_path;
  std::string stats_csv_path;
  int64_t n_pairs = 0;
};
CovisResultFiles run_covis(const std::string& scene_dir, double lo, double hi,
                           int64_t cap, uint64_t seed, double tau,
                           const std::string& out_dir, bool force);

struct FlopsReport {
  int64_t enc_params = 0;
  int64_t dec_params_cross = 0;
  int64_t dec_params_cat = 0;
  int64_t enc_flops = 0;
  int64_t dec_flops_cross = 0;
  int64_t dec_flops_cat = 0;
};
FlopsReport run_flops(const ModelConfig& cfg);

struct FinetuneFlowResult {
  int64_t steps_run = 0;
  double final_loss = 0;
  double train_aepe = 0;
  std::string checkpoint_path;
};
FinetuneFlowResult run_finetune_flow(const RunConfig& cfg, const std::string& out_dir,
                                     bool force);

struct EvalReport {
  int64_t channels = 0;
  double aepe = 0;               // 2-channel inputs
  double delta1 = 0, bad3 = 0, l1x1000 = 0;  // 1-channel inputs
};
EvalReport run_eval(const std::string& pred_path, const std::string& gt_path);

// Posed-view on-disk layout: <stem>.ppm (image), <stem>.crdp (depth),
// <stem>.cam (pinhole + world-from-camera pose as JSON).
void save_camera_view(const std::string& dir, const std::string& stem,
                      const CameraView& view);
CameraView load_camera_view(const std::string& dir, const std::string& stem);
// Loads every <stem>.ppm in the directory (sorted); ids are the ppm names.
std::vector<CameraView> load_scene_dir(const std::string& dir);

// Flow model persistence (backbone + dense head parameter sets).
template <typename T>
void save_flow_model(const FlowRegressor<T>& fr, const std::string& path,
                     AdamW<T>* optim = nullptr);
template <typename T>
FlowRegressor<T> load_flow_model(const std::string& path);

}  // namespace cvc
