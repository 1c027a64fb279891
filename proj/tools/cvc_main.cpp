// cvc command line: pretrain / reconstruct / covis / flops / finetune-flow /
// eval. Built purely on the C API in cvc.h; exit code equals the cvc_status
// of the failing call (0 ok, 2 config error, 3 data error, 4 numerical).

#include <cstdio>
#include <memory>
#include <string>

#include <CLI11.hpp>

#include "cvc.h"

namespace {

struct ConfigDeleter {
  void operator()(cvc_config* c) const { cvc_config_free(c); }
};
using ConfigPtr = std::unique_ptr<cvc_config, ConfigDeleter>;

int fail(cvc_status s) {
  std::fprintf(stderr, "error: %s\n", cvc_last_error());
  return static_cast<int>(s);
}

// Loads --config (or defaults) and applies --seed when given.
int make_config(const std::string& config_path, const std::string& seed_str,
                ConfigPtr& out) {
  cvc_config* raw = nullptr;
  cvc_status s = config_path.empty() ? cvc_config_create(&raw)
                                     : cvc_config_load(config_path.c_str(), &raw);
  if (s != CVC_OK) return fail(s);
  out.reset(raw);
  if (!seed_str.empty()) {
    s = cvc_config_set(out.get(), "seed", seed_str.c_str());
    if (s != CVC_OK) return fail(s);
  }
  return 0;
}

void print_flops(const cvc_flops_report& r) {
  const double G = 1e9, M = 1e6;
  std::printf("%-22s %12s %14s\n", "component", "params (M)", "flops (G)");
  std::printf("%-22s %12.2f %14.2f\n", "encoder", r.enc_params / M, r.enc_flops / G);
  std::printf("%-22s %12.2f %14.2f\n", "decoder (cross)", r.dec_params_cross / M,
              r.dec_flops_cross / G);
  std::printf("%-22s %12.2f %14.2f\n", "decoder (cat)", r.dec_params_cat / M,
              r.dec_flops_cat / G);
  std::printf("%-22s %12.2f %14.2f\n", "total (cross)",
              (r.enc_params + r.dec_params_cross) / M,
              (r.enc_flops + r.dec_flops_cross) / G);
  std::printf("%-22s %12.2f %14.2f\n", "total (cat)",
              (r.enc_params + r.dec_params_cat) / M, (r.enc_flops + r.dec_flops_cat) / G);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-view completion pre-training toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir, seed_str;
  bool force = false;
  app.add_option("--config", config_path, "run configuration file (key=value)");
  app.add_option("--seed", seed_str, "root seed override");
  app.add_option("--out", out_dir, "output directory");
  app.add_flag("--force", force, "allow writing into a non-empty output directory");

  auto* pretrain = app.add_subcommand("pretrain", "pre-train on a pair manifest");

  auto* reconstruct =
      app.add_subcommand("reconstruct", "write reference/masked/prediction/target PPMs");
  std::string checkpoint, view1, view2;
  reconstruct->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  reconstruct->add_option("--view1", view1, "masked view PPM")->required();
  reconstruct->add_option("--view2", view2, "reference view PPM")->required();

  auto* covis = app.add_subcommand("covis", "build a co-visibility pair manifest");
  std::string scene_dir;
  double lo = 0.5, hi = 1.0, tau = 0.02;
  int64_t cap = 1000;
  covis->add_option("--scene-dir", scene_dir, "directory of posed views")->required();
  covis->add_option("--lo", lo, "lower co-visibility bound");
  covis->add_option("--hi", hi, "upper co-visibility bound");
  covis->add_option("--cap", cap, "max pairs to keep");
  covis->add_option("--tau", tau, "relative depth tolerance");

  auto* flops = app.add_subcommand("flops", "print parameter and FLOP accounting");

  auto* finetune = app.add_subcommand("finetune-flow", "finetune the dense flow head");

  auto* eval = app.add_subcommand("eval", "compare prediction and ground-truth maps");
  std::string pred_path, gt_path;
  eval->add_option("--pred", pred_path, "prediction map (.crdp)")->required();
  eval->add_option("--gt", gt_path, "ground-truth map (.crdp)")->required();

  CLI11_PARSE(app, argc, argv);

  uint64_t seed = 0;
  if (!seed_str.empty()) {
    try {
      seed = std::stoull(seed_str);
    } catch (const std::exception&) {
      std::fprintf(stderr, "error: --seed must be an unsigned integer\n");
      return static_cast<int>(CVC_CONFIG_ERROR);
    }
  }

  if (pretrain->parsed()) {
    if (config_path.empty() || out_dir.empty()) {
      std::fprintf(stderr, "error: pretrain requires --config and --out\n");
      return static_cast<int>(CVC_CONFIG_ERROR);
    }
    ConfigPtr cfg;
    if (int rc = make_config(config_path, seed_str, cfg)) return rc;
    cvc_status s = cvc_cmd_pretrain(cfg.get(), out_dir.c_str(), force ? 1 : 0);
    if (s != CVC_OK) return fail(s);
    std::printf("pretrain done; outputs in %s\n", out_dir.c_str());
    return 0;
  }

  if (reconstruct->parsed()) {
    if (out_dir.empty()) {
      std::fprintf(stderr, "error: reconstruct requires --out\n");
      return static_cast<int>(CVC_CONFIG_ERROR);
    }
    cvc_status s = cvc_cmd_reconstruct(checkpoint.c_str(), view1.c_str(), view2.c_str(),
                                       seed, out_dir.c_str(), force ? 1 : 0);
    if (s != CVC_OK) return fail(s);
    std::printf("reconstruction PPMs written to %s\n", out_dir.c_str());
    return 0;
  }

  if (covis->parsed()) {
    if (out_dir.empty()) {
      std::fprintf(stderr, "error: covis requires --out\n");
      return static_cast<int>(CVC_CONFIG_ERROR);
    }
    cvc_status s = cvc_cmd_covis(scene_dir.c_str(), lo, hi, cap, seed, tau,
                                 out_dir.c_str(), force ? 1 : 0);
    if (s != CVC_OK) return fail(s);
    std::printf("pair manifest written to %s\n", out_dir.c_str());
    return 0;
  }

  if (flops->parsed()) {
    ConfigPtr cfg;
    if (int rc = make_config(config_path, seed_str, cfg)) return rc;
    cvc_flops_report r{};
    cvc_status s = cvc_flops(cfg.get(), &r);
    if (s != CVC_OK) return fail(s);
    print_flops(r);
    return 0;
  }

  if (finetune->parsed()) {
    if (config_path.empty() || out_dir.empty()) {
      std::fprintf(stderr, "error: finetune-flow requires --config and --out\n");
      return static_cast<int>(CVC_CONFIG_ERROR);
    }
    ConfigPtr cfg;
    if (int rc = make_config(config_path, seed_str, cfg)) return rc;
    cvc_status s = cvc_cmd_finetune_flow(cfg.get(), out_dir.c_str(), force ? 1 : 0);
    if (s != CVC_OK) return fail(s);
    std::printf("flow finetuning done; outputs in %s\n", out_dir.c_str());
    return 0;
  }

  if (eval->parsed()) {
    cvc_eval_report r{};
    cvc_status s = cvc_cmd_eval(pred_path.c_str(), gt_path.c_str(), &r);
    if (s != CVC_OK) return fail(s);
    if (r.channels == 2) {
      std::printf("aepe %.6f\n", r.aepe);
    } else {
      std::printf("delta1 %.6f\nbad3 %.6f\nl1x1000 %.6f\n", r.delta1, r.bad3, r.l1x1000);
    }
    return 0;
  }

  return static_cast<int>(CVC_CONFIG_ERROR);
}
