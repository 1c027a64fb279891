#include "cvc.h"

#include <cstring>
#include <memory>

#include "cvc/runner.hpp"

namespace {

thread_local std::string g_last_error;

struct ConfigHandle {
  cvc::RunConfig cfg;
};

struct ModelHandle {
  cvc::Model<float> model;
};

template <typename Fn>
cvc_status guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return CVC_OK;
  } catch (const cvc::ConfigError& e) {
    g_last_error = e.what();
    return CVC_CONFIG_ERROR;
  } catch (const cvc::DataError& e) {
    g_last_error = e.what();
    return CVC_DATA_ERROR;
  } catch (const cvc::NumericError& e) {
    g_last_error = e.what();
    return CVC_NUMERIC_ERROR;
  } catch (const cvc::DimError& e) {
    g_last_error = e.what();
    return CVC_CONFIG_ERROR;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return CVC_ERROR;
  } catch (...) {
    g_last_error = "unknown error";
    return CVC_ERROR;
  }
}

cvc_status require(bool ok, const char* what) {
  if (ok) return CVC_OK;
  g_last_error = what;
  return CVC_CONFIG_ERROR;
}

}  // namespace

extern "C" {

const char* cvc_version(void) { return "0.1.0"; }

const char* cvc_last_error(void) { return g_last_error.c_str(); }

cvc_status cvc_config_create(cvc_config** out) {
  if (auto s = require(out != nullptr, "cvc_config_create: out is null")) return s;
  return guarded([&] { *out = reinterpret_cast<cvc_config*>(new ConfigHandle{}); });
}

cvc_status cvc_config_load(const char* path, cvc_config** out) {
  if (auto s = require(path && out, "cvc_config_load: null argument")) return s;
  return guarded([&] {
    auto h = std::make_unique<ConfigHandle>();
    h->cfg = cvc::RunConfig::from_file(path);
    *out = reinterpret_cast<cvc_config*>(h.release());
  });
}

cvc_status cvc_config_set(cvc_config* cfg, const char* key, const char* value) {
  if (auto s = require(cfg && key && value, "cvc_config_set: null argument")) return s;
  return guarded([&] { reinterpret_cast<ConfigHandle*>(cfg)->cfg.set(key, value); });
}

cvc_status cvc_config_get(const cvc_config* cfg, const char* key, char* buf,
                          size_t bufsize) {
  if (auto s = require(cfg && key && buf && bufsize > 0, "cvc_config_get: null argument"))
    return s;
  return guarded([&] {
    const std::string v = reinterpret_cast<const ConfigHandle*>(cfg)->cfg.get(key);
    std::strncpy(buf, v.c_str(), bufsize - 1);
    buf[bufsize - 1] = '\0';
  });
}

void cvc_config_free(cvc_config* cfg) { delete reinterpret_cast<ConfigHandle*>(cfg); }

cvc_status cvc_model_create(const cvc_config* cfg, uint64_t seed, cvc_model** out) {
  if (auto s = require(cfg && out, "cvc_model_create: null argument")) return s;
  return guarded([&] {
    const auto& rc = reinterpret_cast<const ConfigHandle*>(cfg)->cfg;
    *out = reinterpret_cast<cvc_model*>(
        new ModelHandle{cvc::Model<float>::create(rc.model, seed)});
  });
}

cvc_status cvc_model_load(const char* checkpoint_path, cvc_model** out) {
  if (auto s = require(checkpoint_path && out, "cvc_model_load: null argument")) return s;
  return guarded([&] {
    const cvc::ModelConfig mc = cvc::checkpoint_peek_config(checkpoint_path);
    auto h = std::make_unique<ModelHandle>(ModelHandle{cvc::Model<float>::create(mc, 0)});
    cvc::checkpoint_load(h->model, checkpoint_path);
    *out = reinterpret_cast<cvc_model*>(h.release());
  });
}

cvc_status cvc_model_save(const cvc_model* model, const char* path) {
  if (auto s = require(model && path, "cvc_model_save: null argument")) return s;
  return guarded([&] {
    cvc::checkpoint_save(reinterpret_cast<const ModelHandle*>(model)->model, path);
  });
}

cvc_status cvc_model_param_count(const cvc_model* model, int64_t* out) {
  if (auto s = require(model && out, "cvc_model_param_count: null argument")) return s;
  return guarded([&] {
    *out = reinterpret_cast<const ModelHandle*>(model)->model.params().total_elements();
  });
}

void cvc_model_free(cvc_model* model) { delete reinterpret_cast<ModelHandle*>(model); }

cvc_status cvc_flops(const cvc_config* cfg, cvc_flops_report* out) {
  if (auto s = require(cfg && out, "cvc_flops: null argument")) return s;
  return guarded([&] {
    const auto r = cvc::run_flops(reinterpret_cast<const ConfigHandle*>(cfg)->cfg.model);
    out->enc_params = r.enc_params;
    out->dec_params_cross = r.dec_params_cross;
    out->dec_params_cat = r.dec_params_cat;
    out->enc_flops = r.enc_flops;
    out->dec_flops_cross = r.dec_flops_cross;
    out->dec_flops_cat = r.dec_flops_cat;
  });
}

cvc_status cvc_cmd_pretrain(const cvc_config* cfg, const char* out_dir, int force) {
  if (auto s = require(cfg && out_dir, "cvc_cmd_pretrain: null argument")) return s;
  return guarded([&] {
    cvc::run_pretrain(reinterpret_cast<const ConfigHandle*>(cfg)->cfg, out_dir,
                      force != 0);
  });
}

cvc_status cvc_cmd_reconstruct(const char* checkpoint, const char* view1_ppm,
                               const char* view2_ppm, uint64_t seed,
                               const char* out_dir, int force) {
  if (auto s = require(checkpoint && view1_ppm && view2_ppm && out_dir,
                       "cvc_cmd_reconstruct: null argument"))
    return s;
  return guarded([&] {
    cvc::run_reconstruct(checkpoint, view1_ppm, view2_ppm, seed, out_dir, force != 0);
  });
}

cvc_status cvc_cmd_covis(const char* scene_dir, double lo, double hi, int64_t cap,
                         uint64_t seed, double tau, const char* out_dir, int force) {
  if (auto s = require(scene_dir && out_dir, "cvc_cmd_covis: null argument")) return s;
  return guarded(
      [&] { cvc::run_covis(scene_dir, lo, hi, cap, seed, tau, out_dir, force != 0); });
}

cvc_status cvc_cmd_finetune_flow(const cvc_config* cfg, const char* out_dir, int force) {
  if (auto s = require(cfg && out_dir, "cvc_cmd_finetune_flow: null argument")) return s;
  return guarded([&] {
    cvc::run_finetune_flow(reinterpret_cast<const ConfigHandle*>(cfg)->cfg, out_dir,
                           force != 0);
  });
}

cvc_status cvc_cmd_eval(const char* pred_path, const char* gt_path,
                        cvc_eval_report* out) {
  if (auto s = require(pred_path && gt_path && out, "cvc_cmd_eval: null argument"))
    return s;
  return guarded([&] {
    const auto r = cvc::run_eval(pred_path, gt_path);
    out->channels = r.channels;
    out->aepe = r.aepe;
    out->delta1 = r.delta1;
    out->bad3 = r.bad3;
    out->l1x1000 = r.l1x1000;
  });
}

}  // extern "C"
