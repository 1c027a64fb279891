/*
 * cvc — cross-view completion pre-training, C API.
 *
 * Thin stable wrapper over the C++ core: opaque handles, integer status
 * codes, thread-local error messages. The CLI is built entirely on this
 * surface; embedders can link libcvc the same way.
 */
#ifndef CVC_H
#define CVC_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cvc_status {
  CVC_OK = 0,
  CVC_ERROR = 1,         /* unexpected internal failure */
  CVC_CONFIG_ERROR = 2,  /* bad configuration or arguments */
  CVC_DATA_ERROR = 3,    /* missing/malformed files or inputs */
  CVC_NUMERIC_ERROR = 4  /* NaN/Inf or numerically singular input */
} cvc_status;

const char* cvc_version(void);

/* Message for the most recent failing call on this thread ("" if none). */
const char* cvc_last_error(void);

/* ---- run configuration (key=value text format) ---- */

typedef struct cvc_config cvc_config;

cvc_status cvc_config_create(cvc_config** out);
cvc_status cvc_config_load(const char* path, cvc_config** out);
cvc_status cvc_config_set(cvc_config* cfg, const char* key, const char* value);
/* Writes the value into buf (NUL terminated, truncated to bufsize). */
cvc_status cvc_config_get(const cvc_config* cfg, const char* key, char* buf,
                          size_t bufsize);
void cvc_config_free(cvc_config* cfg);

/* ---- model handle ---- */

typedef struct cvc_model cvc_model;

cvc_status cvc_model_create(const cvc_config* cfg, uint64_t seed, cvc_model** out);
cvc_status cvc_model_load(const char* checkpoint_path, cvc_model** out);
cvc_status cvc_model_save(const cvc_model* model, const char* path);
cvc_status cvc_model_param_count(const cvc_model* model, int64_t* out);
void cvc_model_free(cvc_model* model);

/* ---- closed-form parameter / FLOP accounting ---- */

typedef struct cvc_flops_report {
  int64_t enc_params;
  int64_t dec_params_cross;
  int64_t dec_params_cat;
  int64_t enc_flops;
  int64_t dec_flops_cross;
  int64_t dec_flops_cat;
} cvc_flops_report;

cvc_status cvc_flops(const cvc_config* cfg, cvc_flops_report* out);

/* ---- command entry points (one per CLI verb) ---- */

cvc_status cvc_cmd_pretrain(const cvc_config* cfg, const char* out_dir, int force);

cvc_status cvc_cmd_reconstruct(const char* checkpoint, const char* view1_ppm,
                               const char* view2_ppm, uint64_t seed,
                               const char* out_dir, int force);

cvc_status cvc_cmd_covis(const char* scene_dir, double lo, double hi, int64_t cap,
                         uint64_t seed, double tau, const char* out_dir, int force);

cvc_status cvc_cmd_finetune_flow(const cvc_config* cfg, const char* out_dir, int force);

typedef struct cvc_eval_report {
  int64_t channels; /* 2: aepe is set; 1: delta1/bad3/l1x1000 are set */
  double aepe;
  double delta1;
  double bad3;
  double l1x1000;
} cvc_eval_report;

cvc_status cvc_cmd_eval(const char* pred_path, const char* gt_path,
                        cvc_eval_report* out);

#ifdef __cplusplus
}
#endif

#endif /* CVC_H */
