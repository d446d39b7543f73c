#ifndef METADMOE_H
#define METADMOE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum MdmStatus {
  MDM_STATUS_OK = 0,
  MDM_STATUS_NULL_POINTER = 1,
  MDM_STATUS_INVALID_UTF8 = 2,
  MDM_STATUS_INVALID_CONFIG = 3,
  MDM_STATUS_INVALID_ARGUMENT = 4,
  MDM_STATUS_SHAPE = 5,
  MDM_STATUS_INSUFFICIENT_SAMPLES = 6,
  MDM_STATUS_UNKNOWN_DOMAIN = 7,
  MDM_STATUS_NON_FINITE = 8,
  MDM_STATUS_AUDIT_VIOLATION = 9,
  MDM_STATUS_EMPTY = 10,
  MDM_STATUS_UNDEFINED = 11,
  MDM_STATUS_IO = 12,
  MDM_STATUS_FORMAT = 13,
  MDM_STATUS_BUFFER_TOO_SMALL = 14,
  MDM_STATUS_PANIC = 15,
} MdmStatus;

/*
 Experiment configuration.
 */
typedef struct MdmConfig MdmConfig;

/*
 Trained model together with the configuration that built it.
 */
typedef struct MdmModel MdmModel;

/*
 Generated or loaded benchmark.
 */
typedef struct MdmRegistry MdmRegistry;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread (empty after a success).
 The pointer stays valid until the next call into this library on the same
 thread.
 */
const char *mdm_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *mdm_version(void);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not have been freed before.
 */
void mdm_string_free(char *s);

/*
 Default configuration.

 # Safety
 `out` must be a valid pointer to writable storage.
 */
enum MdmStatus mdm_config_default(struct MdmConfig **out);

/*
 Parses and validates a TOML configuration.

 # Safety
 `toml` must be a NUL-terminated string; `out` must be writable.
 */
enum MdmStatus mdm_config_from_toml(const char *toml, struct MdmConfig **out);

/*
 Sets the root seed.

 # Safety
 `cfg` must be a live handle.
 */
enum MdmStatus mdm_config_set_seed(struct MdmConfig *cfg, uint64_t seed);

/*
 Configuration serialised as TOML.

 # Safety
 `cfg` must be a live handle; `out` must be writable.
 */
enum MdmStatus mdm_config_to_toml(const struct MdmConfig *cfg, char **out);

/*
 SHA-256 of the canonical configuration, as lowercase hex.

 # Safety
 `cfg` must be a live handle; `out` must be writable.
 */
enum MdmStatus mdm_config_hash(const struct MdmConfig *cfg, char **out);

/*
 # Safety
 `cfg` must come from this library and not have been freed before.
 */
void mdm_config_free(struct MdmConfig *cfg);

/*
 Generates the synthetic benchmark described by `cfg`.

 # Safety
 `cfg` must be a live handle; `out` must be writable.
 */
enum MdmStatus mdm_registry_generate(const struct MdmConfig *cfg, struct MdmRegistry **out);

/*
 Loads a benchmark directory.

 # Safety
 `dir` must be a NUL-terminated path; `out` must be writable.
 */
enum MdmStatus mdm_registry_load(const char *dir, struct MdmRegistry **out);

/*
 Writes a benchmark directory.

 # Safety
 `reg` must be a live handle; `dir` a NUL-terminated path.
 */
enum MdmStatus mdm_registry_save(const struct MdmRegistry *reg, const char *dir);

/*
 Number of domains (all splits).

 # Safety
 `reg` must be a live handle or null (returns 0).
 */
size_t mdm_registry_num_domains(const struct MdmRegistry *reg);

/*
 Input dimension.

 # Safety
 `reg` must be a live handle or null (returns 0).
 */
size_t mdm_registry_input_dim(const struct MdmRegistry *reg);

/*
 # Safety
 `reg` must come from this library and not have been freed before.
 */
void mdm_registry_free(struct MdmRegistry *reg);

/*
 Full pipeline on `reg`: experts, warm start, meta-training and
 evaluation. Writes the trained model handle to `model_out` and the run
 record as JSON to `record_json_out`; either output may be null to skip it.

 # Safety
 `cfg` and `reg` must be live handles; non-null outputs must be writable.
 */
enum MdmStatus mdm_run_pipeline(const struct MdmConfig *cfg,
                                const struct MdmRegistry *reg,
                                struct MdmModel **model_out,
                                char **record_json_out);

/*
 Saves a model checkpoint directory.

 # Safety
 `model` must be a live handle; `dir` a NUL-terminated path.
 */
enum MdmStatus mdm_model_save(const struct MdmModel *model, const char *dir);

/*
 Loads a model checkpoint directory.

 # Safety
 `dir` must be a NUL-terminated path; `out` must be writable.
 */
enum MdmStatus mdm_model_load(const char *dir, struct MdmModel **out);

/*
 Number of model outputs (classes, or 1 for regression).

 # Safety
 `model` must be a live handle or null (returns 0).
 */
size_t mdm_model_num_outputs(const struct MdmModel *model);

/*
 Adapts the student once on the unlabeled `support` rows
 (`n_support × input_dim`, row-major) and writes predictions for the `x`
 rows (`n × input_dim`) to `out` (`n × num_outputs`, row-major).
 `out_len` is the capacity of `out` in doubles. With `adapt == 0` the
 unadapted student predicts and `support` may be null.

 # Safety
 Array pointers must reference at least the stated number of doubles.
 */
enum MdmStatus mdm_model_adapt_predict(const struct MdmModel *model,
                                       const double *support,
                                       size_t n_support,
                                       const double *x,
                                       size_t n,
                                       size_t input_dim,
                                       int32_t adapt,
                                       double *out,
                                       size_t out_len);

/*
 # Safety
 `model` must come from this library and not have been freed before.
 */
void mdm_model_free(struct MdmModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METADMOE_H */
