/*
 * Copyright (c) 2026 The urde Authors
 *
 * Licensed under the Apache License, Version 2.0;
 * You may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an 'AS IS' BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#ifndef URDE_URDE_H
#define URDE_URDE_H

#include <stddef.h>
#include <stdint.h>

#if defined(URDE_BUILDING_LIBRARY)
#define URDE_API __attribute__((visibility("default")))
#else
#define URDE_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes. The first four double as CLI exit codes. */
typedef enum urde_status {
  URDE_OK = 0,
  URDE_ERR_USAGE = 1,    /* invalid argument or configuration */
  URDE_ERR_DATA = 2,     /* malformed file, shape mismatch, degenerate data */
  URDE_ERR_DIVERGED = 3, /* training produced a non-finite loss */
  URDE_ERR_INTERNAL = 4
} urde_status;

typedef struct urde_config urde_config;
typedef struct urde_dataset urde_dataset;
typedef struct urde_model urde_model;
typedef struct urde_distances urde_distances;

/* Message of the last failed call on this thread; empty after success. */
URDE_API const char* urde_last_error(void);
URDE_API const char* urde_version(void);
/* 0 means all available cores. */
URDE_API void urde_set_threads(unsigned n);
/* Frees strings returned through char** out-parameters. */
URDE_API void urde_string_free(char* s);

/* key = value configuration. Later calls override earlier ones. */
URDE_API urde_status urde_config_new(urde_config** out);
URDE_API void urde_config_free(urde_config* cfg);
URDE_API urde_status urde_config_load(urde_config* cfg, const char* path);
URDE_API urde_status urde_config_set(urde_config* cfg, const char* key, const char* value);

/* Synthetic two-domain data; any of the outputs may be NULL. */
URDE_API urde_status urde_synthesize(const urde_config* cfg, urde_dataset** source, urde_dataset** target,
                                     urde_dataset** translated);

URDE_API urde_status urde_dataset_load(const char* path, urde_dataset** out);
URDE_API urde_status urde_dataset_save(const urde_dataset* ds, const char* path);
URDE_API void urde_dataset_free(urde_dataset* ds);
URDE_API size_t urde_dataset_size(const urde_dataset* ds);
URDE_API size_t urde_dataset_dim(const urde_dataset* ds);
/* Copies n*d row-major values into out. */
URDE_API urde_status urde_dataset_features(const urde_dataset* ds, double* out, size_t capacity);
/* Copies n entries of one metadata column. */
URDE_API urde_status urde_dataset_identities(const urde_dataset* ds, int32_t* out, size_t capacity);
URDE_API urde_status urde_dataset_cameras(const urde_dataset* ds, int32_t* out, size_t capacity);
URDE_API urde_status urde_dataset_pseudo_labels(const urde_dataset* ds, int32_t* out, size_t capacity);
URDE_API urde_status urde_dataset_concat(const urde_dataset* a, const urde_dataset* b, urde_dataset** out);
/* First queries_per_identity rows of each identity become queries. */
URDE_API urde_status urde_dataset_split(const urde_dataset* ds, size_t queries_per_identity, urde_dataset** query,
                                        urde_dataset** gallery);

URDE_API urde_status urde_model_load(const char* path, urde_model** out);
URDE_API urde_status urde_model_save(const urde_model* model, const char* path);
URDE_API void urde_model_free(urde_model* model);

/* Training stages. log_jsonl receives one JSON object per epoch and may be
 * NULL. val may be NULL; otherwise its rows are split into query/gallery and
 * evaluated after every epoch. */
URDE_API urde_status urde_train_pretrain(const urde_dataset* train, const urde_config* cfg, const urde_dataset* val,
                                         urde_model** out, char** log_jsonl);
URDE_API urde_status urde_train_baseline(const urde_model* pretrained, const urde_dataset* target,
                                         const urde_config* cfg, const urde_dataset* val, urde_model** out,
                                         char** log_jsonl);
URDE_API urde_status urde_train_mmtplus(const urde_model* pretrained, const urde_dataset* source,
                                        const urde_dataset* target, const urde_config* cfg, const urde_dataset* val,
                                        urde_model** out, char** log_jsonl);

/* L2-normalized embeddings of every row; metadata is copied. */
URDE_API urde_status urde_embed(const urde_model* model, const urde_dataset* ds, urde_dataset** out);
/* Clusters ds (embedded by model when non-NULL) and writes pseudo labels in
 * place. summary_json may be NULL. */
URDE_API urde_status urde_cluster(urde_dataset* ds, const urde_model* model, const urde_config* cfg,
                                  char** summary_json);
URDE_API urde_status urde_ensemble(const urde_dataset* const* parts, size_t count, urde_dataset** out);

URDE_API urde_status urde_distances_euclidean(const urde_dataset* query, const urde_dataset* gallery,
                                              urde_distances** out);
/* Uses k1, k2, lambda from cfg (defaults 30, 6, 0.3). */
URDE_API urde_status urde_distances_rerank(const urde_dataset* query, const urde_dataset* gallery,
                                           const urde_config* cfg, urde_distances** out);
/* Subtracts weight * |c_q - c_g| using camera-feature datasets. */
URDE_API urde_status urde_distances_camera_adjust(urde_distances* d, const urde_dataset* cam_query,
                                                  const urde_dataset* cam_gallery, double weight);
URDE_API void urde_distances_free(urde_distances* d);
URDE_API size_t urde_distances_rows(const urde_distances* d);
URDE_API size_t urde_distances_cols(const urde_distances* d);
URDE_API urde_status urde_distances_values(const urde_distances* d, double* out, size_t capacity);

/* Writes {"mAP":..,"cmc":[..],"num_valid_queries":..}. */
URDE_API urde_status urde_evaluate(const urde_distances* d, const urde_dataset* query, const urde_dataset* gallery,
                                   size_t top, char** report_json);

/* Runs the finite-difference suite. passed is set to 1 when every kernel is
 * below 1e-4. */
URDE_API urde_status urde_gradcheck(uint64_t seed, size_t trials, int* passed, char** report_json);

#ifdef __cplusplus
}
#endif

#endif /* URDE_URDE_H */
