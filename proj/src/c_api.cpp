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
#include "urde/urde.h"

#include <cstring>
#include <exception>
#include <filesystem>
#include <new>
#include <string>

#include "json.hpp"
#include "urde/gradcheck.hpp"
#include "urde/pipeline.hpp"

struct urde_config {
  urde::KeyValueConfig kv;
};
struct urde_dataset {
  urde::Dataset ds;
};
struct urde_model {
  urde::Model model;
};
struct urde_distances {
  urde::DistanceMatrix d;
};

namespace {

thread_local std::string g_last_error;

urde_status status_for(urde::ErrorKind kind) {
  switch (kind) {
    case urde::ErrorKind::Config:
      return URDE_ERR_USAGE;
    case urde::ErrorKind::Divergence:
      return URDE_ERR_DIVERGED;
    default:
      return URDE_ERR_DATA;
  }
}

template <class F>
urde_status guarded(F&& body) {
  g_last_error.clear();
  try {
    body();
    return URDE_OK;
  } catch (const urde::Error& e) {
    g_last_error = e.what();
    return status_for(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = e.what();
    return URDE_ERR_DATA;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return URDE_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return URDE_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return URDE_ERR_INTERNAL;
  }
}

void require(bool ok, const char* what) {
  if (!ok) urde::fail(urde::ErrorKind::Config, std::string(what) + " must not be NULL");
}

char* dup_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k = urde::synth_config_keys();
    for (const auto& s : urde::stage_config_keys()) k.push_back(s);
    for (const char* s : {"k1", "k2", "lambda", "cam_weight"}) k.emplace_back(s);
    return k;
  }();
  return keys;
}

urde::KeyValueConfig kv_of(const urde_config* cfg) {
  urde::KeyValueConfig kv = cfg ? cfg->kv : urde::KeyValueConfig{};
  kv.require_known(known_keys());
  return kv;
}

/// Stage configs ignore generator keys (and vice versa); both share "seed".
urde::StageConfig stage_of(const urde_config* cfg) { return urde::stage_config_from(kv_of(cfg)); }

urde::RerankParams rerank_of(const urde_config* cfg) {
  const urde::KeyValueConfig kv = kv_of(cfg);
  urde::RerankParams p;
  const long long k1 = kv.get_int("k1", static_cast<long long>(p.k1));
  const long long k2 = kv.get_int("k2", static_cast<long long>(p.k2));
  if (k1 < 0 || k2 < 0) urde::fail(urde::ErrorKind::Config, "k1 and k2 must be >= 0");
  p.k1 = static_cast<std::size_t>(k1);
  p.k2 = static_cast<std::size_t>(k2);
  p.lambda = kv.get_double("lambda", p.lambda);
  return p;
}

urde_dataset* wrap(urde::Dataset ds) { return new urde_dataset{std::move(ds)}; }

void copy_column(const urde_dataset* ds, int32_t* out, size_t capacity, int32_t urde::SampleMeta::*field) {
  require(ds && out, "dataset and output buffer");
  if (capacity < ds->ds.size()) urde::fail(urde::ErrorKind::Config, "output buffer too small");
  for (std::size_t i = 0; i < ds->ds.size(); ++i) out[i] = ds->ds.meta[i].*field;
}

std::optional<urde::QueryGallery> split_of(const urde_dataset* val) {
  if (!val) return std::nullopt;
  return urde::split_query_gallery(val->ds);
}

const urde::EncoderParams& single_member(const urde_model* m) {
  require(m, "model");
  if (m->model.members.size() != 1) {
    urde::fail(urde::ErrorKind::Config, "training needs a single-encoder model, got " +
                                            std::to_string(m->model.members.size()) + " members");
  }
  return m->model.members.front();
}

void emit_log(char** log_jsonl, const urde::RunLog& log) {
  if (log_jsonl) *log_jsonl = dup_string(log.to_jsonl());
}

}  // namespace

extern "C" {

const char* urde_last_error(void) { return g_last_error.c_str(); }
const char* urde_version(void) { return URDE_VERSION_STRING; }
void urde_set_threads(unsigned n) { urde::set_max_threads(n); }
void urde_string_free(char* s) { delete[] s; }

urde_status urde_config_new(urde_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = new urde_config{};
  });
}

void urde_config_free(urde_config* cfg) { delete cfg; }

urde_status urde_config_load(urde_config* cfg, const char* path) {
  return guarded([&] {
    require(cfg && path, "config and path");
    if (!std::filesystem::exists(path)) urde::fail(urde::ErrorKind::Config, std::string("no such config file: ") + path);
    const urde::KeyValueConfig loaded = urde::KeyValueConfig::load(path);
    loaded.require_known(known_keys());
    cfg->kv.merge(loaded);
  });
}

urde_status urde_config_set(urde_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    require(cfg && key && value, "config, key and value");
    urde::KeyValueConfig one;
    one.set(key, value);
    one.require_known(known_keys());
    cfg->kv.set(key, value);
  });
}

urde_status urde_synthesize(const urde_config* cfg, urde_dataset** source, urde_dataset** target,
                            urde_dataset** translated) {
  return guarded([&] {
    urde::SynthOutput out = urde::generate_synthetic(urde::synth_config_from(kv_of(cfg)));
    if (source) *source = wrap(std::move(out.source));
    if (target) *target = wrap(std::move(out.target));
    if (translated) *translated = wrap(std::move(out.translated));
  });
}

urde_status urde_dataset_load(const char* path, urde_dataset** out) {
  return guarded([&] {
    require(path && out, "path and out");
    *out = wrap(urde::load_features(path));
  });
}

urde_status urde_dataset_save(const urde_dataset* ds, const char* path) {
  return guarded([&] {
    require(ds && path, "dataset and path");
    urde::save_features(path, ds->ds);
  });
}

void urde_dataset_free(urde_dataset* ds) { delete ds; }
size_t urde_dataset_size(const urde_dataset* ds) { return ds ? ds->ds.size() : 0; }
size_t urde_dataset_dim(const urde_dataset* ds) { return ds ? ds->ds.dim() : 0; }

urde_status urde_dataset_features(const urde_dataset* ds, double* out, size_t capacity) {
  return guarded([&] {
    require(ds && out, "dataset and output buffer");
    const auto values = ds->ds.features.values();
    if (capacity < values.size()) urde::fail(urde::ErrorKind::Config, "output buffer too small");
    std::copy(values.begin(), values.end(), out);
  });
}

urde_status urde_dataset_identities(const urde_dataset* ds, int32_t* out, size_t capacity) {
  return guarded([&] { copy_column(ds, out, capacity, &urde::SampleMeta::identity); });
}

urde_status urde_dataset_cameras(const urde_dataset* ds, int32_t* out, size_t capacity) {
  return guarded([&] { copy_column(ds, out, capacity, &urde::SampleMeta::camera); });
}

urde_status urde_dataset_pseudo_labels(const urde_dataset* ds, int32_t* out, size_t capacity) {
  return guarded([&] { copy_column(ds, out, capacity, &urde::SampleMeta::pseudo); });
}

urde_status urde_dataset_concat(const urde_dataset* a, const urde_dataset* b, urde_dataset** out) {
  return guarded([&] {
    require(a && b && out, "datasets and out");
    *out = wrap(urde::concat_datasets(a->ds, b->ds));
  });
}

urde_status urde_dataset_split(const urde_dataset* ds, size_t queries_per_identity, urde_dataset** query,
                               urde_dataset** gallery) {
  return guarded([&] {
    require(ds && query && gallery, "dataset and outputs");
    urde::QueryGallery qg = urde::split_query_gallery(ds->ds, queries_per_identity);
    *query = wrap(std::move(qg.query));
    *gallery = wrap(std::move(qg.gallery));
  });
}

urde_status urde_model_load(const char* path, urde_model** out) {
  return guarded([&] {
    require(path && out, "path and out");
    *out = new urde_model{urde::load_model(path)};
  });
}

urde_status urde_model_save(const urde_model* model, const char* path) {
  return guarded([&] {
    require(model && path, "model and path");
    urde::save_model(path, model->model);
  });
}

void urde_model_free(urde_model* model) { delete model; }

urde_status urde_train_pretrain(const urde_dataset* train, const urde_config* cfg, const urde_dataset* val,
                                urde_model** out, char** log_jsonl) {
  return guarded([&] {
    require(train && out, "train and out");
    const auto split = split_of(val);
    urde::PretrainResult r = urde::stage_pretrain(train->ds, stage_of(cfg), split ? &*split : nullptr);
    emit_log(log_jsonl, r.log);
    *out = new urde_model{urde::single(r.params)};
  });
}

urde_status urde_train_baseline(const urde_model* pretrained, const urde_dataset* target, const urde_config* cfg,
                                const urde_dataset* val, urde_model** out, char** log_jsonl) {
  return guarded([&] {
    require(target && out, "target and out");
    const auto split = split_of(val);
    urde::PretrainResult r =
        urde::stage_baseline(single_member(pretrained), target->ds, stage_of(cfg), split ? &*split : nullptr);
    emit_log(log_jsonl, r.log);
    *out = new urde_model{urde::single(r.params)};
  });
}

urde_status urde_train_mmtplus(const urde_model* pretrained, const urde_dataset* source, const urde_dataset* target,
                               const urde_config* cfg, const urde_dataset* val, urde_model** out, char** log_jsonl) {
  return guarded([&] {
    require(source && target && out, "source, target and out");
    const auto split = split_of(val);
    urde::MmtResult r = urde::stage_mmt_plus(single_member(pretrained), source->ds, target->ds, stage_of(cfg),
                                             split ? &*split : nullptr);
    emit_log(log_jsonl, r.log);
    *out = new urde_model{std::move(r.exported)};
  });
}

urde_status urde_embed(const urde_model* model, const urde_dataset* ds, urde_dataset** out) {
  return guarded([&] {
    require(model && ds && out, "model, dataset and out");
    urde::Dataset e{urde::embed(model->model, ds->ds), ds->ds.meta, ds->ds.name};
    *out = wrap(std::move(e));
  });
}

urde_status urde_cluster(urde_dataset* ds, const urde_model* model, const urde_config* cfg, char** summary_json) {
  return guarded([&] {
    require(ds, "dataset");
    const urde::ClusterParams params = stage_of(cfg).cluster;
    urde::Dataset work = ds->ds;
    urde::PseudoLabeling labels;
    if (model) {
      labels = urde::relabel_epoch(work, model->model, params);
    } else {
      urde::Mat emb = work.features.to_mat();
      urde::normalize_rows(emb, "cluster input");
      labels = urde::cluster_features(emb, params);
      urde::apply_labels(work, labels);
    }
    if (summary_json) {
      nlohmann::json j;
      j["clusters"] = labels.num_clusters;
      j["outliers"] = labels.outliers();
      bool labeled = true;
      for (const auto& m : work.meta) labeled = labeled && m.identity != urde::kNoIdentity;
      if (labeled) {
        j["purity"] = urde::cluster_purity(labels, work.identities());
      } else {
        j["purity"] = nullptr;
      }
      *summary_json = dup_string(j.dump());
    }
    ds->ds = std::move(work);
  });
}

urde_status urde_ensemble(const urde_dataset* const* parts, size_t count, urde_dataset** out) {
  return guarded([&] {
    require(parts && out, "parts and out");
    std::vector<urde::FeatureMatrix> feats;
    for (size_t i = 0; i < count; ++i) {
      require(parts[i], "ensemble part");
      if (parts[i]->ds.meta != parts[0]->ds.meta) {
        urde::fail(urde::ErrorKind::Shape, "ensemble parts " + std::to_string(i) + " and 0 have different metadata");
      }
      feats.push_back(parts[i]->ds.features);
    }
    urde::FeatureMatrix joined = urde::ensemble_features(feats);
    *out = wrap(urde::Dataset{std::move(joined), parts[0]->ds.meta, "ensemble"});
  });
}

urde_status urde_distances_euclidean(const urde_dataset* query, const urde_dataset* gallery, urde_distances** out) {
  return guarded([&] {
    require(query && gallery && out, "query, gallery and out");
    *out = new urde_distances{urde::query_gallery_euclidean(query->ds.features, gallery->ds.features)};
  });
}

urde_status urde_distances_rerank(const urde_dataset* query, const urde_dataset* gallery, const urde_config* cfg,
                                  urde_distances** out) {
  return guarded([&] {
    require(query && gallery && out, "query, gallery and out");
    *out = new urde_distances{urde::rerank(query->ds.features, gallery->ds.features, rerank_of(cfg))};
  });
}

urde_status urde_distances_camera_adjust(urde_distances* d, const urde_dataset* cam_query,
                                         const urde_dataset* cam_gallery, double weight) {
  return guarded([&] {
    require(d && cam_query && cam_gallery, "distances and camera features");
    d->d = urde::camera_adjust(d->d, cam_query->ds.features, cam_gallery->ds.features, weight);
  });
}

void urde_distances_free(urde_distances* d) { delete d; }
size_t urde_distances_rows(const urde_distances* d) { return d ? d->d.rows : 0; }
size_t urde_distances_cols(const urde_distances* d) { return d ? d->d.cols : 0; }

urde_status urde_distances_values(const urde_distances* d, double* out, size_t capacity) {
  return guarded([&] {
    require(d && out, "distances and output buffer");
    if (capacity < d->d.values.size()) urde::fail(urde::ErrorKind::Config, "output buffer too small");
    std::copy(d->d.values.begin(), d->d.values.end(), out);
  });
}

urde_status urde_evaluate(const urde_distances* d, const urde_dataset* query, const urde_dataset* gallery, size_t top,
                          char** report_json) {
  return guarded([&] {
    require(d && query && gallery && report_json, "distances, query, gallery and out");
    const urde::EvalReport r = urde::evaluate(d->d, query->ds.meta, gallery->ds.meta, top);
    *report_json = dup_string(urde::report_to_json(r));
  });
}

urde_status urde_gradcheck(uint64_t seed, size_t trials, int* passed, char** report_json) {
  return guarded([&] {
    const urde::GradcheckReport r = urde::run_gradcheck(seed, trials);
    if (passed) *passed = r.passed() ? 1 : 0;
    if (report_json) *report_json = dup_string(urde::gradcheck_to_json(r));
  });
}

}  // extern "C"
