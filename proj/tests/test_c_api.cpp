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
// Exercises the shared library through its C header only.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "urde/urde.h"

namespace {

struct Synth {
  urde_config* cfg = nullptr;
  urde_dataset* src = nullptr;
  urde_dataset* tgt = nullptr;
  urde_dataset* trn = nullptr;

  Synth() {
    REQUIRE(urde_config_new(&cfg) == URDE_OK);
    REQUIRE(urde_config_set(cfg, "num_ids_source", "8") == URDE_OK);
    REQUIRE(urde_config_set(cfg, "num_ids_target", "8") == URDE_OK);
    REQUIRE(urde_config_set(cfg, "samples_per_id", "8") == URDE_OK);
    REQUIRE(urde_config_set(cfg, "epochs", "1") == URDE_OK);
    REQUIRE(urde_config_set(cfg, "iters_per_epoch", "4") == URDE_OK);
    REQUIRE(urde_config_set(cfg, "p_classes", "4") == URDE_OK);
    REQUIRE(urde_config_set(cfg, "k", "6") == URDE_OK);
    REQUIRE(urde_synthesize(cfg, &src, &tgt, &trn) == URDE_OK);
  }
  ~Synth() {
    urde_dataset_free(src);
    urde_dataset_free(tgt);
    urde_dataset_free(trn);
    urde_config_free(cfg);
  }
};

std::string take(char* s) {
  std::string out = s ? s : "";
  urde_string_free(s);
  return out;
}

}  // namespace

TEST_CASE("version and errors") {
  CHECK(std::string(urde_version()).size() > 0);
  urde_config* cfg = nullptr;
  REQUIRE(urde_config_new(&cfg) == URDE_OK);
  CHECK(urde_config_set(cfg, "no_such_key", "1") == URDE_ERR_USAGE);
  CHECK(std::string(urde_last_error()).find("no_such_key") != std::string::npos);
  CHECK(urde_config_load(cfg, "/nonexistent/file.cfg") != URDE_OK);
  urde_dataset* ds = nullptr;
  CHECK(urde_dataset_load("/nonexistent/file.urde", &ds) == URDE_ERR_DATA);
  CHECK(ds == nullptr);
  CHECK(urde_dataset_load(nullptr, &ds) == URDE_ERR_USAGE);
  urde_config_free(cfg);
  urde_config_free(nullptr);
  urde_dataset_free(nullptr);
}

TEST_CASE("datasets round-trip and expose columns") {
  Synth s;
  CHECK(urde_dataset_size(s.src) == 64);
  const std::size_t n = urde_dataset_size(s.tgt), d = urde_dataset_dim(s.tgt);
  std::vector<double> feats(n * d);
  REQUIRE(urde_dataset_features(s.tgt, feats.data(), feats.size()) == URDE_OK);
  CHECK(urde_dataset_features(s.tgt, feats.data(), 3) == URDE_ERR_USAGE);
  std::vector<int32_t> ids(n), cams(n);
  REQUIRE(urde_dataset_identities(s.tgt, ids.data(), n) == URDE_OK);
  REQUIRE(urde_dataset_cameras(s.tgt, cams.data(), n) == URDE_OK);
  CHECK(ids[0] >= 8);

  const auto path = (std::filesystem::temp_directory_path() / "urde_capi.urde").string();
  REQUIRE(urde_dataset_save(s.tgt, path.c_str()) == URDE_OK);
  urde_dataset* back = nullptr;
  REQUIRE(urde_dataset_load(path.c_str(), &back) == URDE_OK);
  std::vector<double> again(n * d);
  REQUIRE(urde_dataset_features(back, again.data(), again.size()) == URDE_OK);
  CHECK(again == feats);
  urde_dataset_free(back);
  std::filesystem::remove(path);

  urde_dataset* both = nullptr;
  REQUIRE(urde_dataset_concat(s.src, s.tgt, &both) == URDE_OK);
  CHECK(urde_dataset_size(both) == 64 + n);
  urde_dataset_free(both);

  urde_dataset *q = nullptr, *g = nullptr;
  REQUIRE(urde_dataset_split(s.tgt, 2, &q, &g) == URDE_OK);
  CHECK(urde_dataset_size(q) == 16);
  CHECK(urde_dataset_size(g) == n - 16);
  urde_dataset_free(q);
  urde_dataset_free(g);
}

TEST_CASE("train, embed, cluster, retrieve, evaluate") {
  Synth s;
  urde_model* pre = nullptr;
  char* log = nullptr;
  REQUIRE(urde_train_pretrain(s.trn, s.cfg, s.tgt, &pre, &log) == URDE_OK);
  const std::string lines = take(log);
  const auto rec = nlohmann::json::parse(lines.substr(0, lines.find('\n')));
  CHECK(rec["stage"] == "pretrain");
  CHECK(rec["val_mAP"].is_number());

  urde_model* base = nullptr;
  REQUIRE(urde_train_baseline(pre, s.tgt, s.cfg, nullptr, &base, nullptr) == URDE_OK);
  urde_model* mmt = nullptr;
  REQUIRE(urde_train_mmtplus(pre, s.src, s.tgt, s.cfg, nullptr, &mmt, &log) == URDE_OK);
  CHECK(take(log).find("\"moco\"") != std::string::npos);

  const auto mpath = (std::filesystem::temp_directory_path() / "urde_capi_model.json").string();
  REQUIRE(urde_model_save(mmt, mpath.c_str()) == URDE_OK);
  urde_model* loaded = nullptr;
  REQUIRE(urde_model_load(mpath.c_str(), &loaded) == URDE_OK);
  std::filesystem::remove(mpath);

  urde_dataset* emb = nullptr;
  REQUIRE(urde_embed(loaded, s.tgt, &emb) == URDE_OK);
  char* summary = nullptr;
  REQUIRE(urde_cluster(emb, nullptr, s.cfg, &summary) == URDE_OK);
  const auto sj = nlohmann::json::parse(take(summary));
  CHECK(sj["clusters"].get<int>() >= 0);
  CHECK(sj["purity"].is_number());

  urde_dataset *q = nullptr, *g = nullptr;
  REQUIRE(urde_dataset_split(emb, 2, &q, &g) == URDE_OK);
  urde_distances *de = nullptr, *dr = nullptr;
  REQUIRE(urde_distances_euclidean(q, g, &de) == URDE_OK);
  REQUIRE(urde_config_set(s.cfg, "lambda", "1") == URDE_OK);
  REQUIRE(urde_config_set(s.cfg, "k1", "10") == URDE_OK);
  REQUIRE(urde_config_set(s.cfg, "k2", "3") == URDE_OK);
  REQUIRE(urde_distances_rerank(q, g, s.cfg, &dr) == URDE_OK);
  const std::size_t cells = urde_distances_rows(de) * urde_distances_cols(de);
  std::vector<double> ve(cells), vr(cells);
  REQUIRE(urde_distances_values(de, ve.data(), cells) == URDE_OK);
  REQUIRE(urde_distances_values(dr, vr.data(), cells) == URDE_OK);
  CHECK(ve == vr);

  char* report = nullptr;
  REQUIRE(urde_evaluate(de, q, g, 100, &report) == URDE_OK);
  const auto rj = nlohmann::json::parse(take(report));
  CHECK(rj["mAP"].get<double>() > 0.0);
  CHECK(rj["cmc"].size() == 100);

  const urde_dataset* parts[] = {q, q};
  urde_dataset* ens = nullptr;
  REQUIRE(urde_ensemble(parts, 2, &ens) == URDE_OK);
  CHECK(urde_dataset_dim(ens) == 2 * urde_dataset_dim(q));
  CHECK(urde_distances_camera_adjust(de, q, ens, 0.1) == URDE_ERR_DATA);

  urde_dataset_free(ens);
  urde_distances_free(de);
  urde_distances_free(dr);
  urde_dataset_free(q);
  urde_dataset_free(g);
  urde_dataset_free(emb);
  urde_model_free(loaded);
  urde_model_free(mmt);
  urde_model_free(base);
  urde_model_free(pre);
}

TEST_CASE("gradcheck through the C API") {
  int passed = 0;
  char* json = nullptr;
  REQUIRE(urde_gradcheck(1, 5, &passed, &json) == URDE_OK);
  CHECK(passed == 1);
  CHECK(nlohmann::json::parse(take(json))["kernels"].size() >= 8);
}
