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
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "urde/datamodel.hpp"
#include "urde/encoder.hpp"
#include "urde/kvconfig.hpp"
#include "urde/losses.hpp"
#include "urde/pseudolabel.hpp"
#include "urde/retrieval.hpp"

namespace urde {

enum class ClassifierLoss { PlainCE, ArcFace, CosFace };
enum class LrSchedule { Constant, Step };

struct StageConfig {
  std::size_t epochs = 10;
  std::size_t iters_per_epoch = 200;
  std::size_t p_classes = 16;
  std::size_t k_per = 4;
  double lr = 0.00035;
  double weight_decay = 0.0005;
  double lambda_soft = 0.5;
  double lambda_moco = 0.1;
  double alpha = 0.999;
  double tau = 0.7;
  std::size_t queue_capacity = 256;
  ClusterParams cluster;
  std::uint64_t seed = 0;
  ClassifierLoss loss = ClassifierLoss::PlainCE;
  MarginParams margin;
  LrSchedule schedule = LrSchedule::Constant;
  // Encoder output width; 0 keeps the input width.
  std::size_t feature_dim = 0;
  // Relative scale of the weight perturbation that decorrelates the two
  // MMT+ peers.
  double peer_noise = 0.01;
  // MMT+ trains on joint source+target batches with a joint label system.
  bool joint_source = true;
  // Export the average of both mean teachers instead of teacher 1.
  bool export_average = false;
  std::size_t eval_top = 100;

  void validate() const;
  /// Learning rate in effect during `epoch`.
  double lr_at(std::size_t epoch) const;
};

StageConfig stage_config_from(const KeyValueConfig& kv);
const std::vector<std::string>& stage_config_keys();

struct EpochRecord {
  std::size_t epoch = 0;
  double cls = 0.0, tri = 0.0, soft = 0.0, hard = 0.0, moco = 0.0, total = 0.0;
  std::optional<std::size_t> clusters;
  std::optional<std::size_t> outliers;
  std::optional<double> purity;
  std::optional<double> val_map;
  std::optional<double> val_top1;
  bool skipped = false;
};

struct RunLog {
  std::string stage;
  std::vector<EpochRecord> epochs;
  std::size_t skipped_epochs = 0;
  double wall_seconds = 0.0;  // not serialized

  /// One JSON object per epoch, newline-terminated.
  std::string to_jsonl() const;
};

struct PretrainResult {
  EncoderParams params;
  RunLog log;
};

/// Supervised training on labeled rows with classification + softmax-triplet
/// losses. Works on raw source or translated rows alike. The returned
/// encoder's TARGET stats are copied from its SOURCE stats, since it has
/// never seen target data.
PretrainResult stage_pretrain(const Dataset& train, const StageConfig& cfg, const QueryGallery* val = nullptr);

/// Clustering-based self-training on the target set, relabeling before each
/// epoch.
PretrainResult stage_baseline(const EncoderParams& pretrained, const Dataset& target, const StageConfig& cfg,
                              const QueryGallery* val = nullptr);

struct MmtResult {
  TeacherState state;
  RunLog log;
  /// Teacher 1, or both teachers when export_average is set.
  Model exported;
};

/// Mutual mean-teaching with joint-domain batches, EMA teachers and
/// per-network contrastive queues.
MmtResult stage_mmt_plus(const EncoderParams& pretrained, const Dataset& source, const Dataset& target,
                         const StageConfig& cfg, const QueryGallery* val = nullptr);

/// Relation-consistency loss between source rows under the source encoder
/// and their translations under the target encoder, averaged over
/// iters_per_epoch PK batches.
double relation_consistency_check(const Dataset& source, const Dataset& translated, const EncoderParams& enc_s,
                                  const EncoderParams& enc_t, const StageConfig& cfg,
                                  Domain translated_domain = Domain::Target);

/// Euclidean retrieval of embedded query/gallery rows.
EvalReport evaluate_model(const Model& model, const QueryGallery& split, std::size_t top = 100);

Model single(const EncoderParams& p);

/// One seed of the synthetic ablation study.
struct AblationResult {
  double raw_pretrain_map = 0.0;
  double translated_pretrain_map = 0.0;
  double baseline_map = 0.0;  // clustering fine-tune from the raw pretrain
  double mmt_ablated_map = 0.0;  // soft + hard only, target-only batches
  double mmt_full_map = 0.0;
  double full_pipeline_map = 0.0;  // MMT+ followed by re-ranking
};

AblationResult run_ablation(const SynthConfig& synth, const StageConfig& cfg);

}  // namespace urde
