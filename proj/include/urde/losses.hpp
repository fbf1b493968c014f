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

#include <map>
#include <span>
#include <string>
#include <vector>

#include "urde/common.hpp"

namespace urde {

/// Loss value plus the analytic gradient for each named input. Vector inputs
/// get 1 x P gradients; matrix inputs get gradients of the same shape.
struct LossOut {
  double value = 0.0;
  std::map<std::string, Mat> grads;
  /// Number of inputs clamped into the numerically safe range.
  std::size_t clamped = 0;

  const Mat& grad(const std::string& name) const { return grads.at(name); }
};

inline constexpr double kBceClamp = 1e-7;
inline constexpr double kArcfaceAngleGuard = 1e-4;

/// Weight applied to each direction of the two-network mutual soft loss.
/// The two directions are summed.
inline constexpr double kMutualDirectionWeight = 1.0;

LossOut cross_entropy_cls(std::span<const double> logits, std::size_t label);

/// exp(d_n) / (exp(d_p) + exp(d_n)), evaluated as sigmoid(d_n - d_p).
double softmax_triplet_T(double d_p, double d_n);

/// Hardest positive / negative mined for one anchor.
struct TripletTriple {
  std::size_t anchor = 0;
  std::size_t hardest_pos = 0;
  std::size_t hardest_neg = 0;
  double d_p = 0.0;
  double d_n = 0.0;
};

/// Batch-hard mining by Euclidean distance. Ties resolve to the lowest row.
/// Throws Mining if an anchor has no positive or no negative.
std::vector<TripletTriple> mine_hardest(const Mat& batch, std::span<const int> labels);

/// Mean over anchors of -log T. Gradient key: "batch".
LossOut softmax_triplet_loss(const Mat& batch, std::span<const int> labels);

/// Soft BCE of translated relations against constant source relations.
/// Gradient key: "T_translated".
LossOut relation_consistency(std::span<const double> t_translated, std::span<const double> t_source);

/// -sum softmax(teacher) . log softmax(student); teacher is constant.
/// Gradient key: "student_logits".
LossOut soft_ce_mutual(std::span<const double> student_logits, std::span<const double> teacher_logits);

/// InfoNCE against a queue of negatives on L2-normalized vectors.
/// Gradient key: "query" (through the normalization).
LossOut moco_loss(std::span<const double> query, std::span<const double> key_pos, const Mat& queue,
                  double tau = 0.7);

enum class MarginMode { ArcFace, CosFace };

struct MarginParams {
  MarginMode mode = MarginMode::CosFace;
  double margin = 0.25;
  double scale = 16.0;
};

/// Cosine classifier with an additive angular (ArcFace) or cosine (CosFace)
/// margin on the target class. Gradient keys: "feature", "class_weights".
LossOut margin_classification(std::span<const double> feature, const Mat& class_weights, std::size_t label,
                              const MarginParams& params);

struct MmtParts {
  double soft = 0.0;
  double hard = 0.0;
  double moco = 0.0;
};

double mmt_plus_total(const MmtParts& parts, double lambda_soft = 0.5, double lambda_moco = 0.1);

// Shared numerics.
Vec softmax(std::span<const double> logits);
Vec log_softmax(std::span<const double> logits);

inline std::span<const double> as_span(const Vec& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }
inline std::span<const double> row_span(const Mat& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

}  // namespace urde
