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

#include <array>
#include <deque>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "urde/common.hpp"
#include "urde/datamodel.hpp"

namespace urde {

inline constexpr double kVarianceFloor = 1e-5;
inline constexpr double kNormMomentum = 0.9;

struct NormStats {
  Vec mean;
  Vec var;
};

/// Affine encoder with domain-specific input standardization and a linear
/// classifier head on its output.
struct EncoderParams {
  Mat weight;      // d_out x d_in
  Vec bias;        // d_out
  std::array<NormStats, kNumDomains> norm;
  Mat classifier;  // P x d_out, may have zero rows

  std::size_t d_in() const { return static_cast<std::size_t>(weight.cols()); }
  std::size_t d_out() const { return static_cast<std::size_t>(weight.rows()); }
  NormStats& stats(Domain d) { return norm[static_cast<std::size_t>(d)]; }
  const NormStats& stats(Domain d) const { return norm[static_cast<std::size_t>(d)]; }

  void validate() const;
};

/// Gaussian weights with std 0.1/sqrt(d_in), zero bias, unit norm stats.
EncoderParams init_encoder(std::size_t d_in, std::size_t d_out, std::uint64_t seed);

/// Sets one domain's stats to the exact mean/variance of `raws`.
void calibrate_norm(EncoderParams& params, const Mat& raws, Domain domain);

/// Eval-mode forward: standardize each row with its domain's stored stats,
/// then W x + b. Pure. `standardized` receives the normalized inputs if set.
Mat forward(const EncoderParams& params, const Mat& raws, std::span<const Domain> domains,
            Mat* standardized = nullptr);

/// Train-mode forward: first folds each present domain's batch mean/variance
/// into its running stats (running = 0.9 running + 0.1 batch), then
/// normalizes with the updated stats. No gradient flows through the stats.
Mat forward_train(EncoderParams& params, const Mat& raws, std::span<const Domain> domains,
                  Mat* standardized = nullptr);

FeatureMatrix forward(const EncoderParams& params, const FeatureMatrix& raws, std::span<const Domain> domains);

struct AffineGrads {
  Mat weight;
  Vec bias;
};

/// Gradients of W and b given d loss / d output.
AffineGrads backward(const Mat& standardized, const Mat& grad_out);

/// Row indices of P distinct labels with K rows each. Negative labels
/// (OUTLIER, NONE) are never drawn. Classes with fewer than K rows are
/// sampled with replacement.
std::vector<std::size_t> pk_sample(std::span<const int> labels, std::size_t p_classes, std::size_t k_per, Rng& rng);

/// teacher <- alpha * teacher + (1 - alpha) * student, for every parameter
/// including the classifier and the norm stats.
EncoderParams ema_update(const EncoderParams& teacher, const EncoderParams& student, double alpha);

/// Fixed-capacity FIFO of L2-normalized feature rows.
class FeatureQueue {
 public:
  FeatureQueue() = default;
  FeatureQueue(std::size_t capacity, std::size_t dim) : capacity_(capacity), dim_(dim) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return rows_.size(); }
  bool empty() const { return rows_.empty(); }
  /// Oldest row first.
  Mat matrix() const;
  void clear() { rows_.clear(); }

  friend void queue_push(FeatureQueue& queue, const Mat& feats);

 private:
  std::size_t capacity_ = 0;
  std::size_t dim_ = 0;
  std::deque<Vec> rows_;
};

/// Normalizes every row then enqueues, evicting the oldest beyond capacity.
/// Throws Numeric (without modifying the queue) on a zero-norm row.
void queue_push(FeatureQueue& queue, const Mat& feats);

struct AdamState {
  double lr = 0.00035;
  double weight_decay = 0.0005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;

  struct Moments {
    Mat m;
    Mat v;
  };
  std::map<std::string, Moments> moments;

  /// Drops the moments of one parameter, e.g. after re-initializing it.
  void reset(const std::string& name) { moments.erase(name); }
};

struct ParamSlot {
  std::string name;
  Mat* value;
  const Mat* grad;
};

/// Decoupled weight decay then bias-corrected Adam, applied to every slot.
/// All gradients are checked first; a non-finite one rejects the whole step
/// and names the parameter.
void adam_step(std::span<const ParamSlot> params, AdamState& state);

/// Adam over an encoder's trainable tensors (weight, bias, classifier).
void adam_step(EncoderParams& params, const AffineGrads& grads, const Mat& classifier_grad, AdamState& state);

struct TeacherState {
  std::array<EncoderParams, 2> students;
  std::array<EncoderParams, 2> teachers;
  std::array<FeatureQueue, 2> queues;
  double alpha = 0.999;
};

/// A deployable model: one encoder, or several whose L2-normalized outputs are
/// averaged.
struct Model {
  std::vector<EncoderParams> members;
};

/// Encodes and L2-normalizes every row (rows keep their own domain stats).
FeatureMatrix embed(const Model& model, const Dataset& ds);
Mat embed_mat(const EncoderParams& params, const Dataset& ds);

void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);
std::string model_to_json(const Model& model);
Model model_from_json(const std::string& text);

}  // namespace urde
