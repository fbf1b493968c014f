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

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "urde/common.hpp"
#include "urde/kvconfig.hpp"

namespace urde {

enum class Domain : std::uint8_t { Source = 0, Target = 1 };
inline constexpr std::size_t kNumDomains = 2;

inline constexpr std::int32_t kNoIdentity = -1;
inline constexpr std::int32_t kOutlier = -2;

/// Dense n x d single-precision embedding table, row-major.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;
  FeatureMatrix(std::size_t n, std::size_t d);
  /// Throws Numeric if any value is non-finite, Shape if the size is off.
  FeatureMatrix(std::size_t n, std::size_t d, std::vector<float> values);

  static FeatureMatrix from_mat(const Mat& m);
  Mat to_mat() const;

  std::size_t n() const noexcept { return n_; }
  std::size_t d() const noexcept { return d_; }
  std::span<const float> row(std::size_t i) const { return {values_.data() + i * d_, d_}; }
  std::span<float> row(std::size_t i) { return {values_.data() + i * d_, d_}; }
  const std::vector<float>& values() const noexcept { return values_; }

  bool operator==(const FeatureMatrix&) const = default;

 private:
  std::size_t n_ = 0;
  std::size_t d_ = 1;
  std::vector<float> values_;
};

struct SampleMeta {
  std::int32_t identity = kNoIdentity;
  std::int32_t camera = 0;
  Domain domain = Domain::Target;
  std::int32_t pseudo = kOutlier;

  bool operator==(const SampleMeta&) const = default;
};

struct Dataset {
  FeatureMatrix features;
  std::vector<SampleMeta> meta;
  std::string name;

  std::size_t size() const noexcept { return meta.size(); }
  std::size_t dim() const noexcept { return features.d(); }

  /// Throws if meta and features disagree or a SOURCE row lacks an identity.
  void validate() const;
  /// Selects rows in the given order.
  Dataset subset(std::span<const std::size_t> rows) const;
  std::vector<Domain> domains() const;
  std::vector<int> identities() const;
  std::vector<int> pseudo_labels() const;

  /// Equality over rows only; the name is not part of the stored format.
  bool operator==(const Dataset& o) const { return features == o.features && meta == o.meta; }
};

struct SynthConfig {
  std::size_t num_ids_source = 32;
  std::size_t num_ids_target = 32;
  std::size_t samples_per_id = 12;
  std::size_t raw_dim = 32;
  // Leading raw dimensions that carry identity; the rest hold camera and
  // per-sample nuisance.
  std::size_t identity_dim = 8;
  double identity_scale = 1.0;
  double cluster_spread = 0.3;
  double camera_spread = 2.0;
  double nuisance_spread = 0.5;
  // SOURCE raws are mapped x -> A x + b.
  Mat shift_matrix;
  Vec shift_offset;
  double translation_fidelity = 0.5;
  std::size_t cameras = 5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ShiftParams {
  double strength = 0.0;   // rotation angle scale
  double gain = 0.7;       // log-std of per-dimension gains
  double offset = 1.0;     // std of the translation
};

/// Builds A = diag(g) R, with R the Cayley rotation (I - sK)^-1 (I + sK) of a
/// seeded random skew matrix K and log g ~ N(0, gain^2), plus
/// b ~ N(0, offset^2). All-zero params give the identity map.
void make_domain_shift(SynthConfig& cfg, const ShiftParams& shift, std::uint64_t seed);

/// Default config with the desk-scale domain shift already populated.
SynthConfig default_synth_config(std::uint64_t seed = 0);

/// Reads SynthConfig fields from a key=value config; unknown keys are ignored
/// here and checked by the caller against the union of consumers.
SynthConfig synth_config_from(const KeyValueConfig& kv);
const std::vector<std::string>& synth_config_keys();

struct SynthOutput {
  Dataset source;
  Dataset target;
  Dataset translated;
};

SynthOutput generate_synthetic(const SynthConfig& cfg);

/// Splits a labeled set into retrieval query/gallery: the first
/// `queries_per_identity` rows of each identity become queries.
struct QueryGallery {
  Dataset query;
  Dataset gallery;
};
QueryGallery split_query_gallery(const Dataset& ds, std::size_t queries_per_identity = 2);

Dataset concat_datasets(const Dataset& a, const Dataset& b);

// Binary feature file: "URDE", u16 version, u32 n, u32 d, i32 identities,
// i32 cameras, u8 domains, i32 pseudo labels, f32 features. Little-endian.
inline constexpr std::uint16_t kFeatureFormatVersion = 1;

std::vector<std::uint8_t> encode_features(const Dataset& ds);
Dataset decode_features(std::span<const std::uint8_t> bytes);
void save_features(const std::filesystem::path& path, const Dataset& ds);
Dataset load_features(const std::filesystem::path& path);

}  // namespace urde
