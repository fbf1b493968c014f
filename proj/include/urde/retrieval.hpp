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

#include <span>
#include <string>
#include <vector>

#include "urde/datamodel.hpp"
#include "urde/pseudolabel.hpp"

namespace urde {

struct RerankParams {
  std::size_t k1 = 30;
  std::size_t k2 = 6;
  double lambda = 0.3;
};

/// Query x gallery distances after k-reciprocal re-ranking on the joint
/// query+gallery set: lambda * d_euclid + (1 - lambda) * d_J.
DistanceMatrix rerank(const FeatureMatrix& query, const FeatureMatrix& gallery, const RerankParams& params);

/// Plain Euclidean query x gallery distances.
DistanceMatrix query_gallery_euclidean(const FeatureMatrix& query, const FeatureMatrix& gallery);

/// D'[q][g] = D[q][g] - weight * |c_q - c_g|. Ranking-only; may go negative.
DistanceMatrix camera_adjust(const DistanceMatrix& d, const FeatureMatrix& cam_query, const FeatureMatrix& cam_gallery,
                             double weight = 0.1);

/// Per-part row normalization, concatenation, then whole-row normalization.
FeatureMatrix ensemble_features(std::span<const FeatureMatrix> parts);

struct EvalReport {
  double mAP = 0.0;
  std::vector<double> cmc;                // cmc[r-1] for ranks 1..top_limit
  std::vector<double> per_query_ap;       // valid queries only, in query order
  std::vector<std::size_t> valid_queries; // query indices behind per_query_ap
  std::size_t num_valid_queries = 0;
  std::size_t num_invalid_queries = 0;
};

/// Average precision over one truncated ranking. `relevant[i]` marks the
/// i-th retained entry as a correct match. Normalized by the number of
/// relevant retained entries; zero when none is retained.
double truncated_average_precision(std::span<const char> relevant);

/// Re-ID protocol: per query, sort gallery ascending (ties by index), drop
/// entries sharing both identity and camera with the query, keep the first
/// top_limit. Queries without any relevant gallery entry are excluded.
EvalReport evaluate(const DistanceMatrix& d, std::span<const SampleMeta> query, std::span<const SampleMeta> gallery,
                    std::size_t top_limit = 100);

/// {"mAP":..., "cmc":[...], "num_valid_queries":...}
std::string report_to_json(const EvalReport& report);

}  // namespace urde
