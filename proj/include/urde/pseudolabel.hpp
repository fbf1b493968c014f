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
#include <span>
#include <vector>

#include "urde/common.hpp"
#include "urde/datamodel.hpp"
#include "urde/encoder.hpp"

namespace urde {

enum class Metric { Euclidean, Jaccard, Reranked, CameraAdjusted };
const char* to_string(Metric m);

/// Row-major distance table. Square for a single set, rectangular for
/// query x gallery.
struct DistanceMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  Metric metric = Metric::Euclidean;

  DistanceMatrix() = default;
  DistanceMatrix(std::size_t r, std::size_t c, Metric m) : rows(r), cols(c), values(r * c, 0.0), metric(m) {}

  double operator()(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
  double& operator()(std::size_t i, std::size_t j) { return values[i * cols + j]; }
  std::span<const double> row(std::size_t i) const { return {values.data() + i * cols, cols}; }

  /// Throws Shape unless square, Numeric unless symmetric within `tol`.
  void require_symmetric(double tol = 1e-6) const;
};

/// All-pairs Euclidean distances, tiled over row blocks. Exact zero diagonal
/// and exact symmetry.
DistanceMatrix pairwise_euclidean(const FeatureMatrix& feats);
DistanceMatrix pairwise_euclidean(const Mat& feats);
/// Rectangular a x b Euclidean distances with the same per-pair arithmetic.
DistanceMatrix cross_euclidean(const Mat& a, const Mat& b);

/// R(p,k) and the expanded R*(p,k) for every row, each sorted ascending.
/// Neither contains p itself. N(p,k) holds every row no farther than p's
/// k-th nearest, so ties at the boundary are all included.
struct NeighborSets {
  std::vector<std::vector<std::size_t>> reciprocal;
  std::vector<std::vector<std::size_t>> expanded;
};

/// Nearest-neighbor lists excluding self, ordered by (distance, index).
std::vector<std::vector<std::size_t>> nearest_neighbors(const DistanceMatrix& d, std::size_t k);

NeighborSets k_reciprocal_neighbors(const DistanceMatrix& d, std::size_t k);

/// Fuzzy membership rows: V_p[g] = exp(-D[p][g]) on {p} u R*(p,k1), zero
/// elsewhere; with k2 > 1 each row is replaced by the mean of the rows of p's
/// k2 nearest points (p included).
Mat membership_vectors(const DistanceMatrix& d, std::size_t k1, std::size_t k2 = 1);

/// 1 - sum min(V_a, V_b) / sum max(V_a, V_b) for each listed pair of rows.
DistanceMatrix jaccard_from_membership(const Mat& v, std::span<const std::size_t> rows,
                                       std::span<const std::size_t> cols);

/// Jaccard distance over k-reciprocal neighborhoods, no query expansion.
/// Throws Degenerate if every expanded set is empty.
DistanceMatrix jaccard_distance(const DistanceMatrix& d, std::size_t k);

/// lambda * d_euclid + (1 - lambda) * d_J on a single joint set, with local
/// query expansion over k2 neighbors.
DistanceMatrix reranked_distance(const DistanceMatrix& euclid, std::size_t k1, std::size_t k2, double lambda);

struct PseudoLabeling {
  std::vector<std::int32_t> assignment;  // cluster id or kOutlier
  std::int32_t num_clusters = 0;
  std::int32_t epoch = 0;

  std::size_t outliers() const;
  bool operator==(const PseudoLabeling&) const = default;
};

/// Density clustering on a precomputed distance matrix. Neighborhoods use
/// D <= eps and count the point itself. Cluster ids follow the first core
/// point of each cluster in row order; a border point joins the cluster of
/// its lowest-index core within eps.
PseudoLabeling dbscan(const DistanceMatrix& d, double eps, std::size_t min_pts);

struct ClusterParams {
  std::size_t k = 20;
  double eps = 0.6;
  std::size_t min_pts = 4;
  // Cluster on the lambda-blended re-ranked distance instead of Jaccard.
  bool blended = false;
  std::size_t k2 = 6;
  double lambda = 0.3;
};

/// Clusters already-embedded rows: Euclidean -> Jaccard (or blended) -> DBSCAN.
PseudoLabeling cluster_features(const Mat& embeddings, const ClusterParams& params);

/// Encodes target rows in eval mode, clusters them, and writes the result
/// into each row's pseudo label.
PseudoLabeling relabel_epoch(Dataset& target, const Model& encoder, const ClusterParams& params);

/// Writes assignments into SampleMeta::pseudo.
void apply_labels(Dataset& ds, const PseudoLabeling& labels);

/// Fraction of clustered rows whose cluster's majority identity matches
/// their own. Returns 0 when every row is an outlier.
double cluster_purity(const PseudoLabeling& labels, std::span<const int> identities);

}  // namespace urde
