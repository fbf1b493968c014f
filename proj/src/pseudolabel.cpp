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
#include "urde/pseudolabel.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <numeric>

namespace urde {

const char* to_string(Metric m) {
  switch (m) {
    case Metric::Euclidean: return "euclidean";
    case Metric::Jaccard: return "jaccard";
    case Metric::Reranked: return "reranked";
    case Metric::CameraAdjusted: return "camera_adjusted";
  }
  return "unknown";
}

void DistanceMatrix::require_symmetric(double tol) const {
  if (rows != cols) fail(ErrorKind::Shape, "distance matrix must be square");
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = i + 1; j < cols; ++j) {
      if (std::abs((*this)(i, j) - (*this)(j, i)) > tol) {
        fail(ErrorKind::Numeric, "distance matrix is not symmetric at (" + std::to_string(i) + ", " +
                                     std::to_string(j) + ")");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Euclidean distances

namespace {

constexpr std::size_t kTile = 64;

inline double pair_distance(const Mat& a, Eigen::Index i, const Mat& b, Eigen::Index j) {
  return (a.row(i) - b.row(j)).norm();
}

}  // namespace

DistanceMatrix pairwise_euclidean(const Mat& feats) {
  if (!feats.allFinite()) fail(ErrorKind::Numeric, "pairwise_euclidean: non-finite feature");
  const auto n = static_cast<std::size_t>(feats.rows());
  DistanceMatrix out(n, n, Metric::Euclidean);
  const std::size_t tiles = (n + kTile - 1) / kTile;
  // Upper-triangle tiles, one tile row per task.
  parallel_for(tiles, [&](std::size_t t0, std::size_t t1) {
    for (std::size_t ti = t0; ti < t1; ++ti) {
      const std::size_t i0 = ti * kTile, i1 = std::min(n, i0 + kTile);
      for (std::size_t j0 = i0; j0 < n; j0 += kTile) {
        const std::size_t j1 = std::min(n, j0 + kTile);
        for (std::size_t i = i0; i < i1; ++i) {
          for (std::size_t j = std::max(j0, i + 1); j < j1; ++j) {
            out(i, j) = pair_distance(feats, static_cast<Eigen::Index>(i), feats, static_cast<Eigen::Index>(j));
          }
        }
      }
    }
  });
  for (std::size_t i = 0; i < n; ++i) {
    out(i, i) = 0.0;
    for (std::size_t j = i + 1; j < n; ++j) out(j, i) = out(i, j);
  }
  return out;
}

DistanceMatrix pairwise_euclidean(const FeatureMatrix& feats) {
  if (feats.n() == 0) fail(ErrorKind::Config, "pairwise_euclidean: need at least one row");
  return pairwise_euclidean(feats.to_mat());
}

DistanceMatrix cross_euclidean(const Mat& a, const Mat& b) {
  if (a.cols() != b.cols()) fail(ErrorKind::Shape, "cross_euclidean: dimension mismatch");
  if (!a.allFinite() || !b.allFinite()) fail(ErrorKind::Numeric, "cross_euclidean: non-finite feature");
  const auto na = static_cast<std::size_t>(a.rows());
  const auto nb = static_cast<std::size_t>(b.rows());
  DistanceMatrix out(na, nb, Metric::Euclidean);
  parallel_for(na, [&](std::size_t i0, std::size_t i1) {
    for (std::size_t i = i0; i < i1; ++i)
      for (std::size_t j = 0; j < nb; ++j)
        out(i, j) = pair_distance(a, static_cast<Eigen::Index>(i), b, static_cast<Eigen::Index>(j));
  });
  return out;
}

// ---------------------------------------------------------------------------
// k-reciprocal neighborhoods

std::vector<std::vector<std::size_t>> nearest_neighbors(const DistanceMatrix& d, std::size_t k) {
  if (d.rows != d.cols) fail(ErrorKind::Shape, "nearest_neighbors: distance matrix must be square");
  const std::size_t n = d.rows;
  if (k < 1 || k >= n) {
    fail(ErrorKind::Config, "k = " + std::to_string(k) + " out of range [1, " + std::to_string(n) + ")");
  }
  std::vector<std::vector<std::size_t>> out(n);
  parallel_for(n, [&](std::size_t p0, std::size_t p1) {
    std::vector<std::size_t> idx;
    for (std::size_t p = p0; p < p1; ++p) {
      idx.clear();
      for (std::size_t j = 0; j < n; ++j)
        if (j != p) idx.push_back(j);
      auto less = [&](std::size_t a, std::size_t b) {
        const double da = d(p, a), db = d(p, b);
        return da < db || (da == db && a < b);
      };
      std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), less);
      out[p].assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    }
  });
  return out;
}

namespace {

// Distance to the k-th nearest other row, per row.
std::vector<double> kth_distance(const DistanceMatrix& d, std::size_t k) {
  const std::size_t n = d.rows;
  std::vector<double> out(n);
  parallel_for(n, [&](std::size_t p0, std::size_t p1) {
    std::vector<double> row;
    for (std::size_t p = p0; p < p1; ++p) {
      row.clear();
      for (std::size_t j = 0; j < n; ++j)
        if (j != p) row.push_back(d(p, j));
      std::nth_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k - 1), row.end());
      out[p] = row[k - 1];
    }
  });
  return out;
}

// Neighborhoods include every row tied with the k-th, so the sets do not
// depend on row order.
std::vector<std::size_t> reciprocal_set(const DistanceMatrix& d, const std::vector<double>& kth, std::size_t p) {
  std::vector<std::size_t> r;
  for (std::size_t g = 0; g < d.rows; ++g)
    if (g != p && d(p, g) <= kth[p] && d(g, p) <= kth[g]) r.push_back(g);
  return r;
}

std::size_t count_common(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::size_t i = 0, j = 0, c = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] < b[j]) {
      ++i;
    } else if (b[j] < a[i]) {
      ++j;
    } else {
      ++c, ++i, ++j;
    }
  }
  return c;
}

}  // namespace

NeighborSets k_reciprocal_neighbors(const DistanceMatrix& d, std::size_t k) {
  if (d.rows != d.cols) fail(ErrorKind::Shape, "k_reciprocal_neighbors: distance matrix must be square");
  const std::size_t n = d.rows;
  if (k < 1 || k >= n) {
    fail(ErrorKind::Config, "k = " + std::to_string(k) + " out of range [1, " + std::to_string(n) + ")");
  }
  const std::size_t half = (k + 1) / 2;
  const std::vector<double> kth = kth_distance(d, k), kth_half = kth_distance(d, half);
  NeighborSets out;
  out.reciprocal.resize(n);
  out.expanded.resize(n);
  std::vector<std::vector<std::size_t>> half_sets(n);
  for (std::size_t p = 0; p < n; ++p) {
    out.reciprocal[p] = reciprocal_set(d, kth, p);
    half_sets[p] = reciprocal_set(d, kth_half, p);
  }
  parallel_for(n, [&](std::size_t p0, std::size_t p1) {
    for (std::size_t p = p0; p < p1; ++p) {
      const auto& base = out.reciprocal[p];
      std::vector<std::size_t> exp = base;
      for (std::size_t q : base) {
        const auto& cand = half_sets[q];
        if (3 * count_common(cand, base) >= 2 * cand.size()) exp.insert(exp.end(), cand.begin(), cand.end());
      }
      std::sort(exp.begin(), exp.end());
      exp.erase(std::unique(exp.begin(), exp.end()), exp.end());
      exp.erase(std::remove(exp.begin(), exp.end(), p), exp.end());
      out.expanded[p] = std::move(exp);
    }
  });
  return out;
}

Mat membership_vectors(const DistanceMatrix& d, std::size_t k1, std::size_t k2) {
  const NeighborSets sets = k_reciprocal_neighbors(d, k1);
  const std::size_t n = d.rows;
  bool any = false;
  for (const auto& s : sets.expanded) any = any || !s.empty();
  if (!any) fail(ErrorKind::Degenerate, "every k-reciprocal neighbor set is empty");

  Mat v = Mat::Zero(n, n);
  for (std::size_t p = 0; p < n; ++p) {
    v(p, p) = std::exp(-d(p, p));
    for (std::size_t g : sets.expanded[p]) v(p, g) = std::exp(-d(p, g));
  }
  if (k2 <= 1) return v;
  if (k2 > k1) fail(ErrorKind::Config, "k2 must not exceed k1");
  const auto nn = nearest_neighbors(d, k2 - 1);
  Mat expanded(n, n);
  for (std::size_t p = 0; p < n; ++p) {
    Eigen::RowVectorXd acc = v.row(p);
    for (std::size_t g : nn[p]) acc += v.row(g);
    expanded.row(p) = acc / static_cast<double>(k2);
  }
  return expanded;
}

DistanceMatrix jaccard_from_membership(const Mat& v, std::span<const std::size_t> rows,
                                       std::span<const std::size_t> cols) {
  const auto n = static_cast<std::size_t>(v.cols());
  std::vector<std::vector<std::size_t>> support(static_cast<std::size_t>(v.rows()));
  Vec mass(v.rows());
  for (Eigen::Index p = 0; p < v.rows(); ++p) {
    for (std::size_t g = 0; g < n; ++g)
      if (v(p, g) > 0.0) support[static_cast<std::size_t>(p)].push_back(g);
    mass[p] = v.row(p).sum();
  }
  DistanceMatrix out(rows.size(), cols.size(), Metric::Jaccard);
  parallel_for(rows.size(), [&](std::size_t r0, std::size_t r1) {
    for (std::size_t r = r0; r < r1; ++r) {
      const auto a = static_cast<Eigen::Index>(rows[r]);
      for (std::size_t c = 0; c < cols.size(); ++c) {
        const auto b = static_cast<Eigen::Index>(cols[c]);
        if (a == b) {
          out(r, c) = 0.0;
          continue;
        }
        double common = 0.0;
        for (std::size_t g : support[static_cast<std::size_t>(a)]) {
          const auto gi = static_cast<Eigen::Index>(g);
          common += std::min(v(a, gi), v(b, gi));
        }
        const double uni = mass[a] + mass[b] - common;
        out(r, c) = uni > 0.0 ? std::clamp(1.0 - common / uni, 0.0, 1.0) : 1.0;
      }
    }
  });
  return out;
}

DistanceMatrix jaccard_distance(const DistanceMatrix& d, std::size_t k) {
  const Mat v = membership_vectors(d, k, 1);
  std::vector<std::size_t> all(d.rows);
  std::iota(all.begin(), all.end(), 0);
  DistanceMatrix j = jaccard_from_membership(v, all, all);
  for (std::size_t p = 0; p < j.rows; ++p) {
    j(p, p) = 0.0;
    for (std::size_t q = p + 1; q < j.cols; ++q) {
      const double s = 0.5 * (j(p, q) + j(q, p));
      j(p, q) = s;
      j(q, p) = s;
    }
  }
  return j;
}

DistanceMatrix reranked_distance(const DistanceMatrix& euclid, std::size_t k1, std::size_t k2, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail(ErrorKind::Config, "rerank: lambda outside [0, 1]");
  if (k2 < 1 || k2 > k1) fail(ErrorKind::Config, "rerank: need 1 <= k2 <= k1");
  const Mat v = membership_vectors(euclid, k1, k2);
  std::vector<std::size_t> all(euclid.rows);
  std::iota(all.begin(), all.end(), 0);
  const DistanceMatrix jac = jaccard_from_membership(v, all, all);
  DistanceMatrix out(euclid.rows, euclid.cols, Metric::Reranked);
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    out.values[i] = lambda * euclid.values[i] + (1.0 - lambda) * jac.values[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// DBSCAN

std::size_t PseudoLabeling::outliers() const {
  return static_cast<std::size_t>(std::count(assignment.begin(), assignment.end(), kOutlier));
}

PseudoLabeling dbscan(const DistanceMatrix& d, double eps, std::size_t min_pts) {
  if (!(eps > 0.0)) fail(ErrorKind::Config, "dbscan: eps must be > 0");
  if (min_pts < 1) fail(ErrorKind::Config, "dbscan: min_pts must be >= 1");
  d.require_symmetric();
  const std::size_t n = d.rows;

  std::vector<std::vector<std::size_t>> nbrs(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (d(i, j) <= eps) nbrs[i].push_back(j);
  std::vector<char> core(n, 0);
  for (std::size_t i = 0; i < n; ++i) core[i] = nbrs[i].size() >= min_pts ? 1 : 0;

  PseudoLabeling out;
  out.assignment.assign(n, kOutlier);
  std::deque<std::size_t> frontier;
  for (std::size_t i = 0; i < n; ++i) {
    if (!core[i] || out.assignment[i] != kOutlier) continue;
    const std::int32_t id = out.num_clusters++;
    out.assignment[i] = id;
    frontier.push_back(i);
    while (!frontier.empty()) {
      const std::size_t c = frontier.front();
      frontier.pop_front();
      for (std::size_t j : nbrs[c]) {
        if (core[j] && out.assignment[j] == kOutlier) {
          out.assignment[j] = id;
          frontier.push_back(j);
        }
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (core[i]) continue;
    for (std::size_t j : nbrs[i]) {  // ascending, so the first core is the lowest index
      if (core[j]) {
        out.assignment[i] = out.assignment[j];
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Epoch relabeling

PseudoLabeling cluster_features(const Mat& embeddings, const ClusterParams& params) {
  const DistanceMatrix euclid = pairwise_euclidean(embeddings);
  const DistanceMatrix dist = params.blended ? reranked_distance(euclid, params.k, params.k2, params.lambda)
                                             : jaccard_distance(euclid, params.k);
  return dbscan(dist, params.eps, params.min_pts);
}

void apply_labels(Dataset& ds, const PseudoLabeling& labels) {
  if (labels.assignment.size() != ds.size()) fail(ErrorKind::Shape, "apply_labels: row count mismatch");
  for (std::size_t i = 0; i < ds.size(); ++i) ds.meta[i].pseudo = labels.assignment[i];
}

PseudoLabeling relabel_epoch(Dataset& target, const Model& encoder, const ClusterParams& params) {
  if (target.size() == 0) fail(ErrorKind::Config, "relabel_epoch: empty target set");
  const FeatureMatrix emb = embed(encoder, target);
  PseudoLabeling labels = cluster_features(emb.to_mat(), params);
  apply_labels(target, labels);
  return labels;
}

double cluster_purity(const PseudoLabeling& labels, std::span<const int> identities) {
  if (identities.size() != labels.assignment.size()) fail(ErrorKind::Shape, "cluster_purity: size mismatch");
  std::map<std::int32_t, std::map<int, std::size_t>> counts;
  std::size_t clustered = 0;
  for (std::size_t i = 0; i < identities.size(); ++i) {
    if (labels.assignment[i] == kOutlier) continue;
    ++counts[labels.assignment[i]][identities[i]];
    ++clustered;
  }
  if (clustered == 0) return 0.0;
  std::size_t majority = 0;
  for (const auto& [cluster, hist] : counts) {
    std::size_t best = 0;
    for (const auto& [id, c] : hist) best = std::max(best, c);
    majority += best;
  }
  return static_cast<double>(majority) / static_cast<double>(clustered);
}

}  // namespace urde
