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
#include "urde/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"

namespace urde {

DistanceMatrix query_gallery_euclidean(const FeatureMatrix& query, const FeatureMatrix& gallery) {
  if (query.d() != gallery.d()) fail(ErrorKind::Shape, "query/gallery dimension mismatch");
  return cross_euclidean(query.to_mat(), gallery.to_mat());
}

DistanceMatrix rerank(const FeatureMatrix& query, const FeatureMatrix& gallery, const RerankParams& params) {
  if (query.d() != gallery.d()) fail(ErrorKind::Shape, "rerank: query/gallery dimension mismatch");
  const std::size_t nq = query.n(), ng = gallery.n();
  const std::size_t total = nq + ng;
  if (!(params.k2 >= 1 && params.k2 <= params.k1 && params.k1 < total)) {
    fail(ErrorKind::Config, "rerank: need 1 <= k2 <= k1 < n_query + n_gallery (k1=" + std::to_string(params.k1) +
                                ", k2=" + std::to_string(params.k2) + ", n=" + std::to_string(total) + ")");
  }
  if (!(params.lambda >= 0.0 && params.lambda <= 1.0)) fail(ErrorKind::Config, "rerank: lambda outside [0, 1]");

  Mat all(total, query.d());
  all.topRows(nq) = query.to_mat();
  all.bottomRows(ng) = gallery.to_mat();
  const DistanceMatrix euclid = pairwise_euclidean(all);

  DistanceMatrix out(nq, ng, Metric::Reranked);
  if (params.lambda == 1.0) {
    // Blend endpoint: the Jaccard term carries zero weight.
    for (std::size_t q = 0; q < nq; ++q)
      for (std::size_t g = 0; g < ng; ++g) out(q, g) = euclid(q, nq + g);
    return out;
  }
  const Mat v = membership_vectors(euclid, params.k1, params.k2);
  std::vector<std::size_t> rows(nq), cols(ng);
  std::iota(rows.begin(), rows.end(), 0);
  std::iota(cols.begin(), cols.end(), nq);
  const DistanceMatrix jac = jaccard_from_membership(v, rows, cols);
  for (std::size_t q = 0; q < nq; ++q)
    for (std::size_t g = 0; g < ng; ++g)
      out(q, g) = params.lambda * euclid(q, nq + g) + (1.0 - params.lambda) * jac(q, g);
  return out;
}

DistanceMatrix camera_adjust(const DistanceMatrix& d, const FeatureMatrix& cam_query, const FeatureMatrix& cam_gallery,
                             double weight) {
  if (!(weight >= 0.0) || !std::isfinite(weight)) fail(ErrorKind::Config, "camera_adjust: weight must be >= 0");
  if (cam_query.d() != cam_gallery.d()) fail(ErrorKind::Shape, "camera_adjust: camera feature dimension mismatch");
  if (cam_query.n() != d.rows || cam_gallery.n() != d.cols) {
    fail(ErrorKind::Shape, "camera_adjust: camera feature rows do not match the distance matrix");
  }
  DistanceMatrix out = d;
  out.metric = Metric::CameraAdjusted;
  if (weight == 0.0) return out;
  const DistanceMatrix cam = cross_euclidean(cam_query.to_mat(), cam_gallery.to_mat());
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] -= weight * cam.values[i];
  return out;
}

FeatureMatrix ensemble_features(std::span<const FeatureMatrix> parts) {
  if (parts.empty()) fail(ErrorKind::Config, "ensemble_features: no parts");
  const std::size_t n = parts.front().n();
  std::size_t width = 0;
  for (const auto& p : parts) {
    if (p.n() != n) fail(ErrorKind::Shape, "ensemble_features: row-count mismatch between parts");
    width += p.d();
  }
  Mat out(n, width);
  Eigen::Index col = 0;
  for (const auto& p : parts) {
    Mat m = p.to_mat();
    normalize_rows(m, "ensemble_features part");
    out.middleCols(col, m.cols()) = m;
    col += m.cols();
  }
  normalize_rows(out, "ensemble_features");
  return FeatureMatrix::from_mat(out);
}

double truncated_average_precision(std::span<const char> relevant) {
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < relevant.size(); ++i) {
    if (!relevant[i]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  return hits == 0 ? 0.0 : sum / static_cast<double>(hits);
}

EvalReport evaluate(const DistanceMatrix& d, std::span<const SampleMeta> query, std::span<const SampleMeta> gallery,
                    std::size_t top_limit) {
  if (gallery.empty() || d.cols == 0) fail(ErrorKind::Config, "evaluate: empty gallery");
  if (d.rows != query.size() || d.cols != gallery.size()) {
    fail(ErrorKind::Shape, "evaluate: distance matrix does not match query/gallery sizes");
  }
  if (top_limit == 0) fail(ErrorKind::Config, "evaluate: top_limit must be >= 1");

  const std::size_t nq = query.size();
  std::vector<double> ap(nq, 0.0);
  std::vector<std::vector<double>> cmc_hits(nq);
  std::vector<char> valid(nq, 0);

  parallel_for(nq, [&](std::size_t q0, std::size_t q1) {
    std::vector<std::size_t> order;
    std::vector<char> rel;
    for (std::size_t q = q0; q < q1; ++q) {
      const auto& qm = query[q];
      if (qm.identity == kNoIdentity) continue;
      order.clear();
      bool any_relevant = false;
      for (std::size_t g = 0; g < gallery.size(); ++g) {
        const auto& gm = gallery[g];
        if (gm.identity == qm.identity && gm.camera == qm.camera) continue;
        order.push_back(g);
        any_relevant = any_relevant || gm.identity == qm.identity;
      }
      if (!any_relevant) continue;
      valid[q] = 1;
      const auto row = d.row(q);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] < row[b]; });
      const std::size_t keep = std::min(top_limit, order.size());
      rel.assign(keep, 0);
      for (std::size_t r = 0; r < keep; ++r) rel[r] = gallery[order[r]].identity == qm.identity ? 1 : 0;
      ap[q] = truncated_average_precision(rel);
      cmc_hits[q].assign(top_limit, 0.0);
      const auto first = std::find(rel.begin(), rel.end(), 1);
      if (first != rel.end()) {
        for (std::size_t r = static_cast<std::size_t>(first - rel.begin()); r < top_limit; ++r) cmc_hits[q][r] = 1.0;
      }
    }
  });

  EvalReport report;
  report.cmc.assign(top_limit, 0.0);
  for (std::size_t q = 0; q < nq; ++q) {
    if (!valid[q]) {
      ++report.num_invalid_queries;
      continue;
    }
    report.valid_queries.push_back(q);
    report.per_query_ap.push_back(ap[q]);
    for (std::size_t r = 0; r < top_limit; ++r) report.cmc[r] += cmc_hits[q][r];
  }
  report.num_valid_queries = report.valid_queries.size();
  if (report.num_valid_queries == 0) fail(ErrorKind::Degenerate, "evaluate: no valid queries");
  const double inv = 1.0 / static_cast<double>(report.num_valid_queries);
  for (double& c : report.cmc) c *= inv;
  report.mAP = std::accumulate(report.per_query_ap.begin(), report.per_query_ap.end(), 0.0) * inv;
  return report;
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["mAP"] = report.mAP;
  j["cmc"] = report.cmc;
  j["num_valid_queries"] = report.num_valid_queries;
  return j.dump();
}

}  // namespace urde
