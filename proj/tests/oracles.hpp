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

// Naive reference implementations used as test oracles. Everything here is
// written straight from the definitions with full sorts and dense loops and
// shares no code with the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <vector>

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix euclidean(const std::vector<std::vector<double>>& x) {
  const std::size_t n = x.size();
  Matrix d(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < x[i].size(); ++c) s += (x[i][c] - x[j][c]) * (x[i][c] - x[j][c]);
      d[i][j] = std::sqrt(s);
    }
  return d;
}

// k nearest rows of p, self excluded, ordered by (distance, index).
inline std::vector<std::size_t> knn(const Matrix& d, std::size_t p, std::size_t k) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t j = 0; j < d.size(); ++j)
    if (j != p) all.emplace_back(d[p][j], j);
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(all[i].second);
  return out;
}

// Rows within the k-th smallest distance from p, ties included.
inline std::vector<std::size_t> knn_ties(const Matrix& d, std::size_t p, std::size_t k) {
  std::vector<double> all;
  for (std::size_t j = 0; j < d.size(); ++j)
    if (j != p) all.push_back(d[p][j]);
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < d.size(); ++j)
    if (j != p && d[p][j] <= all[k - 1]) out.push_back(j);
  return out;
}

inline bool contains(const std::vector<std::size_t>& v, std::size_t x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

inline std::set<std::size_t> reciprocal(const Matrix& d, std::size_t p, std::size_t k) {
  std::set<std::size_t> r;
  for (std::size_t g : knn_ties(d, p, k))
    if (contains(knn_ties(d, g, k), p)) r.insert(g);
  return r;
}

inline std::set<std::size_t> expanded(const Matrix& d, std::size_t p, std::size_t k) {
  const std::set<std::size_t> base = reciprocal(d, p, k);
  std::set<std::size_t> out = base;
  const std::size_t half = (k + 1) / 2;
  for (std::size_t q : base) {
    const std::set<std::size_t> cand = reciprocal(d, q, half);
    std::size_t common = 0;
    for (std::size_t c : cand) common += base.count(c);
    if (3.0 * static_cast<double>(common) >= 2.0 * static_cast<double>(cand.size())) out.insert(cand.begin(), cand.end());
  }
  out.erase(p);
  return out;
}

// Fuzzy membership over {p} and R*(p): exp(-d), zero elsewhere.
inline Matrix membership(const Matrix& d, std::size_t k) {
  const std::size_t n = d.size();
  Matrix v(n, std::vector<double>(n, 0.0));
  for (std::size_t p = 0; p < n; ++p) {
    v[p][p] = std::exp(-d[p][p]);
    for (std::size_t g : expanded(d, p, k)) v[p][g] = std::exp(-d[p][g]);
  }
  return v;
}

inline double jaccard_pair(const std::vector<double>& a, const std::vector<double>& b) {
  double mn = 0.0, mx = 0.0;
  for (std::size_t g = 0; g < a.size(); ++g) {
    mn += std::min(a[g], b[g]);
    mx += std::max(a[g], b[g]);
  }
  return mx > 0.0 ? 1.0 - mn / mx : 1.0;
}

inline Matrix jaccard(const Matrix& d, std::size_t k) {
  const Matrix v = membership(d, k);
  const std::size_t n = d.size();
  Matrix j(n, std::vector<double>(n, 0.0));
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = 0; q < n; ++q)
      if (p != q) j[p][q] = 0.5 * (jaccard_pair(v[p], v[q]) + jaccard_pair(v[q], v[p]));
  return j;
}

// Re-ranking over the joint set whose first nq rows are queries. Returns the
// nq x (n - nq) block.
inline Matrix rerank(const Matrix& d, std::size_t nq, std::size_t k1, std::size_t k2, double lambda) {
  const std::size_t n = d.size();
  Matrix v = membership(d, k1);
  if (k2 > 1) {
    Matrix qe(n, std::vector<double>(n, 0.0));
    for (std::size_t p = 0; p < n; ++p) {
      std::vector<std::size_t> group = knn(d, p, k2 - 1);
      group.push_back(p);
      for (std::size_t g : group)
        for (std::size_t c = 0; c < n; ++c) qe[p][c] += v[g][c] / static_cast<double>(k2);
    }
    v = qe;
  }
  Matrix out(nq, std::vector<double>(n - nq, 0.0));
  for (std::size_t q = 0; q < nq; ++q)
    for (std::size_t g = nq; g < n; ++g)
      out[q][g - nq] = lambda * d[q][g] + (1.0 - lambda) * jaccard_pair(v[q], v[g]);
  return out;
}

// Density clustering by explicit reachability closure.
inline std::vector<int> dbscan(const Matrix& d, double eps, std::size_t min_pts) {
  const std::size_t n = d.size();
  std::vector<bool> core(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (std::size_t j = 0; j < n; ++j) c += d[i][j] <= eps ? 1 : 0;
    core[i] = c >= min_pts;
  }
  // reach[i][j]: cores i and j connected through a chain of cores.
  std::vector<std::vector<bool>> reach(n, std::vector<bool>(n, false));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) reach[i][j] = core[i] && core[j] && (i == j || d[i][j] <= eps);
  for (std::size_t m = 0; m < n; ++m)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (reach[i][m] && reach[m][j]) reach[i][j] = true;
  std::vector<int> label(n, -2);
  int next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!core[i] || label[i] != -2) continue;
    for (std::size_t j = 0; j < n; ++j)
      if (reach[i][j]) label[j] = next;
    ++next;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (core[i]) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (core[j] && d[i][j] <= eps) {
        label[i] = label[j];
        break;
      }
    }
  }
  return label;
}

struct Meta {
  int id;
  int cam;
};

struct Eval {
  double mAP = 0.0;
  std::vector<double> cmc;
  std::vector<double> ap;
  std::size_t valid = 0;
};

inline Eval evaluate(const Matrix& d, const std::vector<Meta>& q, const std::vector<Meta>& g, std::size_t top) {
  Eval e;
  e.cmc.assign(top, 0.0);
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<std::pair<double, std::size_t>> order;
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (g[j].id == q[i].id && g[j].cam == q[i].cam) continue;
      order.emplace_back(d[i][j], j);
    }
    std::sort(order.begin(), order.end());
    bool any = false;
    for (const auto& o : order) any = any || g[o.second].id == q[i].id;
    if (!any) continue;
    ++e.valid;
    double hits = 0.0, sum = 0.0;
    std::size_t first = top;
    for (std::size_t r = 0; r < std::min(top, order.size()); ++r) {
      if (g[order[r].second].id != q[i].id) continue;
      hits += 1.0;
      sum += hits / static_cast<double>(r + 1);
      first = std::min(first, r);
    }
    e.ap.push_back(hits > 0.0 ? sum / hits : 0.0);
    for (std::size_t r = first; r < top; ++r) e.cmc[r] += 1.0;
  }
  for (double a : e.ap) e.mAP += a;
  if (e.valid) {
    e.mAP /= static_cast<double>(e.valid);
    for (double& c : e.cmc) c /= static_cast<double>(e.valid);
  }
  return e;
}

// Random points with a few planted groups so that neighbor sets are
// non-trivial.
inline std::vector<std::vector<double>> clustered_points(std::size_t n, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t groups = 2 + seed % 4;
  std::vector<std::vector<double>> centers(groups, std::vector<double>(dim));
  for (auto& c : centers)
    for (double& v : c) v = 3.0 * normal(rng);
  std::vector<std::vector<double>> x(n, std::vector<double>(dim));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < dim; ++c) x[i][c] = centers[i % groups][c] + normal(rng);
  return x;
}

}  // namespace oracle
