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
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "test_support.hpp"
#include "urde/retrieval.hpp"

using namespace urde;
using doctest::Approx;

namespace {

FeatureMatrix random_features(std::size_t n, std::size_t d, std::uint64_t seed) {
  return FeatureMatrix::from_mat(testing::to_mat(oracle::clustered_points(n, d, seed)));
}

std::vector<SampleMeta> metas(const std::vector<std::pair<int, int>>& id_cam) {
  std::vector<SampleMeta> out;
  for (auto [id, cam] : id_cam) out.push_back(SampleMeta{id, cam, Domain::Target, kOutlier});
  return out;
}

}  // namespace

TEST_CASE("re-ranking") {
  const FeatureMatrix q = random_features(4, 3, 1), g = random_features(8, 3, 2);
  SUBCASE("lambda 1 is Euclidean") {
    const DistanceMatrix r = rerank(q, g, RerankParams{5, 2, 1.0});
    const DistanceMatrix e = query_gallery_euclidean(q, g);
    REQUIRE(r.rows == 4);
    REQUIRE(r.cols == 8);
    for (std::size_t i = 0; i < r.values.size(); ++i) CHECK(r.values[i] == e.values[i]);
  }
  SUBCASE("k2 = 1 leaves membership unchanged") {
    const DistanceMatrix d = pairwise_euclidean(testing::to_mat(oracle::clustered_points(12, 3, 4)));
    CHECK(membership_vectors(d, 4, 1) == membership_vectors(d, 4));
  }
  SUBCASE("oracle agreement on a 12-point instance") {
    const auto x = oracle::clustered_points(12, 3, 7);
    Mat all = testing::to_mat(x);
    const FeatureMatrix qf = FeatureMatrix::from_mat(all.topRows(4)), gf = FeatureMatrix::from_mat(all.bottomRows(8));
    const oracle::Matrix expect = oracle::rerank(oracle::euclidean(x), 4, 5, 3, 0.3);
    // Features go through float storage; compare with the oracle on the same rounded values.
    std::vector<std::vector<double>> rounded(x.size(), std::vector<double>(3));
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t c = 0; c < 3; ++c) rounded[i][c] = static_cast<float>(x[i][c]);
    const oracle::Matrix expect_f = oracle::rerank(oracle::euclidean(rounded), 4, 5, 3, 0.3);
    const DistanceMatrix got = rerank(qf, gf, RerankParams{5, 3, 0.3});
    CHECK(testing::max_abs_diff(got, expect_f) < 1e-6);
    CHECK(testing::max_abs_diff(got, expect) < 1e-5);
  }
  SUBCASE("parameter ranges") {
    CHECK_THROWS_AS(rerank(q, g, RerankParams{5, 6, 0.3}), Error);
    CHECK_THROWS_AS(rerank(q, g, RerankParams{12, 2, 0.3}), Error);
    CHECK_THROWS_AS(rerank(q, g, RerankParams{5, 2, 1.5}), Error);
  }
}

TEST_CASE("camera adjustment") {
  DistanceMatrix d(1, 1, Metric::Euclidean);
  d(0, 0) = 1.0;
  const FeatureMatrix cq(1, 2, {0.0f, 0.0f}), cg(1, 2, {0.0f, 2.0f});
  CHECK(camera_adjust(d, cq, cg, 0.1)(0, 0) == Approx(0.8).epsilon(1e-15));
  const FeatureMatrix q = random_features(3, 4, 1), g = random_features(5, 4, 2);
  const DistanceMatrix e = query_gallery_euclidean(q, g);
  const FeatureMatrix cams_q = random_features(3, 2, 3), cams_g = random_features(5, 2, 4);
  CHECK(camera_adjust(e, cams_q, cams_g, 0.0).values == e.values);
  const FeatureMatrix same_q(3, 2, std::vector<float>(6, 1.0f)), same_g(5, 2, std::vector<float>(10, 1.0f));
  CHECK(camera_adjust(e, same_q, same_g, 0.1).values == e.values);
  CHECK_THROWS_AS(camera_adjust(e, cams_q, random_features(5, 3, 4), 0.1), Error);
}

TEST_CASE("ensembling") {
  const FeatureMatrix a = random_features(5, 4, 1), b = random_features(5, 6, 2);
  const FeatureMatrix one[] = {a};
  const FeatureMatrix single = ensemble_features(one);
  const Mat am = a.to_mat();
  for (Eigen::Index i = 0; i < 5; ++i)
    for (Eigen::Index c = 0; c < 4; ++c) CHECK(single.to_mat()(i, c) == Approx(am(i, c) / am.row(i).norm()).epsilon(1e-6));
  const FeatureMatrix two[] = {a, b};
  const FeatureMatrix both = ensemble_features(two);
  CHECK(both.d() == 10);
  const Mat bm = both.to_mat();
  for (Eigen::Index i = 0; i < 5; ++i) CHECK(bm.row(i).norm() == Approx(1.0).epsilon(1e-6));
  const FeatureMatrix dup[] = {a, a};
  const Mat dm = ensemble_features(dup).to_mat(), sm = single.to_mat();
  for (Eigen::Index i = 0; i < 5; ++i)
    for (Eigen::Index j = 0; j < 5; ++j) CHECK(dm.row(i).dot(dm.row(j)) == Approx(sm.row(i).dot(sm.row(j))).epsilon(1e-6));
  const FeatureMatrix mismatch[] = {a, random_features(4, 6, 2)};
  CHECK_THROWS_AS(ensemble_features(mismatch), Error);
}

TEST_CASE("evaluation protocol") {
  SUBCASE("single perfect query") {
    DistanceMatrix d(1, 2, Metric::Euclidean);
    d(0, 0) = 0.1;
    d(0, 1) = 0.9;
    const auto q = metas({{1, 0}}), g = metas({{1, 1}, {2, 1}});
    const EvalReport r = evaluate(d, q, g);
    CHECK(r.mAP == 1.0);
    CHECK(r.cmc[0] == 1.0);
  }
  SUBCASE("hits at ranks 1 and 3") {
    const char rel[] = {1, 0, 1, 0};
    CHECK(truncated_average_precision(rel) == Approx(5.0 / 6.0).epsilon(1e-15));
    const char none[] = {0, 0};
    CHECK(truncated_average_precision(none) == 0.0);
  }
  SUBCASE("match beyond the cutoff contributes nothing") {
    DistanceMatrix d(1, 101, Metric::Euclidean);
    std::vector<std::pair<int, int>> gal;
    for (int i = 0; i < 101; ++i) {
      d(0, i) = i;
      gal.emplace_back(i == 100 ? 1 : 100 + i, 1);
    }
    const EvalReport r = evaluate(d, metas({{1, 0}}), metas(gal), 100);
    CHECK(r.num_valid_queries == 1);
    CHECK(r.mAP == 0.0);
    CHECK(r.cmc[99] == 0.0);
  }
  SUBCASE("committed fixture") {
    std::ifstream in(URDE_FIXTURE_DIR "/ap_fixture.json");
    REQUIRE(in.good());
    const auto fx = nlohmann::json::parse(in);
    std::vector<std::pair<int, int>> qm, gm;
    for (const auto& x : fx["queries"]) qm.emplace_back(x["id"], x["cam"]);
    for (const auto& x : fx["gallery"]) gm.emplace_back(x["id"], x["cam"]);
    DistanceMatrix d(qm.size(), gm.size(), Metric::Euclidean);
    for (std::size_t i = 0; i < qm.size(); ++i)
      for (std::size_t j = 0; j < gm.size(); ++j) d(i, j) = fx["distances"][i][j];
    const EvalReport r = evaluate(d, metas(qm), metas(gm), fx["top"]);
    const auto& e = fx["expected"];
    CHECK(r.mAP == Approx(e["mAP"].get<double>()).epsilon(1e-12));
    CHECK(r.num_valid_queries == e["num_valid_queries"].get<std::size_t>());
    CHECK(r.num_invalid_queries == e["num_invalid_queries"].get<std::size_t>());
    CHECK(r.valid_queries == e["valid_queries"].get<std::vector<std::size_t>>());
    const auto ap = e["per_query_ap"].get<std::vector<double>>();
    REQUIRE(r.per_query_ap.size() == ap.size());
    for (std::size_t i = 0; i < ap.size(); ++i) CHECK(r.per_query_ap[i] == Approx(ap[i]).epsilon(1e-12));
    const auto cmc = e["cmc"].get<std::vector<double>>();
    for (std::size_t i = 0; i < cmc.size(); ++i) CHECK(r.cmc[i] == Approx(cmc[i]).epsilon(1e-12));
  }
  SUBCASE("naive oracle, monotone transforms and CMC shape") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      std::mt19937_64 rng(seed);
      std::uniform_int_distribution<int> id(0, 6), cam(0, 2);
      std::vector<std::pair<int, int>> qm(8), gm(40);
      for (auto& m : qm) m = {id(rng), cam(rng)};
      for (auto& m : gm) m = {id(rng), cam(rng)};
      const oracle::Matrix raw = [&] {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        oracle::Matrix m(8, std::vector<double>(40));
        for (auto& r : m)
          for (auto& v : r) v = u(rng);
        return m;
      }();
      std::vector<oracle::Meta> oq, og;
      for (auto [i, c] : qm) oq.push_back({i, c});
      for (auto [i, c] : gm) og.push_back({i, c});
      const oracle::Eval expect = oracle::evaluate(raw, oq, og, 10);
      const DistanceMatrix d = testing::to_dist(raw);
      const EvalReport r = evaluate(d, metas(qm), metas(gm), 10);
      CHECK(r.num_valid_queries == expect.valid);
      if (expect.valid == 0) continue;
      CHECK(r.mAP == Approx(expect.mAP).epsilon(1e-12));
      for (std::size_t k = 0; k < 10; ++k) CHECK(r.cmc[k] == Approx(expect.cmc[k]).epsilon(1e-12));
      for (std::size_t k = 1; k < 10; ++k) CHECK(r.cmc[k - 1] <= r.cmc[k]);
      DistanceMatrix t = d;
      for (double& v : t.values) v = std::exp(3.0 * v) - 7.0;
      const EvalReport rt = evaluate(t, metas(qm), metas(gm), 10);
      CHECK(rt.mAP == r.mAP);
      CHECK(rt.cmc == r.cmc);
    }
  }
  SUBCASE("errors") {
    DistanceMatrix empty(1, 0, Metric::Euclidean);
    CHECK_THROWS_AS(evaluate(empty, metas({{1, 0}}), metas({})), Error);
    DistanceMatrix d(1, 1, Metric::Euclidean);
    CHECK_THROWS_AS(evaluate(d, metas({{1, 0}}), metas({{2, 0}})), Error);
  }
  SUBCASE("JSON report") {
    DistanceMatrix d(1, 2, Metric::Euclidean);
    d(0, 1) = 1.0;
    const auto j = nlohmann::json::parse(report_to_json(evaluate(d, metas({{1, 0}}), metas({{1, 1}, {2, 1}}), 3)));
    CHECK(j["mAP"].get<double>() == 1.0);
    CHECK(j["cmc"].size() == 3);
    CHECK(j["num_valid_queries"].get<int>() == 1);
  }
}
