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
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "doctest.h"
#include "urde/datamodel.hpp"

using namespace urde;

namespace {

Dataset random_dataset(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::vector<float> v(n * d);
  for (auto& x : v) x = normal(rng);
  Dataset ds{FeatureMatrix(n, d, v), {}, "random"};
  for (std::size_t i = 0; i < n; ++i) {
    SampleMeta m;
    m.identity = static_cast<std::int32_t>(i % 3);
    m.camera = static_cast<std::int32_t>(i % 2);
    m.domain = i % 2 ? Domain::Target : Domain::Source;
    m.pseudo = i % 4 == 0 ? kOutlier : static_cast<std::int32_t>(i);
    ds.meta.push_back(m);
  }
  return ds;
}

template <class F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::Config;
}

std::uint64_t offset_of(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_features(bytes);
  } catch (const Error& e) {
    REQUIRE(e.kind() == ErrorKind::Format);
    REQUIRE(e.offset().has_value());
    return *e.offset();
  }
  FAIL("expected a format error");
  return 0;
}

}  // namespace

TEST_CASE("feature matrix rejects bad construction") {
  CHECK_THROWS_AS(FeatureMatrix(2, 0), Error);
  CHECK(kind_of([] { FeatureMatrix(2, 2, {1.0f, 2.0f, 3.0f}); }) == ErrorKind::Shape);
  CHECK(kind_of([] { FeatureMatrix(1, 2, {1.0f, std::numeric_limits<float>::infinity()}); }) == ErrorKind::Numeric);
}

TEST_CASE("feature file layout is bit-exact") {
  Dataset ds{FeatureMatrix(1, 2, {1.0f, -2.0f}), {SampleMeta{7, 3, Domain::Target, kOutlier}}, "x"};
  const auto bytes = encode_features(ds);
  const std::vector<std::uint8_t> expected = {
      'U', 'R', 'D', 'E', 1, 0,            // magic, version
      1, 0, 0, 0, 2, 0, 0, 0,              // n, d
      7, 0, 0, 0,                          // identity
      3, 0, 0, 0,                          // camera
      1,                                   // domain
      0xFE, 0xFF, 0xFF, 0xFF,              // pseudo = -2
      0x00, 0x00, 0x80, 0x3F,              // 1.0f
      0x00, 0x00, 0x00, 0xC0};             // -2.0f
  CHECK(bytes == expected);
}

TEST_CASE("feature files round-trip") {
  SUBCASE("random 5x4") {
    const Dataset ds = random_dataset(5, 4, 3);
    CHECK(decode_features(encode_features(ds)) == ds);
  }
  SUBCASE("empty n=0 d=8") {
    const Dataset ds{FeatureMatrix(0, 8), {}, "empty"};
    const Dataset back = decode_features(encode_features(ds));
    CHECK(back == ds);
    CHECK(back.dim() == 8);
  }
  SUBCASE("through a file, name from stem") {
    const auto path = std::filesystem::temp_directory_path() / "urde_roundtrip.urde";
    const Dataset ds = random_dataset(7, 3, 9);
    save_features(path, ds);
    const Dataset back = load_features(path);
    CHECK(back == ds);
    CHECK(back.name == "urde_roundtrip");
    std::filesystem::remove(path);
  }
}

TEST_CASE("corrupt feature files report byte offsets") {
  const auto good = encode_features(random_dataset(3, 2, 1));
  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK(offset_of(bad_magic) == 0);

  auto bad_version = good;
  bad_version[4] = 2;
  CHECK(offset_of(bad_version) == 4);

  auto truncated = good;
  truncated.resize(good.size() - 3);
  CHECK(offset_of(truncated) == 14);  // start of the short table

  auto trailing = good;
  trailing.push_back(0);
  CHECK(offset_of(trailing) == good.size());

  auto nan_value = good;
  const std::size_t value_start = good.size() - 3 * 2 * 4;
  const float nan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(&nan_value[value_start + 4], &nan, 4);
  CHECK(offset_of(nan_value) == value_start + 4);

  CHECK(kind_of([] { load_features("/nonexistent/urde.bin"); }) == ErrorKind::Format);
}

TEST_CASE("concat preserves order, metadata and domain counts") {
  const Dataset a = random_dataset(3, 4, 1), b = random_dataset(2, 4, 2);
  const Dataset c = concat_datasets(a, b);
  REQUIRE(c.size() == 5);
  for (std::size_t i = 0; i < 3; ++i) CHECK(c.meta[i] == a.meta[i]);
  for (std::size_t i = 0; i < 2; ++i) CHECK(c.meta[3 + i] == b.meta[i]);
  CHECK(std::vector<float>(c.features.row(4).begin(), c.features.row(4).end()) ==
        std::vector<float>(b.features.row(1).begin(), b.features.row(1).end()));
  std::map<Domain, int> hist;
  for (const auto& m : c.meta) ++hist[m.domain];
  CHECK(hist[Domain::Source] == 2 + 1);
  CHECK(hist[Domain::Target] == 1 + 1);

  const Dataset empty{FeatureMatrix(0, 4), {}, "e"};
  CHECK(concat_datasets(a, empty) == a);
  CHECK(kind_of([&] { concat_datasets(a, random_dataset(1, 3, 0)); }) == ErrorKind::Shape);
}

TEST_CASE("synthetic generator") {
  SynthConfig cfg = default_synth_config(7);

  SUBCASE("deterministic per seed") {
    const SynthOutput a = generate_synthetic(cfg), b = generate_synthetic(cfg);
    CHECK(a.source == b.source);
    CHECK(a.target == b.target);
    CHECK(a.translated == b.translated);
    const SynthOutput c = generate_synthetic(default_synth_config(8));
    CHECK_FALSE(c.source == a.source);
  }
  SUBCASE("sizes, labels and cameras") {
    const SynthOutput out = generate_synthetic(cfg);
    CHECK(out.source.size() == cfg.num_ids_source * cfg.samples_per_id);
    CHECK(out.target.size() == cfg.num_ids_target * cfg.samples_per_id);
    CHECK(out.source.dim() == cfg.raw_dim);
    for (std::size_t i = 0; i < out.source.size(); ++i) {
      CHECK(out.source.meta[i].domain == Domain::Source);
      CHECK(out.source.meta[i].identity >= 0);
      CHECK(out.source.meta[i].identity < static_cast<int>(cfg.num_ids_source));
      CHECK(out.translated.meta[i] == out.source.meta[i]);
    }
    std::map<int, int> cams;
    for (const auto& m : out.target.meta) {
      CHECK(m.domain == Domain::Target);
      CHECK(m.identity >= static_cast<int>(cfg.num_ids_source));
      ++cams[m.camera];
    }
    CHECK(cams.size() == cfg.cameras);
    for (const auto& [cam, count] : cams) CHECK(std::abs(count - cams.begin()->second) <= static_cast<int>(cfg.num_ids_target));
  }
  SUBCASE("gamma = 0 gives translated == source byte-for-byte") {
    cfg.translation_fidelity = 0.0;
    const SynthOutput out = generate_synthetic(cfg);
    CHECK(encode_features(out.translated) == encode_features(out.source));
  }
  SUBCASE("gamma = 1 undoes the shift") {
    cfg.translation_fidelity = 1.0;
    const SynthOutput out = generate_synthetic(cfg);
    // Invert the shift on the stored source rows and compare with the blend.
    const Mat pre = (cfg.shift_matrix.fullPivLu().solve(
                         (out.source.features.to_mat().rowwise() - cfg.shift_offset.transpose()).transpose()))
                        .transpose();
    CHECK((out.translated.features.to_mat() - pre).cwiseAbs().maxCoeff() < 1e-4);
  }
  SUBCASE("gamma = 1 with no spread puts translated rows on identity centers") {
    cfg.translation_fidelity = 1.0;
    cfg.cluster_spread = 0.0;
    cfg.nuisance_spread = 0.0;
    cfg.camera_spread = 0.0;
    const SynthOutput out = generate_synthetic(cfg);
    const Mat t = out.translated.features.to_mat();
    for (std::size_t i = 1; i < out.translated.size(); ++i) {
      if (out.translated.meta[i].identity != out.translated.meta[i - 1].identity) continue;
      CHECK((t.row(static_cast<Eigen::Index>(i)) - t.row(static_cast<Eigen::Index>(i - 1))).norm() < 1e-5);
    }
  }
  SUBCASE("invalid fields are named") {
    SynthConfig bad = cfg;
    bad.translation_fidelity = 1.5;
    try {
      generate_synthetic(bad);
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Config);
      CHECK(std::string(e.what()).find("translation_fidelity") != std::string::npos);
    }
    bad = cfg;
    bad.shift_matrix.setZero();
    CHECK(kind_of([&] { generate_synthetic(bad); }) == ErrorKind::Config);
    bad = cfg;
    bad.cluster_spread = -1.0;
    CHECK(kind_of([&] { generate_synthetic(bad); }) == ErrorKind::Config);
  }
  SUBCASE("config file keys") {
    KeyValueConfig kv = KeyValueConfig::parse("# comment\nnum_ids_source = 4\nsamples_per_id = 3\nseed = 5\n");
    const SynthConfig c = synth_config_from(kv);
    CHECK(c.num_ids_source == 4);
    CHECK(c.samples_per_id == 3);
    CHECK(c.seed == 5);
    CHECK(generate_synthetic(c).source.size() == 12);
  }
}

TEST_CASE("query/gallery split takes the first rows of each identity") {
  const SynthOutput out = generate_synthetic(default_synth_config(1));
  const QueryGallery qg = split_query_gallery(out.target, 2);
  CHECK(qg.query.size() == 2 * 32);
  CHECK(qg.gallery.size() == out.target.size() - 64);
  std::map<int, int> seen;
  for (const auto& m : qg.query.meta) ++seen[m.identity];
  for (const auto& [id, c] : seen) CHECK(c == 2);
}
