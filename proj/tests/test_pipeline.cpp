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
#include <cmath>

#include "doctest.h"
#include "json.hpp"
#include "urde/pipeline.hpp"

using namespace urde;

namespace {

StageConfig quick(std::size_t epochs = 2) {
  StageConfig c;
  c.epochs = epochs;
  c.iters_per_epoch = 5;
  c.p_classes = 4;
  c.k_per = 4;
  c.cluster.k = 6;
  return c;
}

SynthConfig small_synth(std::uint64_t seed) {
  SynthConfig s = default_synth_config(seed);
  s.num_ids_source = 8;
  s.num_ids_target = 8;
  s.samples_per_id = 8;
  make_domain_shift(s, ShiftParams{}, seed);
  return s;
}

}  // namespace

TEST_CASE("stage config validation names the field") {
  StageConfig c;
  c.lambda_soft = 1.5;
  try {
    c.validate();
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Config);
    CHECK(std::string(e.what()).find("lambda_soft") != std::string::npos);
  }
  const StageConfig parsed = stage_config_from(KeyValueConfig::parse("epochs=3\nloss=arcface\nlr_schedule=step\n"));
  CHECK(parsed.epochs == 3);
  CHECK(parsed.loss == ClassifierLoss::ArcFace);
  CHECK(parsed.schedule == LrSchedule::Step);
  CHECK_THROWS_AS(stage_config_from(KeyValueConfig::parse("loss=hinge\n")), Error);
}

TEST_CASE("step schedule decays at 40 and 70 of 120") {
  StageConfig c;
  c.epochs = 120;
  c.schedule = LrSchedule::Step;
  CHECK(c.lr_at(0) == c.lr);
  CHECK(c.lr_at(39) == c.lr);
  CHECK(c.lr_at(40) == doctest::Approx(c.lr * 0.1));
  CHECK(c.lr_at(70) == doctest::Approx(c.lr * 0.01));
  c.schedule = LrSchedule::Constant;
  CHECK(c.lr_at(100) == c.lr);
}

TEST_CASE("pretrain") {
  const SynthOutput data = generate_synthetic(small_synth(1));
  SUBCASE("zero epochs returns the initialization") {
    const PretrainResult a = stage_pretrain(data.source, quick(0));
    const PretrainResult b = stage_pretrain(data.source, quick(0));
    CHECK(a.params.weight == b.params.weight);
    CHECK(a.log.epochs.empty());
    EncoderParams init = init_encoder(data.source.dim(), data.source.dim(), derive_seed(0, 1));
    CHECK(a.params.weight.rows() == init.weight.rows());
  }
  SUBCASE("separable ids push the triplet loss below ln 2") {
    SynthConfig s = small_synth(2);
    s.num_ids_source = 4;
    s.cluster_spread = 0.05;
    s.nuisance_spread = 0.05;
    s.camera_spread = 0.05;
    const SynthOutput sep = generate_synthetic(s);
    StageConfig c = quick(5);
    c.iters_per_epoch = 40;
    c.p_classes = 2;
    const PretrainResult r = stage_pretrain(sep.source, c);
    CHECK(r.log.epochs.back().tri < std::log(2.0));
  }
  SUBCASE("bitwise deterministic") {
    const PretrainResult a = stage_pretrain(data.source, quick());
    const PretrainResult b = stage_pretrain(data.source, quick());
    CHECK(a.params.weight == b.params.weight);
    CHECK(a.log.to_jsonl() == b.log.to_jsonl());
  }
  SUBCASE("too few classes") {
    StageConfig c = quick();
    c.p_classes = 9;
    CHECK_THROWS_AS(stage_pretrain(data.source, c), Error);
  }
  SUBCASE("run log lines are JSON objects") {
    const PretrainResult r = stage_pretrain(data.source, quick());
    std::istringstream lines(r.log.to_jsonl());
    std::string line;
    std::size_t n = 0;
    while (std::getline(lines, line)) {
      const auto j = nlohmann::json::parse(line);
      CHECK(j["stage"] == "pretrain");
      CHECK(j["epoch"].get<std::size_t>() == n);
      CHECK(std::isfinite(j["loss"]["total"].get<double>()));
      ++n;
    }
    CHECK(n == 2);
  }
}

TEST_CASE("baseline on a perfectly clusterable target") {
  SynthConfig s = small_synth(3);
  s.cluster_spread = 0.01;
  s.nuisance_spread = 0.0;
  s.camera_spread = 0.0;
  const SynthOutput data = generate_synthetic(s);
  EncoderParams enc = init_encoder(s.raw_dim, s.raw_dim, 0);
  enc.weight = Mat::Identity(s.raw_dim, s.raw_dim);
  calibrate_norm(enc, data.target.features.to_mat(), Domain::Target);
  const PretrainResult r = stage_baseline(enc, data.target, quick(1));
  REQUIRE(r.log.epochs.size() == 1);
  CHECK(r.log.epochs[0].clusters == s.num_ids_target);
  CHECK(r.log.epochs[0].purity == 1.0);
  const PretrainResult again = stage_baseline(enc, data.target, quick(1));
  CHECK(again.log.to_jsonl() == r.log.to_jsonl());
}

TEST_CASE("baseline skips epochs without clusters") {
  const SynthOutput data = generate_synthetic(small_synth(4));
  const PretrainResult pre = stage_pretrain(data.source, quick(0));
  StageConfig c = quick(2);
  c.cluster.eps = 1e-9;
  const PretrainResult r = stage_baseline(pre.params, data.target, c);
  CHECK(r.log.skipped_epochs == 2);
  CHECK(r.params.weight == pre.params.weight);
}

TEST_CASE("MMT+") {
  const SynthOutput data = generate_synthetic(small_synth(5));
  const PretrainResult pre = stage_pretrain(data.source, quick(1));
  SUBCASE("deterministic, finite, joint classifier width") {
    const MmtResult a = stage_mmt_plus(pre.params, data.source, data.target, quick());
    const MmtResult b = stage_mmt_plus(pre.params, data.source, data.target, quick());
    CHECK(a.log.to_jsonl() == b.log.to_jsonl());
    CHECK(model_to_json(a.exported) == model_to_json(b.exported));
    for (const auto& e : a.log.epochs) {
      CHECK(std::isfinite(e.total));
      REQUIRE(e.clusters.has_value());
    }
    const std::size_t width = 8 + *a.log.epochs.back().clusters;
    CHECK(static_cast<std::size_t>(a.state.students[0].classifier.rows()) == width);
    CHECK(a.exported.members.size() == 1);
    for (const auto& queue : a.state.queues) CHECK(queue.size() <= quick().queue_capacity);
  }
  SUBCASE("alpha 1 freezes the teachers") {
    StageConfig c = quick();
    c.alpha = 1.0;
    const MmtResult r = stage_mmt_plus(pre.params, data.source, data.target, c);
    CHECK(r.state.teachers[0].weight != r.state.students[0].weight);
    const MmtResult r2 = stage_mmt_plus(pre.params, data.source, data.target, c);
    CHECK(r.state.teachers[0].weight == r2.state.teachers[0].weight);
  }
  SUBCASE("export average carries both teachers") {
    StageConfig c = quick(1);
    c.export_average = true;
    CHECK(stage_mmt_plus(pre.params, data.source, data.target, c).exported.members.size() == 2);
  }
}

TEST_CASE("relation consistency diagnostic") {
  SynthConfig s = small_synth(6);
  const StageConfig c = quick();
  s.translation_fidelity = 0.0;
  const SynthOutput g0 = generate_synthetic(s);
  s.translation_fidelity = 1.0;
  const SynthOutput g1 = generate_synthetic(s);
  // Source encoder fit on source; target encoder fit on target.
  const PretrainResult enc_s = stage_pretrain(g0.source, quick(0));
  EncoderParams enc_t = enc_s.params;
  calibrate_norm(enc_t, g0.target.features.to_mat(), Domain::Target);
  const double l0 = relation_consistency_check(g0.source, g0.translated, enc_s.params, enc_t, c);
  const double l1 = relation_consistency_check(g1.source, g1.translated, enc_s.params, enc_t, c);
  CHECK(l1 < l0);

  SUBCASE("matched case is the binary entropy level") {
    const double same = relation_consistency_check(g0.source, g0.source, enc_s.params, enc_s.params, c, Domain::Source);
    CHECK(same > 0.0);
    CHECK(same <= std::log(2.0) + 1e-12);
  }
  SUBCASE("misaligned sets") {
    CHECK_THROWS_AS(relation_consistency_check(g0.source, g0.target, enc_s.params, enc_t, c), Error);
  }
}
