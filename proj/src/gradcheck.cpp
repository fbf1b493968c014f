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
#include "urde/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>

#include "json.hpp"
#include "urde/common.hpp"
#include "urde/encoder.hpp"
#include "urde/losses.hpp"

namespace urde {

namespace {

constexpr double kStep = 1e-6;

Mat gaussian(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Central differences of f with respect to every entry of x.
Mat numeric_grad(Mat& x, const std::function<double()>& f) {
  Mat g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + kStep;
    const double up = f();
    x.data()[i] = keep - kStep;
    const double down = f();
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2.0 * kStep);
  }
  return g;
}

double rel_error(const Mat& analytic, const Mat& numeric) {
  const double denom = std::max({analytic.norm(), numeric.norm(), 1e-8});
  return (analytic - numeric).norm() / denom;
}

std::span<const double> flat(const Mat& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }

using Trial = std::function<double(Rng&)>;

double trial_cross_entropy(Rng& rng) {
  const auto classes = static_cast<Eigen::Index>(2 + rng() % 9);
  Mat z = gaussian(1, classes, rng, 2.0);
  const auto label = static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(classes));
  const Mat a = cross_entropy_cls(flat(z), label).grad("logits");
  return rel_error(a, numeric_grad(z, [&] { return cross_entropy_cls(flat(z), label).value; }));
}

double trial_triplet(Rng& rng) {
  const std::size_t p = 2 + rng() % 3, k = 2 + rng() % 2;
  std::vector<int> labels;
  for (std::size_t c = 0; c < p; ++c)
    for (std::size_t j = 0; j < k; ++j) labels.push_back(static_cast<int>(c));
  Mat x = gaussian(static_cast<Eigen::Index>(labels.size()), 6, rng);
  const Mat a = softmax_triplet_loss(x, labels).grad("batch");
  return rel_error(a, numeric_grad(x, [&] { return softmax_triplet_loss(x, labels).value; }));
}

double trial_relation(Rng& rng) {
  const auto n = static_cast<Eigen::Index>(1 + rng() % 16);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  Mat t(1, n), s(1, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    t(0, i) = u(rng);
    s(0, i) = u(rng);
  }
  const Mat a = relation_consistency(flat(t), flat(s)).grad("T_translated");
  return rel_error(a, numeric_grad(t, [&] { return relation_consistency(flat(t), flat(s)).value; }));
}

double trial_soft_ce(Rng& rng) {
  const auto classes = static_cast<Eigen::Index>(2 + rng() % 9);
  Mat z = gaussian(1, classes, rng, 2.0);
  const Mat teacher = gaussian(1, classes, rng, 2.0);
  const Mat a = soft_ce_mutual(flat(z), flat(teacher)).grad("student_logits");
  return rel_error(a, numeric_grad(z, [&] { return soft_ce_mutual(flat(z), flat(teacher)).value; }));
}

double trial_moco(Rng& rng) {
  const auto d = static_cast<Eigen::Index>(3 + rng() % 6);
  Mat q = gaussian(1, d, rng);
  const Mat k = gaussian(1, d, rng);
  Mat queue = gaussian(static_cast<Eigen::Index>(rng() % 12), d, rng);
  if (queue.rows() > 0) normalize_rows(queue, "gradcheck queue");
  const Mat a = moco_loss(flat(q), flat(k), queue).grad("query");
  return rel_error(a, numeric_grad(q, [&] { return moco_loss(flat(q), flat(k), queue).value; }));
}

double trial_margin(Rng& rng, MarginMode mode) {
  const auto d = static_cast<Eigen::Index>(3 + rng() % 6);
  const auto classes = static_cast<Eigen::Index>(2 + rng() % 6);
  Mat f = gaussian(1, d, rng);
  Mat w = gaussian(classes, d, rng);
  const auto label = static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(classes));
  const MarginParams mp{mode, 0.25, 16.0};
  const LossOut out = margin_classification(flat(f), w, label, mp);
  const double ef = rel_error(out.grad("feature"),
                              numeric_grad(f, [&] { return margin_classification(flat(f), w, label, mp).value; }));
  const double ew = rel_error(out.grad("class_weights"),
                              numeric_grad(w, [&] { return margin_classification(flat(f), w, label, mp).value; }));
  return std::max(ef, ew);
}

double trial_affine(Rng& rng) {
  const std::size_t d_in = 3 + rng() % 5, d_out = 2 + rng() % 4;
  EncoderParams p = init_encoder(d_in, d_out, rng());
  p.bias = gaussian(static_cast<Eigen::Index>(d_out), 1, rng).col(0);
  const Mat x = gaussian(5, static_cast<Eigen::Index>(d_in), rng);
  const std::vector<Domain> doms(5, Domain::Source);
  const std::vector<int> labels = {0, 0, 1, 1, 0};
  p.classifier = gaussian(2, static_cast<Eigen::Index>(d_out), rng);
  auto loss = [&](Mat* g_out) {
    Mat s;
    const Mat f = forward(p, x, doms, &s);
    const Mat logits = f * p.classifier.transpose();
    double v = 0.0;
    if (g_out) *g_out = Mat::Zero(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const LossOut l = cross_entropy_cls(row_span(logits, i), static_cast<std::size_t>(labels[i]));
      v += l.value;
      if (g_out) g_out->row(i) = l.grad("logits");
    }
    return v;
  };
  Mat g_logits;
  loss(&g_logits);
  Mat s;
  forward(p, x, doms, &s);
  const AffineGrads g = backward(s, g_logits * p.classifier);
  const double ew = rel_error(g.weight, numeric_grad(p.weight, [&] { return loss(nullptr); }));
  Mat b = p.bias.transpose();
  const Mat nb = numeric_grad(b, [&] {
    p.bias = b.transpose();
    return loss(nullptr);
  });
  p.bias = b.transpose();
  const double eb = rel_error(g.bias.transpose(), nb);
  return std::max(ew, eb);
}

}  // namespace

GradcheckReport run_gradcheck(std::uint64_t seed, std::size_t trials) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::pair<std::string, Trial>> suite = {
      {"cross_entropy", trial_cross_entropy},
      {"softmax_triplet", trial_triplet},
      {"relation_consistency", trial_relation},
      {"soft_ce_mutual", trial_soft_ce},
      {"moco", trial_moco},
      {"arcface", [](Rng& r) { return trial_margin(r, MarginMode::ArcFace); }},
      {"cosface", [](Rng& r) { return trial_margin(r, MarginMode::CosFace); }},
      {"encoder_affine", trial_affine},
  };
  GradcheckReport report;
  for (std::size_t k = 0; k < suite.size(); ++k) {
    Rng rng(derive_seed(seed, 0x6C00 + k));
    KernelCheck kc{suite[k].first, trials, 0.0};
    for (std::size_t t = 0; t < trials; ++t) kc.max_rel_error = std::max(kc.max_rel_error, suite[k].second(rng));
    report.max_rel_error = std::max(report.max_rel_error, kc.max_rel_error);
    report.kernels.push_back(kc);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

std::string gradcheck_to_json(const GradcheckReport& report) {
  nlohmann::json j;
  j["max_rel_error"] = report.max_rel_error;
  j["passed"] = report.passed();
  for (const auto& k : report.kernels) {
    j["kernels"].push_back({{"kernel", k.kernel}, {"trials", k.trials}, {"max_rel_error", k.max_rel_error}});
  }
  return j.dump();
}

}  // namespace urde
