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
#include "urde/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace urde {

namespace {

void require_finite(std::span<const double> v, const char* what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) fail(ErrorKind::Numeric, std::string(what) + ": non-finite entry " + std::to_string(i));
  }
}

Mat as_row(const Vec& v) { return Mat(v.transpose()); }

Vec to_vec(std::span<const double> v) {
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

/// -log softmax(z)[label], accurate when the target dominates.
double nll(std::span<const double> z, std::size_t label) {
  std::size_t top = 0;
  for (std::size_t j = 1; j < z.size(); ++j)
    if (z[j] > z[top]) top = j;
  double rest = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j)
    if (j != top) rest += std::exp(z[j] - z[top]);
  return (z[top] - z[label]) + std::log1p(rest);
}

}  // namespace

Vec softmax(std::span<const double> logits) {
  Vec z = to_vec(logits);
  const double m = z.maxCoeff();
  Vec e = (z.array() - m).exp();
  return e / e.sum();
}

Vec log_softmax(std::span<const double> logits) {
  Vec z = to_vec(logits);
  const double m = z.maxCoeff();
  const double lse = m + std::log((z.array() - m).exp().sum());
  return z.array() - lse;
}

LossOut cross_entropy_cls(std::span<const double> logits, std::size_t label) {
  if (logits.empty()) fail(ErrorKind::Config, "cross_entropy_cls: empty logits");
  if (label >= logits.size()) {
    fail(ErrorKind::Config, "cross_entropy_cls: label " + std::to_string(label) + " out of range for " +
                                std::to_string(logits.size()) + " classes");
  }
  require_finite(logits, "cross_entropy_cls logits");
  LossOut out;
  out.value = nll(logits, label);
  Vec g = softmax(logits);
  g[static_cast<Eigen::Index>(label)] -= 1.0;
  out.grads["logits"] = as_row(g);
  return out;
}

double softmax_triplet_T(double d_p, double d_n) {
  if (!std::isfinite(d_p) || !std::isfinite(d_n)) fail(ErrorKind::Numeric, "softmax_triplet_T: non-finite distance");
  return sigmoid(d_n - d_p);
}

std::vector<TripletTriple> mine_hardest(const Mat& batch, std::span<const int> labels) {
  const auto n = static_cast<std::size_t>(batch.rows());
  if (labels.size() != n) fail(ErrorKind::Shape, "mine_hardest: label count does not match batch rows");
  std::vector<TripletTriple> out(n);
  for (std::size_t a = 0; a < n; ++a) {
    TripletTriple t;
    t.anchor = a;
    bool have_pos = false, have_neg = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == a) continue;
      const double d = (batch.row(a) - batch.row(j)).norm();
      if (labels[j] == labels[a]) {
        if (!have_pos || d > t.d_p) {
          t.d_p = d;
          t.hardest_pos = j;
          have_pos = true;
        }
      } else if (!have_neg || d < t.d_n) {
        t.d_n = d;
        t.hardest_neg = j;
        have_neg = true;
      }
    }
    if (!have_pos || !have_neg) {
      fail(ErrorKind::Mining, std::string("anchor with label ") + std::to_string(labels[a]) + " has no " +
                                  (have_pos ? "negative" : "positive") + " in the batch");
    }
    out[a] = t;
  }
  return out;
}

LossOut softmax_triplet_loss(const Mat& batch, std::span<const int> labels) {
  if (!batch.allFinite()) fail(ErrorKind::Numeric, "softmax_triplet_loss: non-finite features");
  const auto triples = mine_hardest(batch, labels);
  const double inv_n = 1.0 / static_cast<double>(triples.size());
  LossOut out;
  Mat g = Mat::Zero(batch.rows(), batch.cols());
  for (const auto& t : triples) {
    // -log T = softplus(d_p - d_n)
    out.value += softplus(t.d_p - t.d_n) * inv_n;
    const double w = sigmoid(t.d_p - t.d_n) * inv_n;
    const auto a = static_cast<Eigen::Index>(t.anchor);
    const auto p = static_cast<Eigen::Index>(t.hardest_pos);
    const auto ng = static_cast<Eigen::Index>(t.hardest_neg);
    if (t.d_p > 0.0) {
      const Eigen::RowVectorXd u = (batch.row(a) - batch.row(p)) / t.d_p;
      g.row(a) += w * u;
      g.row(p) -= w * u;
    }
    if (t.d_n > 0.0) {
      const Eigen::RowVectorXd u = (batch.row(a) - batch.row(ng)) / t.d_n;
      g.row(a) -= w * u;
      g.row(ng) += w * u;
    }
  }
  out.grads["batch"] = std::move(g);
  return out;
}

LossOut relation_consistency(std::span<const double> t_translated, std::span<const double> t_source) {
  if (t_translated.size() != t_source.size()) {
    fail(ErrorKind::Shape, "relation_consistency: length mismatch");
  }
  if (t_translated.empty()) fail(ErrorKind::Config, "relation_consistency: empty input");
  require_finite(t_translated, "relation_consistency T_translated");
  require_finite(t_source, "relation_consistency T_source");
  LossOut out;
  const std::size_t n = t_translated.size();
  Vec g = Vec::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const double q = t_source[i];
    double p = t_translated[i];
    if (p < 0.0 || p > 1.0 || q < 0.0 || q > 1.0) {
      fail(ErrorKind::Numeric, "relation_consistency: relation value outside [0, 1] at " + std::to_string(i));
    }
    bool clamped = false;
    if (p < kBceClamp) {
      p = kBceClamp;
      clamped = true;
    } else if (p > 1.0 - kBceClamp) {
      p = 1.0 - kBceClamp;
      clamped = true;
    }
    out.clamped += clamped ? 1 : 0;
    out.value += -(q * std::log(p) + (1.0 - q) * std::log1p(-p)) / static_cast<double>(n);
    if (!clamped) g[static_cast<Eigen::Index>(i)] = (p - q) / (p * (1.0 - p)) / static_cast<double>(n);
  }
  out.grads["T_translated"] = as_row(g);
  return out;
}

LossOut soft_ce_mutual(std::span<const double> student_logits, std::span<const double> teacher_logits) {
  if (student_logits.size() != teacher_logits.size()) fail(ErrorKind::Shape, "soft_ce_mutual: length mismatch");
  if (student_logits.empty()) fail(ErrorKind::Config, "soft_ce_mutual: empty logits");
  require_finite(student_logits, "soft_ce_mutual student");
  require_finite(teacher_logits, "soft_ce_mutual teacher");
  const Vec target = softmax(teacher_logits);
  const Vec log_p = log_softmax(student_logits);
  LossOut out;
  out.value = -target.dot(log_p);
  out.grads["student_logits"] = as_row(Vec(log_p.array().exp()) - target);
  return out;
}

LossOut moco_loss(std::span<const double> query, std::span<const double> key_pos, const Mat& queue, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) fail(ErrorKind::Config, "moco_loss: tau must be > 0");
  if (query.size() != key_pos.size()) fail(ErrorKind::Shape, "moco_loss: query/key dimension mismatch");
  if (queue.rows() > 0 && static_cast<std::size_t>(queue.cols()) != query.size()) {
    fail(ErrorKind::Shape, "moco_loss: queue dimension mismatch");
  }
  require_finite(query, "moco_loss query");
  require_finite(key_pos, "moco_loss key");

  const Vec q_raw = to_vec(query);
  const double q_norm = q_raw.norm();
  const Vec k_raw = to_vec(key_pos);
  const double k_norm = k_raw.norm();
  if (!(q_norm > 0.0) || !(k_norm > 0.0)) fail(ErrorKind::Numeric, "moco_loss: zero-norm vector");
  const Vec q = q_raw / q_norm;
  const Vec k = k_raw / k_norm;

  Mat negs = queue;
  if (negs.rows() > 0) normalize_rows(negs, "moco_loss queue");

  const Eigen::Index kq = negs.rows();
  Vec logits(kq + 1);
  logits[0] = q.dot(k) / tau;
  if (kq > 0) logits.tail(kq) = negs * q / tau;

  LossOut out;
  out.value = nll(as_span(logits), 0);
  Vec p = softmax(as_span(logits));
  // d/dq_hat of the loss
  Vec g_hat = (p[0] - 1.0) * k;
  if (kq > 0) g_hat += negs.transpose() * p.tail(kq);
  g_hat /= tau;
  // Back through q_hat = q / |q|.
  const Vec g = (g_hat - q * q.dot(g_hat)) / q_norm;
  out.grads["query"] = as_row(g);
  return out;
}

LossOut margin_classification(std::span<const double> feature, const Mat& class_weights, std::size_t label,
                              const MarginParams& params) {
  const auto classes = static_cast<std::size_t>(class_weights.rows());
  if (classes == 0) fail(ErrorKind::Config, "margin_classification: no classes");
  if (label >= classes) fail(ErrorKind::Config, "margin_classification: label out of range");
  if (static_cast<std::size_t>(class_weights.cols()) != feature.size()) {
    fail(ErrorKind::Shape, "margin_classification: weight/feature dimension mismatch");
  }
  if (!(params.margin >= 0.0) || !(params.scale > 0.0)) {
    fail(ErrorKind::Config, "margin_classification: need margin >= 0 and scale > 0");
  }
  require_finite(feature, "margin_classification feature");

  const Vec f_raw = to_vec(feature);
  const double f_norm = f_raw.norm();
  if (!(f_norm > 0.0)) fail(ErrorKind::Numeric, "margin_classification: zero-norm feature");
  const Vec f = f_raw / f_norm;

  Vec w_norm(class_weights.rows());
  for (Eigen::Index j = 0; j < class_weights.rows(); ++j) {
    w_norm[j] = class_weights.row(j).norm();
    if (!(w_norm[j] > 0.0)) {
      fail(ErrorKind::Numeric, "margin_classification: zero-norm class weight " + std::to_string(j));
    }
  }
  const Mat w = class_weights.array().colwise() / w_norm.array();
  const Vec cos = w * f;

  const auto y = static_cast<Eigen::Index>(label);
  double target = 0.0;
  double d_target = 1.0;  // d target_logit / d cos_y
  if (params.margin == 0.0) {
    target = cos[y];
  } else if (params.mode == MarginMode::CosFace) {
    target = cos[y] - params.margin;
  } else {
    const double c = std::clamp(cos[y], -1.0, 1.0);
    const double theta = std::acos(c);
    const double limit = std::numbers::pi - kArcfaceAngleGuard;
    if (theta + params.margin > limit) {
      target = std::cos(limit);
      d_target = 0.0;
    } else {
      target = std::cos(theta + params.margin);
      const double s = std::sin(theta);
      d_target = s > 1e-12 ? std::sin(theta + params.margin) / s : 0.0;
    }
  }

  Vec logits = params.scale * cos;
  logits[y] = params.scale * target;

  LossOut out = cross_entropy_cls(as_span(logits), label);
  Vec g_logits = out.grads["logits"].transpose();
  // d loss / d cos_j
  Vec g_cos = params.scale * g_logits;
  g_cos[y] *= d_target;

  Vec g_f_hat = w.transpose() * g_cos;
  Vec g_feature = (g_f_hat - f * f.dot(g_f_hat)) / f_norm;

  Mat g_w(class_weights.rows(), class_weights.cols());
  for (Eigen::Index j = 0; j < class_weights.rows(); ++j) {
    // d cos_j / d w_j = (f - cos_j w_hat_j) / |w_j|
    g_w.row(j) = g_cos[j] * (f.transpose() - cos[j] * w.row(j)) / w_norm[j];
  }
  out.grads.clear();
  out.grads["feature"] = as_row(g_feature);
  out.grads["class_weights"] = std::move(g_w);
  return out;
}

double mmt_plus_total(const MmtParts& parts, double lambda_soft, double lambda_moco) {
  if (!std::isfinite(parts.soft) || !std::isfinite(parts.hard) || !std::isfinite(parts.moco)) {
    fail(ErrorKind::Numeric, "mmt_plus_total: non-finite loss part");
  }
  if (!(lambda_soft >= 0.0 && lambda_soft <= 1.0)) fail(ErrorKind::Config, "mmt_plus_total: lambda_soft outside [0, 1]");
  if (!(lambda_moco >= 0.0)) fail(ErrorKind::Config, "mmt_plus_total: lambda_moco must be >= 0");
  return lambda_soft * parts.soft + (1.0 - lambda_soft) * parts.hard + lambda_moco * parts.moco;
}

}  // namespace urde
