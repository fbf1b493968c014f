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
#include "urde/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace urde {

void EncoderParams::validate() const {
  const auto d_o = weight.rows();
  const auto d_i = weight.cols();
  if (bias.size() != d_o) fail(ErrorKind::Shape, "encoder bias size does not match weight rows");
  for (const auto& s : norm) {
    if (s.mean.size() != d_i || s.var.size() != d_i) fail(ErrorKind::Shape, "encoder norm stats size mismatch");
    if ((s.var.array() < kVarianceFloor).any()) fail(ErrorKind::Numeric, "encoder variance below floor");
  }
  if (classifier.rows() > 0 && classifier.cols() != d_o) fail(ErrorKind::Shape, "classifier width mismatch");
  if (!weight.allFinite() || !bias.allFinite() || !classifier.allFinite()) {
    fail(ErrorKind::Numeric, "encoder has non-finite parameters");
  }
}

EncoderParams init_encoder(std::size_t d_in, std::size_t d_out, std::uint64_t seed) {
  if (d_in == 0 || d_out == 0) fail(ErrorKind::Config, "encoder dimensions must be >= 1");
  Rng rng(derive_seed(seed, 0xE4C));
  std::normal_distribution<double> normal(0.0, 0.1 / std::sqrt(static_cast<double>(d_in)));
  EncoderParams p;
  p.weight.resize(d_out, d_in);
  for (Eigen::Index i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = normal(rng);
  p.bias = Vec::Zero(d_out);
  for (auto& s : p.norm) {
    s.mean = Vec::Zero(d_in);
    s.var = Vec::Ones(d_in);
  }
  p.classifier.resize(0, d_out);
  return p;
}

namespace {

void check_inputs(const EncoderParams& params, const Mat& raws, std::span<const Domain> domains) {
  if (static_cast<std::size_t>(raws.cols()) != params.d_in()) {
    fail(ErrorKind::Shape, "encoder input has " + std::to_string(raws.cols()) + " columns, expected " +
                               std::to_string(params.d_in()));
  }
  if (domains.size() != static_cast<std::size_t>(raws.rows())) {
    fail(ErrorKind::Shape, "encoder: one domain tag per row required");
  }
  for (auto d : domains) {
    if (static_cast<std::size_t>(d) >= kNumDomains) fail(ErrorKind::Config, "encoder: unknown domain tag");
  }
}

std::pair<Vec, Vec> column_moments(const Mat& raws, std::span<const std::size_t> rows) {
  const auto d = raws.cols();
  Vec mean = Vec::Zero(d);
  for (auto r : rows) mean += raws.row(static_cast<Eigen::Index>(r)).transpose();
  mean /= static_cast<double>(rows.size());
  Vec var = Vec::Zero(d);
  for (auto r : rows) var += (raws.row(static_cast<Eigen::Index>(r)).transpose() - mean).array().square().matrix();
  var /= static_cast<double>(rows.size());
  return {mean, var};
}

}  // namespace

void calibrate_norm(EncoderParams& params, const Mat& raws, Domain domain) {
  if (raws.rows() == 0) fail(ErrorKind::Config, "calibrate_norm: no rows");
  if (static_cast<std::size_t>(raws.cols()) != params.d_in()) fail(ErrorKind::Shape, "calibrate_norm: width mismatch");
  std::vector<std::size_t> rows(static_cast<std::size_t>(raws.rows()));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  auto [mean, var] = column_moments(raws, rows);
  auto& s = params.stats(domain);
  s.mean = mean;
  s.var = var.cwiseMax(kVarianceFloor);
}

Mat forward(const EncoderParams& params, const Mat& raws, std::span<const Domain> domains, Mat* standardized) {
  check_inputs(params, raws, domains);
  Mat x(raws.rows(), raws.cols());
  for (Eigen::Index i = 0; i < raws.rows(); ++i) {
    const auto& s = params.stats(domains[static_cast<std::size_t>(i)]);
    x.row(i) = ((raws.row(i).transpose() - s.mean).array() / (s.var.array() + kVarianceFloor).sqrt()).transpose();
  }
  Mat out = x * params.weight.transpose();
  out.rowwise() += params.bias.transpose();
  if (standardized) *standardized = std::move(x);
  return out;
}

Mat forward_train(EncoderParams& params, const Mat& raws, std::span<const Domain> domains, Mat* standardized) {
  check_inputs(params, raws, domains);
  for (std::size_t dom = 0; dom < kNumDomains; ++dom) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < domains.size(); ++i)
      if (static_cast<std::size_t>(domains[i]) == dom) rows.push_back(i);
    if (rows.empty()) continue;
    auto [mean, var] = column_moments(raws, rows);
    auto& s = params.norm[dom];
    s.mean = kNormMomentum * s.mean + (1.0 - kNormMomentum) * mean;
    s.var = (kNormMomentum * s.var + (1.0 - kNormMomentum) * var).cwiseMax(kVarianceFloor);
  }
  return forward(static_cast<const EncoderParams&>(params), raws, domains, standardized);
}

FeatureMatrix forward(const EncoderParams& params, const FeatureMatrix& raws, std::span<const Domain> domains) {
  return FeatureMatrix::from_mat(forward(params, raws.to_mat(), domains));
}

AffineGrads backward(const Mat& standardized, const Mat& grad_out) {
  if (standardized.rows() != grad_out.rows()) fail(ErrorKind::Shape, "backward: row mismatch");
  AffineGrads g;
  g.weight = grad_out.transpose() * standardized;
  g.bias = grad_out.colwise().sum().transpose();
  return g;
}

std::vector<std::size_t> pk_sample(std::span<const int> labels, std::size_t p_classes, std::size_t k_per, Rng& rng) {
  if (p_classes == 0 || k_per == 0) fail(ErrorKind::Config, "pk_sample: P and K must be >= 1");
  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= 0) by_label[labels[i]].push_back(i);
  if (by_label.size() < p_classes) {
    fail(ErrorKind::Config, "pk_sample: " + std::to_string(by_label.size()) + " usable labels, need " +
                                std::to_string(p_classes));
  }
  std::vector<int> keys;
  keys.reserve(by_label.size());
  for (const auto& kv : by_label) keys.push_back(kv.first);
  // Partial Fisher-Yates with explicit draws for reproducibility.
  auto draw = [&rng](std::size_t bound) {
    return static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(bound));
  };
  for (std::size_t i = 0; i < p_classes; ++i) std::swap(keys[i], keys[i + draw(keys.size() - i)]);

  std::vector<std::size_t> batch;
  batch.reserve(p_classes * k_per);
  for (std::size_t c = 0; c < p_classes; ++c) {
    auto rows = by_label[keys[c]];
    if (rows.size() >= k_per) {
      for (std::size_t i = 0; i < k_per; ++i) {
        std::swap(rows[i], rows[i + draw(rows.size() - i)]);
        batch.push_back(rows[i]);
      }
    } else {
      for (std::size_t i = 0; i < k_per; ++i) batch.push_back(rows[draw(rows.size())]);
    }
  }
  return batch;
}

EncoderParams ema_update(const EncoderParams& teacher, const EncoderParams& student, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) fail(ErrorKind::Config, "ema_update: alpha outside [0, 1]");
  auto same = [](const auto& a, const auto& b) { return a.rows() == b.rows() && a.cols() == b.cols(); };
  bool ok = same(teacher.weight, student.weight) && same(teacher.bias, student.bias) &&
            same(teacher.classifier, student.classifier);
  for (std::size_t d = 0; d < kNumDomains; ++d) {
    ok = ok && same(teacher.norm[d].mean, student.norm[d].mean) && same(teacher.norm[d].var, student.norm[d].var);
  }
  if (!ok) fail(ErrorKind::Shape, "ema_update: teacher/student shape mismatch");

  const double beta = 1.0 - alpha;
  EncoderParams out;
  out.weight = alpha * teacher.weight + beta * student.weight;
  out.bias = alpha * teacher.bias + beta * student.bias;
  out.classifier = alpha * teacher.classifier + beta * student.classifier;
  for (std::size_t d = 0; d < kNumDomains; ++d) {
    out.norm[d].mean = alpha * teacher.norm[d].mean + beta * student.norm[d].mean;
    out.norm[d].var = alpha * teacher.norm[d].var + beta * student.norm[d].var;
  }
  return out;
}

Mat FeatureQueue::matrix() const {
  Mat m(static_cast<Eigen::Index>(rows_.size()), static_cast<Eigen::Index>(dim_));
  Eigen::Index i = 0;
  for (const auto& r : rows_) m.row(i++) = r.transpose();
  return m;
}

void queue_push(FeatureQueue& queue, const Mat& feats) {
  if (feats.rows() == 0) return;
  if (static_cast<std::size_t>(feats.cols()) != queue.dim_) fail(ErrorKind::Shape, "queue_push: dimension mismatch");
  Mat normalized = feats;
  normalize_rows(normalized, "queue_push");
  for (Eigen::Index i = 0; i < normalized.rows(); ++i) {
    queue.rows_.push_back(normalized.row(i).transpose());
    if (queue.rows_.size() > queue.capacity_) queue.rows_.pop_front();
  }
}

void adam_step(std::span<const ParamSlot> params, AdamState& state) {
  if (!(state.lr > 0.0)) fail(ErrorKind::Config, "adam_step: lr must be > 0");
  for (const auto& p : params) {
    if (p.value->rows() != p.grad->rows() || p.value->cols() != p.grad->cols()) {
      fail(ErrorKind::Shape, "adam_step: gradient shape mismatch for `" + p.name + "`");
    }
    if (!p.grad->allFinite()) fail(ErrorKind::Numeric, "adam_step: non-finite gradient for `" + p.name + "`");
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& p : params) {
    auto& mom = state.moments[p.name];
    if (mom.m.rows() != p.value->rows() || mom.m.cols() != p.value->cols()) {
      mom.m = Mat::Zero(p.value->rows(), p.value->cols());
      mom.v = Mat::Zero(p.value->rows(), p.value->cols());
    }
    Mat& value = *p.value;
    const Mat& g = *p.grad;
    value *= (1.0 - state.lr * state.weight_decay);
    mom.m = state.beta1 * mom.m + (1.0 - state.beta1) * g;
    mom.v = state.beta2 * mom.v + (1.0 - state.beta2) * g.cwiseProduct(g);
    value.array() -= state.lr * (mom.m.array() / bc1) / ((mom.v.array() / bc2).sqrt() + state.eps);
  }
}

void adam_step(EncoderParams& params, const AffineGrads& grads, const Mat& classifier_grad, AdamState& state) {
  Mat bias = params.bias.transpose();
  const Mat bias_grad = grads.bias.transpose();
  std::vector<ParamSlot> slots = {{"weight", &params.weight, &grads.weight}, {"bias", &bias, &bias_grad}};
  if (params.classifier.rows() > 0) slots.push_back({"classifier", &params.classifier, &classifier_grad});
  adam_step(slots, state);
  params.bias = bias.transpose();
}

Mat embed_mat(const EncoderParams& params, const Dataset& ds) {
  const auto domains = ds.domains();
  Mat f = forward(params, ds.features.to_mat(), domains);
  normalize_rows(f, "embed");
  return f;
}

FeatureMatrix embed(const Model& model, const Dataset& ds) {
  if (model.members.empty()) fail(ErrorKind::Config, "embed: model has no members");
  Mat acc = embed_mat(model.members.front(), ds);
  for (std::size_t m = 1; m < model.members.size(); ++m) acc += embed_mat(model.members[m], ds);
  if (model.members.size() > 1) normalize_rows(acc, "embed");
  return FeatureMatrix::from_mat(acc);
}

// ---------------------------------------------------------------------------
// Model files (JSON)

namespace {

using nlohmann::json;

json mat_json(const Mat& m) { return json(std::vector<double>(m.data(), m.data() + m.size())); }
json vec_json(const Vec& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

Mat mat_from(const json& j, Eigen::Index rows, Eigen::Index cols, const char* what) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != static_cast<std::size_t>(rows * cols)) {
    fail(ErrorKind::Format, std::string("model file: `") + what + "` has wrong size");
  }
  Mat m(rows, cols);
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

Vec vec_from(const json& j, Eigen::Index n, const char* what) {
  Mat m = mat_from(j, n, 1, what);
  return Vec(m.col(0));
}

}  // namespace

std::string model_to_json(const Model& model) {
  json members = json::array();
  for (const auto& p : model.members) {
    p.validate();
    json norm = json::array();
    for (const auto& s : p.norm) norm.push_back({{"mean", vec_json(s.mean)}, {"var", vec_json(s.var)}});
    members.push_back({{"d_in", p.d_in()},
                       {"d_out", p.d_out()},
                       {"weight", mat_json(p.weight)},
                       {"bias", vec_json(p.bias)},
                       {"norm", norm},
                       {"classes", p.classifier.rows()},
                       {"classifier", mat_json(p.classifier)}});
  }
  json root = {{"format", "urde-model"}, {"version", 1}, {"members", members}};
  return root.dump(1);
}

Model model_from_json(const std::string& text) {
  Model model;
  try {
    const json root = json::parse(text);
    if (root.value("format", "") != "urde-model") fail(ErrorKind::Format, "not a urde model file");
    if (root.value("version", 0) != 1) fail(ErrorKind::Format, "unsupported model file version");
    for (const auto& m : root.at("members")) {
      EncoderParams p;
      const auto d_in = m.at("d_in").get<Eigen::Index>();
      const auto d_out = m.at("d_out").get<Eigen::Index>();
      const auto classes = m.at("classes").get<Eigen::Index>();
      p.weight = mat_from(m.at("weight"), d_out, d_in, "weight");
      p.bias = vec_from(m.at("bias"), d_out, "bias");
      const auto& norm = m.at("norm");
      if (norm.size() != kNumDomains) fail(ErrorKind::Format, "model file: expected one norm entry per domain");
      for (std::size_t d = 0; d < kNumDomains; ++d) {
        p.norm[d].mean = vec_from(norm[d].at("mean"), d_in, "norm.mean");
        p.norm[d].var = vec_from(norm[d].at("var"), d_in, "norm.var");
      }
      p.classifier = mat_from(m.at("classifier"), classes, d_out, "classifier");
      p.validate();
      model.members.push_back(std::move(p));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("model file: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Format) throw;
    fail(ErrorKind::Format, std::string("model file: ") + e.what());
  }
  if (model.members.empty()) fail(ErrorKind::Format, "model file has no members");
  return model;
}

void save_model(const std::filesystem::path& path, const Model& model) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Format, "cannot open " + path.string() + " for writing");
  out << model_to_json(model) << '\n';
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Format, "cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return model_from_json(buf.str());
}

}  // namespace urde
