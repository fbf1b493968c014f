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
#include "urde/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <map>
#include <set>

#include "json.hpp"

namespace urde {

// ---------------------------------------------------------------------------
// Configuration

void StageConfig::validate() const {
  auto bad = [](const char* field, const std::string& why) {
    fail(ErrorKind::Config, std::string("stage config field `") + field + "`: " + why);
  };
  if (p_classes == 0) bad("p_classes", "must be >= 1");
  if (k_per < 2) bad("k_per", "must be >= 2 so every anchor has a positive");
  if (!(lr > 0.0)) bad("lr", "must be > 0");
  if (!(weight_decay >= 0.0)) bad("weight_decay", "must be >= 0");
  if (!(lambda_soft >= 0.0 && lambda_soft <= 1.0)) bad("lambda_soft", "must lie in [0, 1]");
  if (!(lambda_moco >= 0.0)) bad("lambda_moco", "must be >= 0");
  if (!(alpha >= 0.0 && alpha <= 1.0)) bad("alpha", "must lie in [0, 1]");
  if (!(tau > 0.0)) bad("tau", "must be > 0");
  if (queue_capacity == 0) bad("queue_capacity", "must be >= 1");
  if (cluster.k == 0) bad("k", "must be >= 1");
  if (!(cluster.eps > 0.0)) bad("eps", "must be > 0");
  if (cluster.min_pts == 0) bad("min_pts", "must be >= 1");
  if (!(margin.margin >= 0.0)) bad("margin", "must be >= 0");
  if (!(margin.scale > 0.0)) bad("scale", "must be > 0");
  if (!(peer_noise >= 0.0)) bad("peer_noise", "must be >= 0");
  if (eval_top == 0) bad("top", "must be >= 1");
}

double StageConfig::lr_at(std::size_t epoch) const {
  if (schedule == LrSchedule::Constant) return lr;
  // Decay by 10x at 40/120 and 70/120 of the run.
  const double frac = static_cast<double>(epoch) / static_cast<double>(std::max<std::size_t>(epochs, 1));
  double out = lr;
  if (frac >= 40.0 / 120.0) out *= 0.1;
  if (frac >= 70.0 / 120.0) out *= 0.1;
  return out;
}

const std::vector<std::string>& stage_config_keys() {
  static const std::vector<std::string> keys = {
      "epochs", "iters_per_epoch", "p_classes", "k_per", "lr", "weight_decay", "lambda_soft", "lambda_moco",
      "alpha", "tau", "queue_capacity", "k", "eps", "min_pts", "cluster_blended", "cluster_k2",
      "cluster_lambda", "seed", "loss", "margin", "scale", "lr_schedule", "feature_dim", "peer_noise",
      "joint_source", "export_average", "top"};
  return keys;
}

StageConfig stage_config_from(const KeyValueConfig& kv) {
  StageConfig c;
  auto count = [&](const char* key, std::size_t fallback) {
    const long long v = kv.get_int(key, static_cast<long long>(fallback));
    if (v < 0) fail(ErrorKind::Config, std::string("stage config field `") + key + "`: must be >= 0");
    return static_cast<std::size_t>(v);
  };
  c.epochs = count("epochs", c.epochs);
  c.iters_per_epoch = count("iters_per_epoch", c.iters_per_epoch);
  c.p_classes = count("p_classes", c.p_classes);
  c.k_per = count("k_per", c.k_per);
  c.lr = kv.get_double("lr", c.lr);
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.lambda_soft = kv.get_double("lambda_soft", c.lambda_soft);
  c.lambda_moco = kv.get_double("lambda_moco", c.lambda_moco);
  c.alpha = kv.get_double("alpha", c.alpha);
  c.tau = kv.get_double("tau", c.tau);
  c.queue_capacity = count("queue_capacity", c.queue_capacity);
  c.cluster.k = count("k", c.cluster.k);
  c.cluster.eps = kv.get_double("eps", c.cluster.eps);
  c.cluster.min_pts = count("min_pts", c.cluster.min_pts);
  c.cluster.blended = kv.get_bool("cluster_blended", c.cluster.blended);
  c.cluster.k2 = count("cluster_k2", c.cluster.k2);
  c.cluster.lambda = kv.get_double("cluster_lambda", c.cluster.lambda);
  c.seed = count("seed", 0);
  const std::string loss = kv.get_string("loss", "ce");
  if (loss == "ce") {
    c.loss = ClassifierLoss::PlainCE;
  } else if (loss == "arcface") {
    c.loss = ClassifierLoss::ArcFace;
    c.margin.mode = MarginMode::ArcFace;
  } else if (loss == "cosface") {
    c.loss = ClassifierLoss::CosFace;
    c.margin.mode = MarginMode::CosFace;
  } else {
    fail(ErrorKind::Config, "stage config field `loss`: expected ce, arcface or cosface");
  }
  c.margin.margin = kv.get_double("margin", c.margin.margin);
  c.margin.scale = kv.get_double("scale", c.margin.scale);
  const std::string sched = kv.get_string("lr_schedule", "constant");
  if (sched == "constant") {
    c.schedule = LrSchedule::Constant;
  } else if (sched == "step") {
    c.schedule = LrSchedule::Step;
  } else {
    fail(ErrorKind::Config, "stage config field `lr_schedule`: expected constant or step");
  }
  c.feature_dim = count("feature_dim", c.feature_dim);
  c.peer_noise = kv.get_double("peer_noise", c.peer_noise);
  c.joint_source = kv.get_bool("joint_source", c.joint_source);
  c.export_average = kv.get_bool("export_average", c.export_average);
  c.eval_top = count("top", c.eval_top);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Run log

std::string RunLog::to_jsonl() const {
  using nlohmann::json;
  auto opt = [](const auto& o) -> json { return o ? json(*o) : json(nullptr); };
  std::string out;
  for (const auto& r : epochs) {
    json j;
    j["stage"] = stage;
    j["epoch"] = r.epoch;
    j["skipped"] = r.skipped;
    j["loss"] = {{"cls", r.cls}, {"tri", r.tri}, {"soft", r.soft}, {"hard", r.hard}, {"moco", r.moco},
                 {"total", r.total}};
    j["clusters"] = opt(r.clusters);
    j["outliers"] = opt(r.outliers);
    j["purity"] = opt(r.purity);
    j["val_mAP"] = opt(r.val_map);
    j["val_top1"] = opt(r.val_top1);
    out += j.dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shared helpers

Model single(const EncoderParams& p) { return Model{{p}}; }

EvalReport evaluate_model(const Model& model, const QueryGallery& split, std::size_t top) {
  const FeatureMatrix q = embed(model, split.query);
  const FeatureMatrix g = embed(model, split.gallery);
  return evaluate(query_gallery_euclidean(q, g), split.query.meta, split.gallery.meta, top);
}

namespace {

using Clock = std::chrono::steady_clock;

void attach_validation(EpochRecord& rec, const Model& model, const QueryGallery* val, std::size_t top) {
  if (!val) return;
  const EvalReport r = evaluate_model(model, *val, top);
  rec.val_map = r.mAP;
  rec.val_top1 = r.cmc.empty() ? 0.0 : r.cmc.front();
}

/// Normalized per-class mean of eval-mode features; classes are [0, P).
Mat class_centroids(const Mat& feats, std::span<const int> labels, std::size_t classes) {
  Mat c = Mat::Zero(static_cast<Eigen::Index>(classes), feats.cols());
  std::vector<std::size_t> counts(classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    c.row(labels[i]) += feats.row(static_cast<Eigen::Index>(i));
    ++counts[static_cast<std::size_t>(labels[i])];
  }
  for (std::size_t k = 0; k < classes; ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    const double norm = c.row(r).norm();
    if (counts[k] == 0 || !(norm > 0.0)) {
      c.row(r).setZero();
      c(r, r % c.cols()) = 1.0;
    } else {
      c.row(r) /= norm;
    }
  }
  return c;
}

struct Batch {
  Mat raws;
  std::vector<Domain> domains;
  std::vector<int> labels;
};

Batch gather(const Mat& raws, const std::vector<Domain>& domains, std::span<const int> labels,
             std::span<const std::size_t> rows) {
  Batch b;
  b.raws.resize(static_cast<Eigen::Index>(rows.size()), raws.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    b.raws.row(static_cast<Eigen::Index>(i)) = raws.row(static_cast<Eigen::Index>(rows[i]));
    b.domains.push_back(domains[rows[i]]);
    b.labels.push_back(labels[rows[i]]);
  }
  return b;
}

/// Classification loss over a batch (mean over rows). Accumulates into the
/// feature and classifier gradients with the given weight.
double classification_loss(const Mat& feats, const Mat& classifier, std::span<const int> labels,
                           const StageConfig& cfg, double weight, Mat& g_feats, Mat& g_classifier) {
  const double inv = 1.0 / static_cast<double>(feats.rows());
  double value = 0.0;
  if (cfg.loss == ClassifierLoss::PlainCE) {
    const Mat logits = feats * classifier.transpose();
    Mat g_logits(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const LossOut l = cross_entropy_cls(row_span(logits, i), static_cast<std::size_t>(labels[i]));
      value += l.value * inv;
      g_logits.row(i) = l.grad("logits") * (weight * inv);
    }
    g_feats += g_logits * classifier;
    g_classifier += g_logits.transpose() * feats;
  } else {
    for (Eigen::Index i = 0; i < feats.rows(); ++i) {
      const LossOut l =
          margin_classification(row_span(feats, i), classifier, static_cast<std::size_t>(labels[i]), cfg.margin);
      value += l.value * inv;
      g_feats.row(i) += l.grad("feature") * (weight * inv);
      g_classifier += l.grad("class_weights") * (weight * inv);
    }
  }
  return value;
}

void require_finite_loss(double v, const char* stage, std::size_t epoch, std::size_t iter) {
  if (!std::isfinite(v)) {
    fail(ErrorKind::Divergence, std::string(stage) + ": non-finite loss at epoch " + std::to_string(epoch) +
                                    ", iteration " + std::to_string(iter));
  }
}

std::size_t resolve_dim(const StageConfig& cfg, std::size_t d_in) { return cfg.feature_dim ? cfg.feature_dim : d_in; }

/// Number of distinct non-negative labels.
std::size_t count_classes(std::span<const int> labels) {
  std::set<int> s;
  for (int l : labels)
    if (l >= 0) s.insert(l);
  return s.size();
}

/// One supervised step (classification + softmax-triplet) on a labeled batch.
std::pair<double, double> supervised_step(EncoderParams& params, AdamState& adam, const Batch& b,
                                          const StageConfig& cfg) {
  Mat standardized;
  const Mat feats = forward_train(params, b.raws, b.domains, &standardized);
  Mat g_feats = Mat::Zero(feats.rows(), feats.cols());
  Mat g_cls = Mat::Zero(params.classifier.rows(), params.classifier.cols());
  const double cls = classification_loss(feats, params.classifier, b.labels, cfg, 1.0, g_feats, g_cls);
  const LossOut tri = softmax_triplet_loss(feats, b.labels);
  g_feats += tri.grad("batch");
  const AffineGrads g = backward(standardized, g_feats);
  adam_step(params, g, g_cls, adam);
  return {cls, tri.value};
}

}  // namespace

// ---------------------------------------------------------------------------
// Stage: supervised pre-training

PretrainResult stage_pretrain(const Dataset& train, const StageConfig& cfg, const QueryGallery* val) {
  cfg.validate();
  train.validate();
  const auto t0 = Clock::now();
  const std::vector<int> labels = train.identities();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) fail(ErrorKind::Config, "stage_pretrain: row " + std::to_string(i) + " has no identity");
  }
  const std::size_t classes = count_classes(labels);
  if (classes < cfg.p_classes) {
    fail(ErrorKind::Config, "stage_pretrain: " + std::to_string(classes) + " classes, fewer than p_classes = " +
                                std::to_string(cfg.p_classes));
  }
  // Dense class ids.
  std::map<int, int> dense;
  for (int l : labels) dense.emplace(l, 0);
  int next = 0;
  for (auto& kv : dense) kv.second = next++;
  std::vector<int> y(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) y[i] = dense[labels[i]];

  const Mat raws = train.features.to_mat();
  const std::vector<Domain> domains(train.size(), Domain::Source);

  PretrainResult res;
  res.log.stage = "pretrain";
  EncoderParams& p = res.params;
  p = init_encoder(train.dim(), resolve_dim(cfg, train.dim()), cfg.seed);
  calibrate_norm(p, raws, Domain::Source);
  p.classifier = class_centroids(forward(p, raws, domains), y, classes);

  AdamState adam;
  adam.weight_decay = cfg.weight_decay;
  Rng rng(derive_seed(cfg.seed, 0x9E7));
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    adam.lr = cfg.lr_at(epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t it = 0; it < cfg.iters_per_epoch; ++it) {
      const auto rows = pk_sample(y, cfg.p_classes, cfg.k_per, rng);
      const auto [cls, tri] = supervised_step(p, adam, gather(raws, domains, y, rows), cfg);
      require_finite_loss(cls + tri, "pretrain", epoch, it);
      rec.cls += cls / static_cast<double>(cfg.iters_per_epoch);
      rec.tri += tri / static_cast<double>(cfg.iters_per_epoch);
    }
    rec.total = rec.cls + rec.tri;
    EncoderParams snapshot = p;
    snapshot.stats(Domain::Target) = snapshot.stats(Domain::Source);
    attach_validation(rec, single(snapshot), val, cfg.eval_top);
    res.log.epochs.push_back(rec);
  }
  p.stats(Domain::Target) = p.stats(Domain::Source);
  res.log.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return res;
}

// ---------------------------------------------------------------------------
// Stage: clustering baseline

PretrainResult stage_baseline(const EncoderParams& pretrained, const Dataset& target_in, const StageConfig& cfg,
                              const QueryGallery* val) {
  cfg.validate();
  pretrained.validate();
  if (pretrained.d_in() != target_in.dim()) fail(ErrorKind::Shape, "stage_baseline: encoder/target width mismatch");
  const auto t0 = Clock::now();
  Dataset target = target_in;
  const Mat raws = target.features.to_mat();
  const std::vector<Domain> domains(target.size(), Domain::Target);
  const std::vector<int> truth = target.identities();

  PretrainResult res;
  res.log.stage = "baseline";
  EncoderParams& p = res.params;
  p = pretrained;
  AdamState adam;
  adam.weight_decay = cfg.weight_decay;
  Rng rng(derive_seed(cfg.seed, 0xBA5E));

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    adam.lr = cfg.lr_at(epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    const Mat emb = [&] {
      Mat f = forward(p, raws, domains);
      normalize_rows(f, "baseline embedding");
      return f;
    }();
    PseudoLabeling labels = cluster_features(emb, cfg.cluster);
    labels.epoch = static_cast<std::int32_t>(epoch);
    apply_labels(target, labels);
    rec.clusters = static_cast<std::size_t>(labels.num_clusters);
    rec.outliers = labels.outliers();
    rec.purity = cluster_purity(labels, truth);
    if (labels.num_clusters < 2) {
      std::cerr << "warning: baseline epoch " << epoch << " found " << labels.num_clusters
                << " clusters; epoch skipped\n";
      rec.skipped = true;
      ++res.log.skipped_epochs;
      attach_validation(rec, single(p), val, cfg.eval_top);
      res.log.epochs.push_back(rec);
      continue;
    }
    const auto classes = static_cast<std::size_t>(labels.num_clusters);
    const std::vector<int> y(labels.assignment.begin(), labels.assignment.end());
    p.classifier = class_centroids(forward(p, raws, domains), y, classes);
    adam.reset("classifier");
    const std::size_t pc = std::min(cfg.p_classes, classes);
    for (std::size_t it = 0; it < cfg.iters_per_epoch; ++it) {
      const auto rows = pk_sample(y, pc, cfg.k_per, rng);
      const auto [cls, tri] = supervised_step(p, adam, gather(raws, domains, y, rows), cfg);
      require_finite_loss(cls + tri, "baseline", epoch, it);
      rec.cls += cls / static_cast<double>(cfg.iters_per_epoch);
      rec.tri += tri / static_cast<double>(cfg.iters_per_epoch);
    }
    rec.total = rec.cls + rec.tri;
    attach_validation(rec, single(p), val, cfg.eval_top);
    res.log.epochs.push_back(rec);
  }
  res.log.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return res;
}

// ---------------------------------------------------------------------------
// Stage: MMT+

namespace {

EncoderParams perturbed(const EncoderParams& base, double rel_noise, std::uint64_t seed) {
  EncoderParams p = base;
  if (rel_noise == 0.0) return p;
  const double rms = std::sqrt(p.weight.squaredNorm() / static_cast<double>(std::max<Eigen::Index>(p.weight.size(), 1)));
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, rel_noise * rms);
  for (Eigen::Index i = 0; i < p.weight.size(); ++i) p.weight.data()[i] += normal(rng);
  return p;
}

struct NetGrads {
  Mat g_feats;
  Mat g_cls;
};

}  // namespace

MmtResult stage_mmt_plus(const EncoderParams& pretrained, const Dataset& source, const Dataset& target_in,
                         const StageConfig& cfg, const QueryGallery* val) {
  cfg.validate();
  pretrained.validate();
  if (source.size() == 0 || target_in.size() == 0) fail(ErrorKind::Config, "stage_mmt_plus: empty dataset");
  if (source.dim() != target_in.dim() || pretrained.d_in() != source.dim()) {
    fail(ErrorKind::Shape, "stage_mmt_plus: encoder/source/target widths differ");
  }
  const auto t0 = Clock::now();
  Dataset target = target_in;

  // Source identities are re-indexed densely into [0, p_s).
  const std::vector<int> src_ids = source.identities();
  std::map<int, int> dense;
  for (int l : src_ids) {
    if (l < 0) fail(ErrorKind::Config, "stage_mmt_plus: source row without identity");
    dense.emplace(l, 0);
  }
  int next = 0;
  for (auto& kv : dense) kv.second = next++;
  const auto p_s = static_cast<std::size_t>(next);
  std::vector<int> src_y(src_ids.size());
  for (std::size_t i = 0; i < src_ids.size(); ++i) src_y[i] = dense[src_ids[i]];

  const Mat src_raws = source.features.to_mat();
  const Mat tgt_raws = target.features.to_mat();
  const std::vector<Domain> src_dom(source.size(), Domain::Source);
  const std::vector<Domain> tgt_dom(target.size(), Domain::Target);
  const std::vector<int> truth = target.identities();

  MmtResult res;
  res.log.stage = "mmtplus";
  TeacherState& st = res.state;
  st.alpha = cfg.alpha;
  for (std::size_t i = 0; i < 2; ++i) {
    st.students[i] = perturbed(pretrained, cfg.peer_noise, derive_seed(cfg.seed, 0x5700 + i));
    st.teachers[i] = st.students[i];
    st.queues[i] = FeatureQueue(cfg.queue_capacity, pretrained.d_out());
  }
  std::array<AdamState, 2> adam;
  for (auto& a : adam) a.weight_decay = cfg.weight_decay;
  Rng rng(derive_seed(cfg.seed, 0x3317));

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (auto& a : adam) a.lr = cfg.lr_at(epoch);
    EpochRecord rec;
    rec.epoch = epoch;

    // Pseudo labels from the averaged mean-teacher embeddings.
    Mat emb = Mat::Zero(tgt_raws.rows(), pretrained.d_out());
    for (const auto& t : st.teachers) {
      Mat f = forward(t, tgt_raws, tgt_dom);
      normalize_rows(f, "mmt embedding");
      emb += f;
    }
    normalize_rows(emb, "mmt embedding");
    PseudoLabeling labels = cluster_features(emb, cfg.cluster);
    labels.epoch = static_cast<std::int32_t>(epoch);
    apply_labels(target, labels);
    rec.clusters = static_cast<std::size_t>(labels.num_clusters);
    rec.outliers = labels.outliers();
    rec.purity = cluster_purity(labels, truth);
    if (labels.num_clusters < 2) {
      std::cerr << "warning: mmtplus epoch " << epoch << " found " << labels.num_clusters
                << " clusters; epoch skipped\n";
      rec.skipped = true;
      ++res.log.skipped_epochs;
      res.log.epochs.push_back(rec);
      continue;
    }
    const auto p_t = static_cast<std::size_t>(labels.num_clusters);
    const std::size_t offset = cfg.joint_source ? p_s : 0;
    const std::size_t classes = offset + p_t;

    // Joint row space: source rows (when enabled) then target rows.
    Mat joint_raws;
    std::vector<Domain> joint_dom;
    std::vector<int> joint_y;
    if (cfg.joint_source) {
      joint_raws.resize(src_raws.rows() + tgt_raws.rows(), src_raws.cols());
      joint_raws.topRows(src_raws.rows()) = src_raws;
      joint_raws.bottomRows(tgt_raws.rows()) = tgt_raws;
      joint_dom = src_dom;
      joint_y = src_y;
    } else {
      joint_raws = tgt_raws;
    }
    joint_dom.insert(joint_dom.end(), tgt_dom.begin(), tgt_dom.end());
    for (auto a : labels.assignment) joint_y.push_back(a == kOutlier ? kOutlier : a + static_cast<int>(offset));
    const std::size_t tgt_base = cfg.joint_source ? source.size() : 0;
    std::vector<int> tgt_y(joint_y.begin() + static_cast<std::ptrdiff_t>(tgt_base), joint_y.end());

    for (std::size_t i = 0; i < 2; ++i) {
      const Mat c = class_centroids(forward(st.teachers[i], joint_raws, joint_dom), joint_y, classes);
      st.students[i].classifier = c;
      st.teachers[i].classifier = c;
      adam[i].reset("classifier");
    }

    const std::size_t pt = std::min(cfg.p_classes, p_t);
    const std::size_t ps = std::min(cfg.p_classes, p_s);
    const double n_iters = static_cast<double>(cfg.iters_per_epoch);
    for (std::size_t it = 0; it < cfg.iters_per_epoch; ++it) {
      std::vector<std::size_t> rows;
      if (cfg.joint_source) rows = pk_sample(src_y, ps, cfg.k_per, rng);
      for (auto r : pk_sample(tgt_y, pt, cfg.k_per, rng)) rows.push_back(r + tgt_base);
      const Batch b = gather(joint_raws, joint_dom, joint_y, rows);
      const auto n = b.raws.rows();
      const double inv = 1.0 / static_cast<double>(n);

      std::array<Mat, 2> feats, standardized, logits, t_feats, t_logits;
      for (std::size_t i = 0; i < 2; ++i) {
        feats[i] = forward_train(st.students[i], b.raws, b.domains, &standardized[i]);
        logits[i] = feats[i] * st.students[i].classifier.transpose();
        t_feats[i] = forward(st.teachers[i], b.raws, b.domains);
        t_logits[i] = t_feats[i] * st.teachers[i].classifier.transpose();
      }

      MmtParts parts;
      std::array<NetGrads, 2> grads;
      for (std::size_t i = 0; i < 2; ++i) {
        auto& g = grads[i];
        g.g_feats = Mat::Zero(feats[i].rows(), feats[i].cols());
        g.g_cls = Mat::Zero(st.students[i].classifier.rows(), st.students[i].classifier.cols());
        const std::size_t other = 1 - i;
        const Mat queue = st.queues[i].matrix();

        Mat g_logits = Mat::Zero(logits[i].rows(), logits[i].cols());
        for (Eigen::Index r = 0; r < n; ++r) {
          const LossOut soft = soft_ce_mutual(row_span(logits[i], r), row_span(t_logits[other], r));
          parts.soft += kMutualDirectionWeight * soft.value * inv;
          g_logits.row(r) += soft.grad("student_logits") * (cfg.lambda_soft * kMutualDirectionWeight * inv);

          const LossOut moco = moco_loss(row_span(feats[i], r), row_span(t_feats[i], r), queue, cfg.tau);
          parts.moco += moco.value * inv;
          g.g_feats.row(r) += moco.grad("query") * (cfg.lambda_moco * inv);
        }
        g.g_feats += g_logits * st.students[i].classifier;
        g.g_cls += g_logits.transpose() * feats[i];

        parts.hard += classification_loss(feats[i], st.students[i].classifier, b.labels, cfg,
                                          1.0 - cfg.lambda_soft, g.g_feats, g.g_cls);
      }
      const double total = mmt_plus_total(parts, cfg.lambda_soft, cfg.lambda_moco);
      require_finite_loss(total, "mmtplus", epoch, it);

      for (std::size_t i = 0; i < 2; ++i) {
        const AffineGrads ag = backward(standardized[i], grads[i].g_feats);
        adam_step(st.students[i], ag, grads[i].g_cls, adam[i]);
        st.teachers[i] = ema_update(st.teachers[i], st.students[i], cfg.alpha);
        queue_push(st.queues[i], t_feats[i]);
      }
      rec.soft += parts.soft / n_iters;
      rec.hard += parts.hard / n_iters;
      rec.moco += parts.moco / n_iters;
      rec.total += total / n_iters;
    }
    attach_validation(rec, single(st.teachers[0]), val, cfg.eval_top);
    res.log.epochs.push_back(rec);
  }
  res.exported.members.push_back(st.teachers[0]);
  if (cfg.export_average) res.exported.members.push_back(st.teachers[1]);
  res.log.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return res;
}

// ---------------------------------------------------------------------------
// Relation consistency diagnostic

double relation_consistency_check(const Dataset& source, const Dataset& translated, const EncoderParams& enc_s,
                                  const EncoderParams& enc_t, const StageConfig& cfg, Domain translated_domain) {
  cfg.validate();
  if (source.size() != translated.size() || source.dim() != translated.dim()) {
    fail(ErrorKind::Shape, "relation_consistency_check: source and translated sets are not row-aligned");
  }
  const std::vector<int> ids = source.identities();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] != translated.meta[i].identity) {
      fail(ErrorKind::Shape, "relation_consistency_check: identity mismatch at row " + std::to_string(i));
    }
  }
  const Mat xs = source.features.to_mat();
  const Mat xt = translated.features.to_mat();
  const std::size_t pc = std::min(cfg.p_classes, count_classes(ids));
  Rng rng(derive_seed(cfg.seed, 0x12C));
  const std::size_t batches = std::max<std::size_t>(cfg.iters_per_epoch, 1);
  double acc = 0.0;
  for (std::size_t b = 0; b < batches; ++b) {
    const auto rows = pk_sample(ids, pc, cfg.k_per, rng);
    Mat bs(static_cast<Eigen::Index>(rows.size()), xs.cols()), bt(bs.rows(), xs.cols());
    std::vector<int> y;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      bs.row(static_cast<Eigen::Index>(i)) = xs.row(static_cast<Eigen::Index>(rows[i]));
      bt.row(static_cast<Eigen::Index>(i)) = xt.row(static_cast<Eigen::Index>(rows[i]));
      y.push_back(ids[rows[i]]);
    }
    const std::vector<Domain> ds(rows.size(), Domain::Source), dt(rows.size(), translated_domain);
    const Mat fs = forward(enc_s, bs, ds);
    const Mat ft = forward(enc_t, bt, dt);
    std::vector<double> t_src, t_trn;
    for (const auto& t : mine_hardest(fs, y)) t_src.push_back(softmax_triplet_T(t.d_p, t.d_n));
    for (const auto& t : mine_hardest(ft, y)) t_trn.push_back(softmax_triplet_T(t.d_p, t.d_n));
    acc += relation_consistency(t_trn, t_src).value;
  }
  return acc / static_cast<double>(batches);
}

// ---------------------------------------------------------------------------
// Ablation benchmark

AblationResult run_ablation(const SynthConfig& synth, const StageConfig& cfg) {
  const SynthOutput data = generate_synthetic(synth);
  const QueryGallery split = split_query_gallery(data.target);
  AblationResult r;

  const PretrainResult raw = stage_pretrain(data.source, cfg);
  r.raw_pretrain_map = evaluate_model(single(raw.params), split, cfg.eval_top).mAP;

  const PretrainResult pre = stage_pretrain(data.translated, cfg);
  r.translated_pretrain_map = evaluate_model(single(pre.params), split, cfg.eval_top).mAP;

  const PretrainResult base = stage_baseline(raw.params, data.target, cfg);
  r.baseline_map = evaluate_model(single(base.params), split, cfg.eval_top).mAP;

  StageConfig ablated = cfg;
  ablated.lambda_moco = 0.0;
  ablated.joint_source = false;
  const MmtResult mmt_ablated = stage_mmt_plus(pre.params, data.source, data.target, ablated);
  r.mmt_ablated_map = evaluate_model(mmt_ablated.exported, split, cfg.eval_top).mAP;

  const MmtResult mmt = stage_mmt_plus(pre.params, data.source, data.target, cfg);
  r.mmt_full_map = evaluate_model(mmt.exported, split, cfg.eval_top).mAP;

  const FeatureMatrix q = embed(mmt.exported, split.query);
  const FeatureMatrix g = embed(mmt.exported, split.gallery);
  r.full_pipeline_map = evaluate(rerank(q, g, RerankParams{}), split.query.meta, split.gallery.meta, cfg.eval_top).mAP;
  return r;
}

}  // namespace urde
