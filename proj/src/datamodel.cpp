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
#include "urde/datamodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

namespace urde {

// ---------------------------------------------------------------------------
// FeatureMatrix / Dataset

FeatureMatrix::FeatureMatrix(std::size_t n, std::size_t d) : n_(n), d_(d), values_(n * d, 0.0f) {
  if (d == 0) fail(ErrorKind::Shape, "feature dimension must be >= 1");
}

FeatureMatrix::FeatureMatrix(std::size_t n, std::size_t d, std::vector<float> values)
    : n_(n), d_(d), values_(std::move(values)) {
  if (d == 0) fail(ErrorKind::Shape, "feature dimension must be >= 1");
  if (values_.size() != n * d) {
    fail(ErrorKind::Shape, "feature buffer holds " + std::to_string(values_.size()) +
                               " values, expected " + std::to_string(n * d));
  }
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i])) {
      fail(ErrorKind::Numeric, "non-finite feature at row " + std::to_string(i / d) + ", column " +
                                   std::to_string(i % d));
    }
  }
}

FeatureMatrix FeatureMatrix::from_mat(const Mat& m) {
  std::vector<float> v(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) v[i] = static_cast<float>(m.data()[i]);
  return FeatureMatrix(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()),
                       std::move(v));
}

Mat FeatureMatrix::to_mat() const {
  Mat m(n_, d_);
  for (std::size_t i = 0; i < values_.size(); ++i) m.data()[i] = values_[i];
  return m;
}

void Dataset::validate() const {
  if (meta.size() != features.n()) {
    fail(ErrorKind::Shape, "dataset `" + name + "`: " + std::to_string(meta.size()) +
                               " meta rows for " + std::to_string(features.n()) + " feature rows");
  }
  for (std::size_t i = 0; i < meta.size(); ++i) {
    const auto& m = meta[i];
    if (m.domain == Domain::Source && m.identity == kNoIdentity) {
      fail(ErrorKind::Config, "dataset `" + name + "`: SOURCE row " + std::to_string(i) + " has no identity");
    }
    if (m.camera < 0) fail(ErrorKind::Config, "dataset `" + name + "`: negative camera id at row " + std::to_string(i));
    if (m.pseudo < 0 && m.pseudo != kOutlier) {
      fail(ErrorKind::Config, "dataset `" + name + "`: invalid pseudo label at row " + std::to_string(i));
    }
  }
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  std::vector<float> values;
  values.reserve(rows.size() * features.d());
  Dataset out;
  out.name = name;
  out.meta.reserve(rows.size());
  for (auto r : rows) {
    if (r >= size()) fail(ErrorKind::Shape, "subset row " + std::to_string(r) + " out of range");
    auto src = features.row(r);
    values.insert(values.end(), src.begin(), src.end());
    out.meta.push_back(meta[r]);
  }
  out.features = FeatureMatrix(rows.size(), features.d(), std::move(values));
  return out;
}

std::vector<Domain> Dataset::domains() const {
  std::vector<Domain> out;
  out.reserve(meta.size());
  for (const auto& m : meta) out.push_back(m.domain);
  return out;
}

std::vector<int> Dataset::identities() const {
  std::vector<int> out;
  out.reserve(meta.size());
  for (const auto& m : meta) out.push_back(m.identity);
  return out;
}

std::vector<int> Dataset::pseudo_labels() const {
  std::vector<int> out;
  out.reserve(meta.size());
  for (const auto& m : meta) out.push_back(m.pseudo);
  return out;
}

Dataset concat_datasets(const Dataset& a, const Dataset& b) {
  if (a.dim() != b.dim()) {
    fail(ErrorKind::Shape, "concat: dimension mismatch " + std::to_string(a.dim()) + " vs " +
                               std::to_string(b.dim()));
  }
  std::vector<float> values = a.features.values();
  values.insert(values.end(), b.features.values().begin(), b.features.values().end());
  Dataset out;
  out.name = a.name + "+" + b.name;
  out.meta = a.meta;
  out.meta.insert(out.meta.end(), b.meta.begin(), b.meta.end());
  out.features = FeatureMatrix(a.size() + b.size(), a.dim(), std::move(values));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic two-domain generator

void SynthConfig::validate() const {
  auto bad = [](const char* field, const std::string& why) {
    fail(ErrorKind::Config, std::string("synth config field `") + field + "`: " + why);
  };
  if (num_ids_source == 0) bad("num_ids_source", "must be >= 1");
  if (num_ids_target == 0) bad("num_ids_target", "must be >= 1");
  if (samples_per_id == 0) bad("samples_per_id", "must be >= 1");
  if (raw_dim == 0) bad("raw_dim", "must be >= 1");
  if (identity_dim == 0 || identity_dim > raw_dim) bad("identity_dim", "must lie in [1, raw_dim]");
  if (cameras == 0) bad("cameras", "must be >= 1");
  if (!(cluster_spread >= 0.0) || !std::isfinite(cluster_spread)) bad("cluster_spread", "must be finite and >= 0");
  if (!(camera_spread >= 0.0) || !std::isfinite(camera_spread)) bad("camera_spread", "must be finite and >= 0");
  if (!(nuisance_spread >= 0.0) || !std::isfinite(nuisance_spread)) bad("nuisance_spread", "must be finite and >= 0");
  if (!(identity_scale > 0.0) || !std::isfinite(identity_scale)) bad("identity_scale", "must be finite and > 0");
  if (!(translation_fidelity >= 0.0 && translation_fidelity <= 1.0)) bad("translation_fidelity", "must lie in [0, 1]");
  const auto d = static_cast<Eigen::Index>(raw_dim);
  if (shift_matrix.rows() != d || shift_matrix.cols() != d) bad("domain_shift", "matrix must be raw_dim x raw_dim");
  if (shift_offset.size() != d) bad("domain_shift", "offset must have raw_dim entries");
  if (!shift_matrix.allFinite() || !shift_offset.allFinite()) bad("domain_shift", "non-finite entries");
  Eigen::FullPivLU<Mat> lu(shift_matrix);
  if (!lu.isInvertible()) bad("domain_shift", "matrix is singular");
}

void make_domain_shift(SynthConfig& cfg, const ShiftParams& shift, std::uint64_t seed) {
  const auto d = static_cast<Eigen::Index>(cfg.raw_dim);
  Rng rng(derive_seed(seed, 0xA11CE));
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat k = Mat::Zero(d, d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(std::max<Eigen::Index>(d, 1)));
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = i + 1; j < d; ++j) {
      const double v = normal(rng) * scale;
      k(i, j) = v;
      k(j, i) = -v;
    }
  }
  const Mat eye = Mat::Identity(d, d);
  const Mat rot = shift.strength == 0.0 ? eye
                                        : Mat((eye - shift.strength * k).partialPivLu().solve(eye + shift.strength * k));
  Vec gains(d);
  for (Eigen::Index i = 0; i < d; ++i) gains[i] = std::exp(shift.gain * normal(rng));
  cfg.shift_matrix = gains.asDiagonal() * rot;
  cfg.shift_offset.resize(d);
  for (Eigen::Index i = 0; i < d; ++i) cfg.shift_offset[i] = shift.offset * normal(rng);
}

SynthConfig default_synth_config(std::uint64_t seed) {
  SynthConfig cfg;
  cfg.seed = seed;
  make_domain_shift(cfg, ShiftParams{}, seed);
  return cfg;
}

const std::vector<std::string>& synth_config_keys() {
  static const std::vector<std::string> keys = {
      "num_ids_source", "num_ids_target", "samples_per_id",  "raw_dim",
      "identity_dim",   "identity_scale", "cluster_spread",  "camera_spread",
      "nuisance_spread", "shift_strength", "shift_gain", "shift_offset",   "translation_fidelity",
      "cameras",        "seed"};
  return keys;
}

SynthConfig synth_config_from(const KeyValueConfig& kv) {
  SynthConfig cfg;
  auto count = [&](const char* key, std::size_t fallback) {
    const long long v = kv.get_int(key, static_cast<long long>(fallback));
    if (v < 0) fail(ErrorKind::Config, std::string("synth config field `") + key + "`: must be >= 0");
    return static_cast<std::size_t>(v);
  };
  cfg.num_ids_source = count("num_ids_source", cfg.num_ids_source);
  cfg.num_ids_target = count("num_ids_target", cfg.num_ids_target);
  cfg.samples_per_id = count("samples_per_id", cfg.samples_per_id);
  cfg.raw_dim = count("raw_dim", cfg.raw_dim);
  cfg.identity_dim = count("identity_dim", std::min(cfg.identity_dim, cfg.raw_dim));
  cfg.identity_scale = kv.get_double("identity_scale", cfg.identity_scale);
  cfg.cluster_spread = kv.get_double("cluster_spread", cfg.cluster_spread);
  cfg.camera_spread = kv.get_double("camera_spread", cfg.camera_spread);
  cfg.nuisance_spread = kv.get_double("nuisance_spread", cfg.nuisance_spread);
  cfg.translation_fidelity = kv.get_double("translation_fidelity", cfg.translation_fidelity);
  cfg.cameras = count("cameras", cfg.cameras);
  cfg.seed = static_cast<std::uint64_t>(count("seed", 0));
  if (cfg.raw_dim == 0) fail(ErrorKind::Config, "synth config field `raw_dim`: must be >= 1");
  const ShiftParams defaults;
  const ShiftParams shift{kv.get_double("shift_strength", defaults.strength), kv.get_double("shift_gain", defaults.gain),
                          kv.get_double("shift_offset", defaults.offset)};
  make_domain_shift(cfg, shift, cfg.seed);
  cfg.validate();
  return cfg;
}

namespace {

struct DomainDraw {
  Mat pre;  // raws before any domain shift
  std::vector<SampleMeta> meta;
};

DomainDraw draw_domain(const SynthConfig& cfg, Rng& rng, std::size_t num_ids, std::int32_t first_id,
                       Domain domain) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t d = cfg.raw_dim;
  const std::size_t id_dim = cfg.identity_dim;

  Mat centers = Mat::Zero(num_ids, d);
  for (std::size_t i = 0; i < num_ids; ++i)
    for (std::size_t j = 0; j < id_dim; ++j) centers(i, j) = cfg.identity_scale * normal(rng);

  Mat cam_offsets = Mat::Zero(cfg.cameras, d);
  for (std::size_t c = 0; c < cfg.cameras; ++c)
    for (std::size_t j = id_dim; j < d; ++j) cam_offsets(c, j) = cfg.camera_spread * normal(rng);

  DomainDraw out;
  out.pre.resize(num_ids * cfg.samples_per_id, d);
  out.meta.reserve(num_ids * cfg.samples_per_id);
  std::size_t row = 0;
  for (std::size_t i = 0; i < num_ids; ++i) {
    for (std::size_t s = 0; s < cfg.samples_per_id; ++s, ++row) {
      const std::size_t cam = s % cfg.cameras;
      for (std::size_t j = 0; j < d; ++j) {
        const double spread = j < id_dim ? cfg.cluster_spread : cfg.nuisance_spread;
        out.pre(row, j) = centers(i, j) + cam_offsets(cam, j) + spread * normal(rng);
      }
      SampleMeta m;
      m.identity = first_id + static_cast<std::int32_t>(i);
      m.camera = static_cast<std::int32_t>(cam);
      m.domain = domain;
      m.pseudo = kOutlier;
      out.meta.push_back(m);
    }
  }
  return out;
}

}  // namespace

SynthOutput generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, 0x5EED));

  DomainDraw src = draw_domain(cfg, rng, cfg.num_ids_source, 0, Domain::Source);
  DomainDraw tgt = draw_domain(cfg, rng, cfg.num_ids_target, static_cast<std::int32_t>(cfg.num_ids_source),
                               Domain::Target);

  // Row-vector form of x -> A x + b.
  Mat shifted = src.pre * cfg.shift_matrix.transpose();
  shifted.rowwise() += cfg.shift_offset.transpose();

  // Blend toward the pre-shift position; the endpoints are exact.
  const double gamma = cfg.translation_fidelity;
  const Mat shifted_f = FeatureMatrix::from_mat(shifted).to_mat();
  const Mat pre_f = FeatureMatrix::from_mat(src.pre).to_mat();
  Mat translated = (1.0 - gamma) * shifted_f + gamma * pre_f;

  SynthOutput out;
  out.source = Dataset{FeatureMatrix::from_mat(shifted_f), src.meta, "source"};
  out.translated = Dataset{FeatureMatrix::from_mat(translated), src.meta, "translated"};
  out.target = Dataset{FeatureMatrix::from_mat(tgt.pre), tgt.meta, "target"};
  return out;
}

QueryGallery split_query_gallery(const Dataset& ds, std::size_t queries_per_identity) {
  std::map<int, std::size_t> taken;
  std::vector<std::size_t> q_rows, g_rows;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto& t = taken[ds.meta[i].identity];
    if (ds.meta[i].identity != kNoIdentity && t < queries_per_identity) {
      q_rows.push_back(i);
      ++t;
    } else {
      g_rows.push_back(i);
    }
  }
  QueryGallery out{ds.subset(q_rows), ds.subset(g_rows)};
  out.query.name = ds.name + ".query";
  out.gallery.name = ds.name + ".gallery";
  return out;
}

// ---------------------------------------------------------------------------
// Binary feature format

namespace {

constexpr char kMagic[4] = {'U', 'R', 'D', 'E'};
constexpr std::size_t kHeaderBytes = 4 + 2 + 4 + 4;

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}
  template <class T>
  void put(T v) {
    using U = std::make_unsigned_t<std::conditional_t<std::is_same_v<T, float>, std::int32_t, T>>;
    U bits;
    if constexpr (std::is_same_v<T, float>) {
      bits = std::bit_cast<std::uint32_t>(v);
    } else {
      bits = static_cast<U>(v);
    }
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }

 private:
  std::vector<std::uint8_t>& out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  std::size_t offset() const { return pos_; }

  template <class T>
  T get(const char* what) {
    using U = std::make_unsigned_t<std::conditional_t<std::is_same_v<T, float>, std::int32_t, T>>;
    if (in_.size() - pos_ < sizeof(U)) {
      throw Error(ErrorKind::Format, std::string("truncated payload while reading ") + what, pos_);
    }
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(static_cast<U>(in_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    if constexpr (std::is_same_v<T, float>) {
      return std::bit_cast<float>(bits);
    } else {
      return static_cast<T>(bits);
    }
  }

  void need(std::uint64_t bytes, const char* what) const {
    if (in_.size() - pos_ < bytes) {
      throw Error(ErrorKind::Format, std::string("truncated payload: ") + what + " needs " + std::to_string(bytes) +
                                         " bytes, " + std::to_string(in_.size() - pos_) + " available",
                  pos_);
    }
  }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_features(const Dataset& ds) {
  ds.validate();
  const std::size_t n = ds.size();
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + n * 13 + ds.features.values().size() * 4);
  out.insert(out.end(), kMagic, kMagic + 4);
  Writer w(out);
  w.put<std::uint16_t>(kFeatureFormatVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(n));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.dim()));
  for (const auto& m : ds.meta) w.put<std::int32_t>(m.identity);
  for (const auto& m : ds.meta) w.put<std::int32_t>(m.camera);
  for (const auto& m : ds.meta) w.put<std::uint8_t>(static_cast<std::uint8_t>(m.domain));
  for (const auto& m : ds.meta) w.put<std::int32_t>(m.pseudo);
  for (float v : ds.features.values()) w.put<float>(v);
  return out;
}

Dataset decode_features(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error(ErrorKind::Format, "bad magic, expected \"URDE\"", 0);
  }
  Reader r(bytes.subspan(0));
  for (int i = 0; i < 4; ++i) r.get<std::uint8_t>("magic");
  const std::size_t version_at = r.offset();
  const auto version = r.get<std::uint16_t>("version");
  if (version != kFeatureFormatVersion) {
    throw Error(ErrorKind::Format, "unsupported format version " + std::to_string(version), version_at);
  }
  const auto n = r.get<std::uint32_t>("row count");
  const std::size_t d_at = r.offset();
  const auto d = r.get<std::uint32_t>("dimension");
  if (d == 0) throw Error(ErrorKind::Format, "feature dimension must be >= 1", d_at);
  r.need(static_cast<std::uint64_t>(n) * 13 + static_cast<std::uint64_t>(n) * d * 4, "rows");

  Dataset ds;
  ds.meta.resize(n);
  for (auto& m : ds.meta) m.identity = r.get<std::int32_t>("identity");
  for (auto& m : ds.meta) {
    const std::size_t at = r.offset();
    m.camera = r.get<std::int32_t>("camera");
    if (m.camera < 0) throw Error(ErrorKind::Format, "negative camera id", at);
  }
  for (auto& m : ds.meta) {
    const std::size_t at = r.offset();
    const auto tag = r.get<std::uint8_t>("domain");
    if (tag > 1) throw Error(ErrorKind::Format, "unknown domain tag " + std::to_string(tag), at);
    m.domain = static_cast<Domain>(tag);
  }
  for (auto& m : ds.meta) {
    const std::size_t at = r.offset();
    m.pseudo = r.get<std::int32_t>("pseudo label");
    if (m.pseudo < 0 && m.pseudo != kOutlier) throw Error(ErrorKind::Format, "invalid pseudo label", at);
  }
  std::vector<float> values(static_cast<std::size_t>(n) * d);
  for (auto& v : values) {
    const std::size_t at = r.offset();
    v = r.get<float>("feature");
    if (!std::isfinite(v)) throw Error(ErrorKind::Format, "non-finite feature value", at);
  }
  if (r.offset() != bytes.size()) {
    throw Error(ErrorKind::Format, "trailing bytes after payload", r.offset());
  }
  ds.features = FeatureMatrix(n, d, std::move(values));
  try {
    ds.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::Format, e.what(), kHeaderBytes);
  }
  return ds;
}

void save_features(const std::filesystem::path& path, const Dataset& ds) {
  const auto bytes = encode_features(ds);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Format, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::Format, "write failed for " + path.string());
}

Dataset load_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Format, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Dataset ds = decode_features(bytes);
  ds.name = path.stem().string();
  return ds;
}

}  // namespace urde
