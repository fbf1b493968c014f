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
// urde command-line tool. Links only the C API.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "urde/urde.h"

namespace fs = std::filesystem;

namespace {

struct Failure {
  int code;
  std::string message;
};

void check(urde_status s) {
  if (s != URDE_OK) throw Failure{static_cast<int>(s), urde_last_error()};
}

void usage_error(const std::string& msg) { throw Failure{URDE_ERR_USAGE, msg}; }

template <class T, void (*Free)(T*)>
struct Deleter {
  void operator()(T* p) const { Free(p); }
};
using Config = std::unique_ptr<urde_config, Deleter<urde_config, urde_config_free>>;
using Data = std::unique_ptr<urde_dataset, Deleter<urde_dataset, urde_dataset_free>>;
using Model = std::unique_ptr<urde_model, Deleter<urde_model, urde_model_free>>;
using Dist = std::unique_ptr<urde_distances, Deleter<urde_distances, urde_distances_free>>;

struct OwnedString {
  char* p = nullptr;
  ~OwnedString() { urde_string_free(p); }
  std::string str() const { return p ? std::string(p) : std::string(); }
};

Data load_data(const std::string& path) {
  urde_dataset* d = nullptr;
  check(urde_dataset_load(path.c_str(), &d));
  return Data(d);
}

Model load_model(const std::string& path) {
  urde_model* m = nullptr;
  check(urde_model_load(path.c_str(), &m));
  return Model(m);
}

void write_text(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw Failure{URDE_ERR_DATA, "cannot write " + path};
}

// Options shared by every subcommand that reads configuration. Flags are
// applied after the config file so they take precedence.
struct Settings {
  std::string config_path;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> flags;

  Config build() const {
    urde_config* c = nullptr;
    check(urde_config_new(&c));
    Config cfg(c);
    if (!config_path.empty()) check(urde_config_load(cfg.get(), config_path.c_str()));
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) usage_error("--set expects key=value, got `" + kv + "`");
      check(urde_config_set(cfg.get(), kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()));
    }
    for (const auto& [k, v] : flags) check(urde_config_set(cfg.get(), k.c_str(), v.c_str()));
    return cfg;
  }
};

// Registers a flag that writes `key` into the settings when given.
template <class T>
void bind(CLI::App* app, Settings& s, const std::string& flag, const std::string& key, const std::string& help) {
  app->add_option_function<T>(
      flag,
      [&s, key](const T& v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        s.flags.emplace_back(key, os.str());
      },
      help);
}

void add_common(CLI::App* app, Settings& s) {
  app->add_option("--config", s.config_path, "key = value settings file")->check(CLI::ExistingFile);
  app->add_option("--set", s.sets, "override one setting, key=value (repeatable)");
  bind<unsigned long long>(app, s, "--seed", "seed", "random seed");
}

void add_training(CLI::App* app, Settings& s) {
  add_common(app, s);
  bind<unsigned long long>(app, s, "--epochs", "epochs", "training epochs");
  bind<unsigned long long>(app, s, "--iters", "iters_per_epoch", "iterations per epoch");
  bind<double>(app, s, "--lr", "lr", "Adam learning rate");
  bind<std::string>(app, s, "--loss", "loss", "classification loss: ce, arcface or cosface");
}

void add_clustering(CLI::App* app, Settings& s) {
  bind<unsigned long long>(app, s, "--k", "k", "k-reciprocal neighborhood size");
  bind<double>(app, s, "--eps", "eps", "DBSCAN radius on the Jaccard distance");
  bind<unsigned long long>(app, s, "--min-pts", "min_pts", "DBSCAN core threshold");
}

void add_rerank(CLI::App* app, Settings& s) {
  bind<unsigned long long>(app, s, "--k1", "k1", "re-ranking neighborhood size");
  bind<unsigned long long>(app, s, "--k2", "k2", "re-ranking query-expansion size");
  bind<double>(app, s, "--lambda", "lambda", "weight of the original distance");
}

void emit_log(const std::string& path, const OwnedString& log) {
  if (!path.empty()) write_text(path, log.str());
}

Data optional_data(const std::string& path) { return path.empty() ? Data() : load_data(path); }

Data embedded(const Model& model, const Data& ds) {
  if (!model) return Data(nullptr);
  urde_dataset* e = nullptr;
  check(urde_embed(model.get(), ds.get(), &e));
  return Data(e);
}

std::string distances_json(const urde_distances* d) {
  const size_t rows = urde_distances_rows(d), cols = urde_distances_cols(d);
  std::vector<double> values(rows * cols);
  check(urde_distances_values(d, values.data(), values.size()));
  nlohmann::json j;
  j["rows"] = rows;
  j["cols"] = cols;
  j["values"] = values;
  return j.dump();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised domain adaptation for re-identification on feature data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(urde_version()));
  unsigned threads = 0;
  app.add_option("--threads", threads, "worker thread cap (0 = all cores)");

  Settings s;

  auto* synth = app.add_subcommand("synth", "generate synthetic source/target/translated feature files");
  std::string synth_out;
  add_common(synth, s);
  synth->add_option("--out", synth_out, "output directory")->required();

  auto* pretrain = app.add_subcommand("pretrain", "supervised pre-training on labeled rows");
  std::string pre_train, pre_val, pre_out, pre_log;
  add_training(pretrain, s);
  pretrain->add_option("--train", pre_train, "labeled feature file")->required();
  pretrain->add_option("--val", pre_val, "labeled feature file evaluated after each epoch");
  pretrain->add_option("--out", pre_out, "output model file")->required();
  pretrain->add_option("--log", pre_log, "per-epoch JSONL log");

  auto* baseline = app.add_subcommand("baseline", "clustering-based self-training on the target set");
  std::string base_model, base_target, base_val, base_out, base_log;
  add_training(baseline, s);
  add_clustering(baseline, s);
  baseline->add_option("--model", base_model, "pre-trained model")->required();
  baseline->add_option("--target", base_target, "target feature file")->required();
  baseline->add_option("--val", base_val, "labeled feature file evaluated after each epoch");
  baseline->add_option("--out", base_out, "output model file")->required();
  baseline->add_option("--log", base_log, "per-epoch JSONL log");

  auto* mmt = app.add_subcommand("mmtplus", "mutual mean-teaching on joint source and target batches");
  std::string mmt_model, mmt_source, mmt_target, mmt_val, mmt_out, mmt_log;
  add_training(mmt, s);
  add_clustering(mmt, s);
  bind<double>(mmt, s, "--alpha", "alpha", "teacher EMA momentum");
  bind<double>(mmt, s, "--tau", "tau", "contrastive temperature");
  bind<double>(mmt, s, "--lambda-soft", "lambda_soft", "soft loss weight");
  bind<double>(mmt, s, "--lambda-moco", "lambda_moco", "contrastive loss weight");
  bind<unsigned long long>(mmt, s, "--queue", "queue_capacity", "contrastive queue capacity");
  mmt->add_option("--model", mmt_model, "pre-trained model")->required();
  mmt->add_option("--source", mmt_source, "labeled source feature file")->required();
  mmt->add_option("--target", mmt_target, "target feature file")->required();
  mmt->add_option("--val", mmt_val, "labeled feature file evaluated after each epoch");
  mmt->add_option("--out", mmt_out, "output model file")->required();
  mmt->add_option("--log", mmt_log, "per-epoch JSONL log");

  auto* cluster = app.add_subcommand(
      "cluster", "assign pseudo labels; rewrites the input file in place unless --out is given");
  std::string cl_data, cl_model, cl_out;
  add_common(cluster, s);
  add_clustering(cluster, s);
  cluster->add_option("--data", cl_data, "feature file")->required();
  cluster->add_option("--model", cl_model, "encode rows with this model before clustering");
  cluster->add_option("--out", cl_out, "write the relabeled copy here");

  auto* rerank = app.add_subcommand("rerank", "re-ranked query x gallery distances as JSON");
  std::string rr_query, rr_gallery, rr_model, rr_out;
  add_common(rerank, s);
  add_rerank(rerank, s);
  rerank->add_option("--query", rr_query, "query feature file")->required();
  rerank->add_option("--gallery", rr_gallery, "gallery feature file")->required();
  rerank->add_option("--model", rr_model, "encode rows with this model first");
  rerank->add_option("--out", rr_out, "output file (default: standard output)");

  auto* evaluate = app.add_subcommand("evaluate", "retrieval mAP and CMC as JSON");
  std::string ev_query, ev_gallery, ev_model, ev_camq, ev_camg;
  bool ev_rerank = false;
  double ev_cam_weight = 0.1;
  std::size_t ev_top = 100;
  add_common(evaluate, s);
  add_rerank(evaluate, s);
  evaluate->add_option("--query", ev_query, "query feature file")->required();
  evaluate->add_option("--gallery", ev_gallery, "gallery feature file")->required();
  evaluate->add_option("--model", ev_model, "encode rows with this model first");
  evaluate->add_flag("--rerank", ev_rerank, "apply k-reciprocal re-ranking");
  evaluate->add_option("--cam-query", ev_camq, "camera feature file aligned with the queries");
  evaluate->add_option("--cam-gallery", ev_camg, "camera feature file aligned with the gallery");
  evaluate->add_option("--cam-weight", ev_cam_weight, "camera-similarity weight")->capture_default_str();
  evaluate->add_option("--top", ev_top, "ranking truncation")->capture_default_str();

  auto* ensemble = app.add_subcommand("ensemble", "normalize, concatenate and renormalize feature sets");
  std::vector<std::string> en_in, en_models;
  std::string en_data, en_out;
  ensemble->add_option("--in", en_in, "feature file (repeatable)");
  ensemble->add_option("--data", en_data, "feature file to encode with every --model");
  ensemble->add_option("--model", en_models, "model (repeatable, requires --data)");
  ensemble->add_option("--out", en_out, "output feature file")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every loss gradient");
  std::size_t gc_trials = 100;
  unsigned long long gc_seed = 0;
  gradcheck->add_option("--trials", gc_trials, "random trials per kernel")->capture_default_str();
  gradcheck->add_option("--seed", gc_seed, "random seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return URDE_ERR_USAGE;
  }

  urde_set_threads(threads);
  try {
    if (*synth) {
      const Config cfg = s.build();
      urde_dataset *src = nullptr, *tgt = nullptr, *trn = nullptr;
      check(urde_synthesize(cfg.get(), &src, &tgt, &trn));
      const Data source(src), target(tgt), translated(trn);
      urde_dataset *q = nullptr, *g = nullptr;
      check(urde_dataset_split(target.get(), 2, &q, &g));
      const Data query(q), gallery(g);
      fs::create_directories(synth_out);
      const fs::path dir(synth_out);
      check(urde_dataset_save(source.get(), (dir / "source.urde").c_str()));
      check(urde_dataset_save(target.get(), (dir / "target.urde").c_str()));
      check(urde_dataset_save(translated.get(), (dir / "translated.urde").c_str()));
      check(urde_dataset_save(query.get(), (dir / "query.urde").c_str()));
      check(urde_dataset_save(gallery.get(), (dir / "gallery.urde").c_str()));
      std::cerr << "wrote source, target, translated, query and gallery to " << dir.string() << '\n';
    } else if (*pretrain) {
      const Config cfg = s.build();
      const Data train = load_data(pre_train), val = optional_data(pre_val);
      urde_model* m = nullptr;
      OwnedString log;
      check(urde_train_pretrain(train.get(), cfg.get(), val.get(), &m, &log.p));
      const Model model(m);
      check(urde_model_save(model.get(), pre_out.c_str()));
      emit_log(pre_log, log);
    } else if (*baseline) {
      const Config cfg = s.build();
      const Model pre = load_model(base_model);
      const Data target = load_data(base_target), val = optional_data(base_val);
      urde_model* m = nullptr;
      OwnedString log;
      check(urde_train_baseline(pre.get(), target.get(), cfg.get(), val.get(), &m, &log.p));
      const Model model(m);
      check(urde_model_save(model.get(), base_out.c_str()));
      emit_log(base_log, log);
    } else if (*mmt) {
      const Config cfg = s.build();
      const Model pre = load_model(mmt_model);
      const Data source = load_data(mmt_source), target = load_data(mmt_target), val = optional_data(mmt_val);
      urde_model* m = nullptr;
      OwnedString log;
      check(urde_train_mmtplus(pre.get(), source.get(), target.get(), cfg.get(), val.get(), &m, &log.p));
      const Model model(m);
      check(urde_model_save(model.get(), mmt_out.c_str()));
      emit_log(mmt_log, log);
    } else if (*cluster) {
      const Config cfg = s.build();
      const Data data = load_data(cl_data);
      const Model model = cl_model.empty() ? Model() : load_model(cl_model);
      OwnedString summary;
      check(urde_cluster(data.get(), model.get(), cfg.get(), &summary.p));
      const std::string target = cl_out.empty() ? cl_data : cl_out;
      check(urde_dataset_save(data.get(), target.c_str()));
      const auto j = nlohmann::json::parse(summary.str());
      std::cerr << j["clusters"] << " clusters, " << j["outliers"] << " outliers; labels written to " << target
                << '\n';
      std::cout << summary.str() << '\n';
    } else if (*rerank) {
      const Config cfg = s.build();
      Data query = load_data(rr_query), gallery = load_data(rr_gallery);
      const Model model = rr_model.empty() ? Model() : load_model(rr_model);
      if (model) {
        query = embedded(model, query);
        gallery = embedded(model, gallery);
      }
      urde_distances* d = nullptr;
      check(urde_distances_rerank(query.get(), gallery.get(), cfg.get(), &d));
      const Dist dist(d);
      const std::string text = distances_json(dist.get());
      if (rr_out.empty()) {
        std::cout << text << '\n';
      } else {
        write_text(rr_out, text + "\n");
      }
    } else if (*evaluate) {
      if (ev_camq.empty() != ev_camg.empty()) usage_error("--cam-query and --cam-gallery must be given together");
      const Config cfg = s.build();
      Data query = load_data(ev_query), gallery = load_data(ev_gallery);
      const Model model = ev_model.empty() ? Model() : load_model(ev_model);
      if (model) {
        query = embedded(model, query);
        gallery = embedded(model, gallery);
      }
      urde_distances* d = nullptr;
      if (ev_rerank) {
        check(urde_distances_rerank(query.get(), gallery.get(), cfg.get(), &d));
      } else {
        check(urde_distances_euclidean(query.get(), gallery.get(), &d));
      }
      const Dist dist(d);
      if (!ev_camq.empty()) {
        const Data camq = load_data(ev_camq), camg = load_data(ev_camg);
        check(urde_distances_camera_adjust(dist.get(), camq.get(), camg.get(), ev_cam_weight));
      }
      OwnedString report;
      check(urde_evaluate(dist.get(), query.get(), gallery.get(), ev_top, &report.p));
      std::cout << report.str() << '\n';
    } else if (*ensemble) {
      std::vector<Data> parts;
      for (const auto& p : en_in) parts.push_back(load_data(p));
      if (!en_models.empty()) {
        if (en_data.empty()) usage_error("--model requires --data");
        const Data data = load_data(en_data);
        for (const auto& m : en_models) parts.push_back(embedded(load_model(m), data));
      } else if (!en_data.empty()) {
        usage_error("--data requires at least one --model");
      }
      if (parts.empty()) usage_error("ensemble needs --in files or --data with --model");
      std::vector<const urde_dataset*> raw;
      for (const auto& p : parts) raw.push_back(p.get());
      urde_dataset* out = nullptr;
      check(urde_ensemble(raw.data(), raw.size(), &out));
      const Data joined(out);
      check(urde_dataset_save(joined.get(), en_out.c_str()));
    } else if (*gradcheck) {
      int passed = 0;
      OwnedString report;
      check(urde_gradcheck(gc_seed, gc_trials, &passed, &report.p));
      std::cout << report.str() << '\n';
      const auto j = nlohmann::json::parse(report.str());
      std::cerr << "max relative error " << j["max_rel_error"].get<double>() << (passed ? " (pass)" : " (FAIL)")
                << '\n';
      if (!passed) return URDE_ERR_DATA;
    }
  } catch (const Failure& f) {
    std::cerr << "error: " << f.message << '\n';
    if (f.code == URDE_ERR_USAGE) std::cerr << "run with --help for usage\n";
    return f.code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return URDE_ERR_DATA;
  }
  return 0;
}
