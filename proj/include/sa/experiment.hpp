#pragma once

// Experiment recipes over the library: dataset and model artifacts on disk,
// server preparation, and the individual runs that each produce one result
// row. The command line driver and the acceptance harness both build on
// these so they cannot drift apart.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sa/adapt.hpp"
#include "sa/attack.hpp"
#include "sa/client.hpp"
#include "sa/config.hpp"
#include "sa/dataset.hpp"
#include "sa/report.hpp"
#include "sa/server.hpp"

namespace sa {

struct Workspace {
  std::string root;

  std::string data_dir() const { return root + "/data"; }
  std::string server_train_path() const {
    return data_dir() + "/server_train.sadt";
  }
  std::string server_test_path() const {
    return data_dir() + "/server_test.sadt";
  }
  std::string client_pool_path() const {
    return data_dir() + "/client_pool.sadt";
  }
  std::string client_test_path() const {
    return data_dir() + "/client_test.sadt";
  }
  std::string model_dir() const { return root + "/model"; }
  std::string vit_path() const { return model_dir() + "/vit.bin"; }
  std::string head_path() const { return model_dir() + "/head.bin"; }
  std::string run_dir(const std::string& run_id) const {
    return root + "/" + run_id;
  }
};

struct ExperimentData {
  Dataset server_train;
  Dataset server_test;
  Dataset client_pool;
  Dataset client_test;
};

inline ExperimentData generate_experiment_data(const ExperimentConfig& cfg) {
  ExperimentData d;
  const size_t hw = cfg.spec.image_size;
  d.server_train = generate_shapes(RenderStyle::server, cfg.server_families,
                                   cfg.server_per_class, cfg.data_seed, hw);
  d.server_test = generate_shapes(RenderStyle::server, cfg.server_families,
                                  cfg.server_test_per_class, cfg.data_seed + 1,
                                  hw);
  d.client_pool = generate_shapes(RenderStyle::client, cfg.client_families,
                                  cfg.client_pool_per_class, cfg.data_seed + 2,
                                  hw);
  d.client_test = generate_shapes(RenderStyle::client, cfg.client_families,
                                  cfg.client_test_per_class, cfg.data_seed + 3,
                                  hw);
  return d;
}

inline void write_experiment_data(const ExperimentData& d,
                                  const Workspace& ws) {
  std::filesystem::create_directories(ws.data_dir());
  write_dataset(d.server_train, ws.server_train_path());
  write_dataset(d.server_test, ws.server_test_path());
  write_dataset(d.client_pool, ws.client_pool_path());
  write_dataset(d.client_test, ws.client_test_path());
}

inline ExperimentData read_experiment_data(const Workspace& ws) {
  ExperimentData d;
  d.server_train = read_dataset(ws.server_train_path());
  d.server_test = read_dataset(ws.server_test_path());
  d.client_pool = read_dataset(ws.client_pool_path());
  d.client_test = read_dataset(ws.client_test_path());
  return d;
}

inline void write_server_model(ServerModel& sm, const Workspace& ws) {
  std::filesystem::create_directories(ws.model_dir());
  write_vit(sm.model, ws.vit_path());
  write_head(sm.head, ws.head_path());
}

inline ServerModel read_server_model(const Workspace& ws) {
  ServerModel sm;
  sm.model = read_vit(ws.vit_path());
  sm.head = read_head(ws.head_path());
  return sm;
}

// Full server-side preparation: spectral merge (unless ablated), subset
// frontend calibration, and backend hardening (unless ablated).
inline ServerState prepare_server_state(const ExperimentConfig& cfg,
                                        ServerModel sm,
                                        const Dataset& server_train) {
  ServerState st;
  st.model = std::move(sm.model);
  st.head = std::move(sm.head);
  st.split = cfg.split;
  st.bits = cfg.bits;
  st.merged = cfg.ht ? build_merged_dataset(server_train) : server_train;
  st.frontends = build_subset_frontends(st.model, st.head, st.merged,
                                        cfg.subsets, cfg.split, cfg.bits,
                                        cfg.calib, cfg.model_seed + 1);
  if (cfg.ood_qat) {
    const TuneCache cache = build_tune_cache(st);
    QatOptions opt;
    opt.epochs = cfg.qat_epochs;
    opt.lr = cfg.qat_lr;
    opt.batch = cfg.qat_batch;
    qat_tune_backend(st, cache, opt, cfg.model_seed + 2);
  }
  return st;
}

inline AdaptationConfig adaptation_config(const ExperimentConfig& cfg) {
  AdaptationConfig a;
  a.epochs = cfg.adapt_epochs;
  a.lr = cfg.adapt_lr;
  a.batch = cfg.adapt_batch;
  a.seed = cfg.seed;
  return a;
}

// The few-shot draw stream sits after the client's own streams (seed..+3)
// so the same seed never feeds two different consumers.
inline Dataset draw_few_shot(const ExperimentConfig& cfg,
                             const Dataset& pool) {
  Rng rng(cfg.seed + 4);
  return sample_few_shot(pool, cfg.shots, rng);
}

inline ClientTask client_task(const ExperimentConfig& cfg, Dataset few_shot,
                              Dataset test) {
  ClientTask t;
  t.spec = cfg.spec;
  t.few_shot = std::move(few_shot);
  t.test = std::move(test);
  t.alpha = cfg.alpha;
  t.laplace_b = cfg.laplace_b;
  t.n_aug = cfg.pr ? cfg.n_aug : 0;
  t.n_p = cfg.n_p;
  t.seed = cfg.seed;
  return t;
}

inline std::string sa_mode_name(const ExperimentConfig& cfg) {
  std::string m = "sa";
  if (!cfg.ht) m += "_noht";
  if (!cfg.ood_qat) m += "_noqat";
  if (!cfg.pr) m += "_nopr";
  return m;
}

inline std::string sa_run_id(const ExperimentConfig& cfg) {
  return sa_mode_name(cfg) + "_s" + std::to_string(cfg.shots) + "_seed" +
         std::to_string(cfg.seed);
}

inline uint64_t session_id_for(const ExperimentConfig& cfg) {
  return 1000 + cfg.seed;
}

namespace experiment_detail {

class WallTimer {
 public:
  WallTimer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace experiment_detail

// One SA session against a prepared server, in-process or over loopback
// TCP per the config.
inline ResultRow run_sa(const ExperimentConfig& cfg, const ServerState& st,
                        const ExperimentData& data, Wiretap* tap = nullptr) {
  const experiment_detail::WallTimer timer;
  const ClientTask task =
      client_task(cfg, draw_few_shot(cfg, data.client_pool), data.client_test);
  const AdaptationConfig acfg = adaptation_config(cfg);
  const LocalSessionResult r =
      cfg.transport == "tcp"
          ? run_tcp_adaptation(st, task, acfg, session_id_for(cfg),
                               cfg.timeout_seconds, tap)
          : run_local_adaptation(st, task, acfg, session_id_for(cfg),
                                 cfg.timeout_seconds, tap);
  if (!r.server.ok)
    throw ProtocolError("sa run: server failed: " + r.server.error);
  if (!r.client.ok)
    throw ProtocolError("sa run: client failed: " + r.client.error);
  ResultRow row;
  row.run_id = sa_run_id(cfg);
  row.mode = sa_mode_name(cfg);
  row.shots = cfg.shots;
  row.seed = cfg.seed;
  row.accuracy = r.client.accuracy;
  row.wall_seconds = timer.seconds();
  return row;
}

// Linear probing on the float model's CLS features; the canonical
// full-knowledge baseline.
inline ResultRow run_linear_probe(const ExperimentConfig& cfg, ServerModel& sm,
                                  const ExperimentData& data) {
  const experiment_detail::WallTimer timer;
  const Dataset few = draw_few_shot(cfg, data.client_pool);
  const LabelCodec codec = label_codec(few.labels);
  const std::vector<int> classes = class_indices(codec, few.labels);
  const Tensor feats = cls_features(sm.model, few.images);
  ProbeResult pr = linear_probe(feats, classes, codec.classes(),
                                adaptation_config(cfg));
  ResultRow row;
  row.run_id = "lp_s" + std::to_string(cfg.shots) + "_seed" +
               std::to_string(cfg.seed);
  row.mode = "lp";
  row.shots = cfg.shots;
  row.seed = cfg.seed;
  row.accuracy = probe_accuracy(sm.model, pr.head, data.client_test, codec);
  row.wall_seconds = timer.seconds();
  return row;
}

// CLS rows of the shipped quantized frontend, one feature row per image.
inline Tensor quant_frontend_features(QuantizedFrontend& qf,
                                      std::span<const Tensor> images) {
  if (images.empty())
    throw ArgumentError("quant_frontend_features: no images");
  Tensor out = Tensor::zeros(images.size(), qf.spec.embed_dim);
  for (size_t i = 0; i < images.size(); ++i) {
    const Tensor rep = quantized_frontend_forward(qf, images[i]);
    for (size_t j = 0; j < qf.spec.embed_dim; ++j)
      out.at(i, j) = rep.at(0, j);
  }
  return out;
}

// Probing the quantized frontend alone: what a client could get without
// any help from the server's backend.
inline ResultRow run_quant_frontend_probe(const ExperimentConfig& cfg,
                                          const ServerState& st,
                                          const ExperimentData& data) {
  const experiment_detail::WallTimer timer;
  if (st.frontends.empty())
    throw ArgumentError("quant frontend probe: no frontends prepared");
  QuantizedFrontend qf = st.frontends[0];
  const Dataset few = draw_few_shot(cfg, data.client_pool);
  const LabelCodec codec = label_codec(few.labels);
  const std::vector<int> classes = class_indices(codec, few.labels);
  const Tensor feats = quant_frontend_features(qf, few.images);
  ProbeResult pr = linear_probe(feats, classes, codec.classes(),
                                adaptation_config(cfg));
  const Tensor test_feats = quant_frontend_features(qf, data.client_test.images);
  PlainOps ops;
  const Tensor logits = head_forward(ops, test_feats, pr.head);
  size_t hits = 0;
  for (size_t i = 0; i < data.client_test.size(); ++i) {
    size_t best = 0;
    for (size_t c = 1; c < logits.cols(); ++c)
      if (logits.at(i, c) > logits.at(i, best)) best = c;
    if (best == static_cast<size_t>(codec.to_index(data.client_test.labels[i])))
      ++hits;
  }
  ResultRow row;
  row.run_id = "qfprobe_s" + std::to_string(cfg.shots) + "_seed" +
               std::to_string(cfg.seed);
  row.mode = "qfprobe";
  row.shots = cfg.shots;
  row.seed = cfg.seed;
  row.accuracy =
      static_cast<double>(hits) / static_cast<double>(data.client_test.size());
  row.wall_seconds = timer.seconds();
  return row;
}

// Split learning over the wire on the float model.
inline ResultRow run_split_learning(const ExperimentConfig& cfg,
                                    const ServerModel& sm,
                                    const ExperimentData& data) {
  const experiment_detail::WallTimer timer;
  const Dataset few = draw_few_shot(cfg, data.client_pool);
  const SplitWireResult r = run_local_split_learning(
      sm.model, cfg.split, few, data.client_test, adaptation_config(cfg),
      session_id_for(cfg), cfg.timeout_seconds);
  if (!r.server.ok)
    throw ProtocolError("split learning: server failed: " + r.server.error);
  if (!r.client.ok)
    throw ProtocolError("split learning: client failed: " + r.client.error);
  ResultRow row;
  row.run_id = "sl_s" + std::to_string(cfg.shots) + "_seed" +
               std::to_string(cfg.seed);
  row.mode = "sl";
  row.shots = cfg.shots;
  row.seed = cfg.seed;
  row.accuracy = r.client.accuracy;
  row.wall_seconds = timer.seconds();
  return row;
}

// Uploads as the wire carries them: quantized frontend, code domain,
// optional weight noise and code noise from the client's streams.
inline std::vector<Tensor> simulated_uploads(const ExperimentConfig& cfg,
                                             const QuantizedFrontend& qf,
                                             const Dataset& images,
                                             double alpha, double laplace_b) {
  NoisyFrontend nf = perturb_frontend(qf, alpha, cfg.seed);
  std::vector<RepresentationBatch> batches =
      extract_representations(nf, images);
  Rng noise(cfg.seed + 2);
  std::vector<Tensor> out;
  out.reserve(batches.size());
  for (RepresentationBatch& rb : batches) {
    if (laplace_b > 0.0)
      rb.codes = add_laplace_noise(rb.codes, laplace_b, noise);
    out.push_back(rep_tensor(rb, cfg.spec));
  }
  return out;
}

struct AttackArtifacts {
  ResultRow row;
  AttackScore score;
  std::vector<double> decoder_losses;
  std::vector<Tensor> reconstructions;  // first dump_images of them
  std::vector<Tensor> truths;
};

inline std::string attack_run_id(const ExperimentConfig& cfg) {
  auto tag = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    std::string s = buf;
    for (char& c : s)
      if (c == '.') c = 'p';
    return s;
  };
  return "attack_a" + tag(cfg.alpha) + "_b" + tag(cfg.laplace_b) + "_seed" +
         std::to_string(cfg.seed);
}

// Decoder fitted on the operator's own data pushed through the shipped
// frontend: the strongest inversion the server can mount without client
// data.
inline InverseDecoder fit_attack_decoder(const ExperimentConfig& cfg,
                                         const ServerState& st,
                                         const Dataset& server_train,
                                         std::vector<double>* losses = nullptr) {
  if (st.frontends.empty())
    throw ArgumentError("attack: no frontends prepared");
  QuantizedFrontend qf = st.frontends[0];

  const size_t n = server_train.size();
  const size_t take = std::min(cfg.attack_train_count, n);
  Rng pick(cfg.attack_seed);
  const std::vector<size_t> order = pick.permutation(n);
  std::vector<Tensor> train_images;
  train_images.reserve(take);
  for (size_t i = 0; i < take; ++i)
    train_images.push_back(server_train.images[order[i]]);

  std::vector<Tensor> train_reps;
  train_reps.reserve(take);
  for (const Tensor& im : train_images) {
    const Tensor rep = quantized_frontend_forward(qf, im);
    const std::vector<int8_t> codes =
        rep_to_codes(rep, qf.delta_k(), st.bits);
    train_reps.push_back(codes_to_rep(codes, cfg.spec, qf.delta_k()));
  }

  InverseDecoder dec = init_decoder(cfg.spec, cfg.attack_seed);
  DecoderTrainConfig tcfg;
  tcfg.epochs = cfg.attack_epochs;
  tcfg.lr = cfg.attack_lr;
  tcfg.batch = cfg.attack_batch;
  tcfg.seed = cfg.attack_seed;
  std::vector<double> history =
      train_decoder(dec, train_reps, train_images, tcfg);
  if (losses) *losses = std::move(history);
  return dec;
}

// The fitted decoder scored on the client's protected uploads.
inline AttackArtifacts run_attack(const ExperimentConfig& cfg,
                                  const ServerState& st,
                                  const ExperimentData& data) {
  const experiment_detail::WallTimer timer;
  AttackArtifacts art;
  InverseDecoder dec =
      fit_attack_decoder(cfg, st, data.server_train, &art.decoder_losses);
  QuantizedFrontend qf = st.frontends[0];

  const std::vector<Tensor> uploads = simulated_uploads(
      cfg, qf, data.client_test, cfg.alpha, cfg.laplace_b);
  art.score =
      reconstruct_and_score(dec, uploads, data.client_test.images);

  const size_t dump = std::min(cfg.attack_dump_images, uploads.size());
  for (size_t i = 0; i < dump; ++i) {
    art.reconstructions.push_back(reconstruct_image(dec, uploads[i]));
    art.truths.push_back(data.client_test.images[i]);
  }

  art.row.run_id = attack_run_id(cfg);
  art.row.mode = "attack";
  art.row.shots = cfg.shots;
  art.row.seed = cfg.seed;
  art.row.ssim = art.score.mean_ssim;
  art.row.psnr = art.score.mean_psnr;
  art.row.wall_seconds = timer.seconds();
  return art;
}

// Writes a run directory: the exact config that produced the row, the row
// itself, and any attack images.
inline std::string write_run_record(const ExperimentConfig& cfg,
                                    const ResultRow& row,
                                    const AttackArtifacts* art = nullptr) {
  const Workspace ws{cfg.out_dir};
  const std::string dir = ws.run_dir(row.run_id);
  std::filesystem::create_directories(dir);
  const std::string cfg_text = serialize_config(cfg);
  write_file_atomic(dir + "/config.cfg",
                    std::vector<uint8_t>(cfg_text.begin(), cfg_text.end()));
  write_result_csv(dir + "/result.csv", {row});
  if (art) {
    for (size_t i = 0; i < art->reconstructions.size(); ++i) {
      write_pgm(art->reconstructions[i],
                dir + "/recon_" + std::to_string(i) + ".pgm");
      write_pgm(art->truths[i], dir + "/truth_" + std::to_string(i) + ".pgm");
    }
  }
  return dir;
}

}  // namespace sa
