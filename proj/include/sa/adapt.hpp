#pragma once

// Few-shot adaptation of the backend over the split protocol, the local
// oracle it must match, and the linear-probe / split-learning baselines.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "sa/autograd.hpp"
#include "sa/client.hpp"
#include "sa/dataset.hpp"
#include "sa/protocol.hpp"
#include "sa/quantize.hpp"
#include "sa/server.hpp"
#include "sa/vit.hpp"

namespace sa {

// --------------------------- labels stay client-side ------------------------

// Raw family labels to dense class indices, sorted ascending. The server only
// ever learns the class count.
struct LabelCodec {
  std::vector<uint16_t> families;

  uint16_t classes() const { return static_cast<uint16_t>(families.size()); }

  int to_index(uint16_t family) const {
    const auto it = std::lower_bound(families.begin(), families.end(), family);
    if (it == families.end() || *it != family)
      throw IndexError("label " + std::to_string(family) +
                       " is not in the client's class set");
    return static_cast<int>(it - families.begin());
  }
};

inline LabelCodec label_codec(std::span<const uint16_t> labels) {
  if (labels.empty()) throw ArgumentError("label_codec: no labels");
  LabelCodec c;
  c.families.assign(labels.begin(), labels.end());
  std::sort(c.families.begin(), c.families.end());
  c.families.erase(std::unique(c.families.begin(), c.families.end()),
                   c.families.end());
  return c;
}

inline std::vector<int> class_indices(const LabelCodec& codec,
                                      std::span<const uint16_t> labels) {
  std::vector<int> out;
  out.reserve(labels.size());
  for (uint16_t l : labels) out.push_back(codec.to_index(l));
  return out;
}

// ------------------------------- core trainer -------------------------------

struct AdaptationConfig {
  size_t epochs = 100;
  double lr = 1e-5;
  size_t batch = 16;
  uint64_t seed = 1;
  bool tune_backend = true;  // false: task module only

  void validate() const {
    if (batch == 0) throw ConfigError("adaptation: batch must be positive");
    if (!(lr >= 0.0) || !std::isfinite(lr))
      throw ConfigError("adaptation: bad learning rate");
  }
};

// The loss authority: maps a logits batch (plus the upload indices it covers)
// to the loss and its logit gradient. Locally that is client_loss over known
// labels; over the wire it is a LOGITS / LOSS_GRAD round trip.
using BatchLossFn =
    std::function<ClientLoss(const Tensor&, std::span<const uint32_t>)>;

struct AdaptResult {
  VitParams model;
  Head head;
  size_t steps = 0;
  std::vector<double> epoch_losses;  // sample-mean loss per epoch
};

inline AdaptResult adapt_backend(const VitParams& base, size_t split,
                                 uint16_t classes, std::span<const Tensor> reps,
                                 const AdaptationConfig& cfg,
                                 const BatchLossFn& loss_fn) {
  cfg.validate();
  if (!base.spec.valid_split(split))
    throw ConfigError("adapt: invalid split layer");
  if (reps.empty()) throw ArgumentError("adapt: no representations");
  if (classes == 0) throw ArgumentError("adapt: zero classes");

  AdaptResult out;
  out.model = base;
  out.head = init_head(base.spec.embed_dim, classes, cfg.seed);
  std::vector<Param*> train;
  if (cfg.tune_backend) train = out.model.backend_params(split);
  for (Param* p : out.head.all_params()) train.push_back(p);
  AdamOptimizer opt(train, cfg.lr);

  Rng order_rng(cfg.seed + 1);
  const size_t n = reps.size();
  for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<size_t> order = order_rng.permutation(n);
    double loss_sum = 0.0;
    for (size_t at = 0; at < n; at += cfg.batch) {
      const size_t take = std::min(cfg.batch, n - at);
      std::vector<Tensor> batch;
      std::vector<uint32_t> indices;
      batch.reserve(take);
      for (size_t i = 0; i < take; ++i) {
        indices.push_back(static_cast<uint32_t>(order[at + i]));
        batch.push_back(reps[order[at + i]]);
      }
      Graph g;
      const Var logits_var =
          backend_logits_graph(g, out.model, split, out.head, batch);
      const Tensor& logits = g.value(logits_var);
      const ClientLoss cl = loss_fn(logits, indices);
      if (!std::isfinite(cl.loss))
        throw TrainingError("adaptation: loss is not finite");
      if (!cl.dlogits.same_shape(logits))
        throw ProtocolError("adaptation: loss gradient shape mismatch");
      g.backward_seeded(logits_var, cl.dlogits);
      opt.step();
      opt.zero_grad();
      ++out.steps;
      loss_sum += cl.loss * static_cast<double>(take);
    }
    out.epoch_losses.push_back(loss_sum / static_cast<double>(n));
  }
  return out;
}

// Oracle mode: the labels are at hand, no wire involved.
inline AdaptResult adapt_local(const VitParams& base, size_t split,
                               std::span<const Tensor> reps,
                               std::span<const int> rep_classes,
                               uint16_t classes, const AdaptationConfig& cfg) {
  if (reps.size() != rep_classes.size())
    throw ArgumentError("adapt_local: reps and labels disagree");
  const BatchLossFn local = [&](const Tensor& logits,
                                std::span<const uint32_t> idx) {
    std::vector<int> labels;
    labels.reserve(idx.size());
    for (uint32_t i : idx) labels.push_back(rep_classes[i]);
    return client_loss(logits, labels);
  };
  return adapt_backend(base, split, classes, reps, cfg, local);
}

// ------------------------------- evaluation ---------------------------------

inline std::vector<uint16_t> predict_classes(VitParams& model, size_t split,
                                             Head& head,
                                             std::span<const Tensor> reps) {
  if (reps.empty()) throw ArgumentError("predict_classes: no representations");
  PlainOps ops;
  const Tensor cls = backend_cls_batch(model, split, reps);
  const Tensor logits = head_forward(ops, cls, head);
  std::vector<uint16_t> out(reps.size());
  for (size_t i = 0; i < reps.size(); ++i)
    out[i] = static_cast<uint16_t>(argmax_row(logits, i));
  return out;
}

inline double fraction_correct(std::span<const uint16_t> preds,
                               std::span<const int> classes) {
  if (preds.size() != classes.size() || preds.empty())
    throw ArgumentError("fraction_correct: size mismatch");
  size_t hit = 0;
  for (size_t i = 0; i < preds.size(); ++i)
    if (static_cast<int>(preds[i]) == classes[i]) ++hit;
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

// --------------------------- protocol, server side --------------------------

struct ServerSessionReport {
  bool ok = false;
  std::string error;
  SessionPhase phase = SessionPhase::Init;
  uint64_t client_seed = 0;
  uint16_t client_classes = 0;
  size_t reps_received = 0;
  size_t adapt_steps = 0;
  std::vector<double> epoch_losses;
  std::optional<AdaptResult> outcome;  // set only when the session completed
};

// Runs one adaptation session. The stored server state is never touched; a
// failed session leaves nothing behind.
inline ServerSessionReport serve_adaptation(Connection& conn,
                                            const ServerState& st,
                                            const AdaptationConfig& cfg) {
  ServerSessionReport report;
  SessionPhase phase = SessionPhase::Init;
  try {
    cfg.validate();
    const ModelSpec& spec = st.model.spec;
    const uint64_t want_hash = spec_hash(spec);

    Message m = conn.expect({Tag::Hello});
    phase = advance_phase(phase, m.tag);
    const HelloPayload hello = decode_hello(m.payload);
    if (hello.spec_hash != want_hash)
      throw ProtocolError("model spec hash mismatch");
    if (hello.classes == 0) throw ProtocolError("client announced zero classes");
    if (hello.uploads == 0)
      throw ProtocolError("client announced no representation uploads");
    if (hello.uploads > (1u << 20))
      throw ProtocolError("client announced an absurd upload count");
    report.client_seed = hello.seed;
    report.client_classes = hello.classes;
    conn.send(Tag::Hello, encode_hello({want_hash, cfg.seed, 0, 0}));

    QuantizedFrontend qf = st.frontends.at(0);
    conn.send(Tag::FrontendPackage, encode_quantized_frontend(qf));
    const double delta = qf.delta_k();

    const auto read_code_batch = [&](const Message& um) {
      const CodeBatch cb = decode_code_batch(um.payload);
      if (cb.tokens != spec.tokens() || cb.dim != spec.embed_dim)
        throw ProtocolError("uploaded representation geometry mismatch");
      if (cb.delta != delta)
        throw ProtocolError("uploaded representation scale mismatch");
      return cb;
    };

    std::vector<Tensor> reps;
    reps.reserve(hello.uploads);
    for (uint32_t i = 0; i < hello.uploads; ++i) {
      Message um = i == 0 ? conn.expect({Tag::RepUpload, Tag::Done})
                          : conn.expect({Tag::RepUpload});
      phase = advance_phase(phase, um.tag);
      if (um.tag == Tag::Done) {
        conn.send(Tag::Done, {});
        report.phase = phase;
        report.error = "client ended the session before uploading";
        return report;
      }
      const CodeBatch cb = read_code_batch(um);
      for (const std::vector<int8_t>& c : cb.codes)
        reps.push_back(codes_to_rep(c, spec, delta));
    }
    report.reps_received = reps.size();

    const BatchLossFn wire_loss = [&](const Tensor& logits,
                                      std::span<const uint32_t> idx) {
      TensorMessage tm;
      tm.kind = TensorKind::Output;
      tm.item_rows = 1;
      tm.indices.assign(idx.begin(), idx.end());
      tm.values = logits;
      conn.send(Tag::Logits, encode_tensor_message(tm));
      Message r = conn.expect({Tag::LossGrad});
      phase = advance_phase(phase, r.tag);
      const TensorMessage back = decode_tensor_message(r.payload);
      if (back.kind != TensorKind::Gradient)
        throw ProtocolError("LOSS_GRAD carried the wrong payload kind");
      return ClientLoss{back.scalar, back.values};
    };
    AdaptResult res = adapt_backend(st.model, st.split, hello.classes, reps,
                                    cfg, wire_loss);
    report.adapt_steps = res.steps;
    report.epoch_losses = res.epoch_losses;

    // empty LOGITS frame: adaptation over, evaluation may begin
    TensorMessage fin;
    fin.kind = TensorKind::Output;
    fin.item_rows = 0;
    conn.send(Tag::Logits, encode_tensor_message(fin));

    while (true) {
      Message em = conn.expect({Tag::EvalRequest, Tag::Done});
      phase = advance_phase(phase, em.tag);
      if (em.tag == Tag::Done) break;
      const CodeBatch cb = read_code_batch(em);
      std::vector<Tensor> test_reps;
      test_reps.reserve(cb.codes.size());
      for (const std::vector<int8_t>& c : cb.codes)
        test_reps.push_back(codes_to_rep(c, spec, delta));
      const std::vector<uint16_t> preds =
          predict_classes(res.model, st.split, res.head, test_reps);
      conn.send(Tag::EvalResult, encode_eval_result(preds));
    }
    conn.send(Tag::Done, {});
    report.outcome = std::move(res);
    report.phase = phase;
    report.ok = true;
    return report;
  } catch (const Error& e) {
    report.error = e.what();
    report.phase = phase;
    report.outcome.reset();
    try {
      conn.send_error(e.what());
    } catch (...) {
      // peer already gone; the report carries the cause
    }
    return report;
  }
}

// --------------------------- protocol, client side --------------------------

struct ClientTask {
  ModelSpec spec;
  Dataset few_shot;
  Dataset test;
  double alpha = 0.01;
  double laplace_b = 0.8;
  size_t n_aug = 16;
  size_t n_p = 5;
  uint64_t seed = 1;
  bool eval_quiet = true;  // also measure the noiseless-frontend path
};

struct ClientSessionReport {
  bool ok = false;
  std::string error;
  double accuracy = 0.0;        // protected path: noisy frontend + code noise
  double accuracy_quiet = 0.0;  // plain quantized frontend, no code noise
  size_t reps_uploaded = 0;
  size_t loss_rounds = 0;
  double first_loss = 0.0;
  double last_loss = 0.0;
};

inline ClientSessionReport run_client_session(Connection& conn,
                                              const ClientTask& task) {
  ClientSessionReport report;
  try {
    const size_t n = task.few_shot.size();
    if (n == 0) throw ArgumentError("client session: empty few-shot set");
    if (task.test.size() == 0)
      throw ArgumentError("client session: empty test set");
    const LabelCodec codec = label_codec(task.few_shot.labels);
    const std::vector<int> test_classes =
        class_indices(codec, task.test.labels);
    const uint64_t my_hash = spec_hash(task.spec);
    const uint32_t uploads = static_cast<uint32_t>((task.n_aug + 1) * n);

    conn.send(Tag::Hello,
              encode_hello({my_hash, task.seed, codec.classes(), uploads}));
    const HelloPayload hello =
        decode_hello(conn.expect({Tag::Hello}).payload);
    if (hello.spec_hash != my_hash)
      throw ProtocolError("server model hash mismatch");
    const Message fm = conn.expect({Tag::FrontendPackage});
    const QuantizedFrontend qf = decode_quantized_frontend(fm.payload);
    if (!(qf.spec == task.spec))
      throw ProtocolError("frontend spec does not match the configured model");

    NoisyFrontend noisy = perturb_frontend(qf, task.alpha, task.seed);
    const std::vector<RepresentationBatch> extracted =
        extract_representations(noisy, task.few_shot);
    std::vector<Tensor> float_reps;
    float_reps.reserve(n);
    for (const RepresentationBatch& rb : extracted)
      float_reps.push_back(rep_tensor(rb, task.spec));
    const std::vector<Tensor> augmented = run_augmentation(
        float_reps, task.spec, task.n_aug, task.n_p, task.seed + 1);

    const double delta = noisy.frontend.delta_k();
    const uint16_t tokens = static_cast<uint16_t>(task.spec.tokens());
    const uint16_t dim = static_cast<uint16_t>(task.spec.embed_dim);
    Rng laplace_rng(task.seed + 2);
    for (const Tensor& rep : augmented) {
      std::vector<int8_t> codes =
          rep_to_codes(rep, delta, noisy.frontend.bits);
      codes = add_laplace_noise(codes, task.laplace_b, laplace_rng);
      conn.send(Tag::RepUpload,
                encode_code_batch({tokens, dim, delta, {std::move(codes)}}));
    }
    report.reps_uploaded = augmented.size();

    // labels for upload t: run-major grouping, run j of sample i at j*n + i
    std::vector<int> upload_classes(augmented.size());
    for (size_t t = 0; t < augmented.size(); ++t)
      upload_classes[t] = codec.to_index(task.few_shot.labels[t % n]);

    while (true) {
      const Message lm = conn.expect({Tag::Logits});
      const TensorMessage tm = decode_tensor_message(lm.payload);
      if (tm.indices.empty() && tm.values.numel() == 0) break;
      if (tm.kind != TensorKind::Output)
        throw ProtocolError("LOGITS carried the wrong payload kind");
      if (tm.values.rows() != tm.indices.size())
        throw ProtocolError("logits rows do not match the index list");
      std::vector<int> labels;
      labels.reserve(tm.indices.size());
      for (uint32_t idx : tm.indices) {
        if (idx >= upload_classes.size())
          throw ProtocolError("logits referenced an unknown upload index");
        labels.push_back(upload_classes[idx]);
      }
      const ClientLoss cl = client_loss(tm.values, labels);
      TensorMessage back;
      back.kind = TensorKind::Gradient;
      back.scalar = cl.loss;
      back.indices = tm.indices;
      back.values = cl.dlogits;
      conn.send(Tag::LossGrad, encode_tensor_message(back));
      if (report.loss_rounds == 0) report.first_loss = cl.loss;
      report.last_loss = cl.loss;
      ++report.loss_rounds;
    }

    const auto eval_round = [&](NoisyFrontend& fe, bool code_noise,
                                uint64_t noise_seed) {
      std::vector<RepresentationBatch> treps =
          extract_representations(fe, task.test);
      Rng eval_rng(noise_seed);
      CodeBatch cb;
      cb.tokens = tokens;
      cb.dim = dim;
      cb.delta = delta;
      for (RepresentationBatch& rb : treps) {
        if (code_noise)
          rb.codes = add_laplace_noise(rb.codes, task.laplace_b, eval_rng);
        cb.codes.push_back(std::move(rb.codes));
      }
      conn.send(Tag::EvalRequest, encode_code_batch(cb));
      const std::vector<uint16_t> preds =
          decode_eval_result(conn.expect({Tag::EvalResult}).payload);
      if (preds.size() != task.test.size())
        throw ProtocolError("eval result count mismatch");
      return fraction_correct(preds, test_classes);
    };

    if (task.eval_quiet) {
      NoisyFrontend quiet{qf, 0.0};
      report.accuracy_quiet = eval_round(quiet, false, 0);
    }
    report.accuracy = eval_round(noisy, true, task.seed + 3);

    conn.send(Tag::Done, {});
    conn.expect({Tag::Done});
    report.ok = true;
    return report;
  } catch (const Error& e) {
    report.error = e.what();
    try {
      conn.send_error(e.what());
    } catch (...) {
    }
    return report;
  }
}

// ------------------------------ local runners -------------------------------

struct LocalSessionResult {
  ServerSessionReport server;
  ClientSessionReport client;
};

inline LocalSessionResult run_local_adaptation(const ServerState& st,
                                               const ClientTask& task,
                                               const AdaptationConfig& cfg,
                                               uint64_t session_id,
                                               double timeout_seconds = 30.0,
                                               Wiretap* tap = nullptr) {
  LocalSessionResult out;
  run_two_party(
      [&](Transport& t) {
        Connection c(t, session_id);
        if (tap) c.set_tap(tap->hook());
        out.server = serve_adaptation(c, st, cfg);
      },
      [&](Transport& t) {
        Connection c(t, session_id);
        out.client = run_client_session(c, task);
      },
      timeout_seconds);
  return out;
}

// Same session over a loopback socket.
inline LocalSessionResult run_tcp_adaptation(const ServerState& st,
                                             const ClientTask& task,
                                             const AdaptationConfig& cfg,
                                             uint64_t session_id,
                                             double timeout_seconds = 30.0,
                                             Wiretap* tap = nullptr) {
  TcpListener listener(0);
  const uint16_t port = listener.port();
  LocalSessionResult out;
  std::exception_ptr client_error;
  std::thread client_thread([&] {
    try {
      auto t = TcpTransport::connect("127.0.0.1", port);
      t->set_timeout(timeout_seconds);
      Connection c(*t, session_id);
      out.client = run_client_session(c, task);
    } catch (...) {
      client_error = std::current_exception();
    }
  });
  try {
    auto t = listener.accept(timeout_seconds);
    t->set_timeout(timeout_seconds);
    Connection c(*t, session_id);
    if (tap) c.set_tap(tap->hook());
    out.server = serve_adaptation(c, st, cfg);
  } catch (...) {
    client_thread.join();
    throw;
  }
  client_thread.join();
  if (client_error) std::rethrow_exception(client_error);
  return out;
}

// ------------------------------ linear probing ------------------------------

// Final-layer CLS features of the float model, one row per image.
inline Tensor cls_features(VitParams& model, std::span<const Tensor> images) {
  if (images.empty()) throw ArgumentError("cls_features: no images");
  PlainOps ops;
  std::vector<Tensor> rows;
  rows.reserve(images.size());
  for (const Tensor& img : images)
    rows.push_back(ops.take_row(vit_full(model, img), 0));
  return ops.concat_rows(rows);
}

struct ProbeResult {
  Head head;
  size_t steps = 0;
  std::vector<double> epoch_losses;
};

// Freeze everything, fit the task module on precomputed features.
inline ProbeResult linear_probe(const Tensor& features,
                                std::span<const int> feature_classes,
                                uint16_t classes,
                                const AdaptationConfig& cfg) {
  cfg.validate();
  if (features.rows() == 0 || features.rows() != feature_classes.size())
    throw ArgumentError("linear_probe: features and labels disagree");
  ProbeResult out;
  out.head = init_head(features.cols(), classes, cfg.seed);
  AdamOptimizer opt(out.head.all_params(), cfg.lr);
  Rng order_rng(cfg.seed + 1);
  const size_t n = features.rows();
  const size_t d = features.cols();
  for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<size_t> order = order_rng.permutation(n);
    double loss_sum = 0.0;
    for (size_t at = 0; at < n; at += cfg.batch) {
      const size_t take = std::min(cfg.batch, n - at);
      Tensor fb = Tensor::zeros(take, d);
      std::vector<int> labels(take);
      for (size_t i = 0; i < take; ++i) {
        const size_t src = order[at + i];
        std::memcpy(&fb.data[i * d], &features.data[src * d], d * 8);
        labels[i] = feature_classes[src];
      }
      Graph g;
      GraphOps ops{g};
      const Var x = ops.input(fb);
      const Var logits_var = head_forward(ops, x, out.head);
      const ClientLoss cl = client_loss(g.value(logits_var), labels);
      if (!std::isfinite(cl.loss))
        throw TrainingError("linear probe: loss is not finite");
      g.backward_seeded(logits_var, cl.dlogits);
      opt.step();
      opt.zero_grad();
      ++out.steps;
      loss_sum += cl.loss * static_cast<double>(take);
    }
    out.epoch_losses.push_back(loss_sum / static_cast<double>(n));
  }
  return out;
}

inline double probe_accuracy(VitParams& model, Head& head, const Dataset& test,
                             const LabelCodec& codec) {
  const Tensor feats = cls_features(model, test.images);
  PlainOps ops;
  const Tensor logits = head_forward(ops, feats, head);
  std::vector<uint16_t> preds(test.size());
  for (size_t i = 0; i < test.size(); ++i)
    preds[i] = static_cast<uint16_t>(argmax_row(logits, i));
  const std::vector<int> want = class_indices(codec, test.labels);
  return fraction_correct(preds, want);
}

// ----------------------------- split learning -------------------------------

struct SplitLearnResult {
  VitParams model;  // frontend tuned, backend untouched
  Head head;
  size_t steps = 0;
  std::vector<double> epoch_losses;
};

// Joint client-side training of the float frontend and task module against a
// frozen backend, all in one process.
inline SplitLearnResult split_learning_local(const VitParams& base,
                                             size_t split, const Dataset& train,
                                             std::span<const int> train_classes,
                                             uint16_t classes,
                                             const AdaptationConfig& cfg) {
  cfg.validate();
  if (!base.spec.valid_split(split))
    throw ConfigError("split learning: invalid split layer");
  if (train.size() == 0 || train.size() != train_classes.size())
    throw ArgumentError("split learning: images and labels disagree");
  SplitLearnResult out;
  out.model = base;
  out.head = init_head(base.spec.embed_dim, classes, cfg.seed);
  std::vector<Param*> tuned = out.model.frontend_params(split);
  for (Param* p : out.head.all_params()) tuned.push_back(p);
  AdamOptimizer opt(tuned, cfg.lr);
  Rng order_rng(cfg.seed + 1);
  const size_t n = train.size();
  for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<size_t> order = order_rng.permutation(n);
    double loss_sum = 0.0;
    for (size_t at = 0; at < n; at += cfg.batch) {
      const size_t take = std::min(cfg.batch, n - at);
      std::vector<Tensor> images;
      std::vector<int> labels;
      for (size_t i = 0; i < take; ++i) {
        images.push_back(train.images[order[at + i]]);
        labels.push_back(train_classes[order[at + i]]);
      }
      Graph g;
      const Var logits_var = vit_logits_graph(g, out.model, out.head, images);
      const ClientLoss cl = client_loss(g.value(logits_var), labels);
      if (!std::isfinite(cl.loss))
        throw TrainingError("split learning: loss is not finite");
      g.backward_seeded(logits_var, cl.dlogits);
      opt.step();
      opt.zero_grad();
      ++out.steps;
      loss_sum += cl.loss * static_cast<double>(take);
    }
    out.epoch_losses.push_back(loss_sum / static_cast<double>(n));
  }
  return out;
}

inline double split_learning_accuracy(SplitLearnResult& r, const Dataset& test,
                                      const LabelCodec& codec) {
  PlainOps ops;
  std::vector<Tensor> rows;
  rows.reserve(test.size());
  for (const Tensor& img : test.images)
    rows.push_back(ops.take_row(vit_full(r.model, img), 0));
  const Tensor logits = head_forward(ops, ops.concat_rows(rows), r.head);
  std::vector<uint16_t> preds(test.size());
  for (size_t i = 0; i < test.size(); ++i)
    preds[i] = static_cast<uint16_t>(argmax_row(logits, i));
  const std::vector<int> want = class_indices(codec, test.labels);
  return fraction_correct(preds, want);
}

// ------------------------ split learning over the wire ----------------------
//
// The contrast case: float activations cross the wire in both directions.
// Client keeps frontend and task module, server runs the frozen backend.

struct SplitServerReport {
  bool ok = false;
  std::string error;
  size_t forward_rounds = 0;
  size_t backward_rounds = 0;
};

inline SplitServerReport serve_split_learning(Connection& conn,
                                              const VitParams& base,
                                              size_t split) {
  SplitServerReport report;
  try {
    if (!base.spec.valid_split(split))
      throw ConfigError("split learning: invalid split layer");
    VitParams work = base;
    const ModelSpec& spec = work.spec;
    const uint64_t want_hash = spec_hash(spec);

    const HelloPayload hello =
        decode_hello(conn.expect({Tag::Hello}).payload);
    if (hello.spec_hash != want_hash)
      throw ProtocolError("model spec hash mismatch");
    conn.send(Tag::Hello, encode_hello({want_hash, 0, 0, 0}));

    struct Pending {
      Graph g;
      std::vector<Var> inputs;
      Var cls;
      size_t count = 0;
    };
    std::unique_ptr<Pending> pending;

    while (true) {
      const Message m = conn.expect({Tag::LossGrad, Tag::Done});
      if (m.tag == Tag::Done) break;
      const TensorMessage tm = decode_tensor_message(m.payload);
      if (tm.kind == TensorKind::Activations) {
        if (tm.item_rows != spec.tokens() || tm.values.cols() != spec.embed_dim ||
            tm.values.rows() == 0 || tm.values.rows() % spec.tokens() != 0)
          throw ProtocolError("activation upload geometry mismatch");
        auto p = std::make_unique<Pending>();
        p->count = tm.values.rows() / spec.tokens();
        GraphOps ops{p->g};
        std::vector<Var> cls_rows;
        for (size_t s = 0; s < p->count; ++s) {
          Tensor one = Tensor::zeros(spec.tokens(), spec.embed_dim);
          std::memcpy(one.data.data(),
                      &tm.values.data[s * one.numel()], one.numel() * 8);
          const Var in = ops.input(std::move(one));
          p->inputs.push_back(in);
          const Var y = backend_forward(ops, in, backend_span(work, split),
                                        work.final_ln_gain, work.final_ln_bias,
                                        spec);
          cls_rows.push_back(ops.take_row(y, 0));
        }
        p->cls = ops.concat_rows(cls_rows);
        TensorMessage reply;
        reply.kind = TensorKind::Output;
        reply.item_rows = 1;
        reply.indices = tm.indices;
        reply.values = p->g.value(p->cls);
        pending = std::move(p);
        conn.send(Tag::Logits, encode_tensor_message(reply));
        ++report.forward_rounds;
      } else if (tm.kind == TensorKind::Gradient) {
        if (!pending)
          throw ProtocolError("gradient arrived with no activations pending");
        if (!tm.values.same_shape(pending->g.value(pending->cls)))
          throw ProtocolError("activation gradient shape mismatch");
        pending->g.backward_seeded(pending->cls, tm.values);
        Tensor dreps =
            Tensor::zeros(pending->count * spec.tokens(), spec.embed_dim);
        for (size_t s = 0; s < pending->count; ++s) {
          const Tensor& gin = pending->g.grad(pending->inputs[s]);
          std::memcpy(&dreps.data[s * gin.numel()], gin.data.data(),
                      gin.numel() * 8);
        }
        TensorMessage reply;
        reply.kind = TensorKind::Gradient;
        reply.item_rows = static_cast<uint16_t>(spec.tokens());
        reply.values = std::move(dreps);
        pending.reset();
        conn.send(Tag::Logits, encode_tensor_message(reply));
        ++report.backward_rounds;
      } else {
        throw ProtocolError("LOSS_GRAD carried the wrong payload kind");
      }
    }
    conn.send(Tag::Done, {});
    report.ok = true;
    return report;
  } catch (const Error& e) {
    report.error = e.what();
    try {
      conn.send_error(e.what());
    } catch (...) {
    }
    return report;
  }
}

struct SplitClientReport {
  bool ok = false;
  std::string error;
  double accuracy = 0.0;
  size_t steps = 0;
  std::vector<double> epoch_losses;
  std::optional<SplitLearnResult> outcome;
};

inline SplitClientReport run_split_client(Connection& conn,
                                          const VitParams& base, size_t split,
                                          const Dataset& train,
                                          const Dataset& test,
                                          const AdaptationConfig& cfg) {
  SplitClientReport report;
  try {
    cfg.validate();
    if (train.size() == 0 || test.size() == 0)
      throw ArgumentError("split learning: empty dataset");
    const LabelCodec codec = label_codec(train.labels);
    const std::vector<int> train_classes =
        class_indices(codec, train.labels);
    const std::vector<int> test_classes = class_indices(codec, test.labels);
    const ModelSpec& spec = base.spec;
    const uint16_t tokens = static_cast<uint16_t>(spec.tokens());

    conn.send(Tag::Hello, encode_hello({spec_hash(spec), cfg.seed,
                                        codec.classes(), 0}));
    const HelloPayload hello =
        decode_hello(conn.expect({Tag::Hello}).payload);
    if (hello.spec_hash != spec_hash(spec))
      throw ProtocolError("server model hash mismatch");

    SplitLearnResult out;
    out.model = base;
    out.head = init_head(spec.embed_dim, codec.classes(), cfg.seed);
    std::vector<Param*> tuned = out.model.frontend_params(split);
    for (Param* p : out.head.all_params()) tuned.push_back(p);
    AdamOptimizer opt(tuned, cfg.lr);
    Rng order_rng(cfg.seed + 1);
    const size_t n = train.size();

    const auto request_cls = [&](const Tensor& stacked,
                                 std::span<const uint32_t> idx) {
      TensorMessage up;
      up.kind = TensorKind::Activations;
      up.item_rows = tokens;
      up.indices.assign(idx.begin(), idx.end());
      up.values = stacked;
      conn.send(Tag::LossGrad, encode_tensor_message(up));
      const TensorMessage down =
          decode_tensor_message(conn.expect({Tag::Logits}).payload);
      if (down.kind != TensorKind::Output)
        throw ProtocolError("expected backend outputs");
      return down.values;
    };

    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      const std::vector<size_t> order = order_rng.permutation(n);
      double loss_sum = 0.0;
      for (size_t at = 0; at < n; at += cfg.batch) {
        const size_t take = std::min(cfg.batch, n - at);
        std::vector<uint32_t> idx;
        std::vector<int> labels;
        Graph fg;
        GraphOps fops{fg};
        std::vector<Var> reps;
        for (size_t i = 0; i < take; ++i) {
          const size_t src = order[at + i];
          idx.push_back(static_cast<uint32_t>(src));
          labels.push_back(train_classes[src]);
          reps.push_back(frontend_forward(fops, train.images[src],
                                          out.model.embed,
                                          frontend_span(out.model, split),
                                          spec));
        }
        const Var stacked = fops.concat_rows(reps);
        const Tensor cls = request_cls(fg.value(stacked), idx);
        if (cls.rows() != take || cls.cols() != spec.embed_dim)
          throw ProtocolError("backend output geometry mismatch");

        Graph hg;
        GraphOps hops{hg};
        const Var x = hops.input(cls);
        const Var logits_var = head_forward(hops, x, out.head);
        const ClientLoss cl = client_loss(hg.value(logits_var), labels);
        if (!std::isfinite(cl.loss))
          throw TrainingError("split learning: loss is not finite");
        hg.backward_seeded(logits_var, cl.dlogits);

        TensorMessage up;
        up.kind = TensorKind::Gradient;
        up.scalar = cl.loss;
        up.indices = idx;
        up.values = hg.grad(x);
        conn.send(Tag::LossGrad, encode_tensor_message(up));
        const TensorMessage down =
            decode_tensor_message(conn.expect({Tag::Logits}).payload);
        if (down.kind != TensorKind::Gradient)
          throw ProtocolError("expected activation gradients");
        if (!down.values.same_shape(fg.value(stacked)))
          throw ProtocolError("activation gradient geometry mismatch");
        fg.backward_seeded(stacked, down.values);

        opt.step();
        opt.zero_grad();
        ++out.steps;
        loss_sum += cl.loss * static_cast<double>(take);
      }
      out.epoch_losses.push_back(loss_sum / static_cast<double>(n));
    }

    // evaluation: frontend activations out, backend CLS back, head local
    std::vector<uint16_t> preds;
    const size_t eval_batch = std::max<size_t>(cfg.batch, 1);
    for (size_t at = 0; at < test.size(); at += eval_batch) {
      const size_t take = std::min(eval_batch, test.size() - at);
      std::vector<Tensor> rows;
      std::vector<uint32_t> idx;
      for (size_t i = 0; i < take; ++i) {
        idx.push_back(static_cast<uint32_t>(at + i));
        rows.push_back(vit_frontend(out.model, split, test.images[at + i]));
      }
      Tensor stacked = Tensor::zeros(take * spec.tokens(), spec.embed_dim);
      for (size_t i = 0; i < take; ++i)
        std::memcpy(&stacked.data[i * rows[i].numel()], rows[i].data.data(),
                    rows[i].numel() * 8);
      const Tensor cls = request_cls(stacked, idx);
      PlainOps ops;
      const Tensor logits = head_forward(ops, cls, out.head);
      for (size_t i = 0; i < take; ++i)
        preds.push_back(static_cast<uint16_t>(argmax_row(logits, i)));
    }
    report.accuracy = fraction_correct(preds, test_classes);
    report.steps = out.steps;
    report.epoch_losses = out.epoch_losses;
    report.outcome = std::move(out);

    conn.send(Tag::Done, {});
    conn.expect({Tag::Done});
    report.ok = true;
    return report;
  } catch (const Error& e) {
    report.error = e.what();
    try {
      conn.send_error(e.what());
    } catch (...) {
    }
    return report;
  }
}

struct SplitWireResult {
  SplitServerReport server;
  SplitClientReport client;
};

inline SplitWireResult run_local_split_learning(const VitParams& base,
                                                size_t split,
                                                const Dataset& train,
                                                const Dataset& test,
                                                const AdaptationConfig& cfg,
                                                uint64_t session_id,
                                                double timeout_seconds = 30.0,
                                                Wiretap* tap = nullptr) {
  SplitWireResult out;
  run_two_party(
      [&](Transport& t) {
        Connection c(t, session_id);
        if (tap) c.set_tap(tap->hook());
        out.server = serve_split_learning(c, base, split);
      },
      [&](Transport& t) {
        Connection c(t, session_id);
        out.client = run_split_client(c, base, split, train, test, cfg);
      },
      timeout_seconds);
  return out;
}

}  // namespace sa
