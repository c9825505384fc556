#include "sa/adapt.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cstring>
#include <thread>
#include <vector>

#include "sa/dataset.hpp"
#include "sa/rng.hpp"

using namespace sa;

namespace {

ModelSpec tiny_spec() {
  ModelSpec s;
  s.image_size = 8;
  s.channels = 1;
  s.patch_size = 4;
  s.embed_dim = 8;
  s.num_heads = 2;
  s.mlp_hidden = 16;
  s.num_layers = 3;
  return s;
}

struct World {
  ServerState st;
  Dataset few_shot;
  Dataset test;
};

World make_world(uint64_t seed) {
  World w;
  w.st.model = init_vit(tiny_spec(), seed);
  w.st.head = init_head(tiny_spec().embed_dim, 3, seed + 1);
  w.st.split = 2;
  w.st.bits = 8;
  const Dataset calib_pool = generate_shapes(RenderStyle::server, {0, 1, 2}, 3,
                                             seed + 2, 8);
  std::vector<Tensor> calib(calib_pool.images.begin(),
                            calib_pool.images.begin() + 4);
  std::vector<int> calib_labels;
  for (size_t i = 0; i < 4; ++i)
    calib_labels.push_back(static_cast<int>(calib_pool.labels[i]));
  w.st.frontends.push_back(quantize_frontend(w.st.model, w.st.head, w.st.split,
                                             w.st.bits, calib, calib_labels));
  w.few_shot = generate_shapes(RenderStyle::client, {6, 7}, 3, seed + 3, 8);
  w.test = generate_shapes(RenderStyle::client, {6, 7}, 4, seed + 4, 8);
  return w;
}

ClientTask make_task(const World& w, uint64_t seed) {
  ClientTask t;
  t.spec = w.st.model.spec;
  t.few_shot = w.few_shot;
  t.test = w.test;
  t.alpha = 0.01;
  t.laplace_b = 0.8;
  t.n_aug = 2;
  t.n_p = 1;
  t.seed = seed;
  return t;
}

AdaptationConfig small_cfg(uint64_t seed) {
  AdaptationConfig c;
  c.epochs = 3;
  c.lr = 1e-3;
  c.batch = 4;
  c.seed = seed;
  return c;
}

// The client pipeline re-run outside the protocol: what the server should
// have seen and trained on.
struct OracleView {
  std::vector<Tensor> reps;
  std::vector<int> classes;
  uint16_t class_count = 0;
};

OracleView oracle_uploads(const World& w, const ClientTask& task) {
  OracleView v;
  QuantizedFrontend qf = w.st.frontends[0];
  NoisyFrontend nf = perturb_frontend(qf, task.alpha, task.seed);
  std::vector<RepresentationBatch> extracted =
      extract_representations(nf, task.few_shot);
  std::vector<Tensor> float_reps;
  for (const RepresentationBatch& rb : extracted)
    float_reps.push_back(rep_tensor(rb, task.spec));
  const std::vector<Tensor> augmented = run_augmentation(
      float_reps, task.spec, task.n_aug, task.n_p, task.seed + 1);
  const double delta = nf.frontend.delta_k();
  Rng laplace_rng(task.seed + 2);
  const LabelCodec codec = label_codec(task.few_shot.labels);
  v.class_count = codec.classes();
  const size_t n = task.few_shot.size();
  for (size_t t = 0; t < augmented.size(); ++t) {
    std::vector<int8_t> codes =
        rep_to_codes(augmented[t], delta, nf.frontend.bits);
    codes = add_laplace_noise(codes, task.laplace_b, laplace_rng);
    v.reps.push_back(codes_to_rep(codes, task.spec, delta));
    v.classes.push_back(codec.to_index(task.few_shot.labels[t % n]));
  }
  return v;
}

bool payload_contains(const std::vector<uint8_t>& payload,
                      const uint8_t* needle, size_t len) {
  if (payload.size() < len) return false;
  for (size_t at = 0; at + len <= payload.size(); ++at)
    if (std::memcmp(payload.data() + at, needle, len) == 0) return true;
  return false;
}

}  // namespace

TEST_CASE("label codec maps sorted families to dense indices") {
  const std::vector<uint16_t> labels = {8, 6, 7, 6, 8, 8};
  const LabelCodec codec = label_codec(labels);
  CHECK(codec.classes() == 3);
  CHECK(codec.to_index(6) == 0);
  CHECK(codec.to_index(7) == 1);
  CHECK(codec.to_index(8) == 2);
  CHECK_THROWS_AS(codec.to_index(5), IndexError);
  CHECK_THROWS_AS(label_codec(std::vector<uint16_t>{}), ArgumentError);

  const std::vector<int> idx = class_indices(codec, labels);
  CHECK(idx == std::vector<int>{2, 0, 1, 0, 2, 2});
}

TEST_CASE("zero adaptation epochs leave the init state bitwise") {
  World w = make_world(20);
  std::vector<Tensor> reps;
  for (const Tensor& img : w.few_shot.images)
    reps.push_back(vit_frontend(w.st.model, w.st.split, img));
  const LabelCodec codec = label_codec(w.few_shot.labels);
  const std::vector<int> classes = class_indices(codec, w.few_shot.labels);

  AdaptationConfig cfg = small_cfg(5);
  cfg.epochs = 0;
  AdaptResult res = adapt_local(w.st.model, w.st.split, reps, classes,
                                codec.classes(), cfg);
  CHECK(res.steps == 0);
  CHECK(res.epoch_losses.empty());
  CHECK(encode_vit(res.model) == encode_vit(w.st.model));
  Head fresh = init_head(w.st.model.spec.embed_dim, codec.classes(), cfg.seed);
  CHECK(encode_head(res.head) == encode_head(fresh));
}

TEST_CASE("oracle adaptation drives the loss down") {
  World w = make_world(21);
  std::vector<Tensor> reps;
  for (const Tensor& img : w.few_shot.images)
    reps.push_back(vit_frontend(w.st.model, w.st.split, img));
  const LabelCodec codec = label_codec(w.few_shot.labels);
  const std::vector<int> classes = class_indices(codec, w.few_shot.labels);

  AdaptationConfig cfg = small_cfg(6);
  cfg.epochs = 12;
  const AdaptResult res = adapt_local(w.st.model, w.st.split, reps, classes,
                                      codec.classes(), cfg);
  REQUIRE(res.epoch_losses.size() == 12);
  CHECK(res.epoch_losses.back() < res.epoch_losses.front());
  for (double l : res.epoch_losses) CHECK(std::isfinite(l));
  CHECK(res.steps == 12 * 2);  // 6 reps, batch 4 -> 2 steps per epoch
}

TEST_CASE("bad adaptation arguments are refused") {
  World w = make_world(22);
  std::vector<Tensor> reps = {vit_frontend(w.st.model, w.st.split,
                                           w.few_shot.images[0])};
  const std::vector<int> classes = {0};
  AdaptationConfig cfg = small_cfg(1);

  AdaptationConfig bad = cfg;
  bad.batch = 0;
  CHECK_THROWS_AS(adapt_local(w.st.model, w.st.split, reps, classes, 2, bad),
                  ConfigError);
  bad = cfg;
  bad.lr = -1.0;
  CHECK_THROWS_AS(adapt_local(w.st.model, w.st.split, reps, classes, 2, bad),
                  ConfigError);
  CHECK_THROWS_AS(adapt_local(w.st.model, 1, reps, classes, 2, cfg),
                  ConfigError);  // split below the legal band
  CHECK_THROWS_AS(adapt_local(w.st.model, w.st.split, {}, {}, 2, cfg),
                  ArgumentError);
  CHECK_THROWS_AS(adapt_local(w.st.model, w.st.split, reps, classes, 0, cfg),
                  ArgumentError);
}

TEST_CASE("wire adaptation equals the local oracle bitwise") {
  World w = make_world(23);
  ClientTask task = make_task(w, 9);
  AdaptationConfig cfg = small_cfg(5);

  Wiretap tap;
  LocalSessionResult run =
      run_local_adaptation(w.st, task, cfg, 4001, 30.0, &tap);
  REQUIRE(run.server.ok);
  REQUIRE(run.client.ok);
  REQUIRE(run.server.outcome.has_value());
  CHECK(run.server.phase == SessionPhase::Done);
  CHECK(run.server.client_seed == task.seed);
  CHECK(run.server.client_classes == 2);
  CHECK(run.server.reps_received == (task.n_aug + 1) * task.few_shot.size());
  CHECK(run.client.reps_uploaded == run.server.reps_received);

  OracleView oracle = oracle_uploads(w, task);
  AdaptResult local =
      adapt_local(w.st.model, w.st.split, oracle.reps, oracle.classes,
                  oracle.class_count, cfg);

  CHECK(run.server.adapt_steps == local.steps);
  CHECK(run.server.epoch_losses == local.epoch_losses);
  CHECK(encode_vit(run.server.outcome->model) == encode_vit(local.model));
  CHECK(encode_head(run.server.outcome->head) == encode_head(local.head));

  // the evaluation numbers reproduce through the oracle parameters
  AdaptResult tuned = local;
  const LabelCodec codec = label_codec(task.few_shot.labels);
  const std::vector<int> test_classes = class_indices(codec, task.test.labels);

  QuantizedFrontend qf = w.st.frontends[0];
  NoisyFrontend quiet{qf, 0.0};
  std::vector<Tensor> quiet_reps;
  for (RepresentationBatch& rb : extract_representations(quiet, task.test))
    quiet_reps.push_back(rep_tensor(rb, task.spec));
  const std::vector<uint16_t> quiet_preds =
      predict_classes(tuned.model, w.st.split, tuned.head, quiet_reps);
  CHECK(run.client.accuracy_quiet ==
        fraction_correct(quiet_preds, test_classes));

  NoisyFrontend noisy = perturb_frontend(qf, task.alpha, task.seed);
  Rng eval_rng(task.seed + 3);
  std::vector<Tensor> noisy_reps;
  for (RepresentationBatch& rb : extract_representations(noisy, task.test)) {
    const std::vector<int8_t> codes =
        add_laplace_noise(rb.codes, task.laplace_b, eval_rng);
    noisy_reps.push_back(codes_to_rep(codes, task.spec, rb.delta));
  }
  const std::vector<uint16_t> noisy_preds =
      predict_classes(tuned.model, w.st.split, tuned.head, noisy_reps);
  CHECK(run.client.accuracy == fraction_correct(noisy_preds, test_classes));

  // loss bookkeeping crossed the wire intact
  CHECK(run.client.loss_rounds == local.steps);
  CHECK(run.client.first_loss > 0.0);
}

TEST_CASE("the sent frontend package is exactly the stored frontend") {
  World w = make_world(24);
  ClientTask task = make_task(w, 3);
  AdaptationConfig cfg = small_cfg(2);
  cfg.epochs = 1;

  Wiretap tap;
  LocalSessionResult run =
      run_local_adaptation(w.st, task, cfg, 777, 30.0, &tap);
  REQUIRE(run.server.ok);

  bool seen = false;
  for (const Message& m : tap.messages()) {
    if (m.tag != Tag::FrontendPackage) continue;
    seen = true;
    QuantizedFrontend qf = w.st.frontends[0];
    CHECK(m.payload == encode_quantized_frontend(qf));
  }
  CHECK(seen);
}

TEST_CASE("client abort after the package leaves no outcome behind") {
  World w = make_world(25);
  AdaptationConfig cfg = small_cfg(4);
  const uint64_t hash = spec_hash(w.st.model.spec);

  ServerSessionReport report;
  run_two_party(
      [&](Transport& t) {
        Connection c(t, 11);
        report = serve_adaptation(c, w.st, cfg);
      },
      [&](Transport& t) {
        Connection c(t, 11);
        c.send(Tag::Hello, encode_hello({hash, 1, 2, 6}));
        c.expect({Tag::Hello});
        c.expect({Tag::FrontendPackage});
        c.send(Tag::Done, {});
        c.expect({Tag::Done});
      });

  CHECK_FALSE(report.ok);
  CHECK_FALSE(report.outcome.has_value());
  CHECK(report.phase == SessionPhase::Done);
  CHECK(report.error.find("before uploading") != std::string::npos);
  CHECK(report.adapt_steps == 0);
}

TEST_CASE("a silent client times the server out") {
  World w = make_world(26);
  AdaptationConfig cfg = small_cfg(4);
  ServerSessionReport report;
  run_two_party(
      [&](Transport& t) {
        Connection c(t, 1);
        report = serve_adaptation(c, w.st, cfg);
      },
      [&](Transport&) {
        std::this_thread::sleep_for(std::chrono::milliseconds(400));
      },
      0.1);
  CHECK_FALSE(report.ok);
  CHECK(report.error.find("timed out") != std::string::npos);
  CHECK(report.phase == SessionPhase::Init);
}

TEST_CASE("a spec hash mismatch aborts the handshake on both sides") {
  World w = make_world(27);
  ClientTask task = make_task(w, 5);
  task.spec.mlp_hidden = 32;  // a different architecture entirely
  AdaptationConfig cfg = small_cfg(4);

  const LocalSessionResult run = run_local_adaptation(w.st, task, cfg, 12);
  CHECK_FALSE(run.server.ok);
  CHECK_FALSE(run.client.ok);
  CHECK(run.server.error.find("hash mismatch") != std::string::npos);
  CHECK(run.client.error.find("peer error") != std::string::npos);
  CHECK_FALSE(run.server.outcome.has_value());
}

TEST_CASE("an out-of-phase message draws an error and an abort") {
  World w = make_world(28);
  AdaptationConfig cfg = small_cfg(4);
  const uint64_t hash = spec_hash(w.st.model.spec);

  ServerSessionReport report;
  std::string client_saw;
  run_two_party(
      [&](Transport& t) {
        Connection c(t, 2);
        report = serve_adaptation(c, w.st, cfg);
      },
      [&](Transport& t) {
        Connection c(t, 2);
        c.send(Tag::Hello, encode_hello({hash, 1, 2, 6}));
        c.expect({Tag::Hello});
        c.expect({Tag::FrontendPackage});
        TensorMessage tm;
        tm.kind = TensorKind::Gradient;
        c.send(Tag::LossGrad, encode_tensor_message(tm));
        try {
          c.expect({Tag::Done});
        } catch (const ProtocolError& e) {
          client_saw = e.what();
        }
      });

  CHECK_FALSE(report.ok);
  CHECK(report.error.find("LOSS_GRAD") != std::string::npos);
  CHECK(client_saw.find("LOSS_GRAD") != std::string::npos);
}

TEST_CASE("the wire carries codes, gradients, and nothing else") {
  World w = make_world(29);
  ClientTask task = make_task(w, 7);
  AdaptationConfig cfg = small_cfg(3);
  cfg.epochs = 2;

  Wiretap tap;
  LocalSessionResult run =
      run_local_adaptation(w.st, task, cfg, 31, 30.0, &tap);
  REQUIRE(run.server.ok);
  REQUIRE(run.client.ok);

  size_t uploads = 0, eval_requests = 0;
  for (const Message& m : tap.messages()) {
    switch (m.tag) {
      case Tag::Hello:
        CHECK(encode_hello(decode_hello(m.payload)) == m.payload);
        break;
      case Tag::FrontendPackage:
        break;  // covered by its own test
      case Tag::RepUpload:
      case Tag::EvalRequest: {
        // must parse as a pure code batch, and re-encode to the same bytes:
        // nothing rides along with the codes and the shared scale
        const CodeBatch cb = decode_code_batch(m.payload);
        CHECK(encode_code_batch(cb) == m.payload);
        if (m.tag == Tag::RepUpload) ++uploads;
        if (m.tag == Tag::EvalRequest) ++eval_requests;
        break;
      }
      case Tag::Logits:
      case Tag::LossGrad: {
        const TensorMessage tm = decode_tensor_message(m.payload);
        CHECK(encode_tensor_message(tm) == m.payload);
        if (m.tag == Tag::LossGrad) CHECK(tm.kind == TensorKind::Gradient);
        break;
      }
      case Tag::EvalResult:
        CHECK(encode_eval_result(decode_eval_result(m.payload)) == m.payload);
        break;
      case Tag::Done:
        CHECK(m.payload.empty());
        break;
      case Tag::Error:
        FAIL("no error frame belongs in a clean session");
    }

    // no frame may embed raw training pixels
    for (const Tensor& img : task.few_shot.images) {
      const uint8_t* pixels =
          reinterpret_cast<const uint8_t*>(img.data.data());
      CHECK_FALSE(payload_contains(m.payload, pixels, 64));
    }
  }
  CHECK(uploads == (task.n_aug + 1) * task.few_shot.size());
  CHECK(eval_requests == 2);  // quiet and protected
}

TEST_CASE("channel and tcp transports produce identical sessions") {
  World w = make_world(30);
  ClientTask task = make_task(w, 13);
  AdaptationConfig cfg = small_cfg(8);
  cfg.epochs = 2;

  LocalSessionResult a = run_local_adaptation(w.st, task, cfg, 51);
  LocalSessionResult b = run_tcp_adaptation(w.st, task, cfg, 51);

  REQUIRE(a.server.ok);
  REQUIRE(b.server.ok);
  REQUIRE(a.client.ok);
  REQUIRE(b.client.ok);
  CHECK(a.client.accuracy == b.client.accuracy);
  CHECK(a.client.accuracy_quiet == b.client.accuracy_quiet);
  CHECK(a.client.first_loss == b.client.first_loss);
  CHECK(a.client.last_loss == b.client.last_loss);
  CHECK(a.client.loss_rounds == b.client.loss_rounds);
  CHECK(a.server.epoch_losses == b.server.epoch_losses);
  CHECK(encode_vit(a.server.outcome->model) ==
        encode_vit(b.server.outcome->model));
  CHECK(encode_head(a.server.outcome->head) ==
        encode_head(b.server.outcome->head));
}

TEST_CASE("linear probing equals adaptation with a frozen backend") {
  World w = make_world(31);
  const LabelCodec codec = label_codec(w.few_shot.labels);
  const std::vector<int> classes = class_indices(codec, w.few_shot.labels);

  std::vector<Tensor> reps;
  for (const Tensor& img : w.few_shot.images)
    reps.push_back(vit_frontend(w.st.model, w.st.split, img));
  AdaptationConfig cfg = small_cfg(17);
  cfg.epochs = 4;
  cfg.tune_backend = false;
  const AdaptResult frozen = adapt_local(w.st.model, w.st.split, reps, classes,
                                         codec.classes(), cfg);

  const Tensor features = cls_features(w.st.model, w.few_shot.images);
  const ProbeResult probe =
      linear_probe(features, classes, codec.classes(), cfg);

  CHECK(probe.steps == frozen.steps);
  CHECK(probe.epoch_losses == frozen.epoch_losses);
  AdaptResult frozen_copy = frozen;
  ProbeResult probe_copy = probe;
  CHECK(encode_head(probe_copy.head) == encode_head(frozen_copy.head));
  // the backend stayed put
  CHECK(encode_vit(frozen_copy.model) == encode_vit(w.st.model));
}

TEST_CASE("zero learning rate split learning changes nothing") {
  World w = make_world(32);
  const LabelCodec codec = label_codec(w.few_shot.labels);
  const std::vector<int> classes = class_indices(codec, w.few_shot.labels);
  AdaptationConfig cfg = small_cfg(19);
  cfg.epochs = 2;
  cfg.lr = 0.0;

  SplitLearnResult r = split_learning_local(w.st.model, w.st.split, w.few_shot,
                                            classes, codec.classes(), cfg);
  CHECK(r.steps == 2 * 2);
  CHECK(encode_vit(r.model) == encode_vit(w.st.model));
  Head fresh = init_head(w.st.model.spec.embed_dim, codec.classes(), cfg.seed);
  CHECK(encode_head(r.head) == encode_head(fresh));

  // accuracy is exactly the untrained-head accuracy
  SplitLearnResult untouched;
  untouched.model = w.st.model;
  untouched.head = init_head(w.st.model.spec.embed_dim, codec.classes(),
                             cfg.seed);
  CHECK(split_learning_accuracy(r, w.test, codec) ==
        split_learning_accuracy(untouched, w.test, codec));
}

TEST_CASE("split learning over the wire matches the local run") {
  World w = make_world(33);
  const LabelCodec codec = label_codec(w.few_shot.labels);
  const std::vector<int> classes = class_indices(codec, w.few_shot.labels);
  AdaptationConfig cfg = small_cfg(23);
  cfg.epochs = 2;

  Wiretap tap;
  SplitWireResult wire = run_local_split_learning(
      w.st.model, w.st.split, w.few_shot, w.test, cfg, 61, 30.0, &tap);
  REQUIRE(wire.server.ok);
  REQUIRE(wire.client.ok);
  REQUIRE(wire.client.outcome.has_value());
  CHECK(wire.server.forward_rounds > wire.server.backward_rounds);

  SplitLearnResult local = split_learning_local(
      w.st.model, w.st.split, w.few_shot, classes, codec.classes(), cfg);
  CHECK(wire.client.steps == local.steps);
  CHECK(wire.client.epoch_losses == local.epoch_losses);
  CHECK(encode_vit(wire.client.outcome->model) == encode_vit(local.model));
  CHECK(encode_head(wire.client.outcome->head) == encode_head(local.head));
  CHECK(wire.client.accuracy == split_learning_accuracy(local, w.test, codec));

  // float activations really do cross this wire
  bool saw_activations = false;
  for (const Message& m : tap.messages()) {
    if (m.tag != Tag::LossGrad) continue;
    const TensorMessage tm = decode_tensor_message(m.payload);
    if (tm.kind == TensorKind::Activations) {
      saw_activations = true;
      CHECK(tm.values.numel() > 0);
    }
  }
  CHECK(saw_activations);
}
