#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "sa/autograd.hpp"
#include "sa/dataset.hpp"
#include "sa/error.hpp"
#include "sa/fft.hpp"
#include "sa/quantize.hpp"
#include "sa/rng.hpp"
#include "sa/vit.hpp"

namespace sa {

struct ServerModel {
  VitParams model;
  Head head;
};

inline double model_accuracy(VitParams& model, Head& head, const Dataset& d) {
  if (d.images.empty()) throw ArgumentError("model_accuracy: empty dataset");
  size_t hits = 0;
  for (size_t i = 0; i < d.images.size(); ++i)
    if (argmax_row(model_logits(model, head, d.images[i])) ==
        static_cast<int>(d.labels[i]))
      ++hits;
  return static_cast<double>(hits) / static_cast<double>(d.images.size());
}

// Supervised pretraining of the full model plus a linear task head. The
// caller checks the resulting accuracy against its experiment gate.
inline ServerModel pretrain_server_model(const ModelSpec& spec,
                                         const Dataset& train, size_t epochs,
                                         uint64_t seed, double lr = 1e-3,
                                         size_t batch = 16) {
  if (train.images.empty())
    throw ArgumentError("pretrain_server_model: empty dataset");
  ServerModel sm;
  sm.model = init_vit(spec, seed);
  sm.head = init_head(spec.embed_dim, train.class_count, seed + 1);

  std::vector<Param*> params = sm.model.all_params();
  for (Param* p : sm.head.all_params()) params.push_back(p);
  AdamOptimizer opt(params, lr);

  Rng rng(seed + 2);
  const size_t n = train.images.size();
  for (size_t epoch = 0; epoch < epochs; ++epoch) {
    std::vector<size_t> order = rng.permutation(n);
    for (size_t start = 0; start < n; start += batch) {
      const size_t stop = std::min(n, start + batch);
      std::vector<Tensor> images;
      std::vector<int> labels;
      for (size_t i = start; i < stop; ++i) {
        images.push_back(train.images[order[i]]);
        labels.push_back(static_cast<int>(train.labels[order[i]]));
      }
      Graph g;
      Var logits = vit_logits_graph(g, sm.model, sm.head, images);
      Var loss = g.cross_entropy(logits, labels);
      if (!std::isfinite(g.scalar(loss)))
        throw TrainingError("pretrain_server_model: non-finite loss");
      g.backward(loss);
      opt.step();
      opt.zero_grad();
    }
  }
  return sm;
}

// Originals plus one spectral-swap copy per sample, labels carried over.
inline Dataset build_merged_dataset(const Dataset& d) {
  Dataset out = d;
  for (size_t i = 0; i < d.images.size(); ++i) {
    out.images.push_back(ht_augment(d.images[i]));
    out.labels.push_back(d.labels[i]);
  }
  return out;
}

// Disjoint random split of [0,n) into M parts (sizes differ by at most one),
// plus a calibration draw over the whole range for the full-set frontend.
struct SubsetPlan {
  std::vector<std::vector<size_t>> subsets;  // each randomly ordered
  std::vector<size_t> full_draw;
};

inline SubsetPlan plan_subsets(size_t n, size_t m_subsets, size_t calib_count,
                               Rng& rng) {
  if (m_subsets < 1) throw ArgumentError("plan_subsets: need at least 1 subset");
  if (calib_count < 1 || calib_count > n)
    throw ArgumentError("plan_subsets: bad calibration count");
  SubsetPlan plan;
  std::vector<size_t> perm = rng.permutation(n);
  const size_t base = n / m_subsets;
  const size_t extra = n % m_subsets;
  size_t at = 0;
  for (size_t m = 0; m < m_subsets; ++m) {
    const size_t len = base + (m < extra ? 1 : 0);
    if (len < calib_count)
      throw ConfigError("plan_subsets: subset of " + std::to_string(len) +
                        " samples cannot cover a calibration draw of " +
                        std::to_string(calib_count));
    plan.subsets.emplace_back(perm.begin() + at, perm.begin() + at + len);
    at += len;
  }
  plan.full_draw = rng.sample_without_replacement(n, calib_count);
  return plan;
}

// Index 0: frontend calibrated on a draw from the whole merged set.
// Index m in 1..M: frontend calibrated on a draw from subset m.
inline std::vector<QuantizedFrontend> build_subset_frontends(
    VitParams& model, Head& head, const Dataset& merged, size_t m_subsets,
    size_t split, int bits, size_t calib_count, uint64_t seed) {
  Rng rng(seed);
  SubsetPlan plan =
      plan_subsets(merged.images.size(), m_subsets, calib_count, rng);

  auto calibrate = [&](const std::vector<size_t>& pool) {
    std::vector<Tensor> images;
    std::vector<int> labels;
    for (size_t i = 0; i < calib_count; ++i) {
      images.push_back(merged.images[pool[i]]);
      labels.push_back(static_cast<int>(merged.labels[pool[i]]));
    }
    return quantize_frontend(model, head, split, bits, images, labels);
  };

  std::vector<QuantizedFrontend> frontends;
  frontends.push_back(calibrate(plan.full_draw));
  for (const std::vector<size_t>& s : plan.subsets) frontends.push_back(calibrate(s));
  return frontends;
}

// Convex blend of the dequantized and the float representation.
inline Tensor mixup_representation(const Tensor& quant_rep,
                                   const Tensor& float_rep, double lambda) {
  check_same_shape(quant_rep, float_rep, "mixup_representation");
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw ArgumentError("mixup_representation: lambda outside [0,1]");
  Tensor out = quant_rep;
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = lambda * quant_rep.data[i] + (1.0 - lambda) * float_rep.data[i];
  return out;
}

struct ServerState {
  VitParams model;
  Head head;
  size_t split = 0;
  int bits = 8;
  Dataset merged;
  std::vector<QuantizedFrontend> frontends;  // [0] full set, [1..M] subsets
};

// Frozen-frontend representations for every (frontend, sample) pair, and the
// float-frontend reference per sample. Built once; tuning and its evaluation
// both read from it.
struct TuneCache {
  std::vector<Tensor> float_reps;              // [sample]
  std::vector<std::vector<Tensor>> quant_reps; // [frontend][sample]
};

inline TuneCache build_tune_cache(ServerState& st) {
  TuneCache cache;
  for (const Tensor& img : st.merged.images)
    cache.float_reps.push_back(vit_frontend(st.model, st.split, img));
  for (QuantizedFrontend& qf : st.frontends) {
    std::vector<Tensor> reps;
    reps.reserve(st.merged.images.size());
    for (const Tensor& img : st.merged.images)
      reps.push_back(quantized_frontend_forward(qf, img));
    cache.quant_reps.push_back(std::move(reps));
  }
  return cache;
}

struct QatOptions {
  size_t epochs = 1;
  double lr = 1e-5;
  size_t batch = 8;
  // fixed blend instead of Beta(0.75,0.75) draws; no draws are consumed
  std::optional<double> lambda_override;
};

// Mean tuning loss over the (sample, frontend) stream with the blend weights
// a run at `seed` would use. Lets before/after comparisons hold the lambda
// realization fixed.
inline double eval_tune_loss(ServerState& st, const TuneCache& cache,
                             uint64_t seed,
                             std::optional<double> lambda_override = {}) {
  Rng rng(seed);
  const size_t n = st.merged.images.size();
  double total = 0.0;
  size_t terms = 0;
  PlainOps ops;
  for (size_t i = 0; i < n; ++i) {
    for (size_t m = 0; m < st.frontends.size(); ++m) {
      const double lam =
          lambda_override ? *lambda_override : rng.beta(0.75, 0.75);
      Tensor mixed =
          mixup_representation(cache.quant_reps[m][i], cache.float_reps[i], lam);
      Tensor x = backend_forward(ops, mixed, backend_span(st.model, st.split),
                                 st.model.final_ln_gain, st.model.final_ln_bias,
                                 st.model.spec);
      Tensor logits = head_forward(ops, ops.take_row(x, 0), st.head);
      const std::vector<int> label{static_cast<int>(st.merged.labels[i])};
      total += cross_entropy_value(logits, label);
      ++terms;
    }
  }
  return total / static_cast<double>(terms);
}

// Backend + head tuning on blended representations, frontends frozen. The
// stream is ordered (sample outer, frontend inner) with a fresh Beta draw per
// term, grouped into fixed-size batches.
inline void qat_tune_backend(ServerState& st, const TuneCache& cache,
                             const QatOptions& opt, uint64_t seed) {
  if (st.frontends.empty())
    throw ConfigError("qat_tune_backend: no frontends built");
  if (cache.quant_reps.size() != st.frontends.size() ||
      cache.float_reps.size() != st.merged.images.size())
    throw ArgumentError("qat_tune_backend: cache does not match state");

  std::vector<Param*> params = st.model.backend_params(st.split);
  for (Param* p : st.head.all_params()) params.push_back(p);
  AdamOptimizer adam(params, opt.lr);

  Rng rng(seed);
  const size_t n = st.merged.images.size();
  std::vector<Tensor> reps;
  std::vector<int> labels;

  auto flush = [&] {
    if (reps.empty()) return;
    Graph g;
    Var logits = backend_logits_graph(g, st.model, st.split, st.head, reps);
    Var loss = g.cross_entropy(logits, labels);
    if (!std::isfinite(g.scalar(loss)))
      throw TrainingError("qat_tune_backend: non-finite loss");
    g.backward(loss);
    adam.step();
    adam.zero_grad();
    reps.clear();
    labels.clear();
  };

  for (size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    for (size_t i = 0; i < n; ++i) {
      for (size_t m = 0; m < st.frontends.size(); ++m) {
        const double lam =
            opt.lambda_override ? *opt.lambda_override : rng.beta(0.75, 0.75);
        reps.push_back(mixup_representation(cache.quant_reps[m][i],
                                            cache.float_reps[i], lam));
        labels.push_back(static_cast<int>(st.merged.labels[i]));
        if (reps.size() == opt.batch) flush();
      }
    }
    flush();
  }
}

// Accuracy of quantized frontend -> backend -> head on a dataset.
inline double split_accuracy(VitParams& model, Head& head,
                             QuantizedFrontend& qf, const Dataset& d) {
  if (d.images.empty()) throw ArgumentError("split_accuracy: empty dataset");
  PlainOps ops;
  size_t hits = 0;
  for (size_t i = 0; i < d.images.size(); ++i) {
    Tensor rep = quantized_frontend_forward(qf, d.images[i]);
    Tensor x = vit_backend(model, qf.split, rep);
    Tensor logits = head_forward(ops, ops.take_row(x, 0), head);
    if (argmax_row(logits) == static_cast<int>(d.labels[i])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(d.images.size());
}

}  // namespace sa
