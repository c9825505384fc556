#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "sa/dataset.hpp"
#include "sa/error.hpp"
#include "sa/quantize.hpp"
#include "sa/rng.hpp"
#include "sa/tensor.hpp"
#include "sa/vit.hpp"

namespace sa {

// Frontend with per-parameter noise folded into the dequantized values:
// theta' = n_mul * theta + n_add, n_mul ~ N(1, a|theta|), n_add ~ N(0, a|theta|).
// Codes and scales stay untouched; only the float working copy changes.
struct NoisyFrontend {
  QuantizedFrontend frontend;
  double alpha = 0.0;
};

inline double perturb_value(double v, double alpha, Rng& rng) {
  const double s = alpha * std::abs(v);
  const double n_mul = rng.normal(1.0, s);
  const double n_add = rng.normal(0.0, s);
  return n_mul * v + n_add;
}

inline NoisyFrontend perturb_frontend(const QuantizedFrontend& base,
                                      double alpha, uint64_t seed) {
  if (alpha < 0.0) throw ArgumentError("perturb_frontend: alpha must be >= 0");
  NoisyFrontend nf{base, alpha};
  if (alpha == 0.0) return nf;
  Rng rng(seed);
  for (Param* p : nf.frontend.tensor_order())
    for (double& v : p->value.data) v = perturb_value(v, alpha, rng);
  return nf;
}

// One extracted sample: layer-K codes with the scale they decode under.
struct RepresentationBatch {
  std::vector<int8_t> codes;  // tokens x embed_dim, row-major
  double delta = 0.0;
  int label = -1;
};

inline std::vector<RepresentationBatch> extract_representations(
    NoisyFrontend& nf, const Dataset& data) {
  std::vector<RepresentationBatch> out;
  out.reserve(data.images.size());
  for (size_t i = 0; i < data.images.size(); ++i) {
    // layer K's own quantization already ran inside the forward; re-coding
    // the output recovers the integer codes for the wire
    Tensor rep = quantized_frontend_forward(nf.frontend, data.images[i]);
    RepresentationBatch rb;
    rb.delta = nf.frontend.delta_k();
    rb.codes = rep_to_codes(rep, rb.delta, nf.frontend.bits);
    rb.label = static_cast<int>(data.labels[i]);
    out.push_back(std::move(rb));
  }
  return out;
}

inline Tensor rep_tensor(const RepresentationBatch& rb, const ModelSpec& spec) {
  return codes_to_rep(rb.codes, spec, rb.delta);
}

// ---------------------------------------------------------------------------
// Patch retrieval: per patch position j, the pool of every sample's row j
// (float, pre-noise). A query row is replaced by its cosine-nearest pool row,
// excluding the query's own sample.
// ---------------------------------------------------------------------------

struct RetrievalSets {
  // rows[j][s] = row of patch j in sample s; j in 0..N-1 (CLS excluded)
  std::vector<std::vector<std::vector<double>>> rows;

  size_t patches() const { return rows.size(); }
  size_t samples() const { return rows.empty() ? 0 : rows[0].size(); }
};

inline RetrievalSets build_retrieval_sets(std::span<const Tensor> reps,
                                          const ModelSpec& spec) {
  if (reps.empty()) throw ArgumentError("build_retrieval_sets: no samples");
  RetrievalSets sets;
  const size_t d = spec.embed_dim;
  sets.rows.resize(spec.num_patches());
  for (size_t j = 0; j < spec.num_patches(); ++j) {
    sets.rows[j].reserve(reps.size());
    for (const Tensor& r : reps) {
      if (r.rows() != spec.tokens() || r.cols() != d)
        throw DimensionError("build_retrieval_sets: bad representation shape");
      const double* row = r.data.data() + (j + 1) * d;  // row 0 is CLS
      sets.rows[j].emplace_back(row, row + d);
    }
  }
  return sets;
}

// cosine similarity; zero-norm pairs rank below every real candidate
inline double cosine_or_lowest(std::span<const double> a,
                               std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return -std::numeric_limits<double>::infinity();
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Index of the most similar row in S_j excluding `self`; ties and the
// all-minus-infinity case resolve to the lowest sample index.
inline size_t retrieve_nearest(const RetrievalSets& sets, size_t patch,
                               size_t self, std::span<const double> query) {
  const auto& pool = sets.rows.at(patch);
  if (pool.size() < 2)
    throw ArgumentError("retrieve_nearest: need at least 2 samples");
  bool found = false;
  size_t best = 0;
  double best_sim = 0.0;
  for (size_t s = 0; s < pool.size(); ++s) {
    if (s == self) continue;
    const double sim = cosine_or_lowest(query, pool[s]);
    if (!found || sim > best_sim) {
      found = true;
      best = s;
      best_sim = sim;
    }
  }
  return best;
}

// Replace N^P randomly chosen patch rows of sample `self` with their nearest
// pool rows. The CLS row is never touched.
inline Tensor patch_retrieval_augment(const Tensor& rep, size_t self,
                                      const RetrievalSets& sets, size_t n_p,
                                      Rng& rng) {
  const size_t patches = sets.patches();
  if (n_p > patches)
    throw ArgumentError("patch_retrieval_augment: more swaps than patches");
  if (rep.rows() != patches + 1)
    throw DimensionError("patch_retrieval_augment: rep does not match sets");
  Tensor out = rep;
  if (n_p == 0) return out;
  const size_t d = rep.cols();
  std::vector<size_t> chosen = rng.sample_without_replacement(patches, n_p);
  for (size_t j : chosen) {
    const double* q = rep.data.data() + (j + 1) * d;
    const size_t s = retrieve_nearest(sets, j, self, {q, d});
    const std::vector<double>& repl = sets.rows[j][s];
    std::copy(repl.begin(), repl.end(), out.data.begin() + (j + 1) * d);
  }
  return out;
}

// All augmentation runs: index 0 is the untouched original, runs 1..N^Aug
// each re-draw their patch choices. Output is grouped run-major:
// out[j * n_samples + i] = run j of sample i.
inline std::vector<Tensor> run_augmentation(std::span<const Tensor> reps,
                                            const ModelSpec& spec, size_t n_aug,
                                            size_t n_p, uint64_t seed) {
  RetrievalSets sets = build_retrieval_sets(reps, spec);
  Rng rng(seed);
  std::vector<Tensor> out;
  out.reserve((n_aug + 1) * reps.size());
  for (const Tensor& r : reps) out.push_back(r);
  for (size_t j = 1; j <= n_aug; ++j)
    for (size_t i = 0; i < reps.size(); ++i)
      out.push_back(patch_retrieval_augment(reps[i], i, sets, n_p, rng));
  return out;
}

// Laplace noise in the integer code domain, rounded half away from zero and
// re-clamped to the signed 8-bit range.
inline std::vector<int8_t> add_laplace_noise(std::span<const int8_t> codes,
                                             double b, Rng& rng) {
  if (b < 0.0) throw ArgumentError("add_laplace_noise: scale must be >= 0");
  std::vector<int8_t> out(codes.begin(), codes.end());
  if (b == 0.0) return out;
  for (int8_t& c : out) {
    const double noised = static_cast<double>(c) + rng.laplace(b);
    const double r = std::round(noised);
    c = static_cast<int8_t>(std::min(127.0, std::max(-128.0, r)));
  }
  return out;
}

// Task loss on the client side: cross entropy over the server's logits plus
// the exact logit gradient that goes back over the wire.
struct ClientLoss {
  double loss = 0.0;
  Tensor dlogits;
};

inline ClientLoss client_loss(const Tensor& logits,
                              std::span<const int> labels) {
  if (logits.rows() != labels.size())
    throw ProtocolError("client_loss: logits rows do not match label count");
  ClientLoss out;
  out.dlogits = Tensor::zeros(logits.rows(), logits.cols());
  out.loss = cross_entropy_value(logits, labels, &out.dlogits);
  return out;
}

}  // namespace sa
