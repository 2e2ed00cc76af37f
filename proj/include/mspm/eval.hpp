#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "mspm/data/batching.hpp"
#include "mspm/data/patch_set.hpp"
#include "mspm/model/model.hpp"

namespace mspm {

struct RecallPoint {
  float fpr = 0.0f;
  float threshold = 0.0f;
};

// Threshold is the k-th smallest positive distance, k = ceil(recall * n);
// negatives at or below it count as false positives. The product is shrunk by
// two float ulps so 0.8f (slightly above 0.8) still gives k = 80 for n = 100.
inline RecallPoint fpr_at_recall(std::vector<float> pos_d, const std::vector<float>& neg_d, float recall) {
  if (pos_d.empty() || neg_d.empty()) throw InvalidArgument("fpr_at_recall needs positive and negative distances");
  if (!(recall > 0.0f && recall <= 1.0f)) throw InvalidArgument("recall must lie in (0, 1]");
  std::sort(pos_d.begin(), pos_d.end());
  const double n = static_cast<double>(pos_d.size());
  auto k = static_cast<std::size_t>(std::ceil(static_cast<double>(recall) * n * (1.0 - 1.2e-7)));
  k = std::clamp<std::size_t>(k, 1, pos_d.size());
  const float t = pos_d[k - 1];
  const auto fp = std::count_if(neg_d.begin(), neg_d.end(), [t](float d) { return d <= t; });
  return {static_cast<float>(static_cast<double>(fp) / static_cast<double>(neg_d.size())), t};
}

struct Histogram {
  float lo = 0.0f;
  float hi = 2.0f;
  std::vector<std::int64_t> pos, neg;
};

inline Histogram distance_histogram(const std::vector<float>& pos_d, const std::vector<float>& neg_d, int bins = 20,
                                    float lo = 0.0f, float hi = 2.0f) {
  Histogram h{lo, hi, std::vector<std::int64_t>(bins, 0), std::vector<std::int64_t>(bins, 0)};
  auto bin = [&](float d) {
    const auto b = static_cast<int>(std::floor((d - lo) / (hi - lo) * static_cast<float>(bins)));
    return std::clamp(b, 0, bins - 1);
  };
  for (float d : pos_d) ++h.pos[bin(d)];
  for (float d : neg_d) ++h.neg[bin(d)];
  return h;
}

struct EvalReport {
  float fpr95 = 0.0f;
  float fpr99 = 0.0f;
  float threshold_at_95 = 0.0f;
  std::int64_t n_pos = 0;
  std::int64_t n_neg = 0;
  Histogram histogram;

  std::string to_string() const {
    std::ostringstream os;
    os.precision(9);
    os << "fpr95=" << fpr95 << "\nfpr99=" << fpr99 << "\nthreshold_at_95=" << threshold_at_95 << "\nn_pos=" << n_pos
       << "\nn_neg=" << n_neg << "\nhist_range=" << histogram.lo << "," << histogram.hi << "\nhist_pos=";
    for (std::size_t i = 0; i < histogram.pos.size(); ++i) os << (i ? "," : "") << histogram.pos[i];
    os << "\nhist_neg=";
    for (std::size_t i = 0; i < histogram.neg.size(); ++i) os << (i ? "," : "") << histogram.neg[i];
    os << "\n";
    return os.str();
  }
};

inline EvalReport report_from_distances(const std::vector<float>& pos_d, const std::vector<float>& neg_d) {
  if (pos_d.empty() || neg_d.empty()) {
    throw InvalidArgument("evaluation needs at least one positive and one negative pair");
  }
  EvalReport r;
  const auto p95 = fpr_at_recall(pos_d, neg_d, 0.95f);
  r.fpr95 = p95.fpr;
  r.threshold_at_95 = p95.threshold;
  r.fpr99 = fpr_at_recall(pos_d, neg_d, 0.99f).fpr;
  r.n_pos = static_cast<std::int64_t>(pos_d.size());
  r.n_neg = static_cast<std::int64_t>(neg_d.size());
  r.histogram = distance_histogram(pos_d, neg_d);
  return r;
}

// Maps a standardized batch [b, C, H, W] to descriptors [b, D].
using Embedder = std::function<Tensor(const Tensor&)>;

inline Embedder eval_embedder(Model& model) {
  return [&model](const Tensor& x) {
    NoGradScope guard;
    return model.embed(x, Context{Mode::Eval, nullptr}).desc;
  };
}

// Per-pair Euclidean distances between the A and B descriptors, in set order.
inline std::vector<float> pair_distances(const Embedder& embed, const PatchPairSet& set, int batch_size = 64,
                                         Normalization norm = Normalization::PerPatch) {
  auto spec = BatchSpec::evaluation(batch_size);
  spec.normalization = norm;
  BatchStream stream(set, spec);
  std::vector<float> out;
  out.reserve(set.size());
  Batch b;
  while (stream.next(b)) {
    const Tensor da = embed(b.x), db = embed(b.y);
    const auto d = da.dim(1);
    const auto pa = da.data(), pb = db.data();
    for (std::int64_t i = 0; i < da.dim(0); ++i) {
      double s = 0.0;
      for (std::int64_t k = 0; k < d; ++k) {
        const double diff = static_cast<double>(pa[i * d + k]) - pb[i * d + k];
        s += diff * diff;
      }
      out.push_back(static_cast<float>(std::sqrt(s)));
    }
  }
  return out;
}

inline EvalReport evaluate(const Embedder& embed, const PatchPairSet& set, int batch_size = 64,
                           Normalization norm = Normalization::PerPatch) {
  if (!set.labeled) throw InvalidArgument("evaluation set carries no labels");
  const auto d = pair_distances(embed, set, batch_size, norm);
  std::vector<float> pos, neg;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto l = set.pairs[i].label;
    if (l == Label::Unlabeled) throw InvalidArgument("pair " + std::to_string(i) + " is unlabeled");
    (l == Label::Match ? pos : neg).push_back(d[i]);
  }
  return report_from_distances(pos, neg);
}

inline EvalReport evaluate(Model& model, const PatchPairSet& set, int batch_size = 64,
                           Normalization norm = Normalization::PerPatch) {
  return evaluate(eval_embedder(model), set, batch_size, norm);
}

}  // namespace mspm
