#pragma once

// Representation quality measurement: linear evaluation on frozen backbone
// embeddings, semi-supervised fine-tuning of the whole network, and the
// local-vs-global / inter-class embedding angle analyses.

#include <cmath>
#include <cstdint>
#include <iostream>
#include <random>
#include <stdexcept>
#include <vector>

#include "fedx/data.hpp"
#include "fedx/encoder.hpp"
#include "fedx/optim.hpp"
#include "fedx/tensor.hpp"

namespace fedx {

struct EvalReport {
  double top1 = 0;
  std::vector<double> per_class;
  double label_ratio = 1.0;
  std::size_t epochs = 0;
};

struct AngleReport {
  std::vector<double> per_sample_deg;                  // local vs global, per test sample
  double mean_angle_deg = 0;
  std::vector<double> per_class_mean_deg;              // local vs global, by class
  std::vector<double> inter_class_deg;                 // K x K prototype angles
  double mean_inter_class_deg = 0;                     // off-diagonal mean
};

namespace detail {

constexpr double kRadToDeg = 57.29577951308232;

// Forward pass over one index set without gradient tracking; rows of
// embeddings. Inputs are standardized with the dataset's per-feature
// statistics, matching the training-time pipeline. The whole set is embedded
// as one batch so that the encoder's output standardization sees the full
// evaluation statistics.
template <typename T>
std::vector<T> embed_all(const ModelParams<T>& params,
                         const Dataset& ds, const std::vector<std::uint32_t>& idx,
                         Head head = Head::none) {
  auto frozen = params.clone(/*trainable=*/false);
  auto stats = feature_stats(ds);
  std::size_t d_in = ds.sample_dim();
  auto rows = ds.gather(idx);
  stats.apply(rows);
  std::vector<T> v(rows.begin(), rows.end());
  auto z = embed(frozen, Tensor<T>::constant({idx.size(), d_in}, std::move(v)), head);
  return z.value();
}

template <typename T>
double angle_deg(const T* a, const T* b, std::size_t d) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t j = 0; j < d; ++j) {
    dot += double(a[j]) * double(b[j]);
    na += double(a[j]) * double(a[j]);
    nb += double(b[j]) * double(b[j]);
  }
  if (!(na > 0) || !(nb > 0)) throw std::domain_error("angle: zero-norm embedding");
  double c = std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
  return std::acos(c) * kRadToDeg;
}

// Mean cross-entropy of logits against labels, via tracked tensors.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::uint8_t>& labels) {
  std::size_t n = logits.shape()[0], k = logits.shape()[1];
  std::vector<T> onehot(n * k, T(0));
  for (std::size_t i = 0; i < n; ++i) onehot[i * k + labels[i]] = T(1);
  auto mask = Tensor<T>::constant({n, k}, std::move(onehot));
  auto logp = log_(softmax_rows(logits, T(1)));
  return scale(mean(rowsum(mul(logp, mask))), T(-1));
}

template <typename T>
EvalReport score(const std::vector<T>& logits, std::size_t k,
                 const std::vector<std::uint8_t>& labels, std::size_t class_count) {
  EvalReport rep;
  std::vector<std::size_t> correct(class_count, 0), total(class_count, 0);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    ++total[labels[i]];
    if (best == labels[i]) {
      ++hits;
      ++correct[labels[i]];
    }
  }
  rep.top1 = labels.empty() ? 0.0 : double(hits) / double(labels.size());
  for (std::size_t c = 0; c < class_count; ++c)
    rep.per_class.push_back(total[c] ? double(correct[c]) / double(total[c]) : 0.0);
  return rep;
}

inline std::vector<std::uint8_t> labels_of(const Dataset& ds,
                                           const std::vector<std::uint32_t>& idx) {
  std::vector<std::uint8_t> out;
  for (auto i : idx) out.push_back(ds.labels[i]);
  return out;
}

}  // namespace detail

struct LinearEvalOptions {
  std::size_t epochs = 100;
  double lr = 0.03;
  double momentum = 0.9;
  std::size_t batch = 128;
  std::uint64_t seed = 0;
};

// Deterministic stratified split into train/test index lists.
inline std::pair<std::vector<std::uint32_t>, std::vector<std::uint32_t>> stratified_split(
    const Dataset& ds, double test_fraction, std::uint64_t seed) {
  std::vector<std::vector<std::uint32_t>> by_class(ds.class_count);
  for (std::size_t i = 0; i < ds.count(); ++i) by_class[ds.labels[i]].push_back(std::uint32_t(i));
  std::mt19937_64 rng(seed);
  std::vector<std::uint32_t> train, test;
  for (auto& cls : by_class) {
    detail::fisher_yates(cls, rng);
    std::size_t ntest = std::size_t(std::round(test_fraction * double(cls.size())));
    test.insert(test.end(), cls.begin(), cls.begin() + ntest);
    train.insert(train.end(), cls.begin() + ntest, cls.end());
  }
  return {train, test};
}

// Trains a fresh linear classifier on frozen backbone embeddings and reports
// top-1 accuracy on the test split. Never mutates the backbone.
template <typename T>
EvalReport linear_evaluate(const ModelParams<T>& backbone, const Dataset& ds,
                           const std::vector<std::uint32_t>& train_idx,
                           const std::vector<std::uint32_t>& test_idx,
                           const LinearEvalOptions& opts = {}) {
  std::size_t d = backbone.descriptor().embed_dim;
  std::size_t k = ds.class_count;
  auto ztrain = detail::embed_all(backbone, ds, train_idx);
  auto ztest = detail::embed_all(backbone, ds, test_idx);
  auto ytrain = detail::labels_of(ds, train_idx);
  auto ytest = detail::labels_of(ds, test_idx);

  std::vector<bool> seen(k, false);
  for (auto l : ytrain) seen[l] = true;
  for (std::size_t c = 0; c < k; ++c)
    if (!seen[c])
      std::cerr << "warning: class " << c << " absent from linear-eval training labels\n";

  auto w = Tensor<T>::zeros({d, k}, /*requires_grad=*/true);
  auto b = Tensor<T>::zeros({k}, /*requires_grad=*/true);
  SgdState<T> opt(SgdConfig<T>{T(opts.lr), T(opts.momentum), T(0)});
  std::mt19937_64 rng(opts.seed);

  std::vector<std::uint32_t> order(train_idx.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = std::uint32_t(i);
  for (std::size_t e = 0; e < opts.epochs; ++e) {
    detail::fisher_yates(order, rng);
    for (std::size_t off = 0; off < order.size(); off += opts.batch) {
      std::size_t n = std::min(opts.batch, order.size() - off);
      std::vector<T> xb(n * d);
      std::vector<std::uint8_t> yb(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t r = order[off + i];
        std::copy(ztrain.begin() + r * d, ztrain.begin() + (r + 1) * d, xb.begin() + i * d);
        yb[i] = ytrain[r];
      }
      auto logits = add_rowvec(matmul(Tensor<T>::constant({n, d}, std::move(xb)), w), b);
      detail::cross_entropy(logits, yb).backward();
      opt.step("w", w.value(), w.grad());
      opt.step("b", b.value(), b.grad());
      w.zero_grad();
      b.zero_grad();
    }
  }

  std::size_t nt = test_idx.size();
  auto logits = add_rowvec(
      matmul(Tensor<T>::constant({nt, d}, std::vector<T>(ztest.begin(), ztest.end())), w), b);
  auto rep = detail::score(logits.value(), k, ytest, k);
  rep.epochs = opts.epochs;
  rep.label_ratio = 1.0;
  return rep;
}

struct FinetuneOptions {
  double label_ratio = 0.1;
  std::size_t epochs = 100;
  double lr = 1e-3;
  double momentum = 0.9;
  std::size_t batch = 128;
  std::uint64_t seed = 0;
};

// Per-class proportional labeled subset, then full-network fine-tuning with a
// classifier head on top of the backbone.
template <typename T>
EvalReport semi_supervised_finetune(const ModelParams<T>& model, const Dataset& ds,
                                    const std::vector<std::uint32_t>& train_idx,
                                    const std::vector<std::uint32_t>& test_idx,
                                    const FinetuneOptions& opts) {
  if (!(opts.label_ratio > 0.0 && opts.label_ratio <= 1.0))
    throw std::invalid_argument("finetune: label_ratio must be in (0,1]");
  std::size_t k = ds.class_count;

  std::vector<std::vector<std::uint32_t>> by_class(k);
  for (auto i : train_idx) by_class[ds.labels[i]].push_back(i);
  std::mt19937_64 rng(opts.seed);
  std::vector<std::uint32_t> labeled;
  for (std::size_t c = 0; c < k; ++c) {
    auto cls = by_class[c];
    detail::fisher_yates(cls, rng);
    std::size_t take = std::size_t(std::round(opts.label_ratio * double(cls.size())));
    if (take == 0 && !cls.empty())
      std::cerr << "warning: class " << c << " has no labeled samples at ratio "
                << opts.label_ratio << "\n";
    labeled.insert(labeled.end(), cls.begin(), cls.begin() + take);
  }
  if (labeled.empty()) throw std::invalid_argument("finetune: labeled subset is empty");

  auto net = model.subset({ParamRole::backbone}, /*trainable=*/true);
  std::size_t d = net.descriptor().embed_dim, d_in = ds.sample_dim();
  auto w = Tensor<T>::zeros({d, k}, true);
  auto b = Tensor<T>::zeros({k}, true);
  SgdState<T> opt(SgdConfig<T>{T(opts.lr), T(opts.momentum), T(0)});

  auto stats = feature_stats(ds);
  std::vector<std::uint32_t> order = labeled;
  std::size_t batch = std::min(opts.batch, order.size());
  for (std::size_t e = 0; e < opts.epochs; ++e) {
    detail::fisher_yates(order, rng);
    for (std::size_t off = 0; off + batch <= order.size(); off += batch) {
      std::vector<std::uint32_t> part(order.begin() + off, order.begin() + off + batch);
      auto rows = ds.gather(part);
      stats.apply(rows);
      std::vector<T> xb(rows.begin(), rows.end());
      auto z = embed(net, Tensor<T>::constant({batch, d_in}, std::move(xb)));
      auto logits = add_rowvec(matmul(z, w), b);
      detail::cross_entropy(logits, detail::labels_of(ds, part)).backward();
      for (auto& p : net.params()) opt.step(p.name, p.tensor.value(), p.tensor.grad());
      opt.step("head.w", w.value(), w.grad());
      opt.step("head.b", b.value(), b.grad());
      net.zero_grad();
      w.zero_grad();
      b.zero_grad();
    }
  }

  auto ztest = detail::embed_all(net, ds, test_idx);
  std::size_t nt = test_idx.size();
  auto logits = add_rowvec(
      matmul(Tensor<T>::constant({nt, d}, std::vector<T>(ztest.begin(), ztest.end())), w), b);
  auto rep = detail::score(logits.value(), k, detail::labels_of(ds, test_idx), k);
  rep.epochs = opts.epochs;
  rep.label_ratio = opts.label_ratio;
  return rep;
}

// Per-sample angle between local and global backbone embeddings, in degrees.
template <typename T>
AngleReport embedding_angle(const ModelParams<T>& local, const ModelParams<T>& global,
                            const Dataset& ds, const std::vector<std::uint32_t>& idx) {
  auto zl = detail::embed_all(local, ds, idx);
  auto zg = detail::embed_all(global, ds, idx);
  std::size_t d = local.descriptor().embed_dim;
  AngleReport rep;
  std::vector<double> class_sum(ds.class_count, 0);
  std::vector<std::size_t> class_n(ds.class_count, 0);
  double total = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    double a = detail::angle_deg(zl.data() + i * d, zg.data() + i * d, d);
    rep.per_sample_deg.push_back(a);
    total += a;
    class_sum[ds.labels[idx[i]]] += a;
    ++class_n[ds.labels[idx[i]]];
  }
  rep.mean_angle_deg = idx.empty() ? 0.0 : total / double(idx.size());
  for (std::size_t c = 0; c < ds.class_count; ++c)
    rep.per_class_mean_deg.push_back(class_n[c] ? class_sum[c] / double(class_n[c]) : 0.0);
  return rep;
}

// K x K matrix of angles between class prototypes (mean embeddings).
template <typename T>
std::vector<double> inter_class_angles(const ModelParams<T>& model, const Dataset& ds,
                                       const std::vector<std::uint32_t>& idx) {
  std::size_t k = ds.class_count, d = model.descriptor().embed_dim;
  auto z = detail::embed_all(model, ds, idx);
  std::vector<double> proto(k * d, 0);
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::size_t c = ds.labels[idx[i]];
    for (std::size_t j = 0; j < d; ++j) proto[c * d + j] += double(z[i * d + j]);
    ++counts[c];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] == 0) throw std::invalid_argument("inter_class_angles: empty class");
    for (std::size_t j = 0; j < d; ++j) proto[c * d + j] /= double(counts[c]);
  }
  std::vector<double> angles(k * k, 0);
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b2 = a + 1; b2 < k; ++b2) {
      double ang = detail::angle_deg(proto.data() + a * d, proto.data() + b2 * d, d);
      angles[a * k + b2] = ang;
      angles[b2 * k + a] = ang;
    }
  return angles;
}

inline double mean_offdiagonal(const std::vector<double>& mat, std::size_t k) {
  double s = 0;
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = 0; b < k; ++b)
      if (a != b) s += mat[a * k + b];
  return k > 1 ? s / double(k * (k - 1)) : 0.0;
}

}  // namespace fedx
