#pragma once

// Training objectives: local contrastive (SimCLR-style instance
// discrimination or BYOL-style regression), relational losses over
// relationship vectors, and their global counterparts against the frozen
// global model. All functions return scalar tensors and average over anchors.

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "fedx/tensor.hpp"

namespace fedx {

template <typename T>
struct RelationVector {
  std::vector<T> probs;
  T tau;
};

namespace detail {

// Mask [n,m] of ones with zeros at (i, i+offset).
template <typename T>
Tensor<T> ones_except_diag(std::size_t n, std::size_t m, std::size_t offset) {
  std::vector<T> v(n * m, T(1));
  for (std::size_t i = 0; i < n; ++i) v[i * m + i + offset] = T(0);
  return Tensor<T>::constant({n, m}, std::move(v));
}

template <typename T>
Tensor<T> diag_mask(std::size_t n, std::size_t m, std::size_t offset) {
  std::vector<T> v(n * m, T(0));
  for (std::size_t i = 0; i < n; ++i) v[i * m + i + offset] = T(1);
  return Tensor<T>::constant({n, m}, std::move(v));
}

template <typename T>
void check_batch(const Tensor<T>& z, const Tensor<T>& zt, const char* who) {
  if (z.shape().size() != 2 || z.shape() != zt.shape())
    throw std::invalid_argument(std::string(who) + ": batches must be index-aligned matrices");
}

}  // namespace detail

// Instance-discrimination loss over a batch and its augmented views. For each
// anchor z_i the positive is zt_i; the denominator runs over every other
// embedding of both batches (2n-1 terms, positive included).
template <typename T>
Tensor<T> local_contrastive_simclr(const Tensor<T>& z, const Tensor<T>& zt, T tau) {
  detail::check_batch(z, zt, "local_contrastive_simclr");
  std::size_t n = z.shape()[0];
  if (n < 2) throw std::invalid_argument("local_contrastive_simclr: need n >= 2");
  if (!(tau > T(0))) throw std::invalid_argument("local_contrastive_simclr: tau must be > 0");

  auto sims = scale(matmul_nt(row_normalize(z), row_normalize(concat_rows(z, zt))),
                    T(1) / tau);                                    // [n, 2n]
  auto denom = rowsum(mul(exp_(sims), detail::ones_except_diag<T>(n, 2 * n, 0)));
  auto pos = rowsum(mul(sims, detail::diag_mask<T>(n, 2 * n, n)));  // sim(z_i, zt_i)/tau
  return mean(sub(log_(denom), pos));
}

// BYOL-style regression: mean squared distance between unit-normalized
// predictions and unit-normalized EMA targets. The target side carries no
// gradient.
template <typename T>
Tensor<T> local_contrastive_byol(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::check_batch(pred, target, "local_contrastive_byol");
  auto d = sub(row_normalize(pred), row_normalize(detach(target)));
  return mean(rowsum(mul(d, d)));
}

// Rows of softmaxed cosine similarities between each anchor and the reference
// batch; one relationship distribution per anchor.
template <typename T>
Tensor<T> relationship_vectors(const Tensor<T>& anchors, const Tensor<T>& refs, T tau) {
  if (anchors.shape().size() != 2 || refs.shape().size() != 2 ||
      anchors.shape()[1] != refs.shape()[1])
    throw std::invalid_argument("relationship_vectors: dimension mismatch");
  if (refs.shape()[0] == 0)
    throw std::invalid_argument("relationship_vectors: empty reference batch");
  return softmax_rows(matmul_nt(row_normalize(anchors), row_normalize(refs)), tau);
}

template <typename T>
RelationVector<T> relationship_vector(const Tensor<T>& anchor, const Tensor<T>& refs, T tau) {
  auto r = relationship_vectors(reshape(anchor, {1, anchor.numel()}), refs, tau);
  return {r.value(), tau};
}

// Jensen-Shannon divergence between paired relationship distributions,
// averaged over anchors. The mixture target is gradient-detached.
template <typename T>
Tensor<T> relational_loss(const Tensor<T>& r, const Tensor<T>& rt) {
  detail::check_batch(r, rt, "relational_loss");
  std::vector<T> mv(r.numel());
  for (std::size_t i = 0; i < mv.size(); ++i)
    mv[i] = (r.value()[i] + rt.value()[i]) / T(2);
  auto m = Tensor<T>::constant(r.shape(), std::move(mv));
  return mean(add(scale(kl_rows(r, m), T(0.5)), scale(kl_rows(rt, m), T(0.5))));
}

// Contrastive alignment of projected local embeddings against the frozen
// global model. Positive: the global embedding of the anchor's augmented
// view. Negatives: the other local embeddings plus the other global
// embeddings of the un-augmented batch (2n-2 terms; the positive is not in
// the denominator unless include_positive is set). Global embeddings are
// detached internally.
template <typename T>
Tensor<T> global_contrastive(const Tensor<T>& z_local, const Tensor<T>& zt_global,
                             const Tensor<T>& z_global, T tau, bool include_positive = false) {
  detail::check_batch(z_local, zt_global, "global_contrastive");
  detail::check_batch(z_local, z_global, "global_contrastive");
  std::size_t n = z_local.shape()[0];
  if (n < 2) throw std::invalid_argument("global_contrastive: need n >= 2");
  if (!(tau > T(0))) throw std::invalid_argument("global_contrastive: tau must be > 0");

  auto a = row_normalize(z_local);
  auto s_ll = scale(matmul_nt(a, row_normalize(z_local)), T(1) / tau);
  auto s_lg = scale(matmul_nt(a, row_normalize(detach(z_global))), T(1) / tau);
  auto s_pos = rowsum(mul(scale(matmul_nt(a, row_normalize(detach(zt_global))), T(1) / tau),
                          detail::diag_mask<T>(n, n, 0)));
  auto off = detail::ones_except_diag<T>(n, n, 0);
  auto denom = add(rowsum(mul(exp_(s_ll), off)), rowsum(mul(exp_(s_lg), off)));
  if (include_positive) denom = add(denom, exp_(s_pos));
  return mean(sub(log_(denom), s_pos));
}

// Relationship distributions of the projected local views against the frozen
// global embeddings of the reference batch.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> global_relationship_vectors(const Tensor<T>& z_local,
                                                            const Tensor<T>& zt_local,
                                                            const Tensor<T>& global_refs,
                                                            T tau) {
  auto refs = detach(global_refs);
  return {relationship_vectors(z_local, refs, tau),
          relationship_vectors(zt_local, refs, tau)};
}

template <typename T>
Tensor<T> total_local_kd(const Tensor<T>& contrastive, const Tensor<T>& relational) {
  return add(contrastive, relational);
}

template <typename T>
Tensor<T> total_global_kd(const Tensor<T>& contrastive, const Tensor<T>& relational) {
  return add(contrastive, relational);
}

template <typename T>
Tensor<T> total_kd(const Tensor<T>& local_kd, const Tensor<T>& global_kd) {
  return add(local_kd, global_kd);
}

}  // namespace fedx
