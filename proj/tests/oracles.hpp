#pragma once

// Reference implementations used only by the tests. Everything here is a
// plain double-precision scalar loop written independently of the library,
// so agreement is meaningful evidence and not self-confirmation.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

inline double dot(const double* a, const double* b, std::size_t d) {
  double s = 0;
  for (std::size_t j = 0; j < d; ++j) s += a[j] * b[j];
  return s;
}

inline double cosine(const double* a, const double* b, std::size_t d) {
  double num = dot(a, b, d);
  double den = std::sqrt(dot(a, a, d)) * std::sqrt(dot(b, b, d));
  double c = num / den;
  if (c > 1.0) c = 1.0;
  if (c < -1.0) c = -1.0;
  return c;
}

inline Vec softmax(const Vec& scores, double tau) {
  double mx = scores[0];
  for (double v : scores) mx = std::max(mx, v);
  Vec out(scores.size());
  double z = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp((scores[i] - mx) / tau);
    z += out[i];
  }
  for (auto& v : out) v /= z;
  return out;
}

inline double kl(const Vec& p, const Vec& q) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

// Instance-discrimination loss: anchors z (rows), positives zt (rows),
// denominator over the 2n-1 other embeddings of both batches.
inline double contrastive_two_view(const Vec& z, const Vec& zt, std::size_t n, std::size_t d,
                                   double tau) {
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* zi = z.data() + i * d;
    double denom = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) denom += std::exp(cosine(zi, z.data() + j * d, d) / tau);
      denom += std::exp(cosine(zi, zt.data() + j * d, d) / tau);
    }
    double pos = cosine(zi, zt.data() + i * d, d) / tau;
    total += std::log(denom) - pos;
  }
  return total / double(n);
}

// Normalized-regression loss: squared distance of unit vectors, mean over rows.
inline double byol_regression(const Vec& pred, const Vec& target, std::size_t n, std::size_t d) {
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double np = std::sqrt(dot(pred.data() + i * d, pred.data() + i * d, d));
    double nt = std::sqrt(dot(target.data() + i * d, target.data() + i * d, d));
    for (std::size_t j = 0; j < d; ++j) {
      double diff = pred[i * d + j] / np - target[i * d + j] / nt;
      total += diff * diff;
    }
  }
  return total / double(n);
}

// Relationship distribution of one anchor against nr reference rows.
inline Vec relation_row(const double* anchor, const Vec& refs, std::size_t nr, std::size_t d,
                        double tau) {
  Vec scores(nr);
  for (std::size_t k = 0; k < nr; ++k) scores[k] = cosine(anchor, refs.data() + k * d, d);
  return softmax(scores, tau);
}

// Mean symmetrized divergence to the midpoint distribution over paired rows.
inline double jsd_pairs(const Vec& r, const Vec& rt, std::size_t n, std::size_t m) {
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Vec a(r.begin() + i * m, r.begin() + (i + 1) * m);
    Vec b(rt.begin() + i * m, rt.begin() + (i + 1) * m);
    Vec mid(m);
    for (std::size_t j = 0; j < m; ++j) mid[j] = 0.5 * (a[j] + b[j]);
    total += 0.5 * kl(a, mid) + 0.5 * kl(b, mid);
  }
  return total / double(n);
}

// Cross-model contrastive loss: positive is the global embedding of the
// augmented view; denominator over the other local embeddings and the other
// global embeddings of the plain batch (optionally plus the positive term).
inline double cross_model_contrastive(const Vec& zl, const Vec& ztg, const Vec& zg,
                                      std::size_t n, std::size_t d, double tau,
                                      bool include_positive) {
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* a = zl.data() + i * d;
    double denom = 0;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      denom += std::exp(cosine(a, zl.data() + k * d, d) / tau);
      denom += std::exp(cosine(a, zg.data() + k * d, d) / tau);
    }
    double pos = cosine(a, ztg.data() + i * d, d) / tau;
    if (include_positive) denom += std::exp(pos);
    total += std::log(denom) - pos;
  }
  return total / double(n);
}

// Central finite differences of a scalar function of a flat parameter vector.
inline Vec fd_gradient(const std::function<double(const Vec&)>& f, Vec x, double h = 1e-5) {
  Vec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double orig = x[i];
    x[i] = orig + h;
    double fp = f(x);
    x[i] = orig - h;
    double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double max_rel_err(const Vec& got, const Vec& want, double floor = 1e-8) {
  double worst = 0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    double denom = std::max({std::abs(got[i]), std::abs(want[i]), floor});
    worst = std::max(worst, std::abs(got[i] - want[i]) / denom);
  }
  return worst;
}

}  // namespace oracle
