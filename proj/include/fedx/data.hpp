#pragma once

// Dataset container and I/O (FXDS binary, CSV), Dirichlet non-IID
// partitioning, stochastic two-view augmentation, and epoch batch sampling.
// Labels are carried for partitioning and evaluation only.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedx/encoder.hpp"  // unit_uniform

namespace fedx {

struct Dataset {
  std::size_t channels = 1, height = 1, width = 1, class_count = 0;
  std::vector<float> pixels;          // count * channels*height*width, values in [0,1]
  std::vector<std::uint8_t> labels;   // one per sample, < class_count

  std::size_t sample_dim() const { return channels * height * width; }
  std::size_t count() const { return labels.size(); }

  void validate() const {
    if (class_count == 0) throw std::invalid_argument("dataset: class_count must be positive");
    if (pixels.size() != count() * sample_dim())
      throw std::invalid_argument("dataset: pixel buffer size inconsistent with count/shape");
    for (auto l : labels)
      if (l >= class_count) throw std::invalid_argument("dataset: label out of range");
    for (float v : pixels)
      if (!(v >= 0.0f && v <= 1.0f))
        throw std::invalid_argument("dataset: pixel value outside [0,1]");
  }

  // Row-major matrix of the selected samples, one flattened sample per row.
  std::vector<float> gather(const std::vector<std::uint32_t>& idx) const {
    std::size_t d = sample_dim();
    std::vector<float> out(idx.size() * d);
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::memcpy(out.data() + i * d, pixels.data() + std::size_t(idx[i]) * d,
                  d * sizeof(float));
    return out;
  }
};

// ---- FXDS binary container ----
// magic "FXDS", u32 version=1, u32 count, u32 channels, u32 height,
// u32 width, u32 class_count, f32 pixels (instance-major), u8 labels.

namespace detail {

template <typename U>
void write_pod(std::ostream& os, const U& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_pod(std::istream& is, const char* what) {
  U v;
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) throw std::runtime_error(std::string("read error: truncated ") + what);
  return v;
}

}  // namespace detail

inline void save_fxds(const Dataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("fxds: cannot open " + path + " for writing");
  os.write("FXDS", 4);
  detail::write_pod(os, std::uint32_t{1});
  detail::write_pod(os, std::uint32_t(ds.count()));
  detail::write_pod(os, std::uint32_t(ds.channels));
  detail::write_pod(os, std::uint32_t(ds.height));
  detail::write_pod(os, std::uint32_t(ds.width));
  detail::write_pod(os, std::uint32_t(ds.class_count));
  os.write(reinterpret_cast<const char*>(ds.pixels.data()),
           std::streamsize(ds.pixels.size() * sizeof(float)));
  os.write(reinterpret_cast<const char*>(ds.labels.data()), std::streamsize(ds.labels.size()));
  if (!os) throw std::runtime_error("fxds: write failure on " + path);
}

inline Dataset load_fxds(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("fxds: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "FXDS", 4) != 0)
    throw std::runtime_error("fxds: bad magic in " + path);
  auto version = detail::read_pod<std::uint32_t>(is, "version");
  if (version != 1) throw std::runtime_error("fxds: unsupported version");
  Dataset ds;
  auto count = detail::read_pod<std::uint32_t>(is, "count");
  ds.channels = detail::read_pod<std::uint32_t>(is, "channels");
  ds.height = detail::read_pod<std::uint32_t>(is, "height");
  ds.width = detail::read_pod<std::uint32_t>(is, "width");
  ds.class_count = detail::read_pod<std::uint32_t>(is, "class_count");
  std::size_t npix = std::size_t(count) * ds.sample_dim();
  ds.pixels.resize(npix);
  is.read(reinterpret_cast<char*>(ds.pixels.data()), std::streamsize(npix * sizeof(float)));
  if (!is)
    throw std::runtime_error("fxds: truncated pixel payload, expected " +
                             std::to_string(npix * sizeof(float)) + " bytes");
  ds.labels.resize(count);
  is.read(reinterpret_cast<char*>(ds.labels.data()), std::streamsize(count));
  if (!is) throw std::runtime_error("fxds: truncated label payload, expected " +
                                    std::to_string(count) + " bytes");
  ds.validate();
  return ds;
}

// ---- CSV: header "label,p0,p1,..."; one row per sample; shape 1x1xP. ----

inline Dataset load_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("csv: cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("csv: missing header");
  std::size_t cols = std::count(line.begin(), line.end(), ',') + 1;
  if (cols < 2 || line.rfind("label,", 0) != 0)
    throw std::runtime_error("csv: header must start with 'label,p0,...'");
  std::size_t dim = cols - 1;
  Dataset ds;
  ds.channels = 1;
  ds.height = 1;
  ds.width = dim;
  std::size_t row = 1;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::size_t c = 0;
    while (std::getline(ls, cell, ',')) {
      if (c == 0)
        ds.labels.push_back(std::uint8_t(std::stoul(cell)));
      else
        ds.pixels.push_back(std::stof(cell));
      ++c;
    }
    if (c != cols)
      throw std::runtime_error("csv: row " + std::to_string(row) + " has " + std::to_string(c) +
                               " columns, header has " + std::to_string(cols));
    ++row;
  }
  ds.class_count = ds.labels.empty()
                       ? 1
                       : std::size_t(*std::max_element(ds.labels.begin(), ds.labels.end())) + 1;
  ds.validate();
  return ds;
}

inline void save_csv(const Dataset& ds, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("csv: cannot open " + path + " for writing");
  os << "label";
  for (std::size_t j = 0; j < ds.sample_dim(); ++j) os << ",p" << j;
  os << "\n";
  for (std::size_t i = 0; i < ds.count(); ++i) {
    os << unsigned(ds.labels[i]);
    for (std::size_t j = 0; j < ds.sample_dim(); ++j)
      os << ',' << ds.pixels[i * ds.sample_dim() + j];
    os << "\n";
  }
}

inline Dataset load_dataset(const std::string& path, const std::string& format) {
  if (format == "fxds") return load_fxds(path);
  if (format == "csv") return load_csv(path);
  throw std::invalid_argument("load_dataset: unknown format '" + format + "'");
}

// ---- synthetic generator (demo/test data) ----

struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t per_class = 500;
  std::size_t channels = 3, height = 8, width = 8;
  double noise = 0.22;      // stddev of additive pixel noise
  double overlap = 0.35;    // max blend weight of a confuser class template
  std::uint64_t seed = 0;
};

inline double unit_normal(std::mt19937_64& rng) {
  double u1 = unit_uniform(rng), u2 = unit_uniform(rng);
  u1 = std::max(u1, 1e-12);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

// Class-template images blended with a confuser class plus pixel noise.
inline Dataset make_synthetic(const SyntheticSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  std::size_t d = spec.channels * spec.height * spec.width;
  std::vector<std::vector<float>> templates(spec.classes, std::vector<float>(d));
  for (auto& t : templates) {
    for (auto& v : t) v = float(0.15 + 0.7 * unit_uniform(rng));
    // box blur across width for spatial coherence
    std::vector<float> s = t;
    for (std::size_t c = 0; c < spec.channels; ++c)
      for (std::size_t y = 0; y < spec.height; ++y)
        for (std::size_t x = 0; x < spec.width; ++x) {
          std::size_t i = (c * spec.height + y) * spec.width + x;
          float acc = s[i];
          int k = 1;
          if (x > 0) { acc += s[i - 1]; ++k; }
          if (x + 1 < spec.width) { acc += s[i + 1]; ++k; }
          t[i] = acc / float(k);
        }
  }
  Dataset ds;
  ds.channels = spec.channels;
  ds.height = spec.height;
  ds.width = spec.width;
  ds.class_count = spec.classes;
  ds.pixels.reserve(spec.classes * spec.per_class * d);
  for (std::size_t c = 0; c < spec.classes; ++c)
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      std::size_t confuser = rng() % spec.classes;
      double w = spec.overlap * unit_uniform(rng);
      for (std::size_t j = 0; j < d; ++j) {
        double v = (1.0 - w) * templates[c][j] + w * templates[confuser][j] +
                   spec.noise * unit_normal(rng);
        ds.pixels.push_back(float(std::clamp(v, 0.0, 1.0)));
      }
      ds.labels.push_back(std::uint8_t(c));
    }
  return ds;
}

// ---- Dirichlet partitioning ----

struct PartitionSpec {
  std::size_t clients = 0;
  double beta = 0.5;
  std::uint64_t seed = 0;
  std::uint32_t retries = 0;  // resamples needed to satisfy the size floor
  std::vector<std::vector<std::uint32_t>> client_indices;
  std::vector<double> proportions;  // class-major [class_count x clients]
  std::size_t class_count = 0;
};

namespace detail {

// Marsaglia-Tsang gamma sampler, boosted for shape < 1.
inline double gamma_draw(std::mt19937_64& rng, double shape) {
  if (shape < 1.0) {
    double u = std::max(unit_uniform(rng), 1e-300);
    return gamma_draw(rng, shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  double d = shape - 1.0 / 3.0;
  double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = unit_normal(rng);
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    double u = std::max(unit_uniform(rng), 1e-300);
    if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
  }
}

template <typename Vec>
void fisher_yates(Vec& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

// Integer split of n by the proportion vector, largest-remainder rounding.
inline std::vector<std::size_t> largest_remainder(std::size_t n, const std::vector<double>& p) {
  std::vector<std::size_t> counts(p.size());
  std::vector<std::pair<double, std::size_t>> rema(p.size());
  std::size_t assigned = 0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    double exact = p[j] * double(n);
    counts[j] = std::size_t(exact);
    assigned += counts[j];
    rema[j] = {exact - double(counts[j]), j};
  }
  std::stable_sort(rema.begin(), rema.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < n; ++r, ++assigned) ++counts[rema[r % p.size()].second];
  return counts;
}

}  // namespace detail

// Per class, draws client proportions from Dir(beta,...,beta) and splits that
// class's (shuffled) indices by largest remainder. Resamples with fresh draws
// until every client holds at least min_per_client samples.
inline PartitionSpec dirichlet_partition(const Dataset& ds, std::size_t clients, double beta,
                                         std::uint64_t seed, std::size_t min_per_client = 32,
                                         std::uint32_t max_retries = 1000) {
  if (clients < 1) throw std::invalid_argument("partition: need at least one client");
  if (!(beta > 0)) throw std::invalid_argument("partition: beta must be positive");
  if (ds.count() < clients * std::max<std::size_t>(min_per_client, 1))
    throw std::invalid_argument("partition: dataset too small for client count");

  std::vector<std::vector<std::uint32_t>> by_class(ds.class_count);
  for (std::size_t i = 0; i < ds.count(); ++i)
    by_class[ds.labels[i]].push_back(std::uint32_t(i));

  std::mt19937_64 rng(seed);
  for (std::uint32_t attempt = 0;; ++attempt) {
    if (attempt > max_retries)
      throw std::runtime_error("partition: could not satisfy per-client size floor of " +
                               std::to_string(min_per_client));
    PartitionSpec spec;
    spec.clients = clients;
    spec.beta = beta;
    spec.seed = seed;
    spec.retries = attempt;
    spec.class_count = ds.class_count;
    spec.client_indices.assign(clients, {});
    spec.proportions.assign(ds.class_count * clients, 0.0);

    for (std::size_t k = 0; k < ds.class_count; ++k) {
      std::vector<double> p(clients);
      double tot = 0;
      for (auto& v : p) {
        v = detail::gamma_draw(rng, beta);
        tot += v;
      }
      for (auto& v : p) v /= tot;
      for (std::size_t j = 0; j < clients; ++j) spec.proportions[k * clients + j] = p[j];

      auto idx = by_class[k];
      detail::fisher_yates(idx, rng);
      auto counts = detail::largest_remainder(idx.size(), p);
      std::size_t off = 0;
      for (std::size_t j = 0; j < clients; ++j) {
        spec.client_indices[j].insert(spec.client_indices[j].end(), idx.begin() + off,
                                      idx.begin() + off + counts[j]);
        off += counts[j];
      }
    }

    bool ok = true;
    for (const auto& ci : spec.client_indices)
      ok = ok && ci.size() >= min_per_client;
    if (ok) return spec;
  }
}

inline void save_partition(const PartitionSpec& spec, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("partition: cannot open " + path + " for writing");
  os.write("FXPS", 4);
  detail::write_pod(os, std::uint32_t{1});
  detail::write_pod(os, std::uint32_t(spec.clients));
  detail::write_pod(os, std::uint32_t(spec.class_count));
  detail::write_pod(os, spec.beta);
  detail::write_pod(os, spec.seed);
  detail::write_pod(os, spec.retries);
  os.write(reinterpret_cast<const char*>(spec.proportions.data()),
           std::streamsize(spec.proportions.size() * sizeof(double)));
  for (const auto& ci : spec.client_indices) {
    detail::write_pod(os, std::uint32_t(ci.size()));
    os.write(reinterpret_cast<const char*>(ci.data()),
             std::streamsize(ci.size() * sizeof(std::uint32_t)));
  }
  if (!os) throw std::runtime_error("partition: write failure on " + path);
}

inline PartitionSpec load_partition(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("partition: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "FXPS", 4) != 0)
    throw std::runtime_error("partition: bad magic in " + path);
  if (detail::read_pod<std::uint32_t>(is, "version") != 1)
    throw std::runtime_error("partition: unsupported version");
  PartitionSpec spec;
  spec.clients = detail::read_pod<std::uint32_t>(is, "clients");
  spec.class_count = detail::read_pod<std::uint32_t>(is, "class_count");
  spec.beta = detail::read_pod<double>(is, "beta");
  spec.seed = detail::read_pod<std::uint64_t>(is, "seed");
  spec.retries = detail::read_pod<std::uint32_t>(is, "retries");
  spec.proportions.resize(spec.class_count * spec.clients);
  is.read(reinterpret_cast<char*>(spec.proportions.data()),
          std::streamsize(spec.proportions.size() * sizeof(double)));
  if (!is) throw std::runtime_error("partition: truncated proportions");
  spec.client_indices.resize(spec.clients);
  for (auto& ci : spec.client_indices) {
    ci.resize(detail::read_pod<std::uint32_t>(is, "index count"));
    is.read(reinterpret_cast<char*>(ci.data()), std::streamsize(ci.size() * sizeof(std::uint32_t)));
    if (!is) throw std::runtime_error("partition: truncated index list");
  }
  return spec;
}

// ---- input standardization ----

// Per-feature mean and standard deviation over a dataset. Applied to model
// inputs after augmentation so that features are centered: uncentered inputs
// make a randomly initialized encoder map every sample to nearly the same
// direction, which starves cosine-based objectives.
struct FeatureStats {
  std::vector<float> mean;
  std::vector<float> inv_sd;

  void apply(std::vector<float>& rows) const {
    std::size_t d = mean.size();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::size_t j = i % d;
      rows[i] = (rows[i] - mean[j]) * inv_sd[j];
    }
  }
};

inline FeatureStats feature_stats(const Dataset& ds) {
  std::size_t n = ds.count(), d = ds.sample_dim();
  FeatureStats st;
  st.mean.assign(d, 0.0f);
  st.inv_sd.assign(d, 0.0f);
  std::vector<double> mu(d, 0.0), var(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += ds.pixels[i * d + j];
  for (auto& m : mu) m /= double(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double dv = ds.pixels[i * d + j] - mu[j];
      var[j] += dv * dv;
    }
  for (std::size_t j = 0; j < d; ++j) {
    st.mean[j] = float(mu[j]);
    st.inv_sd[j] = float(1.0 / (std::sqrt(var[j] / double(n)) + 1e-6));
  }
  return st;
}

// ---- augmentation ----

struct AugmentPolicy {
  std::size_t crop_pad = 2;       // reflect padding before random crop
  double flip_prob = 0.5;         // horizontal flip
  double jitter_scale_lo = 0.8;   // per-channel affine jitter
  double jitter_scale_hi = 1.2;
  double jitter_shift = 0.1;

  static AugmentPolicy identity() { return {0, 0.0, 1.0, 1.0, 0.0}; }
};

namespace detail {

inline std::size_t reflect_index(long i, long n) {
  if (n == 1) return 0;
  long period = 2 * (n - 1);
  i = ((i % period) + period) % period;
  return std::size_t(i < n ? i : period - i);
}

}  // namespace detail

// Random crop (reflect padding), horizontal flip, per-channel affine jitter;
// output clamped to [0,1], shape preserved.
inline std::vector<float> augment_view(const float* sample, std::size_t channels,
                                       std::size_t height, std::size_t width,
                                       const AugmentPolicy& pol, std::mt19937_64& rng) {
  std::vector<float> out(channels * height * width);
  long pad_y = long(std::min(pol.crop_pad, height > 1 ? height - 1 : 0));
  long pad_x = long(std::min(pol.crop_pad, width > 1 ? width - 1 : 0));
  long dy = 0, dx = 0;
  if (pad_y > 0) dy = long(rng() % std::uint64_t(2 * pad_y + 1)) - pad_y;
  if (pad_x > 0) dx = long(rng() % std::uint64_t(2 * pad_x + 1)) - pad_x;
  bool flip = unit_uniform(rng) < pol.flip_prob;
  for (std::size_t c = 0; c < channels; ++c) {
    double s = pol.jitter_scale_lo +
               unit_uniform(rng) * (pol.jitter_scale_hi - pol.jitter_scale_lo);
    double t = (2.0 * unit_uniform(rng) - 1.0) * pol.jitter_shift;
    for (std::size_t y = 0; y < height; ++y) {
      std::size_t sy = detail::reflect_index(long(y) + dy, long(height));
      for (std::size_t x = 0; x < width; ++x) {
        std::size_t xx = flip ? width - 1 - x : x;
        std::size_t sx = detail::reflect_index(long(xx) + dx, long(width));
        double v = s * sample[(c * height + sy) * width + sx] + t;
        out[(c * height + y) * width + x] = float(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

// ---- batch sampling ----

struct BatchTriple {
  std::vector<std::uint32_t> idx_b, idx_br;
  std::vector<float> x, x_aug, x_ref;  // row-major [n, sample_dim]
};

// One epoch of full batches: B without replacement across the epoch (partial
// trailing batch dropped), B~ the augmented copy of B, B_r an independent
// uniform draw (without replacement within a draw, may overlap B).
inline std::vector<BatchTriple> sample_epoch(const Dataset& ds,
                                             const std::vector<std::uint32_t>& indices,
                                             std::size_t batch, const AugmentPolicy& pol,
                                             std::mt19937_64& rng) {
  if (indices.size() < batch)
    throw std::invalid_argument("sample_epoch: client holds fewer samples than one batch");
  std::vector<std::uint32_t> order = indices;
  detail::fisher_yates(order, rng);
  std::size_t d = ds.sample_dim();
  std::vector<BatchTriple> epoch;
  for (std::size_t off = 0; off + batch <= order.size(); off += batch) {
    BatchTriple bt;
    bt.idx_b.assign(order.begin() + off, order.begin() + off + batch);
    // reference draw: partial Fisher-Yates over a scratch copy
    std::vector<std::uint32_t> scratch = indices;
    for (std::size_t i = 0; i < batch; ++i) {
      std::size_t j = i + rng() % (scratch.size() - i);
      std::swap(scratch[i], scratch[j]);
      bt.idx_br.push_back(scratch[i]);
    }
    bt.x = ds.gather(bt.idx_b);
    bt.x_ref = ds.gather(bt.idx_br);
    bt.x_aug.resize(batch * d);
    for (std::size_t i = 0; i < batch; ++i) {
      auto v = augment_view(bt.x.data() + i * d, ds.channels, ds.height, ds.width, pol, rng);
      std::copy(v.begin(), v.end(), bt.x_aug.begin() + i * d);
    }
    epoch.push_back(std::move(bt));
  }
  return epoch;
}

}  // namespace fedx
