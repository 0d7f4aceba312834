#pragma once

// MLP backbone encoder with a projection head and an optional BYOL-style
// predictor plus EMA target. Parameters live in an ordered, named collection
// so that federation can average, export, and import them deterministically.

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedx/tensor.hpp"

namespace fedx {

enum class ParamRole { backbone, projection_head, predictor };
enum class Head { none, projection, predictor };

inline const char* role_name(ParamRole r) {
  switch (r) {
    case ParamRole::backbone: return "backbone";
    case ParamRole::projection_head: return "projection_head";
    case ParamRole::predictor: return "predictor";
  }
  return "?";
}

struct EncoderDescriptor {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden = {256, 256};
  std::size_t embed_dim = 64;
  std::size_t proj_hidden = 128;
  std::string activation = "relu";  // relu | tanh
  bool norm_hidden = true;          // per-sample standardization before each activation
  bool norm_output = true;          // per-dimension standardization of the backbone output
  bool with_predictor = false;

  void validate() const {
    if (input_dim == 0) throw std::invalid_argument("descriptor: input_dim must be positive");
    if (embed_dim == 0) throw std::invalid_argument("descriptor: embed_dim must be positive");
    if (proj_hidden == 0) throw std::invalid_argument("descriptor: proj_hidden must be positive");
    for (auto h : hidden)
      if (h == 0) throw std::invalid_argument("descriptor: hidden widths must be positive");
    if (activation != "relu" && activation != "tanh")
      throw std::invalid_argument("descriptor: unknown activation '" + activation + "'");
  }

  std::string to_string() const {
    std::ostringstream os;
    os << "in=" << input_dim << ";hidden=";
    for (std::size_t i = 0; i < hidden.size(); ++i) os << (i ? "," : "") << hidden[i];
    os << ";embed=" << embed_dim << ";proj_hidden=" << proj_hidden << ";act=" << activation
       << ";norm=" << (norm_hidden ? 1 : 0) << ";norm_out=" << (norm_output ? 1 : 0)
       << ";predictor=" << (with_predictor ? 1 : 0);
    return os.str();
  }

  bool operator==(const EncoderDescriptor&) const = default;
};

// Uniform draw in [0,1) from the raw engine output; avoids the
// implementation-defined behavior of std::uniform_real_distribution.
inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

template <typename T>
struct NamedParam {
  std::string name;
  ParamRole role;
  Tensor<T> tensor;
};

template <typename T>
struct ParamRecord {
  std::string descriptor;
  std::vector<std::pair<std::string, Shape>> manifest;
  std::vector<T> payload;
};

template <typename T>
class ModelParams {
 public:
  ModelParams() = default;

  // Builds and initializes all parameters; each layer's weights are drawn
  // uniformly within +-1/sqrt(fan_in).
  static ModelParams build(const EncoderDescriptor& desc, std::uint64_t seed,
                           bool trainable = true) {
    desc.validate();
    ModelParams mp;
    mp.desc_ = desc;
    std::mt19937_64 rng(seed);

    auto add_linear = [&](ParamRole role, const std::string& prefix, std::size_t in,
                          std::size_t out) {
      T bound = T(1) / std::sqrt(T(in));
      std::vector<T> w(in * out), b(out);
      for (auto& v : w) v = T((2.0 * unit_uniform(rng) - 1.0)) * bound;
      for (auto& v : b) v = T((2.0 * unit_uniform(rng) - 1.0)) * bound;
      mp.add(prefix + ".weight", role,
             trainable ? Tensor<T>::parameter({in, out}, std::move(w))
                       : Tensor<T>::constant({in, out}, std::move(w)));
      mp.add(prefix + ".bias", role,
             trainable ? Tensor<T>::parameter({out}, std::move(b))
                       : Tensor<T>::constant({out}, std::move(b)));
    };

    std::size_t prev = desc.input_dim;
    std::size_t li = 0;
    for (auto h : desc.hidden) {
      add_linear(ParamRole::backbone, "backbone." + std::to_string(li++), prev, h);
      prev = h;
    }
    add_linear(ParamRole::backbone, "backbone." + std::to_string(li), prev, desc.embed_dim);

    add_linear(ParamRole::projection_head, "proj.0", desc.embed_dim, desc.proj_hidden);
    add_linear(ParamRole::projection_head, "proj.1", desc.proj_hidden, desc.embed_dim);

    if (desc.with_predictor) {
      add_linear(ParamRole::predictor, "pred.0", desc.embed_dim, desc.proj_hidden);
      add_linear(ParamRole::predictor, "pred.1", desc.proj_hidden, desc.embed_dim);
    }
    return mp;
  }

  const EncoderDescriptor& descriptor() const { return desc_; }
  const std::vector<NamedParam<T>>& params() const { return items_; }
  std::vector<NamedParam<T>>& params() { return items_; }
  std::size_t size() const { return items_.size(); }

  bool has(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("params: unknown parameter " + name);
    return items_[it->second].tensor;
  }
  const Tensor<T>& at(const std::string& name) const {
    return const_cast<ModelParams*>(this)->at(name);
  }

  void zero_grad() {
    for (auto& p : items_) p.tensor.zero_grad();
  }

  // Value-only copy; grads are reset, trainability is preserved per `trainable`.
  ModelParams clone(bool trainable) const {
    ModelParams out;
    out.desc_ = desc_;
    for (const auto& p : items_)
      out.add(p.name, p.role,
              trainable ? Tensor<T>::parameter(p.tensor.shape(), p.tensor.value())
                        : Tensor<T>::constant(p.tensor.shape(), p.tensor.value()));
    return out;
  }

  ModelParams subset(std::initializer_list<ParamRole> roles, bool trainable) const {
    ModelParams out;
    out.desc_ = desc_;
    for (const auto& p : items_)
      for (auto r : roles)
        if (p.role == r)
          out.add(p.name, p.role,
                  trainable ? Tensor<T>::parameter(p.tensor.shape(), p.tensor.value())
                            : Tensor<T>::constant(p.tensor.shape(), p.tensor.value()));
    return out;
  }

  // Overwrites the values of every parameter that also exists in `src`.
  void load_values(const ModelParams& src) {
    for (const auto& p : src.items_) {
      if (!has(p.name)) continue;
      auto& dst = at(p.name);
      if (dst.shape() != p.tensor.shape())
        throw std::invalid_argument("params: shape mismatch for " + p.name);
      dst.value() = p.tensor.value();
    }
  }

  bool values_equal(const ModelParams& other) const {
    if (items_.size() != other.items_.size()) return false;
    for (std::size_t i = 0; i < items_.size(); ++i) {
      if (items_[i].name != other.items_[i].name) return false;
      if (items_[i].tensor.value() != other.items_[i].tensor.value()) return false;
    }
    return true;
  }

  ParamRecord<T> export_record() const {
    ParamRecord<T> rec;
    rec.descriptor = desc_.to_string();
    for (const auto& p : items_) {
      rec.manifest.emplace_back(p.name, p.tensor.shape());
      rec.payload.insert(rec.payload.end(), p.tensor.value().begin(), p.tensor.value().end());
    }
    return rec;
  }

  // Loads values from a flat record; the manifest must match this model's
  // names and shapes exactly.
  void import_record(const ParamRecord<T>& rec) {
    if (rec.descriptor != desc_.to_string())
      throw std::invalid_argument("import: descriptor mismatch");
    if (rec.manifest.size() != items_.size())
      throw std::invalid_argument("import: manifest entry count mismatch");
    std::size_t off = 0;
    for (std::size_t i = 0; i < items_.size(); ++i) {
      const auto& [name, shape] = rec.manifest[i];
      if (name != items_[i].name || shape != items_[i].tensor.shape())
        throw std::invalid_argument("import: manifest mismatch at " + name);
      std::size_t n = items_[i].tensor.numel();
      if (off + n > rec.payload.size()) throw std::invalid_argument("import: truncated payload");
      std::copy(rec.payload.begin() + off, rec.payload.begin() + off + n,
                items_[i].tensor.value().begin());
      off += n;
    }
    if (off != rec.payload.size()) throw std::invalid_argument("import: payload size mismatch");
  }

  void set_descriptor(const EncoderDescriptor& d) { desc_ = d; }

  void add(const std::string& name, ParamRole role, Tensor<T> t) {
    if (index_.count(name)) throw std::invalid_argument("params: duplicate name " + name);
    index_[name] = items_.size();
    items_.push_back({name, role, std::move(t)});
  }

 private:
  EncoderDescriptor desc_;
  std::vector<NamedParam<T>> items_;
  std::map<std::string, std::size_t> index_;
};

// Hidden-layer nonlinearity, optionally preceded by per-sample normalization.
// Without the normalization a randomly initialized network maps every input
// to nearly the same direction, which starves cosine-based objectives.
template <typename T>
Tensor<T> apply_activation(const Tensor<T>& x, const EncoderDescriptor& d) {
  auto h = d.norm_hidden ? layer_norm_rows(x) : x;
  return d.activation == "tanh" ? tanh_act(h) : relu(h);
}

// Forward pass: backbone, then optionally the projection head or predictor.
// Gradients are tracked iff the parameters are trainable.
template <typename T>
Tensor<T> embed(const ModelParams<T>& params, const Tensor<T>& x, Head head = Head::none) {
  const auto& d = params.descriptor();
  if (x.shape().size() != 2 || x.shape()[1] != d.input_dim)
    throw std::invalid_argument("embed: input shape does not match descriptor");
  if (x.shape()[0] == 0) throw std::invalid_argument("embed: empty batch");
  if (head == Head::predictor && !params.has("pred.0.weight"))
    throw std::invalid_argument("embed: predictor head requested but absent");

  auto linear = [&](const Tensor<T>& h, const std::string& prefix) {
    return add_rowvec(matmul(h, params.at(prefix + ".weight")), params.at(prefix + ".bias"));
  };

  Tensor<T> h = x;
  std::size_t n_layers = d.hidden.size() + 1;
  for (std::size_t i = 0; i < n_layers; ++i) {
    h = linear(h, "backbone." + std::to_string(i));
    if (i + 1 < n_layers) h = apply_activation(h, d);
  }
  // Per-dimension standardization over the forward batch: at training time the
  // batch, at evaluation time whatever set is embedded together. Keeps the
  // backbone output free of a shared offset across samples.
  if (d.norm_output) h = standardize_cols(h);
  if (head == Head::none) return h;

  const char* prefix = head == Head::projection ? "proj" : "pred";
  h = apply_activation(linear(h, std::string(prefix) + ".0"), d);
  return linear(h, std::string(prefix) + ".1");
}

// EMA shadow of the backbone; never receives gradients.
template <typename T>
struct EmaEncoder {
  ModelParams<T> shadow;
  T decay = T(0.99);

  static EmaEncoder from_source(const ModelParams<T>& source, T decay) {
    if (!(decay > T(0) && decay < T(1)))
      throw std::invalid_argument("ema: decay must be in (0,1)");
    EmaEncoder e;
    e.shadow = source.subset({ParamRole::backbone}, /*trainable=*/false);
    e.decay = decay;
    return e;
  }

  void update(const ModelParams<T>& source) {
    for (auto& p : shadow.params()) {
      const auto& src = source.at(p.name);
      if (src.shape() != p.tensor.shape())
        throw std::invalid_argument("ema: shape mismatch for " + p.name);
      auto& sv = p.tensor.value();
      const auto& xv = src.value();
      for (std::size_t i = 0; i < sv.size(); ++i)
        sv[i] = decay * sv[i] + (T(1) - decay) * xv[i];
    }
  }
};

}  // namespace fedx
