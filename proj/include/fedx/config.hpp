#pragma once

// Run configuration: flat `key = value` text with dotted sections, defaults
// for every knob, flag overrides, strict unknown-key rejection, and a
// canonical resolved snapshot that pins a run.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedx/data.hpp"
#include "fedx/federation.hpp"

namespace fedx {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class RunConfig {
 public:
  static RunConfig defaults() {
    RunConfig c;
    c.kv_ = {
        {"dataset.path", ""},
        {"dataset.format", "fxds"},
        {"partition.clients", "10"},
        {"partition.beta", "0.5"},
        {"partition.seed", "0"},
        {"partition.path", ""},
        {"federation.rounds", "100"},
        {"federation.local_epochs", "10"},
        {"federation.method", "simclr"},
        {"federation.fedx", "true"},
        {"federation.batch", "128"},
        {"federation.workers", "1"},
        {"federation.seed", "0"},
        {"model.hidden", "256,128"},
        {"model.embed_dim", "64"},
        {"model.proj_hidden", "128"},
        {"model.activation", "tanh"},
        {"model.norm_hidden", "true"},
        {"model.norm_output", "true"},
        {"model.ema_decay", "0.99"},
        {"model.reset_ema_from_global", "false"},
        {"loss.tau", "0.1"},
        {"loss.include_positive", "false"},
        {"opt.lr", "0.01"},
        {"opt.momentum", "0.9"},
        {"opt.weight_decay", "1e-5"},
        {"augment.crop_pad", "2"},
        {"augment.flip_prob", "0.5"},
        {"augment.jitter_scale_lo", "0.8"},
        {"augment.jitter_scale_hi", "1.2"},
        {"augment.jitter_shift", "0.1"},
        {"eval.linear_epochs", "100"},
        {"eval.label_ratios", "0.01,0.05,0.10"},
        {"eval.test_fraction", "0.2"},
        {"run.output_dir", "out"},
        {"run.precision", "f32"},
        {"run.checkpoint_every", "10"},
    };
    return c;
  }

  static RunConfig from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    RunConfig c = defaults();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      auto trim = [](std::string s) {
        auto b = s.find_first_not_of(" \t\r");
        auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config: line " + std::to_string(lineno) + " is not `key = value`");
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
  }

  void set(const std::string& key, const std::string& value) {
    if (!kv_.count(key)) throw ConfigError("config: unknown key '" + key + "'");
    kv_[key] = value;
  }

  const std::string& get(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw ConfigError("config: unknown key '" + key + "'");
    return it->second;
  }

  std::uint64_t get_u64(const std::string& key) const {
    try {
      return std::stoull(get(key));
    } catch (const std::exception&) {
      throw ConfigError("config: " + key + " must be a non-negative integer");
    }
  }
  double get_double(const std::string& key) const {
    try {
      return std::stod(get(key));
    } catch (const std::exception&) {
      throw ConfigError("config: " + key + " must be numeric");
    }
  }
  bool get_bool(const std::string& key) const {
    const auto& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: " + key + " must be true/false");
  }
  std::vector<double> get_doubles(const std::string& key) const {
    std::vector<double> out;
    std::istringstream ss(get(key));
    std::string cell;
    while (std::getline(ss, cell, ','))
      if (!cell.empty()) out.push_back(std::stod(cell));
    return out;
  }
  std::vector<std::size_t> get_sizes(const std::string& key) const {
    std::vector<std::size_t> out;
    for (double v : get_doubles(key)) out.push_back(std::size_t(v));
    return out;
  }

  void validate() const {
    if (get_u64("partition.clients") < 1) throw ConfigError("config: partition.clients >= 1");
    if (!(get_double("partition.beta") > 0)) throw ConfigError("config: partition.beta > 0");
    if (get_u64("federation.rounds") < 1) throw ConfigError("config: federation.rounds >= 1");
    if (get_u64("federation.local_epochs") < 1)
      throw ConfigError("config: federation.local_epochs >= 1");
    if (get_u64("federation.batch") < 2) throw ConfigError("config: federation.batch >= 2");
    if (get_u64("federation.workers") < 1) throw ConfigError("config: federation.workers >= 1");
    const auto& method = get("federation.method");
    if (method != "simclr" && method != "byol")
      throw ConfigError("config: federation.method must be simclr|byol");
    const auto& fmt = get("dataset.format");
    if (fmt != "fxds" && fmt != "csv")
      throw ConfigError("config: dataset.format must be fxds|csv");
    if (!(get_double("loss.tau") > 0)) throw ConfigError("config: loss.tau > 0");
    if (!(get_double("opt.lr") >= 0)) throw ConfigError("config: opt.lr >= 0");
    double mom = get_double("opt.momentum");
    if (!(mom >= 0 && mom < 1)) throw ConfigError("config: opt.momentum in [0,1)");
    if (!(get_double("opt.weight_decay") >= 0)) throw ConfigError("config: opt.weight_decay >= 0");
    double fp = get_double("augment.flip_prob");
    if (!(fp >= 0 && fp <= 1)) throw ConfigError("config: augment.flip_prob in [0,1]");
    double ed = get_double("model.ema_decay");
    if (!(ed > 0 && ed < 1)) throw ConfigError("config: model.ema_decay in (0,1)");
    const auto& prec = get("run.precision");
    if (prec != "f32" && prec != "f64") throw ConfigError("config: run.precision must be f32|f64");
    double tf = get_double("eval.test_fraction");
    if (!(tf > 0 && tf < 1)) throw ConfigError("config: eval.test_fraction in (0,1)");
    for (double r : get_doubles("eval.label_ratios"))
      if (!(r > 0 && r <= 1)) throw ConfigError("config: eval.label_ratios in (0,1]");
    const auto& act = get("model.activation");
    if (act != "relu" && act != "tanh")
      throw ConfigError("config: model.activation must be relu|tanh");
  }

  // Canonical snapshot: sorted `key = value` lines.
  std::string resolved_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : kv_) os << k << " = " << v << "\n";
    return os.str();
  }

  AugmentPolicy augment_policy() const {
    AugmentPolicy p;
    p.crop_pad = get_u64("augment.crop_pad");
    p.flip_prob = get_double("augment.flip_prob");
    p.jitter_scale_lo = get_double("augment.jitter_scale_lo");
    p.jitter_scale_hi = get_double("augment.jitter_scale_hi");
    p.jitter_shift = get_double("augment.jitter_shift");
    return p;
  }

  template <typename T>
  FederationConfig<T> federation(std::size_t input_dim) const {
    FederationConfig<T> f;
    f.clients = get_u64("partition.clients");
    f.rounds = get_u64("federation.rounds");
    f.local_epochs = get_u64("federation.local_epochs");
    f.batch = get_u64("federation.batch");
    f.method = get("federation.method") == "byol" ? Method::byol : Method::simclr;
    f.fedx_enabled = get_bool("federation.fedx");
    f.tau = T(get_double("loss.tau"));
    f.include_positive_in_global_denominator = get_bool("loss.include_positive");
    f.opt = SgdConfig<T>{T(get_double("opt.lr")), T(get_double("opt.momentum")),
                         T(get_double("opt.weight_decay"))};
    f.ema_decay = T(get_double("model.ema_decay"));
    f.reset_ema_from_global = get_bool("model.reset_ema_from_global");
    f.seed = get_u64("federation.seed");
    f.workers = get_u64("federation.workers");
    f.augment = augment_policy();
    f.model.input_dim = input_dim;
    f.model.hidden = get_sizes("model.hidden");
    f.model.embed_dim = get_u64("model.embed_dim");
    f.model.proj_hidden = get_u64("model.proj_hidden");
    f.model.activation = get("model.activation");
    f.model.norm_hidden = get_bool("model.norm_hidden");
    f.model.norm_output = get_bool("model.norm_output");
    f.model.with_predictor = f.method == Method::byol;
    return f;
  }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace fedx
