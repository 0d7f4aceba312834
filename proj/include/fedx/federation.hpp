#pragma once

// FedAvg round loop: broadcast -> parallel local updates -> weighted
// aggregation. The local update trains on the combined local/global
// distillation objective (or the plain contrastive baseline when disabled).
// Determinism comes from per-client RNG streams, never from scheduling.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <thread>
#include <vector>

#include "fedx/data.hpp"
#include "fedx/encoder.hpp"
#include "fedx/losses.hpp"
#include "fedx/optim.hpp"
#include "fedx/tensor.hpp"

namespace fedx {

enum class Method { simclr, byol };

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
struct FederationConfig {
  std::size_t clients = 10;
  std::size_t rounds = 100;
  std::size_t local_epochs = 10;
  std::size_t batch = 128;
  Method method = Method::simclr;
  bool fedx_enabled = true;
  T tau = T(0.1);
  bool include_positive_in_global_denominator = false;
  SgdConfig<T> opt;
  T ema_decay = T(0.99);
  bool reset_ema_from_global = false;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  AugmentPolicy augment;
  EncoderDescriptor model;

  void validate() const {
    if (rounds < 1 || local_epochs < 1 || clients < 1 || batch < 2)
      throw std::invalid_argument("federation: need rounds>=1, epochs>=1, clients>=1, batch>=2");
    if (workers < 1) throw std::invalid_argument("federation: need workers>=1");
  }
};

template <typename T>
struct LossSummary {
  T local_c = 0, local_r = 0, global_c = 0, global_r = 0, total = 0;
  std::size_t batches = 0;

  void accumulate(T lc, T lr, T gc, T gr) {
    local_c += lc;
    local_r += lr;
    global_c += gc;
    global_r += gr;
    total += lc + lr + gc + gr;
    ++batches;
  }
  LossSummary averaged() const {
    if (batches == 0) return {};
    T n = T(batches);
    return {local_c / n, local_r / n, global_c / n, global_r / n, total / n, batches};
  }
};

template <typename T>
struct ClientState {
  std::size_t id = 0;
  std::vector<std::uint32_t> indices;
  ModelParams<T> local;
  std::optional<EmaEncoder<T>> ema;
  SgdState<T> opt;
  std::mt19937_64 rng;
};

template <typename T>
struct RoundMetrics {
  std::size_t round = 0;
  LossSummary<T> aggregate;               // mean over clients of per-client means
  std::vector<LossSummary<T>> per_client;
  double wall_ms = 0;
};

inline std::uint64_t client_stream_seed(std::uint64_t seed, std::size_t id) {
  return seed ^ (0x9E3779B97F4A7C15ULL * (std::uint64_t(id) + 1));
}

namespace detail {

// Standardizes per feature while converting to the training precision.
template <typename T>
Tensor<T> batch_tensor(const std::vector<float>& rows, const FeatureStats& stats, std::size_t n,
                       std::size_t d) {
  std::vector<T> v(rows.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = T((rows[i] - stats.mean[i % d]) * stats.inv_sd[i % d]);
  return Tensor<T>::constant({n, d}, std::move(v));
}

// One optimization step on a prepared batch triple. Shared by the federated
// local update and the monolithic harness.
template <typename T>
void train_step(ModelParams<T>& local, std::optional<EmaEncoder<T>>& ema,
                SgdState<T>& opt, const ModelParams<T>& global_frozen,
                const BatchTriple& bt, const FederationConfig<T>& cfg,
                const FeatureStats& stats, std::size_t sample_dim, LossSummary<T>& summary) {
  std::size_t n = bt.idx_b.size();
  try {
  auto x = batch_tensor<T>(bt.x, stats, n, sample_dim);
  auto xt = batch_tensor<T>(bt.x_aug, stats, n, sample_dim);
  auto xr = batch_tensor<T>(bt.x_ref, stats, n, sample_dim);

  Tensor<T> loss_local_c;
  if (cfg.method == Method::byol) {
    auto pred = embed(local, x, Head::predictor);
    auto target = embed(ema->shadow, xt, Head::none);
    loss_local_c = local_contrastive_byol(pred, target);
  } else {
    loss_local_c = local_contrastive_simclr(embed(local, x), embed(local, xt), cfg.tau);
  }

  Tensor<T> total;
  T lr_v = 0, gc_v = 0, gr_v = 0;
  if (cfg.fedx_enabled) {
    auto z = embed(local, x);
    auto zt = embed(local, xt);
    auto zr = embed(local, xr);
    auto r = relationship_vectors(z, zr, cfg.tau);
    auto rt = relationship_vectors(zt, zr, cfg.tau);
    auto loss_local_r = relational_loss(r, rt);

    auto zl = embed(local, x, Head::projection);
    auto ztl = embed(local, xt, Head::projection);
    auto zg = embed(global_frozen, x);
    auto ztg = embed(global_frozen, xt);
    auto zgr = embed(global_frozen, xr);
    auto loss_global_c = global_contrastive(zl, ztg, zg, cfg.tau,
                                            cfg.include_positive_in_global_denominator);
    auto [rg, rtg] = global_relationship_vectors(zl, ztl, zgr, cfg.tau);
    auto loss_global_r = relational_loss(rg, rtg);

    total = total_kd(total_local_kd(loss_local_c, loss_local_r),
                     total_global_kd(loss_global_c, loss_global_r));
    lr_v = loss_local_r.item();
    gc_v = loss_global_c.item();
    gr_v = loss_global_r.item();
  } else {
    total = loss_local_c;
  }

  if (!std::isfinite(double(total.item())))
    throw DivergenceError("training diverged: non-finite loss");
  total.backward();

  bool train_proj = cfg.fedx_enabled;
  bool train_pred = cfg.method == Method::byol;
  for (auto& p : local.params()) {
    bool trained = p.role == ParamRole::backbone ||
                   (p.role == ParamRole::projection_head && train_proj) ||
                   (p.role == ParamRole::predictor && train_pred);
    if (trained) opt.step(p.name, p.tensor.value(), p.tensor.grad());
  }
  local.zero_grad();
  if (cfg.method == Method::byol) ema->update(local);

  summary.accumulate(loss_local_c.item(), lr_v, gc_v, gr_v);
  } catch (const std::domain_error& e) {
    // a zero or non-finite embedding norm mid-training means the run blew up
    throw DivergenceError(std::string("training diverged: ") + e.what());
  }
}

}  // namespace detail

template <typename T>
ClientState<T> make_client(std::size_t id, std::vector<std::uint32_t> indices,
                           const FederationConfig<T>& cfg) {
  ClientState<T> c;
  c.id = id;
  c.indices = std::move(indices);
  EncoderDescriptor desc = cfg.model;
  desc.with_predictor = cfg.method == Method::byol;
  c.local = ModelParams<T>::build(desc, client_stream_seed(cfg.seed, id), /*trainable=*/true);
  if (cfg.method == Method::byol)
    c.ema = EmaEncoder<T>::from_source(c.local, cfg.ema_decay);
  c.opt = SgdState<T>(cfg.opt);
  c.rng = std::mt19937_64(client_stream_seed(cfg.seed ^ 0xA5A5A5A5A5A5A5A5ULL, id));
  return c;
}

// Local update: replace the local backbone and head with the global snapshot,
// then train for E epochs on the distillation objective.
template <typename T>
LossSummary<T> local_update(ClientState<T>& client, const ModelParams<T>& global,
                            const Dataset& ds, const FeatureStats& stats,
                            const FederationConfig<T>& cfg) {
  client.local.load_values(global);
  if (client.ema && cfg.reset_ema_from_global)
    client.ema = EmaEncoder<T>::from_source(client.local, cfg.ema_decay);
  LossSummary<T> summary;
  for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
    auto epoch = sample_epoch(ds, client.indices, cfg.batch, cfg.augment, client.rng);
    for (const auto& bt : epoch)
      detail::train_step(client.local, client.ema, client.opt, global, bt, cfg, stats,
                         ds.sample_dim(), summary);
  }
  return summary.averaged();
}

// Weighted elementwise average of the clients' backbone and projection-head
// parameters. Predictor and EMA state stay client-local.
template <typename T>
ModelParams<T> aggregate(const std::vector<ClientState<T>>& clients,
                         const std::vector<double>& weights) {
  if (clients.empty() || clients.size() != weights.size())
    throw std::invalid_argument("aggregate: clients/weights mismatch");
  double wsum = 0;
  for (double w : weights) wsum += w;
  if (std::abs(wsum - 1.0) > 1e-9)
    throw std::invalid_argument("aggregate: weights must sum to 1");
  for (const auto& c : clients)
    if (!(c.local.descriptor() == clients[0].local.descriptor()))
      throw std::invalid_argument("aggregate: descriptor mismatch across clients");

  ModelParams<T> global = clients[0].local.subset(
      {ParamRole::backbone, ParamRole::projection_head}, /*trainable=*/false);
  for (auto& p : global.params()) {
    auto& acc = p.tensor.value();
    std::fill(acc.begin(), acc.end(), T(0));
    for (std::size_t m = 0; m < clients.size(); ++m) {
      const auto& src = clients[m].local.at(p.name).value();
      T w = T(weights[m]);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * src[i];
    }
  }
  return global;
}

template <typename T>
std::vector<double> fedavg_weights(const std::vector<ClientState<T>>& clients) {
  std::size_t total = 0;
  for (const auto& c : clients) total += c.indices.size();
  std::vector<double> w;
  for (const auto& c : clients) w.push_back(double(c.indices.size()) / double(total));
  return w;
}

template <typename T>
struct TrainingResult {
  ModelParams<T> global;
  std::vector<ClientState<T>> clients;
  std::vector<RoundMetrics<T>> metrics;
};

// R rounds of broadcast / parallel local update / upload / aggregate.
template <typename T>
TrainingResult<T> run_training(
    const FederationConfig<T>& cfg, const Dataset& ds, const PartitionSpec& partition,
    const std::function<void(std::size_t, const ModelParams<T>&, const RoundMetrics<T>&)>&
        on_round = {}) {
  cfg.validate();
  if (partition.clients != cfg.clients)
    throw std::invalid_argument("run_training: partition client count mismatch");

  TrainingResult<T> result;
  for (std::size_t m = 0; m < cfg.clients; ++m)
    result.clients.push_back(make_client<T>(m, partition.client_indices[m], cfg));

  EncoderDescriptor gdesc = cfg.model;
  gdesc.with_predictor = cfg.method == Method::byol;
  result.global = ModelParams<T>::build(gdesc, cfg.seed, /*trainable=*/false)
                      .subset({ParamRole::backbone, ParamRole::projection_head}, false);
  auto weights = fedavg_weights(result.clients);
  auto stats = feature_stats(ds);

  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    RoundMetrics<T> rm;
    rm.round = r + 1;
    rm.per_client.resize(cfg.clients);

    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(cfg.clients);
    auto worker = [&] {
      for (;;) {
        std::size_t m = next.fetch_add(1);
        if (m >= cfg.clients) return;
        try {
          rm.per_client[m] = local_update(result.clients[m], result.global, ds, stats, cfg);
        } catch (...) {
          errors[m] = std::current_exception();
        }
      }
    };
    std::size_t nthreads = std::min(cfg.workers, cfg.clients);
    if (nthreads <= 1) {
      worker();
    } else {
      std::vector<std::thread> threads;
      for (std::size_t t = 0; t < nthreads; ++t) threads.emplace_back(worker);
      for (auto& th : threads) th.join();
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);

    result.global = aggregate(result.clients, weights);

    for (const auto& s : rm.per_client) {
      rm.aggregate.local_c += s.local_c;
      rm.aggregate.local_r += s.local_r;
      rm.aggregate.global_c += s.global_c;
      rm.aggregate.global_r += s.global_r;
      rm.aggregate.total += s.total;
    }
    T mc = T(cfg.clients);
    rm.aggregate.local_c /= mc;
    rm.aggregate.local_r /= mc;
    rm.aggregate.global_c /= mc;
    rm.aggregate.global_r /= mc;
    rm.aggregate.total /= mc;
    rm.aggregate.batches = 1;
    rm.wall_ms = std::chrono::duration<double, std::milli>(
                     std::chrono::steady_clock::now() - t0)
                     .count();
    if (on_round) on_round(r + 1, result.global, rm);
    result.metrics.push_back(std::move(rm));
  }
  return result;
}

// Monolithic trainer over one index set: identical batch schedule and update
// rule as a single federated client, with the frozen reference refreshed
// every `local_epochs` epochs, but no aggregation or parameter transfer.
template <typename T>
ModelParams<T> run_monolithic(const FederationConfig<T>& cfg, const Dataset& ds,
                              const std::vector<std::uint32_t>& indices,
                              std::size_t total_epochs) {
  cfg.validate();
  auto client = make_client<T>(0, indices, cfg);
  EncoderDescriptor gdesc = cfg.model;
  gdesc.with_predictor = cfg.method == Method::byol;
  ModelParams<T> snapshot =
      ModelParams<T>::build(gdesc, cfg.seed, false)
          .subset({ParamRole::backbone, ParamRole::projection_head}, false);
  client.local.load_values(snapshot);
  if (client.ema && cfg.reset_ema_from_global)
    client.ema = EmaEncoder<T>::from_source(client.local, cfg.ema_decay);
  auto stats = feature_stats(ds);
  LossSummary<T> summary;
  for (std::size_t e = 0; e < total_epochs; ++e) {
    if (e > 0 && e % cfg.local_epochs == 0) {
      // frozen-reference refresh at the same cadence as a communication round
      snapshot =
          client.local.subset({ParamRole::backbone, ParamRole::projection_head}, false);
      if (client.ema && cfg.reset_ema_from_global)
        client.ema = EmaEncoder<T>::from_source(client.local, cfg.ema_decay);
    }
    auto epoch = sample_epoch(ds, client.indices, cfg.batch, cfg.augment, client.rng);
    for (const auto& bt : epoch)
      detail::train_step(client.local, client.ema, client.opt, snapshot, bt, cfg, stats,
                         ds.sample_dim(), summary);
  }
  return client.local;
}

}  // namespace fedx
