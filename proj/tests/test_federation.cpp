#include <catch2/catch_amalgamated.hpp>

#include "fedx/federation.hpp"

using fedx::FederationConfig;
using fedx::ModelParams;
using fedx::ParamRole;

namespace {

fedx::Dataset small_dataset(std::uint64_t seed = 3) {
  fedx::SyntheticSpec spec;
  spec.classes = 4;
  spec.per_class = 40;
  spec.channels = 1;
  spec.height = 4;
  spec.width = 4;
  spec.seed = seed;
  return fedx::make_synthetic(spec);
}

template <typename T>
FederationConfig<T> small_config(std::size_t clients = 2) {
  FederationConfig<T> cfg;
  cfg.clients = clients;
  cfg.rounds = 2;
  cfg.local_epochs = 1;
  cfg.batch = 8;
  cfg.tau = T(0.1);
  cfg.seed = 5;
  cfg.model.input_dim = 16;
  cfg.model.hidden = {8};
  cfg.model.embed_dim = 4;
  cfg.model.proj_hidden = 4;
  return cfg;
}

template <typename T>
bool global_equal(const ModelParams<T>& a, const ModelParams<T>& b) {
  return a.values_equal(b);
}

}  // namespace

TEST_CASE("federation config validation") {
  auto cfg = small_config<float>();
  CHECK_NOTHROW(cfg.validate());
  cfg.batch = 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = small_config<float>();
  cfg.rounds = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = small_config<float>();
  cfg.workers = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("client construction") {
  auto cfg = small_config<float>();
  auto c0 = fedx::make_client<float>(0, {0, 1, 2}, cfg);
  auto c1 = fedx::make_client<float>(1, {3, 4, 5}, cfg);
  CHECK(fedx::client_stream_seed(5, 0) != fedx::client_stream_seed(5, 1));
  CHECK_FALSE(c0.local.values_equal(c1.local));  // independent initializations
  CHECK_FALSE(c0.ema.has_value());

  cfg.method = fedx::Method::byol;
  auto cb = fedx::make_client<float>(0, {0, 1, 2}, cfg);
  REQUIRE(cb.ema.has_value());
  CHECK(cb.local.has("pred.0.weight"));
}

TEST_CASE("aggregation") {
  auto cfg = small_config<double>();
  std::vector<fedx::ClientState<double>> clients;
  clients.push_back(fedx::make_client<double>(0, {0, 1}, cfg));
  clients.push_back(fedx::make_client<double>(1, {2, 3, 4, 5}, cfg));

  SECTION("weighted mean, hand-checked entry") {
    auto g = fedx::aggregate(clients, {0.25, 0.75});
    double want = 0.25 * clients[0].local.at("backbone.0.weight").value()[0] +
                  0.75 * clients[1].local.at("backbone.0.weight").value()[0];
    CHECK(g.at("backbone.0.weight").value()[0] == Catch::Approx(want).epsilon(1e-15));
    CHECK(g.has("proj.0.weight"));
    CHECK_FALSE(g.has("pred.0.weight"));
  }

  SECTION("sample-count weights") {
    auto w = fedx::fedavg_weights(clients);
    CHECK(w[0] == Catch::Approx(2.0 / 6.0));
    CHECK(w[1] == Catch::Approx(4.0 / 6.0));
    CHECK(w[0] + w[1] == 1.0);
  }

  SECTION("single client with unit weight is a bitwise copy") {
    std::vector<fedx::ClientState<double>> one;
    one.push_back(fedx::make_client<double>(0, {0, 1}, cfg));
    auto g = fedx::aggregate(one, {1.0});
    CHECK(g.values_equal(
        one[0].local.subset({ParamRole::backbone, ParamRole::projection_head}, false)));
  }

  SECTION("weights must sum to one") {
    CHECK_THROWS_AS(fedx::aggregate(clients, {0.5, 0.4}), std::invalid_argument);
    CHECK_THROWS_AS(fedx::aggregate(clients, {1.0}), std::invalid_argument);
  }
}

TEST_CASE("training loop") {
  auto ds = small_dataset();
  auto cfg = small_config<float>();
  auto part = fedx::dirichlet_partition(ds, 2, 0.5, 1, 16);

  SECTION("round metrics and finite decreasing-ish losses") {
    cfg.rounds = 3;
    std::size_t calls = 0;
    auto res = fedx::run_training<float>(cfg, ds, part,
                                         [&](std::size_t r, const ModelParams<float>&,
                                             const fedx::RoundMetrics<float>& rm) {
                                           ++calls;
                                           CHECK(r == rm.round);
                                           CHECK(std::isfinite(double(rm.aggregate.total)));
                                           CHECK(rm.wall_ms >= 0.0);
                                         });
    CHECK(calls == 3);
    CHECK(res.metrics.size() == 3);
    CHECK(res.clients.size() == 2);
    CHECK(res.metrics[0].per_client.size() == 2);
    // distillation terms are actually produced
    CHECK(res.metrics[0].aggregate.local_r > 0.0f);
    CHECK(res.metrics[0].aggregate.global_c != 0.0f);
  }

  SECTION("partition mismatch rejected") {
    auto p3 = fedx::dirichlet_partition(ds, 3, 0.5, 1, 16);
    CHECK_THROWS_AS(fedx::run_training<float>(cfg, ds, p3), std::invalid_argument);
  }

  SECTION("bitwise repeatability") {
    auto a = fedx::run_training<float>(cfg, ds, part);
    auto b = fedx::run_training<float>(cfg, ds, part);
    CHECK(global_equal(a.global, b.global));
  }

  SECTION("worker count does not change the result") {
    auto serial = fedx::run_training<float>(cfg, ds, part);
    cfg.workers = 4;
    auto parallel = fedx::run_training<float>(cfg, ds, part);
    CHECK(global_equal(serial.global, parallel.global));
    for (std::size_t m = 0; m < 2; ++m)
      CHECK(serial.clients[m].local.values_equal(parallel.clients[m].local));
  }

  SECTION("byol method end to end") {
    cfg.method = fedx::Method::byol;
    cfg.fedx_enabled = true;
    auto res = fedx::run_training<float>(cfg, ds, part);
    CHECK(res.metrics[0].aggregate.local_c >= 0.0f);
    CHECK(res.metrics[0].aggregate.local_c <= 4.0f);
    CHECK(res.clients[0].ema.has_value());
  }

  SECTION("baseline without distillation trains only the backbone terms") {
    cfg.fedx_enabled = false;
    auto res = fedx::run_training<float>(cfg, ds, part);
    CHECK(res.metrics[0].aggregate.local_r == 0.0f);
    CHECK(res.metrics[0].aggregate.global_c == 0.0f);
    CHECK(res.metrics[0].aggregate.global_r == 0.0f);
    CHECK(res.metrics[0].aggregate.local_c > 0.0f);
  }

  SECTION("runaway step size raises a divergence error") {
    cfg.opt.lr = 1e30f;
    cfg.rounds = 2;
    CHECK_THROWS_AS(fedx::run_training<float>(cfg, ds, part), fedx::DivergenceError);
  }
}

TEST_CASE("single participant equals monolithic training") {
  auto ds = small_dataset(8);
  auto cfg = small_config<double>(1);
  cfg.rounds = 3;
  cfg.local_epochs = 2;
  std::vector<std::uint32_t> all;
  for (std::uint32_t i = 0; i < ds.count(); ++i) all.push_back(i);
  fedx::PartitionSpec part;
  part.clients = 1;
  part.class_count = ds.class_count;
  part.client_indices = {all};

  auto fed = fedx::run_training<double>(cfg, ds, part);
  auto mono = fedx::run_monolithic<double>(cfg, ds, all, 6);

  auto fed_view = fed.clients[0].local.subset(
      {ParamRole::backbone, ParamRole::projection_head}, false);
  auto mono_view = mono.subset({ParamRole::backbone, ParamRole::projection_head}, false);
  REQUIRE(fed_view.values_equal(mono_view));  // bitwise
  REQUIRE(fed.global.values_equal(mono_view));
}
