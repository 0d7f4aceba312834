#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "fedx/encoder.hpp"
#include "oracles.hpp"

using fedx::EncoderDescriptor;
using fedx::Head;
using fedx::ModelParams;
using fedx::ParamRole;
using fedx::Tensor;
using oracle::Vec;

namespace {

EncoderDescriptor small_desc(bool predictor = false) {
  EncoderDescriptor d;
  d.input_dim = 5;
  d.hidden = {7, 6};
  d.embed_dim = 4;
  d.proj_hidden = 3;
  d.activation = "relu";
  d.with_predictor = predictor;
  return d;
}

// Scalar-loop forward of a two-hidden-layer relu MLP (per-row standardization
// before each activation) plus optional 2-layer head.
Vec reference_forward(const ModelParams<double>& mp, const Vec& x, std::size_t n,
                      Head head) {
  const auto& d = mp.descriptor();
  auto linear = [&](const Vec& in, std::size_t din, const std::string& prefix) {
    const auto& w = mp.at(prefix + ".weight").value();
    const auto& b = mp.at(prefix + ".bias").value();
    std::size_t dout = b.size();
    Vec out(n * dout);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dout; ++j) {
        double s = b[j];
        for (std::size_t k = 0; k < din; ++k) s += in[i * din + k] * w[k * dout + j];
        out[i * dout + j] = s;
      }
    return out;
  };
  auto act = [&](Vec v, std::size_t dout) {
    if (d.norm_hidden) {
      for (std::size_t i = 0; i < n; ++i) {
        double mu = 0, var = 0;
        for (std::size_t j = 0; j < dout; ++j) mu += v[i * dout + j];
        mu /= double(dout);
        for (std::size_t j = 0; j < dout; ++j) {
          double dv = v[i * dout + j] - mu;
          var += dv * dv;
        }
        double s = std::sqrt(var / double(dout) + 1e-5);
        for (std::size_t j = 0; j < dout; ++j) v[i * dout + j] = (v[i * dout + j] - mu) / s;
      }
    }
    for (auto& e : v) e = std::max(e, 0.0);
    return v;
  };
  Vec h = x;
  std::size_t prev = d.input_dim;
  for (std::size_t l = 0; l <= d.hidden.size(); ++l) {
    h = linear(h, prev, "backbone." + std::to_string(l));
    prev = l < d.hidden.size() ? d.hidden[l] : d.embed_dim;
    if (l < d.hidden.size()) h = act(h, prev);
  }
  if (d.norm_output) {
    for (std::size_t j = 0; j < d.embed_dim; ++j) {
      double mu = 0, var = 0;
      for (std::size_t i = 0; i < n; ++i) mu += h[i * d.embed_dim + j];
      mu /= double(n);
      for (std::size_t i = 0; i < n; ++i) {
        double dv = h[i * d.embed_dim + j] - mu;
        var += dv * dv;
      }
      double s = std::sqrt(var / double(n) + 1e-5);
      for (std::size_t i = 0; i < n; ++i) h[i * d.embed_dim + j] = (h[i * d.embed_dim + j] - mu) / s;
    }
  }
  if (head == Head::none) return h;
  const char* p = head == Head::projection ? "proj" : "pred";
  h = act(linear(h, d.embed_dim, std::string(p) + ".0"), d.proj_hidden);
  return linear(h, d.proj_hidden, std::string(p) + ".1");
}

}  // namespace

TEST_CASE("descriptor validation") {
  CHECK_NOTHROW(small_desc().validate());
  auto bad = small_desc();
  bad.input_dim = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = small_desc();
  bad.hidden = {4, 0};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = small_desc();
  bad.activation = "gelu";
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK(small_desc() == small_desc());
  CHECK(small_desc().to_string() != small_desc(true).to_string());
}

TEST_CASE("parameter construction") {
  auto mp = ModelParams<double>::build(small_desc(true), 42);
  // 3 backbone layers + 2 projection + 2 predictor, each weight+bias
  CHECK(mp.size() == 14);
  CHECK(mp.at("backbone.0.weight").shape() == fedx::Shape{5, 7});
  CHECK(mp.at("backbone.2.weight").shape() == fedx::Shape{6, 4});
  CHECK(mp.at("proj.0.weight").shape() == fedx::Shape{4, 3});
  CHECK(mp.at("pred.1.bias").shape() == fedx::Shape{4});
  CHECK_THROWS_AS(mp.at("nope"), std::invalid_argument);

  SECTION("initialization bounds and role tags") {
    double bound0 = 1.0 / std::sqrt(5.0);
    for (double v : mp.at("backbone.0.weight").value()) {
      CHECK(v >= -bound0);
      CHECK(v <= bound0);
    }
    bool saw_pred = false;
    for (const auto& p : mp.params()) saw_pred = saw_pred || p.role == ParamRole::predictor;
    CHECK(saw_pred);
  }

  SECTION("seeded determinism") {
    auto a = ModelParams<double>::build(small_desc(), 7);
    auto b = ModelParams<double>::build(small_desc(), 7);
    auto c = ModelParams<double>::build(small_desc(), 8);
    CHECK(a.values_equal(b));
    CHECK_FALSE(a.values_equal(c));
  }

  SECTION("no predictor unless requested") {
    auto plain = ModelParams<double>::build(small_desc(false), 1);
    CHECK(plain.size() == 10);
    CHECK_FALSE(plain.has("pred.0.weight"));
  }
}

TEST_CASE("forward pass matches scalar reference") {
  std::mt19937_64 rng(5);
  auto mp = ModelParams<double>::build(small_desc(true), 9);
  std::size_t n = 3;
  Vec x(n * 5);
  for (auto& v : x) v = fedx::unit_uniform(rng);
  for (Head head : {Head::none, Head::projection, Head::predictor}) {
    auto z = embed(mp, Tensor<double>::constant({n, 5}, x), head);
    auto want = reference_forward(mp, x, n, head);
    CHECK(z.shape() == fedx::Shape{n, head == Head::none ? mp.descriptor().embed_dim
                                                         : mp.descriptor().embed_dim});
    REQUIRE(oracle::max_rel_err(z.value(), want) < 1e-12);
  }
}

TEST_CASE("forward pass validation") {
  auto mp = ModelParams<double>::build(small_desc(), 1);
  CHECK_THROWS_AS(embed(mp, Tensor<double>::constant({2, 4}, Vec(8, 0.1))),
                  std::invalid_argument);
  CHECK_THROWS_AS(embed(mp, Tensor<double>::constant({0, 5}, {})), std::invalid_argument);
  CHECK_THROWS_AS(embed(mp, Tensor<double>::constant({2, 5}, Vec(10, 0.1)), Head::predictor),
                  std::invalid_argument);
}

TEST_CASE("gradients flow through the network") {
  auto mp = ModelParams<double>::build(small_desc(), 3);
  auto x = Tensor<double>::constant({2, 5}, Vec(10, 0.3));
  sum(embed(mp, x, Head::projection)).backward();
  // finite-difference check on one backbone weight entry
  double h = 1e-5;
  auto probe = [&](double delta) {
    auto mc = mp.clone(false);
    mc.at("backbone.0.weight").value()[3] += delta;
    return sum(embed(mc, x, Head::projection)).item();
  };
  double fd = (probe(h) - probe(-h)) / (2 * h);
  CHECK(mp.at("backbone.0.weight").grad()[3] == Catch::Approx(fd).epsilon(1e-6));
  // all tracked parameters received a gradient buffer
  for (const auto& p : mp.params()) CHECK(p.tensor.grad().size() == p.tensor.numel());
}

TEST_CASE("clone, subset, load_values") {
  auto mp = ModelParams<double>::build(small_desc(true), 11);
  auto frozen = mp.clone(false);
  CHECK(frozen.values_equal(mp));
  CHECK_FALSE(frozen.at("backbone.0.weight").requires_grad());

  auto bb = mp.subset({ParamRole::backbone, ParamRole::projection_head}, false);
  CHECK(bb.size() == 10);
  CHECK_FALSE(bb.has("pred.0.weight"));

  auto other = ModelParams<double>::build(small_desc(true), 12);
  double pred_before = other.at("pred.0.weight").value()[0];
  other.load_values(bb);  // only overlapping names are overwritten
  CHECK(other.at("backbone.0.weight").value() == mp.at("backbone.0.weight").value());
  CHECK(other.at("pred.0.weight").value()[0] == pred_before);
}

TEST_CASE("record export and import round-trip") {
  auto mp = ModelParams<double>::build(small_desc(), 21);
  auto rec = mp.export_record();
  auto mp2 = ModelParams<double>::build(small_desc(), 22);
  CHECK_FALSE(mp2.values_equal(mp));
  mp2.import_record(rec);
  CHECK(mp2.values_equal(mp));

  SECTION("descriptor mismatch rejected") {
    auto mpp = ModelParams<double>::build(small_desc(true), 21);
    CHECK_THROWS_AS(mpp.import_record(rec), std::invalid_argument);
  }
  SECTION("truncated payload rejected") {
    auto bad = rec;
    bad.payload.pop_back();
    CHECK_THROWS_AS(mp2.import_record(bad), std::invalid_argument);
  }
  SECTION("manifest mismatch rejected") {
    auto bad = rec;
    bad.manifest[0].first = "renamed";
    CHECK_THROWS_AS(mp2.import_record(bad), std::invalid_argument);
  }
}

TEST_CASE("ema shadow") {
  auto mp = ModelParams<double>::build(small_desc(), 31);
  auto ema = fedx::EmaEncoder<double>::from_source(mp, 0.9);
  CHECK(ema.shadow.size() == 6);  // backbone only
  CHECK(ema.shadow.values_equal(mp.subset({ParamRole::backbone}, false)));

  double w0 = mp.at("backbone.0.weight").value()[0];
  mp.at("backbone.0.weight").value()[0] = w0 + 1.0;
  ema.update(mp);
  CHECK(ema.shadow.at("backbone.0.weight").value()[0] ==
        Catch::Approx(0.9 * w0 + 0.1 * (w0 + 1.0)));

  CHECK_THROWS_AS(fedx::EmaEncoder<double>::from_source(mp, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(fedx::EmaEncoder<double>::from_source(mp, 1.0), std::invalid_argument);

  SECTION("boundary decays via direct construction") {
    fedx::EmaEncoder<double> freeze{mp.subset({ParamRole::backbone}, false), 1.0};
    auto before = freeze.shadow.at("backbone.0.weight").value();
    mp.at("backbone.0.weight").value()[0] += 5.0;
    freeze.update(mp);
    CHECK(freeze.shadow.at("backbone.0.weight").value() == before);  // decay 1: never moves

    fedx::EmaEncoder<double> track{mp.subset({ParamRole::backbone}, false), 0.0};
    mp.at("backbone.0.weight").value()[0] -= 2.0;
    track.update(mp);
    CHECK(track.shadow.at("backbone.0.weight").value() ==
          mp.at("backbone.0.weight").value());  // decay 0: copies the source
  }
}
