#include "doctest_torch.hpp"

#include <cmath>

#include "cesynth/config.hpp"
#include "cesynth/losses.hpp"
#include "cesynth/perceptual.hpp"
#include "support.hpp"

using namespace cesynth;

namespace {

torch::Tensor d(std::initializer_list<double> v, std::vector<std::int64_t> shape) {
  return torch::tensor(std::vector<double>(v), torch::kFloat64).reshape(shape);
}

WeightMap ones(std::vector<std::int64_t> shape) {
  return {torch::ones(shape, torch::kFloat64)};
}

FeatureFn identity_extractor() {
  return [](const torch::Tensor& x) { return std::vector<torch::Tensor>{x}; };
}

// 5 levels by repeated 2x average pooling; smooth, so finite differences are clean
FeatureFn pooling_extractor() {
  return [](const torch::Tensor& x) {
    std::vector<torch::Tensor> out{x * 1.5};
    for (int l = 1; l < 5; ++l) out.push_back(torch::avg_pool2d(out.back(), 2).tanh());
    return out;
  };
}

}  // namespace

TEST_CASE("weight map values, normalization and errors") {
  auto bg = d({1, 1, 0, 0}, {1, 1, 2, 2});
  auto br = d({0, 0, 1, 0}, {1, 1, 2, 2});
  auto tu = d({0, 0, 0, 1}, {1, 1, 2, 2});
  auto w = build_weight_map(bg, br, tu);
  auto expected = d({1, 1, 20, 1000}, {1, 1, 2, 2}) / 255.5;
  CHECK(torch::allclose(w.omega, expected, 0, 1e-12));
  CHECK(w.omega.mean().item<double>() == doctest::Approx(1.0).epsilon(1e-12));

  auto all_bg = build_weight_map(torch::ones({2, 1, 3, 3}), torch::zeros({2, 1, 3, 3}),
                                 torch::zeros({2, 1, 3, 3}));
  CHECK(torch::allclose(all_bg.omega, torch::ones({2, 1, 3, 3})));

  CHECK_THROWS(build_weight_map(bg, br + tu, tu));                     // overlap
  CHECK_THROWS(build_weight_map(bg, torch::zeros_like(br), tu));       // not covering
}

TEST_CASE("weight map mean is normalized over the whole batch") {
  auto bg = torch::zeros({2, 1, 4, 4});
  bg[0].fill_(1);
  auto br = torch::zeros({2, 1, 4, 4});
  br[1].fill_(1);
  auto w = build_weight_map(bg, br, torch::zeros({2, 1, 4, 4}));
  CHECK(w.omega.mean().item<double>() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(w.omega[1][0][0][0].item<double>() == doctest::Approx(20.0 / 10.5).epsilon(1e-6));
}

TEST_CASE("clamp_log_var values and straight-through gradient") {
  auto v = d({5.0, -2.0, 0.0, 2.9}, {4});
  v.requires_grad_(true);
  auto c = clamp_log_var(v);
  CHECK(c[0].item<double>() == 3.0);
  CHECK(c[1].item<double>() == -1.5);
  CHECK(c[2].item<double>() == 0.0);
  c.sum().backward();
  CHECK(torch::equal(v.grad(), d({0, 0, 1, 1}, {4})));
  CHECK(ClampInterval{}.lo == -1.5);
  CHECK(ClampInterval{}.hi == 3.0);
}

TEST_CASE("uncertainty loss worked examples") {
  auto shape = std::vector<std::int64_t>{1, 1, 1, 1};
  auto x = d({0.3}, shape);
  CHECK(uncertainty_loss(x, d({0}, shape), x, ones(shape)).item<double>() == 0.0);
  CHECK(uncertainty_loss(d({1.3}, shape), d({0}, shape), x, ones(shape)).item<double>() ==
        doctest::Approx(1.0).epsilon(1e-12));
  const double l4 = std::log(4.0);
  CHECK(uncertainty_loss(d({2.3}, shape), d({l4}, shape), x, ones(shape)).item<double>() ==
        doctest::Approx(1.0 + l4).epsilon(1e-12));
  CHECK_THROWS(uncertainty_loss(d({1, 2}, {1, 1, 1, 2}), d({0}, shape), x, ones(shape)));
}

TEST_CASE("uncertainty loss gradient identity and finite differences") {
  torch::manual_seed(1);
  auto mu = torch::rand({2, 1, 3, 3}, torch::kFloat64).requires_grad_(true);
  auto lv = (torch::rand({2, 1, 3, 3}, torch::kFloat64) * 2 - 1).requires_grad_(true);
  auto x = torch::rand({2, 1, 3, 3}, torch::kFloat64);
  WeightMap w{torch::rand({2, 1, 3, 3}, torch::kFloat64) + 0.1};
  uncertainty_loss(mu, lv, x, w).backward();
  const double n = 18;
  auto expected = 2.0 / n * w.omega * torch::exp(-lv.detach()) * (mu.detach() - x);
  CHECK(torch::allclose(mu.grad(), expected, 1e-12, 1e-14));

  auto r = testing::check_gradients([&] { return uncertainty_loss(mu, lv, x, w); }, {mu, lv});
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("uncertainty loss is minimized at log of the squared error") {
  auto shape = std::vector<std::int64_t>{1, 1, 1, 1};
  for (double err : {0.5, 1.0, 2.0}) {
    const double best = std::log(err * err);
    double best_grid = 0, best_val = 1e30;
    for (double s = -1.5; s <= 3.0 + 1e-12; s += 0.001) {
      const double v =
          uncertainty_loss(d({err}, shape), d({s}, shape), d({0}, shape), ones(shape)).item<double>();
      if (v < best_val) {
        best_val = v;
        best_grid = s;
      }
    }
    CHECK(best_grid == doctest::Approx(std::clamp(best, -1.5, 3.0)).epsilon(2e-3));
  }
}

TEST_CASE("dispersive loss worked examples") {
  auto same = d({1, 2, 3, 1, 2, 3}, {2, 3});
  CHECK(dispersive_loss(same, 0.1).item<double>() == doctest::Approx(10.0).epsilon(1e-12));
  auto ortho = d({1, 0, 0, 2}, {2, 2});
  CHECK(std::abs(dispersive_loss(ortho, 0.1).item<double>()) < 1e-12);

  // unit vectors with pairwise cosines (f0.f1, f0.f2, f1.f2) = (0.5, 0.0, -0.5)
  const double s3 = std::sqrt(3.0) / 2;
  auto g = torch::zeros({3, 3}, torch::kFloat64);
  g[0][0] = 1;
  g[1][0] = 0.5;
  g[1][1] = s3;
  g[2][1] = -0.5 / s3;  // f0.f2 = 0, f1.f2 = -0.5
  g[2][2] = std::sqrt(1 - std::pow(0.5 / s3, 2));
  auto cos = torch::matmul(g, g.t());
  REQUIRE(cos[0][1].item<double>() == doctest::Approx(0.5).epsilon(1e-12));
  REQUIRE(cos[0][2].item<double>() == doctest::Approx(0.0).epsilon(1e-12));
  REQUIRE(cos[1][2].item<double>() == doctest::Approx(-0.5).epsilon(1e-12));
  const double expected = (std::log(std::exp(5.0) + std::exp(0.0)) +
                           std::log(std::exp(5.0) + std::exp(-5.0)) +
                           std::log(std::exp(0.0) + std::exp(-5.0))) / 3.0;
  CHECK(dispersive_loss(g, 0.1).item<double>() == doctest::Approx(expected).epsilon(1e-12));

  CHECK_THROWS(dispersive_loss(d({1, 2}, {1, 2}), 0.1));
  CHECK_THROWS(dispersive_loss(d({1, 2, 0, 0}, {2, 2}), 0.1));
}

TEST_CASE("dispersive loss invariances and monotonicity") {
  torch::manual_seed(3);
  auto f = torch::randn({5, 4}, torch::kFloat64);
  const double base = dispersive_loss(f, 0.1).item<double>();
  auto scaled = f.clone();
  scaled[2] *= 7.5;
  CHECK(dispersive_loss(scaled, 0.1).item<double>() == doctest::Approx(base).epsilon(1e-12));
  auto perm = torch::tensor({4, 2, 0, 1, 3}, torch::kInt64);
  CHECK(dispersive_loss(f.index_select(0, perm), 0.1).item<double>() ==
        doctest::Approx(base).epsilon(1e-12));

  double prev = 1e30;
  for (double angle = 0.0; angle <= M_PI; angle += M_PI / 16) {
    auto pair = d({1, 0, std::cos(angle), std::sin(angle)}, {2, 2});
    const double v = dispersive_loss(pair, 0.1).item<double>();
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("dispersive loss gradient check") {
  torch::manual_seed(4);
  auto f = torch::randn({4, 6}, torch::kFloat64).requires_grad_(true);
  auto r = testing::check_gradients([&] { return dispersive_loss(f, 0.1); }, {f});
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("perceptual loss worked examples") {
  torch::manual_seed(6);
  auto mu = torch::rand({2, 1, 16, 16}, torch::kFloat64);
  auto x = torch::rand({2, 1, 16, 16}, torch::kFloat64);
  PerceptualConfig single{{1.0}, PerceptualConfig::Reduction::sum};
  const double l1 = (mu - x).abs().sum().item<double>();
  CHECK(perceptual_loss(mu, x, ones({2, 1, 16, 16}), single, identity_extractor()).item<double>() ==
        doctest::Approx(l1).epsilon(1e-12));

  PerceptualConfig five;
  CHECK(perceptual_loss(x, x, ones({2, 1, 16, 16}), five, pooling_extractor()).item<double>() == 0.0);
  WeightMap zero{torch::zeros({2, 1, 16, 16}, torch::kFloat64)};
  CHECK(perceptual_loss(mu, x, zero, five, pooling_extractor()).item<double>() == 0.0);
  CHECK(perceptual_loss(mu, x, ones({2, 1, 16, 16}), five, pooling_extractor()).item<double>() > 0.0);

  CHECK_THROWS(perceptual_loss(mu, x, ones({2, 1, 16, 16}), five, identity_extractor()));
}

TEST_CASE("perceptual loss: weights pooled to each level, lambda scaling") {
  // W is nonzero only in the top-left quadrant; a difference confined to the
  // bottom-right quadrant is invisible at every level
  auto mu = torch::zeros({1, 1, 16, 16}, torch::kFloat64);
  auto x = mu.clone();
  x.slice(2, 8, 16).slice(3, 8, 16).fill_(0.5);
  auto w = torch::zeros({1, 1, 16, 16}, torch::kFloat64);
  w.slice(2, 0, 8).slice(3, 0, 8).fill_(4.0);
  FeatureFn pool = [](const torch::Tensor& t) {
    std::vector<torch::Tensor> out{t};
    for (int l = 1; l < 5; ++l) out.push_back(torch::avg_pool2d(out.back(), 2));
    return out;
  };
  PerceptualConfig cfg;
  const double invisible = perceptual_loss(mu, x, WeightMap{w}, cfg, pool).item<double>();
  // the coarsest 1x1 level mixes both quadrants: W_4 = 1, |diff| = 0.125
  CHECK(invisible == doctest::Approx(1.0 * 1.0 * 0.125).epsilon(1e-12));

  PerceptualConfig doubled{{0.5, 1.0, 1.0, 2.0, 2.0}, PerceptualConfig::Reduction::sum};
  const double base = perceptual_loss(mu, x, ones({1, 1, 16, 16}), cfg, pool).item<double>();
  CHECK(perceptual_loss(mu, x, ones({1, 1, 16, 16}), doubled, pool).item<double>() ==
        doctest::Approx(2 * base).epsilon(1e-12));

  PerceptualConfig mean_cfg{cfg.layer_weights, PerceptualConfig::Reduction::mean};
  auto feats = pool(x);
  double expected = 0;
  for (int l = 0; l < 5; ++l) expected += cfg.layer_weights[l] * feats[l].abs().mean().item<double>();
  CHECK(perceptual_loss(mu, x, ones({1, 1, 16, 16}), mean_cfg, pool).item<double>() ==
        doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("perceptual loss gradient checks") {
  torch::manual_seed(7);
  auto mu = torch::rand({2, 1, 16, 16}, torch::kFloat64).requires_grad_(true);
  auto x = torch::rand({2, 1, 16, 16}, torch::kFloat64);
  WeightMap w{torch::rand({2, 1, 16, 16}, torch::kFloat64)};
  PerceptualConfig cfg;
  auto smooth = testing::check_gradients(
      [&] { return perceptual_loss(mu, x, w, cfg, pooling_extractor()); }, {mu});
  CHECK(smooth.max_rel_error < 1e-3);

  ExtractorSpec spec;
  spec.widths = {4, 4, 8, 8, 8};
  auto ex = make_extractor(spec);
  ex->to(torch::kFloat64);
  auto frozen = testing::check_gradients(
      [&] { return perceptual_loss(mu, x, w, cfg, ex->as_feature_fn()); }, {mu});
  CHECK(frozen.max_rel_error < 1e-3);
}

TEST_CASE("total loss composition") {
  auto s = [](double v) { return torch::tensor(v, torch::kFloat64); };
  LossWeights w;
  auto b0 = total_loss({s(1.0), s(0.5), s(2.0)}, w, 0);
  CHECK(b0.total_value == doctest::Approx(1.504).epsilon(1e-12));
  CHECK(b0.alpha == 1.0);
  CHECK(b0.unc == 1.0);
  CHECK(b0.perc == 0.5);
  CHECK(b0.disp == 2.0);
  auto b25 = total_loss({s(1.0), s(0.5), s(2.0)}, w, 25);
  CHECK(b25.total_value == doctest::Approx(11.004).epsilon(1e-12));
  auto only = total_loss({s(0.7), s(0.0), s(0.0)}, w, 3);
  CHECK(only.total_value == 0.7);
  auto undefined = total_loss({s(0.7), torch::Tensor(), torch::Tensor()}, w, 3);
  CHECK(undefined.total_value == 0.7);
  CHECK_THROWS_WITH(total_loss({s(1.0), s(std::nan("")), s(0.0)}, w, 0),
                    doctest::Contains("perc"));
  CHECK_THROWS_WITH(total_loss({s(1.0), s(0.0), s(INFINITY)}, w, 0), doctest::Contains("disp"));
}

TEST_CASE("total loss gradient check") {
  auto u = torch::tensor(1.2, torch::kFloat64).requires_grad_(true);
  auto p = torch::tensor(0.4, torch::kFloat64).requires_grad_(true);
  auto q = torch::tensor(3.0, torch::kFloat64).requires_grad_(true);
  auto r = testing::check_gradients(
      [&] { return total_loss({u * u, p.exp(), q.sin()}, LossWeights{}, 7).total; }, {u, p, q});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("alpha schedule") {
  CHECK(alpha_schedule(0) == 1.0);
  CHECK(alpha_schedule(4) == 1.0);
  CHECK(alpha_schedule(5) == 5.0);
  CHECK(alpha_schedule(9) == 5.0);
  CHECK(alpha_schedule(10) == 10.0);
  CHECK(alpha_schedule(12) == 10.0);
  CHECK(alpha_schedule(19) == 10.0);
  CHECK(alpha_schedule(20) == 20.0);
  CHECK(alpha_schedule(25) == 20.0);
  for (int e = 0; e < 200; ++e) CHECK(alpha_schedule(e) <= alpha_schedule(e + 1));
  CHECK_THROWS(alpha_schedule(-1));
}
