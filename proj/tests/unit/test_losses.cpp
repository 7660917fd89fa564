#include "doctest.h"
#include "maproto/losses.hpp"
#include "support.hpp"

using namespace maproto;
using namespace testing_support;

namespace {

constexpr double kPi = 3.14159265358979323846;

NetworkConfig small_config(bool multiscale, FusionVariant fusion = FusionVariant::PoolConcat) {
  NetworkConfig c;
  c.input_shape = {8, 8, 8};
  c.stem_channels = 2;
  c.stem_kernel = 3;
  c.stage_blocks = 1;
  c.expansion = 2;
  c.attention_kernel = 3;
  c.use_multiscale = multiscale;
  c.fusion = fusion;
  c.prototypes = 4;
  c.prototype_dim = 3;
  return c;
}

Var scalar(double v) { return Var(Tensor({1}, v)); }

double ce_oracle(const Tensor& logits, const std::vector<int>& y) {
  const std::size_t K = logits.shape()[1];
  double total = 0.0;
  for (std::size_t n = 0; n < y.size(); ++n) {
    double mx = -1e300;
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, logits[n * K + k]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(logits[n * K + k] - mx);
    total += -(logits[n * K + static_cast<std::size_t>(y[n])] - mx - std::log(z));
  }
  return total / double(y.size());
}

std::vector<AffineSpec> random_specs(std::size_t n, Rng& rng) {
  std::vector<AffineSpec> s;
  for (std::size_t i = 0; i < n; ++i) s.push_back(sample_affine(rng, AffineRange{}));
  return s;
}

// Both mapping-loss paths assembled from per-sample tensor warps and explicit sums.
double mapping_oracle(MAProtoNet& net, const ForwardOutput& out, const std::vector<AffineSpec>& specs, bool multi) {
  const std::size_t N = specs.size();
  auto warp_batch = [&](const Tensor& t) {
    Tensor r(t.shape());
    const std::size_t per = t.numel() / N;
    for (std::size_t n = 0; n < N; ++n) {
      Shape s(t.shape().begin() + 1, t.shape().end());
      Tensor one(s, std::vector<double>(t.raw() + n * per, t.raw() + (n + 1) * per));
      const Tensor w = affine_apply(one, specs[n]);
      std::copy_n(w.raw(), per, r.raw() + n * per);
    }
    return r;
  };
  Var warped_mul;
  if (multi) {
    std::vector<Var> levels;
    for (const auto& h : out.pyramid) levels.emplace_back(warp_batch(h.value()));
    warped_mul = net.fuse(levels);
  } else {
    warped_mul = Var(warp_batch(out.h_mul.value()));
  }
  const Tensor lhs = net.mapping(warped_mul).value();
  const Tensor rhs = warp_batch(out.raw_maps.value());
  const std::size_t P = lhs.shape()[1];
  const std::size_t V = lhs.numel() / (N * P);
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      double s = 0.0;
      for (std::size_t v = 0; v < V; ++v) s += std::abs(lhs[(n * P + p) * V + v] - rhs[(n * P + p) * V + v]);
      total += s / double(V);
    }
  return total / double(N);
}

}  // namespace

TEST_CASE("cross-entropy terms") {
  const Tensor uniform_logits({3, 2}, 0.7);
  CHECK(loss_cls(Var(uniform_logits), {0, 1, 1}).value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(loss_oc(Var(uniform_logits), {1, 0, 0}).value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  const Tensor confident({2, 2}, std::vector<double>{40.0, -40.0, -40.0, 40.0});
  CHECK(loss_cls(Var(confident), {0, 1}).value()[0] < 1e-30);
  CHECK(loss_oc(Var(confident), {0, 1}).value()[0] < 1e-30);

  std::mt19937_64 gen(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t N = pick(gen, 1, 6);
    const Tensor logits = random_tensor({N, 2}, gen, -5.0, 5.0);
    std::vector<int> y(N);
    for (auto& v : y) v = static_cast<int>(pick(gen, 0, 1));
    CHECK(loss_cls(Var(logits), y).value()[0] == doctest::Approx(ce_oracle(logits, y)).epsilon(1e-12));
  }
}

TEST_CASE("cluster and separation losses match exhaustive minima") {
  std::mt19937_64 gen(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t N = pick(gen, 1, 5), per = pick(gen, 1, 4);
    PrototypeBank bank;
    for (std::size_t p = 0; p < 2 * per; ++p) bank.class_of.push_back(static_cast<int>(p / per));
    bank.vectors = Var(Tensor({2 * per, 1}));
    const Tensor d = random_tensor({N, 2 * per}, gen, 0.0, 10.0);
    std::vector<int> y(N);
    for (auto& v : y) v = static_cast<int>(pick(gen, 0, 1));
    double clst = 0.0, sep = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      double same = 1e300, other = 1e300;
      for (std::size_t p = 0; p < 2 * per; ++p) {
        double& slot = bank.class_of[p] == y[n] ? same : other;
        slot = std::min(slot, d[n * 2 * per + p]);
      }
      clst += same;
      sep += other;
    }
    CHECK(loss_clst(Var(d), y, bank).value()[0] == doctest::Approx(clst / N).epsilon(1e-14));
    CHECK(loss_sep(Var(d), y, bank).value()[0] == doctest::Approx(-sep / N).epsilon(1e-14));
    CHECK(loss_clst(Var(d), y, bank).value()[0] >= 0.0);
    CHECK(loss_sep(Var(d), y, bank).value()[0] <= 0.0);
  }
}

TEST_CASE("cluster and separation examples") {
  PrototypeBank bank;
  bank.class_of = {0, 0, 1, 1};
  bank.vectors = Var(Tensor({4, 1}));
  const Tensor d({1, 4}, std::vector<double>{0.0, 3.0, 4.0, 4.0});
  CHECK(loss_clst(Var(d), {0}, bank).value()[0] == 0.0);
  CHECK(loss_sep(Var(d), {0}, bank).value()[0] == -4.0);
  CHECK_THROWS_AS(loss_clst(Var(Tensor({2, 4})), {0}, bank), std::invalid_argument);
  CHECK_THROWS_AS(prototype_class_mask({0, 0}, {1}, true), std::invalid_argument);
  CHECK_THROWS_AS(prototype_class_mask({0, 0}, {0}, false), std::invalid_argument);
}

TEST_CASE("head L1 penalty") {
  const std::vector<int> cls = [] {
    std::vector<int> c(30);
    for (std::size_t p = 0; p < 30; ++p) c[p] = p < 15 ? 0 : 1;
    return c;
  }();
  const Tensor init = initial_head_weights(cls, 2);
  CHECK(loss_l1(Var(init), cls).value()[0] == doctest::Approx(15.0));
  Tensor ones({2, 30});
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t p = 0; p < 30; ++p) ones[k * 30 + p] = cls[p] == int(k) ? 5.0 : (p % 2 ? 1.0 : -1.0);
  CHECK(loss_l1(Var(ones), cls).value()[0] == 30.0);
  Tensor diag({2, 30});
  for (std::size_t p = 0; p < 30; ++p) diag[static_cast<std::size_t>(cls[p]) * 30 + p] = 3.0;
  CHECK(loss_l1(Var(diag), cls).value()[0] == 0.0);

  std::mt19937_64 gen(3);
  const Tensor w = random_tensor({2, 30}, gen);
  double oracle = 0.0;
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t p = 0; p < 30; ++p)
      if (cls[p] != int(k)) oracle += std::abs(w[k * 30 + p]);
  CHECK(loss_l1(Var(w), cls).value()[0] == doctest::Approx(oracle).epsilon(1e-14));
}

TEST_CASE("total loss arithmetic") {
  LossTerms t{scalar(1), scalar(2), scalar(3), scalar(4), scalar(5)};
  CHECK(total_loss(t, LossWeights{}).value()[0] == doctest::Approx(5.09).epsilon(1e-14));
  CHECK(total_loss(t, LossWeights{0, 0, 0, 0, 0}).value()[0] == 1.0);
  CHECK_THROWS_AS((LossWeights{-0.1, 0, 0, 0, 0}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((LossWeights{0, 0, std::nan(""), 0, 0}.validate()), std::invalid_argument);
}

TEST_CASE("affine warp examples") {
  std::mt19937_64 gen(4);
  const Tensor x = random_tensor({2, 5, 6, 7}, gen);
  CHECK(max_abs_diff(affine_apply(x, AffineSpec::identity()), x) == 0.0);

  const Tensor smooth = [&] {
    Tensor t({7, 7, 7});
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t j = 0; j < 7; ++j)
        for (std::size_t k = 0; k < 7; ++k) t.at({i, j, k}) = std::sin(0.3 * i) + 0.1 * j * k;
    return t;
  }();
  for (int axis = 0; axis < 3; ++axis) {
    AffineSpec turn;
    turn.angles[axis] = 2.0 * kPi;
    CHECK(max_abs_diff(affine_apply(smooth, turn), smooth) < 1e-5);
  }

  // Quarter turn about H on a cube: offset (a, b, c) moves to (a, -c, b).
  AffineSpec quarter;
  quarter.angles[0] = kPi / 2.0;
  for (int trial = 0; trial < 20; ++trial) {
    Tensor delta({5, 5, 5});
    const std::ptrdiff_t a = std::ptrdiff_t(pick(gen, 0, 4)) - 2, b = std::ptrdiff_t(pick(gen, 0, 4)) - 2,
                         c = std::ptrdiff_t(pick(gen, 0, 4)) - 2;
    delta.at({std::size_t(2 + a), std::size_t(2 + b), std::size_t(2 + c)}) = 1.0;
    Tensor expect({5, 5, 5});
    expect.at({std::size_t(2 + a), std::size_t(2 - c), std::size_t(2 + b)}) = 1.0;
    CHECK(max_abs_diff(affine_apply(delta, quarter), expect) < 1e-12);
    CHECK(max_abs_diff(affine_apply_nearest(delta, quarter), expect) == 0.0);
  }
  // Quarter turn about D: (a, b, c) -> (-b, a, c).
  AffineSpec about_d;
  about_d.angles[2] = kPi / 2.0;
  Tensor delta({5, 5, 5}), expect({5, 5, 5});
  delta.at({3, 4, 1}) = 1.0;
  expect.at({0, 3, 1}) = 1.0;
  CHECK(max_abs_diff(affine_apply(delta, about_d), expect) < 1e-12);
}

TEST_CASE("affine transform gradient is the adjoint warp") {
  std::mt19937_64 gen(5);
  Rng rng(6);
  Var x = Var::parameter(random_tensor({2, 2, 4, 5, 3}, gen));
  const auto specs = random_specs(2, rng);
  auto f = [&] { return probe(affine_transform(x, specs)); };
  CHECK(relative_gradient_error(f, x, 1e-6) < 1e-8);
  CHECK_THROWS_AS(affine_transform(x, {AffineSpec{}}), std::invalid_argument);
}

TEST_CASE("mapping losses vanish under the identity transform") {
  std::mt19937_64 gen(7);
  for (bool multi : {false, true}) {
    for (int trial = 0; trial < 4; ++trial) {
      const NetworkConfig c = small_config(multi, static_cast<FusionVariant>(trial));
      MAProtoNet net(c, trial);
      const ForwardOutput out = net.forward(random_tensor({2, 4, 8, 8, 8}, gen));
      const std::vector<AffineSpec> id(2);
      CHECK(loss_map(net, out.h_mul, out.raw_maps, id).value()[0] <= 1e-7);
      CHECK(loss_mmap(net, out.pyramid, out.raw_maps, id).value()[0] <= 1e-7);
    }
  }
}

TEST_CASE("single-scale multi-scale mapping loss equals the plain mapping loss bitwise") {
  std::mt19937_64 gen(8);
  Rng rng(9);
  MAProtoNet net(small_config(false), 1);
  const ForwardOutput out = net.forward(random_tensor({3, 4, 8, 8, 8}, gen));
  const auto specs = random_specs(3, rng);
  const double a = loss_mmap(net, out.pyramid, out.raw_maps, specs).value()[0];
  const double b = loss_map(net, out.h_mul, out.raw_maps, specs).value()[0];
  CHECK(a == b);
  CHECK(a > 0.0);
}

TEST_CASE("mapping losses match the hand-composed warp paths") {
  std::mt19937_64 gen(10);
  Rng rng(11);
  for (auto fusion : {FusionVariant::ConvConcat, FusionVariant::ConvAdd, FusionVariant::PoolConcat, FusionVariant::PoolAdd}) {
    MAProtoNet net(small_config(true, fusion), 2);
    const ForwardOutput out = net.forward(random_tensor({2, 4, 8, 8, 8}, gen));
    std::vector<AffineSpec> specs = random_specs(2, rng);
    specs[1].angles = {kPi / 2.0, 0.0, 0.0};
    specs[1].scale = 1.0;
    CHECK(loss_mmap(net, out.pyramid, out.raw_maps, specs).value()[0] ==
          doctest::Approx(mapping_oracle(net, out, specs, true)).epsilon(1e-12));
    CHECK(loss_map(net, out.h_mul, out.raw_maps, specs).value()[0] ==
          doctest::Approx(mapping_oracle(net, out, specs, false)).epsilon(1e-12));
  }
}

TEST_CASE("loss terms have the documented signs and the mapping switch works") {
  std::mt19937_64 gen(12);
  Rng rng(13);
  MAProtoNet net(small_config(true), 3);
  const ForwardOutput out = net.forward(random_tensor({4, 4, 8, 8, 8}, gen));
  const std::vector<int> y{0, 1, 1, 0};
  const auto specs = random_specs(4, rng);
  const LossTerms t = compute_losses(net, out, y, specs, true);
  CHECK(t.cls.value()[0] >= 0.0);
  CHECK(t.clst.value()[0] >= 0.0);
  CHECK(t.sep.value()[0] <= 0.0);
  CHECK(t.mapping.value()[0] >= 0.0);
  CHECK(t.oc.value()[0] >= 0.0);
  CHECK(t.mapping.value()[0] == loss_mmap(net, out.pyramid, out.raw_maps, specs).value()[0]);
  const LossTerms legacy = compute_losses(net, out, y, specs, false);
  CHECK(legacy.mapping.value()[0] == loss_map(net, out.h_mul, out.raw_maps, specs).value()[0]);
  CHECK(compute_losses(net, out, y, specs, true, false).mapping.value()[0] == 0.0);
}

TEST_CASE("total loss gradients agree with central differences") {
  std::mt19937_64 gen(14);
  Rng rng(15);
  NetworkConfig c = small_config(true, FusionVariant::PoolAdd);
  MAProtoNet net(c, 4);
  const Tensor x = random_tensor({2, 4, 8, 8, 8}, gen);
  const std::vector<int> y{0, 1};
  const auto specs = random_specs(2, rng);
  auto f = [&] { return total_loss(compute_losses(net, net.forward(x), y, specs, true), LossWeights{}); };
  for (auto& p : net.body_parameters()) {
    CAPTURE(p.name);
    CHECK(relative_gradient_error(f, p.var, 1e-6) < 1e-6);
  }
}
