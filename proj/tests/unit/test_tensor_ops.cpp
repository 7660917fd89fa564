#include <cmath>
#include <numeric>

#include "doctest.h"
#include "maproto/ops.hpp"
#include "support.hpp"

using namespace maproto;
using namespace testing_support;
namespace o = maproto::ops;

namespace {

// Direct six-loop cross-correlation with zero padding.
Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor* b, const o::ConvOptions& opt) {
  const Dims5 d = Dims5::of(x);
  const std::size_t co = w.dim(0), kx = w.dim(2), ky = w.dim(3), kz = w.dim(4);
  const auto oe = o::conv_output_extent({d.x, d.y, d.z}, {kx, ky, kz}, opt);
  Tensor out({d.n, co, oe[0], oe[1], oe[2]});
  std::size_t k = 0;
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < co; ++c)
      for (std::size_t i = 0; i < oe[0]; ++i)
        for (std::size_t j = 0; j < oe[1]; ++j)
          for (std::size_t l = 0; l < oe[2]; ++l) {
            double s = b ? (*b)[c] : 0.0;
            for (std::size_t ci = 0; ci < d.c; ++ci)
              for (std::size_t a = 0; a < kx; ++a)
                for (std::size_t bb = 0; bb < ky; ++bb)
                  for (std::size_t e = 0; e < kz; ++e) {
                    const long xi = long(i * opt.stride[0] + a) - long(opt.padding[0]);
                    const long yi = long(j * opt.stride[1] + bb) - long(opt.padding[1]);
                    const long zi = long(l * opt.stride[2] + e) - long(opt.padding[2]);
                    if (xi < 0 || yi < 0 || zi < 0 || xi >= long(d.x) || yi >= long(d.y) || zi >= long(d.z)) continue;
                    s += x[d.index(n, ci, xi, yi, zi)] * w[(((c * d.c + ci) * kx + a) * ky + bb) * kz + e];
                  }
            out[k++] = s;
          }
  return out;
}

}  // namespace

TEST_CASE("conv3d matches the direct oracle across shapes, strides and padding") {
  std::mt19937_64 gen(1);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = pick(gen, 1, 2), ci = pick(gen, 1, 5), co = pick(gen, 1, 9);
    const std::size_t k = 2 * pick(gen, 0, 2) + 1;
    o::ConvOptions opt;
    for (int a = 0; a < 3; ++a) {
      opt.stride[a] = pick(gen, 1, 2);
      opt.padding[a] = pick(gen, 0, k / 2);
    }
    const Tensor x = random_tensor({n, ci, pick(gen, k, 9), pick(gen, k, 8), pick(gen, k, 7)}, gen);
    const Tensor w = random_tensor({co, ci, k, k, k}, gen);
    const Tensor b = random_tensor({co}, gen);
    const bool with_bias = trial % 2 == 0;
    const Var y = o::conv3d(Var(x), Var(w), with_bias ? Var(b) : Var(), opt);
    CHECK(max_abs_diff(y.value(), naive_conv(x, w, with_bias ? &b : nullptr, opt)) < 1e-10);
  }
}

TEST_CASE("conv3d gradients agree with central differences") {
  std::mt19937_64 gen(2);
  // Narrow outputs take the direct path, wide ones the matrix path, 1x1 the pointwise path.
  for (std::size_t co : {1u, 6u}) {
    for (std::size_t k : {1u, 3u}) {
      o::ConvOptions opt;
      if (k == 3) opt = {{2, 1, 1}, {1, 1, 0}};
      Var x = Var::parameter(random_tensor({2, 3, 5, 4, 4}, gen));
      Var w = Var::parameter(random_tensor({co, 3, k, k, k}, gen));
      Var b = Var::parameter(random_tensor({co}, gen));
      auto f = [&] { return probe(o::conv3d(x, w, b, opt)); };
      CHECK(relative_gradient_error(f, x, 1e-6) < 1e-7);
      CHECK(relative_gradient_error(f, w, 1e-6) < 1e-7);
      CHECK(relative_gradient_error(f, b, 1e-6) < 1e-7);
    }
  }
}

TEST_CASE("elementwise and reduction gradients") {
  std::mt19937_64 gen(3);
  Var a = Var::parameter(random_tensor({2, 3, 2, 2, 2}, gen));
  Var b = Var::parameter(random_tensor({2, 3, 2, 2, 2}, gen));
  const std::vector<std::function<Var()>> fs{
      [&] { return probe(o::add(a, b)); },
      [&] { return probe(o::sub(a, b)); },
      [&] { return probe(o::mul(a, b)); },
      [&] { return probe(o::scale(a, -1.7)); },
      [&] { return probe(o::relu(a)); },
      [&] { return probe(o::sigmoid(a)); },
      [&] { return probe(o::abs(a)); },
      [&] { return o::mean(o::mul(a, a)); },
      [&] { return probe(o::transpose(a, 1, 4)); },
      [&] { return probe(o::concat_channels({a, b, a})); },
      [&] { return probe(o::slice_channels(a, 1, 2)); },
      [&] { return probe(o::mul_channel_gate(a, o::slice_channels(b, 0, 1))); },
      [&] { return probe(o::global_avg_pool(a)); },
      [&] { return probe(o::z_pool(a)); },
      [&] { return o::weighted_sum({o::sum(a), o::mean(b), o::sum(o::mul(a, b))}, {0.3, 0.0, 2.0}); },
  };
  for (std::size_t i = 0; i < fs.size(); ++i) {
    CAPTURE(i);
    CHECK(relative_gradient_error(fs[i], a, 1e-6) < 1e-7);
    CHECK(relative_gradient_error(fs[i], b, 1e-6) < 1e-7);
  }
}

TEST_CASE("pooling and normalisation gradients") {
  std::mt19937_64 gen(4);
  Var x = Var::parameter(random_tensor({2, 3, 5, 4, 6}, gen));
  Var gamma = Var::parameter(random_tensor({3}, gen, 0.5, 1.5));
  Var beta = Var::parameter(random_tensor({3}, gen));
  o::BatchNormState st{Tensor({3}, 0.0), Tensor({3}, 1.0)};
  auto bn = [&] { return probe(o::batch_norm(x, gamma, beta, st, true)); };
  CHECK(relative_gradient_error(bn, x, 1e-6) < 1e-6);
  CHECK(relative_gradient_error(bn, gamma, 1e-6) < 1e-7);
  CHECK(relative_gradient_error(bn, beta, 1e-6) < 1e-7);
  auto bn_eval = [&] { return probe(o::batch_norm(x, gamma, beta, st, false)); };
  CHECK(relative_gradient_error(bn_eval, x, 1e-6) < 1e-7);
  auto mp = [&] { return probe(o::max_pool3d(x, {3, 3, 3}, {2, 2, 2}, {1, 1, 1})); };
  CHECK(relative_gradient_error(mp, x, 1e-6) < 1e-7);
  auto ap = [&] { return probe(o::avg_pool3d(x, {2, 2, 3}, {2, 2, 3})); };
  CHECK(relative_gradient_error(ap, x, 1e-6) < 1e-7);
}

TEST_CASE("prototype layer gradients") {
  std::mt19937_64 gen(5);
  Var raw = Var::parameter(random_tensor({2, 3, 3, 2, 2}, gen, 0.05, 0.95));
  Var fea = Var::parameter(random_tensor({2, 4, 3, 2, 2}, gen));
  Var proto = Var::parameter(random_tensor({3, 4}, gen, 0.0, 1.0));
  Var head = Var::parameter(random_tensor({2, 3}, gen));
  auto chain = [&](bool cosine) {
    const Var maps = o::soft_mask(raw, 4.0);
    const Var u = o::masked_pool(maps, fea);
    const Var s = cosine ? o::cosine_similarity(u, proto) : o::log_similarity(o::prototype_sq_distances(u, proto), 1e-4);
    return o::cross_entropy(o::linear(s, head), {0, 1});
  };
  for (bool cosine : {false, true}) {
    auto f = [&] { return chain(cosine); };
    CHECK(relative_gradient_error(f, raw, 1e-6) < 1e-6);
    CHECK(relative_gradient_error(f, fea, 1e-6) < 1e-6);
    CHECK(relative_gradient_error(f, proto, 1e-6) < 1e-6);
    CHECK(relative_gradient_error(f, head, 1e-6) < 1e-6);
  }
  Var d = Var::parameter(random_tensor({3, 4}, gen, 0.0, 2.0));
  const std::vector<char> allowed{1, 0, 1, 0, 0, 1, 1, 1, 1, 1, 0, 0};
  auto rm = [&] { return probe(o::masked_row_min(d, allowed)); };
  CHECK(relative_gradient_error(rm, d, 1e-6) < 1e-7);
}

TEST_CASE("soft mask endpoints, midpoint and ordering") {
  std::mt19937_64 gen(6);
  const Tensor raw = random_tensor({2, 3, 4, 3, 2}, gen, 0.0, 1.0);
  const Tensor m = o::soft_mask(Var(raw), 4.0).value();
  const std::size_t sp = 24;
  for (std::size_t map = 0; map < 6; ++map) {
    const double* r = raw.raw() + map * sp;
    const double* v = m.raw() + map * sp;
    CHECK(*std::min_element(v, v + sp) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(*std::max_element(v, v + sp) == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t i = 0; i < sp; ++i)
      for (std::size_t j = 0; j < sp; ++j)
        if (r[i] < r[j]) CHECK(v[i] < v[j]);
  }
  // A map whose value 0.5 sits exactly halfway between its extremes stays at 0.5.
  const Tensor three({1, 1, 3, 1, 1}, std::vector<double>{0.2, 0.5, 0.8});
  CHECK(o::soft_mask(Var(three), 4.0).value()[1] == doctest::Approx(0.5).epsilon(1e-14));
  const Tensor flat({1, 1, 2, 2, 1}, 0.3);
  const Var flat_mask = o::soft_mask(Var(flat), 4.0);
  for (double v : flat_mask.value().storage()) CHECK(v == 0.5);
}

TEST_CASE("masked pooling and similarity identities") {
  std::mt19937_64 gen(7);
  const Tensor fea = random_tensor({1, 3, 2, 2, 2}, gen);
  Tensor mean({3}, 0.0);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t v = 0; v < 8; ++v) mean[c] += fea[c * 8 + v];
    mean[c] /= 8.0;
  }
  for (double level : {0.7, 0.0}) {  // uniform map, then zero mass
    const Tensor u = o::masked_pool(Var(Tensor({1, 1, 2, 2, 2}, level)), Var(fea)).value();
    for (std::size_t c = 0; c < 3; ++c) CHECK(u[c] == doctest::Approx(mean[c]).epsilon(1e-14));
  }
  const Tensor proto({1, 3}, std::vector<double>{mean[0], mean[1], mean[2]});
  const Var d = o::prototype_sq_distances(Var(mean.reshaped({1, 1, 3})), Var(proto));
  CHECK(d.value()[0] == doctest::Approx(0.0));
  CHECK(o::log_similarity(d, 1e-4).value()[0] == doctest::Approx(std::log(1e4)).epsilon(1e-12));
  // Strictly decreasing in distance.
  const Tensor ds({1, 5}, std::vector<double>{0.0, 0.1, 1.0, 10.0, 1e6});
  const Tensor s = o::log_similarity(Var(ds), 1e-4).value();
  for (std::size_t i = 1; i < 5; ++i) CHECK(s[i] < s[i - 1]);
  CHECK(s[4] < 1e-5);
}

TEST_CASE("cross entropy and linear head arithmetic") {
  const Tensor logits({2, 2}, std::vector<double>{0.0, 0.0, 2.0, -1.0});
  const double expect = 0.5 * (std::log(2.0) + (std::log(std::exp(2.0) + std::exp(-1.0)) - 2.0));
  CHECK(o::cross_entropy(Var(logits), {1, 0}).value()[0] == doctest::Approx(expect).epsilon(1e-14));
  const Tensor w({2, 3}, std::vector<double>{1, -0.5, 2, 0, 1, -1});
  const Tensor s({1, 3}, std::vector<double>{1, 2, 3});
  const Tensor y = o::linear(Var(s), Var(w)).value();
  CHECK(y[0] == doctest::Approx(6.0));
  CHECK(y[1] == doctest::Approx(-1.0));
  CHECK(o::linear(Var(Tensor({1, 3}, 0.0)), Var(w)).value().sum() == 0.0);
}

TEST_CASE("z-pool stacks channel max and mean") {
  const Tensor x({1, 3, 1, 1, 2}, std::vector<double>{1, -2, 4, 0, -3, 5});
  const Tensor z = o::z_pool(Var(x)).value();
  CHECK(z.shape() == Shape{1, 2, 1, 1, 2});
  CHECK(z[0] == 4.0);
  CHECK(z[1] == 5.0);
  CHECK(z[2] == doctest::Approx(2.0 / 3.0));
  CHECK(z[3] == doctest::Approx(1.0));
}

TEST_CASE("no-grad mode records nothing") {
  Var a = Var::parameter(Tensor({2}, 1.0));
  NoGradGuard g;
  const Var y = o::sum(o::mul(a, a));
  CHECK(y.node()->parents.empty());
}

TEST_CASE("branch trace records and replays non-smooth choices") {
  std::mt19937_64 gen(77);
  Var x = Var::parameter(random_tensor({2, 3, 4, 4, 4}, gen));
  auto f = [&] {
    Var y = o::relu(o::max_pool3d(x, {2, 2, 2}, {2, 2, 2}, {0, 0, 0}));
    Var z = o::abs(o::z_pool(y));
    return o::sum(o::soft_mask(z, 4.0));
  };
  NoGradGuard g;
  o::BranchTrace trace;
  const double base = f().value()[0];
  CHECK(trace.size() > 0);
  const std::uint64_t digest = trace.digest();

  trace.replay();
  CHECK(f().value()[0] == base);

  // A large perturbation switches branches: the digest moves, while replay stays on the recorded piece.
  Tensor& w = x.mutable_value();
  const Tensor keep = w;
  for (auto& v : w.storage()) v = -v;
  {
    o::BranchTrace probe;
    f();
    CHECK(probe.digest() != digest);
  }
  trace.replay();
  const double replayed = f().value()[0];
  CHECK(std::isfinite(replayed));
  w = keep;

  trace.replay();
  o::sum(x);  // no choices consumed
  f();
  CHECK_THROWS_AS(f(), std::logic_error);
}

TEST_CASE("piecewise audit agrees with the analytic gradient across kinks") {
  std::mt19937_64 gen(78);
  Var x = Var::parameter(random_tensor({1, 2, 4, 4, 4}, gen));
  Var w = Var::parameter(random_tensor({3, 2, 3, 3, 3}, gen));
  auto f = [&] {
    Var c = o::relu(o::conv3d(x, w, Var(), {{1, 1, 1}, {1, 1, 1}}));
    return probe(o::max_pool3d(c, {2, 2, 2}, {2, 2, 2}, {0, 0, 0}));
  };
  const GradientAudit a = audit_gradient(f, w, 1e-1);
  CHECK(a.checked == w.value().numel());
  CHECK(a.straddling > 0);
  CHECK(a.raw_error > 1e-3);
  CHECK(a.piecewise_error < 1e-10);
}
