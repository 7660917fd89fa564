#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "maproto/metrics.hpp"
#include "support.hpp"

using namespace maproto;
using namespace testing_support;

namespace {

NetworkConfig tiny_net() {
  NetworkConfig c;
  c.input_shape = {16, 16, 12};
  c.stem_channels = 4;
  c.stem_kernel = 3;
  c.stage_blocks = 1;
  c.attention_kernel = 3;
  c.prototypes = 4;
  c.prototype_dim = 6;
  return c;
}

Tensor binary(const Shape& s, std::mt19937_64& gen, double p) {
  Tensor t(s);
  std::bernoulli_distribution b(p);
  for (auto& v : t.storage()) v = b(gen) ? 1.0 : 0.0;
  return t;
}

std::size_t lines(const std::string& s) {
  std::istringstream in(s);
  std::size_t n = 0;
  for (std::string l; std::getline(in, l);) n += !l.empty();
  return n;
}

}  // namespace

TEST_CASE("balanced accuracy") {
  CHECK(bac({0, 1, 1, 0}, {0, 1, 1, 0}) == 1.0);
  // 10 positives with 8 hits, 10 negatives with 9 hits.
  std::vector<int> y, p;
  for (int i = 0; i < 10; ++i) y.push_back(1), p.push_back(i < 8);
  for (int i = 0; i < 10; ++i) y.push_back(0), p.push_back(i < 1);
  CHECK(bac(p, y) == doctest::Approx(0.85).epsilon(1e-15));

  std::mt19937_64 gen(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = pick(gen, 2, 40);
    std::vector<int> labels(n), preds(n);
    for (auto& l : labels) l = int(pick(gen, 0, 1));
    labels[0] = 0;
    labels[1] = 1;
    for (auto& q : preds) q = int(pick(gen, 0, 1));
    double tp = 0, tn = 0, np = 0, nn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i]) np++, tp += preds[i] == 1;
      else nn++, tn += preds[i] == 0;
    }
    CHECK(bac(preds, labels) == doctest::Approx((tp / np + tn / nn) / 2).epsilon(1e-15));
    // Swapping the class names together with the predictions leaves BAC unchanged.
    std::vector<int> sl(labels), sp(preds);
    for (auto& v : sl) v = 1 - v;
    for (auto& v : sp) v = 1 - v;
    CHECK(bac(sp, sl) == bac(preds, labels));
    CHECK(bac(std::vector<int>(n, 0), labels) == 0.5);
    CHECK(bac(std::vector<int>(n, 1), labels) == 0.5);
  }
  CHECK_THROWS_AS(bac({1, 1}, {1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(bac({1}, {1, 0}), std::invalid_argument);
  CHECK_THROWS_AS(bac({0, 1}, {0, 2}), std::invalid_argument);
}

TEST_CASE("activation precision") {
  std::mt19937_64 gen(2);
  const Tensor mask = binary({4, 4, 4}, gen, 0.4);
  CHECK(activation_precision(mask, mask) == 1.0);
  Tensor half({4, 4, 4});
  for (std::size_t i = 0; i < 32; ++i) half[i] = 1.0;
  CHECK(activation_precision(Tensor({4, 4, 4}, 1.0), half) == 0.5);
  CHECK(activation_precision(Tensor({4, 4, 4}, 0.5), half) == 0.0);  // nothing strictly above the threshold
  CHECK_THROWS_AS(activation_precision(Tensor({4, 4, 4}), Tensor({4, 4, 3})), std::invalid_argument);

  for (int trial = 0; trial < 1000; ++trial) {
    const Tensor map = random_tensor({4, 4, 4}, gen, 0.0, 1.0);
    const Tensor m = binary({4, 4, 4}, gen, uniform(gen, 0.0, 1.0));
    const double t = uniform(gen, 0.0, 1.0);
    int active = 0, hit = 0;
    for (std::size_t x = 0; x < 4; ++x)
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t z = 0; z < 4; ++z)
          if (map.at({x, y, z}) > t) {
            ++active;
            hit += m.at({x, y, z}) == 1.0;
          }
    const double ap = activation_precision(map, m, t);
    CHECK(ap == (active ? double(hit) / active : 0.0));
    CHECK(ap >= 0.0);
    CHECK(ap <= 1.0);
  }
}

TEST_CASE("deletion order") {
  const Tensor m({2, 2, 1}, std::vector<double>{0.3, 0.9, 0.3, 0.1});
  CHECK(deletion_order(m) == std::vector<std::size_t>{1, 0, 2, 3});
  CHECK(deletion_order(m, true) == std::vector<std::size_t>{3, 0, 2, 1});
}

TEST_CASE("deletion score from a curve") {
  CHECK(ids_from_curve(std::vector<double>(21, 0.73)) == 1.0);
  CHECK(ids_from_curve({1.0, 0.5, 0.0}) == 0.5);
  std::vector<double> collapse(21, 0.0);
  collapse[0] = 0.9;
  CHECK(ids_from_curve(collapse) == doctest::Approx(0.5 / 20).epsilon(1e-15));
  CHECK(ids_from_curve({0.5, 0.9, 0.5}) == 1.0);  // rises are clamped to the start value
  CHECK(ids_from_curve({0.0, 0.3}) == 0.0);
  CHECK_THROWS_AS(ids_from_curve({0.5}), std::invalid_argument);
  CHECK_THROWS_AS(ids_from_curve({0.5, std::nan("")}), std::invalid_argument);

  std::mt19937_64 gen(3);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> c(pick(gen, 2, 30));
    for (auto& v : c) v = uniform(gen, 0.0, 1.0);
    c[0] = uniform(gen, 0.01, 1.0);
    // Trapezoid oracle over [0, 1].
    const double h = 1.0 / double(c.size() - 1);
    double area = 0.0;
    for (std::size_t i = 0; i + 1 < c.size(); ++i)
      area += h * (std::min(c[i] / c[0], 1.0) + std::min(c[i + 1] / c[0], 1.0)) / 2;
    const double ids = ids_from_curve(c);
    CHECK(ids == doctest::Approx(area).epsilon(1e-12));
    CHECK(ids >= 0.0);
    CHECK(ids <= 1.0);
  }
}

TEST_CASE("subject attribution averages and up-samples the maps") {
  std::mt19937_64 gen(4);
  const Tensor one = random_tensor({3, 2, 2}, gen, 0.0, 1.0);
  Tensor maps({2, 5, 3, 2, 2});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t p = 0; p < 5; ++p)
      for (std::size_t v = 0; v < 12; ++v) maps[(n * 5 + p) * 12 + v] = n == 1 ? one[v] : 0.25;
  const Tensor same = subject_attribution(Var(maps), 1, {3, 2, 2});
  CHECK(max_abs_diff(same, one) < 1e-15);
  const Tensor flat = subject_attribution(Var(maps), 0, {128, 128, 96});
  CHECK(flat.shape() == Shape{128, 128, 96});
  double worst = 0.0;
  for (double v : flat.storage()) worst = std::max(worst, std::abs(v - 0.25));
  CHECK(worst < 1e-14);
  CHECK_THROWS_AS(subject_attribution(Var(maps), 2, {3, 2, 2}), std::out_of_range);

  Tensor mixed({1, 2, 1, 1, 2}, std::vector<double>{0.0, 1.0, 0.5, 0.25});
  const Tensor avg = subject_attribution(Var(mixed), 0, {1, 1, 2});
  CHECK(avg[0] == 0.25);
  CHECK(avg[1] == 0.625);
}

TEST_CASE("an input-blind model has a flat deletion curve") {
  MAProtoNet net(tiny_net(), 5);
  net.head_weight().mutable_value().fill(0.0);
  const Dataset d = synth_generate(2, {4, 16, 16, 12}, 6);
  std::mt19937_64 gen(7);
  const Tensor map = random_tensor({16, 16, 12}, gen, 0.0, 1.0);
  const auto curve = deletion_curve(net, d[1], map, 20);
  REQUIRE(curve.size() == 21);
  for (double p : curve) CHECK(p == 0.5);
  CHECK(ids_from_curve(curve) == 1.0);
  CHECK_THROWS_AS(deletion_curve(net, d[1], Tensor({16, 16, 11}), 20), std::invalid_argument);
  CHECK_THROWS_AS(deletion_curve(net, d[1], map, 0), std::invalid_argument);
}

TEST_CASE("deletion curve endpoints") {
  MAProtoNet net(tiny_net(), 8);
  net.set_training(false);
  const Dataset d = synth_generate(2, {4, 16, 16, 12}, 9);
  std::mt19937_64 gen(10);
  const Tensor map = random_tensor({16, 16, 12}, gen, 0.0, 1.0);
  const auto curve = deletion_curve(net, d[0], map, 4);
  REQUIRE(curve.size() == 5);
  auto probability = [&](const Tensor& image) {
    NoGradGuard g;
    const Tensor l = net.forward(as_batch(image)).logits.value();
    const int y = d[0].label;
    return 1.0 / (1.0 + std::exp(l[1 - y] - l[y]));
  };
  CHECK(curve[0] == doctest::Approx(probability(d[0].image)).epsilon(1e-12));
  CHECK(curve[4] == doctest::Approx(probability(Tensor(d[0].image.shape()))).epsilon(1e-12));
  // Half-way point: the top half of voxels by activation zeroed in every channel.
  Tensor half = d[0].image;
  const auto order = deletion_order(map);
  for (std::size_t i = 0; i < map.numel() / 2; ++i)
    for (std::size_t c = 0; c < 4; ++c) half[c * map.numel() + order[i]] = 0.0;
  CHECK(curve[2] == doctest::Approx(probability(half)).epsilon(1e-12));
}

TEST_CASE("evaluation is repeatable and agrees with stored maps") {
  MAProtoNet net(tiny_net(), 11);
  const Dataset d = synth_generate(6, {4, 16, 16, 12}, 12);
  EvalOptions opt;
  opt.ids_steps = 5;
  const EvalResult a = evaluate(net, d, opt);
  const EvalResult b = evaluate(net, d, opt);
  REQUIRE(a.ap.has_value());
  REQUIRE(a.ids.has_value());
  CHECK(a.bac == b.bac);
  CHECK(*a.ap == *b.ap);
  CHECK(*a.ids == *b.ids);
  CHECK(a.subjects.size() == 6);
  for (const auto& s : a.subjects) {
    CHECK(s.ap.has_value());
    CHECK(*s.ap >= 0.0);
    CHECK(*s.ap <= 1.0);
    CHECK(*s.ids >= 0.0);
    CHECK(*s.ids <= 1.0);
  }

  // Maps written to float32 NIfTI files and read back.
  const auto dir = std::filesystem::temp_directory_path() / "maproto_metric_maps";
  std::filesystem::create_directories(dir);
  std::vector<Tensor> stored;
  const auto live = attribution_maps(net, d);
  for (std::size_t i = 0; i < live.size(); ++i) {
    write_nifti(dir / ("m" + std::to_string(i) + ".nii.gz"), live[i]);
    stored.push_back(read_nifti(dir / ("m" + std::to_string(i) + ".nii.gz")).data);
  }
  std::filesystem::remove_all(dir);
  const EvalResult s = evaluate_with_maps(net, d, stored, opt);
  CHECK(std::abs(s.bac - a.bac) <= 1e-6);
  CHECK(std::abs(*s.ap - *a.ap) <= 1e-6);
  CHECK(std::abs(*s.ids - *a.ids) <= 1e-6);
  CHECK_THROWS_AS(evaluate_with_maps(net, d, {}, opt), std::invalid_argument);
}

TEST_CASE("missing masks and disabled deletion scores") {
  MAProtoNet net(tiny_net(), 13);
  Dataset d = synth_generate(4, {4, 16, 16, 12}, 14);
  EvalOptions opt;
  opt.compute_ids = false;
  d[0].mask = Tensor();
  const EvalResult partial = evaluate(net, d, opt);
  CHECK(!partial.ids.has_value());
  CHECK(partial.ap.has_value());
  CHECK(!partial.subjects[0].ap.has_value());
  for (auto& v : d) v.mask = Tensor();
  const EvalResult none = evaluate(net, d, opt);
  CHECK(!none.ap.has_value());
  CHECK(none.bac >= 0.0);
}

TEST_CASE("fold aggregation and reports") {
  std::vector<EvalResult> folds(5);
  const double bacs[] = {0.8, 0.9, 0.7, 0.85, 0.75};
  for (int f = 0; f < 5; ++f) {
    folds[f].bac = bacs[f];
    folds[f].ap = 0.1 * (f + 1);
  }
  folds[2].ids = 0.4;
  const FoldReport r = aggregate(folds);
  REQUIRE(r.bac.has_value());
  CHECK(r.bac->mean == doctest::Approx(0.8));
  // Sample sd of {0.8, 0.9, 0.7, 0.85, 0.75}: sqrt(0.025 / 4).
  CHECK(r.bac->sd == doctest::Approx(std::sqrt(0.025 / 4)).epsilon(1e-12));
  CHECK(r.ap->mean == doctest::Approx(0.3));
  CHECK(r.ids->count == 1);
  CHECK(r.ids->sd == 0.0);
  const std::string table = format_table(r, "synthetic");
  CHECK(lines(table) == 1 + 1 + 5 + 1);
  CHECK(table.find("80.0 +- 7.9") != std::string::npos);
  CHECK(table.find("n/a") != std::string::npos);
  const std::string rec = format_records(r);
  CHECK(lines(rec) == 6);
  CHECK(rec.find("\"record\":\"aggregate\"") != std::string::npos);

  const FoldReport empty = aggregate({});
  CHECK(!empty.bac.has_value());
}

TEST_CASE("stack images") {
  Dataset d = synth_generate(3, {4, 4, 4, 2}, 15);
  const Tensor b = stack_images(d, {2, 0});
  CHECK(b.shape() == Shape{2, 4, 4, 4, 2});
  for (std::size_t i = 0; i < d[2].image.numel(); ++i) CHECK(b[i] == d[2].image[i]);
  CHECK_THROWS_AS(stack_images(d, {}), std::invalid_argument);
  d[1].image = Tensor({4, 4, 4, 3});
  CHECK_THROWS_AS(stack_images(d, {0, 1}), std::invalid_argument);
}
