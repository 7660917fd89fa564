#include <cmath>
#include <filesystem>
#include <numbers>

#include "doctest.h"
#include "maproto/training.hpp"
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

TrainConfig tiny_train(std::size_t epochs, std::size_t period) {
  TrainConfig t;
  t.epochs = epochs;
  t.stage_period = period;
  t.warmup_epochs = std::min<std::size_t>(1, epochs - 1);
  t.head_epochs = 2;
  t.batch = 4;
  t.seed = 11;
  return t;
}

Dataset tiny_data(std::size_t n = 8) { return synth_generate(n, {4, 16, 16, 12}, 3); }

std::vector<Tensor> snapshot(const std::vector<NamedParam>& ps) {
  std::vector<Tensor> out;
  for (const auto& p : ps) out.push_back(p.var.value());
  return out;
}

bool same(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].shape() != b[i].shape() || max_abs_diff(a[i], b[i]) != 0.0) return false;
  return true;
}

std::vector<NamedParam> non_head(MAProtoNet& m, bool with_prototypes = true) {
  std::vector<NamedParam> out;
  for (auto& p : m.named_parameters()) {
    if (p.var.node() == m.head_weight().node()) continue;
    if (!with_prototypes && p.var.node() == m.bank().vectors.node()) continue;
    out.push_back(p);
  }
  return out;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig c;  // 100 epochs, 20 warm-up, base 1e-3
  CHECK(lr_at(c, 0) == doctest::Approx(1e-3 / 20).epsilon(1e-15));
  CHECK(lr_at(c, 19) == doctest::Approx(1e-3).epsilon(1e-15));
  CHECK(lr_at(c, 20) == doctest::Approx(0.001).epsilon(1e-15));
  CHECK(lr_at(c, 60) == doctest::Approx(0.0005).epsilon(1e-12));
  CHECK(std::abs(lr_at(c, 19) - lr_at(c, 20)) < 1e-15);
  for (std::size_t e = 1; e < 20; ++e) CHECK(lr_at(c, e) > lr_at(c, e - 1));
  for (std::size_t e = 21; e < 100; ++e) CHECK(lr_at(c, e) < lr_at(c, e - 1));
  for (std::size_t e = 20; e < 100; ++e) {
    const double oracle = 0.5e-3 * (1.0 + std::cos(std::numbers::pi * double(e - 20) / 80.0));
    CHECK(lr_at(c, e) == doctest::Approx(oracle).epsilon(1e-13));
    CHECK(lr_at(c, e) > 0.0);
  }
  CHECK_THROWS_AS(lr_at(c, 100), std::out_of_range);

  std::mt19937_64 gen(1);
  for (int trial = 0; trial < 50; ++trial) {
    TrainConfig r;
    r.epochs = pick(gen, 2, 200);
    r.warmup_epochs = pick(gen, 1, r.epochs - 1);
    r.base_lr = uniform(gen, 1e-5, 1e-2);
    const std::size_t w = r.warmup_epochs;
    CHECK(lr_at(r, w - 1) == doctest::Approx(r.base_lr).epsilon(1e-14));
    CHECK(lr_at(r, w) == doctest::Approx(r.base_lr).epsilon(1e-14));
  }
}

TEST_CASE("train config validation") {
  auto rejects = [](auto edit) {
    TrainConfig c;
    edit(c);
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  };
  TrainConfig ok;
  CHECK_NOTHROW(ok.validate());
  CHECK(ok.cycles() == 10);
  rejects([](TrainConfig& c) { c.epochs = 0; });
  rejects([](TrainConfig& c) { c.stage_period = 7; });
  rejects([](TrainConfig& c) { c.warmup_epochs = 100; });
  rejects([](TrainConfig& c) { c.batch = 0; });
  rejects([](TrainConfig& c) { c.base_lr = 0.0; });
  rejects([](TrainConfig& c) { c.beta2 = 1.0; });
  rejects([](TrainConfig& c) { c.weights.clst = -1.0; });
  rejects([](TrainConfig& c) { c.affine_min_scale = 1.2; });
}

TEST_CASE("AdamW matches a scalar oracle") {
  std::mt19937_64 gen(2);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.01;
  Var w = Var::parameter(random_tensor({3, 2}, gen));
  AdamW opt({{"w", w}}, b1, b2, eps, wd);
  std::vector<double> ref(w.value().storage().begin(), w.value().storage().end());
  std::vector<double> m(6, 0.0), v(6, 0.0);
  for (int t = 1; t <= 25; ++t) {
    const Tensor c = random_tensor({3, 2}, gen, -2.0, 2.0);
    const double lr = uniform(gen, 1e-4, 1e-2);
    // loss = sum(c * w^2), so dL/dw = 2 c w
    backward(ops::sum(ops::mul(Var(c), ops::mul(w, w))));
    std::vector<double> g(6);
    for (std::size_t k = 0; k < 6; ++k) g[k] = 2.0 * c[k] * ref[k];
    opt.step(lr);
    opt.zero_grad();
    for (std::size_t k = 0; k < 6; ++k) {
      m[k] = b1 * m[k] + (1 - b1) * g[k];
      v[k] = b2 * v[k] + (1 - b2) * g[k] * g[k];
      const double mh = m[k] / (1 - std::pow(b1, t)), vh = v[k] / (1 - std::pow(b2, t));
      ref[k] = ref[k] * (1 - lr * wd) - lr * mh / (std::sqrt(vh) + eps);
    }
    for (std::size_t k = 0; k < 6; ++k) CHECK(w.value()[k] == doctest::Approx(ref[k]).epsilon(1e-12));
  }
  CHECK(opt.steps() == 25);
}

TEST_CASE("first AdamW step moves each coordinate by about lr") {
  std::mt19937_64 gen(3);
  Var w = Var::parameter(random_tensor({10}, gen));
  const Tensor before = w.value();
  AdamW opt({{"w", w}}, 0.9, 0.999, 1e-8, 0.0);
  const Tensor c = random_tensor({10}, gen, 0.5, 3.0);
  backward(ops::sum(ops::mul(Var(c), w)));
  opt.step(0.01);
  for (std::size_t k = 0; k < 10; ++k) CHECK(w.value()[k] - before[k] == doctest::Approx(-0.01).epsilon(1e-6));
}

TEST_CASE("parameters without gradient only decay") {
  Var w = Var::parameter(Tensor({4}, 2.0));
  AdamW opt({{"w", w}}, 0.9, 0.999, 1e-8, 0.1);
  opt.step(0.5);
  for (double v : w.value().storage()) CHECK(v == doctest::Approx(2.0 * (1 - 0.05)).epsilon(1e-15));
}

TEST_CASE("gradient clipping") {
  Var a = Var::parameter(Tensor({2}, std::vector<double>{1.0, 1.0}));
  Var b = Var::parameter(Tensor({1}, 1.0));
  AdamW opt({{"a", a}, {"b", b}}, 0.9, 0.999, 1e-8, 0.0);
  backward(ops::add(ops::sum(ops::mul(Var(Tensor({2}, std::vector<double>{3.0, 0.0})), a)),
                    ops::sum(ops::mul(Var(Tensor({1}, 4.0)), b))));
  CHECK(opt.clip_grad_norm(10.0) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == 3.0);
  CHECK(opt.clip_grad_norm(1.0) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6).epsilon(1e-10));
  CHECK(b.grad()[0] == doctest::Approx(0.8).epsilon(1e-10));
  CHECK(opt.clip_grad_norm(0.0) == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("optimiser state round-trips through an archive") {
  std::mt19937_64 gen(4);
  Var w = Var::parameter(random_tensor({5}, gen));
  AdamW opt({{"w", w}}, 0.9, 0.999, 1e-8, 0.01);
  for (int i = 0; i < 3; ++i) {
    backward(ops::sum(ops::mul(w, w)));
    opt.step(1e-2);
    opt.zero_grad();
  }
  Archive a;
  opt.save(a, "o");
  Var w2 = Var::parameter(w.value());
  AdamW opt2({{"w", w2}}, 0.9, 0.999, 1e-8, 0.01);
  opt2.load(a, "o");
  CHECK(opt2.steps() == 3);
  for (Var* x : {&w, &w2}) {
    backward(ops::sum(ops::mul(*x, *x)));
  }
  opt.step(1e-2);
  opt2.step(1e-2);
  CHECK(max_abs_diff(w.value(), w2.value()) == 0.0);

  Var wrong = Var::parameter(Tensor({4}));
  AdamW bad({{"w", wrong}}, 0.9, 0.999, 1e-8, 0.0);
  CHECK_THROWS_AS(bad.load(a, "o"), std::invalid_argument);
}

TEST_CASE("history records round-trip") {
  HistoryRecord r;
  r.epoch = 7;
  r.cycle = 2;
  r.stage = Stage::Head;
  r.lr = 0.1 + 0.2;
  r.loss = 1.0 / 3.0;
  r.cls = 2.0 / 7.0;
  r.clst = 1e-300;
  r.sep = -4.5;
  r.mapping = 0.125;
  r.oc = 3.0;
  r.l1 = 6.25;
  r.accuracy = 0.75;
  const HistoryRecord back = HistoryRecord::from_json(r.json());
  CHECK(back.json() == r.json());
  CHECK(back.lr == r.lr);
  CHECK(back.loss == r.loss);
  CHECK(back.stage == Stage::Head);
  for (auto s : {Stage::Joint, Stage::Push, Stage::Head}) CHECK(parse_stage(stage_name(s)) == s);
  CHECK_THROWS_AS(parse_stage("warmup"), std::invalid_argument);

  const auto path = std::filesystem::temp_directory_path() / "maproto_history_test.jsonl";
  write_history(path.string(), {r, back});
  const auto read = read_history(path.string());
  REQUIRE(read.size() == 2);
  CHECK(read[1].json() == r.json());
  std::filesystem::remove(path);
}

TEST_CASE("joint epochs leave the head untouched and reduce the loss") {
  const Dataset data = tiny_data(16);
  MAProtoNet net(tiny_net(), 5);
  TrainConfig cfg = tiny_train(30, 30);
  cfg.warmup_epochs = 1;
  cfg.base_lr = 3e-3;
  cfg.augment = false;
  Trainer tr(net, cfg, data);
  const Tensor head = net.head_weight().value();
  const auto body_before = snapshot(net.body_parameters());
  std::vector<double> losses;
  for (int e = 0; e < 8; ++e) {
    const HistoryRecord r = tr.joint_epoch();
    CHECK(r.stage == Stage::Joint);
    CHECK(r.epoch == std::size_t(e));
    CHECK(r.lr == lr_at(cfg, e));
    CHECK(std::isfinite(r.loss));
    losses.push_back(r.loss);
    CHECK(max_abs_diff(net.head_weight().value(), head) == 0.0);
  }
  CHECK(losses.back() < losses.front());
  CHECK(!same(snapshot(net.body_parameters()), body_before));
}

TEST_CASE("push replaces every prototype by a same-class training embedding") {
  const Dataset data = tiny_data(8);
  MAProtoNet net(tiny_net(), 6);
  Trainer tr(net, tiny_train(2, 2), data);
  tr.joint_epoch();
  const auto others_before = snapshot(non_head(net, false));
  const Tensor head = net.head_weight().value();
  const Tensor old_vectors = net.bank().vectors.value();
  const Tensor before = tr.training_scores();
  const auto records = tr.push();
  const Tensor after = tr.training_scores();
  const auto& cls = net.bank().class_of;
  const std::size_t P = cls.size(), D = net.bank().dim();
  const double top = std::log(1.0 / net.config().similarity_eps);
  REQUIRE(records.size() == P);

  // Oracle: distance from the old prototype to every same-class pooled embedding.
  std::vector<double> nearest(P, 1e300);
  {
    NoGradGuard g;
    net.set_training(false);
    for (const Volume& v : data) {
      const ForwardOutput out = net.forward(as_batch(v.image));
      for (std::size_t p = 0; p < P; ++p) {
        if (cls[p] != v.label) continue;
        double d = 0.0;
        for (std::size_t k = 0; k < D; ++k) {
          const double diff = out.pooled.value()[p * D + k] - old_vectors[p * D + k];
          d += diff * diff;
        }
        nearest[p] = std::min(nearest[p], d);
      }
    }
  }
  for (std::size_t p = 0; p < P; ++p) {
    const PushRecord& r = records[p];
    CHECK(r.prototype == p);
    CHECK(data[r.sample_index].label == cls[p]);
    CHECK(data[r.sample_index].id == r.sample_id);
    CHECK(r.distance_before == doctest::Approx(nearest[p]).epsilon(1e-9));
    CHECK(r.map.shape().size() == 3);
    // Zero distance at the source sample: the score hits its ceiling.
    CHECK(after[r.sample_index * P + p] == doctest::Approx(top).epsilon(1e-12));
    double best_before = -1e300;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (data[i].label == cls[p]) best_before = std::max(best_before, before[i * P + p]);
    CHECK(after[r.sample_index * P + p] >= best_before);
  }
  CHECK(same(snapshot(non_head(net, false)), others_before));
  CHECK(max_abs_diff(net.head_weight().value(), head) == 0.0);
  CHECK(tr.state().provenance.size() == P);
}

TEST_CASE("head epochs change only the head") {
  const Dataset data = tiny_data(8);
  MAProtoNet net(tiny_net(), 7);
  TrainConfig cfg = tiny_train(2, 2);
  cfg.head_lr = 1e-2;
  Trainer tr(net, cfg, data);
  const auto others = snapshot(non_head(net));
  const Tensor head = net.head_weight().value();
  const Tensor scores = tr.training_scores();
  AdamW opt({{"head.weight", net.head_weight()}}, 0.9, 0.999, 1e-8, 0.0);
  const double l1_before = loss_l1(net.head_weight(), net.bank().class_of).value()[0];
  HistoryRecord last;
  for (int e = 0; e < 10; ++e) {
    last = tr.head_epoch(scores, opt);
    CHECK(last.stage == Stage::Head);
    CHECK(last.lr == cfg.head_lr);
  }
  CHECK(same(snapshot(non_head(net)), others));
  CHECK(max_abs_diff(net.head_weight().value(), head) > 0.0);
  CHECK(last.l1 < l1_before);
}

TEST_CASE("alternating schedule arithmetic") {
  const Dataset data = tiny_data(4);
  MAProtoNet net(tiny_net(), 8);
  TrainConfig cfg = tiny_train(20, 10);
  cfg.warmup_epochs = 2;
  cfg.head_epochs = 3;
  cfg.batch = 4;
  Trainer tr(net, cfg, data);
  std::vector<Stage> blocks;
  std::size_t seen = 0;
  tr.run([&](const HistoryRecord&) { ++seen; },
         [&](const Trainer& t) { blocks.push_back(t.state().next); });
  CHECK(tr.finished());
  // After each block the state names the next stage: push, head, joint per cycle.
  CHECK(blocks == std::vector<Stage>{Stage::Push, Stage::Head, Stage::Joint, Stage::Push, Stage::Head, Stage::Joint});
  const auto& h = tr.state().history;
  CHECK(h.size() == 20 + 2 * 3);
  CHECK(seen == h.size());
  std::size_t joint = 0, head = 0;
  for (const auto& r : h) (r.stage == Stage::Joint ? joint : head)++;
  CHECK(joint == 20);
  CHECK(head == 6);
  CHECK(h[9].stage == Stage::Joint);
  CHECK(h[10].stage == Stage::Head);
  CHECK(h[13].stage == Stage::Joint);
  CHECK(h[13].cycle == 1);
  CHECK(h[13].epoch == 10);
  CHECK(tr.state().joint_epochs_done == 20);
  CHECK(tr.state().head_epochs_done == 6);
}

TEST_CASE("training is bitwise reproducible and resumes exactly") {
  const Dataset data = tiny_data(8);
  const TrainConfig cfg = tiny_train(4, 2);
  auto full = [&](MAProtoNet& net) {
    Trainer tr(net, cfg, data);
    tr.run();
    return tr.state().history;
  };
  MAProtoNet a(tiny_net(), 9), b(tiny_net(), 9);
  const auto ha = full(a), hb = full(b);
  REQUIRE(ha.size() == hb.size());
  for (std::size_t i = 0; i < ha.size(); ++i) CHECK(ha[i].json() == hb[i].json());
  CHECK(same(snapshot(a.named_parameters()), snapshot(b.named_parameters())));

  // Interrupt after the first complete cycle, then continue from an archive.
  Archive saved;
  MAProtoNet partial(tiny_net(), 9);
  {
    Trainer tr(partial, cfg, data);
    try {
      tr.run({}, [](const Trainer& t) {
        if (t.state().cycle == 1) throw std::runtime_error("interrupt");
      });
    } catch (const std::runtime_error&) {
    }
    save_model(saved, partial);
    tr.save_state(saved);
  }
  MAProtoNet resumed(tiny_net(), 1234);
  load_model(saved, resumed);
  Trainer tr(resumed, cfg, data);
  tr.load_state(saved);
  CHECK(tr.state().cycle == 1);
  tr.run();
  const auto& hr = tr.state().history;
  REQUIRE(hr.size() == ha.size());
  for (std::size_t i = 0; i < ha.size(); ++i) CHECK(hr[i].json() == ha[i].json());
  CHECK(same(snapshot(resumed.named_parameters()), snapshot(a.named_parameters())));
}

TEST_CASE("trainer rejects an empty training set") {
  MAProtoNet net(tiny_net(), 10);
  const Dataset empty;
  CHECK_THROWS_AS(Trainer(net, tiny_train(2, 2), empty), std::invalid_argument);
}
