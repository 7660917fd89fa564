#include <set>

#include "doctest.h"
#include "maproto/config.hpp"
#include "support.hpp"

using namespace maproto;
using namespace testing_support;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::invalid_argument& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("schema keys are unique and documented") {
  const auto keys = RunConfig::keys();
  CHECK(keys.size() > 50);
  CHECK(std::set<std::string>(keys.begin(), keys.end()).size() == keys.size());
  for (const auto& k : keys) {
    CHECK(!RunConfig::describe(k).empty());
    CHECK(k.find('.') != std::string::npos);
  }
  RunConfig c;
  CHECK(c.get("model.fusion_variant") == "c");
  CHECK(c.get("model.input_shape") == "128,128,96");
  CHECK(c.get("train.epochs") == "100");
  CHECK(c.get("model.use_quadruplet") == "true");
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("snapshot round trip") {
  RunConfig c;
  const RunConfig back = RunConfig::parse(c.snapshot());
  CHECK(back.snapshot() == c.snapshot());

  // Random reals survive exactly: shortest round-trip formatting.
  std::mt19937_64 gen(1);
  const char* reals[] = {"loss.clst", "loss.sep", "loss.mmap", "train.base_lr", "model.similarity_eps",
                         "augment.gamma_max", "eval.threshold"};
  for (int trial = 0; trial < 20; ++trial) {
    RunConfig r;
    std::vector<double> vals;
    for (const char* k : reals) {
      vals.push_back(uniform(gen, 0.0, 1.0));
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", vals.back());
      r.set(k, buf);
    }
    r.set("model.fusion_variant", std::string(1, "abcd"[trial % 4]));
    r.set("model.use_multiscale", trial % 2 ? "false" : "true");
    r.set("train.seed", std::to_string(gen()));
    r.set("data.fold", std::to_string(trial % 5));
    const RunConfig p = RunConfig::parse(r.snapshot());
    CHECK(p.snapshot() == r.snapshot());
    CHECK(p.train.weights.clst == vals[0]);
    CHECK(p.eval.threshold == vals[6]);
    CHECK(p.model.fusion == r.model.fusion);
    CHECK(p.train.seed == r.train.seed);
  }
}

TEST_CASE("parsing comments, whitespace and overrides") {
  const RunConfig c = RunConfig::parse(
      "# leading comment\n"
      "\n"
      "  model.n_scale   =  3   # trailing comment\n"
      "model.input_shape = 64, 64 ,48\n"
      "train.augment = off\n"
      "data.fold = none\n");
  CHECK(c.model.n_scale == 3);
  CHECK(c.model.input_shape == std::array<std::size_t, 3>{64, 64, 48});
  CHECK(!c.train.augment);
  CHECK(c.data.fold == "none");

  RunConfig o;
  apply_overrides(o, {"train.epochs=20", "model.use_quadruplet=false", "model.use_quadruplet=true"});
  CHECK(o.train.epochs == 20);
  CHECK(o.model.use_quadruplet);
  CHECK_THROWS_AS(apply_overrides(o, {"train.epochs"}), std::invalid_argument);
}

TEST_CASE("errors name the key and the line") {
  const std::string unknown = error_of([] { RunConfig::parse("model.n_scale = 2\n\nmodel.bogus = 1\n", "run.cfg"); });
  CHECK(unknown.find("run.cfg:3") != std::string::npos);
  CHECK(unknown.find("model.bogus") != std::string::npos);

  const std::string bad = error_of([] { RunConfig::parse("train.epochs = ten\n", "x.cfg"); });
  CHECK(bad.find("x.cfg:1") != std::string::npos);
  CHECK(bad.find("train.epochs") != std::string::npos);

  CHECK(error_of([] { RunConfig::parse("just text\n"); }).find(":1:") != std::string::npos);

  RunConfig c;
  for (auto [k, v] : std::vector<std::pair<std::string, std::string>>{{"model.use_quadruplet", "maybe"},
                                                                       {"model.input_shape", "1,2"},
                                                                       {"model.input_shape", "1,2,3,4"},
                                                                       {"model.n_scale", "-1"},
                                                                       {"model.fusion_variant", "e"},
                                                                       {"model.similarity", "dot"},
                                                                       {"train.base_lr", "1e-3x"}}) {
    CAPTURE(k);
    CHECK(error_of([&] { c.set(k, v); }).find(k) != std::string::npos);
  }
  CHECK_THROWS_AS(c.get("nope"), std::invalid_argument);
  CHECK_THROWS_AS(RunConfig::load("/nonexistent/run.cfg"), std::runtime_error);
}

TEST_CASE("cross-field validation") {
  auto rejects = [](const std::string& key, const std::string& value) {
    RunConfig c;
    c.set(key, value);
    CAPTURE(key);
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  };
  rejects("data.fold", "5");
  rejects("data.fold", "first");
  rejects("data.source", "web");
  rejects("data.folds", "1");
  rejects("eval.threshold", "1.5");
  rejects("eval.ids_steps", "0");
  rejects("out.dir", "");
  rejects("train.stage_period", "30");
  rejects("model.n_scale", "9");
  rejects("model.input_shape", "30,30,30");
}

TEST_CASE("shipped configurations load and validate") {
  const std::string dir = std::string(MAPROTO_SOURCE_DIR) + "/configs/";
  const RunConfig d = RunConfig::load(dir + "default.cfg");
  CHECK_NOTHROW(d.validate());
  CHECK(d.model.input_shape == std::array<std::size_t, 3>{128, 128, 96});
  CHECK(d.train.epochs == 100);
  const RunConfig s = RunConfig::load(dir + "synth.cfg");
  CHECK_NOTHROW(s.validate());
  CHECK(s.data.source == "synthetic");
  const PreprocessOptions p = preprocess_options(s);
  CHECK(p.target == s.model.input_shape);
  CHECK(p.crop == s.data.crop);
}
