#include "maproto/run.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace maproto {

namespace fs = std::filesystem;

Dataset build_dataset(const RunConfig& cfg) {
  if (cfg.data.source == "synthetic") {
    const auto& s = cfg.model.input_shape;
    return synth_generate(cfg.data.synth_count, {cfg.model.in_channels, s[0], s[1], s[2]}, cfg.data.synth_seed);
  }
  if (cfg.data.manifest.empty()) throw std::invalid_argument("data.manifest is required when data.source = manifest");
  if (cfg.model.in_channels != kModalities.size())
    throw std::invalid_argument("model.in_channels must be 4 for manifest data");
  return load_dataset(read_manifest(cfg.data.manifest), preprocess_options(cfg), cache_dir_from_env());
}

Dataset subset(const Dataset& data, const std::vector<std::size_t>& indices) {
  Dataset out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(data.at(i));
  return out;
}

std::vector<FoldPlan> plan_folds(const RunConfig& cfg, const Dataset& data) {
  if (data.empty()) throw std::invalid_argument("dataset is empty");
  if (cfg.data.fold == "none") {
    FoldPlan all{"full", std::nullopt, {}, {}};
    for (std::size_t i = 0; i < data.size(); ++i) all.train.push_back(i);
    return {all};
  }
  std::vector<int> labels;
  for (const auto& v : data) labels.push_back(v.label);
  const auto assign = make_folds(labels, cfg.data.folds, cfg.data.fold_seed);
  std::vector<FoldPlan> plans;
  for (std::size_t k = 0; k < cfg.data.folds; ++k) {
    FoldPlan p{"fold" + std::to_string(k), k, {}, {}};
    for (std::size_t i = 0; i < data.size(); ++i)
      (assign[i] == static_cast<int>(k) ? p.held_out : p.train).push_back(i);
    plans.push_back(std::move(p));
  }
  if (cfg.data.fold == "all") return plans;
  return {plans.at(std::stoul(cfg.data.fold))};
}

FoldPlan find_fold(const RunConfig& cfg, const Dataset& data, const std::string& fold) {
  RunConfig all = cfg;
  if (fold != "full" && all.data.fold != "none") all.data.fold = "all";
  for (auto& p : plan_folds(all, data))
    if (p.name == fold) return p;
  throw std::invalid_argument("no fold named '" + fold + "' in this run");
}

std::uint64_t model_seed(const RunConfig& cfg, const FoldPlan& fold) {
  return derive_seed(cfg.train.seed, 0x6d6f64656cULL, fold.index ? *fold.index + 1 : 0);
}

TrainConfig fold_train_config(const RunConfig& cfg, const FoldPlan& fold) {
  TrainConfig t = cfg.train;
  t.seed = derive_seed(cfg.train.seed, 0x747261696eULL, fold.index ? *fold.index + 1 : 0);
  return t;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out << text;
    if (!out) throw std::runtime_error("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

void save_checkpoint(const fs::path& path, const RunConfig& cfg, const std::string& fold, MAProtoNet& model,
                     const Trainer* trainer) {
  Archive a;
  a.put_text("config", cfg.snapshot());
  a.put_text("run/fold", fold);
  save_model(a, model);
  if (trainer) trainer->save_state(a);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  a.save(path);
}

Checkpoint read_checkpoint(const fs::path& path) {
  Checkpoint c;
  c.archive = Archive::load(path);
  if (!c.archive.has("config")) throw std::invalid_argument("'" + path.string() + "' has no config snapshot");
  c.config = RunConfig::parse(c.archive.text("config"), path.string() + ":config");
  c.fold = c.archive.has("run/fold") ? c.archive.text("run/fold") : "full";
  c.model = std::make_unique<MAProtoNet>(c.config.model, 0);
  load_model(c.archive, *c.model);
  return c;
}

std::string provenance_records(const std::vector<PushRecord>& records, const PrototypeBank& bank) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j{{"prototype", r.prototype},
                             {"class", bank.class_of.at(r.prototype)},
                             {"sample_index", r.sample_index},
                             {"sample_id", r.sample_id},
                             {"distance_before", r.distance_before}};
    out += j.dump() + '\n';
  }
  return out;
}

std::string subject_records(const EvalResult& r) {
  using nlohmann::ordered_json;
  auto opt = [](const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); };
  std::string out;
  for (const auto& s : r.subjects) {
    ordered_json j{{"id", s.id},          {"label", s.label},   {"prediction", s.prediction},
                   {"probability", s.probability}, {"ap", opt(s.ap)}, {"ids", opt(s.ids)}};
    out += j.dump() + '\n';
  }
  return out;
}

namespace {

std::string history_text(const std::vector<HistoryRecord>& h) {
  std::string out;
  for (const auto& r : h) out += r.json() + '\n';
  return out;
}

// First key whose value differs, ignoring output location and evaluation settings.
std::optional<std::string> training_mismatch(const RunConfig& a, const RunConfig& b) {
  for (const auto& k : RunConfig::keys()) {
    if (k == "out.dir" || k.rfind("eval.", 0) == 0) continue;
    if (a.get(k) != b.get(k)) return k;
  }
  return std::nullopt;
}

}  // namespace

FoldReport run_experiment(const RunConfig& cfg, const RunOptions& opt) {
  cfg.validate();
  auto log = [&](const std::string& s) {
    if (opt.log) opt.log(s);
  };
  const Dataset data = build_dataset(cfg);
  const auto plans = plan_folds(cfg, data);
  const fs::path root = cfg.out_dir;
  fs::create_directories(root);
  write_text_atomic(root / "config.cfg", cfg.snapshot());

  std::vector<EvalResult> results;
  for (const auto& plan : plans) {
    const fs::path dir = root / plan.name;
    const fs::path ckpt = dir / "checkpoint.mapckpt";
    const Dataset train = subset(data, plan.train);
    MAProtoNet model(cfg.model, model_seed(cfg, plan));
    Trainer trainer(model, fold_train_config(cfg, plan), train);

    if (opt.resume && fs::exists(ckpt)) {
      const Archive a = Archive::load(ckpt);
      const RunConfig saved = RunConfig::parse(a.text("config"), ckpt.string() + ":config");
      if (auto key = training_mismatch(saved, cfg))
        throw std::invalid_argument("cannot resume " + ckpt.string() + ": " + *key + " differs");
      load_model(a, model);
      if (a.has("state/counters")) trainer.load_state(a);
      log(plan.name + ": resuming at cycle " + std::to_string(trainer.state().cycle) + " (" +
          std::string(stage_name(trainer.state().next)) + ")");
    }

    fs::create_directories(dir);
    auto on_record = [&](const HistoryRecord& r) {
      std::ostringstream os;
      os << plan.name << " " << stage_name(r.stage) << " epoch " << r.epoch << " loss " << r.loss << " acc "
         << r.accuracy;
      log(os.str());
    };
    auto on_block = [&](const Trainer& t) {
      save_checkpoint(ckpt, cfg, plan.name, model, &t);
      write_text_atomic(dir / "history.jsonl", history_text(t.state().history));
      write_text_atomic(dir / "provenance.jsonl", provenance_records(t.state().provenance, model.bank()));
    };
    if (!trainer.finished()) {
      trainer.run(on_record, on_block);
    } else if (!fs::exists(ckpt)) {
      on_block(trainer);
    }

    if (plan.held_out.empty()) continue;
    const Dataset held = subset(data, plan.held_out);
    EvalResult r = evaluate(model, held, cfg.eval);
    write_text_atomic(dir / "subjects.jsonl", subject_records(r));
    std::ostringstream os;
    os << plan.name << " held-out BAC " << r.bac;
    if (r.ap) os << " AP " << *r.ap;
    if (r.ids) os << " IDS " << *r.ids;
    log(os.str());
    results.push_back(std::move(r));
  }

  FoldReport report = aggregate(std::move(results));
  if (!report.folds.empty()) {
    write_text_atomic(root / "report.jsonl", format_records(report));
    write_text_atomic(root / "report.txt", format_table(report, "held-out evaluation, " + cfg.out_dir));
  }
  return report;
}

}  // namespace maproto
