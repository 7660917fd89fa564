// Command-line front end: train, eval, push, visualize, synth.

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "maproto/ops.hpp"
#include "maproto/run.hpp"
#include "maproto/visualize.hpp"

namespace fs = std::filesystem;
using namespace maproto;

namespace {

void log_line(const std::string& s) { std::cerr << s << '\n'; }

std::array<std::size_t, 4> parse_shape(const std::string& text) {
  std::array<std::size_t, 4> out{};
  std::stringstream ss(text);
  std::string part;
  std::size_t i = 0;
  while (std::getline(ss, part, ',')) {
    if (i == 4) throw std::invalid_argument("--shape expects C,X,Y,Z");
    out[i++] = std::stoul(part);
  }
  if (i != 4) throw std::invalid_argument("--shape expects C,X,Y,Z");
  return out;
}

// ---- train ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  bool resume = false;
};

int cmd_train(const TrainArgs& args) {
  RunConfig cfg = args.config.empty() ? RunConfig{} : RunConfig::load(args.config);
  apply_overrides(cfg, args.overrides);
  if (!args.out.empty()) cfg.out_dir = args.out;
  cfg.validate();
  const FoldReport report = run_experiment(cfg, {args.resume, log_line});
  if (!report.folds.empty()) std::cout << format_table(report, "held-out evaluation, " + cfg.out_dir);
  std::cout << "artifacts in " << cfg.out_dir << '\n';
  return 0;
}

// ---- eval ----------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, manifest, out;
  bool no_ids = false;
};

int cmd_eval(const EvalArgs& args) {
  Checkpoint ck = read_checkpoint(args.checkpoint);
  EvalOptions opt = ck.config.eval;
  if (args.no_ids) opt.compute_ids = false;
  Dataset data;
  if (!args.manifest.empty()) {
    data = load_dataset(read_manifest(args.manifest), preprocess_options(ck.config), cache_dir_from_env());
  } else {
    const Dataset all = build_dataset(ck.config);
    const FoldPlan plan = find_fold(ck.config, all, ck.fold);
    if (plan.held_out.empty())
      throw std::invalid_argument("checkpoint was trained on every subject; pass --manifest with evaluation data");
    data = subset(all, plan.held_out);
  }
  std::size_t missing = 0;
  for (const auto& v : data) missing += v.has_mask() ? 0 : 1;
  if (missing == data.size()) {
    std::cerr << "warning: no subject has a mask; AP and IDS are omitted\n";
    opt.compute_ids = false;
  } else if (missing) {
    std::cerr << "warning: " << missing << " subject(s) without a mask are left out of AP\n";
  }
  EvalResult r = evaluate(*ck.model, data, opt);
  const std::string subjects = subject_records(r);
  const FoldReport report = aggregate({std::move(r)});
  const std::string table = format_table(report, "evaluation of " + args.checkpoint);
  const fs::path out = args.out;
  write_text_atomic(out / "subjects.jsonl", subjects);
  write_text_atomic(out / "report.jsonl", format_records(report));
  write_text_atomic(out / "report.txt", table);
  std::cout << table;
  return 0;
}

// ---- push ----------------------------------------------------------------------------

struct PushArgs {
  std::string checkpoint, out;
  bool list = false;
};

void print_provenance(const std::string& jsonl) {
  std::cout << "prototype  class  source\n";
  std::istringstream in(jsonl);
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    std::cout << std::setw(9) << j.at("prototype").get<std::size_t>() << "  " << std::setw(5)
              << j.at("class").get<int>() << "  " << j.at("sample_id").get<std::string>() << '\n';
  }
}

int cmd_push(const PushArgs& args) {
  Checkpoint ck = read_checkpoint(args.checkpoint);
  if (args.list) {
    if (!ck.archive.has("provenance/records") || ck.archive.text("provenance/records").empty()) {
      std::cout << "no push recorded\n";
    } else {
      print_provenance(ck.archive.text("provenance/records"));
    }
    return 0;
  }
  const Dataset all = build_dataset(ck.config);
  const FoldPlan plan = find_fold(ck.config, all, ck.fold);
  const Dataset train = subset(all, plan.train);
  Trainer trainer(*ck.model, fold_train_config(ck.config, plan), train);
  if (ck.archive.has("state/counters")) trainer.load_state(ck.archive);
  const auto records = trainer.push();
  save_checkpoint(args.out.empty() ? fs::path(args.checkpoint) : fs::path(args.out), ck.config, ck.fold, *ck.model,
                  &trainer);
  print_provenance(provenance_records(records, ck.model->bank()));
  return 0;
}

// ---- visualize -----------------------------------------------------------------------

struct VisualizeArgs {
  std::string checkpoint, subject, manifest, out;
  int prototype = -1;
  std::size_t slices = 5;
  double alpha = 0.5;
};

Volume find_subject(const RunConfig& cfg, const std::string& manifest, const std::string& id) {
  const std::string path = !manifest.empty() ? manifest : cfg.data.source == "manifest" ? cfg.data.manifest : "";
  if (!path.empty()) {
    for (const auto& r : read_manifest(path))
      if (r.id == id) return load_dataset({r}, preprocess_options(cfg), cache_dir_from_env()).front();
  } else {
    for (auto& v : build_dataset(cfg))
      if (v.id == id) return v;
  }
  throw std::invalid_argument("subject '" + id + "' not found");
}

int cmd_visualize(const VisualizeArgs& args) {
  Checkpoint ck = read_checkpoint(args.checkpoint);
  MAProtoNet& model = *ck.model;
  const std::size_t P = model.bank().size();
  if (args.prototype >= static_cast<int>(P))
    throw std::invalid_argument("--prototype must be below " + std::to_string(P));
  if (!(args.alpha >= 0.0 && args.alpha <= 1.0)) throw std::invalid_argument("--alpha must lie in [0, 1]");
  const Volume v = find_subject(ck.config, args.manifest, args.subject);

  model.set_training(false);
  NoGradGuard guard;
  const ForwardOutput out = model.forward(as_batch(v.image));
  const auto extent = spatial_extent(v.image);
  const Var maps = args.prototype >= 0 ? ops::slice_channels(out.maps, static_cast<std::size_t>(args.prototype), 1)
                                       : out.maps;
  const Tensor map = subject_attribution(maps, 0, extent);

  const auto& shape = v.image.shape();
  Tensor t1ce({extent[0], extent[1], extent[2]});
  const std::size_t channel = shape[0] > kT1ceChannel ? kT1ceChannel : 0;
  std::copy_n(v.image.raw() + channel * t1ce.numel(), t1ce.numel(), t1ce.raw());

  const fs::path dir = args.out;
  fs::create_directories(dir);
  const std::string stem = args.prototype >= 0 ? v.id + "_p" + std::to_string(args.prototype) : v.id;
  OverlayStyle style;
  style.alpha = args.alpha;
  std::vector<std::string> written;
  for (auto z : top_slices(v.has_mask() ? v.mask : map, args.slices)) {
    const fs::path p = dir / (stem + "_z" + std::to_string(z) + ".ppm");
    write_ppm(p, render_overlay(t1ce, map, v.mask, z, style));
    written.push_back(p.string());
  }

  std::map<std::size_t, std::string> source;
  if (ck.archive.has("provenance/records")) {
    std::istringstream in(ck.archive.text("provenance/records"));
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      source[j.at("prototype").get<std::size_t>()] = j.at("sample_id").get<std::string>();
    }
  }
  const Tensor& logits = out.logits.value();
  const Tensor& scores = out.scores.value();
  std::ostringstream os;
  os << "subject " << v.id << " label " << v.label << " logits";
  for (std::size_t k = 0; k < logits.dim(1); ++k) os << ' ' << logits[k];
  os << "\nprototype  class  score      source\n";
  for (std::size_t p = 0; p < P; ++p) {
    if (args.prototype >= 0 && p != static_cast<std::size_t>(args.prototype)) continue;
    os << std::setw(9) << p << "  " << std::setw(5) << model.bank().class_of[p] << "  " << std::setw(9)
       << std::setprecision(5) << scores[p] << "  " << (source.count(p) ? source[p] : "-") << '\n';
  }
  for (const auto& w : written) os << "wrote " << w << '\n';
  write_text_atomic(dir / (stem + "_summary.txt"), os.str());
  std::cout << os.str();
  return 0;
}

// ---- synth ---------------------------------------------------------------------------

struct SynthArgs {
  std::size_t n = 64;
  std::string shape = "4,32,32,24";
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_synth(const SynthArgs& args) {
  const auto shape = parse_shape(args.shape);
  const auto records = write_dataset(synth_generate(args.n, shape, args.seed), args.out);
  std::cout << "wrote " << records.size() << " subjects and " << (fs::path(args.out) / "manifest.csv").string()
            << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prototype-based 3D volume classifier with attribution maps"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train (and cross-validate) from a config");
  t->add_option("-c,--config", train.config, "key = value config file");
  t->add_option("-s,--set", train.overrides, "override, key=value (repeatable)");
  t->add_option("-o,--out", train.out, "output directory (same as --set out.dir=...)");
  t->add_flag("--resume", train.resume, "continue folds from their last checkpoint");
  bool list_keys = false;
  t->add_flag("--list-keys", list_keys, "print every config key with its default and exit");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
  e->add_option("checkpoint", eval.checkpoint, "checkpoint file")->required();
  e->add_option("-m,--manifest", eval.manifest, "evaluate these subjects instead of the held-out fold");
  e->add_option("-o,--out", eval.out, "report directory")->required();
  e->add_flag("--no-ids", eval.no_ids, "skip the deletion score");

  PushArgs push;
  auto* p = app.add_subcommand("push", "project prototypes onto training samples, or list their sources");
  p->add_option("checkpoint", push.checkpoint, "checkpoint file")->required();
  p->add_option("-o,--out", push.out, "write the pushed checkpoint here instead of in place");
  p->add_flag("--list", push.list, "only print the recorded provenance");

  VisualizeArgs vis;
  auto* v = app.add_subcommand("visualize", "export attribution overlays of one subject");
  v->add_option("checkpoint", vis.checkpoint, "checkpoint file")->required();
  v->add_option("--subject", vis.subject, "subject id")->required();
  v->add_option("-m,--manifest", vis.manifest, "manifest holding the subject");
  v->add_option("-o,--out", vis.out, "image directory")->required();
  v->add_option("--prototype", vis.prototype, "show a single prototype's map");
  v->add_option("--slices", vis.slices, "number of axial slices")->check(CLI::PositiveNumber);
  v->add_option("--alpha", vis.alpha, "map opacity at full activation");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "write a synthetic dataset with a manifest");
  s->add_option("-n,--count", synth.n, "number of subjects");
  s->add_option("--shape", synth.shape, "C,X,Y,Z");
  s->add_option("--seed", synth.seed, "generator seed");
  s->add_option("-o,--out", synth.out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (t->parsed()) {
      if (list_keys) {
        const RunConfig defaults;
        for (const auto& k : RunConfig::keys())
          std::cout << k << " = " << defaults.get(k) << "    # " << RunConfig::describe(k) << '\n';
        return 0;
      }
      return cmd_train(train);
    }
    if (e->parsed()) return cmd_eval(eval);
    if (p->parsed()) return cmd_push(push);
    if (v->parsed()) return cmd_visualize(vis);
    if (s->parsed()) return cmd_synth(synth);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 1;
  }
  return 1;
}
