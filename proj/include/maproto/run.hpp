#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "maproto/config.hpp"

namespace maproto {

/// Subjects of a run: generated from the synthetic seed, or loaded through the manifest.
Dataset build_dataset(const RunConfig& cfg);

/// One training / held-out split of a run.
struct FoldPlan {
  std::string name;                  // "fold<k>", or "full" when nothing is held out
  std::optional<std::size_t> index;  // fold number, absent for "full"
  std::vector<std::size_t> train, held_out;
};

std::vector<FoldPlan> plan_folds(const RunConfig& cfg, const Dataset& data);
Dataset subset(const Dataset& data, const std::vector<std::size_t>& indices);

/// Seeds of one fold: model initialisation and training stream.
std::uint64_t model_seed(const RunConfig& cfg, const FoldPlan& fold);
TrainConfig fold_train_config(const RunConfig& cfg, const FoldPlan& fold);

/// A checkpoint holds the config snapshot ("config"), the fold name ("run/fold"),
/// the model and, when written during training, the trainer state.
void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, const std::string& fold,
                     MAProtoNet& model, const Trainer* trainer);

struct Checkpoint {
  RunConfig config;
  std::string fold;
  Archive archive;
  std::unique_ptr<MAProtoNet> model;  // rebuilt from the config and loaded
};
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Fold plan named `fold`, recomputed from the checkpoint's own config.
FoldPlan find_fold(const RunConfig& cfg, const Dataset& data, const std::string& fold);

/// Provenance of the last push as JSON lines.
std::string provenance_records(const std::vector<PushRecord>& records, const PrototypeBank& bank);
/// Per-subject results as JSON lines.
std::string subject_records(const EvalResult& r);

struct RunOptions {
  bool resume = false;
  std::function<void(const std::string&)> log;
};

/// Trains and evaluates every planned fold under `cfg.out_dir`:
///   config.cfg, <fold>/checkpoint.mapckpt, <fold>/history.jsonl,
///   <fold>/provenance.jsonl, <fold>/subjects.jsonl, report.jsonl, report.txt.
/// With `resume`, folds continue from their last saved stage block.
FoldReport run_experiment(const RunConfig& cfg, const RunOptions& opt = {});

/// Writes `text` to `path` through a temporary file and a rename.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace maproto
