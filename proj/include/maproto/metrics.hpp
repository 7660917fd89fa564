#pragma once

#include <optional>
#include <string>
#include <vector>

#include "maproto/data.hpp"
#include "maproto/network.hpp"

namespace maproto {

/// Balanced accuracy (TPR + TNR) / 2 for labels in {0, 1}. Throws if either class is absent.
double bac(const std::vector<int>& predictions, const std::vector<int>& labels);

/// Mean of the P maps of sample `n`, trilinearly resized to `extent`.
Tensor subject_attribution(const Var& maps, std::size_t n, const std::array<std::size_t, 3>& extent);

/// |mask & (map > threshold)| / |map > threshold|; an empty activation set gives 0.
double activation_precision(const Tensor& map, const Tensor& mask, double threshold = 0.5);

/// Voxel indices ordered by activation, descending (ascending if requested); ties by index.
std::vector<std::size_t> deletion_order(const Tensor& map, bool ascending = false);

/// Normalised trapezoid area of a probability curve sampled at equal deletion
/// steps: values are divided by the first, clamped to [0, 1], and the area is
/// divided by the number of intervals. A flat curve scores exactly 1.
double ids_from_curve(const std::vector<double>& probabilities);

/// True-class probability after deleting 0, 1/steps, ..., all voxels (all channels set to 0).
std::vector<double> deletion_curve(MAProtoNet& model, const Volume& v, const Tensor& map, std::size_t steps = 20,
                                   bool ascending = false);

struct EvalOptions {
  double threshold = 0.5;
  std::size_t ids_steps = 20;
  bool compute_ids = true;
  std::size_t batch = 8;
};

struct SubjectResult {
  std::string id;
  int label = 0;
  int prediction = 0;
  double probability = 0.0;  // of the true class
  std::optional<double> ap;
  std::optional<double> ids;
};

struct EvalResult {
  double bac = 0.0;
  std::optional<double> ap;   // mean over subjects with masks
  std::optional<double> ids;  // mean over subjects
  std::vector<SubjectResult> subjects;
};

/// Runs the model in evaluation mode and computes BAC, AP and IDS.
/// Subjects without masks are left out of AP; AP is absent if none has one.
EvalResult evaluate(MAProtoNet& model, const Dataset& data, const EvalOptions& opt = {});

/// Attribution maps (X, Y, Z) of every subject, in evaluation mode.
std::vector<Tensor> attribution_maps(MAProtoNet& model, const Dataset& data, std::size_t batch = 8);

/// Metrics from precomputed attribution maps; `maps[i]` belongs to `data[i]`.
EvalResult evaluate_with_maps(MAProtoNet& model, const Dataset& data, const std::vector<Tensor>& maps,
                              const EvalOptions& opt = {});

struct MetricSummary {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation, 0 for a single fold
  std::size_t count = 0;
};

struct FoldReport {
  std::vector<EvalResult> folds;
  std::optional<MetricSummary> bac, ap, ids;
};

FoldReport aggregate(std::vector<EvalResult> folds);
/// Plain-text table: one row per fold and a mean +- sd row, in percent.
std::string format_table(const FoldReport& report, const std::string& title);
/// Structured report: one JSON object per fold plus an aggregate record, one per line.
std::string format_records(const FoldReport& report);

/// Stacks volumes [begin, end) of `data` into an (N, C, X, Y, Z) batch.
Tensor stack_images(const Dataset& data, const std::vector<std::size_t>& indices);

}  // namespace maproto
