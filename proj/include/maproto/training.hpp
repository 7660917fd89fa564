#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "maproto/checkpoint.hpp"
#include "maproto/data.hpp"
#include "maproto/losses.hpp"

namespace maproto {

struct TrainConfig {
  std::size_t epochs = 100;  // joint epochs; head epochs come on top
  std::size_t batch = 32;
  double base_lr = 1e-3;
  double weight_decay = 0.01;
  std::size_t warmup_epochs = 20;
  std::size_t stage_period = 10;
  std::size_t head_epochs = 10;
  double head_lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  std::uint64_t seed = 0;

  LossWeights weights;
  bool use_mmap = true;
  double affine_max_angle_deg = 10.0;
  double affine_min_scale = 0.9, affine_max_scale = 1.1;
  bool augment = true;
  AugmentOptions augmentation;

  std::size_t cycles() const { return epochs / stage_period; }
  AffineRange affine_range() const;
  void validate() const;
};

/// Warm-up then cosine learning rate for joint epoch `epoch` (0-based):
/// base*(e+1)/warmup during warm-up, base*(1+cos(pi*(e-warmup)/(epochs-warmup)))/2 after.
double lr_at(const TrainConfig& cfg, std::size_t epoch);

/// Adam with decoupled weight decay over a fixed list of named parameters.
class AdamW {
 public:
  AdamW(std::vector<NamedParam> params, double beta1, double beta2, double eps, double weight_decay);

  /// One update from the parameters' current gradients.
  void step(double lr);
  void zero_grad();
  /// Scales all gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
  double clip_grad_norm(double max_norm);

  std::size_t steps() const { return t_; }
  const std::vector<NamedParam>& params() const { return params_; }

  void save(Archive& a, const std::string& prefix) const;
  void load(const Archive& a, const std::string& prefix);

 private:
  std::vector<NamedParam> params_;
  std::vector<Tensor> m_, v_;
  double beta1_, beta2_, eps_, wd_;
  std::size_t t_ = 0;
};

enum class Stage { Joint, Push, Head };
std::string_view stage_name(Stage s);
Stage parse_stage(std::string_view name);

struct HistoryRecord {
  std::size_t epoch = 0;  // joint epoch index, or head epoch index within the run
  std::size_t cycle = 0;
  Stage stage = Stage::Joint;
  double lr = 0.0;
  double loss = 0.0;
  double cls = 0.0, clst = 0.0, sep = 0.0, mapping = 0.0, oc = 0.0, l1 = 0.0;
  double accuracy = 0.0;  // training-batch accuracy

  std::string json() const;
  static HistoryRecord from_json(const std::string& line);
};

/// Source of one pushed prototype.
struct PushRecord {
  std::size_t prototype = 0;
  std::size_t sample_index = 0;
  std::string sample_id;
  double distance_before = 0.0;  // to the vector being replaced
  Tensor map;                    // soft-masked map of the prototype on the source sample, feature grid
};

struct TrainState {
  std::size_t cycle = 0;
  Stage next = Stage::Joint;
  std::size_t joint_epochs_done = 0;
  std::size_t head_epochs_done = 0;
  Rng rng;
  std::vector<HistoryRecord> history;
  std::vector<PushRecord> provenance;
};

/// Drives the alternating joint / push / head schedule for one model and training set.
class Trainer {
 public:
  Trainer(MAProtoNet& model, TrainConfig cfg, const Dataset& train);

  /// One joint epoch over the training set; the head is not updated.
  HistoryRecord joint_epoch();
  /// Replaces every prototype by its nearest candidate among clean training samples of its class.
  std::vector<PushRecord> push();
  /// Similarity scores (N, P) of the clean training set in evaluation mode.
  Tensor training_scores();
  /// One head-only epoch on precomputed scores, at constant learning rate.
  HistoryRecord head_epoch(const Tensor& scores, AdamW& opt);

  using BlockCallback = std::function<void(const Trainer&)>;
  /// Runs the remaining schedule from the current state. `on_record` sees each
  /// history record as it is produced; `on_block` runs after each completed stage block.
  void run(const std::function<void(const HistoryRecord&)>& on_record = {}, const BlockCallback& on_block = {});

  bool finished() const { return state_.cycle >= cfg_.cycles(); }

  const TrainState& state() const { return state_; }
  const TrainConfig& config() const { return cfg_; }
  MAProtoNet& model() const { return model_; }

  /// Training state, optimiser moments and provenance under "state/", "optim/" and "provenance/".
  void save_state(Archive& a) const;
  void load_state(const Archive& a);

 private:
  std::vector<int> labels(const std::vector<std::size_t>& idx) const;

  MAProtoNet& model_;
  TrainConfig cfg_;
  const Dataset& train_;
  AdamW joint_opt_;
  TrainState state_;
};

/// Writes history records one JSON object per line.
void write_history(const std::string& path, const std::vector<HistoryRecord>& history);
std::vector<HistoryRecord> read_history(const std::string& path);

}  // namespace maproto
