#include "maproto/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "maproto/metrics.hpp"

namespace maproto {

using nlohmann::json;

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (epochs == 0) fail("epochs must be positive");
  if (batch == 0) fail("batch must be positive");
  if (stage_period == 0 || epochs % stage_period != 0) fail("stage_period must divide epochs");
  if (warmup_epochs >= epochs) fail("warmup_epochs must be smaller than epochs");
  if (!(base_lr > 0.0) || !(head_lr >= 0.0)) fail("learning rates must be positive");
  if (weight_decay < 0.0 || grad_clip < 0.0) fail("weight_decay and grad_clip must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0)) fail("bad Adam constants");
  if (affine_max_angle_deg < 0.0 || !(affine_min_scale > 0.0) || affine_min_scale > affine_max_scale)
    fail("bad affine range");
  weights.validate();
  augmentation.validate();
}

AffineRange TrainConfig::affine_range() const {
  return {affine_max_angle_deg * std::numbers::pi / 180.0, affine_min_scale, affine_max_scale};
}

double lr_at(const TrainConfig& cfg, std::size_t epoch) {
  if (epoch >= cfg.epochs) {
    throw std::out_of_range("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) +
                            ")");
  }
  const double w = static_cast<double>(cfg.warmup_epochs);
  const double e = static_cast<double>(epoch);
  if (epoch < cfg.warmup_epochs) return cfg.base_lr * (e + 1.0) / w;
  const double span = static_cast<double>(cfg.epochs) - w;
  return cfg.base_lr * (1.0 + std::cos(std::numbers::pi * (e - w) / span)) / 2.0;
}

// ---- optimiser ------------------------------------------------------------------

AdamW::AdamW(std::vector<NamedParam> params, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  for (const auto& p : params_) {
    m_.emplace_back(p.var.shape());
    v_.emplace_back(p.var.shape());
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var& var = params_[i].var;
    Tensor& w = var.mutable_value();
    const bool has = var.has_grad();
    const Tensor& g = var.grad();
    double* m = m_[i].raw();
    double* v = v_[i].raw();
    for (std::size_t k = 0; k < w.numel(); ++k) {
      const double gk = has ? g[k] : 0.0;
      w[k] *= 1.0 - lr * wd_;
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * gk;
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * gk * gk;
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

double AdamW::clip_grad_norm(double max_norm) {
  double ss = 0.0;
  for (const auto& p : params_)
    if (p.var.has_grad())
      for (double g : p.var.grad().storage()) ss += g * g;
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (auto& p : params_)
      if (p.var.has_grad()) p.var.node()->grad *= s;
  }
  return norm;
}

void AdamW::save(Archive& a, const std::string& prefix) const {
  a.put(prefix + "/t", encode_ints({static_cast<long long>(t_)}));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    a.put(prefix + "/m/" + params_[i].name, m_[i]);
    a.put(prefix + "/v/" + params_[i].name, v_[i]);
  }
}

void AdamW::load(const Archive& a, const std::string& prefix) {
  t_ = static_cast<std::size_t>(decode_ints(a.tensor(prefix + "/t")).at(0));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor& m = a.tensor(prefix + "/m/" + params_[i].name);
    const Tensor& v = a.tensor(prefix + "/v/" + params_[i].name);
    if (m.shape() != m_[i].shape() || v.shape() != v_[i].shape())
      throw std::invalid_argument("optimiser state shape mismatch for " + params_[i].name);
    m_[i] = m;
    v_[i] = v;
  }
}

// ---- history ----------------------------------------------------------------------

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::Joint: return "joint";
    case Stage::Push: return "push";
    case Stage::Head: return "head";
  }
  return "?";
}

Stage parse_stage(std::string_view name) {
  if (name == "joint") return Stage::Joint;
  if (name == "push") return Stage::Push;
  if (name == "head") return Stage::Head;
  throw std::invalid_argument("unknown stage '" + std::string(name) + "'");
}

std::string HistoryRecord::json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["cycle"] = cycle;
  j["stage"] = std::string(stage_name(stage));
  j["lr"] = lr;
  j["loss"] = loss;
  j["cls"] = cls;
  j["clst"] = clst;
  j["sep"] = sep;
  j["map"] = mapping;
  j["oc"] = oc;
  j["l1"] = l1;
  j["accuracy"] = accuracy;
  return j.dump();
}

HistoryRecord HistoryRecord::from_json(const std::string& line) {
  const auto j = json::parse(line);
  HistoryRecord r;
  r.epoch = j.at("epoch").get<std::size_t>();
  r.cycle = j.at("cycle").get<std::size_t>();
  r.stage = parse_stage(j.at("stage").get<std::string>());
  r.lr = j.at("lr").get<double>();
  r.loss = j.at("loss").get<double>();
  r.cls = j.at("cls").get<double>();
  r.clst = j.at("clst").get<double>();
  r.sep = j.at("sep").get<double>();
  r.mapping = j.at("map").get<double>();
  r.oc = j.at("oc").get<double>();
  r.l1 = j.at("l1").get<double>();
  r.accuracy = j.at("accuracy").get<double>();
  return r;
}

void write_history(const std::string& path, const std::vector<HistoryRecord>& history) {
  std::ofstream o(path, std::ios::trunc);
  if (!o) throw std::runtime_error("cannot write history '" + path + "'");
  for (const auto& r : history) o << r.json() << '\n';
}

std::vector<HistoryRecord> read_history(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read history '" + path + "'");
  std::vector<HistoryRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(HistoryRecord::from_json(line));
  return out;
}

// ---- trainer -----------------------------------------------------------------------

Trainer::Trainer(MAProtoNet& model, TrainConfig cfg, const Dataset& train)
    : model_(model),
      cfg_(std::move(cfg)),
      train_(train),
      joint_opt_(model.body_parameters(), cfg_.beta1, cfg_.beta2, cfg_.adam_eps, cfg_.weight_decay) {
  cfg_.validate();
  if (train_.empty()) throw std::invalid_argument("trainer: empty training set");
  state_.rng.seed(derive_seed(cfg_.seed, 0x7472));
}

std::vector<int> Trainer::labels(const std::vector<std::size_t>& idx) const {
  std::vector<int> out;
  for (std::size_t i : idx) out.push_back(train_[i].label);
  return out;
}

namespace {

std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, std::size_t batch, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch)));
  return out;
}

std::size_t correct(const Tensor& logits, const std::vector<int>& labels) {
  const std::size_t k = logits.dim(1);
  std::size_t hit = 0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const double* row = logits.raw() + n * k;
    hit += static_cast<int>(std::max_element(row, row + k) - row) == labels[n];
  }
  return hit;
}

}  // namespace

HistoryRecord Trainer::joint_epoch() {
  const std::size_t epoch = state_.joint_epochs_done;
  HistoryRecord rec;
  rec.epoch = epoch;
  rec.cycle = state_.cycle;
  rec.stage = Stage::Joint;
  rec.lr = lr_at(cfg_, epoch);
  model_.set_training(true);
  const bool with_mapping = cfg_.weights.mmap > 0.0;
  const AffineRange range = cfg_.affine_range();
  std::size_t seen = 0, hits = 0;
  for (const auto& idx : shuffled_batches(train_.size(), cfg_.batch, state_.rng)) {
    Dataset batch;
    for (std::size_t i : idx) {
      Volume v = train_[i];
      if (cfg_.augment) {
        Rng aug(derive_seed(cfg_.seed, epoch + 1, i));
        augment(v, aug, cfg_.augmentation);
      }
      batch.push_back(std::move(v));
    }
    std::vector<std::size_t> local(idx.size());
    std::iota(local.begin(), local.end(), 0);
    const auto y = labels(idx);
    std::vector<AffineSpec> specs;
    for (std::size_t j = 0; j < idx.size(); ++j) specs.push_back(sample_affine(state_.rng, range));

    const ForwardOutput out = model_.forward(stack_images(batch, local));
    const LossTerms t = compute_losses(model_, out, y, specs, cfg_.use_mmap, with_mapping);
    const Var loss = total_loss(t, cfg_.weights);
    if (!std::isfinite(loss.value()[0]))
      throw std::runtime_error("training diverged: non-finite loss in joint epoch " + std::to_string(epoch));
    backward(loss);
    if (cfg_.grad_clip > 0.0) joint_opt_.clip_grad_norm(cfg_.grad_clip);
    joint_opt_.step(rec.lr);
    joint_opt_.zero_grad();
    model_.head_weight().zero_grad();

    const double w = static_cast<double>(idx.size());
    rec.loss += w * loss.value()[0];
    rec.cls += w * t.cls.value()[0];
    rec.clst += w * t.clst.value()[0];
    rec.sep += w * t.sep.value()[0];
    rec.mapping += w * t.mapping.value()[0];
    rec.oc += w * t.oc.value()[0];
    hits += correct(out.logits.value(), y);
    seen += idx.size();
  }
  const double n = static_cast<double>(seen);
  for (double* v : {&rec.loss, &rec.cls, &rec.clst, &rec.sep, &rec.mapping, &rec.oc}) *v /= n;
  rec.l1 = loss_l1(model_.head_weight(), model_.bank().class_of).value()[0];
  rec.accuracy = static_cast<double>(hits) / n;
  ++state_.joint_epochs_done;
  return rec;
}

std::vector<PushRecord> Trainer::push() {
  const bool was_training = model_.training();
  model_.set_training(false);
  NoGradGuard guard;
  const PrototypeBank& bank = model_.bank();
  const std::size_t P = bank.size(), D = bank.dim();
  const Tensor current = bank.vectors.value();
  std::vector<PushRecord> best(P);
  std::vector<double> best_d(P, std::numeric_limits<double>::infinity());
  Tensor next = current;
  constexpr std::size_t kBatch = 8;
  for (std::size_t b0 = 0; b0 < train_.size(); b0 += kBatch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b0; i < std::min(train_.size(), b0 + kBatch); ++i) idx.push_back(i);
    const ForwardOutput out = model_.forward(stack_images(train_, idx));
    const Tensor& u = out.pooled.value();  // (N, P, D)
    const Dims5 md = Dims5::of(out.maps.value());
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const Volume& v = train_[idx[j]];
      for (std::size_t p = 0; p < P; ++p) {
        if (bank.class_of[p] != v.label) continue;
        const double* up = u.raw() + (j * P + p) * D;
        double d = 0.0;
        for (std::size_t k = 0; k < D; ++k) d += (up[k] - current[p * D + k]) * (up[k] - current[p * D + k]);
        if (!(d < best_d[p])) continue;
        best_d[p] = d;
        std::copy(up, up + D, next.raw() + p * D);
        PushRecord& r = best[p];
        r.prototype = p;
        r.sample_index = idx[j];
        r.sample_id = v.id;
        r.distance_before = d;
        r.map = Tensor({md.x, md.y, md.z});
        const double* src = out.maps.value().raw() + md.index(j, p, 0, 0, 0);
        std::copy(src, src + md.spatial(), r.map.raw());
      }
    }
  }
  for (std::size_t p = 0; p < P; ++p) {
    if (!std::isfinite(best_d[p])) {
      throw std::runtime_error("push: no training sample of class " + std::to_string(bank.class_of[p]) +
                               " for prototype " + std::to_string(p));
    }
  }
  model_.bank().vectors.mutable_value() = next;
  model_.set_training(was_training);
  state_.provenance = best;
  return best;
}

Tensor Trainer::training_scores() {
  const bool was_training = model_.training();
  model_.set_training(false);
  NoGradGuard guard;
  const std::size_t P = model_.bank().size();
  Tensor scores({train_.size(), P});
  constexpr std::size_t kBatch = 8;
  for (std::size_t b0 = 0; b0 < train_.size(); b0 += kBatch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b0; i < std::min(train_.size(), b0 + kBatch); ++i) idx.push_back(i);
    const ForwardOutput out = model_.forward(stack_images(train_, idx));
    std::copy(out.scores.value().storage().begin(), out.scores.value().storage().end(), scores.raw() + b0 * P);
  }
  model_.set_training(was_training);
  return scores;
}

HistoryRecord Trainer::head_epoch(const Tensor& scores, AdamW& opt) {
  HistoryRecord rec;
  rec.epoch = state_.head_epochs_done;
  rec.cycle = state_.cycle;
  rec.stage = Stage::Head;
  rec.lr = cfg_.head_lr;
  const std::size_t P = scores.dim(1);
  std::size_t hits = 0;
  for (const auto& idx : shuffled_batches(train_.size(), cfg_.batch, state_.rng)) {
    Tensor s({idx.size(), P});
    for (std::size_t j = 0; j < idx.size(); ++j)
      std::copy_n(scores.raw() + idx[j] * P, P, s.raw() + j * P);
    const auto y = labels(idx);
    const Var logits = model_.classify(Var(s));
    const Var ce = loss_cls(logits, y);
    const Var l1 = loss_l1(model_.head_weight(), model_.bank().class_of);
    const Var loss = ops::weighted_sum({ce, l1}, {1.0, cfg_.weights.l1});
    if (!std::isfinite(loss.value()[0])) throw std::runtime_error("head fine-tuning diverged");
    backward(loss);
    opt.step(cfg_.head_lr);
    opt.zero_grad();
    const double w = static_cast<double>(idx.size());
    rec.loss += w * loss.value()[0];
    rec.cls += w * ce.value()[0];
    hits += correct(logits.value(), y);
  }
  const double n = static_cast<double>(train_.size());
  rec.loss /= n;
  rec.cls /= n;
  rec.l1 = loss_l1(model_.head_weight(), model_.bank().class_of).value()[0];
  rec.accuracy = static_cast<double>(hits) / n;
  ++state_.head_epochs_done;
  return rec;
}

void Trainer::run(const std::function<void(const HistoryRecord&)>& on_record, const BlockCallback& on_block) {
  auto emit = [&](const HistoryRecord& r) {
    state_.history.push_back(r);
    if (on_record) on_record(r);
  };
  while (!finished()) {
    switch (state_.next) {
      case Stage::Joint:
        for (std::size_t k = 0; k < cfg_.stage_period; ++k) emit(joint_epoch());
        state_.next = Stage::Push;
        break;
      case Stage::Push:
        push();
        state_.next = Stage::Head;
        break;
      case Stage::Head: {
        if (cfg_.head_epochs > 0) {
          const Tensor scores = training_scores();
          AdamW head_opt({{"head.weight", model_.head_weight()}}, cfg_.beta1, cfg_.beta2, cfg_.adam_eps, 0.0);
          for (std::size_t k = 0; k < cfg_.head_epochs; ++k) emit(head_epoch(scores, head_opt));
        }
        state_.next = Stage::Joint;
        ++state_.cycle;
        break;
      }
    }
    if (on_block) on_block(*this);
  }
}

void Trainer::save_state(Archive& a) const {
  a.put("state/counters", encode_ints({static_cast<long long>(state_.cycle), static_cast<long long>(state_.next),
                                       static_cast<long long>(state_.joint_epochs_done),
                                       static_cast<long long>(state_.head_epochs_done)}));
  std::ostringstream rng;
  rng << state_.rng;
  a.put_text("state/rng", rng.str());
  std::string hist;
  for (const auto& r : state_.history) hist += r.json() + '\n';
  a.put_text("state/history", hist);
  joint_opt_.save(a, "optim/joint");
  std::string prov;
  for (const auto& r : state_.provenance) {
    nlohmann::ordered_json j{{"prototype", r.prototype},
                             {"class", model_.bank().class_of.at(r.prototype)},
                             {"sample_index", r.sample_index},
                             {"sample_id", r.sample_id},
                             {"distance_before", r.distance_before}};
    prov += j.dump() + '\n';
    a.put("provenance/map/" + std::to_string(r.prototype), r.map);
  }
  a.put_text("provenance/records", prov);
}

void Trainer::load_state(const Archive& a) {
  const auto c = decode_ints(a.tensor("state/counters"));
  if (c.size() != 4 || c[1] < 0 || c[1] > 2) throw std::invalid_argument("checkpoint: bad training counters");
  state_.cycle = static_cast<std::size_t>(c[0]);
  state_.next = static_cast<Stage>(c[1]);
  state_.joint_epochs_done = static_cast<std::size_t>(c[2]);
  state_.head_epochs_done = static_cast<std::size_t>(c[3]);
  std::istringstream rng(a.text("state/rng"));
  rng >> state_.rng;
  if (!rng) throw std::invalid_argument("checkpoint: bad RNG state");
  state_.history.clear();
  std::istringstream hist(a.text("state/history"));
  for (std::string line; std::getline(hist, line);)
    if (!line.empty()) state_.history.push_back(HistoryRecord::from_json(line));
  joint_opt_.load(a, "optim/joint");
  state_.provenance.clear();
  std::istringstream prov(a.text("provenance/records"));
  for (std::string line; std::getline(prov, line);) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    PushRecord r;
    r.prototype = j.at("prototype").get<std::size_t>();
    r.sample_index = j.at("sample_index").get<std::size_t>();
    r.sample_id = j.at("sample_id").get<std::string>();
    r.distance_before = j.at("distance_before").get<double>();
    r.map = a.tensor("provenance/map/" + std::to_string(r.prototype));
    state_.provenance.push_back(std::move(r));
  }
}

}  // namespace maproto
