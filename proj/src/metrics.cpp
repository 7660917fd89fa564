#include "maproto/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace maproto {

double bac(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size()) throw std::invalid_argument("bac: size mismatch");
  double tp = 0, pos = 0, tn = 0, neg = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      pos += 1;
      tp += predictions[i] == 1;
    } else if (labels[i] == 0) {
      neg += 1;
      tn += predictions[i] == 0;
    } else {
      throw std::invalid_argument("bac: labels must be 0 or 1");
    }
  }
  if (pos == 0 || neg == 0) throw std::invalid_argument("bac: both classes must be present");
  return 0.5 * (tp / pos + tn / neg);
}

Tensor subject_attribution(const Var& maps, std::size_t n, const std::array<std::size_t, 3>& extent) {
  const Tensor& m = maps.value();
  require_volume_batch(m, "subject_attribution");
  const Dims5 d = Dims5::of(m);
  if (n >= d.n) throw std::out_of_range("subject_attribution: sample index");
  Tensor mean({1, d.x, d.y, d.z});
  const double* base = m.raw() + n * d.c * d.spatial();
  for (std::size_t p = 0; p < d.c; ++p)
    for (std::size_t v = 0; v < d.spatial(); ++v) mean[v] += base[p * d.spatial() + v];
  mean *= 1.0 / static_cast<double>(d.c);
  return resize_trilinear(mean, extent).reshaped({extent[0], extent[1], extent[2]});
}

double activation_precision(const Tensor& map, const Tensor& mask, double threshold) {
  if (map.shape() != mask.shape()) {
    throw std::invalid_argument("activation_precision: map " + shape_str(map.shape()) + " vs mask " +
                                shape_str(mask.shape()));
  }
  std::size_t active = 0, hit = 0;
  for (std::size_t i = 0; i < map.numel(); ++i) {
    if (map[i] > threshold) {
      ++active;
      hit += mask[i] > 0.5;
    }
  }
  return active == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(active);
}

std::vector<std::size_t> deletion_order(const Tensor& map, bool ascending) {
  std::vector<std::size_t> idx(map.numel());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return ascending ? map[a] < map[b] : map[a] > map[b];
  });
  return idx;
}

double ids_from_curve(const std::vector<double>& probabilities) {
  if (probabilities.size() < 2) throw std::invalid_argument("ids: at least two curve points are required");
  for (double p : probabilities)
    if (!std::isfinite(p)) throw std::invalid_argument("ids: non-finite probability");
  const double p0 = probabilities.front();
  if (p0 <= 0.0) return 0.0;
  const std::size_t n = probabilities.size() - 1;
  auto y = [&](std::size_t i) { return std::clamp(probabilities[i] / p0, 0.0, 1.0); };
  double interior = 0.0;
  for (std::size_t i = 1; i < n; ++i) interior += y(i);
  return (0.5 * (y(0) + y(n)) + interior) / static_cast<double>(n);
}

namespace {

struct Prediction {
  std::vector<double> probability;  // of the given label
  std::vector<int> argmax;
};

Prediction predict(MAProtoNet& model, const Tensor& batch, const std::vector<int>& labels) {
  NoGradGuard guard;
  const Tensor logits = model.forward(batch).logits.value();
  const std::size_t k = logits.dim(1);
  Prediction out;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const double* row = logits.raw() + n * k;
    const auto best = std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - *best);
    out.probability.push_back(std::exp(row[labels[n]] - *best) / z);
    out.argmax.push_back(static_cast<int>(best - row));
  }
  return out;
}

}  // namespace

Tensor stack_images(const Dataset& data, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("stack_images: empty batch");
  const Shape& s0 = data.at(indices[0]).image.shape();
  Shape s{indices.size()};
  s.insert(s.end(), s0.begin(), s0.end());
  Tensor out(s);
  const std::size_t per = shape_numel(s0);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Tensor& img = data.at(indices[i]).image;
    if (img.shape() != s0) throw std::invalid_argument("stack_images: subjects differ in shape");
    std::copy(img.storage().begin(), img.storage().end(), out.raw() + i * per);
  }
  return out;
}

std::vector<double> deletion_curve(MAProtoNet& model, const Volume& v, const Tensor& map, std::size_t steps,
                                   bool ascending) {
  if (steps == 0) throw std::invalid_argument("deletion_curve: zero steps");
  const auto extent = spatial_extent(v.image);
  if (map.shape() != Shape{extent[0], extent[1], extent[2]}) throw std::invalid_argument("deletion_curve: map grid");
  const bool was_training = model.training();
  model.set_training(false);
  const auto order = deletion_order(map, ascending);
  const std::size_t sp = map.numel();
  const std::size_t channels = v.image.dim(0);
  std::vector<double> curve;
  Tensor current = v.image;
  std::size_t deleted = 0;
  constexpr std::size_t kChunk = 7;
  for (std::size_t s0 = 0; s0 <= steps; s0 += kChunk) {
    const std::size_t s1 = std::min(steps + 1, s0 + kChunk);
    Shape bs{s1 - s0};
    bs.insert(bs.end(), v.image.shape().begin(), v.image.shape().end());
    Tensor batch(bs);
    for (std::size_t s = s0; s < s1; ++s) {
      const std::size_t target = s * sp / steps;
      for (; deleted < target; ++deleted)
        for (std::size_t c = 0; c < channels; ++c) current[c * sp + order[deleted]] = 0.0;
      std::copy(current.storage().begin(), current.storage().end(), batch.raw() + (s - s0) * current.numel());
    }
    const auto p = predict(model, batch, std::vector<int>(s1 - s0, v.label)).probability;
    curve.insert(curve.end(), p.begin(), p.end());
  }
  model.set_training(was_training);
  return curve;
}

std::vector<Tensor> attribution_maps(MAProtoNet& model, const Dataset& data, std::size_t batch) {
  const bool was_training = model.training();
  model.set_training(false);
  NoGradGuard guard;
  std::vector<Tensor> maps;
  for (std::size_t b0 = 0; b0 < data.size(); b0 += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b0; i < std::min(data.size(), b0 + batch); ++i) idx.push_back(i);
    const auto out = model.forward(stack_images(data, idx));
    for (std::size_t j = 0; j < idx.size(); ++j)
      maps.push_back(subject_attribution(out.maps, j, spatial_extent(data[idx[j]].image)));
  }
  model.set_training(was_training);
  return maps;
}

EvalResult evaluate_with_maps(MAProtoNet& model, const Dataset& data, const std::vector<Tensor>& maps,
                              const EvalOptions& opt) {
  if (maps.size() != data.size()) throw std::invalid_argument("evaluate: one map per subject required");
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  const bool was_training = model.training();
  model.set_training(false);
  EvalResult r;
  std::vector<int> preds, labels;
  for (std::size_t b0 = 0; b0 < data.size(); b0 += opt.batch) {
    std::vector<std::size_t> idx;
    std::vector<int> lab;
    for (std::size_t i = b0; i < std::min(data.size(), b0 + opt.batch); ++i) {
      idx.push_back(i);
      lab.push_back(data[i].label);
    }
    const auto pred = predict(model, stack_images(data, idx), lab);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const Volume& v = data[idx[j]];
      SubjectResult s;
      s.id = v.id;
      s.label = v.label;
      s.probability = pred.probability[j];
      s.prediction = pred.argmax[j];
      if (v.has_mask()) s.ap = activation_precision(maps[idx[j]], v.mask, opt.threshold);
      if (opt.compute_ids) s.ids = ids_from_curve(deletion_curve(model, v, maps[idx[j]], opt.ids_steps));
      preds.push_back(s.prediction);
      labels.push_back(s.label);
      r.subjects.push_back(std::move(s));
    }
  }
  r.bac = bac(preds, labels);
  double ap = 0.0, ids = 0.0;
  std::size_t nap = 0, nids = 0;
  for (const auto& s : r.subjects) {
    if (s.ap) ap += *s.ap, ++nap;
    if (s.ids) ids += *s.ids, ++nids;
  }
  if (nap) r.ap = ap / static_cast<double>(nap);
  if (nids) r.ids = ids / static_cast<double>(nids);
  model.set_training(was_training);
  return r;
}

EvalResult evaluate(MAProtoNet& model, const Dataset& data, const EvalOptions& opt) {
  return evaluate_with_maps(model, data, attribution_maps(model, data, opt.batch), opt);
}

namespace {

std::optional<MetricSummary> summarise(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  MetricSummary s;
  s.count = v.size();
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

std::string pct(const std::optional<double>& v) {
  if (!v) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100.0 * *v;
  return os.str();
}

std::string pct(const std::optional<MetricSummary>& s) {
  if (!s) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100.0 * s->mean << " +- " << 100.0 * s->sd;
  return os.str();
}

}  // namespace

FoldReport aggregate(std::vector<EvalResult> folds) {
  FoldReport r;
  std::vector<double> b, a, i;
  for (const auto& f : folds) {
    b.push_back(f.bac);
    if (f.ap) a.push_back(*f.ap);
    if (f.ids) i.push_back(*f.ids);
  }
  r.bac = summarise(b);
  r.ap = summarise(a);
  r.ids = summarise(i);
  r.folds = std::move(folds);
  return r;
}

std::string format_table(const FoldReport& report, const std::string& title) {
  std::ostringstream os;
  os << title << '\n';
  os << std::left << std::setw(10) << "fold" << std::setw(18) << "BAC (%)" << std::setw(18) << "AP (%)"
     << "IDS (%)\n";
  for (std::size_t f = 0; f < report.folds.size(); ++f) {
    const auto& r = report.folds[f];
    os << std::setw(10) << f << std::setw(18) << pct(std::optional<double>(r.bac)) << std::setw(18) << pct(r.ap)
       << pct(r.ids) << '\n';
  }
  os << std::setw(10) << "mean" << std::setw(18) << pct(report.bac) << std::setw(18) << pct(report.ap)
     << pct(report.ids) << '\n';
  return os.str();
}

std::string format_records(const FoldReport& report) {
  using nlohmann::json;
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  std::ostringstream os;
  for (std::size_t f = 0; f < report.folds.size(); ++f) {
    const auto& r = report.folds[f];
    json j{{"record", "fold"}, {"fold", f}, {"bac", r.bac}, {"ap", opt(r.ap)}, {"ids", opt(r.ids)},
           {"subjects", r.subjects.size()}};
    os << j.dump() << '\n';
  }
  auto summary = [](const std::optional<MetricSummary>& s) {
    return s ? json{{"mean", s->mean}, {"sd", s->sd}, {"n", s->count}} : json(nullptr);
  };
  os << json{{"record", "aggregate"}, {"bac", summary(report.bac)}, {"ap", summary(report.ap)},
             {"ids", summary(report.ids)}}
            .dump()
     << '\n';
  return os.str();
}

}  // namespace maproto
