#include "dain/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace dain::train {

using models::Batch;
using models::ModelGraph;

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int argmax_row(const Tensor& t, std::size_t row) {
  const std::size_t K = t.dim(1);
  std::size_t best = 0;
  double bv = t.at(row * K);
  for (std::size_t k = 1; k < K; ++k)
    if (t.at(row * K + k) > bv) {
      bv = t.at(row * K + k);
      best = k;
    }
  return static_cast<int>(best);
}

Tensor stack_images(const std::vector<Tensor>& imgs, DType dt) {
  const Shape& s = imgs.front().shape();
  Shape out_shape = {imgs.size(), s[0], s[1], s[2]};
  Tensor out(out_shape, dt);
  const std::size_t per = imgs.front().numel();
  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    auto o = out.data<T>();
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      if (imgs[i].shape() != s) throw ShapeError("batch images differ in shape");
      auto src = imgs[i].data<float>();
      for (std::size_t k = 0; k < per; ++k) o[i * per + k] = static_cast<T>(src[k]);
    }
  });
  return out;
}

Batch make_batch(const std::vector<data::ImagePair>& pairs, bool two_stream, DType dt) {
  std::vector<Tensor> a, b;
  for (const auto& p : pairs) {
    a.push_back(p.image);
    if (two_stream) b.push_back(p.diff);
  }
  Batch batch{stack_images(a, dt), std::nullopt};
  if (two_stream) batch.diff = stack_images(b, dt);
  return batch;
}

Batch eval_batch(const ModelGraph& model, const data::AugmentConfig& aug, const std::vector<const data::Item*>& items) {
  std::vector<data::ImagePair> pairs;
  for (const auto* it : items) pairs.push_back(data::eval_transform(it->image, it->diff, aug));
  return make_batch(pairs, models::is_two_stream(model.arch()), model.config().dtype);
}

struct SampleViews {
  int label = 0;
  std::string sample_id;
  std::vector<const data::Item*> views;  // sorted by view index
};

std::vector<SampleViews> group_by_sample(const std::vector<data::Item>& items) {
  std::map<std::string, SampleViews> m;
  for (const auto& it : items) {
    auto& s = m[it.sample_id];
    s.sample_id = it.sample_id;
    s.label = it.class_id;
    s.views.push_back(&it);
  }
  std::vector<SampleViews> out;
  for (auto& [id, s] : m) {
    std::stable_sort(s.views.begin(), s.views.end(),
                     [](const data::Item* a, const data::Item* b) { return a->view_index < b->view_index; });
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<const data::Item*> pick_window(const SampleViews& s, std::size_t n, std::mt19937_64& rng) {
  if (s.views.size() <= n) return s.views;
  const std::size_t start = rng() % (s.views.size() - n + 1);
  return {s.views.begin() + static_cast<std::ptrdiff_t>(start), s.views.begin() + static_cast<std::ptrdiff_t>(start + n)};
}

template <class T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i-- > 1;) std::swap(v[i], v[rng() % (i + 1)]);
}

}  // namespace

// ---------------------------------------------------------------------------

void sgd_step(std::span<ad::Parameter* const> params, OptimizerState& st) {
  for (auto* p : params) {
    if (!p->requires_grad) continue;
    if (!p->grad.all_finite()) throw NumericError("non-finite gradient in parameter " + p->name);
    auto [it, fresh] = st.velocity.try_emplace(p->name, p->value.shape(), p->value.dtype());
    Tensor& v = it->second;
    if (v.shape() != p->value.shape()) throw ShapeError("velocity shape mismatch for " + p->name);
    dispatch(p->value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto w = p->value.data<T>();
      auto g = p->grad.data<T>();
      auto vel = v.data<T>();
      const T mu = static_cast<T>(st.momentum), lr = static_cast<T>(st.lr), wd = static_cast<T>(st.weight_decay);
      for (std::size_t i = 0; i < w.size(); ++i) {
        vel[i] = mu * vel[i] - lr * (g[i] + wd * w[i]);
        w[i] += vel[i];
      }
    });
  }
}

bool lr_schedule_update(std::span<const double> h, ScheduleState& st) {
  const std::size_t E = st.window;
  if (E == 0 || h.size() < E + 1) return false;
  if (st.last_decay_len != 0 && h.size() < st.last_decay_len + E) return false;
  const double recent = *std::max_element(h.end() - static_cast<std::ptrdiff_t>(E), h.end());
  const double before = *std::max_element(h.begin(), h.end() - static_cast<std::ptrdiff_t>(E));
  // a gain of exactly tau counts as saturated; the slack absorbs rounding in the subtraction
  if (recent - before > st.tau + 1e-12) return false;
  st.lr *= st.factor;
  ++st.decays;
  st.last_decay_len = h.size();
  return true;
}

int stage_of_epoch(const TrainConfig& cfg, std::size_t epoch) {
  if (epoch <= cfg.stage1_epochs) return 1;
  if (epoch <= cfg.stage1_epochs + cfg.stage2_epochs) return 2;
  return 3;
}

void apply_stage(ModelGraph& model, int stage) {
  for (auto* p : model.parameters()) {
    switch (p->group) {
      case ad::ParamGroup::Classifier: p->requires_grad = true; break;
      case ad::ParamGroup::Head: p->requires_grad = stage >= 2; break;
      case ad::ParamGroup::Backbone: p->requires_grad = stage >= 3; break;
    }
  }
}

data::AugmentConfig augment_config(const ModelGraph& model, double stretch_pct, double flip_prob) {
  data::AugmentConfig a;
  a.stretch_pct = stretch_pct;
  a.flip_prob = flip_prob;
  a.crop = model.config().backbone.input_size;
  a.norm.mean = model.config().norm_mean;
  a.norm.std = model.config().norm_std;
  return a;
}

std::string metrics_csv_text(const std::vector<EpochMetrics>& epochs) {
  std::string s = "epoch,stage,lr,train_loss,train_acc,test_acc\n";
  for (const auto& e : epochs) {
    s += std::to_string(e.epoch) + "," + std::to_string(e.stage) + "," + fmt("%.9g", e.lr) + "," +
         fmt("%.9g", e.train_loss) + "," + fmt("%.9g", e.train_acc) + "," + (e.test_acc ? fmt("%.9g", *e.test_acc) : "") +
         "\n";
  }
  return s;
}

TrainResult train(ModelGraph& model, const std::vector<data::Item>& train_items,
                  const std::vector<data::Item>* test_items, const TrainConfig& cfg) {
  if (train_items.empty()) throw std::invalid_argument("train: empty training set");
  if (cfg.batch_size == 0) throw std::invalid_argument("train: batch_size must be >= 1");
  if (!(cfg.lr >= 0.0)) throw std::invalid_argument("train: lr must be >= 0");
  if (model.config().norm_std.empty()) {
    auto st = data::channel_stats(train_items);
    model.set_normalization(st.mean, st.std);
  }
  const auto aug = augment_config(model, cfg.stretch_pct, cfg.flip_prob);
  aug.validate(train_items.front().image.dim(1));
  const bool two = models::is_two_stream(model.arch());
  const DType dt = model.config().dtype;
  const std::size_t n_views = model.config().fusion.n_views;

  std::mt19937_64 rng(cfg.seed);
  OptimizerState opt{cfg.lr, cfg.momentum, cfg.weight_decay, {}};
  ScheduleState sched;
  sched.lr = cfg.lr;
  sched.factor = cfg.decay_factor;
  sched.window = cfg.decay_window;
  sched.tau = cfg.decay_tau;

  const auto samples = group_by_sample(train_items);
  EvalConfig train_eval;
  if (cfg.multiview) train_eval.mode = EvalMode::Multiview;
  train_eval.seed = cfg.seed;
  EvalConfig test_eval = train_eval;

  TrainResult result;
  std::vector<double> stage3_history;
  std::string last_good = model.encode();
  auto params = model.parameters();
  model.zero_grad();

  auto write_metrics = [&] {
    if (!cfg.metrics_csv) return;
    std::ofstream out(*cfg.metrics_csv, std::ios::binary);
    out << metrics_csv_text(result.epochs);
  };

  try {
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
      const int stage = stage_of_epoch(cfg, epoch);
      apply_stage(model, stage);
      opt.lr = sched.lr;

      double loss_sum = 0.0;
      std::size_t seen = 0;
      if (!cfg.multiview) {
        std::vector<std::size_t> order(train_items.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        shuffle(order, rng);
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
          const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
          std::vector<data::ImagePair> pairs;
          std::vector<int> labels;
          for (std::size_t i = b0; i < b1; ++i) {
            const auto& it = train_items[order[i]];
            pairs.push_back(data::augment(it.image, it.diff, aug, rng));
            labels.push_back(it.class_id);
          }
          ad::Tape tape;
          auto out = model.forward(tape, make_batch(pairs, two, dt), true, rng);
          auto loss = model.loss(out, labels);
          tape.backward(loss);
          sgd_step(params, opt);
          model.zero_grad();
          loss_sum += loss.value().item() * static_cast<double>(labels.size());
          seen += labels.size();
        }
      } else {
        std::vector<std::pair<std::size_t, std::vector<const data::Item*>>> windows;
        for (std::size_t s = 0; s < samples.size(); ++s)
          for (std::size_t w = 0; w < cfg.windows_per_sample; ++w) windows.emplace_back(s, pick_window(samples[s], n_views, rng));
        shuffle(windows, rng);
        // windows of unequal length (short samples) cannot share a batch
        std::stable_sort(windows.begin(), windows.end(),
                         [](const auto& a, const auto& b) { return a.second.size() > b.second.size(); });
        for (std::size_t b0 = 0; b0 < windows.size();) {
          const std::size_t len = windows[b0].second.size();
          std::size_t b1 = b0;
          while (b1 < windows.size() && b1 - b0 < cfg.batch_size && windows[b1].second.size() == len) ++b1;
          std::vector<std::vector<data::ImagePair>> per_view(len);
          std::vector<int> labels;
          for (std::size_t i = b0; i < b1; ++i) {
            // one geometric draw per window keeps the views aligned
            std::mt19937_64 wrng(rng());
            for (std::size_t v = 0; v < len; ++v) {
              std::mt19937_64 vrng = wrng;
              const auto* it = windows[i].second[v];
              per_view[v].push_back(data::augment(it->image, it->diff, aug, vrng));
            }
            labels.push_back(samples[windows[i].first].label);
          }
          std::vector<Batch> views;
          for (auto& pv : per_view) views.push_back(make_batch(pv, two, dt));
          ad::Tape tape;
          auto out = model.forward_multiview(tape, views, true, rng);
          auto loss = model.loss(out, labels);
          tape.backward(loss);
          sgd_step(params, opt);
          model.zero_grad();
          loss_sum += loss.value().item() * static_cast<double>(labels.size());
          seen += labels.size();
          b0 = b1;
        }
      }

      EpochMetrics em;
      em.epoch = epoch;
      em.stage = stage;
      em.lr = opt.lr;
      em.train_loss = loss_sum / static_cast<double>(seen);
      em.train_acc = evaluate(model, train_items, train_eval).overall;
      if (test_items && !test_items->empty() && (cfg.eval_test_each_epoch || epoch == cfg.epochs))
        em.test_acc = evaluate(model, *test_items, test_eval).overall;
      result.epochs.push_back(em);
      write_metrics();
      last_good = model.encode();

      if (cfg.target_train_acc > 0.0 && em.train_acc >= cfg.target_train_acc) {
        result.stop_reason = "target train accuracy reached";
        break;
      }
      if (stage == 3) {
        stage3_history.push_back(em.train_acc);
        ScheduleState probe = sched;
        if (lr_schedule_update(stage3_history, probe)) {
          if (cfg.max_decays > 0 && sched.decays >= cfg.max_decays) {
            result.stop_reason = "train accuracy saturated after " + std::to_string(sched.decays) + " decays";
            break;
          }
          sched = probe;
        }
      }
    }
  } catch (const NumericError& e) {
    if (cfg.divergence_checkpoint) {
      std::ofstream out(*cfg.divergence_checkpoint, std::ios::binary);
      out << last_good;
    }
    write_metrics();
    throw TrainingDiverged(std::string("training diverged: ") + e.what());
  }
  if (result.stop_reason.empty()) result.stop_reason = "epoch budget exhausted";
  result.decays = sched.decays;
  for (auto* p : params) p->requires_grad = true;
  return result;
}

double batch_loss(ModelGraph& model, const std::vector<data::Item>& items) {
  std::vector<const data::Item*> ptrs;
  std::vector<int> labels;
  for (const auto& it : items) {
    ptrs.push_back(&it);
    labels.push_back(it.class_id);
  }
  const auto aug = augment_config(model);
  ad::Tape tape(false);
  std::mt19937_64 rng(0);
  auto out = model.forward(tape, eval_batch(model, aug, ptrs), false, rng);
  return model.loss(out, labels).value().item();
}

// ---------------------------------------------------------------------------

void EvalReport::check_consistency() const {
  std::size_t trace = 0, sum = 0;
  for (std::size_t k = 0; k < n_classes; ++k) {
    std::size_t row = 0;
    for (std::size_t j = 0; j < n_classes; ++j) row += confusion[k][j];
    if (row != per_class_count[k]) throw std::logic_error("confusion row " + std::to_string(k) + " does not match class count");
    trace += confusion[k][k];
    sum += row;
  }
  if (sum != total || trace != correct) throw std::logic_error("confusion matrix totals disagree with the report");
  if (total && std::fabs(overall - static_cast<double>(trace) / static_cast<double>(total)) > 1e-15)
    throw std::logic_error("overall accuracy differs from trace / total");
}

EvalReport make_report(const std::vector<Prediction>& preds, std::size_t K, bool with_angles) {
  EvalReport r;
  r.n_classes = K;
  r.confusion.assign(K, std::vector<std::size_t>(K, 0));
  r.per_class_count.assign(K, 0);
  r.per_class.assign(K, 0.0);
  std::map<double, AngleAccuracy> angles;
  for (const auto& p : preds) {
    if (p.label < 0 || static_cast<std::size_t>(p.label) >= K || p.predicted < 0 || static_cast<std::size_t>(p.predicted) >= K)
      throw std::out_of_range("prediction label outside the class range");
    ++r.confusion[p.label][p.predicted];
    ++r.per_class_count[p.label];
    ++r.total;
    if (p.label == p.predicted) ++r.correct;
    if (with_angles) {
      auto& a = angles[p.theta_deg];
      a.theta_deg = p.theta_deg;
      ++a.total;
      if (p.label == p.predicted) ++a.correct;
    }
  }
  for (std::size_t k = 0; k < K; ++k)
    r.per_class[k] = r.per_class_count[k] ? static_cast<double>(r.confusion[k][k]) / static_cast<double>(r.per_class_count[k]) : 0.0;
  r.overall = r.total ? static_cast<double>(r.correct) / static_cast<double>(r.total) : 0.0;
  for (auto& [th, a] : angles) r.per_angle.push_back(a);
  return r;
}

Tensor predict_proba(ModelGraph& model, const std::vector<const data::Item*>& items) {
  const std::size_t K = model.config().dims.n_classes;
  Tensor out({std::max<std::size_t>(items.size(), 1), K}, DType::f64);
  const auto aug = augment_config(model);
  std::mt19937_64 rng(0);
  constexpr std::size_t kChunk = 64;
  for (std::size_t b0 = 0; b0 < items.size(); b0 += kChunk) {
    const std::size_t b1 = std::min(items.size(), b0 + kChunk);
    std::vector<const data::Item*> chunk(items.begin() + static_cast<std::ptrdiff_t>(b0), items.begin() + static_cast<std::ptrdiff_t>(b1));
    ad::Tape tape(false);
    auto fo = model.forward(tape, eval_batch(model, aug, chunk), false, rng);
    const Tensor p = ad::softmax(fo.logits).value();
    for (std::size_t i = 0; i < chunk.size(); ++i)
      for (std::size_t k = 0; k < K; ++k) out.set((b0 + i) * K + k, p.at(i * K + k));
  }
  return out;
}

EvalReport evaluate(ModelGraph& model, const std::vector<data::Item>& items, const EvalConfig& cfg) {
  const std::size_t K = model.config().dims.n_classes;
  std::vector<Prediction> preds;
  std::vector<std::string> warnings;

  if (cfg.mode == EvalMode::SingleView) {
    std::vector<const data::Item*> ptrs;
    for (const auto& it : items) ptrs.push_back(&it);
    const Tensor proba = predict_proba(model, ptrs);
    for (std::size_t i = 0; i < items.size(); ++i)
      preds.push_back({items[i].class_id, argmax_row(proba, i), items[i].theta_deg});
    auto r = make_report(preds, K, true);
    r.check_consistency();
    return r;
  }

  const auto& fusion = model.config().fusion;
  const auto mode = cfg.multiview_mode.value_or(fusion.multiview_mode);
  const auto rule = cfg.voting_rule.value_or(fusion.voting_rule);
  const std::size_t n = cfg.n_views.value_or(fusion.n_views);
  if (mode == angular::MultiviewMode::Filter3D && !model.has_param(models::is_two_stream(model.arch()) ? "multiview.filter_rgb.weight" : "multiview.filter.weight"))
    throw std::invalid_argument("evaluate: model was built without 3D view filters");

  const auto samples = group_by_sample(items);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::vector<const data::Item*>> windows;
  for (const auto& s : samples) {
    if (s.views.size() < n)
      warnings.push_back(s.sample_id + ": only " + std::to_string(s.views.size()) + " views, using all of them");
    auto w = pick_window(s, n, rng);
    if (cfg.reverse_windows) std::reverse(w.begin(), w.end());
    windows.push_back(std::move(w));
  }

  if (mode == angular::MultiviewMode::Voting) {
    std::vector<const data::Item*> ptrs;
    for (const auto& it : items) ptrs.push_back(&it);
    const Tensor proba = predict_proba(model, ptrs);
    std::map<const data::Item*, std::size_t> row;
    for (std::size_t i = 0; i < ptrs.size(); ++i) row[ptrs[i]] = i;
    for (std::size_t s = 0; s < samples.size(); ++s) {
      std::vector<Tensor> pv;
      for (const auto* it : windows[s]) {
        Tensor p({K}, DType::f64);
        for (std::size_t k = 0; k < K; ++k) p.set(k, proba.at(row[it] * K + k));
        pv.push_back(std::move(p));
      }
      preds.push_back({samples[s].label, angular::multiview_combine_predictions(pv, rule), windows[s].front()->theta_deg});
    }
  } else {
    const auto aug = augment_config(model);
    std::mt19937_64 drng(0);
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return windows[a].size() > windows[b].size(); });
    for (std::size_t b0 = 0; b0 < order.size();) {
      const std::size_t len = windows[order[b0]].size();
      std::size_t b1 = b0;
      while (b1 < order.size() && b1 - b0 < cfg.batch_size && windows[order[b1]].size() == len) ++b1;
      std::vector<Batch> views;
      for (std::size_t v = 0; v < len; ++v) {
        std::vector<const data::Item*> col;
        for (std::size_t i = b0; i < b1; ++i) col.push_back(windows[order[i]][v]);
        views.push_back(eval_batch(model, aug, col));
      }
      ad::Tape tape(false);
      auto fo = model.forward_multiview(tape, views, false, drng);
      for (std::size_t i = b0; i < b1; ++i)
        preds.push_back({samples[order[i]].label, argmax_row(fo.logits.value(), i - b0), windows[order[i]].front()->theta_deg});
      b0 = b1;
    }
  }
  auto r = make_report(preds, K, false);
  r.warnings = std::move(warnings);
  r.check_consistency();
  return r;
}

// ---------------------------------------------------------------------------

void write_confusion_csv(const std::filesystem::path& file, const EvalReport& r) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << "true\\pred";
  for (std::size_t j = 0; j < r.n_classes; ++j) out << ',' << j;
  out << '\n';
  for (std::size_t i = 0; i < r.n_classes; ++i) {
    out << i;
    for (std::size_t j = 0; j < r.n_classes; ++j) out << ',' << r.confusion[i][j];
    out << '\n';
  }
}

void write_per_angle_csv(const std::filesystem::path& file, const EvalReport& r) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << "theta_deg,correct,total,accuracy\n";
  for (const auto& a : r.per_angle)
    out << fmt("%g", a.theta_deg) << ',' << a.correct << ',' << a.total << ',' << fmt("%.6f", a.accuracy()) << '\n';
}

std::string eval_summary_text(const EvalReport& r) {
  std::ostringstream s;
  s << "overall_accuracy: " << fmt("%.4f", r.overall) << " (" << r.correct << "/" << r.total << ")\n";
  s << "per_class_accuracy:\n";
  for (std::size_t k = 0; k < r.n_classes; ++k)
    s << "  class " << k << ": " << fmt("%.4f", r.per_class[k]) << " (n=" << r.per_class_count[k] << ")\n";
  if (!r.per_angle.empty()) {
    s << "per_angle_accuracy:\n";
    for (const auto& a : r.per_angle) s << "  theta " << fmt("%+g", a.theta_deg) << ": " << fmt("%.4f", a.accuracy()) << " (n=" << a.total << ")\n";
  }
  for (const auto& w : r.warnings) s << "warning: " << w << "\n";
  return s.str();
}

std::string mean_std_string(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("mean_std_string: no values");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f±%.1f", mean, sd);
  return buf;
}

std::string multi_split_summary(std::span<const EvalReport> reports) {
  std::ostringstream s;
  std::vector<double> pct;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    pct.push_back(100.0 * reports[i].overall);
    s << "split " << (i + 1) << ": " << fmt("%.1f", pct.back()) << "\n";
  }
  s << "mean: " << mean_std_string(pct) << "\n";
  return s.str();
}

std::vector<FeatureRow> export_features(ModelGraph& model, const std::vector<data::Item>& items) {
  std::vector<FeatureRow> rows;
  const auto aug = augment_config(model);
  std::mt19937_64 rng(0);
  constexpr std::size_t kChunk = 64;
  for (std::size_t b0 = 0; b0 < items.size(); b0 += kChunk) {
    const std::size_t b1 = std::min(items.size(), b0 + kChunk);
    std::vector<const data::Item*> chunk;
    for (std::size_t i = b0; i < b1; ++i) chunk.push_back(&items[i]);
    ad::Tape tape(false);
    auto fo = model.forward(tape, eval_batch(model, aug, chunk), false, rng);
    const Tensor& f = fo.features.value();
    const std::size_t F = f.dim(1);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      FeatureRow r{chunk[i]->sample_id, chunk[i]->view_index, {}};
      for (std::size_t k = 0; k < F; ++k) r.features.push_back(f.at(i * F + k));
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

void write_feature_csv(const std::filesystem::path& file, const std::vector<FeatureRow>& rows) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  const std::size_t F = rows.empty() ? 0 : rows.front().features.size();
  out << "sample_id,view_index";
  for (std::size_t k = 0; k < F; ++k) out << ",f_" << k;
  out << '\n';
  for (const auto& r : rows) {
    std::string sid = r.sample_id;
    if (sid.find_first_of(",\"\n") != std::string::npos) {
      std::string q = "\"";
      for (char c : sid) q += c == '"' ? std::string("\"\"") : std::string(1, c);
      sid = q + "\"";
    }
    out << sid << ',' << r.view_index;
    for (double v : r.features) out << ',' << fmt("%.9g", v);
    out << '\n';
  }
}

}  // namespace dain::train
