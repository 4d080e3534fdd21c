// SPDX-License-Identifier: Apache-2.0

#include "maskuno/train/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <thread>

#include "maskuno/core/error.hpp"
#include "maskuno/eval/evalkit.hpp"

namespace maskuno::train {

using core::Tensor;
using nlohmann::json;
using pipeline::RoiFeature;

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) fail(ErrorKind::InvalidArgument, std::string("train config: ") + what);
  };
  require(learning_rate >= 0.0, "learning_rate must be >= 0");
  require(momentum >= 0.0 && momentum < 1.0, "momentum must be in [0, 1)");
  require(weight_decay >= 0.0, "weight_decay must be >= 0");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(epochs >= 1 && head_epochs >= 1, "epoch counts must be >= 1");
  require(plateau_window >= 1, "plateau_window must be >= 1");
  require(rois_per_image >= 1, "rois_per_image must be >= 1");
  require(positive_fraction > 0.0 && positive_fraction <= 1.0, "positive_fraction must be in (0, 1]");
  require(positive_iou > 0.0 && positive_iou <= 1.0, "positive_iou must be in (0, 1]");
  require(rpn_batch >= 1, "rpn_batch must be >= 1");
}

json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"lr_step_fraction", c.lr_step_fraction},
          {"lr_gamma", c.lr_gamma},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"head_epochs", c.head_epochs},
          {"plateau_delta", c.plateau_delta},
          {"plateau_window", c.plateau_window},
          {"eval_samples", c.eval_samples},
          {"seed", c.seed},
          {"rois_per_image", c.rois_per_image},
          {"positive_fraction", c.positive_fraction},
          {"positive_iou", c.positive_iou},
          {"gt_jitter_draws", c.gt_jitter_draws},
          {"gt_jitter", c.gt_jitter},
          {"random_rois", c.random_rois},
          {"train_proposals", c.train_proposals},
          {"rpn_batch", c.rpn_batch},
          {"rpn_positive_fraction", c.rpn_positive_fraction},
          {"rpn_positive_iou", c.rpn_positive_iou},
          {"rpn_negative_iou", c.rpn_negative_iou},
          {"mask_reduction", c.mask_reduction == losses::Reduction::Mean ? "mean" : "sum"}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.lr_step_fraction = j.value("lr_step_fraction", c.lr_step_fraction);
    c.lr_gamma = j.value("lr_gamma", c.lr_gamma);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.head_epochs = j.value("head_epochs", c.head_epochs);
    c.plateau_delta = j.value("plateau_delta", c.plateau_delta);
    c.plateau_window = j.value("plateau_window", c.plateau_window);
    c.eval_samples = j.value("eval_samples", c.eval_samples);
    c.seed = j.value("seed", c.seed);
    c.rois_per_image = j.value("rois_per_image", c.rois_per_image);
    c.positive_fraction = j.value("positive_fraction", c.positive_fraction);
    c.positive_iou = j.value("positive_iou", c.positive_iou);
    c.gt_jitter_draws = j.value("gt_jitter_draws", c.gt_jitter_draws);
    c.gt_jitter = j.value("gt_jitter", c.gt_jitter);
    c.random_rois = j.value("random_rois", c.random_rois);
    c.train_proposals = j.value("train_proposals", c.train_proposals);
    c.rpn_batch = j.value("rpn_batch", c.rpn_batch);
    c.rpn_positive_fraction = j.value("rpn_positive_fraction", c.rpn_positive_fraction);
    c.rpn_positive_iou = j.value("rpn_positive_iou", c.rpn_positive_iou);
    c.rpn_negative_iou = j.value("rpn_negative_iou", c.rpn_negative_iou);
    const std::string red = j.value("mask_reduction", std::string("mean"));
    if (red != "mean" && red != "sum") fail(ErrorKind::InvalidArgument, "mask_reduction must be mean or sum");
    c.mask_reduction = red == "mean" ? losses::Reduction::Mean : losses::Reduction::Sum;
  } catch (const json::exception& e) {
    fail(ErrorKind::Parse, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

double learning_rate_at(const TrainConfig& config, int epoch, int total_epochs) {
  const int step = int(std::floor(config.lr_step_fraction * total_epochs));
  return epoch >= step ? config.learning_rate * config.lr_gamma : config.learning_rate;
}

bool plateau_reached(const std::vector<double>& history, int window, double delta) {
  if (int(history.size()) <= window) return false;
  const auto split = history.end() - window;
  const double recent = *std::max_element(split, history.end());
  const double earlier = *std::max_element(history.begin(), split);
  return recent - earlier < delta;
}

void Sgd::step(const std::vector<pipeline::ParamSlot>& params, double lr) {
  const float m = float(momentum_), wd = float(weight_decay_), rate = float(lr);
  for (const auto& p : params) {
    auto [it, fresh] = velocity_.try_emplace(p.name, p.value->shape());
    Tensor& v = it->second;
    float* w = p.value->data();
    const float* g = p.grad->data();
    float* vel = v.data();
    for (std::size_t i = 0; i < p.value->size(); ++i) {
      vel[i] = m * vel[i] + (g[i] + wd * w[i]);
      w[i] -= rate * vel[i];
    }
  }
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  rpn_objectness += o.rpn_objectness;
  rpn_box += o.rpn_box;
  cls += o.cls;
  box += o.box;
  mask += o.mask;
  positives += o.positives;
  rois += o.rois;
  return *this;
}

// ---------------------------------------------------------------- ROI sampling

namespace {

template <typename T>
void shuffle(std::vector<T>& v, core::Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = std::size_t(core::uniform01(rng) * double(i));
    std::swap(v[i - 1], v[std::min(j, i - 1)]);
  }
}

std::vector<std::size_t> shuffled_indices(std::size_t n, core::Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  shuffle(idx, rng);
  return idx;
}

double bce_logit(double z, double y) { return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))); }

Tensor reshape_like(const Tensor& flat, const Tensor& like) {
  Tensor out(like.shape());
  std::copy(flat.data(), flat.data() + flat.size(), out.data());
  return out;
}

std::vector<Box> gt_boxes(const SceneSample& s) {
  std::vector<Box> out;
  for (const auto& a : s.annotations) out.push_back(a.box);
  return out;
}

}  // namespace

std::vector<RoiTarget> assign_rois(const std::vector<Box>& candidates, const SceneSample& sample, double positive_iou) {
  std::vector<RoiTarget> out;
  for (const Box& b : candidates) {
    if (!b.valid()) continue;
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < sample.annotations.size(); ++g) {
      const double v = core::box_iou(b, sample.annotations[g].box);
      if (v > best_iou) {
        best_iou = v;
        best = int(g);
      }
    }
    if (best >= 0 && best_iou >= positive_iou)
      out.push_back({b, sample.annotations[std::size_t(best)].label.id, best});
    else
      out.push_back({b, 0, -1});
  }
  return out;
}

std::vector<RoiTarget> sample_rois(std::vector<RoiTarget> assigned, int max_rois, double positive_fraction,
                                   core::Rng& rng) {
  std::vector<RoiTarget> pos, neg;
  for (auto& r : assigned) (r.label > 0 ? pos : neg).push_back(r);
  shuffle(pos, rng);
  shuffle(neg, rng);
  const std::size_t max_pos = std::size_t(std::floor(max_rois * positive_fraction));
  if (pos.size() > max_pos) pos.resize(max_pos);
  const std::size_t max_neg = std::size_t(max_rois) - pos.size();
  if (neg.size() > max_neg) neg.resize(max_neg);
  pos.insert(pos.end(), neg.begin(), neg.end());
  return pos;
}

std::vector<Box> roi_candidates(const PipelineModel& model, const FeatureMap& fm, const SceneSample& sample,
                                const TrainConfig& config, core::Rng& rng) {
  const int w = fm.image_width(), h = fm.image_height();
  std::vector<Box> out = gt_boxes(sample);
  for (int d = 0; d < config.gt_jitter_draws; ++d)
    for (const auto& p : pipeline::propose_gt_jitter(gt_boxes(sample), config.gt_jitter, rng, w, h))
      out.push_back(p.box);
  if (config.train_proposals > 0)
    for (const auto& p : pipeline::propose_learned(model, fm, config.train_proposals)) out.push_back(p.box);
  for (int i = 0; i < config.random_rois; ++i) {
    const double bw = std::exp(core::uniform(rng, std::log(4.0), std::log(64.0)));
    const double bh = std::exp(core::uniform(rng, std::log(4.0), std::log(64.0)));
    const double cx = core::uniform(rng, 0.0, w), cy = core::uniform(rng, 0.0, h);
    const Box b = core::clip_box({cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2}, w, h);
    if (b.width() >= 1.0 && b.height() >= 1.0) out.push_back(b);
  }
  return out;
}

// ---------------------------------------------------------------- one image

namespace {

struct RpnLoss {
  double objectness = 0.0, box = 0.0;
};

RpnLoss rpn_loss(const PipelineModel& model, const FeatureMap& fm, const pipeline::RpnHead::Output& out,
                 const SceneSample& sample, const TrainConfig& config, core::Rng& rng, Tensor* grad_obj,
                 Tensor* grad_del) {
  const auto& anchors = model.anchors();
  const int hw = fm.height() * fm.width(), a_per = model.rpn.anchors_per_cell;
  const double img_w = fm.image_width(), img_h = fm.image_height();
  const std::size_t ng = sample.annotations.size();
  std::vector<int> label(anchors.size(), -1), match(anchors.size(), -1);
  std::vector<double> best_iou(anchors.size(), 0.0), gt_best(ng, 0.0);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const Box& a = anchors[i];
    if (a.x1 < 0 || a.y1 < 0 || a.x2 > img_w || a.y2 > img_h) continue;
    label[i] = 0;
    for (std::size_t g = 0; g < ng; ++g) {
      const double v = core::box_iou(a, sample.annotations[g].box);
      if (v > best_iou[i]) {
        best_iou[i] = v;
        match[i] = int(g);
      }
      gt_best[g] = std::max(gt_best[g], v);
    }
  }
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (label[i] < 0) continue;
    if (best_iou[i] >= config.rpn_positive_iou) {
      label[i] = 1;
    } else if (best_iou[i] >= config.rpn_negative_iou) {
      label[i] = -1;
    }
  }
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const Box& a = anchors[i];
    if (a.x1 < 0 || a.y1 < 0 || a.x2 > img_w || a.y2 > img_h) continue;
    for (std::size_t g = 0; g < ng; ++g) {
      if (gt_best[g] <= 0.0) continue;
      const double v = core::box_iou(a, sample.annotations[g].box);
      if (v == gt_best[g]) {
        label[i] = 1;
        match[i] = int(g);
      }
    }
  }
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (label[i] == 1) pos.push_back(i);
    if (label[i] == 0) neg.push_back(i);
  }
  shuffle(pos, rng);
  shuffle(neg, rng);
  const std::size_t max_pos = std::size_t(config.rpn_batch * config.rpn_positive_fraction);
  if (pos.size() > max_pos) pos.resize(max_pos);
  const std::size_t max_neg = std::size_t(config.rpn_batch) - pos.size();
  if (neg.size() > max_neg) neg.resize(max_neg);
  const double n = double(pos.size() + neg.size());
  RpnLoss loss;
  if (n == 0) return loss;
  auto obj_index = [&](std::size_t i) { return (i % std::size_t(a_per)) * std::size_t(hw) + i / std::size_t(a_per); };
  auto del_index = [&](std::size_t i, int j) {
    return (4 * (i % std::size_t(a_per)) + std::size_t(j)) * std::size_t(hw) + i / std::size_t(a_per);
  };
  for (int which = 0; which < 2; ++which) {
    for (std::size_t i : which == 0 ? pos : neg) {
      const double y = which == 0 ? 1.0 : 0.0;
      const double z = out.objectness[obj_index(i)];
      loss.objectness += bce_logit(z, y) / n;
      if (grad_obj) (*grad_obj)[obj_index(i)] = float((core::sigmoid(z) - y) / n);
    }
  }
  for (std::size_t i : pos) {
    const core::BoxDelta t = core::encode_box_delta(sample.annotations[std::size_t(match[i])].box, anchors[i]);
    const double target[4] = {t.dx, t.dy, t.dw, t.dh};
    for (int j = 0; j < 4; ++j) {
      const double d = out.deltas[del_index(i, j)] - target[j];
      loss.box += losses::smooth_l1_term(d) / n;
      if (grad_del) (*grad_del)[del_index(i, j)] = float(losses::smooth_l1_derivative(d) / n);
    }
  }
  return loss;
}

void scale_inplace(Tensor& t, double s) {
  for (auto& v : t.values()) v = float(v * s);
}

}  // namespace

LossBreakdown image_loss(PipelineModel& model, const SceneSample& sample, const std::vector<RoiTarget>* rois,
                         const TrainConfig& config, core::Rng& rng, bool backward, double grad_scale) {
  if (sample.image.empty()) fail(ErrorKind::Data, "training sample " + std::to_string(sample.sample_id) + " has no image");
  pipeline::Backbone::Trace bt;
  const FeatureMap fm = model.backbone.forward(sample.image, backward ? &bt : nullptr);
  Tensor grad_fm;
  if (backward) grad_fm = Tensor(fm.data.shape());

  LossBreakdown loss;
  const auto out = model.rpn.forward(fm);
  {
    Tensor gobj(out.objectness.shape()), gdel(out.deltas.shape());
    const RpnLoss r = rpn_loss(model, fm, out, sample, config, rng, backward ? &gobj : nullptr,
                               backward ? &gdel : nullptr);
    loss.rpn_objectness = r.objectness;
    loss.rpn_box = r.box;
    if (backward) {
      scale_inplace(gobj, grad_scale);
      scale_inplace(gdel, grad_scale);
      const Tensor g = model.rpn.backward(fm, out, gobj, gdel, true);
      for (std::size_t i = 0; i < g.size(); ++i) grad_fm[i] += g[i];
    }
  }

  std::vector<RoiTarget> sampled;
  if (rois == nullptr) {
    sampled = sample_rois(assign_rois(roi_candidates(model, fm, sample, config, rng), sample, config.positive_iou),
                          config.rois_per_image, config.positive_fraction, rng);
    rois = &sampled;
  }
  const auto& cfg = model.config;
  const double n = double(rois->size());
  const int npos = int(std::count_if(rois->begin(), rois->end(), [](const RoiTarget& r) { return r.label > 0; }));
  loss.rois = int(rois->size());
  loss.positives = npos;
  for (const RoiTarget& r : *rois) {
    const RoiFeature r7 = pipeline::roi_align(fm, r.box, cfg.box_roi_resolution);
    pipeline::FcHead::Trace ct;
    const Tensor logits = model.cls.forward(r7.data, backward ? &ct : nullptr);
    const auto dist = core::ClassDistribution::from_logits(logits.values());
    loss.cls += losses::cls_cross_entropy(dist, core::ClassLabel{r.label}).value / n;
    Tensor grad_r7;
    if (backward) {
      const auto g = losses::cls_cross_entropy_logit_grad(dist, core::ClassLabel{r.label});
      Tensor gl(logits.shape());
      for (std::size_t i = 0; i < g.size(); ++i) gl[i] = float(g[i] / n * grad_scale);
      grad_r7 = reshape_like(model.cls.backward(ct, gl, true), r7.data);
    }
    if (r.label <= 0) {
      if (backward) pipeline::roi_align_backward(fm, r.box, grad_r7, grad_fm);
      continue;
    }
    const auto& gt = sample.annotations[std::size_t(r.gt_index)];
    // box regression on the assigned class
    pipeline::FcHead::Trace bt2;
    const Tensor deltas = model.box.forward(r7.data, backward ? &bt2 : nullptr);
    const core::BoxDelta t = core::encode_box_delta(gt.box, r.box);
    const auto& w = cfg.box_delta_weights;
    const double target[4] = {t.dx * w[0], t.dy * w[1], t.dw * w[2], t.dh * w[3]};
    Tensor gd(deltas.shape());
    for (int j = 0; j < 4; ++j) {
      const std::size_t k = std::size_t(4 * (r.label - 1) + j);
      const double d = deltas[k] - target[j];
      loss.box += losses::smooth_l1_term(d) / n;
      gd[k] = float(losses::smooth_l1_derivative(d) / n * grad_scale);
    }
    if (backward) {
      const Tensor g = reshape_like(model.box.backward(bt2, gd, true), r7.data);
      for (std::size_t i = 0; i < g.size(); ++i) grad_r7[i] += g[i];
      pipeline::roi_align_backward(fm, r.box, grad_r7, grad_fm);
    }
    if (!model.mask) continue;
    const RoiFeature r14 = pipeline::roi_align(fm, r.box, cfg.mask_roi_resolution);
    pipeline::MaskHead::Trace mt;
    const Tensor mlogits = model.mask->forward(r14, backward ? &mt : nullptr);
    const int m = cfg.mask_resolution;
    const std::size_t plane = std::size_t(m) * m, offset = std::size_t(r.label - 1) * plane;
    const core::BinaryMask target_mask = losses::mask_target(r.box, gt.mask, m);
    Tensor gm(mlogits.shape());
    const auto l = losses::mask_bce_with_logits(std::span<const float>(mlogits.data() + offset, plane), target_mask,
                                                config.mask_reduction, std::span<float>(gm.data() + offset, plane));
    loss.mask += l.value / npos;
    if (backward) {
      scale_inplace(gm, grad_scale / npos);
      const Tensor g = model.mask->backward(mt, gm, true);
      pipeline::roi_align_backward(fm, r.box, g, grad_fm);
    }
  }
  if (backward) model.backbone.backward(bt, grad_fm);
  return loss;
}

// ---------------------------------------------------------------- baseline

namespace {

class MetricLog {
 public:
  explicit MetricLog(const std::string& path) {
    if (path.empty()) return;
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    out_.open(p);
    if (!out_) fail(ErrorKind::Data, "cannot open metric log " + path);
  }
  void write(const json& j) {
    if (out_.is_open()) out_ << j.dump() << "\n" << std::flush;
  }

 private:
  std::ofstream out_;
};

json loss_json(const LossBreakdown& l) {
  return {{"rpn_objectness", l.rpn_objectness}, {"rpn_box", l.rpn_box}, {"cls", l.cls},
          {"box", l.box},  {"mask", l.mask}, {"total", l.total()}};
}

}  // namespace

BaselineResult train_baseline(const std::vector<SceneSample>& train, const pipeline::PipelineConfig& model_config,
                              const TrainConfig& config, const EvalHook& eval_hook) {
  config.validate();
  if (train.empty()) fail(ErrorKind::Data, "train_baseline: training split is empty");
  BaselineResult result{PipelineModel(model_config, true), {}, false};
  PipelineModel& model = result.model;
  model.init(config.seed);
  Sgd opt(config.momentum, config.weight_decay);
  MetricLog log(config.log_path);
  std::vector<double> metric;
  const auto params = model.parameters();
  std::int64_t global_step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = learning_rate_at(config, epoch, config.epochs);
    auto order_rng = core::make_rng(config.seed, {0xba5e, std::uint64_t(epoch)});
    const auto order = shuffled_indices(train.size(), order_rng);
    EpochRecord rec{epoch, lr, {}, std::nullopt};
    for (std::size_t start = 0; start < order.size(); start += std::size_t(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + std::size_t(config.batch_size));
      model.zero_grad();
      LossBreakdown batch;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        auto rng = core::make_rng(config.seed, {0x5a3e, std::uint64_t(epoch), std::uint64_t(idx)});
        const LossBreakdown l = image_loss(model, train[idx], nullptr, config, rng, true, 1.0 / double(end - start));
        if (!std::isfinite(l.total()))
          fail(ErrorKind::Divergence, "non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                                          std::to_string(global_step) + " (sample " +
                                          std::to_string(train[idx].sample_id) + ")");
        batch += l;
      }
      opt.step(params, lr);
      for (const auto& p : params)
        if (!p.value->all_finite())
          fail(ErrorKind::Divergence, "parameter " + p.name + " became non-finite at epoch " + std::to_string(epoch) +
                                          ", step " + std::to_string(global_step));
      rec.mean_loss += batch;
      const double count = double(end - start);
      log.write({{"epoch", epoch},
                 {"step", global_step},
                 {"lr", lr},
                 {"loss",
                  loss_json({batch.rpn_objectness / count, batch.rpn_box / count, batch.cls / count, batch.box / count,
                             batch.mask / count, batch.positives, batch.rois})}});
      ++global_step;
    }
    const double ni = double(train.size());
    rec.mean_loss = {rec.mean_loss.rpn_objectness / ni, rec.mean_loss.rpn_box / ni, rec.mean_loss.cls / ni,
                     rec.mean_loss.box / ni, rec.mean_loss.mask / ni, rec.mean_loss.positives, rec.mean_loss.rois};
    if (eval_hook) {
      rec.val_map = eval_hook(model);
      metric.push_back(*rec.val_map);
    }
    log.write({{"epoch", epoch},
               {"epoch_loss", loss_json(rec.mean_loss)},
               {"val_map", rec.val_map ? json(*rec.val_map) : json(nullptr)}});
    result.history.push_back(rec);
    if (eval_hook && plateau_reached(metric, config.plateau_window, config.plateau_delta)) {
      result.plateaued = true;
      break;
    }
  }
  return result;
}

double validation_map(const PipelineModel& model, const std::vector<SceneSample>& val, int num_classes) {
  const auto half = eval::evaluate_per_class(
      val, num_classes, [&](const SceneSample& s) { return pipeline::baseline_inference(model, s.image); }, "baseline",
      "", "");
  return half.mean_ap().value_or(0.0);
}

pipeline::CheckpointRecord baseline_record(const BaselineResult& result, const TrainConfig& config) {
  json classes = json::array();
  for (int c = 1; c <= result.model.config.num_classes; ++c) classes.push_back({{"id", c}, {"name", synth::class_name(c)}});
  auto r = pipeline::to_record(result.model, classes);
  r.epoch = result.history.empty() ? 0 : result.history.back().epoch + 1;
  for (const auto& h : result.history)
    r.metric_history.push_back({{"epoch", h.epoch},
                                {"lr", h.learning_rate},
                                {"loss", loss_json(h.mean_loss)},
                                {"val_map", h.val_map ? json(*h.val_map) : json(nullptr)}});
  r.provenance = {{"train_config", to_json(config)}, {"plateaued", result.plateaued}};
  return r;
}

// ---------------------------------------------------------------- per-class heads

FeatureCache build_feature_cache(const PipelineModel& base, const std::vector<SceneSample>& samples,
                                 int proposals_per_image) {
  FeatureCache cache;
  cache.features.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.image.empty()) fail(ErrorKind::Data, "sample " + std::to_string(s.sample_id) + " has no image");
    cache.features.push_back(base.backbone.forward(s.image));
    if (proposals_per_image > 0)
      cache.proposals.push_back(pipeline::propose_learned(base, cache.features.back(), proposals_per_image));
    else
      cache.proposals.emplace_back();
  }
  return cache;
}

json to_json(const HeadMetrics& m) {
  return {{"class_id", m.class_id},     {"epochs", m.epochs},           {"steps", m.steps},
          {"positives_seen", m.positives_seen}, {"initial_loss", m.initial_loss}, {"final_loss", m.final_loss},
          {"epoch_loss", m.epoch_loss}};
}

namespace {

struct HeadRoi {
  Box box;
  core::BinaryMask target;
};

std::vector<HeadRoi> class_positives(const SceneSample& s, const std::vector<pipeline::Proposal>& proposals,
                                     int class_id, const TrainConfig& config, core::Rng& rng, int mask_resolution) {
  std::vector<Box> own;
  for (const auto& a : s.annotations)
    if (a.label.id == class_id) own.push_back(a.box);
  std::vector<Box> candidates = own;
  for (int d = 0; d < config.gt_jitter_draws; ++d)
    for (const auto& p : pipeline::propose_gt_jitter(own, config.gt_jitter, rng, s.width, s.height))
      candidates.push_back(p.box);
  for (const auto& p : proposals) candidates.push_back(p.box);
  std::vector<RoiTarget> pos;
  for (const auto& r : assign_rois(candidates, s, config.positive_iou))
    if (r.label == class_id) pos.push_back(r);
  shuffle(pos, rng);
  const std::size_t cap = std::size_t(std::floor(config.rois_per_image * config.positive_fraction));
  if (pos.size() > cap) pos.resize(cap);
  std::vector<HeadRoi> out;
  for (const auto& r : pos)
    out.push_back({r.box, losses::per_class_mask_loss_target(r.box, core::ClassLabel{class_id},
                                                             s.annotations[std::size_t(r.gt_index)], mask_resolution)});
  return out;
}

double probe_loss(const split::SingleClassMaskHead& head, const std::vector<std::size_t>& images,
                  const std::vector<std::vector<HeadRoi>>& probe, const FeatureCache& cache, int roi_res,
                  losses::Reduction reduction) {
  double total = 0.0;
  int n = 0;
  for (std::size_t k = 0; k < images.size(); ++k) {
    for (const auto& r : probe[k]) {
      const RoiFeature roi = pipeline::roi_align(cache.features[images[k]], r.box, roi_res);
      total += losses::mask_bce(head.logits(roi), r.target, reduction).value;
      ++n;
    }
  }
  return n > 0 ? total / n : 0.0;
}

}  // namespace

HeadMetrics train_head(split::SingleClassMaskHead& head, const std::vector<SceneSample>& samples,
                       const FeatureCache& cache, const TrainConfig& config) {
  config.validate();
  const int c = head.class_id;
  if (cache.features.size() != samples.size())
    fail(ErrorKind::InvalidArgument, "train_head: feature cache does not match the samples");
  std::vector<std::size_t> images;
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (const auto& a : samples[i].annotations)
      if (a.label.id == c) {
        images.push_back(i);
        break;
      }
  const std::string no_positives = "class " + std::to_string(c) + " (" + synth::class_name(c) +
                                   ") has no positive ROIs in the training split; inspect the dataset";
  if (images.empty()) fail(ErrorKind::Data, no_positives);
  const int roi_res = head.head.roi_resolution;
  const int m = 2 * roi_res;

  // fixed probe set for before/after loss
  std::vector<std::size_t> probe_images(images.begin(), images.begin() + std::min<std::ptrdiff_t>(64, images.size()));
  std::vector<std::vector<HeadRoi>> probe;
  {
    auto rng = core::make_rng(config.seed, {0x9b0e, std::uint64_t(c)});
    for (std::size_t i : probe_images) probe.push_back(class_positives(samples[i], cache.proposals[i], c, config, rng, m));
  }

  HeadMetrics metrics;
  metrics.class_id = c;
  metrics.epochs = config.head_epochs;
  metrics.initial_loss = probe_loss(head, probe_images, probe, cache, roi_res, config.mask_reduction);

  std::vector<pipeline::ParamSlot> params;
  head.collect(params);
  Sgd opt(config.momentum, config.weight_decay);
  for (int epoch = 0; epoch < config.head_epochs; ++epoch) {
    const double lr = learning_rate_at(config, epoch, config.head_epochs);
    auto rng = core::make_rng(config.seed, {0x4ead, std::uint64_t(c), std::uint64_t(epoch)});
    std::vector<std::size_t> order = images;
    shuffle(order, rng);
    double epoch_total = 0.0;
    int epoch_count = 0;
    for (std::size_t start = 0; start < order.size(); start += std::size_t(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + std::size_t(config.batch_size));
      std::vector<std::pair<std::size_t, HeadRoi>> batch;
      for (std::size_t k = start; k < end; ++k)
        for (auto& r : class_positives(samples[order[k]], cache.proposals[order[k]], c, config, rng, m))
          batch.emplace_back(order[k], std::move(r));
      if (batch.empty()) continue;
      for (auto& p : params) p.grad->fill(0.0f);
      const double scale = 1.0 / double(batch.size());
      for (const auto& [img, r] : batch) {
        const RoiFeature roi = pipeline::roi_align(cache.features[img], r.box, roi_res);
        pipeline::MaskHead::Trace trace;
        const Tensor logits = head.forward(roi, &trace);
        Tensor grad(logits.shape());
        const auto l = losses::mask_bce_with_logits(logits.values(), r.target, config.mask_reduction, grad.values());
        if (!std::isfinite(l.value))
          fail(ErrorKind::Divergence, "non-finite mask loss for class " + std::to_string(c) + " at epoch " +
                                          std::to_string(epoch) + ", step " + std::to_string(metrics.steps));
        epoch_total += l.value;
        ++epoch_count;
        scale_inplace(grad, scale);
        head.head.backward(trace, grad, false);
      }
      opt.step(params, lr);
      metrics.positives_seen += int(batch.size());
      ++metrics.steps;
    }
    if (epoch_count == 0) fail(ErrorKind::Data, no_positives);
    metrics.epoch_loss.push_back(epoch_total / epoch_count);
  }
  metrics.final_loss = probe_loss(head, probe_images, probe, cache, roi_res, config.mask_reduction);
  return metrics;
}

namespace {

void record_head(MaskUnoModel& model, const HeadMetrics& m, const TrainConfig& config) {
  json entry = to_json(m);
  entry["train_config"] = to_json(config);
  model.provenance.heads[std::to_string(m.class_id)] = entry;
}

}  // namespace

HeadMetrics train_class_head(MaskUnoModel& model, int class_id, const std::vector<SceneSample>& samples,
                             const FeatureCache& cache, const TrainConfig& config) {
  const HeadMetrics m = train_head(model.heads.at(class_id), samples, cache, config);
  record_head(model, m, config);
  return m;
}

std::string to_string(HeadMode mode) { return mode == HeadMode::Sequential ? "sequential" : "parallel"; }

HeadMode head_mode_from_string(const std::string& text) {
  if (text == "sequential") return HeadMode::Sequential;
  if (text == "parallel") return HeadMode::Parallel;
  fail(ErrorKind::InvalidArgument, "unknown head training mode '" + text + "' (expected sequential or parallel)");
}

std::vector<HeadMetrics> train_all_heads(MaskUnoModel& model, const std::vector<int>& classes,
                                         const std::vector<SceneSample>& samples, const FeatureCache& cache,
                                         const TrainConfig& config, HeadMode mode, int jobs) {
  for (int c : classes) model.heads.at(c);
  std::vector<HeadMetrics> metrics(classes.size());
  std::vector<std::exception_ptr> errors(classes.size());
  auto run = [&](std::size_t k) {
    try {
      metrics[k] = train_head(model.heads.at(classes[k]), samples, cache, config);
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };
  if (mode == HeadMode::Sequential) {
    for (std::size_t k = 0; k < classes.size(); ++k) {
      run(k);
      if (errors[k]) break;
    }
  } else {
    const std::size_t workers = std::min<std::size_t>(classes.size(), jobs > 0 ? std::size_t(jobs) : classes.size());
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t k = next++; k < classes.size(); k = next++) run(k);
      });
    for (auto& t : pool) t.join();
  }
  for (std::size_t k = 0; k < classes.size(); ++k) {
    if (!errors[k]) continue;
    try {
      std::rethrow_exception(errors[k]);
    } catch (const Error& e) {
      fail(e.kind(), "training head for class " + std::to_string(classes[k]) + " failed: " + e.what());
    }
  }
  for (const auto& m : metrics) record_head(model, m, config);
  return metrics;
}

// ---------------------------------------------------------------- isolation

double backward_single_mask_loss(MaskUnoModel& model, const Tensor& image, const Box& roi, int class_id,
                                 const core::BinaryMask& target, losses::Reduction reduction) {
  model.zero_grad();
  auto& base = model.base;
  const bool through_base = !model.base_frozen;
  pipeline::Backbone::Trace bt;
  const FeatureMap fm = base.backbone.forward(image, &bt);
  Tensor grad_fm(fm.data.shape());
  const auto& cfg = base.config;

  // heads that do not enter the loss still take part in the graph with zero upstream gradient
  const RoiFeature r7 = pipeline::roi_align(fm, roi, cfg.box_roi_resolution);
  pipeline::FcHead::Trace ct, bxt;
  const Tensor cls_out = base.cls.forward(r7.data, &ct);
  const Tensor box_out = base.box.forward(r7.data, &bxt);
  Tensor g7 = reshape_like(base.cls.backward(ct, Tensor(cls_out.shape()), through_base), r7.data);
  const Tensor g7b = base.box.backward(bxt, Tensor(box_out.shape()), through_base);
  const auto rpn_out = base.rpn.forward(fm);
  const Tensor grpn = base.rpn.backward(fm, rpn_out, Tensor(rpn_out.objectness.shape()),
                                        Tensor(rpn_out.deltas.shape()), through_base);

  const RoiFeature r14 = pipeline::roi_align(fm, roi, cfg.mask_roi_resolution);
  Tensor g14(r14.data.shape());
  double loss = 0.0;
  for (int c : model.heads.classes()) {
    auto& head = model.heads.at(c);
    pipeline::MaskHead::Trace trace;
    const Tensor logits = head.forward(r14, &trace);
    Tensor grad(logits.shape());
    if (c == class_id) loss = losses::mask_bce_with_logits(logits.values(), target, reduction, grad.values()).value;
    const Tensor gi = head.head.backward(trace, grad, through_base);
    if (through_base)
      for (std::size_t i = 0; i < g14.size(); ++i) g14[i] += gi[i];
  }
  if (through_base) {
    for (std::size_t i = 0; i < g7.size(); ++i) g7[i] += g7b[i];
    pipeline::roi_align_backward(fm, roi, g7, grad_fm);
    pipeline::roi_align_backward(fm, roi, g14, grad_fm);
    for (std::size_t i = 0; i < grad_fm.size(); ++i) grad_fm[i] += grpn[i];
    base.backbone.backward(bt, grad_fm);
  }
  return loss;
}

// ---------------------------------------------------------------- cascade stages

namespace {

struct StageView {
  const pipeline::ClsHead* cls;
  const pipeline::BoxHead* box;
};

Box refine_through(const std::vector<StageView>& stages, const FeatureMap& fm, Box box, int roi_res) {
  for (const auto& s : stages) {
    const RoiFeature roi = pipeline::roi_align(fm, box, roi_res);
    const auto dist = s.cls->distribution(roi);
    const auto& p = dist.probs();
    const int fg = int(std::max_element(p.begin() + 1, p.end()) - p.begin());
    box = pipeline::refine_box(box, s.box->deltas(roi)[std::size_t(fg - 1)], fm.image_width(), fm.image_height());
    if (!box.valid()) return box;
  }
  return box;
}

}  // namespace

std::vector<double> train_cascade_stage(split::CascadeModel& model, int stage_number,
                                        const std::vector<SceneSample>& samples, const FeatureCache& cache,
                                        const TrainConfig& config) {
  config.validate();
  if (stage_number < 2 || stage_number > model.num_stages())
    fail(ErrorKind::InvalidArgument, "train_cascade_stage: no stage " + std::to_string(stage_number));
  auto& stage = model.stages[std::size_t(stage_number - 2)];
  const auto& cfg = model.first.base.config;
  std::vector<StageView> before{{&model.first.base.cls, &model.first.base.box}};
  for (int s = 2; s < stage_number; ++s)
    before.push_back({&model.stages[std::size_t(s - 2)].cls, &model.stages[std::size_t(s - 2)].box});

  std::vector<pipeline::ParamSlot> params;
  stage.cls.collect(params, pipeline::SubHead::Cls, "cls");
  stage.box.collect(params, pipeline::SubHead::Box, "box");
  Sgd opt(config.momentum, config.weight_decay);
  std::vector<double> history;
  for (int epoch = 0; epoch < config.head_epochs; ++epoch) {
    const double lr = learning_rate_at(config, epoch, config.head_epochs);
    auto rng = core::make_rng(config.seed, {0xca5c, std::uint64_t(stage_number), std::uint64_t(epoch)});
    const auto order = shuffled_indices(samples.size(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += std::size_t(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + std::size_t(config.batch_size));
      for (auto& p : params) p.grad->fill(0.0f);
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        const auto& s = samples[i];
        const FeatureMap& fm = cache.features[i];
        std::vector<Box> inputs;
        for (int d = 0; d < config.gt_jitter_draws; ++d)
          for (const auto& p : pipeline::propose_gt_jitter(gt_boxes(s), config.gt_jitter, rng, s.width, s.height))
            inputs.push_back(p.box);
        for (const auto& p : cache.proposals[i]) inputs.push_back(p.box);
        std::vector<Box> refined;
        for (const Box& b : inputs) {
          const Box r = refine_through(before, fm, b, cfg.box_roi_resolution);
          if (r.valid() && r.width() >= 1.0 && r.height() >= 1.0) refined.push_back(r);
        }
        const auto rois = sample_rois(assign_rois(refined, s, stage.iou_threshold), config.rois_per_image,
                                      config.positive_fraction, rng);
        const double n = double(rois.size()), scale = 1.0 / double(end - start);
        for (const auto& r : rois) {
          const RoiFeature r7 = pipeline::roi_align(fm, r.box, cfg.box_roi_resolution);
          pipeline::FcHead::Trace ct;
          const Tensor logits = stage.cls.forward(r7.data, &ct);
          const auto dist = core::ClassDistribution::from_logits(logits.values());
          total += losses::cls_cross_entropy(dist, core::ClassLabel{r.label}).value / n;
          const auto g = losses::cls_cross_entropy_logit_grad(dist, core::ClassLabel{r.label});
          Tensor gl(logits.shape());
          for (std::size_t q = 0; q < g.size(); ++q) gl[q] = float(g[q] / n * scale);
          stage.cls.backward(ct, gl, false);
          if (r.label <= 0) continue;
          pipeline::FcHead::Trace bt;
          const Tensor deltas = stage.box.forward(r7.data, &bt);
          const core::BoxDelta t = core::encode_box_delta(s.annotations[std::size_t(r.gt_index)].box, r.box);
          const auto& w = cfg.box_delta_weights;
          const double target[4] = {t.dx * w[0], t.dy * w[1], t.dw * w[2], t.dh * w[3]};
          Tensor gd(deltas.shape());
          for (int j = 0; j < 4; ++j) {
            const std::size_t q = std::size_t(4 * (r.label - 1) + j);
            const double d = deltas[q] - target[j];
            total += losses::smooth_l1_term(d) / n;
            gd[q] = float(losses::smooth_l1_derivative(d) / n * scale);
          }
          stage.box.backward(bt, gd, false);
        }
      }
      opt.step(params, lr);
    }
    if (!std::isfinite(total))
      fail(ErrorKind::Divergence, "non-finite loss in cascade stage " + std::to_string(stage_number) + " at epoch " +
                                      std::to_string(epoch));
    history.push_back(total / double(samples.size()));
  }
  return history;
}

}  // namespace maskuno::train
