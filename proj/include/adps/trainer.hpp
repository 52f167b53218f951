#pragma once

// End-to-end orchestration: frozen teacher, trainable student + fusion +
// decoder, Adam with a piecewise-constant learning-rate schedule,
// checkpointing, inference and evaluation.
//
// Gradient routing (default): the distillation loss updates the student; the
// focal loss updates the decoder (and the fusion conv when present) but not
// the student — the similarity mask and the teacher features enter the
// segmentation graph detached. joint_backprop=true instead differentiates
// the mask, letting segmentation gradients reach the student.
//
// Framework variants: "no-teacher" feeds student features straight into the
// decoder and trains with the focal loss only; "no-student" does the same
// with frozen teacher features; "no-psm-wmb" trains distillation only and
// scores from the stage-wise coarse masks (mean of upsampled (1-W)/2).

#include <functional>
#include <string>
#include <vector>

#include "adps/archive.hpp"
#include "adps/backbone.hpp"
#include "adps/config.hpp"
#include "adps/data.hpp"
#include "adps/losses.hpp"
#include "adps/metrics.hpp"
#include "adps/nn.hpp"
#include "adps/psm.hpp"
#include "adps/synth.hpp"
#include "adps/wmb.hpp"

namespace adps::trainer {

using config::TrainConfig;
using config::Variant;

using TextureProvider = std::function<Tensor(int, int, int, std::uint64_t)>;

struct Model {
  TrainConfig cfg;
  backbone::Backbone teacher;
  backbone::Backbone student;
  psm::Psm decoder;
  wmb::Fusion fusion;
  std::string teacher_hash;
  int epoch = 0;

  bool uses_teacher() const {
    return cfg.variant == Variant::kFull || cfg.variant == Variant::kNoStudent ||
           cfg.variant == Variant::kNoPsmWmb;
  }
  bool uses_student() const { return cfg.variant != Variant::kNoStudent; }
  bool uses_decoder() const { return cfg.variant != Variant::kNoPsmWmb; }
};

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

inline Model build_model(const TrainConfig& cfg) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  const backbone::BackboneConfig bcfg = cfg.backbone_config();
  const auto mode = cfg.teacher_mode == "load-checkpoint" ? backbone::WeightsMode::kLoadCheckpoint
                                                          : backbone::WeightsMode::kRandomFrozen;
  m.teacher = backbone::build_teacher(bcfg, mode, derive_seed(cfg.seed, "teacher"),
                                      cfg.teacher_checkpoint);
  m.teacher_hash = hash_hex(m.teacher.identity_hash());
  m.student = backbone::Backbone(bcfg, derive_seed(cfg.seed, "student"),
                                 /*trainable=*/cfg.variant != Variant::kNoStudent);
  m.decoder = psm::Psm(cfg.stage_channels, cfg.stage_strides, derive_seed(cfg.seed, "psm"),
                       cfg.upblock_channels,
                       /*trainable=*/cfg.variant != Variant::kNoPsmWmb);
  m.fusion = wmb::Fusion(wmb::fusion_from_string(cfg.fusion_mode),
                         wmb::metric_from_string(cfg.mask_metric), cfg.stage_channels,
                         derive_seed(cfg.seed, "fusion"));
  return m;
}

inline std::vector<ag::Var> trainable_params(const Model& m) {
  std::vector<ag::Var> params;
  if (m.uses_student() && m.cfg.variant != Variant::kNoStudent)
    m.student.collect_trainable(params);
  if (m.uses_decoder()) m.decoder.collect_trainable(params);
  if (m.cfg.variant == Variant::kFull) m.fusion.collect_trainable(params);
  return params;
}

inline nn::Adam make_optimizer(const Model& m) { return nn::Adam(trainable_params(m)); }

// lr * factor^(number of decay epochs completed before 1-based epoch e).
inline real lr_for_epoch(const TrainConfig& cfg, int epoch_index) {
  const int e = epoch_index + 1;
  real lr = cfg.lr;
  for (int d : cfg.lr_decay_epochs)
    if (d < e) lr *= cfg.lr_decay_factor;
  return lr;
}

struct EpochLog {
  int epoch = 0;
  real distill = 0.0;
  real segmentation = 0.0;
  real total = 0.0;
  real lr = 0.0;
};

struct StepLosses {
  real distill = 0.0;
  real segmentation = 0.0;
  real total = 0.0;
};

// One optimization step on an assembled batch. Exposed so tests can drive a
// fixed batch.
inline StepLosses train_step(Model& m, nn::Adam& opt, const Tensor& images, const Tensor& gts,
                             real lr) {
  opt.zero_grad();
  ag::Var x = ag::constant(images);
  std::vector<ag::Var> t_stages, s_stages;
  if (m.uses_teacher()) t_stages = m.teacher.forward(x, /*training=*/false);
  if (m.uses_student())
    s_stages = m.student.forward_asymmetric(x, m.cfg.plan(), /*training=*/true);

  ag::Var distill;
  if (m.uses_teacher() && m.uses_student() && m.cfg.variant != Variant::kNoTeacher) {
    for (std::size_t i = 0; i < t_stages.size(); ++i) {
      Tensor y = losses::downsample_gt(gts, t_stages[i]->value.h(), t_stages[i]->value.w());
      ag::Var l = ag::distill_stage_loss(t_stages[i], s_stages[i], y);
      distill = distill ? ag::add(distill, l) : l;
    }
  }

  ag::Var seg;
  if (m.uses_decoder()) {
    std::vector<ag::Var> pyramid;
    const std::size_t stages =
        m.uses_teacher() ? t_stages.size() : s_stages.size();
    for (std::size_t i = 0; i < stages; ++i) {
      switch (m.cfg.variant) {
        case Variant::kFull:
          pyramid.push_back(m.fusion.fuse_stage(static_cast<int>(i), t_stages[i], s_stages[i],
                                                /*detach_student=*/!m.cfg.joint_backprop));
          break;
        case Variant::kNoTeacher:
          pyramid.push_back(s_stages[i]);
          break;
        case Variant::kNoStudent:
          pyramid.push_back(t_stages[i]);
          break;
        case Variant::kNoPsmWmb:
          break;
      }
    }
    ag::Var probs = m.decoder.forward(pyramid, /*training=*/true);
    seg = ag::focal_loss_probs(probs, gts, m.cfg.tau);
  }

  ag::Var total;
  if (distill && seg)
    total = ag::add_scaled(distill, seg, m.cfg.lambda);
  else if (distill)
    total = distill;
  else if (seg)
    total = ag::scale(seg, m.cfg.lambda);
  else
    throw ConfigError("train_step: variant produces no loss");

  ag::backward(total);
  opt.step(lr);

  StepLosses out;
  out.distill = distill ? distill->value[0] : 0.0;
  out.segmentation = seg ? seg->value[0] : 0.0;
  out.total = total->value[0];
  return out;
}

inline void assemble_batch(const std::vector<synth::TrainSample>& samples, Tensor& images,
                           Tensor& gts) {
  const Shape is = samples.front().image.shape();
  images = Tensor(static_cast<int>(samples.size()), is.h, is.w, is.c);
  gts = Tensor(static_cast<int>(samples.size()), is.h, is.w, 1);
  const std::size_t img_elems = is.numel();
  const std::size_t gt_elems = static_cast<std::size_t>(is.h) * is.w;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::copy(samples[i].image.data(), samples[i].image.data() + img_elems,
              images.data() + i * img_elems);
    std::copy(samples[i].gt.data(), samples[i].gt.data() + gt_elems,
              gts.data() + i * gt_elems);
  }
}

// Full training run over normal images. Deterministic per (cfg.seed, worker
// count); batches are synthesized on the fly with per-step derived seeds.
inline Model train(const std::vector<Tensor>& normals, const TrainConfig& cfg,
                   std::vector<EpochLog>* log = nullptr, TextureProvider texture = {}) {
  if (normals.empty()) throw EmptyDatasetError("train: empty training split");
  Model m = build_model(cfg);
  nn::Adam opt = make_optimizer(m);
  if (!texture)
    texture = [](int h, int w, int c, std::uint64_t s) {
      return synth::procedural_texture(h, w, c, s);
    };

  const std::uint64_t teacher_hash_before = m.teacher.identity_hash();
  std::vector<std::size_t> order(normals.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const real lr = lr_for_epoch(cfg, epoch);
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle-" + std::to_string(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(shuffle_rng.uniform_int(0, i - 1));
      std::swap(order[i - 1], order[j]);
    }

    EpochLog el;
    el.epoch = epoch + 1;
    el.lr = lr;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Tensor> batch_normals;
      batch_normals.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) batch_normals.push_back(normals[order[i]]);
      const std::uint64_t step_seed =
          derive_seed(cfg.seed, "batch-" + std::to_string(epoch) + "-" + std::to_string(start));
      auto samples = synth::make_batch(batch_normals, cfg.synth, step_seed, texture);
      Tensor images, gts;
      assemble_batch(samples, images, gts);
      const StepLosses sl = train_step(m, opt, images, gts, lr);
      if (!std::isfinite(sl.total)) throw ConfigError("train: non-finite loss");
      el.distill += sl.distill;
      el.segmentation += sl.segmentation;
      el.total += sl.total;
      ++steps;
    }
    if (steps > 0) {
      el.distill /= steps;
      el.segmentation /= steps;
      el.total /= steps;
    }
    if (log) log->push_back(el);
  }

  if (m.teacher.identity_hash() != teacher_hash_before)
    throw CheckpointError("train: teacher parameters changed during training");
  m.epoch = cfg.epochs;
  return m;
}

// ---------------------------------------------------------------------------
// Inference and evaluation
// ---------------------------------------------------------------------------

struct InferResult {
  psm::SegMask mask;
  real image_score = 0.0;
  std::vector<Tensor> coarse_masks;  // per-stage W_i (when teacher+student exist)
};

inline InferResult infer(Model& m, const Tensor& image) {
  if (image.c() != m.cfg.input_channels)
    throw ShapeError("infer: expected " + std::to_string(m.cfg.input_channels) + " channels");
  ag::Var x = ag::constant(image);
  std::vector<ag::Var> t_stages, s_stages;
  if (m.uses_teacher()) t_stages = m.teacher.forward(x, false);
  if (m.uses_student()) s_stages = m.student.forward_asymmetric(x, m.cfg.plan(), false);

  InferResult out;
  const wmb::Metric metric = wmb::metric_from_string(m.cfg.mask_metric);
  if (!t_stages.empty() && !s_stages.empty()) {
    for (std::size_t i = 0; i < t_stages.size(); ++i)
      out.coarse_masks.push_back(
          wmb::similarity_mask(t_stages[i]->value, s_stages[i]->value, metric).values);
  }

  if (m.cfg.variant == Variant::kNoPsmWmb) {
    // Stage-wise coarse anomaly map: mean of bilinearly-upsampled (1-W)/2.
    Tensor acc(1, image.h(), image.w(), 1);
    for (const Tensor& wmask : out.coarse_masks) {
      Tensor half(wmask.shape());
      for (std::size_t p = 0; p < wmask.size(); ++p) half[p] = (1.0 - wmask[p]) * 0.5;
      acc += resize_bilinear(half, image.h(), image.w());
    }
    acc *= 1.0 / static_cast<real>(out.coarse_masks.size());
    out.mask.probs = Tensor(1, image.h(), image.w(), 2);
    for (std::size_t p = 0; p < acc.size(); ++p) {
      const real v = std::min(1.0, std::max(0.0, acc[p]));
      out.mask.probs[p * 2] = 1.0 - v;
      out.mask.probs[p * 2 + 1] = v;
    }
  } else {
    std::vector<ag::Var> pyramid;
    const std::size_t stages = m.uses_teacher() ? t_stages.size() : s_stages.size();
    for (std::size_t i = 0; i < stages; ++i) {
      switch (m.cfg.variant) {
        case Variant::kFull:
          pyramid.push_back(m.fusion.fuse_stage(static_cast<int>(i), t_stages[i], s_stages[i],
                                                /*detach_student=*/true));
          break;
        case Variant::kNoTeacher:
          pyramid.push_back(s_stages[i]);
          break;
        case Variant::kNoStudent:
          pyramid.push_back(t_stages[i]);
          break;
        case Variant::kNoPsmWmb:
          break;
      }
    }
    out.mask.probs = m.decoder.forward(pyramid, /*training=*/false)->value;
  }

  out.image_score = metrics::image_score(out.mask.abnormal(), m.cfg.smooth_sigma);
  return out;
}

inline metrics::MetricsReport evaluate(Model& m, const std::vector<data::LabeledImage>& test) {
  if (test.empty()) throw EmptyDatasetError("evaluate: empty test split");
  metrics::EvalBatch batch;
  for (const data::LabeledImage& li : test) {
    InferResult r = infer(m, li.image);
    batch.anomaly_maps.push_back(r.mask.abnormal());
    batch.gts.push_back(li.gt.mask.empty() ? Tensor(1, li.image.h(), li.image.w(), 1)
                                           : li.gt.mask);
    batch.image_scores.push_back(r.image_score);
    batch.image_labels.push_back(li.label);
  }
  metrics::ReportOptions opts;
  opts.fpr_limit = m.cfg.fpr_limit;
  opts.per_image_auroc = m.cfg.per_image_auroc;
  return metrics::compute_report(batch, opts);
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline nn::NamedState checkpoint_state(Model& m) {
  nn::NamedState state = m.student.state("student");
  nn::NamedState psm_state = m.decoder.state("psm");
  state.insert(state.end(), psm_state.begin(), psm_state.end());
  nn::NamedState fusion_state = m.fusion.state("fusion");
  state.insert(state.end(), fusion_state.begin(), fusion_state.end());
  return state;
}

inline void save_checkpoint(Model& m, const std::string& path) {
  archive::json meta;
  meta["kind"] = "adps-checkpoint";
  meta["config"] = config::to_json(m.cfg);
  meta["teacher_hash"] = m.teacher_hash;
  meta["epoch"] = m.epoch;
  archive::save(path, meta, checkpoint_state(m));
}

// Rebuilds the teacher from the stored config and verifies its identity
// hash, then restores student/decoder/fusion tensors bit-exactly.
inline Model load_checkpoint(const std::string& path) {
  archive::Loaded loaded = archive::load(path);
  if (loaded.meta.value("kind", "") != "adps-checkpoint")
    throw CheckpointError("not an adps checkpoint: " + path);
  Model m = build_model(config::from_json(loaded.meta.at("config")));
  const std::string stored_hash = loaded.meta.value("teacher_hash", "");
  if (stored_hash != m.teacher_hash)
    throw CheckpointError("teacher identity mismatch: checkpoint " + stored_hash +
                          " vs rebuilt " + m.teacher_hash);
  archive::restore_state(loaded, checkpoint_state(m), "checkpoint");
  m.epoch = loaded.meta.value("epoch", 0);
  return m;
}

}  // namespace adps::trainer
