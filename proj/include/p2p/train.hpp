#pragma once
// Training: consecutive-frame pair extraction, sample preparation, the
// optimization loop with a stepped learning-rate schedule, metrics, and
// model checkpointing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <ostream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "p2p/augment.hpp"
#include "p2p/checkpoint.hpp"
#include "p2p/data.hpp"
#include "p2p/loss.hpp"
#include "p2p/model.hpp"
#include "p2p/optim.hpp"
#include "p2p/pointcloud.hpp"
#include "p2p/synth.hpp"

namespace p2p::train {

using augment::AugmentConfig;
using loss::LossConfig;
using model::ModelConfig;
using model::P2PModel;
using nn::Tensor;

// One supervised example: the full scene clouds of two consecutive frames and
// the tracked box in each.
struct FramePair {
  PointCloud prev_cloud;
  PointCloud curr_cloud;
  Box3D prev_box;
  Box3D curr_box;
  std::string category = "Car";
};

inline std::vector<FramePair> pairs_from_generated(
    const std::vector<synth::GeneratedSequence>& seqs) {
  std::vector<FramePair> out;
  for (const synth::GeneratedSequence& s : seqs) {
    for (size_t f = 1; f < s.gt.size(); ++f) {
      out.push_back({s.clouds[f - 1], s.clouds[f], s.gt[f - 1], s.gt[f], s.category});
    }
  }
  return out;
}

inline std::vector<FramePair> pairs_from_sequence(const data::SequenceData& seq) {
  std::vector<FramePair> out;
  for (const data::Tracklet& t : seq.tracklets) {
    for (size_t i = 1; i < t.boxes.size(); ++i) {
      size_t f = size_t(t.start_frame) + i;
      if (f >= seq.clouds.size()) break;
      out.push_back({seq.clouds[f - 1], seq.clouds[f], t.boxes[i - 1], t.boxes[i], t.type});
    }
  }
  return out;
}

struct TrainConfig {
  int epochs = 60;
  int batch_size = 8;
  double lr = 1e-4;
  double lr_decay_factor = 5.0;
  int lr_decay_every = 20;      // epochs between step-downs
  double weight_decay = 1e-2;
  int early_stop_patience = 0;  // epochs without a new best; 0 disables
  uint64_t seed = 1;
  LossConfig loss;
  AugmentConfig augment;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (lr <= 0.0) throw ConfigError("lr must be positive");
    if (lr_decay_factor < 1.0) throw ConfigError("lr_decay_factor must be >= 1");
    if (lr_decay_every < 1) throw ConfigError("lr_decay_every must be >= 1");
    if (early_stop_patience < 0) throw ConfigError("early_stop_patience must be >= 0");
  }
};

// Epochs are 1-based; the rate steps down by the decay factor every
// lr_decay_every epochs.
inline double lr_for_epoch(const TrainConfig& cfg, int epoch) {
  int steps = (epoch - 1) / cfg.lr_decay_every;
  return cfg.lr / std::pow(cfg.lr_decay_factor, double(steps));
}

// Model-ready sample: encoded inputs plus the regression target expressed in
// the previous box's frame.
template <class T>
struct PreparedSample {
  Tensor<T> prev;
  Tensor<T> curr;
  MotionDelta target;
};

// Crops both frames around the previous box, augments the pair, and encodes
// the crops for the given model family. Point variants are resampled to a
// fixed budget; the voxel variant is rasterized over the search region.
// Throws EmptyRegion when either crop contains no points.
template <class T>
PreparedSample<T> prepare_sample(const FramePair& pair, const ModelConfig& mc,
                                 const AugmentConfig& aug, uint64_t seed) {
  const SearchRegion region = SearchRegion::for_category(pair.category);
  PointCloud prev = crop_search_region(pair.prev_cloud, pair.prev_box, region);
  PointCloud curr = crop_search_region(pair.curr_cloud, pair.prev_box, region);
  if (prev.empty()) throw EmptyRegion("previous crop is empty");
  if (curr.empty()) throw EmptyRegion("current crop is empty");

  Box3D prev_box = to_canonical_box(pair.prev_box, pair.prev_box);
  Box3D curr_box = to_canonical_box(pair.curr_box, pair.prev_box);

  Rng rng(derive_seed(seed, "augment"));
  augment::augment_pair(prev, prev_box, curr, curr_box, aug, rng);

  PreparedSample<T> s;
  s.target = relative_motion(prev_box, curr_box, MotionFrame::canonical);
  std::tie(s.prev, s.curr) = model::encode_crops<T>(prev, curr, region, mc, seed);
  return s;
}

// Serializes every parameter and buffer next to the model configuration, so a
// checkpoint is loadable without outside knowledge of the architecture.
template <class T>
inline void save_model_checkpoint(const std::string& path, P2PModel<T>& model,
                                  nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json meta = std::move(extra);
  meta["config"] = model.config();
  std::vector<ArrayView<T>> arrays;
  for (auto& p : model.parameters())
    arrays.push_back({p.name, p.tensor.shape(), &p.tensor.values()});
  for (auto& b : model.buffers()) arrays.push_back({b.name, b.shape, b.data});
  save_checkpoint(path, meta, arrays);
}

// Restores parameters and buffers into an existing model; every stored array
// must match a model array in name and shape. Returns the stored metadata.
template <class T>
inline nlohmann::json load_model_checkpoint(const std::string& path, P2PModel<T>& model) {
  LoadedCheckpoint<T> lc = load_checkpoint<T>(path);
  size_t used = 0;
  for (auto& p : model.parameters()) {
    const LoadedArray<T>* a = lc.find(p.name);
    if (!a) throw IoError(path + ": missing array " + p.name);
    if (a->shape != p.tensor.shape()) throw ShapeMismatch(path + ": shape mismatch for " + p.name);
    p.tensor.values() = a->data;
    ++used;
  }
  for (auto& b : model.buffers()) {
    const LoadedArray<T>* a = lc.find(b.name);
    if (!a) throw IoError(path + ": missing array " + b.name);
    if (a->shape != b.shape) throw ShapeMismatch(path + ": shape mismatch for " + b.name);
    *b.data = a->data;
    ++used;
  }
  if (used != lc.arrays.size()) throw IoError(path + ": checkpoint holds extra arrays");
  return lc.meta;
}

// Builds the model described by the checkpoint's stored configuration, then
// loads the weights into it.
template <class T>
inline P2PModel<T> model_from_checkpoint(const std::string& path,
                                         nlohmann::json* meta_out = nullptr) {
  LoadedCheckpoint<T> lc = load_checkpoint<T>(path);
  if (!lc.meta.contains("config")) throw IoError(path + ": checkpoint has no model config");
  P2PModel<T> model(lc.meta.at("config").template get<ModelConfig>());
  nlohmann::json meta = load_model_checkpoint(path, model);
  if (meta_out) *meta_out = std::move(meta);
  return model;
}

struct StepRecord {
  int epoch = 0;
  size_t step = 0;  // global optimizer step, 1-based
  double loss = 0.0;
  double lr = 0.0;
};

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
  size_t samples = 0;
  size_t skipped = 0;
};

struct TrainResult {
  std::vector<EpochStats> epochs;
  std::vector<StepRecord> steps;
  int best_epoch = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  bool early_stopped = false;
  std::string best_path;  // empty when no out_dir was given
  std::string last_path;
  std::string metrics_path;
};

namespace detail {

inline void shuffle_indices(std::vector<size_t>& idx, Rng& rng) {
  for (size_t i = idx.size(); i > 1; --i) {
    size_t j = size_t(rng.uniform_index(i));
    std::swap(idx[i - 1], idx[j]);
  }
}

inline void write_metrics_csv(const std::string& path, const std::vector<StepRecord>& steps) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << "epoch,step,loss,lr\n";
  char line[128];
  for (const StepRecord& r : steps) {
    std::snprintf(line, sizeof(line), "%d,%zu,%.17g,%.17g\n", r.epoch, r.step, r.loss, r.lr);
    out << line;
  }
}

}  // namespace detail

// Full optimization run. Pair order is reshuffled per epoch, augmentation and
// resampling draw from per-(epoch, pair) derived seeds, and each optimizer
// step averages the loss over its batch. Pairs whose crop comes up empty are
// skipped and counted. With an out_dir, writes best.ckpt (lowest epoch mean
// loss), last.ckpt, and metrics.csv there.
template <class T>
TrainResult train_model(P2PModel<T>& model, const std::vector<FramePair>& pairs,
                        const TrainConfig& cfg, const std::string& out_dir = "",
                        std::ostream* log = nullptr) {
  cfg.validate();
  if (pairs.empty()) throw ConfigError("no training pairs");

  TrainResult res;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    res.best_path = (std::filesystem::path(out_dir) / "best.ckpt").string();
    res.last_path = (std::filesystem::path(out_dir) / "last.ckpt").string();
    res.metrics_path = (std::filesystem::path(out_dir) / "metrics.csv").string();
  }

  nn::AdamW<T> opt({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  std::vector<size_t> order(pairs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  size_t global_step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = lr_for_epoch(cfg, epoch);
    opt.config().lr = lr;
    Rng order_rng(derive_seed(cfg.seed, "epoch-order", uint64_t(epoch)));
    detail::shuffle_indices(order, order_rng);

    model.set_training(true);
    EpochStats st;
    st.epoch = epoch;
    st.lr = lr;
    double loss_sum = 0.0;

    for (size_t begin = 0; begin < order.size(); begin += size_t(cfg.batch_size)) {
      const size_t end = std::min(order.size(), begin + size_t(cfg.batch_size));
      std::vector<Tensor<T>> terms;
      for (size_t k = begin; k < end; ++k) {
        const size_t pi = order[k];
        const uint64_t s = derive_seed(cfg.seed, "sample", uint64_t(epoch), uint64_t(pi));
        PreparedSample<T> ps;
        try {
          ps = prepare_sample<T>(pairs[pi], model.config(), cfg.augment, s);
        } catch (const EmptyRegion&) {
          ++st.skipped;
          continue;
        }
        Tensor<T> out = model.forward(ps.prev, ps.curr);
        terms.push_back(loss::motion_loss(out, ps.target, cfg.loss));
      }
      if (terms.empty()) continue;

      Tensor<T> batch_loss = terms[0];
      for (size_t i = 1; i < terms.size(); ++i) batch_loss = nn::add(batch_loss, terms[i]);
      batch_loss = nn::mul_scalar(batch_loss, T(1.0 / double(terms.size())));

      model.zero_grad();
      nn::backward(batch_loss);
      opt.step(model.parameters());
      ++global_step;

      const double lv = double(batch_loss.item());
      loss_sum += lv * double(terms.size());
      st.samples += terms.size();
      res.steps.push_back({epoch, global_step, lv, lr});
    }

    st.mean_loss =
        st.samples ? loss_sum / double(st.samples) : std::numeric_limits<double>::quiet_NaN();
    res.epochs.push_back(st);
    if (log) {
      (*log) << "epoch " << epoch << "/" << cfg.epochs << " loss " << st.mean_loss << " lr "
             << lr << " samples " << st.samples
             << (st.skipped ? " skipped " + std::to_string(st.skipped) : "") << "\n";
    }

    const bool improved = st.samples > 0 && st.mean_loss < res.best_loss;
    if (improved) {
      res.best_loss = st.mean_loss;
      res.best_epoch = epoch;
      if (!res.best_path.empty()) {
        save_model_checkpoint(res.best_path, model,
                              {{"epoch", epoch}, {"mean_loss", st.mean_loss}});
      }
    }
    if (!res.last_path.empty()) {
      save_model_checkpoint(res.last_path, model,
                            {{"epoch", epoch}, {"mean_loss", st.mean_loss}});
    }
    if (cfg.early_stop_patience > 0 && res.best_epoch > 0 &&
        epoch - res.best_epoch >= cfg.early_stop_patience) {
      res.early_stopped = true;
      break;
    }
  }

  if (!res.metrics_path.empty()) detail::write_metrics_csv(res.metrics_path, res.steps);
  return res;
}

}  // namespace p2p::train
