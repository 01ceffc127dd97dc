#pragma once
// One-pass evaluation: a tracker is initialized with the ground-truth box of
// the first frame, rolls forward on its own predictions, and is scored over
// every frame by overlap (Success) and center distance (Precision) AUCs.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "p2p/data.hpp"
#include "p2p/geometry.hpp"
#include "p2p/model.hpp"
#include "p2p/pointcloud.hpp"
#include "p2p/synth.hpp"

namespace p2p::eval {

// One tracked object: full scene clouds and the ground-truth box per frame.
struct EvalSequence {
  std::string id;
  std::string category = "Car";
  std::vector<PointCloud> clouds;
  std::vector<Box3D> gt;
};

inline EvalSequence eval_from_generated(const synth::GeneratedSequence& s) {
  return {s.id, s.category, s.clouds, s.gt};
}

// One evaluation sequence per tracklet, with the clouds sliced to its frames.
inline std::vector<EvalSequence> eval_from_sequence_data(const data::SequenceData& seq) {
  std::vector<EvalSequence> out;
  for (const data::Tracklet& t : seq.tracklets) {
    EvalSequence e;
    e.id = seq.id + ":" + std::to_string(t.track_id);
    e.category = t.type;
    for (size_t i = 0; i < t.boxes.size(); ++i) {
      size_t f = size_t(t.start_frame) + i;
      if (f >= seq.clouds.size()) break;
      e.clouds.push_back(seq.clouds[f]);
      e.gt.push_back(t.boxes[i]);
    }
    if (e.gt.size() >= 2) out.push_back(std::move(e));
  }
  return out;
}

// Per-frame tracker: given the scene clouds of the previous and current frame
// and the box tracked so far, produce the motion (in the previous box's frame)
// carrying it onto the current frame.
using TrackerFn = std::function<MotionDelta(const PointCloud& prev_cloud,
                                            const PointCloud& curr_cloud, const Box3D& prev_box,
                                            size_t frame)>;

// Rolls a tracker over a sequence. The first frame is the ground-truth
// initialization; every later box is the previous prediction advanced by the
// tracker's motion estimate.
inline std::vector<Box3D> track_sequence(const EvalSequence& seq, const TrackerFn& tracker) {
  if (seq.gt.empty()) throw ConfigError("cannot track an empty sequence");
  if (seq.clouds.size() != seq.gt.size()) throw ShapeMismatch("clouds/gt length mismatch");
  std::vector<Box3D> pred;
  pred.push_back(seq.gt[0]);
  for (size_t t = 1; t < seq.gt.size(); ++t) {
    MotionDelta d = tracker(seq.clouds[t - 1], seq.clouds[t], pred.back(), t);
    pred.push_back(apply_motion(pred.back(), d, MotionFrame::canonical));
  }
  return pred;
}

// Model-driven tracker. Both frames are cropped about the current track box;
// an empty crop falls back to zero motion, carrying the box.
template <class T>
TrackerFn model_tracker(model::P2PModel<T>& m, const SearchRegion& region, uint64_t seed) {
  return [&m, region, seed](const PointCloud& prev_cloud, const PointCloud& curr_cloud,
                            const Box3D& prev_box, size_t frame) -> MotionDelta {
    PointCloud prev = crop_search_region(prev_cloud, prev_box, region);
    PointCloud curr = crop_search_region(curr_cloud, prev_box, region);
    if (prev.empty() || curr.empty()) return {};
    auto [pt, ct] = model::encode_crops<T>(prev, curr, region, m.config(),
                                           derive_seed(seed, "track-frame", uint64_t(frame)));
    return m.predict(pt, ct).delta;
  };
}

// Ground-truth-anchored constant velocity reference: each frame extrapolates
// the last ground-truth motion from the last ground-truth box, with zero
// motion for the first step. Measures how predictable the motion itself is.
inline std::vector<Box3D> constant_velocity_track(const std::vector<Box3D>& gt) {
  if (gt.empty()) throw ConfigError("cannot track an empty sequence");
  std::vector<Box3D> pred;
  pred.push_back(gt[0]);
  for (size_t t = 1; t < gt.size(); ++t) {
    MotionDelta d{};
    if (t >= 2) d = relative_motion(gt[t - 2], gt[t - 1], MotionFrame::world);
    pred.push_back(apply_motion(gt[t - 1], d, MotionFrame::world));
  }
  return pred;
}

// Upper-bound tracker that lands exactly on the ground truth of every frame.
inline TrackerFn oracle_tracker(std::vector<Box3D> gt) {
  return [gt = std::move(gt)](const PointCloud&, const PointCloud&, const Box3D& prev_box,
                              size_t frame) {
    return relative_motion(prev_box, gt[frame], MotionFrame::canonical);
  };
}

// Per-frame overlap and center-distance scores of a predicted track.
struct TrackScores {
  std::vector<double> iou;
  std::vector<double> dist;
};

inline TrackScores score_track(const std::vector<Box3D>& pred, const std::vector<Box3D>& gt) {
  if (pred.size() != gt.size()) throw ShapeMismatch("pred/gt length mismatch");
  TrackScores s;
  for (size_t i = 0; i < gt.size(); ++i) {
    s.iou.push_back(iou3d(pred[i], gt[i]));
    Vec3 c = pred[i].center() - gt[i].center();
    s.dist.push_back(std::sqrt(c.x * c.x + c.y * c.y + c.z * c.z));
  }
  return s;
}

// Success: mean pass fraction over 101 overlap thresholds 0.00..1.00. Interior
// thresholds are inclusive; the final threshold is exclusive, so a perfect
// track scores 100 * 100/101.
inline double success_auc(const std::vector<double>& ious) {
  if (ious.empty()) return 0.0;
  const int n = 101;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double thr = double(i) / double(n - 1);
    size_t pass = 0;
    for (double v : ious) {
      if (i + 1 < n ? v >= thr : v > thr) ++pass;
    }
    acc += double(pass) / double(ious.size());
  }
  return 100.0 * acc / double(n);
}

// Precision: mean pass fraction over 101 center-distance thresholds
// 0.00..2.00 m, all inclusive; a zero-error track scores 100.
inline double precision_auc(const std::vector<double>& dists) {
  if (dists.empty()) return 0.0;
  const int n = 101;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double thr = 2.0 * double(i) / double(n - 1);
    size_t pass = 0;
    for (double v : dists) {
      if (v <= thr) ++pass;
    }
    acc += double(pass) / double(dists.size());
  }
  return 100.0 * acc / double(n);
}

struct OpeResult {
  double success = 0.0;
  double precision = 0.0;
  size_t frames = 0;
};

inline OpeResult ope_from_scores(const TrackScores& s) {
  return {success_auc(s.iou), precision_auc(s.dist), s.iou.size()};
}

// First-frame object point count bins: <10, 10-19, 20-29, 30-39, 40-49, >=50.
constexpr std::array<size_t, 5> kSparsityEdges = {10, 20, 30, 40, 50};
constexpr size_t kSparsityBins = kSparsityEdges.size() + 1;

inline size_t sparsity_bin(size_t first_frame_points) {
  size_t b = 0;
  while (b < kSparsityEdges.size() && first_frame_points >= kSparsityEdges[b]) ++b;
  return b;
}

inline std::string sparsity_bin_name(size_t bin) {
  if (bin == 0) return "<" + std::to_string(kSparsityEdges[0]);
  if (bin >= kSparsityEdges.size()) return ">=" + std::to_string(kSparsityEdges.back());
  return std::to_string(kSparsityEdges[bin - 1]) + "-" + std::to_string(kSparsityEdges[bin] - 1);
}

struct SequenceEval {
  std::string id;
  OpeResult ope;
  size_t first_frame_points = 0;
  size_t bin = 0;
};

struct EvalSummary {
  OpeResult overall;  // pooled over every frame of every sequence
  std::vector<SequenceEval> per_sequence;
  std::array<OpeResult, kSparsityBins> by_sparsity = {};
};

// Produces the predicted track for one sequence.
using SequenceTracker = std::function<std::vector<Box3D>(const EvalSequence&)>;

inline EvalSummary evaluate(const std::vector<EvalSequence>& seqs, const SequenceTracker& run) {
  EvalSummary sum;
  TrackScores pooled;
  std::array<TrackScores, kSparsityBins> binned;
  for (const EvalSequence& seq : seqs) {
    std::vector<Box3D> pred = run(seq);
    TrackScores s = score_track(pred, seq.gt);

    SequenceEval se;
    se.id = seq.id;
    se.ope = ope_from_scores(s);
    se.first_frame_points = count_points_in_box(seq.clouds[0], seq.gt[0]);
    se.bin = sparsity_bin(se.first_frame_points);
    sum.per_sequence.push_back(se);

    pooled.iou.insert(pooled.iou.end(), s.iou.begin(), s.iou.end());
    pooled.dist.insert(pooled.dist.end(), s.dist.begin(), s.dist.end());
    binned[se.bin].iou.insert(binned[se.bin].iou.end(), s.iou.begin(), s.iou.end());
    binned[se.bin].dist.insert(binned[se.bin].dist.end(), s.dist.begin(), s.dist.end());
  }
  sum.overall = ope_from_scores(pooled);
  for (size_t b = 0; b < kSparsityBins; ++b) sum.by_sparsity[b] = ope_from_scores(binned[b]);
  return sum;
}

template <class T>
SequenceTracker model_sequence_tracker(model::P2PModel<T>& m, uint64_t seed) {
  return [&m, seed](const EvalSequence& seq) {
    SearchRegion region = SearchRegion::for_category(seq.category);
    return track_sequence(seq, model_tracker(m, region, derive_seed(seed, "track-" + seq.id)));
  };
}

inline SequenceTracker oracle_sequence_tracker() {
  return [](const EvalSequence& seq) { return track_sequence(seq, oracle_tracker(seq.gt)); };
}

inline SequenceTracker constant_velocity_sequence_tracker() {
  return [](const EvalSequence& seq) { return constant_velocity_track(seq.gt); };
}

inline nlohmann::json ope_to_json(const OpeResult& r) {
  return {{"success", r.success}, {"precision", r.precision}, {"frames", r.frames}};
}

inline nlohmann::json summary_to_json(const EvalSummary& s) {
  nlohmann::json j;
  j["overall"] = ope_to_json(s.overall);
  j["per_sequence"] = nlohmann::json::array();
  for (const SequenceEval& e : s.per_sequence) {
    nlohmann::json je = ope_to_json(e.ope);
    je["id"] = e.id;
    je["first_frame_points"] = e.first_frame_points;
    je["sparsity_bin"] = sparsity_bin_name(e.bin);
    j["per_sequence"].push_back(je);
  }
  j["by_sparsity"] = nlohmann::json::object();
  for (size_t b = 0; b < kSparsityBins; ++b) {
    if (s.by_sparsity[b].frames) j["by_sparsity"][sparsity_bin_name(b)] = ope_to_json(s.by_sparsity[b]);
  }
  return j;
}

inline void write_summary_json(const std::string& path, const EvalSummary& s) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << summary_to_json(s).dump(2) << "\n";
}

inline void write_summary_csv(const std::string& path, const EvalSummary& s) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << "id,frames,first_frame_points,success,precision\n";
  char line[256];
  for (const SequenceEval& e : s.per_sequence) {
    std::snprintf(line, sizeof(line), "%s,%zu,%zu,%.10f,%.10f\n", e.id.c_str(), e.ope.frames,
                  e.first_frame_points, e.ope.success, e.ope.precision);
    out << line;
  }
  std::snprintf(line, sizeof(line), "overall,%zu,,%.10f,%.10f\n", s.overall.frames,
                s.overall.success, s.overall.precision);
  out << line;
}

}  // namespace p2p::eval
