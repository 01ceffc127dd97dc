#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "p2p/train.hpp"

using namespace p2p;
using namespace p2p::train;
using p2p::loss::LossType;
using p2p::model::Variant;

namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("p2p_train_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<synth::GeneratedSequence> tiny_sequences(uint64_t seed, size_t n_seqs) {
  synth::GenConfig gc;
  gc.seed = seed;
  gc.n_sequences = n_seqs;
  gc.frames_lo = 4;
  gc.frames_hi = 4;
  gc.points_on_object = 96;
  gc.clutter_points = 12;
  std::vector<synth::GeneratedSequence> out;
  for (size_t i = 0; i < n_seqs; ++i) out.push_back(synth::generate_sequence(gc, i));
  return out;
}

// A pair whose current box is displaced from the previous one by a known
// canonical-frame delta, with shell points on each box.
FramePair hand_pair(const Box3D& prev, const MotionDelta& d, uint64_t seed) {
  FramePair fp;
  fp.prev_box = prev;
  fp.curr_box = apply_motion(prev, d, MotionFrame::canonical);
  Rng r1(seed), r2(seed + 1);
  fp.prev_cloud = synth::sample_box_surface(fp.prev_box, 200, r1);
  fp.curr_cloud = synth::sample_box_surface(fp.curr_box, 200, r2);
  return fp;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lr = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lr_decay_factor = 0.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lr_decay_every = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(LrSchedule, SteppedDecay) {
  TrainConfig c;  // lr 1e-4, factor 5, every 20
  EXPECT_DOUBLE_EQ(lr_for_epoch(c, 1), 1e-4);
  EXPECT_DOUBLE_EQ(lr_for_epoch(c, 20), 1e-4);
  EXPECT_DOUBLE_EQ(lr_for_epoch(c, 21), 2e-5);
  EXPECT_DOUBLE_EQ(lr_for_epoch(c, 40), 2e-5);
  EXPECT_DOUBLE_EQ(lr_for_epoch(c, 41), 4e-6);
  EXPECT_DOUBLE_EQ(lr_for_epoch(c, 60), 4e-6);

  c.lr = 0.1;
  c.lr_decay_factor = 10.0;
  c.lr_decay_every = 2;
  EXPECT_DOUBLE_EQ(lr_for_epoch(c, 2), 0.1);
  EXPECT_DOUBLE_EQ(lr_for_epoch(c, 3), 0.01);
  EXPECT_DOUBLE_EQ(lr_for_epoch(c, 5), 0.001);
}

TEST(Pairs, FromGeneratedSequences) {
  auto seqs = tiny_sequences(11, 3);
  auto pairs = pairs_from_generated(seqs);
  size_t expect = 0;
  for (const auto& s : seqs) expect += s.gt.size() - 1;
  ASSERT_EQ(pairs.size(), expect);
  for (const auto& p : pairs) {
    EXPECT_EQ(p.category, seqs[0].category);
    EXPECT_GT(p.prev_cloud.size(), 0u);
    EXPECT_GT(p.curr_cloud.size(), 0u);
  }
  // Consecutive pairs chain: curr of one pair is prev of the next within a sequence.
  EXPECT_EQ(pairs[0].curr_box.cx, pairs[1].prev_box.cx);
  EXPECT_EQ(pairs[0].curr_box.yaw, pairs[1].prev_box.yaw);
}

TEST(Pairs, FromLoadedSequenceCoversAllTracklets) {
  fs::path root = temp_dir("pairs_seq");
  synth::GenConfig gc;
  gc.seed = 5;
  gc.n_sequences = 1;
  gc.frames_lo = 5;
  gc.frames_hi = 5;
  gc.points_on_object = 64;
  gc.clutter_points = 8;
  gc.n_distractors = 1;
  synth::write_dataset(gc, root);
  data::SequenceData seq = data::load_sequence(root, "0000");
  ASSERT_EQ(seq.tracklets.size(), 2u);  // target + one static distractor
  auto pairs = pairs_from_sequence(seq);
  EXPECT_EQ(pairs.size(), 2u * 4u);
  fs::remove_all(root);
}

TEST(PrepareSample, TargetMatchesConstructionDelta) {
  Box3D prev{5.0, 2.0, -0.4, 1.8, 4.4, 1.6, 0.3};
  MotionDelta d{0.4, -0.2, 0.05, 0.1};
  FramePair fp = hand_pair(prev, d, 31);
  // Far points outside the search region must not influence anything.
  fp.prev_cloud.pts.push_back({50.0, 50.0, 0.0});
  fp.prev_cloud.intensity.push_back(0.0);
  fp.curr_cloud.pts.push_back({-60.0, 10.0, 3.0});
  fp.curr_cloud.intensity.push_back(0.0);

  ModelConfig mc = ModelConfig::tiny_point(Variant::p2p_point);
  auto s = prepare_sample<double>(fp, mc, AugmentConfig::off(), 7);
  EXPECT_NEAR(s.target.dx, d.dx, 1e-12);
  EXPECT_NEAR(s.target.dy, d.dy, 1e-12);
  EXPECT_NEAR(s.target.dz, d.dz, 1e-12);
  EXPECT_NEAR(s.target.dyaw, d.dyaw, 1e-12);

  const SearchRegion region = SearchRegion::car();
  for (const nn::Tensor<double>* t : {&s.prev, &s.curr}) {
    ASSERT_EQ(t->shape(), (std::vector<size_t>{3, mc.n_points}));
    for (size_t j = 0; j < mc.n_points; ++j) {
      EXPECT_LE(std::abs(t->data()[0 * mc.n_points + j]), region.rx);
      EXPECT_LE(std::abs(t->data()[1 * mc.n_points + j]), region.ry);
      EXPECT_LE(std::abs(t->data()[2 * mc.n_points + j]), region.rz);
    }
  }
}

TEST(PrepareSample, VoxelEncodingAndEmptyRegion) {
  Box3D prev{0.0, 0.0, 0.0, 1.8, 4.4, 1.6, 0.0};
  FramePair fp = hand_pair(prev, {0.2, 0.1, 0.0, 0.05}, 77);
  ModelConfig mc = ModelConfig::tiny_voxel();
  auto s = prepare_sample<double>(fp, mc, AugmentConfig::off(), 3);
  ASSERT_EQ(s.prev.shape(),
            (std::vector<size_t>{mc.voxel_dims[2] * 2, mc.voxel_dims[1], mc.voxel_dims[0]}));
  double occ = 0.0;
  for (size_t i = 0; i < s.prev.size(); ++i) occ += s.prev.data()[i];
  EXPECT_GT(occ, 0.0);

  // A reference box far away from every point leaves the crop empty.
  fp.prev_box.cx += 100.0;
  fp.curr_box.cx += 100.0;
  EXPECT_THROW(prepare_sample<double>(fp, mc, AugmentConfig::off(), 3),
               EmptyRegion);
}

TEST(PrepareSample, SeedDeterminism) {
  auto seqs = tiny_sequences(4, 1);
  auto pairs = pairs_from_generated(seqs);
  ASSERT_FALSE(pairs.empty());
  ModelConfig mc = ModelConfig::tiny_point(Variant::p2p_point);
  AugmentConfig aug;  // augmentation on, draws from the derived stream

  auto a = prepare_sample<double>(pairs[0], mc, aug, 42);
  auto b = prepare_sample<double>(pairs[0], mc, aug, 42);
  EXPECT_TRUE(bitwise_equal(a.prev.values(), b.prev.values()));
  EXPECT_TRUE(bitwise_equal(a.curr.values(), b.curr.values()));
  EXPECT_EQ(a.target.dx, b.target.dx);
  EXPECT_EQ(a.target.dyaw, b.target.dyaw);

  auto c = prepare_sample<double>(pairs[0], mc, aug, 43);
  EXPECT_FALSE(bitwise_equal(a.prev.values(), c.prev.values()));
}

TEST(Checkpoint, ModelRoundTrip) {
  fs::path dir = temp_dir("ckpt");
  ModelConfig mc = ModelConfig::tiny_point(Variant::p2p_point);
  mc.init_seed = 9;
  P2PModel<double> model(mc);
  // Perturb a parameter so the saved state differs from a fresh build.
  model.parameters()[0].tensor.values()[0] = 1.25;
  for (auto& b : model.buffers()) (*b.data)[0] = 0.5;

  std::string path = (dir / "m.ckpt").string();
  save_model_checkpoint(path, model, {{"note", 7}});

  ModelConfig mc2 = mc;
  mc2.init_seed = 10;  // different init, same shapes
  P2PModel<double> other(mc2);
  EXPECT_NE(other.parameters()[0].tensor.values()[0], 1.25);
  nlohmann::json meta = load_model_checkpoint(path, other);
  EXPECT_EQ(meta.at("note").get<int>(), 7);
  for (size_t i = 0; i < model.parameters().size(); ++i) {
    EXPECT_TRUE(bitwise_equal(model.parameters()[i].tensor.values(),
                              other.parameters()[i].tensor.values()));
  }
  for (size_t i = 0; i < model.buffers().size(); ++i) {
    EXPECT_TRUE(bitwise_equal(*model.buffers()[i].data, *other.buffers()[i].data));
  }

  nlohmann::json meta2;
  P2PModel<double> rebuilt = model_from_checkpoint<double>(path, &meta2);
  EXPECT_EQ(rebuilt.config().n_points, mc.n_points);
  EXPECT_EQ(meta2.at("note").get<int>(), 7);
  nn::Tensor<double> x = rebuilt.dummy_input();
  auto pa = model.predict(x, x);
  auto pb = rebuilt.predict(x, x);
  EXPECT_EQ(pa.delta.dx, pb.delta.dx);
  EXPECT_EQ(pa.delta.dyaw, pb.delta.dyaw);

  // Loading into an architecture with different shapes must fail loudly.
  ModelConfig small = ModelConfig::tiny_point(Variant::p2p_point);
  small.head_spec = {16, 8, 4, 4};
  P2PModel<double> wrong(small);
  EXPECT_THROW(load_model_checkpoint(path, wrong), ShapeMismatch);
  fs::remove_all(dir);
}

TEST(Train, DeterministicRerun) {
  auto pairs = pairs_from_generated(tiny_sequences(21, 2));
  ModelConfig mc = ModelConfig::tiny_point(Variant::p2p_point);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.lr = 1e-3;
  tc.seed = 123;

  P2PModel<double> m1(mc);
  TrainResult r1 = train_model(m1, pairs, tc);
  P2PModel<double> m2(mc);
  TrainResult r2 = train_model(m2, pairs, tc);

  ASSERT_EQ(r1.epochs.size(), 2u);
  ASSERT_EQ(r1.steps.size(), r2.steps.size());
  EXPECT_EQ(r1.steps.size(), 2u * ((pairs.size() + 3) / 4));
  for (size_t i = 0; i < r1.steps.size(); ++i) {
    EXPECT_EQ(r1.steps[i].loss, r2.steps[i].loss);
  }
  EXPECT_EQ(r1.epochs[0].mean_loss, r2.epochs[0].mean_loss);
  EXPECT_EQ(r1.epochs[1].mean_loss, r2.epochs[1].mean_loss);
  for (size_t i = 0; i < m1.parameters().size(); ++i) {
    EXPECT_TRUE(bitwise_equal(m1.parameters()[i].tensor.values(),
                              m2.parameters()[i].tensor.values()));
  }

  // A different seed must change the trajectory.
  P2PModel<double> m3(mc);
  tc.seed = 124;
  TrainResult r3 = train_model(m3, pairs, tc);
  EXPECT_NE(r1.epochs[0].mean_loss, r3.epochs[0].mean_loss);
}

TEST(Train, LossDecreasesWhenOverfittingFewPairs) {
  // Fixed, noise-free pairs with sizeable motions; full-batch steps.
  std::vector<FramePair> pairs;
  pairs.push_back(hand_pair({0, 0, 0, 1.8, 4.4, 1.6, 0.0}, {0.8, -0.4, 0.1, 0.2}, 1));
  pairs.push_back(hand_pair({2, 1, 0, 1.8, 4.4, 1.6, 0.5}, {-0.6, 0.5, -0.1, -0.15}, 2));
  pairs.push_back(hand_pair({-1, 3, 0, 1.8, 4.4, 1.6, -0.8}, {0.9, 0.3, 0.0, 0.1}, 3));

  ModelConfig mc = ModelConfig::tiny_point(Variant::p2p_point);
  P2PModel<double> model(mc);
  TrainConfig tc;
  // The uncertainty-weighted objective can park hard coordinates behind a
  // large predicted spread at high learning rates; this schedule converges
  // the residuals themselves.
  tc.epochs = 240;
  tc.batch_size = int(pairs.size());
  tc.lr = 2e-3;
  tc.lr_decay_every = 120;
  tc.augment = AugmentConfig::off();
  tc.seed = 7;

  TrainResult res = train_model(model, pairs, tc);
  ASSERT_EQ(res.epochs.size(), 240u);
  double first = res.epochs.front().mean_loss;
  double last = res.epochs.back().mean_loss;
  EXPECT_LT(last, first - 0.5);
  EXPECT_LE(res.best_loss, last + 1e-12);
  EXPECT_GT(res.best_epoch, 0);

  // The fitted model should have memorized the training targets. Inference
  // normalizes by the same per-sample statistics the objective was minimized
  // under, so predict() lands close to the target too.
  auto s = prepare_sample<double>(pairs[0], mc, AugmentConfig::off(),
                                       derive_seed(tc.seed, "sample", 40, 0));
  {
    nn::NoGradGuard ng;
    model.set_training(true);
    nn::Tensor<double> out = model.forward(s.prev, s.curr);
    EXPECT_NEAR(out.data()[0], s.target.dx, 0.25);
    EXPECT_NEAR(out.data()[1], s.target.dy, 0.25);
  }
  auto pred = model.predict(s.prev, s.curr);
  EXPECT_NEAR(pred.delta.dx, s.target.dx, 0.25);
  EXPECT_NEAR(pred.delta.dy, s.target.dy, 0.25);
}

TEST(Train, MetricsCsvAndCheckpointFiles) {
  fs::path dir = temp_dir("run");
  auto pairs = pairs_from_generated(tiny_sequences(33, 1));
  ModelConfig mc = ModelConfig::tiny_point(Variant::p2p_point);
  P2PModel<double> model(mc);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 2;
  tc.lr = 1e-3;
  tc.lr_decay_every = 2;
  tc.lr_decay_factor = 10.0;

  std::ostringstream log;
  TrainResult res = train_model(model, pairs, tc, dir.string(), &log);
  EXPECT_TRUE(fs::exists(res.best_path));
  EXPECT_TRUE(fs::exists(res.last_path));
  EXPECT_TRUE(fs::exists(res.metrics_path));
  EXPECT_NE(log.str().find("epoch 3/3"), std::string::npos);

  std::ifstream in(res.metrics_path);
  std::string line;
  ASSERT_TRUE(std::getline(in, line));
  EXPECT_EQ(line, "epoch,step,loss,lr");
  size_t rows = 0;
  while (std::getline(in, line)) {
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    int epoch = 0;
    size_t step = 0;
    double loss = 0.0, lr = 0.0;
    ASSERT_TRUE(ls >> epoch >> step >> loss >> lr);
    EXPECT_DOUBLE_EQ(lr, lr_for_epoch(tc, epoch));
    ++rows;
  }
  EXPECT_EQ(rows, res.steps.size());

  nlohmann::json meta;
  P2PModel<double> best = model_from_checkpoint<double>(res.best_path, &meta);
  EXPECT_EQ(meta.at("mean_loss").get<double>(), res.best_loss);
  EXPECT_EQ(meta.at("epoch").get<int>(), res.best_epoch);
  nlohmann::json last_meta;
  model_from_checkpoint<double>(res.last_path, &last_meta);
  EXPECT_EQ(last_meta.at("epoch").get<int>(), 3);
  fs::remove_all(dir);
}

TEST(Train, SkipsPairsWithEmptyCrops) {
  auto pairs = pairs_from_generated(tiny_sequences(44, 1));
  size_t good = pairs.size();
  FramePair far = pairs[0];
  far.prev_box.cx += 500.0;  // crop about this box catches nothing
  far.curr_box.cx += 500.0;
  pairs.push_back(far);

  ModelConfig mc = ModelConfig::tiny_point(Variant::p2p_point);
  P2PModel<double> model(mc);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  TrainResult res = train_model(model, pairs, tc);
  ASSERT_EQ(res.epochs.size(), 1u);
  EXPECT_EQ(res.epochs[0].skipped, 1u);
  EXPECT_EQ(res.epochs[0].samples, good);
}

TEST(Train, EarlyStopOnDivergence) {
  auto pairs = pairs_from_generated(tiny_sequences(55, 1));
  ModelConfig mc = ModelConfig::tiny_point(Variant::p2p_point);
  P2PModel<double> model(mc);
  TrainConfig tc;
  tc.epochs = 10;
  tc.batch_size = 2;
  tc.lr = 5.0;  // deliberately destructive step size
  tc.loss.type = LossType::l1;
  tc.early_stop_patience = 1;
  tc.augment = AugmentConfig::off();

  TrainResult res = train_model(model, pairs, tc);
  EXPECT_TRUE(res.early_stopped);
  EXPECT_LT(res.epochs.size(), 10u);
  EXPECT_EQ(res.epochs.size(), size_t(res.best_epoch + tc.early_stop_patience));
}

TEST(Train, ErrorsOnBadInput) {
  ModelConfig mc = ModelConfig::tiny_point(Variant::p2p_point);
  P2PModel<double> model(mc);
  TrainConfig tc;
  EXPECT_THROW(train_model(model, {}, tc), ConfigError);
  tc.epochs = -1;
  auto pairs = pairs_from_generated(tiny_sequences(66, 1));
  EXPECT_THROW(train_model(model, pairs, tc), ConfigError);
}
