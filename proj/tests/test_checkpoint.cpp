#include "p2p/checkpoint.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace p2p;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) {
  return (fs::temp_directory_path() / name).string();
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST(Checkpoint, RoundTripF64) {
  std::vector<double> w = {1.5, -2.25, 3.0};
  std::vector<double> b = {0.125, 0.0};
  std::vector<ArrayView<double>> arrays = {{"layer.weight", {3}, &w, true},
                                           {"layer.running_mean", {2}, &b, false}};
  nlohmann::json meta = {{"variant", "p2p_point"}, {"n_points", 64}};
  std::string path = tmp_path("ckpt_rt.bin");
  save_checkpoint(path, meta, arrays);

  auto loaded = load_checkpoint<double>(path);
  EXPECT_EQ(loaded.meta.at("variant"), "p2p_point");
  EXPECT_EQ(loaded.meta.at("n_points"), 64);
  ASSERT_EQ(loaded.arrays.size(), 2u);
  EXPECT_EQ(loaded.arrays[0].name, "layer.weight");
  EXPECT_EQ(loaded.arrays[0].shape, (std::vector<size_t>{3}));
  EXPECT_EQ(loaded.arrays[0].data, w);
  EXPECT_TRUE(loaded.arrays[0].trainable);
  EXPECT_FALSE(loaded.arrays[1].trainable);
  EXPECT_EQ(loaded.arrays[1].data, b);
  ASSERT_NE(loaded.find("layer.weight"), nullptr);
  EXPECT_EQ(loaded.find("nope"), nullptr);
  std::remove(path.c_str());
}

TEST(Checkpoint, RoundTripF32) {
  std::vector<float> w = {1.5f, -0.25f};
  std::vector<ArrayView<float>> arrays = {{"w", {2, 1}, &w, true}};
  std::string path = tmp_path("ckpt_f32.bin");
  save_checkpoint(path, nlohmann::json::object(), arrays);
  auto loaded = load_checkpoint<float>(path);
  EXPECT_EQ(loaded.arrays[0].data, w);
  EXPECT_EQ(loaded.arrays[0].shape, (std::vector<size_t>{2, 1}));
  std::remove(path.c_str());
}

TEST(Checkpoint, ByteStableAcrossSaves) {
  std::vector<double> w = {0.1, 0.2, 0.3, 0.4};
  std::vector<ArrayView<double>> arrays = {{"w", {2, 2}, &w, true}};
  nlohmann::json meta = {{"seed", 42}, {"epochs", 3}};
  std::string p1 = tmp_path("ckpt_a.bin"), p2 = tmp_path("ckpt_b.bin");
  save_checkpoint(p1, meta, arrays);
  save_checkpoint(p2, meta, arrays);
  EXPECT_EQ(read_bytes(p1), read_bytes(p2));

  // Load and re-save reproduces the bytes too.
  auto loaded = load_checkpoint<double>(p1);
  std::vector<ArrayView<double>> again = {
      {loaded.arrays[0].name, loaded.arrays[0].shape, &loaded.arrays[0].data,
       loaded.arrays[0].trainable}};
  std::string p3 = tmp_path("ckpt_c.bin");
  save_checkpoint(p3, loaded.meta, again);
  EXPECT_EQ(read_bytes(p1), read_bytes(p3));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
  std::remove(p3.c_str());
}

TEST(Checkpoint, Errors) {
  EXPECT_THROW(load_checkpoint<double>(tmp_path("does_not_exist.bin")), IoError);

  std::string bad = tmp_path("ckpt_bad.bin");
  {
    std::ofstream out(bad, std::ios::binary);
    out << "NOTMAGIC" << std::string(16, 'x');
  }
  EXPECT_THROW(load_checkpoint<double>(bad), IoError);
  std::remove(bad.c_str());

  std::string shorty = tmp_path("ckpt_short.bin");
  {
    std::ofstream out(shorty, std::ios::binary);
    out.write("P2PCKPT1", 8);
    uint64_t mlen = 1000;  // promises more than the file holds
    out.write(reinterpret_cast<const char*>(&mlen), 8);
    out << "{}";
  }
  EXPECT_THROW(load_checkpoint<double>(shorty), TruncatedFile);
  std::remove(shorty.c_str());

  // Payload shorter than the manifest promises.
  std::vector<double> w = {1.0, 2.0};
  std::vector<ArrayView<double>> arrays = {{"w", {2}, &w, true}};
  std::string trunc = tmp_path("ckpt_trunc.bin");
  save_checkpoint(trunc, nlohmann::json::object(), arrays);
  auto bytes = read_bytes(trunc);
  {
    std::ofstream out(trunc, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), std::streamsize(bytes.size() - 8));
  }
  EXPECT_THROW(load_checkpoint<double>(trunc), TruncatedFile);
  std::remove(trunc.c_str());

  // dtype mismatch.
  std::vector<float> wf = {1.0f};
  std::vector<ArrayView<float>> farr = {{"w", {1}, &wf, true}};
  std::string fpath = tmp_path("ckpt_dtype.bin");
  save_checkpoint(fpath, nlohmann::json::object(), farr);
  EXPECT_THROW(load_checkpoint<double>(fpath), IoError);
  std::remove(fpath.c_str());
}

TEST(Checkpoint, ShapeValidationOnSave) {
  std::vector<double> w = {1.0, 2.0, 3.0};
  std::vector<ArrayView<double>> arrays = {{"w", {2, 2}, &w, true}};
  EXPECT_THROW(save_checkpoint(tmp_path("ckpt_x.bin"), nlohmann::json::object(), arrays),
               ShapeMismatch);
}
