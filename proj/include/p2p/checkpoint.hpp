#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "p2p/common.hpp"

namespace p2p {

// Container layout: 8-byte magic, u64 little-endian manifest length, manifest
// JSON, then raw little-endian scalar payload in manifest order. No timestamps
// or other varying fields, so identical state produces identical bytes.
namespace ckpt {

constexpr char kMagic[8] = {'P', '2', 'P', 'C', 'K', 'P', 'T', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written as native little-endian");

template <class T>
const char* dtype_name() {
  if constexpr (sizeof(T) == 4) return "f32";
  else return "f64";
}

}  // namespace ckpt

template <class T>
struct ArrayView {
  std::string name;
  std::vector<size_t> shape;
  const std::vector<T>* data = nullptr;
  bool trainable = true;
};

template <class T>
struct LoadedArray {
  std::string name;
  std::vector<size_t> shape;
  std::vector<T> data;
  bool trainable = true;
};

template <class T>
struct LoadedCheckpoint {
  nlohmann::json meta;
  std::vector<LoadedArray<T>> arrays;

  const LoadedArray<T>* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
};

template <class T>
inline void save_checkpoint(const std::string& path, const nlohmann::json& meta,
                            const std::vector<ArrayView<T>>& arrays) {
  nlohmann::json manifest;
  manifest["format"] = 1;
  manifest["dtype"] = ckpt::dtype_name<T>();
  manifest["meta"] = meta;
  manifest["arrays"] = nlohmann::json::array();
  for (const auto& a : arrays) {
    size_t total = 1;
    for (size_t d : a.shape) total *= d;
    if (!a.data || a.data->size() != total)
      throw ShapeMismatch("array " + a.name + " does not match its shape");
    manifest["arrays"].push_back({{"name", a.name},
                                  {"shape", a.shape},
                                  {"count", total},
                                  {"trainable", a.trainable}});
  }
  std::string mstr = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(ckpt::kMagic, 8);
  uint64_t mlen = mstr.size();
  out.write(reinterpret_cast<const char*>(&mlen), 8);
  out.write(mstr.data(), std::streamsize(mstr.size()));
  for (const auto& a : arrays)
    out.write(reinterpret_cast<const char*>(a.data->data()),
              std::streamsize(a.data->size() * sizeof(T)));
  if (!out) throw IoError("write failed for " + path);
}

template <class T>
inline LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8) throw TruncatedFile(path + ": missing header");
  if (std::memcmp(magic, ckpt::kMagic, 8) != 0) throw IoError(path + ": bad magic");
  uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), 8);
  if (in.gcount() != 8) throw TruncatedFile(path + ": missing manifest length");
  std::string mstr(mlen, '\0');
  in.read(mstr.data(), std::streamsize(mlen));
  if (uint64_t(in.gcount()) != mlen) throw TruncatedFile(path + ": manifest cut short");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mstr);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": manifest parse error: " + e.what());
  }
  if (manifest.value("dtype", "") != ckpt::dtype_name<T>())
    throw IoError(path + ": dtype is " + manifest.value("dtype", "?") + ", expected " +
                  ckpt::dtype_name<T>());

  LoadedCheckpoint<T> out;
  out.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& ja : manifest.at("arrays")) {
    LoadedArray<T> a;
    a.name = ja.at("name").get<std::string>();
    a.shape = ja.at("shape").get<std::vector<size_t>>();
    a.trainable = ja.value("trainable", true);
    size_t count = ja.at("count").get<size_t>();
    a.data.resize(count);
    in.read(reinterpret_cast<char*>(a.data.data()), std::streamsize(count * sizeof(T)));
    if (size_t(in.gcount()) != count * sizeof(T))
      throw TruncatedFile(path + ": payload cut short at array " + a.name);
    out.arrays.push_back(std::move(a));
  }
  return out;
}

}  // namespace p2p
