#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "p2p/geometry.hpp"
#include "p2p/nn.hpp"
#include "p2p/optim.hpp"
#include "p2p/pointcloud.hpp"

namespace p2p::model {

using nn::Parameter;
using nn::Tensor;

enum class Variant { p2p_point, p2p_voxel, ablate_merged, ablate_temporal, ablate_dual_concat };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::p2p_point: return "p2p_point";
    case Variant::p2p_voxel: return "p2p_voxel";
    case Variant::ablate_merged: return "ablate_merged";
    case Variant::ablate_temporal: return "ablate_temporal";
    case Variant::ablate_dual_concat: return "ablate_dual_concat";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& s) {
  for (Variant v : {Variant::p2p_point, Variant::p2p_voxel, Variant::ablate_merged,
                    Variant::ablate_temporal, Variant::ablate_dual_concat})
    if (variant_name(v) == s) return v;
  throw ConfigError("unknown variant: " + s);
}

inline bool is_point_variant(Variant v) { return v != Variant::p2p_voxel; }

struct VoxelNeckStage {
  size_t channels = 0;
  size_t stride = 1;
  size_t repeats = 1;
};

inline void to_json(nlohmann::json& j, const VoxelNeckStage& s) {
  j = {{"channels", s.channels}, {"stride", s.stride}, {"repeats", s.repeats}};
}

inline void from_json(const nlohmann::json& j, VoxelNeckStage& s) {
  s.channels = j.at("channels").get<size_t>();
  s.stride = j.at("stride").get<size_t>();
  s.repeats = j.at("repeats").get<size_t>();
}

struct ModelConfig {
  Variant variant = Variant::p2p_point;
  bool probabilistic_head = true;  // head also emits per-dim log-scales
  bool weight_shared_backbone = true;
  bool mixer_spatial_first = true;  // mixer stage order: spatial-axis convs, then channel-axis
  uint64_t init_seed = 1;

  size_t n_points = 1024;
  std::vector<size_t> point_embed_channels = {64, 128, 256, 1024};
  std::vector<size_t> neck_spatial = {64, 128, 256};
  size_t neck_repeats = 2;
  std::vector<size_t> head_spec = {512, 256, 128, 4};

  std::array<size_t, 3> voxel_dims = {128, 128, 20};  // nx, ny, nz
  std::vector<size_t> voxel_embed_channels = {32, 64, 128};
  std::vector<size_t> voxel_embed_strides = {2, 2, 2};
  std::vector<VoxelNeckStage> voxel_neck = {{256, 1, 3}, {512, 2, 3}, {1024, 2, 3}};

  size_t feature_channels() const { return point_embed_channels.back(); }
  size_t out_dim() const { return probabilistic_head ? 8 : 4; }

  void validate() const {
    if (point_embed_channels.empty()) throw ConfigError("empty point embed ladder");
    if (head_spec.empty() || head_spec.back() != 4)
      throw ConfigError("head spec must end in 4 output dims");
    if (n_points == 0) throw ConfigError("n_points must be positive");
    if (neck_repeats == 0) throw ConfigError("neck repeats must be positive");
    if (variant == Variant::p2p_point && neck_spatial.empty())
      throw ConfigError("point neck needs at least one stage");
    if (variant == Variant::p2p_voxel) {
      if (voxel_embed_channels.empty() || voxel_neck.empty())
        throw ConfigError("voxel model needs embed and neck stages");
      if (voxel_embed_strides.size() != voxel_embed_channels.size())
        throw ConfigError("voxel embed strides must match embed channels");
      for (size_t d : voxel_dims)
        if (d == 0) throw ConfigError("voxel dims must be positive");
      for (const auto& st : voxel_neck)
        if (st.channels == 0 || st.stride == 0 || st.repeats == 0)
          throw ConfigError("invalid voxel neck stage");
    }
  }

  static ModelConfig table_point(Variant v = Variant::p2p_point) {
    ModelConfig c;
    c.variant = v;
    return c;
  }

  static ModelConfig table_voxel() {
    ModelConfig c;
    c.variant = Variant::p2p_voxel;
    c.point_embed_channels = {64, 128, 256, 1024};  // feature width still 1024
    return c;
  }

  // Small configuration that trains in seconds on one core.
  static ModelConfig desk_point(Variant v = Variant::p2p_point) {
    ModelConfig c;
    c.variant = v;
    c.n_points = 128;
    c.point_embed_channels = {32, 64, 128};
    c.neck_spatial = {8, 16, 32};
    c.head_spec = {64, 32, 16, 4};
    return c;
  }

  static ModelConfig desk_voxel() {
    ModelConfig c;
    c.variant = Variant::p2p_voxel;
    c.point_embed_channels = {32, 64, 128};
    c.voxel_dims = {32, 32, 8};
    c.voxel_embed_channels = {16, 32, 64};
    c.voxel_embed_strides = {2, 2, 1};
    c.voxel_neck = {{64, 1, 2}, {128, 2, 2}};
    c.head_spec = {64, 32, 16, 4};
    return c;
  }

  // Gradcheck sizes: small enough for exhaustive finite differences.
  static ModelConfig tiny_point(Variant v = Variant::p2p_point) {
    ModelConfig c;
    c.variant = v;
    c.n_points = 64;
    c.point_embed_channels = {8, 16, 64};
    c.neck_spatial = {8, 16, 32};
    c.head_spec = {32, 16, 8, 4};
    return c;
  }

  static ModelConfig tiny_voxel() {
    ModelConfig c;
    c.variant = Variant::p2p_voxel;
    c.point_embed_channels = {8, 16, 64};
    c.voxel_dims = {16, 16, 8};
    c.voxel_embed_channels = {8, 16, 32};
    c.voxel_embed_strides = {2, 2, 1};
    c.voxel_neck = {{32, 1, 2}, {64, 2, 2}};
    c.head_spec = {32, 16, 8, 4};
    return c;
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"variant", variant_name(c.variant)},
       {"probabilistic_head", c.probabilistic_head},
       {"weight_shared_backbone", c.weight_shared_backbone},
       {"mixer_spatial_first", c.mixer_spatial_first},
       {"init_seed", c.init_seed},
       {"n_points", c.n_points},
       {"point_embed_channels", c.point_embed_channels},
       {"neck_spatial", c.neck_spatial},
       {"neck_repeats", c.neck_repeats},
       {"head_spec", c.head_spec},
       {"voxel_dims", c.voxel_dims},
       {"voxel_embed_channels", c.voxel_embed_channels},
       {"voxel_embed_strides", c.voxel_embed_strides},
       {"voxel_neck", c.voxel_neck}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.variant = variant_from_name(j.at("variant").get<std::string>());
  c.probabilistic_head = j.at("probabilistic_head").get<bool>();
  c.weight_shared_backbone = j.at("weight_shared_backbone").get<bool>();
  c.mixer_spatial_first = j.at("mixer_spatial_first").get<bool>();
  c.init_seed = j.at("init_seed").get<uint64_t>();
  c.n_points = j.at("n_points").get<size_t>();
  c.point_embed_channels = j.at("point_embed_channels").get<std::vector<size_t>>();
  c.neck_spatial = j.at("neck_spatial").get<std::vector<size_t>>();
  c.neck_repeats = j.at("neck_repeats").get<size_t>();
  c.head_spec = j.at("head_spec").get<std::vector<size_t>>();
  c.voxel_dims = j.at("voxel_dims").get<std::array<size_t, 3>>();
  c.voxel_embed_channels = j.at("voxel_embed_channels").get<std::vector<size_t>>();
  c.voxel_embed_strides = j.at("voxel_embed_strides").get<std::vector<size_t>>();
  c.voxel_neck = j.at("voxel_neck").get<std::vector<VoxelNeckStage>>();
}

template <class T>
struct BufferRef {
  std::string name;
  std::vector<size_t> shape;
  std::vector<T>* data = nullptr;
};

namespace layers {

template <class T>
inline Tensor<T> init_kaiming(Rng& rng, std::vector<size_t> shape, size_t fan_in) {
  size_t total = 1;
  for (size_t d : shape) total *= d;
  double bound = std::sqrt(6.0 / double(fan_in));
  std::vector<T> v(total);
  for (auto& x : v) x = T(rng.uniform(-bound, bound));
  return Tensor<T>::from_data(std::move(shape), std::move(v)).set_requires_grad(true);
}

template <class T>
struct Conv1dLayer {
  Tensor<T> w, b;
  size_t stride = 1, pad = 0;

  void build(Rng& rng, size_t cout, size_t cin, size_t k, bool zero_init = false) {
    if (zero_init)
      w = Tensor<T>::zeros({cout, cin, k}).set_requires_grad(true);
    else
      w = init_kaiming<T>(rng, {cout, cin, k}, cin * k);
    b = Tensor<T>::zeros({cout}).set_requires_grad(true);
  }
  Tensor<T> forward(const Tensor<T>& x) const { return nn::conv1d(x, w, b, stride, pad); }
  void collect(const std::string& prefix, std::vector<Parameter<T>>& out) {
    out.push_back({prefix + ".w", w, true});
    out.push_back({prefix + ".b", b, true});
  }
};

template <class T>
struct Conv2dLayer {
  Tensor<T> w, b;
  size_t stride = 1, pad = 0;

  void build(Rng& rng, size_t cout, size_t cin, size_t k) {
    w = init_kaiming<T>(rng, {cout, cin, k, k}, cin * k * k);
    b = Tensor<T>::zeros({cout}).set_requires_grad(true);
  }
  Tensor<T> forward(const Tensor<T>& x) const { return nn::conv2d(x, w, b, stride, pad); }
  void collect(const std::string& prefix, std::vector<Parameter<T>>& out) {
    out.push_back({prefix + ".w", w, true});
    out.push_back({prefix + ".b", b, true});
  }
};

template <class T>
struct DenseLayer {
  Tensor<T> w, b;

  void build(Rng& rng, size_t in, size_t out, bool zero_init = false) {
    if (zero_init)
      w = Tensor<T>::zeros({in, out}).set_requires_grad(true);
    else
      w = init_kaiming<T>(rng, {in, out}, in);
    b = Tensor<T>::zeros({out}).set_requires_grad(true);
  }
  Tensor<T> forward(const Tensor<T>& x) const { return nn::linear(x, w, b); }
  void collect(const std::string& prefix, std::vector<Parameter<T>>& out) {
    out.push_back({prefix + ".w", w, true});
    out.push_back({prefix + ".b", b, true});
  }
};

template <class T>
struct BatchNormLayer {
  Tensor<T> gamma, beta;
  std::vector<T> run_mean, run_var;

  void build(size_t channels) {
    gamma = Tensor<T>::full({channels}, T(1)).set_requires_grad(true);
    beta = Tensor<T>::zeros({channels}).set_requires_grad(true);
    run_mean.assign(channels, T(0));
    run_var.assign(channels, T(1));
  }
  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return nn::batch_norm(x, gamma, beta, run_mean, run_var, training);
  }
  void collect(const std::string& prefix, std::vector<Parameter<T>>& out) {
    out.push_back({prefix + ".gamma", gamma, true});
    out.push_back({prefix + ".beta", beta, true});
  }
  void collect_buffers(const std::string& prefix, std::vector<BufferRef<T>>& out) {
    out.push_back({prefix + ".run_mean", {run_mean.size()}, &run_mean});
    out.push_back({prefix + ".run_var", {run_var.size()}, &run_var});
  }
};

// Conv1d k=1 -> BN -> ReLU.
template <class T>
struct ConvBnRelu1d {
  Conv1dLayer<T> conv;
  BatchNormLayer<T> bn;

  void build(Rng& rng, size_t cout, size_t cin) {
    conv.build(rng, cout, cin, 1);
    bn.build(cout);
  }
  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return nn::relu(bn.forward(conv.forward(x), training));
  }
  void collect(const std::string& p, std::vector<Parameter<T>>& out) {
    conv.collect(p + ".conv", out);
    bn.collect(p + ".bn", out);
  }
  void collect_buffers(const std::string& p, std::vector<BufferRef<T>>& out) {
    bn.collect_buffers(p + ".bn", out);
  }
};

// Conv2d 3x3 (pad 1) -> BN -> ReLU.
template <class T>
struct ConvBnRelu2d {
  Conv2dLayer<T> conv;
  BatchNormLayer<T> bn;

  void build(Rng& rng, size_t cout, size_t cin, size_t stride) {
    conv.stride = stride;
    conv.pad = 1;
    conv.build(rng, cout, cin, 3);
    bn.build(cout);
  }
  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return nn::relu(bn.forward(conv.forward(x), training));
  }
  void collect(const std::string& p, std::vector<Parameter<T>>& out) {
    conv.collect(p + ".conv", out);
    bn.collect(p + ".bn", out);
  }
  void collect_buffers(const std::string& p, std::vector<BufferRef<T>>& out) {
    bn.collect_buffers(p + ".bn", out);
  }
};

}  // namespace layers

struct MotionPrediction {
  MotionDelta delta;
  std::array<double, 4> log_sigma = {0, 0, 0, 0};
  bool probabilistic = false;
};

using ShapeTrace = std::vector<std::pair<std::string, std::vector<size_t>>>;

// Two-frame relative-motion regressor. Point variants consume [3, n_points] per
// frame; the voxel variant consumes a height-folded occupancy grid per frame.
template <class T>
class P2PModel {
 public:
  explicit P2PModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(derive_seed(cfg_.init_seed, "model-init"));
    if (is_point_variant(cfg_.variant)) {
      build_point(rng);
    } else {
      build_voxel(rng);
    }
    collect_all();
  }

  const ModelConfig& config() const { return cfg_; }
  void set_training(bool t) { training_ = t; }
  bool training() const { return training_; }

  std::vector<Parameter<T>>& parameters() { return params_; }
  std::vector<BufferRef<T>>& buffers() { return buffers_; }

  size_t param_count() const {
    size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // Raw head output [1, 4] or [1, 8] with the graph attached.
  Tensor<T> forward(const Tensor<T>& prev, const Tensor<T>& curr) {
    if (is_point_variant(cfg_.variant)) {
      check_point_input(prev, "prev");
      check_point_input(curr, "curr");
      switch (cfg_.variant) {
        case Variant::p2p_point: return forward_p2p_point(prev, curr);
        case Variant::ablate_merged: return forward_merged(prev, curr, false);
        case Variant::ablate_temporal: return forward_merged(prev, curr, true);
        case Variant::ablate_dual_concat: return forward_dual_concat(prev, curr);
        default: break;
      }
    }
    check_voxel_input(prev, "prev");
    check_voxel_input(curr, "curr");
    return forward_voxel(prev, curr);
  }

  MotionPrediction predict(const Tensor<T>& prev, const Tensor<T>& curr) {
    nn::NoGradGuard ng;
    bool saved = training_;
    training_ = false;
    Tensor<T> out = forward(prev, curr);
    training_ = saved;
    MotionPrediction pred;
    pred.delta = {double(out.data()[0]), double(out.data()[1]), double(out.data()[2]),
                  wrap_angle(double(out.data()[3]))};
    if (cfg_.probabilistic_head) {
      pred.probabilistic = true;
      for (int i = 0; i < 4; ++i) pred.log_sigma[size_t(i)] = double(out.data()[4 + i]);
    }
    return pred;
  }

  ShapeTrace trace(const Tensor<T>& prev, const Tensor<T>& curr) {
    nn::NoGradGuard ng;
    bool saved = training_;
    training_ = false;
    ShapeTrace t;
    trace_sink_ = &t;
    forward(prev, curr);
    trace_sink_ = nullptr;
    training_ = saved;
    return t;
  }

  // Multiply-add count of one forward pass at the configured input sizes.
  // unique_modules counts the weight-shared embed once, per-call counts it per branch.
  uint64_t flops(bool unique_modules) {
    nn::NoGradGuard ng;
    bool saved = training_;
    training_ = false;
    Tensor<T> prev = dummy_input();
    Tensor<T> curr = dummy_input();
    nn::MacCountGuard guard;
    forward(prev, curr);
    uint64_t full = guard.macs();
    training_ = saved;
    bool two_branch = cfg_.variant == Variant::p2p_point ||
                      cfg_.variant == Variant::p2p_voxel ||
                      cfg_.variant == Variant::ablate_dual_concat;
    if (!unique_modules || !cfg_.weight_shared_backbone || !two_branch) return full;
    return full - embed_macs_once();
  }

  Tensor<T> dummy_input() const {
    if (is_point_variant(cfg_.variant)) return Tensor<T>::zeros({3, cfg_.n_points});
    return Tensor<T>::zeros(
        {cfg_.voxel_dims[2] * 2, cfg_.voxel_dims[1], cfg_.voxel_dims[0]});
  }

  static Tensor<T> point_input(const PointCloud& cloud) {
    if (cloud.empty()) throw EmptyCloud("point input from empty cloud");
    std::vector<T> v(3 * cloud.size());
    for (size_t i = 0; i < cloud.size(); ++i) {
      v[i] = T(cloud.pts[i].x);
      v[cloud.size() + i] = T(cloud.pts[i].y);
      v[2 * cloud.size() + i] = T(cloud.pts[i].z);
    }
    return Tensor<T>::from_data({3, cloud.size()}, std::move(v));
  }

  static Tensor<T> voxel_input(const VoxelGrid& g) {
    std::vector<T> v(g.data.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = T(g.data[i]);
    return Tensor<T>::from_data({g.channels(), g.dims[1], g.dims[0]}, std::move(v));
  }

 private:
  ModelConfig cfg_;
  bool training_ = true;
  ShapeTrace* trace_sink_ = nullptr;
  std::vector<Parameter<T>> params_;
  std::vector<BufferRef<T>> buffers_;

  std::vector<layers::ConvBnRelu1d<T>> embed_, embed_b_;
  std::vector<layers::ConvBnRelu1d<T>> neck_spatial_, neck_channel_;
  std::vector<layers::ConvBnRelu2d<T>> vembed_, vembed_b_, vneck_;
  layers::DenseLayer<T> vpool_;
  std::vector<layers::DenseLayer<T>> head_;

  void note(const std::string& name, const std::vector<size_t>& shape) {
    if (trace_sink_) trace_sink_->push_back({name, shape});
  }

  size_t point_in_channels() const {
    return cfg_.variant == Variant::ablate_temporal ? 4 : 3;
  }

  size_t head_in() const {
    if (cfg_.variant == Variant::ablate_dual_concat) return 2 * cfg_.feature_channels();
    return cfg_.feature_channels();
  }

  void build_point(Rng& rng) {
    size_t cin = point_in_channels();
    for (size_t cout : cfg_.point_embed_channels) {
      layers::ConvBnRelu1d<T> l;
      l.build(rng, cout, cin);
      embed_.push_back(std::move(l));
      cin = cout;
    }
    if (!cfg_.weight_shared_backbone) {
      cin = point_in_channels();
      for (size_t cout : cfg_.point_embed_channels) {
        layers::ConvBnRelu1d<T> l;
        l.build(rng, cout, cin);
        embed_b_.push_back(std::move(l));
        cin = cout;
      }
    }
    if (cfg_.variant == Variant::p2p_point) {
      const size_t c = cfg_.feature_channels();
      size_t s_in = 2;
      for (size_t s_out : cfg_.neck_spatial) {
        for (size_t r = 0; r < cfg_.neck_repeats; ++r) {
          layers::ConvBnRelu1d<T> sp;
          sp.build(rng, s_out, r == 0 ? s_in : s_out);
          neck_spatial_.push_back(std::move(sp));
          layers::ConvBnRelu1d<T> ch;
          ch.build(rng, c, c);
          neck_channel_.push_back(std::move(ch));
        }
        s_in = s_out;
      }
    }
    build_head(rng, head_in());
  }

  void build_voxel(Rng& rng) {
    size_t cin = cfg_.voxel_dims[2] * 2;  // height slices times two grid features
    for (size_t i = 0; i < cfg_.voxel_embed_channels.size(); ++i) {
      layers::ConvBnRelu2d<T> a, b;
      a.build(rng, cfg_.voxel_embed_channels[i], cin, cfg_.voxel_embed_strides[i]);
      b.build(rng, cfg_.voxel_embed_channels[i], cfg_.voxel_embed_channels[i], 1);
      vembed_.push_back(std::move(a));
      vembed_.push_back(std::move(b));
      cin = cfg_.voxel_embed_channels[i];
    }
    if (!cfg_.weight_shared_backbone) {
      cin = cfg_.voxel_dims[2] * 2;
      for (size_t i = 0; i < cfg_.voxel_embed_channels.size(); ++i) {
        layers::ConvBnRelu2d<T> a, b;
        a.build(rng, cfg_.voxel_embed_channels[i], cin, cfg_.voxel_embed_strides[i]);
        b.build(rng, cfg_.voxel_embed_channels[i], cfg_.voxel_embed_channels[i], 1);
        vembed_b_.push_back(std::move(a));
        vembed_b_.push_back(std::move(b));
        cin = cfg_.voxel_embed_channels[i];
      }
    }
    cin = cfg_.voxel_embed_channels.back() * 2;
    for (const auto& st : cfg_.voxel_neck) {
      for (size_t r = 0; r < st.repeats; ++r) {
        layers::ConvBnRelu2d<T> l;
        l.build(rng, st.channels, cin, r == 0 ? st.stride : 1);
        vneck_.push_back(std::move(l));
        cin = st.channels;
      }
    }
    // Learned pooling over the flattened spatial grid, one weight per cell.
    size_t spatial = voxel_neck_spatial();
    vpool_.build(rng, spatial, 1);
    build_head(rng, cfg_.voxel_neck.back().channels);
  }

  size_t voxel_neck_spatial() const {
    size_t h = cfg_.voxel_dims[1], w = cfg_.voxel_dims[0];
    for (size_t s : cfg_.voxel_embed_strides) {
      h = (h + 2 - 3) / s + 1;
      w = (w + 2 - 3) / s + 1;
    }
    for (const auto& st : cfg_.voxel_neck) {
      h = (h + 2 - 3) / st.stride + 1;
      w = (w + 2 - 3) / st.stride + 1;
    }
    return h * w;
  }

  void build_head(Rng& rng, size_t in) {
    const auto& spec = cfg_.head_spec;
    for (size_t i = 0; i + 1 < spec.size(); ++i) {
      layers::DenseLayer<T> l;
      l.build(rng, in, spec[i]);
      head_.push_back(std::move(l));
      in = spec[i];
    }
    layers::DenseLayer<T> out;
    out.build(rng, in, cfg_.out_dim(), /*zero_init=*/true);
    head_.push_back(std::move(out));
  }

  void collect_all() {
    auto collect_vec = [&](auto& vec, const std::string& prefix) {
      for (size_t i = 0; i < vec.size(); ++i) {
        vec[i].collect(prefix + std::to_string(i), params_);
        vec[i].collect_buffers(prefix + std::to_string(i), buffers_);
      }
    };
    collect_vec(embed_, "embed.");
    collect_vec(embed_b_, "embed_b.");
    collect_vec(neck_spatial_, "neck.spatial.");
    collect_vec(neck_channel_, "neck.channel.");
    collect_vec(vembed_, "vembed.");
    collect_vec(vembed_b_, "vembed_b.");
    collect_vec(vneck_, "vneck.");
    if (vpool_.w.defined()) vpool_.collect("head.pool_linear", params_);
    for (size_t i = 0; i < head_.size(); ++i)
      head_[i].collect("head." + std::to_string(i), params_);
  }

  void check_point_input(const Tensor<T>& x, const char* which) const {
    if (x.ndim() != 2 || x.shape()[0] != 3 || x.shape()[1] != cfg_.n_points)
      throw VariantInputMismatch(std::string("point variant expects [3,") +
                                 std::to_string(cfg_.n_points) + "] for " + which + ", got " +
                                 nn::shape_str(x.shape()));
  }

  void check_voxel_input(const Tensor<T>& x, const char* which) const {
    size_t c = cfg_.voxel_dims[2] * 2, h = cfg_.voxel_dims[1], w = cfg_.voxel_dims[0];
    if (x.ndim() != 3 || x.shape()[0] != c || x.shape()[1] != h || x.shape()[2] != w)
      throw VariantInputMismatch(std::string("voxel variant expects [") + std::to_string(c) +
                                 "," + std::to_string(h) + "," + std::to_string(w) + "] for " +
                                 which + ", got " + nn::shape_str(x.shape()));
  }

  // [cin, n] -> [1, C] pooled embedding.
  Tensor<T> embed_branch(const Tensor<T>& x, bool second_branch) {
    auto& stack = (second_branch && !cfg_.weight_shared_backbone) ? embed_b_ : embed_;
    Tensor<T> h = x;
    for (auto& l : stack) h = l.forward(h, training_);
    Tensor<T> pooled = nn::max_over_axis(h, 1, true);     // [C, 1]
    return nn::permute(pooled, {1, 0});                   // [1, C]
  }

  // Embed both crops through the shared trunk in one pass so the normalization
  // statistics are computed over the pair. A per-crop normalizer would scale the
  // two descriptors by different factors, distorting the relative offset the
  // head regresses; a shared one preserves it up to a common per-pair gain.
  // The trunk convs are pointwise, so concatenation along the point axis is
  // exactly equivalent to two separate passes apart from those statistics.
  std::pair<Tensor<T>, Tensor<T>> embed_pair(const Tensor<T>& prev, const Tensor<T>& curr) {
    if (!cfg_.weight_shared_backbone)
      return {embed_branch(prev, false), embed_branch(curr, true)};
    const size_t n = prev.shape()[1];
    Tensor<T> h = nn::concat<T>({prev, curr}, 1);  // [cin, 2n]
    for (auto& l : embed_) h = l.forward(h, training_);
    auto pool = [](const Tensor<T>& part) {
      return nn::permute(nn::max_over_axis(part, 1, true), {1, 0});  // [1, C]
    };
    return {pool(nn::slice(h, 1, 0, n)), pool(nn::slice(h, 1, n, n))};
  }

  uint64_t embed_macs_once() {
    nn::NoGradGuard ng;
    bool saved = training_;
    training_ = false;
    nn::MacCountGuard guard;
    if (is_point_variant(cfg_.variant)) {
      Tensor<T> x = Tensor<T>::zeros({point_in_channels(), embed_len()});
      Tensor<T> h = x;
      for (auto& l : embed_) h = l.forward(h, training_);
    } else {
      Tensor<T> x = dummy_input();
      Tensor<T> h = x;
      for (auto& l : vembed_) h = l.forward(h, training_);
    }
    training_ = saved;
    return guard.macs();
  }

  size_t embed_len() const {
    switch (cfg_.variant) {
      case Variant::ablate_merged:
      case Variant::ablate_temporal: return 2 * cfg_.n_points;
      default: return cfg_.n_points;
    }
  }

  Tensor<T> head_forward(const Tensor<T>& pooled) {
    Tensor<T> h = pooled;
    for (size_t i = 0; i + 1 < head_.size(); ++i) h = nn::relu(head_[i].forward(h));
    Tensor<T> out = head_.back().forward(h);
    note("head.out", out.shape());
    return out;
  }

  Tensor<T> forward_p2p_point(const Tensor<T>& prev, const Tensor<T>& curr) {
    auto [fp, fc] = embed_pair(prev, curr);
    note("embed", fp.shape());
    Tensor<T> fused = nn::concat<T>({fp, fc}, 0);  // rows: prev then curr
    note("fuse", fused.shape());

    Tensor<T> h = fused;
    size_t li = 0;
    for (size_t stage = 0; stage < cfg_.neck_spatial.size(); ++stage) {
      if (cfg_.mixer_spatial_first) {
        for (size_t r = 0; r < cfg_.neck_repeats; ++r)
          h = neck_spatial_[li + r].forward(h, training_);
        h = nn::permute(h, {1, 0});
        for (size_t r = 0; r < cfg_.neck_repeats; ++r)
          h = neck_channel_[li + r].forward(h, training_);
        h = nn::permute(h, {1, 0});
      } else {
        h = nn::permute(h, {1, 0});
        for (size_t r = 0; r < cfg_.neck_repeats; ++r)
          h = neck_channel_[li + r].forward(h, training_);
        h = nn::permute(h, {1, 0});
        for (size_t r = 0; r < cfg_.neck_repeats; ++r)
          h = neck_spatial_[li + r].forward(h, training_);
      }
      li += cfg_.neck_repeats;
      note("neck.stage" + std::to_string(stage), h.shape());
    }

    Tensor<T> pooled = nn::max_over_axis(h, 0, true);  // [1, C]
    note("head.pool", pooled.shape());
    return head_forward(pooled);
  }

  Tensor<T> forward_merged(const Tensor<T>& prev, const Tensor<T>& curr, bool temporal) {
    Tensor<T> merged = nn::concat<T>({prev, curr}, 1);  // [3, 2N]
    if (temporal) {
      const size_t n = cfg_.n_points;
      std::vector<T> flag(2 * n, T(0));
      std::fill(flag.begin() + long(n), flag.end(), T(1));
      Tensor<T> frow = Tensor<T>::from_data({1, 2 * n}, std::move(flag));
      merged = nn::concat<T>({merged, frow}, 0);  // [4, 2N]
    }
    note("merged", merged.shape());
    Tensor<T> h = merged;
    for (auto& l : embed_) h = l.forward(h, training_);
    Tensor<T> pooled = nn::permute(nn::max_over_axis(h, 1, true), {1, 0});
    note("head.pool", pooled.shape());
    return head_forward(pooled);
  }

  Tensor<T> forward_dual_concat(const Tensor<T>& prev, const Tensor<T>& curr) {
    auto [fp, fc] = embed_pair(prev, curr);
    note("embed", fp.shape());
    Tensor<T> fused = nn::concat<T>({fp, fc}, 1);  // [1, 2C]
    note("fuse", fused.shape());
    return head_forward(fused);
  }

  Tensor<T> voxel_embed_branch(const Tensor<T>& x, bool second_branch) {
    auto& stack = (second_branch && !cfg_.weight_shared_backbone) ? vembed_b_ : vembed_;
    Tensor<T> h = x;
    for (auto& l : stack) h = l.forward(h, training_);
    return h;
  }

  Tensor<T> forward_voxel(const Tensor<T>& prev, const Tensor<T>& curr) {
    Tensor<T> fp = voxel_embed_branch(prev, false);
    Tensor<T> fc = voxel_embed_branch(curr, true);
    note("embed", fp.shape());
    Tensor<T> fused = nn::concat<T>({fp, fc}, 0);  // channel concat
    note("fuse", fused.shape());

    Tensor<T> h = fused;
    size_t li = 0;
    for (size_t stage = 0; stage < cfg_.voxel_neck.size(); ++stage) {
      for (size_t r = 0; r < cfg_.voxel_neck[stage].repeats; ++r)
        h = vneck_[li + r].forward(h, training_);
      li += cfg_.voxel_neck[stage].repeats;
      note("neck.stage" + std::to_string(stage), h.shape());
    }

    const size_t c = h.shape()[0];
    const size_t spatial = h.shape()[1] * h.shape()[2];
    Tensor<T> flat = nn::reshape(h, {c, spatial});
    Tensor<T> pooled = nn::permute(vpool_.forward(flat), {1, 0});  // [1, C]
    note("head.pool", pooled.shape());
    return head_forward(pooled);
  }
};

// Encodes a cropped two-frame pair into model inputs. Point families resample
// each crop to the configured budget with seeded farthest point sampling; the
// voxel family rasterizes both crops over the search region.
template <class T>
std::pair<Tensor<T>, Tensor<T>> encode_crops(const PointCloud& prev, const PointCloud& curr,
                                             const SearchRegion& region, const ModelConfig& mc,
                                             uint64_t seed) {
  if (is_point_variant(mc.variant)) {
    return {P2PModel<T>::point_input(fps_sample(prev, mc.n_points, derive_seed(seed, "fps", 0))),
            P2PModel<T>::point_input(fps_sample(curr, mc.n_points, derive_seed(seed, "fps", 1)))};
  }
  return {P2PModel<T>::voxel_input(voxelize(prev, region, mc.voxel_dims)),
          P2PModel<T>::voxel_input(voxelize(curr, region, mc.voxel_dims))};
}

}  // namespace p2p::model
