#pragma once

// Declarative network construction over a small CPU differentiable substrate.
// Layer vocabulary: conv, maxpool, activations, flatten, dense, dropout,
// batchnorm, unflatten, deconv. Everything is double precision and exactly
// reproducible given a seed.

#include "cmkt/common.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace cmkt::nn {

using json = nlohmann::json;

constexpr const char* kSubstrateVersion = "cmkt-nn/1";

enum class Modality { visual, audio };

inline std::string to_string(Modality m) { return m == Modality::visual ? "visual" : "audio"; }

struct EncodedBatch {
  Mat vectors;   // n x d
  IVec labels;   // n
  Modality modality = Modality::visual;
};

// ---------------------------------------------------------------------------
// Shapes

struct Shape3 {
  std::size_t c = 0, h = 0, w = 0;
  std::size_t flat() const { return c * h * w; }
  bool operator==(const Shape3&) const = default;
};

// A tensor between layers is either spatial (c,h,w) or a flat feature vector.
struct TensorShape {
  bool spatial = false;
  Shape3 dims{};
  std::size_t flat = 0;

  static TensorShape make_spatial(Shape3 s) { return {true, s, s.flat()}; }
  static TensorShape make_flat(std::size_t d) { return {false, {}, d}; }
  std::string str() const {
    if (spatial) {
      return std::to_string(dims.c) + "x" + std::to_string(dims.h) + "x" + std::to_string(dims.w);
    }
    return std::to_string(flat);
  }
};

// ---------------------------------------------------------------------------
// Layer specs

struct ConvSpec {
  std::size_t out_channels = 1, kernel = 3, stride = 1;
  int padding = 0;      // ignored when same == true
  bool same = false;    // output spatial size == input (stride-1 only)
};
struct PoolSpec {
  std::size_t kernel = 2, stride = 2;
};
struct ActSpec {
  std::string name = "relu";  // relu | leaky_relu | sigmoid
  double slope = 0.01;        // leaky_relu only
};
struct FlattenSpec {};
struct DenseSpec {
  std::size_t out_dim = 1;
};
struct DropoutSpec {
  double rate = 0.0;
};
struct BatchNormSpec {};
struct UnflattenSpec {
  Shape3 shape;
};
struct DeconvSpec {
  std::size_t out_channels = 1, kernel = 3, stride = 2, padding = 1, output_padding = 1;
};

using LayerVariant = std::variant<ConvSpec, PoolSpec, ActSpec, FlattenSpec, DenseSpec,
                                  DropoutSpec, BatchNormSpec, UnflattenSpec, DeconvSpec>;

struct LayerSpec {
  LayerVariant op;
  std::string name;  // optional boundary tag for feature extraction
};

struct ArchitectureSpec {
  Shape3 input_shape{1, 80, 80};
  std::vector<LayerSpec> layers;

  json to_json() const;
  static ArchitectureSpec from_json(const json& j);
  // Chains shapes through all layers; throws Error naming the offending layer.
  std::vector<TensorShape> chain() const;
  TensorShape output_shape() const {
    auto c = chain();
    return c.empty() ? TensorShape::make_spatial(input_shape) : c.back();
  }
};

namespace detail {

inline void pad_amounts(std::size_t kernel, std::size_t stride, int padding, bool same,
                        std::size_t layer_index, std::size_t& pad_begin, std::size_t& pad_end) {
  if (same) {
    if (stride != 1) {
      throw Error("layer " + std::to_string(layer_index) +
                  ": padding 'same' requires stride 1");
    }
    const std::size_t total = kernel - 1;
    pad_begin = total / 2;
    pad_end = total - pad_begin;
  } else {
    if (padding < 0) throw Error("layer " + std::to_string(layer_index) + ": negative padding");
    pad_begin = pad_end = static_cast<std::size_t>(padding);
  }
}

inline std::size_t conv_out(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t pb, std::size_t pe, std::size_t layer_index) {
  const std::size_t padded = in + pb + pe;
  if (padded < kernel) {
    throw Error("layer " + std::to_string(layer_index) + ": kernel larger than padded input");
  }
  return (padded - kernel) / stride + 1;
}

}  // namespace detail

inline std::vector<TensorShape> ArchitectureSpec::chain() const {
  std::vector<TensorShape> shapes;
  TensorShape cur = TensorShape::make_spatial(input_shape);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerVariant& op = layers[i].op;
    const auto fail = [&](const std::string& msg) {
      throw Error("layer " + std::to_string(i) + " (" + cur.str() + "): " + msg);
    };
    if (const auto* c = std::get_if<ConvSpec>(&op)) {
      if (!cur.spatial) fail("conv requires a spatial input");
      if (c->stride == 0 || c->kernel == 0) fail("conv kernel/stride must be positive");
      std::size_t pb = 0, pe = 0;
      detail::pad_amounts(c->kernel, c->stride, c->padding, c->same, i, pb, pe);
      Shape3 out{c->out_channels,
                 detail::conv_out(cur.dims.h, c->kernel, c->stride, pb, pe, i),
                 detail::conv_out(cur.dims.w, c->kernel, c->stride, pb, pe, i)};
      cur = TensorShape::make_spatial(out);
    } else if (const auto* p = std::get_if<PoolSpec>(&op)) {
      if (!cur.spatial) fail("maxpool requires a spatial input");
      if (p->stride == 0 || p->kernel == 0) fail("pool kernel/stride must be positive");
      if (cur.dims.h < p->kernel || cur.dims.w < p->kernel) fail("pool kernel larger than input");
      Shape3 out{cur.dims.c, (cur.dims.h - p->kernel) / p->stride + 1,
                 (cur.dims.w - p->kernel) / p->stride + 1};
      cur = TensorShape::make_spatial(out);
    } else if (std::holds_alternative<ActSpec>(op) || std::holds_alternative<DropoutSpec>(op)) {
      // shape preserving
    } else if (std::holds_alternative<FlattenSpec>(op)) {
      if (!cur.spatial) fail("flatten requires a spatial input");
      cur = TensorShape::make_flat(cur.dims.flat());
    } else if (const auto* d = std::get_if<DenseSpec>(&op)) {
      if (cur.spatial) fail("dense requires a flat input (insert flatten)");
      if (d->out_dim == 0) fail("dense out_dim must be positive");
      cur = TensorShape::make_flat(d->out_dim);
    } else if (std::holds_alternative<BatchNormSpec>(op)) {
      if (cur.spatial) fail("batchnorm operates on flat features");
    } else if (const auto* u = std::get_if<UnflattenSpec>(&op)) {
      if (cur.spatial) fail("unflatten requires a flat input");
      if (u->shape.flat() != cur.flat) {
        fail("unflatten to " + std::to_string(u->shape.flat()) + " elements, have " +
             std::to_string(cur.flat));
      }
      cur = TensorShape::make_spatial(u->shape);
    } else if (const auto* t = std::get_if<DeconvSpec>(&op)) {
      if (!cur.spatial) fail("deconv requires a spatial input");
      if (t->stride == 0 || t->kernel == 0) fail("deconv kernel/stride must be positive");
      if (t->output_padding >= t->stride) fail("deconv output_padding must be < stride");
      const auto out_dim = [&](std::size_t in) {
        const long v = static_cast<long>((in - 1) * t->stride) - 2 * static_cast<long>(t->padding) +
                       static_cast<long>(t->kernel) + static_cast<long>(t->output_padding);
        if (v <= 0) fail("deconv collapses the spatial size");
        return static_cast<std::size_t>(v);
      };
      cur = TensorShape::make_spatial({t->out_channels, out_dim(cur.dims.h), out_dim(cur.dims.w)});
    }
    shapes.push_back(cur);
  }
  return shapes;
}

// ---------------------------------------------------------------------------
// JSON round trip

inline json ArchitectureSpec::to_json() const {
  json j;
  j["input_shape"] = {input_shape.c, input_shape.h, input_shape.w};
  json arr = json::array();
  for (const auto& l : layers) {
    json e;
    if (const auto* c = std::get_if<ConvSpec>(&l.op)) {
      e["type"] = "conv";
      e["out_channels"] = c->out_channels;
      e["kernel"] = c->kernel;
      e["stride"] = c->stride;
      if (c->same) {
        e["padding"] = "same";
      } else {
        e["padding"] = c->padding;
      }
    } else if (const auto* p = std::get_if<PoolSpec>(&l.op)) {
      e["type"] = "maxpool";
      e["kernel"] = p->kernel;
      e["stride"] = p->stride;
    } else if (const auto* a = std::get_if<ActSpec>(&l.op)) {
      e["type"] = a->name;
      if (a->name == "leaky_relu") e["slope"] = a->slope;
    } else if (std::holds_alternative<FlattenSpec>(l.op)) {
      e["type"] = "flatten";
    } else if (const auto* d = std::get_if<DenseSpec>(&l.op)) {
      e["type"] = "dense";
      e["out_dim"] = d->out_dim;
    } else if (const auto* d = std::get_if<DropoutSpec>(&l.op)) {
      e["type"] = "dropout";
      e["rate"] = d->rate;
    } else if (std::holds_alternative<BatchNormSpec>(l.op)) {
      e["type"] = "batchnorm";
    } else if (const auto* u = std::get_if<UnflattenSpec>(&l.op)) {
      e["type"] = "unflatten";
      e["shape"] = {u->shape.c, u->shape.h, u->shape.w};
    } else if (const auto* t = std::get_if<DeconvSpec>(&l.op)) {
      e["type"] = "deconv";
      e["out_channels"] = t->out_channels;
      e["kernel"] = t->kernel;
      e["stride"] = t->stride;
      e["padding"] = t->padding;
      e["output_padding"] = t->output_padding;
    }
    if (!l.name.empty()) e["name"] = l.name;
    arr.push_back(e);
  }
  j["layers"] = arr;
  return j;
}

inline ArchitectureSpec ArchitectureSpec::from_json(const json& j) {
  ArchitectureSpec spec;
  if (j.contains("input_shape")) {
    const auto& s = j.at("input_shape");
    if (s.size() != 3) throw Error("input_shape must have 3 entries [c,h,w]");
    spec.input_shape = {s[0].get<std::size_t>(), s[1].get<std::size_t>(), s[2].get<std::size_t>()};
  }
  for (const auto& e : j.at("layers")) {
    LayerSpec l;
    std::string type = e.at("type").get<std::string>();
    if (type == "activation") type = e.at("name").get<std::string>();
    if (type == "conv") {
      ConvSpec c;
      c.out_channels = e.at("out_channels").get<std::size_t>();
      c.kernel = e.at("kernel").get<std::size_t>();
      c.stride = e.value("stride", std::size_t{1});
      if (e.contains("padding") && e.at("padding").is_string()) {
        if (e.at("padding").get<std::string>() != "same") throw Error("unknown padding mode");
        c.same = true;
      } else {
        c.padding = e.value("padding", 0);
      }
      l.op = c;
    } else if (type == "maxpool") {
      PoolSpec p;
      p.kernel = e.at("kernel").get<std::size_t>();
      p.stride = e.value("stride", p.kernel);
      l.op = p;
    } else if (type == "relu" || type == "sigmoid" || type == "leaky_relu") {
      ActSpec a;
      a.name = type;
      a.slope = e.value("slope", 0.01);
      l.op = a;
    } else if (type == "flatten") {
      l.op = FlattenSpec{};
    } else if (type == "dense") {
      l.op = DenseSpec{e.at("out_dim").get<std::size_t>()};
    } else if (type == "dropout") {
      l.op = DropoutSpec{e.at("rate").get<double>()};
    } else if (type == "batchnorm") {
      l.op = BatchNormSpec{};
    } else if (type == "unflatten") {
      const auto& s = e.at("shape");
      l.op = UnflattenSpec{{s[0].get<std::size_t>(), s[1].get<std::size_t>(), s[2].get<std::size_t>()}};
    } else if (type == "deconv") {
      DeconvSpec t;
      t.out_channels = e.at("out_channels").get<std::size_t>();
      t.kernel = e.at("kernel").get<std::size_t>();
      t.stride = e.value("stride", std::size_t{2});
      t.padding = e.value("padding", std::size_t{1});
      t.output_padding = e.value("output_padding", std::size_t{1});
      l.op = t;
    } else {
      throw Error("unknown layer type '" + type + "'");
    }
    if (e.contains("name")) l.name = e.at("name").get<std::string>();
    spec.layers.push_back(std::move(l));
  }
  spec.chain();  // validate eagerly
  return spec;
}

// ---------------------------------------------------------------------------
// Layers

namespace detail {

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Mat forward(const Mat& x, bool training, Rng& rng) = 0;
  virtual Mat backward(const Mat& dy) = 0;
  // Contiguous parameter blocks (weights then bias, when present).
  virtual std::vector<Eigen::Map<Vec>> params() { return {}; }
  virtual std::vector<Eigen::Map<Vec>> grads() { return {}; }
  // Non-trained state (batchnorm running stats).
  virtual std::vector<Eigen::Map<Vec>> buffers() { return {}; }
  virtual void init(Rng&) {}
  virtual void zero_grad() {
    for (auto g : grads()) g.setZero();
  }
};

inline Eigen::Map<Vec> map_of(Mat& m) { return {m.data(), m.size()}; }
inline Eigen::Map<Vec> map_of(Vec& v) { return {v.data(), v.size()}; }

// Uniform fan-in initialization: weights and bias ~ U(-1/sqrt(fan_in), +...).
inline void fill_uniform_fan_in(Eigen::Map<Vec> w, Eigen::Map<Vec> b, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
  for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = rng.uniform(-bound, bound);
}

class Conv2d final : public Layer {
 public:
  Conv2d(const ConvSpec& s, Shape3 in, std::size_t layer_index) : spec_(s), in_(in) {
    pad_amounts(s.kernel, s.stride, s.padding, s.same, layer_index, pb_, pe_);
    out_ = {s.out_channels, conv_out(in.h, s.kernel, s.stride, pb_, pe_, layer_index),
            conv_out(in.w, s.kernel, s.stride, pb_, pe_, layer_index)};
    const std::size_t k2 = s.kernel * s.kernel;
    weight_ = Mat::Zero(static_cast<Eigen::Index>(s.out_channels),
                        static_cast<Eigen::Index>(in.c * k2));
    bias_ = Vec::Zero(static_cast<Eigen::Index>(s.out_channels));
    dweight_ = Mat::Zero(weight_.rows(), weight_.cols());
    dbias_ = Vec::Zero(bias_.size());
  }

  void init(Rng& rng) override {
    fill_uniform_fan_in(map_of(weight_), map_of(bias_), in_.c * spec_.kernel * spec_.kernel, rng);
  }

  Mat forward(const Mat& x, bool training, Rng&) override {
    if (training) cached_input_ = x;
    const auto n = x.rows();
    const std::size_t ohw = out_.h * out_.w;
    Mat y(n, static_cast<Eigen::Index>(out_.c * ohw));
    Mat col(weight_.cols(), static_cast<Eigen::Index>(ohw));
    for (Eigen::Index i = 0; i < n; ++i) {
      im2col(x.row(i).data(), col);
      Eigen::Map<Mat> yi(y.row(i).data(), static_cast<Eigen::Index>(out_.c),
                         static_cast<Eigen::Index>(ohw));
      yi.noalias() = weight_ * col;
      yi.colwise() += bias_;
    }
    return y;
  }

  Mat backward(const Mat& dy) override {
    const auto n = dy.rows();
    const std::size_t ohw = out_.h * out_.w;
    Mat dx = Mat::Zero(n, static_cast<Eigen::Index>(in_.flat()));
    Mat col(weight_.cols(), static_cast<Eigen::Index>(ohw));
    Mat dcol(weight_.cols(), static_cast<Eigen::Index>(ohw));
    for (Eigen::Index i = 0; i < n; ++i) {
      im2col(cached_input_.row(i).data(), col);
      Eigen::Map<const Mat> dyi(dy.row(i).data(), static_cast<Eigen::Index>(out_.c),
                                static_cast<Eigen::Index>(ohw));
      dweight_.noalias() += dyi * col.transpose();
      dbias_.noalias() += dyi.rowwise().sum();
      dcol.noalias() = weight_.transpose() * dyi;
      col2im(dcol, dx.row(i).data());
    }
    return dx;
  }

  std::vector<Eigen::Map<Vec>> params() override { return {map_of(weight_), map_of(bias_)}; }
  std::vector<Eigen::Map<Vec>> grads() override { return {map_of(dweight_), map_of(dbias_)}; }

 private:
  void im2col(const double* x, Mat& col) const {
    const std::size_t k = spec_.kernel, s = spec_.stride;
    const std::size_t hw = in_.h * in_.w;
    col.setZero();
    for (std::size_t ci = 0; ci < in_.c; ++ci) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const auto row = static_cast<Eigen::Index>((ci * k + ky) * k + kx);
          for (std::size_t oy = 0; oy < out_.h; ++oy) {
            const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(pb_);
            if (iy < 0 || iy >= static_cast<long>(in_.h)) continue;
            for (std::size_t ox = 0; ox < out_.w; ++ox) {
              const long ix = static_cast<long>(ox * s + kx) - static_cast<long>(pb_);
              if (ix < 0 || ix >= static_cast<long>(in_.w)) continue;
              col(row, static_cast<Eigen::Index>(oy * out_.w + ox)) =
                  x[ci * hw + static_cast<std::size_t>(iy) * in_.w + static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  }

  void col2im(const Mat& dcol, double* dx) const {
    const std::size_t k = spec_.kernel, s = spec_.stride;
    const std::size_t hw = in_.h * in_.w;
    for (std::size_t ci = 0; ci < in_.c; ++ci) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const auto row = static_cast<Eigen::Index>((ci * k + ky) * k + kx);
          for (std::size_t oy = 0; oy < out_.h; ++oy) {
            const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(pb_);
            if (iy < 0 || iy >= static_cast<long>(in_.h)) continue;
            for (std::size_t ox = 0; ox < out_.w; ++ox) {
              const long ix = static_cast<long>(ox * s + kx) - static_cast<long>(pb_);
              if (ix < 0 || ix >= static_cast<long>(in_.w)) continue;
              dx[ci * hw + static_cast<std::size_t>(iy) * in_.w + static_cast<std::size_t>(ix)] +=
                  dcol(row, static_cast<Eigen::Index>(oy * out_.w + ox));
            }
          }
        }
      }
    }
  }

  ConvSpec spec_;
  Shape3 in_, out_;
  std::size_t pb_ = 0, pe_ = 0;
  Mat weight_, dweight_;
  Vec bias_, dbias_;
  Mat cached_input_;
};

class MaxPool2d final : public Layer {
 public:
  MaxPool2d(const PoolSpec& s, Shape3 in) : spec_(s), in_(in) {
    out_ = {in.c, (in.h - s.kernel) / s.stride + 1, (in.w - s.kernel) / s.stride + 1};
  }

  Mat forward(const Mat& x, bool training, Rng&) override {
    const auto n = x.rows();
    const std::size_t ohw = out_.h * out_.w;
    Mat y(n, static_cast<Eigen::Index>(out_.c * ohw));
    if (training) argmax_.resize(n, static_cast<Eigen::Index>(out_.c * ohw));
    const std::size_t hw = in_.h * in_.w;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double* xi = x.row(i).data();
      for (std::size_t c = 0; c < in_.c; ++c) {
        for (std::size_t oy = 0; oy < out_.h; ++oy) {
          for (std::size_t ox = 0; ox < out_.w; ++ox) {
            double best = -std::numeric_limits<double>::infinity();
            std::size_t best_idx = 0;
            for (std::size_t ky = 0; ky < spec_.kernel; ++ky) {
              for (std::size_t kx = 0; kx < spec_.kernel; ++kx) {
                const std::size_t iy = oy * spec_.stride + ky;
                const std::size_t ix = ox * spec_.stride + kx;
                const std::size_t idx = c * hw + iy * in_.w + ix;
                if (xi[idx] > best) {
                  best = xi[idx];
                  best_idx = idx;
                }
              }
            }
            const auto o = static_cast<Eigen::Index>(c * ohw + oy * out_.w + ox);
            y(i, o) = best;
            if (training) argmax_(i, o) = static_cast<int>(best_idx);
          }
        }
      }
    }
    return y;
  }

  Mat backward(const Mat& dy) override {
    Mat dx = Mat::Zero(dy.rows(), static_cast<Eigen::Index>(in_.flat()));
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
      for (Eigen::Index o = 0; o < dy.cols(); ++o) {
        dx(i, argmax_(i, o)) += dy(i, o);
      }
    }
    return dx;
  }

 private:
  PoolSpec spec_;
  Shape3 in_, out_;
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> argmax_;
};

class Activation final : public Layer {
 public:
  explicit Activation(const ActSpec& s) : spec_(s) {
    if (s.name != "relu" && s.name != "leaky_relu" && s.name != "sigmoid") {
      throw Error("unknown activation '" + s.name + "'");
    }
  }

  Mat forward(const Mat& x, bool training, Rng&) override {
    Mat y;
    if (spec_.name == "sigmoid") {
      y = x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
      if (training) cache_ = y;
    } else {
      const double slope = spec_.name == "relu" ? 0.0 : spec_.slope;
      y = x.unaryExpr([slope](double v) { return v > 0.0 ? v : slope * v; });
      if (training) cache_ = x;
    }
    return y;
  }

  Mat backward(const Mat& dy) override {
    if (spec_.name == "sigmoid") {
      return dy.cwiseProduct(cache_.cwiseProduct(Mat::Ones(cache_.rows(), cache_.cols()) - cache_));
    }
    const double slope = spec_.name == "relu" ? 0.0 : spec_.slope;
    return dy.cwiseProduct(
        cache_.unaryExpr([slope](double v) { return v > 0.0 ? 1.0 : slope; }));
  }

 private:
  ActSpec spec_;
  Mat cache_;
};

// Flatten/Unflatten only relabel the shape; batch rows are already contiguous.
class Reshape final : public Layer {
 public:
  Mat forward(const Mat& x, bool, Rng&) override { return x; }
  Mat backward(const Mat& dy) override { return dy; }
};

class Dense final : public Layer {
 public:
  Dense(const DenseSpec& s, std::size_t in_dim) : in_dim_(in_dim) {
    weight_ = Mat::Zero(static_cast<Eigen::Index>(s.out_dim), static_cast<Eigen::Index>(in_dim));
    bias_ = Vec::Zero(static_cast<Eigen::Index>(s.out_dim));
    dweight_ = Mat::Zero(weight_.rows(), weight_.cols());
    dbias_ = Vec::Zero(bias_.size());
  }

  void init(Rng& rng) override {
    fill_uniform_fan_in(map_of(weight_), map_of(bias_), in_dim_, rng);
  }

  Mat forward(const Mat& x, bool training, Rng&) override {
    if (training) cached_input_ = x;
    Mat y = x * weight_.transpose();
    y.rowwise() += bias_.transpose();
    return y;
  }

  Mat backward(const Mat& dy) override {
    dweight_.noalias() += dy.transpose() * cached_input_;
    dbias_.noalias() += dy.colwise().sum().transpose();
    return dy * weight_;
  }

  std::vector<Eigen::Map<Vec>> params() override { return {map_of(weight_), map_of(bias_)}; }
  std::vector<Eigen::Map<Vec>> grads() override { return {map_of(dweight_), map_of(dbias_)}; }

 private:
  std::size_t in_dim_;
  Mat weight_, dweight_;
  Vec bias_, dbias_;
  Mat cached_input_;
};

class Dropout final : public Layer {
 public:
  explicit Dropout(const DropoutSpec& s) : rate_(s.rate) {
    if (rate_ < 0.0 || rate_ >= 1.0) throw Error("dropout rate must lie in [0,1)");
  }

  Mat forward(const Mat& x, bool training, Rng& rng) override {
    if (!training || rate_ == 0.0) return x;
    const double keep = 1.0 - rate_;
    mask_ = Mat(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < mask_.size(); ++i) {
      mask_.data()[i] = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
    }
    return x.cwiseProduct(mask_);
  }

  Mat backward(const Mat& dy) override { return dy.cwiseProduct(mask_); }

 private:
  double rate_;
  Mat mask_;
};

class BatchNorm1d final : public Layer {
 public:
  explicit BatchNorm1d(std::size_t dim) : dim_(dim) {
    gamma_ = Vec::Ones(static_cast<Eigen::Index>(dim));
    beta_ = Vec::Zero(static_cast<Eigen::Index>(dim));
    dgamma_ = Vec::Zero(gamma_.size());
    dbeta_ = Vec::Zero(beta_.size());
    running_mean_ = Vec::Zero(gamma_.size());
    running_var_ = Vec::Ones(gamma_.size());
  }

  Mat forward(const Mat& x, bool training, Rng&) override {
    const auto n = static_cast<double>(x.rows());
    if (training && x.rows() > 1) {
      mean_ = x.colwise().mean();
      Mat centered = x.rowwise() - mean_.transpose();
      var_ = centered.array().square().colwise().mean();
      inv_std_ = (var_.array() + kEps).sqrt().inverse();
      xhat_ = centered.array().rowwise() * inv_std_.transpose().array();
      running_mean_ = (1.0 - kMomentum) * running_mean_ + kMomentum * mean_;
      // unbiased variance for the running buffer
      running_var_ = (1.0 - kMomentum) * running_var_ + kMomentum * (var_ * n / (n - 1.0));
      Mat y = xhat_.array().rowwise() * gamma_.transpose().array();
      y.rowwise() += beta_.transpose();
      return y;
    }
    Vec inv = (running_var_.array() + kEps).sqrt().inverse();
    Mat y = (x.rowwise() - running_mean_.transpose()).array().rowwise() * inv.transpose().array();
    y = y.array().rowwise() * gamma_.transpose().array();
    y.rowwise() += beta_.transpose();
    if (training) {  // batch of one: behave like eval but keep backward defined
      xhat_ = (x.rowwise() - running_mean_.transpose()).array().rowwise() *
              inv.transpose().array();
      inv_std_ = inv;
      eval_path_ = true;
    }
    return y;
  }

  Mat backward(const Mat& dy) override {
    const double n = static_cast<double>(dy.rows());
    dgamma_.noalias() += (dy.array() * xhat_.array()).colwise().sum().matrix().transpose();
    dbeta_.noalias() += dy.colwise().sum().transpose();
    if (eval_path_) {
      eval_path_ = false;
      return (dy.array().rowwise() * (gamma_.array() * inv_std_.array()).transpose()).matrix();
    }
    Mat dxhat = dy.array().rowwise() * gamma_.transpose().array();
    Vec sum_dxhat = dxhat.colwise().sum();
    Vec sum_dxhat_xhat = (dxhat.array() * xhat_.array()).colwise().sum();
    Mat dx = (dxhat.array() - (xhat_.array().rowwise() * sum_dxhat_xhat.transpose().array() +
                               Mat::Ones(dy.rows(), dy.cols()).array().rowwise() *
                                   sum_dxhat.transpose().array()) /
                                  n)
                 .rowwise() *
             inv_std_.transpose().array();
    return dx;
  }

  std::vector<Eigen::Map<Vec>> params() override { return {map_of(gamma_), map_of(beta_)}; }
  std::vector<Eigen::Map<Vec>> grads() override { return {map_of(dgamma_), map_of(dbeta_)}; }
  std::vector<Eigen::Map<Vec>> buffers() override {
    return {map_of(running_mean_), map_of(running_var_)};
  }

 private:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;
  std::size_t dim_;
  Vec gamma_, beta_, dgamma_, dbeta_;
  Vec running_mean_, running_var_;
  Vec mean_, var_, inv_std_;
  Mat xhat_;
  bool eval_path_ = false;
};

class ConvTranspose2d final : public Layer {
 public:
  ConvTranspose2d(const DeconvSpec& s, Shape3 in) : spec_(s), in_(in) {
    const auto out_dim = [&](std::size_t d) {
      return (d - 1) * s.stride - 2 * s.padding + s.kernel + s.output_padding;
    };
    out_ = {s.out_channels, out_dim(in.h), out_dim(in.w)};
    const std::size_t k2 = s.kernel * s.kernel;
    weight_ = Mat::Zero(static_cast<Eigen::Index>(in.c),
                        static_cast<Eigen::Index>(s.out_channels * k2));
    bias_ = Vec::Zero(static_cast<Eigen::Index>(s.out_channels));
    dweight_ = Mat::Zero(weight_.rows(), weight_.cols());
    dbias_ = Vec::Zero(bias_.size());
  }

  void init(Rng& rng) override {
    fill_uniform_fan_in(map_of(weight_), map_of(bias_),
                        spec_.out_channels * spec_.kernel * spec_.kernel, rng);
  }

  Mat forward(const Mat& x, bool training, Rng&) override {
    if (training) cached_input_ = x;
    const auto n = x.rows();
    Mat y(n, static_cast<Eigen::Index>(out_.flat()));
    const std::size_t ihw = in_.h * in_.w, ohw = out_.h * out_.w, k = spec_.kernel;
    for (Eigen::Index i = 0; i < n; ++i) {
      double* yo = y.row(i).data();
      for (std::size_t co = 0; co < out_.c; ++co) {
        for (std::size_t p = 0; p < ohw; ++p) yo[co * ohw + p] = bias_[static_cast<Eigen::Index>(co)];
      }
      const double* xi = x.row(i).data();
      for (std::size_t ci = 0; ci < in_.c; ++ci) {
        for (std::size_t iy = 0; iy < in_.h; ++iy) {
          for (std::size_t ix = 0; ix < in_.w; ++ix) {
            const double v = xi[ci * ihw + iy * in_.w + ix];
            if (v == 0.0) continue;
            for (std::size_t co = 0; co < out_.c; ++co) {
              const double* wr = weight_.row(static_cast<Eigen::Index>(ci)).data() + co * k * k;
              for (std::size_t ky = 0; ky < k; ++ky) {
                const long oy = static_cast<long>(iy * spec_.stride + ky) -
                                static_cast<long>(spec_.padding);
                if (oy < 0 || oy >= static_cast<long>(out_.h)) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const long ox = static_cast<long>(ix * spec_.stride + kx) -
                                  static_cast<long>(spec_.padding);
                  if (ox < 0 || ox >= static_cast<long>(out_.w)) continue;
                  yo[co * ohw + static_cast<std::size_t>(oy) * out_.w +
                     static_cast<std::size_t>(ox)] += v * wr[ky * k + kx];
                }
              }
            }
          }
        }
      }
    }
    return y;
  }

  Mat backward(const Mat& dy) override {
    const auto n = dy.rows();
    Mat dx = Mat::Zero(n, static_cast<Eigen::Index>(in_.flat()));
    const std::size_t ihw = in_.h * in_.w, ohw = out_.h * out_.w, k = spec_.kernel;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double* dyo = dy.row(i).data();
      const double* xi = cached_input_.row(i).data();
      double* dxi = dx.row(i).data();
      for (std::size_t co = 0; co < out_.c; ++co) {
        double acc = 0.0;
        for (std::size_t p = 0; p < ohw; ++p) acc += dyo[co * ohw + p];
        dbias_[static_cast<Eigen::Index>(co)] += acc;
      }
      for (std::size_t ci = 0; ci < in_.c; ++ci) {
        for (std::size_t iy = 0; iy < in_.h; ++iy) {
          for (std::size_t ix = 0; ix < in_.w; ++ix) {
            const double v = xi[ci * ihw + iy * in_.w + ix];
            double dv = 0.0;
            for (std::size_t co = 0; co < out_.c; ++co) {
              const double* wr = weight_.row(static_cast<Eigen::Index>(ci)).data() + co * k * k;
              double* dwr = dweight_.row(static_cast<Eigen::Index>(ci)).data() + co * k * k;
              for (std::size_t ky = 0; ky < k; ++ky) {
                const long oy = static_cast<long>(iy * spec_.stride + ky) -
                                static_cast<long>(spec_.padding);
                if (oy < 0 || oy >= static_cast<long>(out_.h)) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const long ox = static_cast<long>(ix * spec_.stride + kx) -
                                  static_cast<long>(spec_.padding);
                  if (ox < 0 || ox >= static_cast<long>(out_.w)) continue;
                  const double g = dyo[co * ohw + static_cast<std::size_t>(oy) * out_.w +
                                       static_cast<std::size_t>(ox)];
                  dv += g * wr[ky * k + kx];
                  dwr[ky * k + kx] += g * v;
                }
              }
            }
            dxi[ci * ihw + iy * in_.w + ix] = dv;
          }
        }
      }
    }
    return dx;
  }

  std::vector<Eigen::Map<Vec>> params() override { return {map_of(weight_), map_of(bias_)}; }
  std::vector<Eigen::Map<Vec>> grads() override { return {map_of(dweight_), map_of(dbias_)}; }

 private:
  DeconvSpec spec_;
  Shape3 in_, out_;
  Mat weight_, dweight_;
  Vec bias_, dbias_;
  Mat cached_input_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Model

class Model {
 public:
  Model(ArchitectureSpec spec, std::uint64_t seed)
      : spec_(std::move(spec)), seed_(seed), dropout_rng_(derive_seed(seed, 0xd307)) {
    shapes_ = spec_.chain();
    TensorShape cur = TensorShape::make_spatial(spec_.input_shape);
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      const LayerVariant& op = spec_.layers[i].op;
      std::unique_ptr<detail::Layer> layer;
      if (const auto* c = std::get_if<ConvSpec>(&op)) {
        layer = std::make_unique<detail::Conv2d>(*c, cur.dims, i);
      } else if (const auto* p = std::get_if<PoolSpec>(&op)) {
        layer = std::make_unique<detail::MaxPool2d>(*p, cur.dims);
      } else if (const auto* a = std::get_if<ActSpec>(&op)) {
        layer = std::make_unique<detail::Activation>(*a);
      } else if (std::holds_alternative<FlattenSpec>(op) ||
                 std::holds_alternative<UnflattenSpec>(op)) {
        layer = std::make_unique<detail::Reshape>();
      } else if (const auto* d = std::get_if<DenseSpec>(&op)) {
        layer = std::make_unique<detail::Dense>(*d, cur.flat);
      } else if (const auto* d = std::get_if<DropoutSpec>(&op)) {
        layer = std::make_unique<detail::Dropout>(*d);
      } else if (std::holds_alternative<BatchNormSpec>(op)) {
        layer = std::make_unique<detail::BatchNorm1d>(cur.flat);
      } else if (const auto* t = std::get_if<DeconvSpec>(&op)) {
        layer = std::make_unique<detail::ConvTranspose2d>(*t, cur.dims);
      }
      Rng layer_rng(derive_seed(seed, i));
      layer->init(layer_rng);
      layers_.push_back(std::move(layer));
      cur = shapes_[i];
    }
  }

  Model(const Model& other) : Model(other.spec_, other.seed_) {
    copy_state_from(other);
  }
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ArchitectureSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t input_dim() const { return spec_.input_shape.flat(); }
  TensorShape output_shape() const {
    return shapes_.empty() ? TensorShape::make_spatial(spec_.input_shape) : shapes_.back();
  }

  void train() { training_ = true; }
  void eval() { training_ = false; }
  bool is_training() const { return training_; }

  Mat forward(const Mat& x) {
    check_input(x);
    Mat cur = x;
    for (auto& l : layers_) cur = l->forward(cur, training_, dropout_rng_);
    return cur;
  }

  // Activations at the tagged layer boundary (inclusive), eval mode.
  Mat forward_until(const Mat& x, std::size_t layer_index) {
    check_input(x);
    if (layer_index >= layers_.size()) throw Error("forward_until: layer index out of range");
    const bool was_training = training_;
    training_ = false;
    Mat cur = x;
    for (std::size_t i = 0; i <= layer_index; ++i) {
      cur = layers_[i]->forward(cur, false, dropout_rng_);
    }
    training_ = was_training;
    return cur;
  }

  Mat backward(const Mat& dy) {
    Mat cur = dy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) cur = (*it)->backward(cur);
    return cur;
  }

  void zero_grad() {
    for (auto& l : layers_) l->zero_grad();
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) {
      for (auto p : const_cast<detail::Layer&>(*l).params()) n += static_cast<std::size_t>(p.size());
    }
    return n;
  }

  Vec flat_params() const { return gather(&detail::Layer::params); }
  Vec flat_grads() const { return gather(&detail::Layer::grads); }
  Vec flat_buffers() const { return gather(&detail::Layer::buffers); }

  void set_flat_params(const Vec& v) { scatter(&detail::Layer::params, v, "parameter"); }
  void set_flat_buffers(const Vec& v) { scatter(&detail::Layer::buffers, v, "buffer"); }

  // Layer boundary resolution for feature extraction: a spec-assigned name,
  // a decimal index, or "output" for the final layer.
  std::size_t resolve_tag(const std::string& tag) const {
    if (tag == "output") return layers_.size() - 1;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      if (spec_.layers[i].name == tag) return i;
    }
    if (!tag.empty() && tag.find_first_not_of("0123456789") == std::string::npos) {
      const std::size_t idx = std::stoul(tag);
      if (idx < layers_.size()) return idx;
    }
    throw Error("unknown layer tag '" + tag + "'");
  }

  std::size_t tagged_dim(const std::string& tag) const {
    return shapes_[resolve_tag(tag)].flat;
  }

  // Visible-for-training hooks used by the optimizers.
  std::vector<Eigen::Map<Vec>> param_views() { return views(&detail::Layer::params); }
  std::vector<Eigen::Map<Vec>> grad_views() { return views(&detail::Layer::grads); }

  void copy_state_from(const Model& other) {
    set_flat_params(other.flat_params());
    set_flat_buffers(other.flat_buffers());
  }

 private:
  void check_input(const Mat& x) const {
    if (x.cols() != static_cast<Eigen::Index>(spec_.input_shape.flat())) {
      throw Error("model forward: expected " + std::to_string(spec_.input_shape.flat()) +
                  " features per row, got " + std::to_string(x.cols()));
    }
  }

  using Accessor = std::vector<Eigen::Map<Vec>> (detail::Layer::*)();

  std::vector<Eigen::Map<Vec>> views(Accessor acc) const {
    std::vector<Eigen::Map<Vec>> all;
    for (const auto& l : layers_) {
      for (auto v : (const_cast<detail::Layer&>(*l).*acc)()) all.push_back(v);
    }
    return all;
  }

  Vec gather(Accessor acc) const {
    auto all = views(acc);
    std::size_t total = 0;
    for (auto& v : all) total += static_cast<std::size_t>(v.size());
    Vec out(static_cast<Eigen::Index>(total));
    Eigen::Index at = 0;
    for (auto& v : all) {
      out.segment(at, v.size()) = v;
      at += v.size();
    }
    return out;
  }

  void scatter(Accessor acc, const Vec& src, const char* what) {
    auto all = views(acc);
    std::size_t total = 0;
    for (auto& v : all) total += static_cast<std::size_t>(v.size());
    if (src.size() != static_cast<Eigen::Index>(total)) {
      throw Error(std::string("set_flat: ") + what + " count mismatch (" +
                  std::to_string(src.size()) + " vs " + std::to_string(total) + ")");
    }
    Eigen::Index at = 0;
    for (auto& v : all) {
      v = src.segment(at, v.size());
      at += v.size();
    }
  }

  ArchitectureSpec spec_;
  std::uint64_t seed_;
  std::vector<std::unique_ptr<detail::Layer>> layers_;
  std::vector<TensorShape> shapes_;
  Rng dropout_rng_;
  bool training_ = false;
};

inline Model build_model(const ArchitectureSpec& spec, std::uint64_t seed) {
  return Model(spec, seed);
}

inline EncodedBatch encode(Model& encoder, const Mat& batch, const IVec& labels, Modality modality) {
  EncodedBatch out;
  out.modality = modality;
  out.labels = labels;
  if (batch.rows() == 0) {
    out.vectors = Mat(0, static_cast<Eigen::Index>(encoder.output_shape().flat));
    return out;
  }
  const bool was_training = encoder.is_training();
  encoder.eval();
  out.vectors = encoder.forward(batch);
  if (was_training) encoder.train();
  return out;
}

// Returns a callable mapping input batches to the tagged layer's activations.
inline std::function<Mat(const Mat&)> extract_hidden(Model& model, const std::string& layer_tag) {
  const std::size_t idx = model.resolve_tag(layer_tag);
  return [&model, idx](const Mat& x) { return model.forward_until(x, idx); };
}

// ---------------------------------------------------------------------------
// Adam (decoupled from the model so parameter groups stay explicit)

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // L2 added to the gradient
};

class Adam {
 public:
  Adam(Model& model, const AdamConfig& cfg) : cfg_(cfg) {
    const auto n = static_cast<Eigen::Index>(model.param_count());
    m_ = Vec::Zero(n);
    v_ = Vec::Zero(n);
  }

  void step(Model& model) {
    ++t_;
    auto params = model.param_views();
    auto grads = model.grad_views();
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    Eigen::Index at = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      Vec g = grads[i];
      if (cfg_.weight_decay != 0.0) g += cfg_.weight_decay * Vec(p);
      auto m = m_.segment(at, p.size());
      auto v = v_.segment(at, p.size());
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
      v = cfg_.beta2 * v.array().matrix() + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      const Vec mhat = m / bc1;
      const Vec vhat = v / bc2;
      p -= (cfg_.learning_rate * mhat.array() / (vhat.array().sqrt() + cfg_.epsilon)).matrix();
      at += p.size();
    }
  }

 private:
  AdamConfig cfg_;
  Vec m_, v_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: JSON manifest + raw little-endian float64 parameters/buffers.

namespace detail {
constexpr char kCkptMagic[] = "CMKT.CKPT.1\n";

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_vec(std::ostream& os, const Vec& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(v.size())));
}

inline Vec read_vec(std::istream& is, std::size_t n) {
  Vec v(static_cast<Eigen::Index>(n));
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(sizeof(double) * n));
  return v;
}
}  // namespace detail

inline void save_checkpoint(const std::string& path, const Model& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open checkpoint for writing: " + path);
  const Vec params = model.flat_params();
  const Vec buffers = model.flat_buffers();
  json manifest;
  manifest["spec"] = model.spec().to_json();
  manifest["seed"] = model.seed();
  manifest["substrate_version"] = kSubstrateVersion;
  manifest["param_count"] = params.size();
  manifest["buffer_count"] = buffers.size();
  const std::string m = manifest.dump();
  os.write(detail::kCkptMagic, sizeof(detail::kCkptMagic) - 1);
  detail::write_u64(os, m.size());
  os.write(m.data(), static_cast<std::streamsize>(m.size()));
  detail::write_vec(os, params);
  detail::write_vec(os, buffers);
  if (!os) throw Error("checkpoint write failed: " + path);
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint: " + path);
  char magic[sizeof(detail::kCkptMagic) - 1];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0) {
    throw Error("not a checkpoint file: " + path);
  }
  const std::uint64_t mlen = detail::read_u64(is);
  std::string mstr(mlen, '\0');
  is.read(mstr.data(), static_cast<std::streamsize>(mlen));
  const json manifest = json::parse(mstr);
  Model model(ArchitectureSpec::from_json(manifest.at("spec")),
              manifest.at("seed").get<std::uint64_t>());
  const auto pc = manifest.at("param_count").get<std::size_t>();
  const auto bc = manifest.at("buffer_count").get<std::size_t>();
  model.set_flat_params(detail::read_vec(is, pc));
  model.set_flat_buffers(detail::read_vec(is, bc));
  if (!is) throw Error("truncated checkpoint: " + path);
  return model;
}

}  // namespace cmkt::nn
