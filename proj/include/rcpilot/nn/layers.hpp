#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "rcpilot/nn/tensor.hpp"

namespace rcpilot::nn {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using RowVecMap = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;

/// A trainable array and its gradient buffer, owned by a layer.
template <typename T>
struct Param {
  std::string name;
  Tensor<T>* value;
  Tensor<T>* grad;
};

/// Layers consume and produce batched tensors; dimension 0 is the batch.
/// backward() accumulates into parameter gradients and returns the gradient
/// with respect to the last forward input (empty when not requested).
template <typename T>
class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;

  const std::string& name() const { return name_; }

  /// Output shape for one sample given one sample's input shape.
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual Tensor<T> forward(Tensor<T> x) = 0;
  virtual Tensor<T> backward(Tensor<T> dy, bool need_input_grad = true) = 0;
  virtual std::vector<Param<T>> params() { return {}; }
  virtual void init(std::mt19937_64&) {}

 protected:
  std::string name_;
};

namespace detail {

template <typename T>
void glorot_uniform(Tensor<T>& w, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  for (auto& v : w.values()) v = static_cast<T>(u(rng));
}

inline Shape batched(std::size_t n, const Shape& s) {
  Shape out{n};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

inline Shape sample_shape(const Shape& s) { return Shape(s.begin() + 1, s.end()); }

}  // namespace detail

/// Valid-padding 2-D cross-correlation over NHWC input; weights (k,k,Cin,F).
template <typename T>
class Conv2d : public Layer<T> {
 public:
  Conv2d(std::size_t in_channels, std::size_t filters, std::size_t kernel, std::size_t stride, std::string name = "conv")
      : Layer<T>(std::move(name)),
        cin_(in_channels),
        f_(filters),
        k_(kernel),
        s_(stride),
        w_({kernel, kernel, in_channels, filters}),
        b_({filters}),
        dw_(w_.shape()),
        db_(b_.shape()) {
    require(in_channels > 0 && filters > 0 && kernel > 0 && stride > 0, Errc::invalid_argument,
            this->name_ + ": conv dimensions must be positive");
  }

  Tensor<T>& weights() { return w_; }
  Tensor<T>& bias() { return b_; }

  Shape output_shape(const Shape& in) const override {
    require(in.size() == 3 && in[2] == cin_, Errc::shape_mismatch,
            this->name_ + ": input " + shape_str(in) + " does not match (H,W," + std::to_string(cin_) + ")");
    require(in[0] >= k_ && in[1] >= k_, Errc::shape_mismatch,
            this->name_ + ": input " + shape_str(in) + " smaller than kernel " + std::to_string(k_));
    return {(in[0] - k_) / s_ + 1, (in[1] - k_) / s_ + 1, f_};
  }

  Tensor<T> forward(Tensor<T> x) override {
    require(x.rank() == 4, Errc::shape_mismatch, this->name_ + ": expected NHWC input, got " + shape_str(x.shape()));
    const Shape out = output_shape(detail::sample_shape(x.shape()));
    x_ = std::move(x);
    const std::size_t n = x_.dim(0);
    Tensor<T> y(detail::batched(n, out));
    const std::size_t rows = out[0] * out[1];
    const std::size_t kk = k_ * k_ * cin_;
    ConstMatMap<T> wm(w_.data(), kk, f_);
    for (std::size_t n0 = 0; n0 < n; n0 += chunk(rows, kk)) {
      const std::size_t m = std::min(chunk(rows, kk), n - n0);
      im2col(x_, n0, m, out);
      ConstMatMap<T> cols(cols_.data(), m * rows, kk);
      MatMap<T> ym(y.data() + n0 * rows * f_, m * rows, f_);
      ym.noalias() = cols * wm;
      ym.rowwise() += RowVecMap<T>(b_.data(), f_);
    }
    return y;
  }

  Tensor<T> backward(Tensor<T> dy, bool need_input_grad = true) override {
    const Shape out = output_shape(detail::sample_shape(x_.shape()));
    require_shape(dy, detail::batched(x_.dim(0), out), this->name_ + " backward");
    const std::size_t n = x_.dim(0);
    const std::size_t rows = out[0] * out[1];
    const std::size_t kk = k_ * k_ * cin_;
    Tensor<T> dx;
    if (need_input_grad) dx = Tensor<T>(x_.shape());
    ConstMatMap<T> wm(w_.data(), kk, f_);
    MatMap<T> dwm(dw_.data(), kk, f_);
    RowVecMap<T> dbm(db_.data(), f_);
    for (std::size_t n0 = 0; n0 < n; n0 += chunk(rows, kk)) {
      const std::size_t m = std::min(chunk(rows, kk), n - n0);
      im2col(x_, n0, m, out);
      ConstMatMap<T> cols(cols_.data(), m * rows, kk);
      ConstMatMap<T> dym(dy.data() + n0 * rows * f_, m * rows, f_);
      dwm.noalias() += cols.transpose() * dym;
      dbm += dym.colwise().sum();
      if (need_input_grad) {
        MatMap<T> dcols(cols_.data(), m * rows, kk);
        dcols.noalias() = dym * wm.transpose();
        col2im(dx, n0, m, out);
      }
    }
    return dx;
  }

  std::vector<Param<T>> params() override {
    return {{this->name_ + "/kernel", &w_, &dw_}, {this->name_ + "/bias", &b_, &db_}};
  }

  void init(std::mt19937_64& rng) override {
    detail::glorot_uniform(w_, k_ * k_ * cin_, k_ * k_ * f_, rng);
    b_.fill(T{0});
  }

 private:
  // Samples per im2col block, keeping the buffer near 1M elements.
  static std::size_t chunk(std::size_t rows, std::size_t kk) {
    return std::max<std::size_t>(1, (std::size_t{1} << 20) / (rows * kk));
  }

  // One im2col row is k contiguous runs of k*Cin values (NHWC).
  void im2col(const Tensor<T>& x, std::size_t n0, std::size_t m, const Shape& out) {
    const std::size_t h = x.dim(1), w = x.dim(2);
    const std::size_t run = k_ * cin_;
    const std::size_t kk = k_ * run;
    cols_.resize(m * out[0] * out[1] * kk);
    T* dst = cols_.data();
    for (std::size_t i = 0; i < m; ++i) {
      const T* img = x.data() + (n0 + i) * h * w * cin_;
      for (std::size_t oy = 0; oy < out[0]; ++oy)
        for (std::size_t ox = 0; ox < out[1]; ++ox)
          for (std::size_t ky = 0; ky < k_; ++ky) {
            std::memcpy(dst, img + ((oy * s_ + ky) * w + ox * s_) * cin_, run * sizeof(T));
            dst += run;
          }
    }
  }

  void col2im(Tensor<T>& dx, std::size_t n0, std::size_t m, const Shape& out) {
    const std::size_t h = dx.dim(1), w = dx.dim(2);
    const std::size_t run = k_ * cin_;
    const T* src = cols_.data();
    for (std::size_t i = 0; i < m; ++i) {
      T* img = dx.data() + (n0 + i) * h * w * cin_;
      for (std::size_t oy = 0; oy < out[0]; ++oy)
        for (std::size_t ox = 0; ox < out[1]; ++ox)
          for (std::size_t ky = 0; ky < k_; ++ky) {
            T* d = img + ((oy * s_ + ky) * w + ox * s_) * cin_;
            for (std::size_t j = 0; j < run; ++j) d[j] += src[j];
            src += run;
          }
    }
  }

  std::size_t cin_, f_, k_, s_;
  Tensor<T> w_, b_, dw_, db_;
  Tensor<T> x_;
  AlignedVector<T> cols_;
};

/// y = x W + b over (N, D) input; W is (D, U).
template <typename T>
class Dense : public Layer<T> {
 public:
  Dense(std::size_t in, std::size_t units, std::string name = "dense")
      : Layer<T>(std::move(name)), in_(in), units_(units), w_({in, units}), b_({units}), dw_(w_.shape()), db_(b_.shape()) {
    require(in > 0 && units > 0, Errc::invalid_argument, this->name_ + ": dense dimensions must be positive");
  }

  Tensor<T>& weights() { return w_; }
  Tensor<T>& bias() { return b_; }

  Shape output_shape(const Shape& in) const override {
    require(in.size() == 1 && in[0] == in_, Errc::shape_mismatch,
            this->name_ + ": input " + shape_str(in) + " does not match (" + std::to_string(in_) + ")");
    return {units_};
  }

  Tensor<T> forward(Tensor<T> x) override {
    require(x.rank() == 2, Errc::shape_mismatch, this->name_ + ": expected (N,D) input, got " + shape_str(x.shape()));
    output_shape(detail::sample_shape(x.shape()));
    x_ = std::move(x);
    const std::size_t n = x_.dim(0);
    Tensor<T> y({n, units_});
    MatMap<T> ym(y.data(), n, units_);
    ym.noalias() = ConstMatMap<T>(x_.data(), n, in_) * ConstMatMap<T>(w_.data(), in_, units_);
    ym.rowwise() += RowVecMap<T>(b_.data(), units_);
    return y;
  }

  Tensor<T> backward(Tensor<T> dy, bool need_input_grad = true) override {
    const std::size_t n = x_.dim(0);
    require_shape(dy, {n, units_}, this->name_ + " backward");
    ConstMatMap<T> dym(dy.data(), n, units_);
    MatMap<T>(dw_.data(), in_, units_).noalias() += ConstMatMap<T>(x_.data(), n, in_).transpose() * dym;
    RowVecMap<T>(db_.data(), units_) += dym.colwise().sum();
    Tensor<T> dx;
    if (need_input_grad) {
      dx = Tensor<T>({n, in_});
      MatMap<T>(dx.data(), n, in_).noalias() = dym * ConstMatMap<T>(w_.data(), in_, units_).transpose();
    }
    return dx;
  }

  std::vector<Param<T>> params() override {
    return {{this->name_ + "/kernel", &w_, &dw_}, {this->name_ + "/bias", &b_, &db_}};
  }

  void init(std::mt19937_64& rng) override {
    detail::glorot_uniform(w_, in_, units_, rng);
    b_.fill(T{0});
  }

 private:
  std::size_t in_, units_;
  Tensor<T> w_, b_, dw_, db_;
  Tensor<T> x_;
};

template <typename T>
class ReLU : public Layer<T> {
 public:
  explicit ReLU(std::string name = "relu") : Layer<T>(std::move(name)) {}

  Shape output_shape(const Shape& in) const override { return in; }

  Tensor<T> forward(Tensor<T> x) override {
    shape_ = x.shape();
    mask_.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      mask_[i] = x[i] > T{0};
      if (!mask_[i]) x[i] = T{0};
    }
    return x;
  }

  Tensor<T> backward(Tensor<T> dy, bool need_input_grad = true) override {
    require_shape(dy, shape_, this->name_ + " backward");
    if (!need_input_grad) return {};
    for (std::size_t i = 0; i < dy.size(); ++i)
      if (!mask_[i]) dy[i] = T{0};
    return dy;
  }

 private:
  Shape shape_;
  std::vector<std::uint8_t> mask_;
};

template <typename T>
class Flatten : public Layer<T> {
 public:
  explicit Flatten(std::string name = "flatten") : Layer<T>(std::move(name)) {}

  Shape output_shape(const Shape& in) const override { return {shape_size(in)}; }

  Tensor<T> forward(Tensor<T> x) override {
    require(x.rank() >= 1, Errc::shape_mismatch, this->name_ + ": scalar input");
    in_shape_ = x.shape();
    const std::size_t n = x.dim(0);
    return std::move(x).reshaped({n, x.size() / std::max<std::size_t>(1, n)});
  }

  Tensor<T> backward(Tensor<T> dy, bool need_input_grad = true) override {
    if (!need_input_grad) return {};
    return std::move(dy).reshaped(in_shape_);
  }

 private:
  Shape in_shape_;
};

/// Applies the wrapped layer to every timestep of (N, T, ...) input.
template <typename T>
class TimeDistributed : public Layer<T> {
 public:
  explicit TimeDistributed(std::unique_ptr<Layer<T>> inner)
      : Layer<T>("td_" + inner->name()), inner_(std::move(inner)) {}

  Layer<T>& inner() { return *inner_; }

  Shape output_shape(const Shape& in) const override {
    require(!in.empty(), Errc::shape_mismatch, this->name_ + ": input needs a time dimension");
    Shape out{in[0]};
    const Shape inner = inner_->output_shape(detail::sample_shape(in));
    out.insert(out.end(), inner.begin(), inner.end());
    return out;
  }

  Tensor<T> forward(Tensor<T> x) override {
    require(x.rank() >= 3, Errc::shape_mismatch, this->name_ + ": expected (N,T,...) input, got " + shape_str(x.shape()));
    n_ = x.dim(0);
    t_ = x.dim(1);
    Shape merged{n_ * t_};
    merged.insert(merged.end(), x.shape().begin() + 2, x.shape().end());
    auto y = inner_->forward(std::move(x).reshaped(merged));
    return std::move(y).reshaped(split(y.shape()));
  }

  Tensor<T> backward(Tensor<T> dy, bool need_input_grad = true) override {
    Shape merged{n_ * t_};
    merged.insert(merged.end(), dy.shape().begin() + 2, dy.shape().end());
    auto dx = inner_->backward(std::move(dy).reshaped(merged), need_input_grad);
    if (!need_input_grad) return dx;
    return std::move(dx).reshaped(split(dx.shape()));
  }

  std::vector<Param<T>> params() override { return inner_->params(); }
  void init(std::mt19937_64& rng) override { inner_->init(rng); }

 private:
  Shape split(const Shape& merged) const {
    Shape s{n_, t_};
    s.insert(s.end(), merged.begin() + 1, merged.end());
    return s;
  }

  std::unique_ptr<Layer<T>> inner_;
  std::size_t n_ = 0, t_ = 0;
};

/// Ordered layer stack. Every activation is checked for NaN/Inf.
template <typename T>
class Sequential {
 public:
  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  void add(std::unique_ptr<Layer<T>> layer) { layers_.push_back(std::move(layer)); }

  std::size_t size() const { return layers_.size(); }
  Layer<T>& operator[](std::size_t i) { return *layers_[i]; }

  Tensor<T> forward(Tensor<T> h) {
    for (auto& l : layers_) {
      h = l->forward(std::move(h));
      require_finite(h, "layer '" + l->name() + "'");
    }
    return h;
  }

  Tensor<T> backward(Tensor<T> g, bool need_input_grad = false) {
    for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i]->backward(std::move(g), i > 0 || need_input_grad);
    return g;
  }

  /// Per-sample output shape after each layer.
  std::vector<std::pair<std::string, Shape>> trace(Shape in) const {
    std::vector<std::pair<std::string, Shape>> out;
    for (const auto& l : layers_) {
      in = l->output_shape(in);
      out.emplace_back(l->name(), in);
    }
    return out;
  }

  std::vector<Param<T>> params() {
    std::vector<Param<T>> out;
    for (auto& l : layers_)
      for (auto& p : l->params()) out.push_back(p);
    return out;
  }

  void init(std::mt19937_64& rng) {
    for (auto& l : layers_) l->init(rng);
  }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

}  // namespace rcpilot::nn
