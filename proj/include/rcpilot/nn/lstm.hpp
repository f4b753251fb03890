#pragma once

#include <cmath>

#include "rcpilot/nn/layers.hpp"

namespace rcpilot::nn {

/// LSTM over (N, T, D) input. Gate order i, f, g, o; Wx is (D, 4H), Wh is
/// (H, 4H). Output is (N, T, H) with return_sequences, else (N, H).
template <typename T>
class Lstm : public Layer<T> {
 public:
  Lstm(std::size_t input_dim, std::size_t units, bool return_sequences, std::string name = "lstm")
      : Layer<T>(std::move(name)),
        d_(input_dim),
        h_(units),
        seq_(return_sequences),
        wx_({input_dim, 4 * units}),
        wh_({units, 4 * units}),
        b_({4 * units}),
        dwx_(wx_.shape()),
        dwh_(wh_.shape()),
        db_(b_.shape()) {
    require(input_dim > 0 && units > 0, Errc::invalid_argument, this->name_ + ": lstm dimensions must be positive");
  }

  Tensor<T>& input_weights() { return wx_; }
  Tensor<T>& recurrent_weights() { return wh_; }
  Tensor<T>& bias() { return b_; }

  Shape output_shape(const Shape& in) const override {
    require(in.size() == 2 && in[1] == d_ && in[0] > 0, Errc::shape_mismatch,
            this->name_ + ": input " + shape_str(in) + " does not match (T," + std::to_string(d_) + ")");
    if (seq_) return {in[0], h_};
    return {h_};
  }

  Tensor<T> forward(Tensor<T> x) override {
    require(x.rank() == 3, Errc::shape_mismatch, this->name_ + ": expected (N,T,D) input, got " + shape_str(x.shape()));
    output_shape(detail::sample_shape(x.shape()));
    x_ = std::move(x);
    n_ = x_.dim(0);
    t_ = x_.dim(1);
    const std::size_t g4 = 4 * h_;
    // gates_ rows are (n, t) pairs in input order, holding activated i, f, g, o
    gates_ = Tensor<T>({n_ * t_, g4});
    MatMap<T> z(gates_.data(), n_ * t_, g4);
    z.noalias() = ConstMatMap<T>(x_.data(), n_ * t_, d_) * ConstMatMap<T>(wx_.data(), d_, g4);
    z.rowwise() += RowVecMap<T>(b_.data(), g4);
    c_ = Tensor<T>({n_ * t_, h_});
    hs_ = Tensor<T>({n_ * t_, h_});
    RowMat<T> hprev = RowMat<T>::Zero(n_, h_);
    RowMat<T> cprev = RowMat<T>::Zero(n_, h_);
    RowMat<T> rec(n_, g4);
    for (std::size_t t = 0; t < t_; ++t) {
      rec.noalias() = hprev * ConstMatMap<T>(wh_.data(), h_, g4);
      for (std::size_t n = 0; n < n_; ++n) {
        T* zr = gates_.data() + (n * t_ + t) * g4;
        T* cr = c_.data() + (n * t_ + t) * h_;
        T* hr = hs_.data() + (n * t_ + t) * h_;
        for (std::size_t j = 0; j < h_; ++j) {
          const T i = sigmoid(zr[j] + rec(n, j));
          const T f = sigmoid(zr[h_ + j] + rec(n, h_ + j));
          const T g = std::tanh(zr[2 * h_ + j] + rec(n, 2 * h_ + j));
          const T o = sigmoid(zr[3 * h_ + j] + rec(n, 3 * h_ + j));
          zr[j] = i;
          zr[h_ + j] = f;
          zr[2 * h_ + j] = g;
          zr[3 * h_ + j] = o;
          const T c = f * cprev(n, j) + i * g;
          cr[j] = c;
          hr[j] = o * std::tanh(c);
          cprev(n, j) = c;
          hprev(n, j) = hr[j];
        }
      }
    }
    if (seq_) return hs_.reshaped({n_, t_, h_});
    Tensor<T> y({n_, h_});
    for (std::size_t n = 0; n < n_; ++n)
      std::copy_n(hs_.data() + (n * t_ + t_ - 1) * h_, h_, y.data() + n * h_);
    return y;
  }

  Tensor<T> backward(Tensor<T> dy, bool need_input_grad = true) override {
    require_shape(dy, seq_ ? Shape{n_, t_, h_} : Shape{n_, h_}, this->name_ + " backward");
    const std::size_t g4 = 4 * h_;
    Tensor<T> dz({n_ * t_, g4});
    RowMat<T> dh_next = RowMat<T>::Zero(n_, h_);
    RowMat<T> dc_next = RowMat<T>::Zero(n_, h_);
    RowMat<T> dz_t(n_, g4);
    ConstMatMap<T> wh(wh_.data(), h_, g4);
    MatMap<T> dwh(dwh_.data(), h_, g4);
    RowMat<T> hprev(n_, h_);
    for (std::size_t t = t_; t-- > 0;) {
      for (std::size_t n = 0; n < n_; ++n) {
        const T* a = gates_.data() + (n * t_ + t) * g4;
        const T* cr = c_.data() + (n * t_ + t) * h_;
        const T* dyr = nullptr;
        if (seq_) dyr = dy.data() + (n * t_ + t) * h_;
        else if (t == t_ - 1) dyr = dy.data() + n * h_;
        for (std::size_t j = 0; j < h_; ++j) {
          const T i = a[j], f = a[h_ + j], g = a[2 * h_ + j], o = a[3 * h_ + j];
          const T dh = dh_next(n, j) + (dyr ? dyr[j] : T{0});
          const T tc = std::tanh(cr[j]);
          const T cp = t > 0 ? c_[(n * t_ + t - 1) * h_ + j] : T{0};
          const T dc = dh * o * (T{1} - tc * tc) + dc_next(n, j);
          dz_t(n, j) = dc * g * i * (T{1} - i);
          dz_t(n, h_ + j) = dc * cp * f * (T{1} - f);
          dz_t(n, 2 * h_ + j) = dc * i * (T{1} - g * g);
          dz_t(n, 3 * h_ + j) = dh * tc * o * (T{1} - o);
          dc_next(n, j) = dc * f;
        }
        std::copy_n(dz_t.data() + n * g4, g4, dz.data() + (n * t_ + t) * g4);
        if (t > 0) std::copy_n(hs_.data() + (n * t_ + t - 1) * h_, h_, hprev.data() + n * h_);
      }
      if (t > 0) dwh.noalias() += hprev.transpose() * dz_t;
      dh_next.noalias() = dz_t * wh.transpose();
    }
    ConstMatMap<T> dzm(dz.data(), n_ * t_, g4);
    MatMap<T>(dwx_.data(), d_, g4).noalias() += ConstMatMap<T>(x_.data(), n_ * t_, d_).transpose() * dzm;
    RowVecMap<T>(db_.data(), g4) += dzm.colwise().sum();
    Tensor<T> dx;
    if (need_input_grad) {
      dx = Tensor<T>({n_, t_, d_});
      MatMap<T>(dx.data(), n_ * t_, d_).noalias() = dzm * ConstMatMap<T>(wx_.data(), d_, g4).transpose();
    }
    return dx;
  }

  std::vector<Param<T>> params() override {
    return {{this->name_ + "/kernel", &wx_, &dwx_},
            {this->name_ + "/recurrent_kernel", &wh_, &dwh_},
            {this->name_ + "/bias", &b_, &db_}};
  }

  /// Glorot weights, zero bias except the forget gate at 1.
  void init(std::mt19937_64& rng) override {
    detail::glorot_uniform(wx_, d_, 4 * h_, rng);
    detail::glorot_uniform(wh_, h_, 4 * h_, rng);
    b_.fill(T{0});
    for (std::size_t j = 0; j < h_; ++j) b_[h_ + j] = T{1};
  }

 private:
  static T sigmoid(T v) { return T{1} / (T{1} + std::exp(-v)); }

  std::size_t d_, h_;
  bool seq_;
  Tensor<T> wx_, wh_, b_, dwx_, dwh_, db_;
  Tensor<T> x_, gates_, c_, hs_;
  std::size_t n_ = 0, t_ = 0;
};

}  // namespace rcpilot::nn
