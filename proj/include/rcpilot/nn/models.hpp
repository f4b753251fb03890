#pragma once

#include <map>
#include <random>
#include <string>
#include <utility>

#include "rcpilot/nn/layers.hpp"
#include "rcpilot/nn/lstm.hpp"

namespace rcpilot::nn {

constexpr std::size_t kInputHeight = 120;
constexpr std::size_t kInputWidth = 160;
constexpr std::size_t kInputChannels = 3;

/// Two parallel single-unit linear heads over the same features, output (N, 2)
/// as (steering, throttle).
template <typename T>
class SplitHeads : public Layer<T> {
 public:
  explicit SplitHeads(std::size_t in)
      : Layer<T>("heads"), steering_(in, 1, "head_steering"), throttle_(in, 1, "head_throttle"), in_(in) {}

  Shape output_shape(const Shape& in) const override {
    steering_.output_shape(in);
    return {2};
  }

  Tensor<T> forward(Tensor<T> x) override {
    const std::size_t batch = x.dim(0);
    const auto s = steering_.forward(x);
    const auto t = throttle_.forward(std::move(x));
    Tensor<T> y({batch, 2});
    for (std::size_t n = 0; n < batch; ++n) {
      y[2 * n] = s[n];
      y[2 * n + 1] = t[n];
    }
    return y;
  }

  Tensor<T> backward(Tensor<T> dy, bool need_input_grad = true) override {
    const std::size_t n = dy.dim(0);
    Tensor<T> ds({n, 1}), dt({n, 1});
    for (std::size_t i = 0; i < n; ++i) {
      ds[i] = dy[2 * i];
      dt[i] = dy[2 * i + 1];
    }
    auto a = steering_.backward(ds, need_input_grad);
    auto b = throttle_.backward(dt, need_input_grad);
    if (!need_input_grad) return {};
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
  }

  std::vector<Param<T>> params() override {
    auto p = steering_.params();
    for (auto& q : throttle_.params()) p.push_back(q);
    return p;
  }

  void init(std::mt19937_64& rng) override {
    steering_.init(rng);
    throttle_.init(rng);
  }

 private:
  Dense<T> steering_, throttle_;
  std::size_t in_;
};

enum class Architecture { linear, rnn };

inline std::string architecture_name(Architecture a) { return a == Architecture::linear ? "linear" : "rnn"; }

inline Architecture parse_architecture(const std::string& s) {
  if (s == "linear") return Architecture::linear;
  if (s == "rnn") return Architecture::rnn;
  throw Error(Errc::invalid_argument, "unknown model type '" + s + "' (expected linear or rnn)");
}

struct ModelConfig {
  Architecture architecture = Architecture::linear;
  /// RNN sequence length.
  std::size_t sequence_length = 3;
  /// Linear model: one Dense(2) head instead of two single-unit heads.
  bool single_head = false;

  /// Hyperparameters stored in the weight container.
  std::map<std::string, std::int64_t> hyperparameters() const {
    if (architecture == Architecture::rnn) return {{"sequence_length", static_cast<std::int64_t>(sequence_length)}};
    return {{"single_head", single_head ? 1 : 0}};
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Steering/throttle regressor over 160x120 RGB frames scaled to [0, 1].
template <typename T>
class Model {
 public:
  explicit Model(ModelConfig cfg = {}, std::uint64_t seed = 0) : cfg_(cfg) {
    if (cfg.architecture == Architecture::linear) build_linear();
    else build_rnn();
    reinit(seed);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  Architecture architecture() const { return cfg_.architecture; }

  /// Per-sample input shape: (120,160,3) or (T,120,160,3).
  Shape input_shape() const {
    Shape s{kInputHeight, kInputWidth, kInputChannels};
    if (cfg_.architecture == Architecture::rnn) s.insert(s.begin(), cfg_.sequence_length);
    return s;
  }

  void reinit(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    net_.init(rng);
  }

  /// Batched (N, ...) or single-sample input; returns (N, 2).
  Tensor<T> forward(Tensor<T> x) {
    const Shape in = input_shape();
    if (x.shape() == in) return net_.forward(std::move(x).reshaped(detail::batched(1, in)));
    require(x.rank() == in.size() + 1 && detail::sample_shape(x.shape()) == in && x.dim(0) > 0,
            Errc::shape_mismatch, "model input " + shape_str(x.shape()) + " does not match " + shape_str(in));
    return net_.forward(std::move(x));
  }

  /// Backpropagates dL/dy (N, 2) from the last forward; returns the input
  /// gradient only when requested.
  Tensor<T> backward(Tensor<T> dy, bool need_input_grad = false) { return net_.backward(std::move(dy), need_input_grad); }

  /// Forward one sample; returns unclamped (steering, throttle).
  std::pair<double, double> predict(const Tensor<T>& x) {
    require(x.shape() == input_shape(), Errc::shape_mismatch,
            "model input " + shape_str(x.shape()) + " does not match " + shape_str(input_shape()));
    const auto y = forward(x);
    return {static_cast<double>(y[0]), static_cast<double>(y[1])};
  }

  std::vector<Param<T>> params() { return net_.params(); }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (const auto& p : params()) n += p.value->size();
    return n;
  }

  std::vector<std::pair<std::string, Shape>> trace_shapes() const { return net_.trace(input_shape()); }

  Sequential<T>& network() { return net_; }

 private:
  void build_linear() {
    const std::size_t filters[5] = {24, 32, 64, 64, 64};
    const std::size_t kernels[5] = {5, 5, 5, 3, 3};
    const std::size_t strides[5] = {2, 2, 2, 2, 1};
    std::size_t cin = kInputChannels;
    for (int i = 0; i < 5; ++i) {
      const auto id = std::to_string(i + 1);
      net_.template add<Conv2d<T>>(cin, filters[i], kernels[i], strides[i], "conv" + id);
      net_.template add<ReLU<T>>("relu_conv" + id);
      cin = filters[i];
    }
    net_.template add<Flatten<T>>("flatten");
    const std::size_t flat = shape_size(net_.trace({kInputHeight, kInputWidth, kInputChannels}).back().second);
    net_.template add<Dense<T>>(flat, 100, "dense1");
    net_.template add<ReLU<T>>("relu_dense1");
    net_.template add<Dense<T>>(100, 50, "dense2");
    net_.template add<ReLU<T>>("relu_dense2");
    if (cfg_.single_head) net_.template add<Dense<T>>(50, 2, "head");
    else net_.template add<SplitHeads<T>>(50);
  }

  void build_rnn() {
    require(cfg_.sequence_length >= 1, Errc::invalid_argument, "sequence length must be >= 1");
    const std::size_t filters[4] = {24, 32, 32, 32};
    const std::size_t kernels[4] = {5, 5, 3, 3};
    const std::size_t strides[4] = {2, 2, 2, 1};
    std::size_t cin = kInputChannels;
    for (int i = 0; i < 4; ++i) {
      const auto id = std::to_string(i + 1);
      net_.add(std::make_unique<TimeDistributed<T>>(
          std::make_unique<Conv2d<T>>(cin, filters[i], kernels[i], strides[i], "conv" + id)));
      net_.template add<ReLU<T>>("relu_conv" + id);
      cin = filters[i];
    }
    net_.add(std::make_unique<TimeDistributed<T>>(std::make_unique<Flatten<T>>("flatten")));
    const Shape seq = net_.trace(input_shape()).back().second;
    net_.template add<Lstm<T>>(seq[1], 128, true, "lstm1");
    net_.template add<Lstm<T>>(128, 128, false, "lstm2");
    net_.template add<Dense<T>>(128, 128, "dense1");
    net_.template add<ReLU<T>>("relu_dense1");
    net_.template add<Dense<T>>(128, 64, "dense2");
    net_.template add<ReLU<T>>("relu_dense2");
    net_.template add<Dense<T>>(64, 10, "dense3");
    net_.template add<ReLU<T>>("relu_dense3");
    net_.template add<Dense<T>>(10, 2, "head");
  }

  ModelConfig cfg_;
  Sequential<T> net_;
};

}  // namespace rcpilot::nn
