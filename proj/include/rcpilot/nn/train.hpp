#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <vector>

#include "rcpilot/nn/models.hpp"
#include "rcpilot/nn/optim.hpp"

namespace rcpilot::nn {

/// Indexed source of (input, target) samples. Targets are (steering, throttle).
template <typename T>
class DataView {
 public:
  virtual ~DataView() = default;
  virtual std::size_t size() const = 0;
  virtual Shape sample_shape() const = 0;
  /// Fills x (N, sample...) and y (N, 2) for the given indices.
  virtual void fill(std::span<const std::size_t> idx, Tensor<T>& x, Tensor<T>& y) const = 0;
};

/// Samples held in memory, mostly for tests and small experiments.
template <typename T>
class MemoryView : public DataView<T> {
 public:
  explicit MemoryView(Shape sample) : sample_(std::move(sample)) {}

  void add(const Tensor<T>& x, double steering, double throttle) {
    require(x.shape() == sample_, Errc::shape_mismatch,
            "sample " + shape_str(x.shape()) + " does not match " + shape_str(sample_));
    inputs_.insert(inputs_.end(), x.values().begin(), x.values().end());
    targets_.push_back(static_cast<T>(steering));
    targets_.push_back(static_cast<T>(throttle));
  }

  std::size_t size() const override { return targets_.size() / 2; }
  Shape sample_shape() const override { return sample_; }

  void fill(std::span<const std::size_t> idx, Tensor<T>& x, Tensor<T>& y) const override {
    const std::size_t per = shape_size(sample_);
    x.resize(detail::batched(idx.size(), sample_));
    y.resize({idx.size(), 2});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      require(idx[i] < size(), Errc::invalid_argument, "sample index out of range");
      std::copy_n(inputs_.data() + idx[i] * per, per, x.data() + i * per);
      y[2 * i] = targets_[2 * idx[i]];
      y[2 * i + 1] = targets_[2 * idx[i] + 1];
    }
  }

 private:
  Shape sample_;
  std::vector<T> inputs_;
  std::vector<T> targets_;
};

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool early_stopping = true;
  std::size_t patience = 5;
  double min_delta = 1e-5;
  std::uint64_t seed = 0;

  void validate() const {
    require(epochs >= 1, Errc::invalid_argument, "epochs must be >= 1");
    require(batch_size >= 1, Errc::invalid_argument, "batch size must be >= 1");
    require(learning_rate > 0 && std::isfinite(learning_rate), Errc::invalid_argument, "learning rate must be > 0");
    require(patience >= 1, Errc::invalid_argument, "patience must be >= 1");
  }

  AdamConfig adam() const { return {learning_rate, beta1, beta2, epsilon}; }
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double train_mse = 0.0;
  double val_mse = 0.0;
  double seconds = 0.0;
};

struct TrainingReport {
  std::vector<EpochStats> epochs;
  std::size_t best_epoch = 0;
  double best_val_mse = 0.0;
  double wall_seconds = 0.0;
  bool stopped_early = false;
};

inline void write_report_csv(const TrainingReport& r, std::ostream& out) {
  out << "epoch,train_mse,val_mse,seconds\n";
  out.precision(9);
  for (const auto& e : r.epochs) out << e.epoch << ',' << e.train_mse << ',' << e.val_mse << ',' << e.seconds << '\n';
}

/// One optimizer step on a batch; returns the batch loss before the update.
template <typename T>
double train_step(Model<T>& model, Adam<T>& opt, const Tensor<T>& x, const Tensor<T>& y) {
  auto params = model.params();
  const auto pred = model.forward(x);
  const double loss = mse(pred, y);
  zero_grad(params);
  model.backward(mse_grad(pred, y));
  opt.step();
  return loss;
}

/// Mean squared error over a whole view, batch by batch.
template <typename T>
double evaluate_mse(Model<T>& model, const DataView<T>& view, std::size_t batch_size = 64) {
  require(view.size() > 0, Errc::empty_dataset, "cannot evaluate on an empty view");
  std::vector<std::size_t> idx(view.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Tensor<T> x, y;
  double total = 0.0;
  for (std::size_t b = 0; b < idx.size(); b += batch_size) {
    const auto batch = std::span(idx).subspan(b, std::min(batch_size, idx.size() - b));
    view.fill(batch, x, y);
    total += mse(model.forward(x), y) * static_cast<double>(batch.size());
  }
  return total / static_cast<double>(idx.size());
}

/// Adam on joint MSE with per-epoch shuffling. The weights of the best
/// validation epoch are restored before returning.
template <typename T>
TrainingReport train(Model<T>& model, const DataView<T>& train_view, const DataView<T>& val_view, const TrainConfig& cfg,
                     const std::function<void(const EpochStats&)>& on_epoch = {}) {
  cfg.validate();
  require(train_view.size() > 0, Errc::empty_dataset, "training view is empty");
  require(val_view.size() > 0, Errc::empty_dataset, "validation view is empty");
  require(train_view.sample_shape() == model.input_shape(), Errc::shape_mismatch,
          "training samples " + shape_str(train_view.sample_shape()) + " do not match model input " +
              shape_str(model.input_shape()));
  require(val_view.sample_shape() == model.input_shape(), Errc::shape_mismatch,
          "validation samples " + shape_str(val_view.sample_shape()) + " do not match model input " +
              shape_str(model.input_shape()));

  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  auto params = model.params();
  Adam<T> opt(params, cfg.adam());
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train_view.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainingReport report;
  std::vector<Tensor<T>> best;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  Tensor<T> x, y;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    double val = 0.0;
    try {
      for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
        const auto batch = std::span(order).subspan(b, std::min(cfg.batch_size, order.size() - b));
        train_view.fill(batch, x, y);
        sum += train_step(model, opt, x, y) * static_cast<double>(batch.size());
      }
      val = evaluate_mse(model, val_view, cfg.batch_size);
    } catch (const Error& e) {
      if (e.code() != Errc::non_finite) throw;
      throw Error(Errc::diverged, "training diverged in epoch " + std::to_string(epoch) + " (" + e.what() + ")");
    }
    const double train_mse = sum / static_cast<double>(order.size());
    require(std::isfinite(train_mse) && std::isfinite(val), Errc::diverged,
            "training diverged in epoch " + std::to_string(epoch) + " (loss is not finite)");

    EpochStats st{epoch, train_mse, val, std::chrono::duration<double>(clock::now() - t0).count()};
    report.epochs.push_back(st);
    if (on_epoch) on_epoch(st);

    if (val < best_val - cfg.min_delta) {
      best_val = val;
      report.best_epoch = epoch;
      best.clear();
      for (const auto& p : params) best.push_back(*p.value);
      since_best = 0;
    } else if (++since_best >= cfg.patience && cfg.early_stopping) {
      report.stopped_early = epoch < cfg.epochs;
      break;
    }
  }
  if (!best.empty())
    for (std::size_t i = 0; i < params.size(); ++i) *params[i].value = best[i];
  report.best_val_mse = best_val;
  report.wall_seconds = std::chrono::duration<double>(clock::now() - start).count();
  return report;
}

}  // namespace rcpilot::nn
