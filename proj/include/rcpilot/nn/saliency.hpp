#pragma once

#include <algorithm>
#include <cmath>

#include "rcpilot/nn/models.hpp"
#include "rcpilot/nn/optim.hpp"
#include "rcpilot/png.hpp"

namespace rcpilot::nn {

/// |d steering / d input| reduced over channels by max and scaled to 0..255,
/// as a 160x120 single-channel image. Sequence models report the newest frame.
template <typename T>
png::Image saliency(Model<T>& model, const Tensor<T>& input) {
  require(input.shape() == model.input_shape(), Errc::shape_mismatch,
          "saliency input " + shape_str(input.shape()) + " does not match " + shape_str(model.input_shape()));
  auto params = model.params();
  zero_grad(params);
  const auto y = model.forward(input);
  Tensor<T> dy(y.shape());
  dy[0] = T{1};
  const auto dx = model.backward(std::move(dy), true);
  zero_grad(params);

  const std::size_t hw = kInputHeight * kInputWidth;
  const std::size_t frame = hw * kInputChannels;
  const T* g = dx.data() + (dx.size() - frame);
  std::vector<double> mag(hw, 0.0);
  double peak = 0.0;
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t c = 0; c < kInputChannels; ++c)
      mag[p] = std::max(mag[p], std::abs(static_cast<double>(g[p * kInputChannels + c])));
    peak = std::max(peak, mag[p]);
  }
  png::Image img{static_cast<int>(kInputWidth), static_cast<int>(kInputHeight), 1, std::vector<std::uint8_t>(hw, 0)};
  if (peak > 0)
    for (std::size_t p = 0; p < hw; ++p) img.pixels[p] = static_cast<std::uint8_t>(std::lround(255.0 * mag[p] / peak));
  return img;
}

}  // namespace rcpilot::nn
