#include "tsseg/backbone.hpp"

namespace tsseg {

void BackboneConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("backbone." + field + ": " + why);
  };
  if (in_channels < 1) fail("in_channels", "must be >= 1");
  if (num_classes < 2) fail("num_classes", "must be >= 2");
  if (base_width < 1) fail("base_width", "must be >= 1");
  if (depth < 2) fail("depth", "must be >= 2");
  if (depth > 8) fail("depth", "must be <= 8");
  if (dilation_rates.empty()) fail("dilation_rates", "must not be empty");
  for (int r : dilation_rates)
    if (r < 1) fail("dilation_rates", "rates must be strictly positive");
  if (token_dim < 1) fail("token_dim", "must be >= 1");
  if (heads < 1) fail("heads", "must be >= 1");
  if (token_dim % heads) fail("token_dim", "must be divisible by heads (" + std::to_string(heads) + ")");
  if (ff_mult < 1) fail("ff_mult", "must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate <= 0.9)) fail("dropout_rate", "must lie in [0, 0.9]");
  const int stride = 1 << (depth - 1);
  if (input_height < 8 || input_width < 8) fail("input_height", "spatial size must be at least 8x8");
  if (input_height % stride || input_width % stride)
    fail("input_height", "spatial size must be divisible by 2^(depth-1) = " + std::to_string(stride));
  const int extent = std::max(bottleneck_height(), bottleneck_width());
  for (int r : dilation_rates)
    if (r > extent)
      fail("dilation_rates", "rate " + std::to_string(r) + " exceeds bottleneck extent " + std::to_string(extent));
}

}  // namespace tsseg
