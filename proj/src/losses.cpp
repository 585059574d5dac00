#include "tsseg/losses.hpp"

namespace tsseg {

void LossConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("loss." + field + ": " + why);
  };
  if (!(lambda_ce >= 0)) fail("lambda_ce", "must be >= 0");
  if (!(lambda_reg >= 0)) fail("lambda_reg", "must be >= 0");
  if (!(lambda_high >= 0)) fail("lambda_high", "must be >= 0");
  if (!(lambda_low >= 0)) fail("lambda_low", "must be >= 0");
  if (!(epsilon > 0)) fail("epsilon", "must be > 0");
  if (!(tau_p > 0 && tau_p < 1)) fail("tau_p", "must lie in (0, 1)");
  if (!(kappa > 0)) fail("kappa", "must be > 0");
  if (!(var_floor > 0)) fail("var_floor", "must be > 0");
  if (!(percentile >= 0 && percentile <= 100)) fail("percentile", "must lie in [0, 100]");
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile: empty input");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * double(values.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - double(lo)) * (values[hi] - values[lo]);
}

}  // namespace tsseg
