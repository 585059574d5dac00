#pragma once

#include "support.hpp"

#include "tsseg/dataio.hpp"

namespace tsseg::testing {

/// Small synthetic corpus matching tiny_config() (16x16, 4 modalities).
inline SyntheticSpec tiny_spec(int count = 20, std::uint64_t seed = 99) {
  SyntheticSpec s;
  s.count = count;
  s.height = s.width = 16;
  s.labeled_fraction = 0.25;
  s.val_fraction = 0.25;
  s.edema_radius_min = 3.5;
  s.edema_radius_max = 6.0;
  s.seed = seed;
  return s;
}

}  // namespace tsseg::testing
