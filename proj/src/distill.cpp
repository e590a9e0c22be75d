// SPDX-License-Identifier: Apache-2.0
#include "spikebert/distill.hpp"

namespace spikebert {

LayerMap build_layer_map(int teacher_layers, int student_layers, int skip_first_k) {
  SPIKEBERT_REQUIRE(teacher_layers >= 1 && student_layers >= 1, "build_layer_map: layer counts must be >= 1");
  SPIKEBERT_REQUIRE(skip_first_k >= 0, "build_layer_map: skip_first_k must be >= 0");
  const int stride = (teacher_layers + student_layers - 1) / student_layers;
  LayerMap map;
  for (int i = 1; i <= student_layers; ++i) {
    if (i <= skip_first_k) continue;
    const int teacher = std::min(i * stride, teacher_layers);
    if (!map.empty() && map.back().teacher >= teacher) continue;
    map.push_back({i, teacher});
  }
  return map;
}

}  // namespace spikebert
