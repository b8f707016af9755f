// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "soho/tensor.hpp"

namespace soho {

/// Which optimizer owns a parameter. Conv blocks of the visual backbone go
/// to SGD; everything else (1x1 projection, embeddings, transformer, heads)
/// goes to AdamW.
enum class ParamGroup { kBackbone, kAdaptive };

struct NamedParameter {
  std::string name;
  Tensor tensor;
  ParamGroup group;
};

using ParameterList = std::vector<NamedParameter>;

}  // namespace soho
