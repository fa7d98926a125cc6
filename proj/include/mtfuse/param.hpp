#pragma once

#include <string>
#include <vector>

#include "mtfuse/tensor.hpp"

namespace mtfuse {

/// A trainable tensor with a stable dotted name and the module it belongs to.
struct NamedParam {
  std::string name;
  std::string module;
  Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

}  // namespace mtfuse
