#pragma once

#include <stdexcept>
#include <string>

namespace tunescope {

// Single exception type for every recoverable failure in the toolkit.
// Messages name the offending object (tensor, layer, class, batch, byte offset).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tunescope
