// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace kunbr {

// One question/answer pair. `incorrect` carries the wrong answer options
// for losses that need them; `tag` names the split the example came from.
struct Example {
  std::vector<int> prompt;
  std::vector<int> target;
  std::vector<std::vector<int>> incorrect;
  std::string tag;
};

using Batch = std::vector<Example>;

}  // namespace kunbr
