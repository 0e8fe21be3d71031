#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

namespace protostream {

// One observation in a stream. view2 is the augmented second view (same
// latent sample, independent observation noise); size 0 means absent.
struct Frame {
  int t = 0;
  std::int64_t context = 0;
  std::int64_t label = -1;  // -1: unlabeled
  Eigen::VectorXd features;
  Eigen::VectorXd view2;
};

using Episode = std::vector<Frame>;

}  // namespace protostream
