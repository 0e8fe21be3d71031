#include "protostream/tape.hpp"

namespace protostream {

Eigen::VectorXd Tape::gradient(const Var& loss) const {
  if (loss.tape != this || loss.idx < 0)
    throw ValidationError("gradient: loss is not a node on this tape");

  std::vector<double> adjoint(node_count(), 0.0);
  adjoint[static_cast<std::size_t>(loss.idx)] = 1.0;
  for (std::int32_t i = static_cast<std::int32_t>(node_count()) - 1; i >= 0; --i) {
    double a = adjoint[static_cast<std::size_t>(i)];
    if (a == 0.0) continue;
    for (std::uint32_t e = edge_begin_[static_cast<std::size_t>(i)];
         e < edge_begin_[static_cast<std::size_t>(i) + 1]; ++e) {
      adjoint[static_cast<std::size_t>(parent_[e])] += a * partial_[e];
    }
  }

  Eigen::VectorXd g(static_cast<Eigen::Index>(param_nodes_.size()));
  for (std::size_t p = 0; p < param_nodes_.size(); ++p) {
    double gp = adjoint[static_cast<std::size_t>(param_nodes_[p])];
    if (!std::isfinite(gp)) throw NumericalError("gradient: non-finite adjoint");
    g[static_cast<Eigen::Index>(p)] = gp;
  }
  return g;
}

}  // namespace protostream
