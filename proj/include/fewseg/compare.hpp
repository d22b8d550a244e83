#pragma once

#include <Eigen/Dense>
#include <vector>

#include "fewseg/tensor.hpp"

namespace fewseg {

struct CorrelationInputs {
    Eigen::MatrixXd q;   // (Hq*Wq) x d
    Eigen::MatrixXd k;   // (Hs*Ws*k) x d
    Eigen::VectorXd v;   // Hs*Ws*k, values in [0,1]
    int out_h = 0, out_w = 0;
};

// score(i) = sum_j softmax_j(q_i . k_j / sqrt(d)) v_j. Softmax uses
// max-subtraction; sums run in row-major support order.
MapF correlation_map(const CorrelationInputs& in);

// Stack k shots along the spatial axis, shot order preserved.
void concat_shots(const std::vector<const Volume*>& support_feats,
                  const std::vector<const MapF*>& support_masks, Eigen::MatrixXd& k_out,
                  Eigen::VectorXd& v_out);

}  // namespace fewseg
