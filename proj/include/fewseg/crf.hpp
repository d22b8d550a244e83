#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <vector>

#include "fewseg/tensor.hpp"

namespace fewseg {

// Approximate high-dimensional Gaussian filtering (Adams et al. lattice).
// Features must be pre-scaled by 1/sigma; the filter then approximates
// out_i = sum_j exp(-|f_i - f_j|^2 / 2) * in_j   (self included).
class PermutohedralLattice {
public:
    void init(const Eigen::MatrixXd& features);  // N x d, rows are positions
    // in: N x value_dims -> out: same shape
    Eigen::MatrixXd apply(const Eigen::MatrixXd& in) const;

private:
    int n_ = 0, d_ = 0;
    int lattice_size_ = 0;
    std::vector<int> offsets_;        // N * (d+1) vertex ids
    std::vector<double> barycentric_; // N * (d+1)
    std::vector<int> blur_neighbors_; // lattice_size * (d+1) * 2
};

// Exact truncated separable Gaussian convolution over the pixel grid
// (kernel exp(-(dx^2+dy^2)/2sigma^2), radius ceil(5 sigma), self included).
Eigen::MatrixXd spatial_gaussian_filter(const Eigen::MatrixXd& in, int h, int w, Scalar sigma);

// Pairwise Potts kernel with symmetric normalization, message passing via
// the filters above.
class PairwiseKernel {
public:
    enum class Kind { kGaussianSpatial, kBilateral };

    PairwiseKernel(Kind kind, int h, int w, const ImageU8* image, Scalar sxy, Scalar srgb,
                   Scalar compat);

    // message_i(l) = compat * sum_{j != i} khat_ij q_j(l), khat symmetric-normalized
    Eigen::MatrixXd message(const Eigen::MatrixXd& q) const;

private:
    Eigen::MatrixXd filter(const Eigen::MatrixXd& in) const;

    Kind kind_;
    int h_, w_;
    Scalar sxy_, compat_;
    PermutohedralLattice lattice_;
    Eigen::VectorXd norm_;  // filter(1)
};

}  // namespace fewseg
