#include "fewseg/compare.hpp"

namespace fewseg {

MapF correlation_map(const CorrelationInputs& in) {
    const int nq = static_cast<int>(in.q.rows());
    const int ns = static_cast<int>(in.k.rows());
    const int d = static_cast<int>(in.q.cols());
    if (ns == 0) throw ShapeError("correlation_map: empty support");
    if (d == 0 || in.k.cols() != d) throw ShapeError("correlation_map: channel mismatch");
    if (in.v.size() != ns) throw ShapeError("correlation_map: mask length mismatch");
    if (in.out_h * in.out_w != nq) throw ShapeError("correlation_map: output shape mismatch");

    const Scalar inv_sqrt_d = 1.0 / std::sqrt(static_cast<Scalar>(d));
    Eigen::MatrixXd s = (in.q * in.k.transpose()) * inv_sqrt_d;  // nq x ns

    MapF out(in.out_h, in.out_w);
    std::vector<Scalar> e(ns);
    for (int i = 0; i < nq; ++i) {
        Scalar m = s(i, 0);
        for (int j = 1; j < ns; ++j) m = std::max(m, s(i, j));
        Scalar denom = 0.0;
        for (int j = 0; j < ns; ++j) {  // fixed row-major support order
            e[j] = std::exp(s(i, j) - m);
            denom += e[j];
        }
        Scalar acc = 0.0;
        for (int j = 0; j < ns; ++j) acc += e[j] * in.v(j);
        out.data[i] = acc / denom;
    }
    return out;
}

void concat_shots(const std::vector<const Volume*>& support_feats,
                  const std::vector<const MapF*>& support_masks, Eigen::MatrixXd& k_out,
                  Eigen::VectorXd& v_out) {
    if (support_feats.empty() || support_feats.size() != support_masks.size())
        throw ShapeError("concat_shots: shot count mismatch");
    const Volume& first = *support_feats[0];
    const int hw = first.positions();
    const int d = first.c;
    const int shots = static_cast<int>(support_feats.size());
    for (int k = 0; k < shots; ++k) {
        const Volume& f = *support_feats[k];
        const MapF& m = *support_masks[k];
        if (f.h != first.h || f.w != first.w || f.c != d)
            throw ShapeError("concat_shots: heterogeneous feature shapes");
        if (m.h != f.h || m.w != f.w) throw ShapeError("concat_shots: mask shape mismatch");
    }
    k_out.resize(static_cast<Eigen::Index>(hw) * shots, d);
    v_out.resize(static_cast<Eigen::Index>(hw) * shots);
    for (int k = 0; k < shots; ++k) {
        k_out.middleRows(static_cast<Eigen::Index>(k) * hw, hw) = support_feats[k]->rows();
        for (int i = 0; i < hw; ++i) v_out(static_cast<Eigen::Index>(k) * hw + i) =
            support_masks[k]->data[i];
    }
}

}  // namespace fewseg
